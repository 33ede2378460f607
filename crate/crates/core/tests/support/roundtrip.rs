//! Annotation -> raster -> contour -> raster round trip on phantoms.

#![allow(dead_code)]

use mammoseg_core::evaluation::iou;
use mammoseg_core::geometry::{extract_contours, rasterize_polygon};
use mammoseg_core::testkit::{generate_phantom, Phantom, PhantomParams};
use mammoseg_core::{Laterality, StructureClass, View};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ROUND_TRIP_TOLERANCE_PX: f64 = 0.5;

pub fn phantom(seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = if seed % 2 == 0 { View::Mlo } else { View::Cc };
    let lat = if seed % 3 == 0 { Laterality::L } else { Laterality::R };
    let mut params = PhantomParams::sample(&mut rng, view, lat, 0.57);
    params.image_id = format!("rt{seed}");
    generate_phantom(&params).unwrap()
}

/// IoU per annotated structure between its polygon mask and the re-rasterized
/// contours traced from that mask.
pub fn structure_round_trip(p: &Phantom, tolerance: f64) -> Vec<(StructureClass, f64)> {
    let (w, h) = (p.record.width, p.record.height);
    p.annotation
        .structures
        .in_paint_order()
        .into_iter()
        .map(|(class, poly)| {
            let mask = rasterize_polygon(poly, w, h);
            let mut back = Array2::from_elem((h, w), false);
            for c in extract_contours(mask.view(), tolerance) {
                back.zip_mut_with(&rasterize_polygon(&c, w, h), |a, &b| *a |= b);
            }
            (class, iou(back.view(), mask.view()).unwrap())
        })
        .collect()
}
