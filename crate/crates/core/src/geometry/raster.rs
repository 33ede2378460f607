use ndarray::{Array2, Array3, Axis};

use super::GeometryError;
use crate::types::{AnnotationSet, LabelMap, Polygon, ProbabilityMaps, StructureClass, NUM_CLASSES};

/// Default tolerance for vertices lying outside the image frame.
pub const DEFAULT_MARGIN_PX: f64 = 1.0;

/// Paints `value` into every pixel whose center `(c + 0.5, r + 0.5)` lies
/// inside `poly` under the even-odd rule.
///
/// An edge crosses the scanline at `py` when exactly one endpoint has
/// `y <= py`; a center at `px` is inside when an odd number of crossings lie
/// strictly to its right.
pub fn fill_polygon(target: &mut Array2<u8>, poly: &Polygon, value: u8) {
    let (h, w) = target.dim();
    let mut xs: Vec<f64> = Vec::with_capacity(16);
    let (lo, hi) = poly.bounds();
    let row_start = (lo.y - 0.5).floor().max(0.0) as usize;
    let row_end = ((hi.y + 0.5).ceil().max(0.0) as usize).min(h);
    for row in row_start..row_end {
        let py = row as f64 + 0.5;
        xs.clear();
        for (a, b) in poly.edges() {
            if (a.y <= py) != (b.y <= py) {
                xs.push(a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            let start = first_center_at_or_after(pair[0], w);
            let end = first_center_at_or_after(pair[1], w);
            for col in start..end {
                target[[row, col]] = value;
            }
        }
    }
}

/// Smallest column `c` in `0..=w` with `c + 0.5 >= x`.
fn first_center_at_or_after(x: f64, w: usize) -> usize {
    if !(x > 0.5) {
        return 0;
    }
    let mut c = ((x - 0.5).ceil() as usize).min(w);
    while c > 0 && (c - 1) as f64 + 0.5 >= x {
        c -= 1;
    }
    while c < w && (c as f64 + 0.5) < x {
        c += 1;
    }
    c
}

fn check_bounds(
    class: StructureClass,
    poly: &Polygon,
    width: usize,
    height: usize,
    margin: f64,
) -> Result<(), GeometryError> {
    for (index, v) in poly.vertices().iter().enumerate() {
        if v.x < -margin || v.y < -margin || v.x > width as f64 + margin || v.y > height as f64 + margin {
            return Err(GeometryError::PolygonOutOfBounds {
                structure: class,
                index,
                x: v.x,
                y: v.y,
            });
        }
    }
    Ok(())
}

/// Background fill followed by fatty, fibroglandular, pectoral and nipple,
/// each overwriting the previous ones.
pub fn rasterize_annotations(
    ann: &AnnotationSet,
    width: usize,
    height: usize,
) -> Result<LabelMap, GeometryError> {
    rasterize_annotations_with_margin(ann, width, height, DEFAULT_MARGIN_PX)
}

pub fn rasterize_annotations_with_margin(
    ann: &AnnotationSet,
    width: usize,
    height: usize,
    margin_px: f64,
) -> Result<LabelMap, GeometryError> {
    let mut labels = LabelMap::filled(height, width, StructureClass::Background);
    for (class, poly) in ann.structures.in_paint_order() {
        check_bounds(class, poly, width, height, margin_px)?;
        fill_polygon(labels.codes_mut(), poly, class.code());
    }
    Ok(labels)
}

/// Binary mask of one polygon.
pub fn rasterize_polygon(poly: &Polygon, width: usize, height: usize) -> Array2<bool> {
    let mut codes = Array2::zeros((height, width));
    fill_polygon(&mut codes, poly, 1);
    codes.mapv(|c| c == 1)
}

/// One binary plane per class.
pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Result<ProbabilityMaps, GeometryError> {
    let codes = labels.codes();
    if let Some(&code) = codes.iter().find(|&&c| c as usize >= num_classes) {
        return Err(GeometryError::CodeOutOfRange { code, num_classes });
    }
    if num_classes != NUM_CLASSES {
        return Err(GeometryError::ClassCount(num_classes));
    }
    let (h, w) = codes.dim();
    let planes = Array3::from_shape_fn((num_classes, h, w), |(c, r, col)| {
        if codes[[r, col]] as usize == c {
            1.0
        } else {
            0.0
        }
    });
    Ok(ProbabilityMaps::new(planes).expect("one-hot planes are normalized"))
}

/// Per-pixel index of the largest plane; ties go to the lowest class code.
pub fn argmax_labels(probs: &ProbabilityMaps) -> LabelMap {
    let planes = probs.planes();
    let (_, h, w) = planes.dim();
    let codes = Array2::from_shape_fn((h, w), |(r, c)| {
        let column = planes.index_axis(Axis(2), c);
        let column = column.index_axis(Axis(1), r);
        let mut best = 0usize;
        for k in 1..column.len() {
            if column[k] > column[best] {
                best = k;
            }
        }
        best as u8
    });
    LabelMap::new(codes).expect("argmax is a class index")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Point, Structures};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Crossing-number test at one point.
    fn brute_inside(poly: &Polygon, px: f64, py: f64) -> bool {
        let v = poly.vertices();
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[j], v[i]);
            if (a.y <= py) != (b.y <= py) {
                let x = a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y);
                if px < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
        .unwrap()
    }

    fn tiny() -> Polygon {
        // Lies strictly between pixel centers.
        Polygon::new(vec![Point::new(0.6, 0.6), Point::new(0.9, 0.6), Point::new(0.6, 0.9)]).unwrap()
    }

    #[test]
    fn degenerate_polygons_cover_nothing() {
        let ann = AnnotationSet {
            image_id: "t".into(),
            version: 0,
            structures: Structures {
                fatty: tiny(),
                fibroglandular: tiny(),
                pectoral: None,
                nipple: tiny(),
            },
        };
        let labels = rasterize_annotations(&ann, 4, 4).unwrap();
        assert!(labels.codes().iter().all(|&c| c == 0));
    }

    #[test]
    fn nipple_unit_square_over_full_frame_fatty() {
        let ann = AnnotationSet {
            image_id: "t".into(),
            version: 0,
            structures: Structures {
                fatty: square(0., 0., 4., 4.),
                fibroglandular: tiny(),
                pectoral: None,
                nipple: square(1., 1., 2., 2.),
            },
        };
        let labels = rasterize_annotations(&ann, 4, 4).unwrap();
        // Brute force per pixel center.
        for r in 0..4 {
            for c in 0..4 {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                let expected = if brute_inside(&ann.structures.nipple, px, py) {
                    4
                } else if brute_inside(&ann.structures.fatty, px, py) {
                    1
                } else {
                    0
                };
                assert_eq!(labels.codes()[[r, c]], expected);
            }
        }
        assert_eq!(labels.codes()[[1, 1]], 4);
        assert_eq!(labels.count(StructureClass::Fatty), 15);
    }

    #[test]
    fn pectoral_wins_over_fibroglandular() {
        let ann = AnnotationSet {
            image_id: "t".into(),
            version: 0,
            structures: Structures {
                fatty: square(0., 0., 8., 8.),
                fibroglandular: square(0., 0., 5., 5.),
                pectoral: Some(square(3., 3., 8., 8.)),
                nipple: tiny(),
            },
        };
        let labels = rasterize_annotations(&ann, 8, 8).unwrap();
        assert_eq!(labels.codes()[[4, 4]], 3);
        assert_eq!(labels.codes()[[1, 1]], 2);
        assert_eq!(labels.codes()[[7, 0]], 1);
    }

    #[test]
    fn out_of_bounds_vertex_errors() {
        let ann = AnnotationSet {
            image_id: "t".into(),
            version: 0,
            structures: Structures {
                fatty: square(0., 0., 20., 4.),
                fibroglandular: tiny(),
                pectoral: None,
                nipple: tiny(),
            },
        };
        assert!(matches!(
            rasterize_annotations(&ann, 4, 4),
            Err(GeometryError::PolygonOutOfBounds { structure: StructureClass::Fatty, .. })
        ));
    }

    #[test]
    fn one_hot_definition() {
        let labels = LabelMap::new(array![[0u8, 1], [4, 2]]).unwrap();
        let p = one_hot(&labels, 5).unwrap();
        let planes = p.planes();
        for c in 0..5 {
            let ones = planes.index_axis(Axis(0), c).iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, if c == 3 { 0 } else { 1 });
        }
        assert_eq!(planes[[4, 1, 0]], 1.0);
        assert_eq!(argmax_labels(&p), labels);

        let bg = LabelMap::filled(3, 3, StructureClass::Background);
        let p = one_hot(&bg, 5).unwrap();
        assert!(p.planes().index_axis(Axis(0), 0).iter().all(|&v| v == 1.0));
        assert!(p.planes().iter().filter(|&&v| v == 1.0).count() == 9);
    }

    #[test]
    fn argmax_tie_break_and_plain_max() {
        let mut planes = Array3::from_elem((5, 1, 2), 0.2f32);
        for (k, v) in [0.1, 0.5, 0.1, 0.2, 0.1].iter().enumerate() {
            planes[[k, 0, 1]] = *v;
        }
        let p = ProbabilityMaps::new(planes).unwrap();
        let l = argmax_labels(&p);
        assert_eq!(l.codes(), &array![[0u8, 1]]);
    }

    #[test]
    fn priority_matches_brute_force_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let random_poly = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(3..8);
            Polygon::from_points_dedup(
                (0..n).map(|_| Point::new(rng.random_range(0.0..12.0), rng.random_range(0.0..10.0))),
            )
            .unwrap()
        };
        for _ in 0..100 {
            let s = Structures {
                fatty: random_poly(&mut rng),
                fibroglandular: random_poly(&mut rng),
                pectoral: Some(random_poly(&mut rng)),
                nipple: random_poly(&mut rng),
            };
            let ann = AnnotationSet { image_id: "r".into(), version: 0, structures: s };
            let labels = rasterize_annotations(&ann, 12, 10).unwrap();
            for r in 0..10 {
                for c in 0..12 {
                    let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                    let expected = ann
                        .structures
                        .in_paint_order()
                        .iter()
                        .rev()
                        .find(|(_, p)| brute_inside(p, px, py))
                        .map(|(cls, _)| cls.code())
                        .unwrap_or(0);
                    assert_eq!(labels.codes()[[r, c]], expected);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn one_hot_then_argmax_is_identity(
            h in 1usize..8, w in 1usize..8, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes = Array2::from_shape_fn((h, w), |_| rng.random_range(0u8..5));
            let labels = LabelMap::new(codes).unwrap();
            prop_assert_eq!(argmax_labels(&one_hot(&labels, 5).unwrap()), labels);
        }

        #[test]
        fn raster_flip_commutes_with_polygon_flip(
            pts in proptest::collection::vec((0.0f64..16.0, 0.0f64..9.0), 3..9)
        ) {
            if let Ok(poly) = Polygon::from_points_dedup(pts.into_iter().map(|(x, y)| Point::new(x, y))) {
                let w = 16;
                let direct = rasterize_polygon(&poly.flip_horizontal(w as f64), w, 9);
                let mut flipped = rasterize_polygon(&poly, w, 9);
                flipped.invert_axis(Axis(1));
                prop_assert_eq!(direct, flipped);
            }
        }
    }
}
