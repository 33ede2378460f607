//! Synthetic mammography phantoms with exact ground truth.
//!
//! A phantom is drawn in right-breast orientation (chest wall at x = 0) and
//! mirrored for left breasts. The breast is a half disc; MLO views carry a
//! triangular pectoral muscle in the upper posterior corner, CC views
//! optionally a thin half-ellipse along the chest wall. A lobed
//! fibroglandular region sits inside the breast and a small nipple disc on
//! the breast boundary.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{save_png16, write_annotation, write_density_csv, IngestError};
use crate::types::{
    AnnotationDocument, AnnotationSet, DensityClass, ImageRecord, LabelMap, Laterality, Point, Polygon,
    StructureClass, Structures, View, MAX_RAW_VALUE,
};

#[derive(Debug, Error)]
pub enum TestkitError {
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] IngestError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueLevels {
    pub background: f64,
    pub fatty: f64,
    pub fibroglandular: f64,
    pub pectoral: f64,
    pub nipple: f64,
}

impl Default for TissueLevels {
    fn default() -> Self {
        Self {
            background: 50.0,
            fatty: 1500.0,
            fibroglandular: 2100.0,
            pectoral: 2600.0,
            nipple: 2750.0,
        }
    }
}

impl TissueLevels {
    fn of(&self, class: StructureClass) -> f64 {
        match class {
            StructureClass::Background => self.background,
            StructureClass::Fatty => self.fatty,
            StructureClass::Fibroglandular => self.fibroglandular,
            StructureClass::Pectoral => self.pectoral,
            StructureClass::Nipple => self.nipple,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PectoralShape {
    None,
    /// Right triangle in the upper posterior corner; legs as fractions of
    /// image width and height.
    Triangle { width_fraction: f64, height_fraction: f64 },
    /// Half ellipse on the chest wall centred on the breast; semi-axes as
    /// fractions of the breast radius.
    Arc { depth_fraction: f64, span_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub seed: u64,
    pub image_id: String,
    pub exam_id: String,
    pub width: usize,
    pub height: usize,
    pub view: View,
    pub laterality: Laterality,
    pub pixel_spacing_mm: f64,
    /// Breast radius as a fraction of `min(width, height / 2)`.
    pub breast_radius_fraction: f64,
    /// Vertical breast centre as a fraction of the height.
    pub breast_center_fraction: f64,
    pub pectoral: PectoralShape,
    /// Number of lobes on the fibroglandular outline.
    pub fibro_lobes: u32,
    /// Size of the fibroglandular region relative to the breast radius.
    pub fibro_spread: f64,
    /// Nipple radius as a fraction of the breast radius.
    pub nipple_radius_fraction: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub levels: TissueLevels,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            seed: 0,
            image_id: "phantom".into(),
            exam_id: "exam".into(),
            width: 208,
            height: 256,
            view: View::Mlo,
            laterality: Laterality::R,
            pixel_spacing_mm: 0.1,
            breast_radius_fraction: 0.85,
            breast_center_fraction: 0.5,
            pectoral: PectoralShape::Triangle {
                width_fraction: 0.35,
                height_fraction: 0.5,
            },
            fibro_lobes: 3,
            fibro_spread: 1.0,
            nipple_radius_fraction: 0.1,
            noise_sigma: 60.0,
            levels: TissueLevels::default(),
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<(), TestkitError> {
        let bad = |m: String| Err(TestkitError::InvalidParams(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("image must be at least 16x16, got {}x{}", self.width, self.height));
        }
        if !(0.2..=1.0).contains(&self.breast_radius_fraction) {
            return bad(format!("breast_radius_fraction {} outside [0.2, 1]", self.breast_radius_fraction));
        }
        if !(0.25..=0.75).contains(&self.breast_center_fraction) {
            return bad(format!("breast_center_fraction {} outside [0.25, 0.75]", self.breast_center_fraction));
        }
        if !(0.3..=1.4).contains(&self.fibro_spread) {
            return bad(format!("fibro_spread {} outside [0.3, 1.4]", self.fibro_spread));
        }
        if !(0.02..=0.3).contains(&self.nipple_radius_fraction) {
            return bad(format!("nipple_radius_fraction {} outside [0.02, 0.3]", self.nipple_radius_fraction));
        }
        if self.fibro_lobes > 8 {
            return bad(format!("fibro_lobes {} above 8", self.fibro_lobes));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if self.pixel_spacing_mm <= 0.0 {
            return bad("pixel_spacing_mm must be positive".into());
        }
        let l = &self.levels;
        let ordered = l.background < l.fatty && l.fatty < l.fibroglandular && l.fibroglandular < l.pectoral;
        let in_range = [l.background, l.fatty, l.fibroglandular, l.pectoral, l.nipple]
            .iter()
            .all(|v| (0.0..=MAX_RAW_VALUE as f64).contains(v));
        if !ordered || !in_range || l.nipple <= l.fibroglandular {
            return bad("tissue levels must satisfy background < fatty < fibro < pectoral, nipple > fibro, all in [0, 4095]".into());
        }
        match self.pectoral {
            PectoralShape::Triangle {
                width_fraction,
                height_fraction,
            } if !(0.05..=0.9).contains(&width_fraction) || !(0.05..=0.9).contains(&height_fraction) => {
                return bad("pectoral triangle fractions must lie in [0.05, 0.9]".into())
            }
            PectoralShape::Arc {
                depth_fraction,
                span_fraction,
            } if !(0.02..=0.4).contains(&depth_fraction) || !(0.1..=0.9).contains(&span_fraction) => {
                return bad("pectoral arc fractions out of range".into())
            }
            PectoralShape::None if self.view == View::Mlo => return bad("MLO phantoms need a pectoral muscle".into()),
            _ => {}
        }
        Ok(())
    }

    /// Randomized parameters for one image of an exam.
    pub fn sample(rng: &mut impl Rng, view: View, laterality: Laterality, cc_pectoral_probability: f64) -> Self {
        let pectoral = match view {
            View::Mlo => PectoralShape::Triangle {
                width_fraction: rng.random_range(0.28..0.42),
                height_fraction: rng.random_range(0.42..0.6),
            },
            View::Cc if rng.random_bool(cc_pectoral_probability.clamp(0.0, 1.0)) => PectoralShape::Arc {
                depth_fraction: rng.random_range(0.08..0.16),
                span_fraction: rng.random_range(0.35..0.6),
            },
            View::Cc => PectoralShape::None,
        };
        Self {
            seed: rng.random(),
            view,
            laterality,
            breast_radius_fraction: rng.random_range(0.78..0.92),
            breast_center_fraction: rng.random_range(0.46..0.54),
            pectoral,
            fibro_lobes: rng.random_range(2..=5),
            fibro_spread: rng.random_range(0.8..1.1),
            nipple_radius_fraction: rng.random_range(0.09..0.12),
            ..Self::default()
        }
    }
}

/// Geometry in canonical (right-breast) image coordinates.
#[derive(Debug, Clone)]
struct Layout {
    cy: f64,
    radius: f64,
    pectoral: PectoralShape,
    fibro: Fibro,
    nipple_radius: f64,
    width: f64,
    height: f64,
}

#[derive(Debug, Clone)]
struct Fibro {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    lobes: Vec<(f64, f64, f64)>,
}

impl Fibro {
    fn radius_at(&self, theta: f64) -> f64 {
        let base = 1.0 / ((theta.cos() / self.ax).powi(2) + (theta.sin() / self.ay).powi(2)).sqrt();
        let wobble: f64 = self
            .lobes
            .iter()
            .map(|&(k, amp, phase)| amp * (k * theta + phase).cos())
            .sum();
        base * (1.0 + wobble)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * dx + dy * dy).sqrt() <= self.radius_at(dy.atan2(dx))
    }

    fn area(&self) -> f64 {
        let n = 720;
        (0..n)
            .map(|i| {
                let r = self.radius_at(2.0 * PI * i as f64 / n as f64);
                0.5 * r * r * 2.0 * PI / n as f64
            })
            .sum()
    }
}

impl Layout {
    fn new(p: &PhantomParams, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (p.width as f64, p.height as f64);
        let radius = p.breast_radius_fraction * w.min(h / 2.0);
        let cy = p.breast_center_fraction * h;
        let lobes = (0..p.fibro_lobes)
            .map(|i| {
                (
                    (i + 2) as f64,
                    rng.random_range(0.04..0.12),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let fibro = Fibro {
            cx: 0.5 * radius,
            cy: cy + rng.random_range(-0.05..0.05) * radius,
            ax: 0.3 * radius * p.fibro_spread,
            ay: 0.24 * radius * p.fibro_spread,
            lobes,
        };
        Self {
            cy,
            radius,
            pectoral: p.pectoral,
            fibro,
            nipple_radius: p.nipple_radius_fraction * radius,
            width: w,
            height: h,
        }
    }

    fn nipple_center(&self) -> (f64, f64) {
        (self.radius, self.cy)
    }

    fn class_at(&self, x: f64, y: f64) -> StructureClass {
        let (nx, ny) = self.nipple_center();
        if (x - nx).powi(2) + (y - ny).powi(2) <= self.nipple_radius.powi(2) {
            return StructureClass::Nipple;
        }
        let in_pectoral = match self.pectoral {
            PectoralShape::None => false,
            PectoralShape::Triangle {
                width_fraction,
                height_fraction,
            } => x / (width_fraction * self.width) + y / (height_fraction * self.height) <= 1.0,
            PectoralShape::Arc {
                depth_fraction,
                span_fraction,
            } => {
                (x / (depth_fraction * self.radius)).powi(2) + ((y - self.cy) / (span_fraction * self.radius)).powi(2) <= 1.0
            }
        };
        if in_pectoral {
            return StructureClass::Pectoral;
        }
        if self.fibro.contains(x, y) {
            return StructureClass::Fibroglandular;
        }
        if x * x + (y - self.cy).powi(2) <= self.radius.powi(2) {
            return StructureClass::Fatty;
        }
        StructureClass::Background
    }

    fn polygons(&self) -> Structures {
        let arc = |cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, n: usize| -> Vec<Point> {
            (0..=n)
                .map(|i| {
                    let t = from + (to - from) * i as f64 / n as f64;
                    Point::new(cx + rx * t.cos(), cy + ry * t.sin())
                })
                .collect()
        };
        let poly = |pts: Vec<Point>| Polygon::from_points_dedup(pts).expect("phantom polygon");
        let fatty = poly(arc(0.0, self.cy, self.radius, self.radius, -PI / 2.0, PI / 2.0, 360));
        let fibro = poly(
            (0..512)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / 512.0;
                    let r = self.fibro.radius_at(t);
                    Point::new(self.fibro.cx + r * t.cos(), self.fibro.cy + r * t.sin())
                })
                .collect(),
        );
        let pectoral = match self.pectoral {
            PectoralShape::None => None,
            PectoralShape::Triangle {
                width_fraction,
                height_fraction,
            } => Some(poly(vec![
                Point::new(0.0, 0.0),
                Point::new(width_fraction * self.width, 0.0),
                Point::new(0.0, height_fraction * self.height),
            ])),
            PectoralShape::Arc {
                depth_fraction,
                span_fraction,
            } => Some(poly(arc(
                0.0,
                self.cy,
                depth_fraction * self.radius,
                span_fraction * self.radius,
                -PI / 2.0,
                PI / 2.0,
                180,
            ))),
        };
        let (nx, ny) = self.nipple_center();
        let mut nipple_pts = arc(nx, ny, self.nipple_radius, self.nipple_radius, 0.0, 2.0 * PI, 128);
        nipple_pts.pop();
        // Clip to the frame so the polygon stays inside the image bounds.
        let nipple = poly(
            nipple_pts
                .into_iter()
                .map(|p| Point::new(p.x.min(self.width), p.y.clamp(0.0, self.height)))
                .collect(),
        );
        Structures {
            fatty,
            fibroglandular: fibro,
            pectoral,
            nipple,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub record: ImageRecord,
    pub annotation: AnnotationSet,
    /// Label map from the analytic shapes, in the record's orientation.
    pub labels: LabelMap,
    /// Analytic fibroglandular area over breast area.
    pub fibro_fraction: f64,
}

pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom, TestkitError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let layout = Layout::new(params, &mut rng);
    let (w, h) = (params.width, params.height);
    let flip = params.laterality == Laterality::L;
    let mut codes = Array2::<u8>::zeros((h, w));
    let mut pixels = Array2::<u16>::zeros((h, w));
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for r in 0..h {
        for c in 0..w {
            let class = layout.class_at(c as f64 + 0.5, r as f64 + 0.5);
            let col = if flip { w - 1 - c } else { c };
            codes[[r, col]] = class.code();
            let n = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let v = (params.levels.of(class) + n).round().clamp(0.0, MAX_RAW_VALUE as f64);
            pixels[[r, col]] = v as u16;
        }
    }
    let mut structures = layout.polygons();
    if flip {
        structures = structures.map(|p| p.flip_horizontal(w as f64));
    }
    let breast_area = PI * layout.radius.powi(2) / 2.0;
    Ok(Phantom {
        record: ImageRecord::new(
            params.image_id.clone(),
            params.exam_id.clone(),
            params.view,
            params.laterality,
            params.pixel_spacing_mm,
            pixels,
        ),
        annotation: AnnotationSet {
            image_id: params.image_id.clone(),
            version: 1,
            structures,
        },
        labels: LabelMap::new(codes).expect("codes below 5"),
        fibro_fraction: layout.fibro.area() / breast_area,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Chance that a CC image shows a pectoral muscle.
    pub cc_pectoral_probability: f64,
    /// Chance that each of the four standard images of an exam is present.
    pub image_probability: f64,
    /// Share of exams whose density is withheld (`ND`).
    pub nd_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            seed: 7,
            width: 208,
            height: 256,
            cc_pectoral_probability: 0.57,
            image_probability: 0.9,
            nd_fraction: 0.2,
            noise_sigma: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub exams: usize,
    pub images: usize,
    pub density_counts: [usize; 5],
    pub image_ids: Vec<String>,
}

/// Writes `n_exams` synthetic exams in the dataset layout under `out_dir`.
///
/// Each exam has up to four images (MLO/CC, left/right) sharing one
/// fibroglandular size; density classes are the quartiles of that size over
/// the corpus, with a random share of exams reported as ND.
pub fn generate_corpus(n_exams: usize, params: &CorpusParams, out_dir: &Path) -> Result<CorpusSummary, TestkitError> {
    if n_exams == 0 {
        return Err(TestkitError::InvalidParams("n_exams must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&params.nd_fraction) || !(0.0..=1.0).contains(&params.image_probability) {
        return Err(TestkitError::InvalidParams("probabilities must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let spreads: Vec<f64> = (0..n_exams).map(|_| rng.random_range(0.75..1.15)).collect();
    let mut sorted = spreads.clone();
    sorted.sort_by(f64::total_cmp);
    let quartile = |s: f64| -> DensityClass {
        let rank = sorted.partition_point(|&v| v < s);
        DensityClass::KNOWN[(4 * rank / n_exams).min(3)]
    };
    let densities: Vec<DensityClass> = spreads
        .iter()
        .map(|&s| {
            if rng.random_bool(params.nd_fraction) {
                DensityClass::Nd
            } else {
                quartile(s)
            }
        })
        .collect();

    let images_dir = out_dir.join("images");
    let ann_dir = out_dir.join("annotations");
    let mut density_rows = Vec::new();
    let mut image_ids = Vec::new();
    let mut density_counts = [0usize; 5];
    for (e, (&spread, &density)) in spreads.iter().zip(&densities).enumerate() {
        let exam_id = format!("exam{e:04}");
        density_counts[density.index()] += 1;
        let slots: Vec<(View, Laterality)> = [View::Mlo, View::Cc]
            .into_iter()
            .flat_map(|v| [Laterality::L, Laterality::R].map(|l| (v, l)))
            .collect();
        let mut present: Vec<bool> = slots.iter().map(|_| rng.random_bool(params.image_probability)).collect();
        if !present.iter().any(|&p| p) {
            let k = rng.random_range(0..slots.len());
            present[k] = true;
        }
        for (&(view, laterality), keep) in slots.iter().zip(present) {
            let mut p = PhantomParams::sample(&mut rng, view, laterality, params.cc_pectoral_probability);
            if !keep {
                continue;
            }
            p.image_id = format!("{exam_id}_{view}_{laterality}");
            p.exam_id = exam_id.clone();
            p.width = params.width;
            p.height = params.height;
            p.noise_sigma = params.noise_sigma;
            p.fibro_spread = spread;
            let phantom = generate_phantom(&p)?;
            save_png16(&phantom.record, &images_dir)?;
            let doc = AnnotationDocument {
                image_id: p.image_id.clone(),
                exam_id: exam_id.clone(),
                view,
                laterality,
                pixel_spacing_mm: p.pixel_spacing_mm,
                density,
                version: phantom.annotation.version,
                structures: phantom.annotation.structures,
            };
            write_annotation(&ann_dir.join(format!("{}.json", p.image_id)), &doc)?;
            density_rows.push((p.image_id.clone(), density));
            image_ids.push(p.image_id);
        }
    }
    write_density_csv(&out_dir.join("density.csv"), &density_rows)?;
    Ok(CorpusSummary {
        exams: n_exams,
        images: image_ids.len(),
        density_counts,
        image_ids,
    })
}

/// Path of an image written by [`generate_corpus`].
pub fn corpus_image_path(out_dir: &Path, image_id: &str) -> PathBuf {
    out_dir.join("images").join(format!("{image_id}.png"))
}
