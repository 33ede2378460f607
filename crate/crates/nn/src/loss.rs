//! Soft Jaccard loss over class probability planes.

use mammoseg_core::LabelMap;
use thiserror::Error;

use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("ShapeMismatch: prediction {pred:?} vs target {target:?}")]
    ShapeMismatch { pred: [usize; 4], target: [usize; 4] },
}

/// One-hot `[N, classes, H, W]` targets from label maps.
pub fn one_hot_batch<T: Real>(labels: &[&LabelMap], classes: usize) -> Tensor<T> {
    let (h, w) = labels.first().map(|l| (l.height(), l.width())).unwrap_or((0, 0));
    let mut t = Tensor::zeros([labels.len(), classes, h, w]);
    for (n, l) in labels.iter().enumerate() {
        assert_eq!((l.height(), l.width()), (h, w), "label maps differ in shape");
        for (i, &code) in l.codes().iter().enumerate() {
            t.plane_mut(n, code as usize)[i] = T::one();
        }
    }
    t
}

struct ClassSums {
    inter: Vec<f64>,
    union: Vec<f64>,
}

fn class_sums<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<ClassSums, LossError> {
    if pred.shape != target.shape {
        return Err(LossError::ShapeMismatch {
            pred: pred.shape,
            target: target.shape,
        });
    }
    let c = pred.c();
    let mut inter = vec![0.0; c];
    let mut union = vec![0.0; c];
    for n in 0..pred.n() {
        for k in 0..c {
            let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for (&p, &g) in pred.plane(n, k).iter().zip(target.plane(n, k)) {
                let (p, g) = (p.to_f64(), g.to_f64());
                i += p * g;
                sp += p;
                sg += g;
            }
            inter[k] += i;
            union[k] += sp + sg - i;
        }
    }
    Ok(ClassSums { inter, union })
}

/// `1 - mean_c (I_c + eps) / (U_c + eps)` with intersections and unions
/// summed over the batch and all pixels of each class.
pub fn jaccard_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<f64, LossError> {
    let s = class_sums(pred, target)?;
    let c = s.inter.len() as f64;
    let mean = s.inter.iter().zip(&s.union).map(|(i, u)| (i + eps) / (u + eps)).sum::<f64>() / c;
    Ok(1.0 - mean)
}

/// Loss and its gradient with respect to `pred`.
pub fn jaccard_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>), LossError> {
    let s = class_sums(pred, target)?;
    let c = s.inter.len();
    let mut grad = Tensor::zeros(pred.shape);
    let mut total = 0.0;
    for k in 0..c {
        let (i, u) = (s.inter[k] + eps, s.union[k] + eps);
        total += i / u;
        // dJ/dp = (g u - i (1 - g)) / u^2, loss = 1 - J/C.
        let a = T::from_f64(-1.0 / (c as f64 * u));
        let b = T::from_f64(i / (c as f64 * u * u));
        for n in 0..pred.n() {
            let g_plane = target.plane(n, k);
            for (d, &g) in grad.plane_mut(n, k).iter_mut().zip(g_plane) {
                *d = a * g + b * (T::one() - g);
            }
        }
    }
    Ok((1.0 - total / c as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::strategy::Strategy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let labels = LabelMap::new(ndarray::Array2::from_shape_fn((9, 7), |(r, c)| ((r + c) % 5) as u8)).unwrap();
        let t: Tensor<f64> = one_hot_batch(&[&labels], 5);
        assert!(jaccard_loss(&t, &t, 1.0).unwrap() <= 1e-6);
    }

    #[test]
    fn single_pixel_disjoint() {
        // prediction class 1, target class 2 on one pixel, 5 classes
        let mut p = Tensor::<f64>::zeros([1, 5, 1, 1]);
        p.data[1] = 1.0;
        let mut g = Tensor::<f64>::zeros([1, 5, 1, 1]);
        g.data[2] = 1.0;
        let expected = 1.0 - (3.0 + 2.0 * (1.0 / 2.0)) / 5.0;
        assert!((jaccard_loss(&p, &g, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        /// On one-hot inputs the smoothed loss is within `2 eps / U` of
        /// `1 - mean IoU`, where `U` is the smallest non-empty class union.
        #[test]
        fn hard_masks_track_one_minus_iou(
            (h, w, a, b) in (2usize..12, 2usize..12).prop_flat_map(|(h, w)| (
                proptest::prelude::Just(h),
                proptest::prelude::Just(w),
                proptest::collection::vec(0u8..5, h * w),
                proptest::collection::vec(0u8..5, h * w),
            )),
            eps in 1e-6f64..1.0,
        ) {
            let pa = LabelMap::new(ndarray::Array2::from_shape_vec((h, w), a.clone()).unwrap()).unwrap();
            let pb = LabelMap::new(ndarray::Array2::from_shape_vec((h, w), b.clone()).unwrap()).unwrap();
            let loss = jaccard_loss(&one_hot_batch::<f64>(&[&pa], 5), &one_hot_batch::<f64>(&[&pb], 5), eps).unwrap();
            let mut ious = Vec::new();
            let mut smallest = usize::MAX;
            for k in 0..5u8 {
                let inter = a.iter().zip(&b).filter(|&(&x, &y)| x == k && y == k).count();
                let union = a.iter().zip(&b).filter(|&(&x, &y)| x == k || y == k).count();
                if union == 0 {
                    ious.push(1.0);
                } else {
                    smallest = smallest.min(union);
                    ious.push(inter as f64 / union as f64);
                }
            }
            let expected = 1.0 - ious.iter().sum::<f64>() / 5.0;
            proptest::prop_assert!((loss - expected).abs() <= 2.0 * eps / smallest as f64, "{} vs {}", loss, expected);
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::<f32>::zeros([1, 5, 2, 2]);
        let g = Tensor::<f32>::zeros([1, 5, 2, 3]);
        assert!(matches!(jaccard_loss(&p, &g, 1.0), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = [2, 3, 4, 4];
        let len = shape.iter().product();
        let p = Tensor::from_vec(shape, (0..len).map(|_| rng.random::<f64>()).collect());
        let g = Tensor::from_vec(shape, (0..len).map(|_| f64::from(rng.random_bool(0.4))).collect());
        let (loss, grad) = jaccard_loss_grad(&p, &g, 1.0).unwrap();
        assert!((loss - jaccard_loss(&p, &g, 1.0).unwrap()).abs() < 1e-15);
        let h = 1e-6;
        for i in 0..len {
            let mut a = p.clone();
            a.data[i] += h;
            let mut b = p.clone();
            b.data[i] -= h;
            let num = (jaccard_loss(&a, &g, 1.0).unwrap() - jaccard_loss(&b, &g, 1.0).unwrap()) / (2.0 * h);
            assert!((num - grad.data[i]).abs() < 1e-8, "{i}: {num} vs {}", grad.data[i]);
        }
    }
}
