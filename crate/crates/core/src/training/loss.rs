use ndarray::{Array, Array2, Array3, Dimension};

use crate::error::{Error, Result};

/// NRMSE of `pred` against `reference` and its gradient with respect to
/// `pred`. The gradient is taken as zero where the error vanishes.
pub fn nrmse_with_grad<D: Dimension>(pred: &Array<f64, D>, reference: &Array<f64, D>) -> Result<(f64, Array<f64, D>)> {
    if pred.shape() != reference.shape() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::LossDegenerate("reference has zero range".into()));
    }
    let diff = pred - reference;
    let m = diff.len() as f64;
    let rmse = (diff.iter().map(|d| d * d).sum::<f64>() / m).sqrt();
    let grad = if rmse > 0.0 {
        diff.mapv(|d| d / (m * rmse * range))
    } else {
        Array::zeros(diff.raw_dim())
    };
    Ok((rmse / range, grad))
}

/// Per-sample loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub kspace_nrmse: f64,
    pub image_nrmse: f64,
}

/// `w1 · NRMSE(F, F̂) + w2 · NRMSE(f, f̂)` for one sample. The k-space term
/// compares the `(2, H, W)` real/imaginary representations, with the range
/// taken over both channels of the reference.
pub fn dual_domain_loss(
    kspace_pred: &Array3<f64>,
    kspace_ref: &Array3<f64>,
    image_pred: &Array2<f64>,
    image_ref: &Array2<f64>,
    w1: f64,
    w2: f64,
) -> Result<LossTerms> {
    dual_domain_loss_with_grad(kspace_pred, kspace_ref, image_pred, image_ref, w1, w2).map(|(t, _, _)| t)
}

/// [`dual_domain_loss`] plus its gradients with respect to both predictions.
pub fn dual_domain_loss_with_grad(
    kspace_pred: &Array3<f64>,
    kspace_ref: &Array3<f64>,
    image_pred: &Array2<f64>,
    image_ref: &Array2<f64>,
    w1: f64,
    w2: f64,
) -> Result<(LossTerms, Array3<f64>, Array2<f64>)> {
    let (kn, kg) = nrmse_with_grad(kspace_pred, kspace_ref)?;
    let (imn, ig) = nrmse_with_grad(image_pred, image_ref)?;
    let terms = LossTerms {
        total: w1 * kn + w2 * imn,
        kspace_nrmse: kn,
        image_nrmse: imn,
    };
    Ok((terms, kg * w1, ig * w2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn kspace_pair() -> Array3<f64> {
        Array3::from_shape_fn((2, 2, 2), |(c, y, x)| (c * 4 + y * 2 + x) as f64 * 0.3 - 1.0)
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let k = kspace_pair();
        let f = array![[0.0, 1.0], [2.0, 3.0]];
        let t = dual_domain_loss(&k, &k, &f, &f, 0.001, 0.999).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn hand_evaluated_example() {
        let k = kspace_pair();
        let t = dual_domain_loss(&k, &k, &array![[1.0, 2.0]], &array![[0.0, 2.0]], 0.001, 0.999).unwrap();
        assert!((t.image_nrmse - 0.35355).abs() < 1e-5);
        assert!((t.total - 0.35320).abs() < 1e-5);
    }

    #[test]
    fn zero_kspace_weight_leaves_image_term() {
        let k = kspace_pair();
        let kp = &k + 0.5;
        let (f, fp) = (array![[0.0, 2.0]], array![[0.3, 1.0]]);
        let t = dual_domain_loss(&kp, &k, &fp, &f, 0.0, 0.999).unwrap();
        assert_eq!(t.total, 0.999 * crate::metrics::nrmse(&fp, &f).unwrap());
    }

    #[test]
    fn constant_reference_is_degenerate() {
        let k = kspace_pair();
        let f = array![[1.0, 1.0]];
        assert!(matches!(
            dual_domain_loss(&k, &k, &f, &f, 0.5, 0.5),
            Err(Error::LossDegenerate(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let reference = array![[0.0, 2.0, 1.0], [0.5, -1.0, 3.0]];
        let pred = array![[0.3, 1.5, 1.2], [0.1, -0.7, 2.0]];
        let (_, g) = nrmse_with_grad(&pred, &reference).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (0, 1)] {
            let mut p = pred.clone();
            p[idx] += h;
            let up = nrmse_with_grad(&p, &reference).unwrap().0;
            p[idx] -= 2.0 * h;
            let down = nrmse_with_grad(&p, &reference).unwrap().0;
            assert!(((up - down) / (2.0 * h) - g[idx]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            preds in proptest::collection::vec(-5.0f64..5.0, 8),
            w1 in 0.0f64..1.0, w2 in 0.01f64..1.0
        ) {
            let k = Array3::from_shape_vec((2, 2, 2), vals.clone()).unwrap();
            let kp = Array3::from_shape_vec((2, 2, 2), preds.clone()).unwrap();
            let f = Array2::from_shape_vec((2, 4), vals).unwrap();
            let fp = Array2::from_shape_vec((2, 4), preds).unwrap();
            prop_assume!(f.iter().any(|&v| v != f[[0, 0]]));
            let t = dual_domain_loss(&kp, &k, &fp, &f, w1, w2).unwrap();
            prop_assert!(t.total >= 0.0);
            prop_assert_eq!(dual_domain_loss(&k, &k, &f, &f, w1, w2).unwrap().total, 0.0);
        }
    }
}
