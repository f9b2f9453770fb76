//! Fine-scale Charbonnier loss, coarse-scale degradation loss and their
//! adaptively weighted combination.

use thiserror::Error;

use crate::grid::Ratio;
use crate::nn::{Graph, NnError, Scalar, Var};

/// Charbonnier smoothing constant.
pub const EPSILON: f64 = 0.001;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("losses must be positive and finite, got L_c={lc} and L_d={ld}")]
    NonPositive { lc: f64, ld: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// How the Charbonnier penalty is reduced over the pixels of one patch.
///
/// The per-pixel mean keeps the fine and coarse terms on the same scale
/// whatever the patch size and factor. Under the per-patch norm the coarse
/// term covers `r^2` times fewer pixels and carries little weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// One square root of the patch's squared Euclidean norm.
    PerPatch,
    /// A square root per pixel, averaged over the patch.
    #[default]
    PerPixel,
}

/// `(1/N) sum_i sqrt(|target_i - pred_i|^2 + eps^2)` over the `N` batch items.
pub fn charbonnier_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    eps: f64,
    reduction: Reduction,
) -> Result<Var> {
    Ok(g.charbonnier(pred, target, T::lit(eps), reduction == Reduction::PerPixel)?)
}

/// Charbonnier distance between the coarse field and the bilinear
/// downsampling of the fine prediction by `factor`; the gradient flows
/// through the downsampling.
pub fn degradation_loss<T: Scalar>(
    g: &mut Graph<T>,
    lr: Var,
    hr_pred: Var,
    eps: f64,
    factor: usize,
    reduction: Reduction,
) -> Result<Var> {
    let down = g.resize(hr_pred, Ratio::down(factor as u32))?;
    charbonnier_loss(g, down, lr, eps, reduction)
}

/// Both loss terms, their weights and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub l_total: f64,
}

impl LossReport {
    /// Report for training without the degradation term.
    pub fn charbonnier_only(l_c: f64) -> Self {
        Self {
            l_c,
            l_d: 0.0,
            alpha: 1.0,
            beta: 0.0,
            l_total: l_c,
        }
    }
}

/// `alpha = L_c / (L_c + L_d)`, `beta = 1 - alpha`, `L_total = alpha L_c + beta L_d`.
pub fn total_loss(l_c: f64, l_d: f64) -> Result<LossReport> {
    if !(l_c > 0.0 && l_d > 0.0 && l_c.is_finite() && l_d.is_finite()) {
        return Err(LossError::NonPositive { lc: l_c, ld: l_d });
    }
    let sum = l_c + l_d;
    let alpha = l_c / sum;
    let beta = 1.0 - alpha;
    Ok(LossReport {
        l_c,
        l_d,
        alpha,
        beta,
        l_total: alpha * l_c + beta * l_d,
    })
}

/// Records `alpha L_c + beta L_d` with the weights taken from the current
/// values and held constant during backpropagation.
pub fn total_loss_node<T: Scalar>(g: &mut Graph<T>, l_c: Var, l_d: Var) -> Result<(Var, LossReport)> {
    let lc = g.value(l_c).data()[0].to_f64().unwrap();
    let ld = g.value(l_d).data()[0].to_f64().unwrap();
    let report = total_loss(lc, ld)?;
    let v = g.weighted_sum(&[(l_c, T::lit(report.alpha)), (l_d, T::lit(report.beta))])?;
    Ok((v, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::*;

    fn scalar_loss(pred: Vec<f64>, target: Vec<f64>, n: usize) -> f64 {
        let per = pred.len() / n;
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![n, 1, 1, per], pred).unwrap()).unwrap();
        let t = g.input(Tensor::new(vec![n, 1, 1, per], target).unwrap()).unwrap();
        let l = charbonnier_loss(&mut g, p, t, EPSILON, Reduction::PerPatch).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn charbonnier_examples() {
        assert_eq!(scalar_loss(vec![1.0, 2.0], vec![1.0, 2.0], 1), 0.001);
        // error vector (0, 3, 0, 0) has norm 3
        let l = scalar_loss(vec![0.0, 3.0, 0.0, 0.0], vec![0.0; 4], 1);
        assert!((l - (9.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!((l - 3.000_000_17).abs() < 1e-8);
        // two patches with error norms 0 and 4
        let l = scalar_loss(vec![0.0, 0.0, 4.0, 0.0], vec![0.0; 4], 2);
        assert!((l - (0.001 + (16.0f64 + 1e-6).sqrt()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn degradation_examples() {
        // constant coarse field, xi = 0: f_d(f_u(c)) = c
        let mut g = Graph::<f64>::new();
        let lr = g.input(Tensor::full(vec![1, 1, 3, 3], 4.5)).unwrap();
        let up = g.resize(lr, Ratio::up(4)).unwrap();
        let l = degradation_loss(&mut g, lr, up, EPSILON, 4, Reduction::PerPatch).unwrap();
        assert_eq!(g.value(l).data()[0], EPSILON);

        // prediction whose downsampling is off by a vector of norm 2
        let mut g = Graph::<f64>::new();
        let lr = g.input(Tensor::full(vec![1, 1, 2, 2], 0.0)).unwrap();
        let hr = g.input(Tensor::full(vec![1, 1, 4, 4], 1.0)).unwrap();
        let l = degradation_loss(&mut g, lr, hr, EPSILON, 2, Reduction::PerPatch).unwrap();
        assert!((g.value(l).data()[0] - (4.0f64 + 1e-6).sqrt()).abs() < 1e-15);

        let mut g = Graph::<f64>::new();
        let lr = g.input(Tensor::full(vec![1, 1, 2, 2], 0.0)).unwrap();
        let hr = g.input(Tensor::full(vec![1, 1, 5, 5], 1.0)).unwrap();
        assert!(degradation_loss(&mut g, lr, hr, EPSILON, 2, Reduction::PerPatch).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let r = total_loss(0.7, 0.7).unwrap();
        assert_eq!((r.alpha, r.beta, r.l_total), (0.5, 0.5, 0.7));
        let r = total_loss(3.0, 1.0).unwrap();
        assert_eq!((r.alpha, r.beta, r.l_total), (0.75, 0.25, 2.5));
        assert!(total_loss(0.0, 1.0).is_err());
        assert!(total_loss(1.0, -1.0).is_err());
        assert!(total_loss(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn charbonnier_grows_linearly_for_outliers() {
        for e in [10.0, 100.0, 1000.0] {
            let c = scalar_loss(vec![e, 0.0, 0.0], vec![0.0; 3], 1);
            let squared = e * e;
            assert!((c / e - 1.0).abs() < 1e-6);
            assert!((squared / c - e).abs() < 1e-3 * e);
        }
    }

    #[test]
    fn per_pixel_reduction_is_selectable() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let t = g.input(Tensor::zeros(vec![1, 1, 1, 2])).unwrap();
        let a = charbonnier_loss(&mut g, p, t, 0.0, Reduction::PerPatch).unwrap();
        let b = charbonnier_loss(&mut g, p, t, 0.0, Reduction::PerPixel).unwrap();
        assert_eq!(g.value(a).data()[0], 5.0);
        assert_eq!(g.value(b).data()[0], 3.5);
    }

    #[test]
    fn weights_are_detached() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::full(vec![1], 3.0)).unwrap();
        let b = g.variable(Tensor::full(vec![1], 1.0)).unwrap();
        let (t, rep) = total_loss_node(&mut g, a, b).unwrap();
        assert_eq!(g.value(t).data()[0], 2.5);
        let grads = g.backward(t).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[rep.alpha]);
        assert_eq!(grads.get(b).unwrap(), &[rep.beta]);
    }

    proptest! {
        #[test]
        fn total_loss_identities(lc in 1e-3f64..1e3, ld in 1e-3f64..1e3) {
            let r = total_loss(lc, ld).unwrap();
            prop_assert_eq!(r.alpha + r.beta, 1.0);
            prop_assert!(r.alpha > 0.0 && r.alpha < 1.0);
            let closed = (lc * lc + ld * ld) / (lc + ld);
            prop_assert!((r.l_total - closed).abs() <= 1e-12 * closed);
            prop_assert!(r.l_total <= lc.max(ld) * (1.0 + 1e-15));
            prop_assert!(r.l_total >= (lc + ld) / 2.0 * (1.0 - 1e-15));
        }

        #[test]
        fn charbonnier_is_bounded_below_by_eps(v in proptest::collection::vec(-5f64..5.0, 8)) {
            let l = scalar_loss(v.clone(), vec![0.0; 8], 2);
            prop_assert!(l >= EPSILON);
            let zero = v.iter().all(|&x| x == 0.0);
            prop_assert_eq!(l == EPSILON, zero);
        }
    }
}
