//! Spectral normalization by power iteration.
//!
//! A layer keeps a persistent estimate `u` of the top left singular vector of
//! its raw weight `W`. The spectral norm estimate is `sigma = ‖Wᵀu‖`, which
//! equals the top singular value once `u` has converged, and the layer uses
//! `W / sigma` in place of `W`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub(crate) const DEGENERATE_NORM: f64 = 1e-12;

/// Result of running power iteration on one matrix.
#[derive(Debug, Clone)]
pub struct PowerIteration {
    pub sigma: f64,
    pub u: Array1<f64>,
    /// Set when the matrix annihilated the iterate (e.g. an all-zero weight).
    pub degenerate: bool,
}

/// Runs `iters` power-iteration steps `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖` and
/// returns `‖Wᵀu‖` for the final `u`.
pub fn power_iteration(
    weight: ArrayView2<'_, f64>,
    u: ArrayView1<'_, f64>,
    iters: usize,
) -> Result<PowerIteration> {
    let (rows, _) = weight.dim();
    if u.len() != rows {
        return Err(Error::shape("power_iteration", rows, u.len()));
    }
    let unorm = l2(u);
    if (unorm - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "power iteration needs a unit vector, got norm {unorm}"
        )));
    }

    let mut u = u.to_owned();
    for _ in 0..iters {
        let v = weight.t().dot(&u);
        let vn = l2(v.view());
        if vn < DEGENERATE_NORM {
            return Ok(degenerate(u));
        }
        let v = v / vn;
        let wu = weight.dot(&v);
        let un = l2(wu.view());
        if un < DEGENERATE_NORM {
            return Ok(degenerate(u));
        }
        u = wu / un;
    }
    let sigma = l2(weight.t().dot(&u).view());
    if sigma < DEGENERATE_NORM {
        return Ok(degenerate(u));
    }
    Ok(PowerIteration {
        sigma,
        u,
        degenerate: false,
    })
}

fn degenerate(u: Array1<f64>) -> PowerIteration {
    PowerIteration {
        sigma: 0.0,
        u,
        degenerate: true,
    }
}

/// The normalized weight `W/σ` together with the quantities its gradient needs.
#[derive(Debug, Clone)]
pub(crate) struct NormalizedWeight {
    pub weight: Array2<f64>,
    pub sigma: f64,
    /// `Wᵀu / σ`; `None` when the layer is degenerate and left unscaled.
    pub v: Option<Array1<f64>>,
}

pub(crate) fn normalize(weight: &Array2<f64>, u: &Array1<f64>) -> NormalizedWeight {
    let wtu = weight.t().dot(u);
    let sigma = l2(wtu.view());
    if sigma < DEGENERATE_NORM {
        return NormalizedWeight {
            weight: weight.clone(),
            sigma: 0.0,
            v: None,
        };
    }
    NormalizedWeight {
        weight: weight / sigma,
        sigma,
        v: Some(wtu / sigma),
    }
}

/// Maps a gradient with respect to `W/σ` back to the raw weight, with `u`
/// held fixed: `G/σ − ⟨G, W⟩/σ² · u vᵀ`.
pub(crate) fn raw_weight_grad(
    grad_eff: Array2<f64>,
    weight: &Array2<f64>,
    u: &Array1<f64>,
    norm: &NormalizedWeight,
) -> Array2<f64> {
    let Some(v) = &norm.v else {
        return grad_eff;
    };
    let sigma = norm.sigma;
    let inner: f64 = grad_eff.iter().zip(weight.iter()).map(|(g, w)| g * w).sum();
    let mut grad = grad_eff / sigma;
    let coeff = inner / (sigma * sigma);
    for (i, ui) in u.iter().enumerate() {
        let scale = coeff * ui;
        grad.row_mut(i)
            .iter_mut()
            .zip(v.iter())
            .for_each(|(g, vj)| *g -= scale * vj);
    }
    grad
}

pub(crate) fn l2(x: ArrayView1<'_, f64>) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_matrix_converges_to_largest_entry() {
        let w = array![[3.0, 0.0], [0.0, 1.0]];
        let u = array![0.6, 0.8];
        let out = power_iteration(w.view(), u.view(), 50).unwrap();
        assert!((out.sigma - 3.0).abs() < 1e-6, "sigma {}", out.sigma);
        assert!((l2(out.u.view()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_has_unit_sigma_from_any_start() {
        let w = Array2::<f64>::eye(3);
        let u = array![0.0, 0.6, -0.8];
        let out = power_iteration(w.view(), u.view(), 1).unwrap();
        assert!((out.sigma - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let w = Array2::<f64>::zeros((2, 3));
        let u = array![1.0, 0.0];
        let out = power_iteration(w.view(), u.view(), 10).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.sigma, 0.0);
        assert_eq!(out.u, u);
    }

    #[test]
    fn rejects_non_unit_start() {
        let w = Array2::<f64>::eye(2);
        let u = array![1.0, 1.0];
        assert!(matches!(
            power_iteration(w.view(), u.view(), 1),
            Err(Error::Contract(_))
        ));
    }
}
