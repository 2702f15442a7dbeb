//! Proximal operator of the l1 norm.

use nalgebra::DMatrix;

/// `sign(x) * max(|x| - kappa, 0)`.
#[inline]
pub fn soft_threshold(x: f64, kappa: f64) -> f64 {
    if x > kappa {
        x - kappa
    } else if x < -kappa {
        x + kappa
    } else {
        0.0
    }
}

/// Elementwise soft thresholding: `argmin_Z 1/2 ||Z - theta||^2 + kappa ||Z||_1`.
pub fn prox_l1(theta: &DMatrix<f64>, kappa: f64) -> DMatrix<f64> {
    debug_assert!(kappa >= 0.0);
    theta.map(|v| soft_threshold(v, kappa))
}

/// In-place variant used by the solver loop.
pub fn prox_l1_into(out: &mut DMatrix<f64>, theta: &DMatrix<f64>, kappa: f64) {
    debug_assert_eq!(out.shape(), theta.shape());
    for (o, &v) in out.iter_mut().zip(theta.iter()) {
        *o = soft_threshold(v, kappa);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    #[test]
    fn scalar_cases() {
        assert_eq!(soft_threshold(0.0, 0.5), 0.0);
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
        assert_eq!(soft_threshold(0.3, 0.3), 0.0);
        assert_eq!(soft_threshold(-0.3, 0.3), 0.0);
    }

    #[test]
    fn zero_kappa_is_identity() {
        let m = dmatrix![1.5, -0.25; 0.0, 3.0];
        assert_eq!(prox_l1(&m, 0.0), m);
    }

    proptest! {
        // Brute-force minimization of the scalar prox objective on a fine grid.
        #[test]
        fn matches_grid_minimizer(x in -3.0f64..3.0, kappa in 0.0f64..2.0) {
            let f = |z: f64| 0.5 * (z - x).powi(2) + kappa * z.abs();
            let step = 1e-4;
            let best = (-40_000..=40_000)
                .map(|k| k as f64 * step)
                .min_by(|a, b| f(*a).total_cmp(&f(*b)))
                .unwrap();
            prop_assert!((soft_threshold(x, kappa) - best).abs() <= step);
        }

        #[test]
        fn shrinks_towards_zero(x in -10.0f64..10.0, kappa in 0.0f64..5.0) {
            let z = soft_threshold(x, kappa);
            prop_assert!(z.abs() <= x.abs());
            prop_assert!(z == 0.0 || z.signum() == x.signum());
        }
    }
}
