//! Central finite-difference checks against analytic gradients.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::ParamSet;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error used for every gradient comparison.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max over coordinates of the relative error between `analytic` and the
/// central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Checks the input gradient of a matrix-valued map by contracting its output
/// with random weights `c`: the scalar is `sum(c * forward(x))` and its
/// analytic gradient is `backward(x, c)`.
pub fn check_map<F, B>(x: &Array2<f64>, rng: &mut impl Rng, forward: F, backward: B) -> f64
where
    F: Fn(&Array2<f64>) -> Array2<f64>,
    B: Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
{
    let out = forward(x);
    let c = random_matrix(out.nrows(), out.ncols(), rng);
    let analytic = backward(x, &c);
    let shape = x.raw_dim();
    finite_diff_check(
        |flat| {
            let xp = Array2::from_shape_vec(shape, flat.to_vec()).expect("shape");
            (&forward(&xp) * &c).sum()
        },
        x.as_slice().expect("standard layout"),
        analytic.as_slice().expect("standard layout"),
        DEFAULT_STEP,
    )
}

/// Checks parameter gradients: `loss(params)` must be a scalar and `grads`
/// its analytic gradient at `params`.
pub fn check_params<P, L>(params: &P, grads: &P, loss: L) -> f64
where
    P: ParamSet + Clone,
    L: Fn(&P) -> f64,
{
    let mut probe = params.clone();
    finite_diff_check(
        |flat| {
            probe.set_flat(flat);
            loss(&probe)
        },
        &params.flat(),
        &grads.flat(),
        DEFAULT_STEP,
    )
}
