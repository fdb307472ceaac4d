//! Shared helpers for integration tests.

#![allow(dead_code)]

pub mod gradsuite;

use keygraph::numcore::{Graph, Tensor, Var};
use rand::Rng;

/// Central-difference step. Chosen so truncation error (~h^2) and f64
/// round-off noise (~1e-12/h) are both well under the comparison tolerance.
pub const FD_STEP: f64 = 1e-4;

/// Absolute floor added to the relative criterion, per unit of loss
/// magnitude. FD noise is roughly 1e-12 * |loss| / h = 1e-8 per unit of loss
/// scale, so gradients below that cannot be resolved and count as zero.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Why a finite-difference check did not pass.
#[derive(Debug)]
pub enum FdFail {
    /// The function is smooth at the probe point but analytic != FD: a bug.
    Mismatch(String),
    /// FD estimates at step h and h/2 disagree, so the probe window straddles
    /// a non-smooth point (a max-tie, a projection clamp, or an activation
    /// hinge). The config is uninformative and should be resampled.
    NonSmooth(String),
}

/// Checks analytic gradients of a scalar-valued graph against central finite
/// differences. `build` must construct the same function each call from the
/// given leaf variables (one per entry of `inputs`, in order).
///
/// `coords`: which partial derivatives to probe, as (input index, element
/// index) pairs; `None` probes every element of every input.
pub fn fd_check<F>(
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    rel_tol: f64,
    build: F,
) -> Result<(), FdFail>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> keygraph::Result<Var>,
{
    let fail = |m: String| FdFail::Mismatch(m);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).map_err(|e| fail(format!("build failed: {e}")))?;
    g.backward(loss).map_err(|e| fail(format!("backward failed: {e}")))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| match g.grad(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; inputs[i].len()],
        })
        .collect();
    drop(g);

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, FdFail> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars).map_err(|e| fail(format!("eval failed: {e}")))?;
        Ok(g.value(loss).data()[0])
    };

    let all_coords: Vec<(usize, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
    };

    let f0 = eval(inputs)?;
    let floor = FD_ABS_FLOOR * f0.abs().max(1.0);
    let at = |ti: usize, ei: usize, delta: f64| -> Result<f64, FdFail> {
        let mut shifted = inputs.to_vec();
        shifted[ti].data_mut()[ei] += delta;
        eval(&shifted)
    };
    for &(ti, ei) in &all_coords {
        assert!(ti < inputs.len() && ei < inputs[ti].len(), "coord out of range");
        let f_plus = at(ti, ei, FD_STEP)?;
        let f_minus = at(ti, ei, -FD_STEP)?;
        let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
        let half = FD_STEP / 2.0;
        let fd_half = (at(ti, ei, half)? - at(ti, ei, -half)?) / (2.0 * half);
        let an = analytic[ti][ei];
        let scale = an.abs().max(fd.abs());
        // Two step sizes must agree, otherwise FD itself is unreliable here.
        if (fd - fd_half).abs() > 0.5 * rel_tol * scale + floor {
            return Err(FdFail::NonSmooth(format!(
                "fd estimates disagree at input {ti} elem {ei}: \
                 fd(h)={fd:.9e} fd(h/2)={fd_half:.9e}"
            )));
        }
        let diff = (an - fd).abs();
        let bound = rel_tol * scale + floor;
        if !(diff <= bound) {
            // A kink closer to the probe point than h (e.g. a pre-activation
            // within ~1e-8 of its hinge) defeats the two-step check: both
            // central secants average the two branch slopes and agree with
            // each other while matching neither branch. Such a kink makes the
            // one-sided secants split by about twice the analytic-vs-central
            // gap, whereas on a smooth function they differ only by h*f'',
            // far below `diff` for any config FD can resolve at all.
            let right = (f_plus - f0) / FD_STEP;
            let left = (f0 - f_minus) / FD_STEP;
            if (right - left).abs() > diff {
                return Err(FdFail::NonSmooth(format!(
                    "kink at probe point for input {ti} elem {ei}: \
                     side slopes {left:.9e} / {right:.9e}, central fd={fd:.9e}"
                )));
            }
            return Err(FdFail::Mismatch(format!(
                "grad mismatch at input {ti} elem {ei}: analytic={an:.9e} fd={fd:.9e} \
                 diff={diff:.3e} bound={bound:.3e}"
            )));
        }
    }
    Ok(())
}

/// Unwraps a finite-difference check inside a resample loop: a mismatch is a
/// bug (panic), a non-smooth probe point asks for another configuration.
/// Returns true when the config counted, false when it should be resampled.
pub fn fd_outcome(result: Result<(), FdFail>, resamples: &mut usize) -> bool {
    match result {
        Ok(()) => true,
        Err(FdFail::NonSmooth(_)) => {
            *resamples += 1;
            assert!(
                *resamples < 400,
                "too many non-smooth configs resampled; exclusion filters are off"
            );
            false
        }
        Err(FdFail::Mismatch(m)) => panic!("{m}"),
    }
}

/// Draws `k` distinct probe coordinates spread across the given tensor sizes.
pub fn sample_coords<R: Rng>(sizes: &[usize], k: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let k = k.min(total);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < k {
        let mut flat = rng.gen_range(0..total);
        for (i, &s) in sizes.iter().enumerate() {
            if flat < s {
                picked.insert((i, flat));
                break;
            }
            flat -= s;
        }
    }
    picked.into_iter().collect()
}

/// Uniform tensor in [lo, hi).
pub fn rand_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}
