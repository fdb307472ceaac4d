//! Quantitative evaluation: linear probing of detected keypoints against
//! annotated joints, error metrics, and spectral clustering of the learned
//! edge weights. All numerics here run in f64.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgeom::EdgeGraph;
use crate::error::{Error, Result};
use crate::numcore::{gemm, gemm_atb, Scalar, Tensor};
use crate::synthdata::Dataset;
use crate::trainer::{ModelState, TrainConfig};

/// Images per forward pass during detection; bounds peak memory.
const DETECT_BATCH: usize = 25;
/// PCK threshold and reference resolution for reports.
const PCK_D_PX: f64 = 6.0;
const PCK_IMAGE_PX: usize = 256;
/// Ridge strength for the probe regressor.
pub const REGRESSOR_RIDGE: f64 = 1e-6;

// --- Linear probe ---------------------------------------------------------

/// Least-squares map from detected keypoints to annotated joints, fitted
/// without a bias term.
#[derive(Clone, Debug)]
pub struct RegressionModel {
    /// Row-major `[in_dim, out_dim]`.
    pub w: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub ridge: f64,
}

/// Solve `A x = b` for symmetric positive definite `A` (`n x n`, row-major)
/// with `m` right-hand sides (`b` is `n x m`), via Cholesky in place.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= a[i * n + p] * a[j * n + p];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Eval(format!(
                        "normal equations are not positive definite (pivot {s:.3e} at {i})"
                    )));
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    // Forward substitution L z = b, then back substitution L^T x = z.
    for col in 0..m {
        for i in 0..n {
            let mut s = b[i * m + col];
            for p in 0..i {
                s -= a[i * n + p] * b[p * m + col];
            }
            b[i * m + col] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + col];
            for p in i + 1..n {
                s -= a[p * n + i] * b[p * m + col];
            }
            b[i * m + col] = s / a[i * n + i];
        }
    }
    Ok(())
}

/// Fit `W = argmin |XW - Y|^2 + ridge |W|^2` by the normal equations
/// `(X^T X + ridge I) W = X^T Y`. `x` is `[n, in_dim]`, `y` is `[n, out_dim]`,
/// and `n` must be at least `in_dim` so the fit is not underdetermined.
pub fn fit_regressor(x: &Tensor<f64>, y: &Tensor<f64>, ridge: f64) -> Result<RegressionModel> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "fit_regressor: expected 2D design matrices, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (n, in_dim) = (x.shape()[0], x.shape()[1]);
    let out_dim = y.shape()[1];
    if y.shape()[0] != n {
        return Err(Error::Shape(format!(
            "fit_regressor: {} target rows for {} design rows",
            y.shape()[0],
            n
        )));
    }
    if n < in_dim {
        return Err(Error::Eval(format!(
            "regression is underdetermined: {n} samples for {in_dim} inputs"
        )));
    }
    let mut gram = vec![0.0; in_dim * in_dim];
    gemm_atb(in_dim, n, in_dim, x.data(), x.data(), &mut gram);
    for i in 0..in_dim {
        gram[i * in_dim + i] += ridge;
    }
    let mut rhs = vec![0.0; in_dim * out_dim];
    gemm_atb(in_dim, n, out_dim, x.data(), y.data(), &mut rhs);
    cholesky_solve(&mut gram, &mut rhs, in_dim, out_dim)?;
    Ok(RegressionModel { w: rhs, in_dim, out_dim, ridge })
}

impl RegressionModel {
    /// Apply the probe: `[n, in_dim] -> [n, out_dim]`.
    pub fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Shape(format!(
                "predict: expected [n, {}], got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut out = vec![0.0; n * self.out_dim];
        gemm(n, self.in_dim, self.out_dim, x.data(), &self.w, &mut out);
        Tensor::new(&[n, self.out_dim], out)
    }
}

// --- Error metrics ---------------------------------------------------------

/// Denominator for point errors. `ImageSize` divides by 2, the full extent
/// of the coordinate range; `InterPoint(i, j)` divides by the per-sample
/// distance between annotated points `i` and `j`.
#[derive(Clone, Copy, Debug)]
pub enum Normalizer {
    ImageSize,
    InterPoint(usize, usize),
}

fn check_points(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.shape().len() != 3 || pred.shape()[2] != 2 {
        return Err(Error::Shape(format!(
            "expected point arrays of shape [n, l, 2], got {:?}",
            pred.shape()
        )));
    }
    Ok((pred.shape()[0], pred.shape()[1]))
}

fn sample_normalizer(gt: &Tensor<f64>, s: usize, l: usize, norm: Normalizer) -> Result<f64> {
    match norm {
        Normalizer::ImageSize => Ok(2.0),
        Normalizer::InterPoint(i, j) => {
            if i >= l || j >= l {
                return Err(Error::Eval(format!(
                    "inter-point normalizer ({i}, {j}) out of range for {l} landmarks"
                )));
            }
            let g = gt.data();
            let base = s * l * 2;
            let dx = g[base + i * 2] - g[base + j * 2];
            let dy = g[base + i * 2 + 1] - g[base + j * 2 + 1];
            let d = (dx * dx + dy * dy).sqrt();
            if d <= 0.0 {
                return Err(Error::Eval(format!(
                    "zero inter-point distance between landmarks {i} and {j} in sample {s}"
                )));
            }
            Ok(d)
        }
    }
}

/// Mean over samples and landmarks of `|pred - gt|_2 / normalizer`.
pub fn normalized_error(pred: &Tensor<f64>, gt: &Tensor<f64>, norm: Normalizer) -> Result<f64> {
    let per = per_landmark_error(pred, gt, norm)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Normalized error averaged over samples, one entry per landmark.
pub fn per_landmark_error(
    pred: &Tensor<f64>,
    gt: &Tensor<f64>,
    norm: Normalizer,
) -> Result<Vec<f64>> {
    let (n, l) = check_points(pred, gt)?;
    if n == 0 {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    let (p, g) = (pred.data(), gt.data());
    let mut out = vec![0.0; l];
    for s in 0..n {
        let d = sample_normalizer(gt, s, l, norm)?;
        for li in 0..l {
            let base = (s * l + li) * 2;
            let dx = p[base] - g[base];
            let dy = p[base + 1] - g[base + 1];
            out[li] += (dx * dx + dy * dy).sqrt() / d;
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    Ok(out)
}

/// Fraction of landmarks whose pixel-space error is at most `d_px` after
/// mapping coordinates from [-1, 1] to [0, image_px]; the boundary counts.
pub fn pck(pred: &Tensor<f64>, gt: &Tensor<f64>, d_px: f64, image_px: usize) -> Result<f64> {
    let (n, l) = check_points(pred, gt)?;
    if n == 0 {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    let scale = image_px as f64 / 2.0;
    let (p, g) = (pred.data(), gt.data());
    let mut hits = 0usize;
    for i in 0..n * l {
        let dx = (p[i * 2] - g[i * 2]) * scale;
        let dy = (p[i * 2 + 1] - g[i * 2 + 1]) * scale;
        if (dx * dx + dy * dy).sqrt() <= d_px {
            hits += 1;
        }
    }
    Ok(hits as f64 / (n * l) as f64)
}

/// Mean over samples of the summed per-landmark pixel error at `image_px`
/// resolution.
pub fn mae_sum_px(pred: &Tensor<f64>, gt: &Tensor<f64>, image_px: usize) -> Result<f64> {
    let (n, l) = check_points(pred, gt)?;
    if n == 0 {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    let scale = image_px as f64 / 2.0;
    let (p, g) = (pred.data(), gt.data());
    let mut total = 0.0;
    for i in 0..n * l {
        let dx = (p[i * 2] - g[i * 2]) * scale;
        let dy = (p[i * 2 + 1] - g[i * 2 + 1]) * scale;
        total += (dx * dx + dy * dy).sqrt();
    }
    Ok(total / n as f64)
}

// --- Spectral clustering ---------------------------------------------------

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues ascending and eigenvectors as rows of the second
/// result, aligned with the eigenvalues.
fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    // v starts as identity; accumulated rotations make its COLUMNS the
    // eigenvectors of the original matrix.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m[p * n + i];
                    let mqi = m[q * n + i];
                    m[p * n + i] = c * mpi - s * mqi;
                    m[q * n + i] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[x * n + x].partial_cmp(&m[y * n + y]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (r, &col) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs[r * n + i] = v[i * n + col];
        }
    }
    (eigvals, eigvecs)
}

/// Lloyd k-means on `n` points of dimension `d` with `restarts` seeded
/// initializations; the lowest-inertia run wins. Empty clusters are reseeded
/// at the point farthest from its assigned center.
fn kmeans(points: &[f64], n: usize, d: usize, k: usize, restarts: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let mut centers = vec![0.0; k * d];
        let picks = rand::seq::index::sample(&mut rng, n, k.min(n));
        for (c, idx) in picks.iter().enumerate() {
            centers[c * d..(c + 1) * d].copy_from_slice(&points[idx * d..(idx + 1) * d]);
        }
        let mut labels = vec![0usize; n];
        for _iter in 0..100 {
            let mut changed = false;
            // Assign.
            let mut dists = vec![0.0; n];
            for i in 0..n {
                let (mut bl, mut bd) = (0usize, f64::INFINITY);
                for c in 0..k {
                    let mut dist = 0.0;
                    for j in 0..d {
                        let diff = points[i * d + j] - centers[c * d + j];
                        dist += diff * diff;
                    }
                    if dist < bd {
                        bd = dist;
                        bl = c;
                    }
                }
                if labels[i] != bl {
                    labels[i] = bl;
                    changed = true;
                }
                dists[i] = bd;
            }
            // Update; reseed empty clusters at the farthest point.
            let mut counts = vec![0usize; k];
            centers.fill(0.0);
            for i in 0..n {
                counts[labels[i]] += 1;
                for j in 0..d {
                    centers[labels[i] * d + j] += points[i * d + j];
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let far = (0..n)
                        .max_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap())
                        .unwrap();
                    centers[c * d..(c + 1) * d]
                        .copy_from_slice(&points[far * d..(far + 1) * d]);
                    changed = true;
                } else {
                    for j in 0..d {
                        centers[c * d + j] /= counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut inertia = 0.0;
        for i in 0..n {
            let c = labels[i];
            for j in 0..d {
                let diff = points[i * d + j] - centers[c * d + j];
                inertia += diff * diff;
            }
        }
        if best.as_ref().map_or(true, |(bi, _)| inertia < *bi) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

/// Relabel clusters by order of first appearance, so keypoint 0 is always in
/// cluster 0.
fn canonicalize_labels(labels: &mut [usize], k: usize) {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter_mut() {
        if map[*l] == usize::MAX {
            map[*l] = next;
            next += 1;
        }
        *l = map[*l];
    }
}

/// Dense symmetric affinity from the learned edge weights: off-diagonal
/// entries are the positive effective weights, the diagonal is zero.
pub fn affinity_matrix<T: Scalar>(graph: &EdgeGraph<T>) -> Vec<f64> {
    let k = graph.effective_point_weights().len();
    let w = graph.effective_weights();
    let mut a = vec![0.0; k * k];
    for (e, (i, j)) in graph.pairs().into_iter().enumerate() {
        let v = w[e].as_f64();
        a[i * k + j] = v;
        a[j * k + i] = v;
    }
    a
}

/// Cluster keypoints by the learned graph: normalized Laplacian
/// `L = I - D^{-1/2} A D^{-1/2}`, embedding from the eigenvectors of the `k`
/// smallest eigenvalues, rows normalized, then k-means (10 restarts). Labels
/// are canonicalized so keypoint 0 lands in cluster 0. A zero-degree vertex
/// keeps a zero embedding row and so separates into its own cluster when `k`
/// allows. Requires `1 <= k <= K`.
pub fn spectral_cluster<T: Scalar>(graph: &EdgeGraph<T>, k: usize) -> Result<Vec<usize>> {
    let kp = graph.effective_point_weights().len();
    if k == 0 || k > kp {
        return Err(Error::Eval(format!(
            "cannot split {kp} keypoints into {k} clusters"
        )));
    }
    let a = affinity_matrix(graph);
    let mut dinv = vec![0.0; kp];
    for i in 0..kp {
        let deg: f64 = a[i * kp..(i + 1) * kp].iter().sum();
        dinv[i] = if deg > 0.0 { 1.0 / deg.sqrt() } else { 0.0 };
    }
    let mut lap = vec![0.0; kp * kp];
    for i in 0..kp {
        for j in 0..kp {
            let norm = -dinv[i] * a[i * kp + j] * dinv[j];
            lap[i * kp + j] = if i == j { 1.0 + norm } else { norm };
        }
    }
    let (_vals, vecs) = jacobi_eigh(&lap, kp);
    // Embedding: row i of the points = i-th entry of the k smallest
    // eigenvectors, row-normalized.
    let mut pts = vec![0.0; kp * k];
    for i in 0..kp {
        for c in 0..k {
            pts[i * k + c] = vecs[c * kp + i];
        }
        let norm: f64 = pts[i * k..(i + 1) * k].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for c in 0..k {
                pts[i * k + c] /= norm;
            }
        }
    }
    let mut labels = kmeans(&pts, kp, k, k, 10);
    canonicalize_labels(&mut labels, k);
    Ok(labels)
}

/// Normalized cut of a two-way split given a dense affinity: the cut weight
/// times the sum of inverse volumes. Infinite when either side has zero
/// volume.
pub fn normalized_cut(a: &[f64], n: usize, in_s: &[bool]) -> f64 {
    let mut cut = 0.0;
    let mut vol_s = 0.0;
    let mut vol_t = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = a[i * n + j];
            if in_s[i] {
                vol_s += w;
            } else {
                vol_t += w;
            }
            if in_s[i] != in_s[j] {
                cut += w;
            }
        }
    }
    cut /= 2.0;
    if vol_s <= 0.0 || vol_t <= 0.0 {
        return f64::INFINITY;
    }
    cut * (1.0 / vol_s + 1.0 / vol_t)
}

// --- Whole-model evaluation -------------------------------------------------

/// Metrics of one evaluation run, serialized as the report JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub error_mean: f64,
    pub error_per_landmark: Vec<f64>,
    /// Fraction of joints within 6 px at 256x256 scale.
    pub pck: f64,
    /// Mean per-sample sum of pixel errors at 256x256 scale.
    pub mae_sum: f64,
    pub n: usize,
    pub config: TrainConfig,
}

/// Run the detector over a list of images in fixed-size batches; returns
/// keypoint coordinates as `[n, k, 2]` in f64.
pub fn detect_keypoints(state: &ModelState<f32>, images: &[Tensor<f32>]) -> Result<Tensor<f64>> {
    if images.is_empty() {
        return Err(Error::Eval("no images to run the detector on".into()));
    }
    let k = state.config.n_keypoints;
    let mut out = Vec::with_capacity(images.len() * k * 2);
    for chunk in images.chunks(DETECT_BATCH) {
        let per = chunk[0].len();
        let mut data = vec![0.0f32; chunk.len() * per];
        for (i, img) in chunk.iter().enumerate() {
            if img.len() != per {
                return Err(Error::Shape("detector batch mixes image sizes".into()));
            }
            data[i * per..(i + 1) * per].copy_from_slice(img.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].shape());
        let batch = Tensor::new(&shape, data)?;
        let kps = state.infer_keypoints(&batch)?;
        out.extend(kps.data().iter().map(|v| *v as f64));
    }
    Tensor::new(&[images.len(), k, 2], out)
}

fn ground_truth(ds: &Dataset) -> Result<Tensor<f64>> {
    let n = ds.entries.len();
    if n == 0 {
        return Err(Error::Eval("dataset has no samples".into()));
    }
    let l = ds.entries[0].joints.len();
    let mut data = Vec::with_capacity(n * l * 2);
    for e in &ds.entries {
        for j in &e.joints {
            data.push(j[0]);
            data.push(j[1]);
        }
    }
    Tensor::new(&[n, l, 2], data)
}

fn flat_points(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = t.shape();
    t.reshaped(&[s[0], s[1] * s[2]])
}

/// Full probe protocol on a generated dataset root containing `train/` and
/// `eval/` splits: detect on both, fit the linear probe on the train split,
/// report metrics on the eval split.
pub fn evaluate(state: &ModelState<f32>, root: &Path) -> Result<EvalReport> {
    let train = Dataset::load(&root.join("train"))?;
    let eval = Dataset::load(&root.join("eval"))?;
    let train_images = train.load_all_images()?;
    let s = state.config.image_size;
    if train_images[0].shape() != [3, s, s] {
        return Err(Error::Eval(format!(
            "dataset images have shape {:?} but the checkpoint was trained at {s}x{s}",
            train_images[0].shape()
        )));
    }
    let det_train = detect_keypoints(state, &train_images)?;
    drop(train_images);
    let gt_train = ground_truth(&train)?;
    let model = fit_regressor(
        &flat_points(&det_train)?,
        &flat_points(&gt_train)?,
        REGRESSOR_RIDGE,
    )?;

    let eval_images = eval.load_all_images()?;
    let det_eval = detect_keypoints(state, &eval_images)?;
    drop(eval_images);
    let gt_eval = ground_truth(&eval)?;
    let pred_flat = model.predict(&flat_points(&det_eval)?)?;
    let l = gt_eval.shape()[1];
    let n = gt_eval.shape()[0];
    let pred = pred_flat.reshaped(&[n, l, 2])?;

    Ok(EvalReport {
        error_mean: normalized_error(&pred, &gt_eval, Normalizer::ImageSize)?,
        error_per_landmark: per_landmark_error(&pred, &gt_eval, Normalizer::ImageSize)?,
        pck: pck(&pred, &gt_eval, PCK_D_PX, PCK_IMAGE_PX)?,
        mae_sum: mae_sum_px(&pred, &gt_eval, PCK_IMAGE_PX)?,
        n,
        config: state.config.clone(),
    })
}
