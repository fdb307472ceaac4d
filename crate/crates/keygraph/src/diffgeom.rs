//! Keypoints, the shared edge graph, and the differentiable edge-map
//! renderer.
//!
//! Coordinates live in [-1, 1]^2. Pixel (r, c) of an h x w map sits at
//! (-1 + 2c/(w-1), -1 + 2r/(h-1)), the same endpoint-inclusive grid the soft
//! argmax averages over, so a keypoint at a pixel's coordinates renders
//! exactly onto that pixel.
//!
//! An edge between keypoints k_i and k_j contributes
//! `w_ij * exp(-d2(p)/sigma2)` at pixel p, where `d2` is the squared distance
//! from p to the segment. Edge weights and learnable thicknesses are kept
//! positive by softplus reparameterization; graph ops here receive the
//! effective (already positive) values so the softplus gradient composes on
//! the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::ops::{softplus_inverse, softplus_scalar};
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// How keypoints are turned into the conditioning map fed to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// Single channel holding the pixelwise maximum over all weighted edges.
    MaxCombined,
    /// One channel per edge; no maximum is taken.
    PerEdgeChannel,
    /// Single channel from isolated keypoints (point-to-point distance); the
    /// graph degenerates to per-point weights.
    KeypointsOnly,
}

/// How edge thickness (the Gaussian falloff sigma^2) is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThicknessMode {
    /// Constant sigma^2 from the config.
    Fixed,
    /// One learnable sigma^2 shared by every edge.
    SharedLearnable,
    /// An independent learnable sigma^2 per edge.
    PerEdgeLearnable,
}

impl HeatmapMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapMode::MaxCombined => "max_combined",
            HeatmapMode::PerEdgeChannel => "per_edge_channel",
            HeatmapMode::KeypointsOnly => "keypoints_only",
        }
    }
}

impl std::str::FromStr for HeatmapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_combined" => Ok(HeatmapMode::MaxCombined),
            "per_edge_channel" => Ok(HeatmapMode::PerEdgeChannel),
            "keypoints_only" => Ok(HeatmapMode::KeypointsOnly),
            other => Err(Error::Config(format!(
                "unknown heatmap mode {other:?} (expected max_combined, per_edge_channel, or keypoints_only)"
            ))),
        }
    }
}

impl ThicknessMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ThicknessMode::Fixed => "fixed",
            ThicknessMode::SharedLearnable => "shared_learnable",
            ThicknessMode::PerEdgeLearnable => "per_edge_learnable",
        }
    }
}

impl std::str::FromStr for ThicknessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ThicknessMode::Fixed),
            "shared_learnable" => Ok(ThicknessMode::SharedLearnable),
            "per_edge_learnable" => Ok(ThicknessMode::PerEdgeLearnable),
            other => Err(Error::Config(format!(
                "unknown thickness mode {other:?} (expected fixed, shared_learnable, or per_edge_learnable)"
            ))),
        }
    }
}

/// Ordered keypoint coordinates of one image, each inside [-1, 1]^2.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet<T> {
    coords: Vec<[T; 2]>,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn new(coords: Vec<[T; 2]>) -> Result<Self> {
        for (i, c) in coords.iter().enumerate() {
            let ok = c.iter().all(|v| v.is_finite() && v.abs() <= T::one());
            if !ok {
                return Err(Error::Shape(format!(
                    "keypoint {i} at ({}, {}) is outside [-1, 1]^2",
                    c[0], c[1]
                )));
            }
        }
        Ok(KeypointSet { coords })
    }

    /// Build from arbitrary finite coordinates, clamping into [-1, 1]^2.
    /// Soft-argmax outputs can overshoot the box by a rounding ulp.
    pub fn clamped(coords: Vec<[T; 2]>) -> Self {
        let coords = coords
            .into_iter()
            .map(|c| [c[0].min(T::one()).max(-T::one()), c[1].min(T::one()).max(-T::one())])
            .collect();
        KeypointSet { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    pub fn get(&self, i: usize) -> [T; 2] {
        self.coords[i]
    }
}

/// The learned graph shared across the dataset: raw (pre-softplus) edge
/// weights over all keypoint pairs, optional learnable thickness, per-point
/// weights for the keypoints-only ablation, and the mask gate alpha.
#[derive(Clone, Debug)]
pub struct EdgeGraph<T> {
    n_keypoints: usize,
    pub raw_weights: Tensor<T>,
    pub per_point_weights: Tensor<T>,
    pub thickness_mode: ThicknessMode,
    /// Raw thickness: one element when shared, one per edge when per-edge.
    /// Initialized so the effective softplus value equals `sigma2`.
    pub raw_thickness: Tensor<T>,
    /// Fixed sigma^2, and the initial value of the learnable variants.
    pub sigma2: f64,
    pub alpha: Tensor<T>,
}

impl<T: Scalar> EdgeGraph<T> {
    pub fn new(n_keypoints: usize, sigma2: f64, thickness_mode: ThicknessMode) -> Result<Self> {
        if n_keypoints == 0 {
            return Err(Error::Config("graph needs at least one keypoint".into()));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Config(format!("sigma2 must be positive and finite, got {sigma2}")));
        }
        let e = n_keypoints * (n_keypoints - 1) / 2;
        let raw_sig = T::from_f64(softplus_inverse(sigma2));
        let thick_len = match thickness_mode {
            ThicknessMode::Fixed | ThicknessMode::SharedLearnable => 1,
            ThicknessMode::PerEdgeLearnable => e.max(1),
        };
        Ok(EdgeGraph {
            n_keypoints,
            raw_weights: Tensor::zeros(&[e.max(1)]),
            per_point_weights: Tensor::zeros(&[n_keypoints]),
            thickness_mode,
            raw_thickness: Tensor::full(&[thick_len], raw_sig),
            sigma2,
            alpha: Tensor::scalar(T::one()),
        })
    }

    pub fn n_keypoints(&self) -> usize {
        self.n_keypoints
    }

    pub fn edge_count(&self) -> usize {
        self.n_keypoints * (self.n_keypoints - 1) / 2
    }

    /// Index of the unordered pair (i, j), i < j, in lexicographic order:
    /// (0,1), (0,2), ..., (0,K-1), (1,2), ...
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        pair_index(self.n_keypoints, i, j)
    }

    /// All pairs in index order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        pair_list(self.n_keypoints)
    }

    /// Positive edge weights (softplus of raw).
    pub fn effective_weights(&self) -> Vec<T> {
        self.raw_weights.data().iter().map(|&r| softplus_scalar(r)).collect()
    }

    /// Positive per-point weights for the keypoints-only mode.
    pub fn effective_point_weights(&self) -> Vec<T> {
        self.per_point_weights.data().iter().map(|&r| softplus_scalar(r)).collect()
    }

    /// Effective sigma^2 values: one element for fixed or shared thickness,
    /// one per edge otherwise.
    pub fn effective_sigma2(&self) -> Vec<T> {
        match self.thickness_mode {
            ThicknessMode::Fixed => vec![T::from_f64(self.sigma2)],
            ThicknessMode::SharedLearnable | ThicknessMode::PerEdgeLearnable => {
                self.raw_thickness.data().iter().map(|&r| softplus_scalar(r)).collect()
            }
        }
    }

    /// Set the effective weight of edge (i, j) by storing its softplus
    /// preimage; used when constructing graphs with prescribed weights.
    pub fn set_edge_weight(&mut self, i: usize, j: usize, w: f64) {
        let idx = self.pair_index(i, j);
        self.raw_weights.data_mut()[idx] = T::from_f64(softplus_inverse(w));
    }
}

/// Rendered edge map together with the mode that produced it. One channel per
/// image except in per-edge-channel mode, which has one channel per edge.
#[derive(Clone, Debug)]
pub struct EdgeMap<T> {
    pub values: Tensor<T>,
    pub mode: HeatmapMode,
}

impl<T: Scalar> EdgeMap<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

pub(crate) fn pair_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < k, "pair ({i}, {j}) out of range for {k} keypoints");
    i * k - i * (i + 1) / 2 + (j - i - 1)
}

pub(crate) fn pair_list(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(k.saturating_sub(1) * k / 2);
    for i in 0..k {
        for j in i + 1..k {
            out.push((i, j));
        }
    }
    out
}

/// Normalized coordinate of index `idx` on an endpoint-inclusive grid of `n`
/// points spanning [-1, 1]; 0 when the axis is a single point.
pub fn grid_coord<T: Scalar>(idx: usize, n: usize) -> T {
    if n <= 1 {
        T::zero()
    } else {
        T::from_f64(-1.0 + 2.0 * idx as f64 / (n - 1) as f64)
    }
}

/// Evaluation of one point-to-segment squared distance.
struct SegEval<T> {
    d2: T,
    /// Clamped projection parameter; 0 at/under the first endpoint, 1 at/over
    /// the second, and 0 for a degenerate segment.
    t: T,
    /// Residual p - (a + t*(b - a)).
    rx: T,
    ry: T,
}

fn seg_eval<T: Scalar>(px: T, py: T, a: [T; 2], b: [T; 2]) -> SegEval<T> {
    let vx = b[0] - a[0];
    let vy = b[1] - a[1];
    let ex = px - a[0];
    let ey = py - a[1];
    let vv = vx * vx + vy * vy;
    if vv == T::zero() {
        return SegEval { d2: ex * ex + ey * ey, t: T::zero(), rx: ex, ry: ey };
    }
    let t = ((ex * vx + ey * vy) / vv).min(T::one()).max(T::zero());
    let rx = ex - t * vx;
    let ry = ey - t * vy;
    SegEval { d2: rx * rx + ry * ry, t, rx, ry }
}

/// Distance from point `p` to segment `[a, b]`, plus the clamped projection
/// parameter t. A degenerate segment (a == b) reduces to point distance with
/// t = 0, so gradients there flow only to `a`.
pub fn segment_distance<T: Scalar>(p: [T; 2], a: [T; 2], b: [T; 2]) -> (T, T) {
    let s = seg_eval(p[0], p[1], a, b);
    (s.d2.sqrt(), s.t)
}

/// Where the renderer's sigma^2 comes from: a fixed constant, one shared
/// learnable value (single-element tensor), or one value per edge.
#[derive(Clone, Copy, Debug)]
pub enum SigmaSource<T> {
    Fixed(T),
    Shared(Var),
    PerEdge(Var),
}

/// `exp(-r)` underflows to exactly +0 beyond this, so the evaluation can be
/// skipped without changing any output bit.
fn exp_zero_cutoff<T: Scalar>() -> T {
    if T::DTYPE == "f32" {
        T::from_f64(104.0)
    } else {
        T::from_f64(746.0)
    }
}

struct RenderPlan<T> {
    n: usize,
    k: usize,
    h: usize,
    w: usize,
    mode: HeatmapMode,
    /// (i, j) per edge for edge modes; (i, i) entries for keypoints-only.
    pairs: Vec<(usize, usize)>,
    weights: Vec<T>,
    sigma2: Vec<T>,
}

/// Forward pass shared by the graph op and the tensor-only renderer. Returns
/// the map values and, for the single-channel modes, the winning element
/// index per pixel.
fn render_forward<T: Scalar>(kps: &Tensor<T>, plan: &RenderPlan<T>) -> (Vec<T>, Vec<u32>) {
    let RenderPlan { n, h, w, mode, pairs, weights, sigma2, .. } = plan;
    let (n, h, w) = (*n, *h, *w);
    let cutoff = exp_zero_cutoff::<T>();
    let ne = pairs.len();
    let gx: Vec<T> = (0..w).map(|c| grid_coord(c, w)).collect();
    let gy: Vec<T> = (0..h).map(|r| grid_coord(r, h)).collect();
    let inv_s2: Vec<T> = (0..ne)
        .map(|e| T::one() / sigma2[if sigma2.len() == 1 { 0 } else { e }])
        .collect();
    let kp = kps.data();
    let channels = if *mode == HeatmapMode::PerEdgeChannel { ne } else { 1 };
    let mut out = vec![T::zero(); n * channels * h * w];
    let mut winner = Vec::new();
    if channels == 1 {
        winner.resize(n * h * w, 0u32);
    }
    for img in 0..n {
        let base = img * plan.k * 2;
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (gx[c], gy[r]);
                if channels == 1 {
                    let mut best = T::neg_infinity();
                    let mut win = 0u32;
                    for (e, &(i, j)) in pairs.iter().enumerate() {
                        let a = [kp[base + 2 * i], kp[base + 2 * i + 1]];
                        let d2 = if i == j {
                            let ex = px - a[0];
                            let ey = py - a[1];
                            ex * ex + ey * ey
                        } else {
                            let b = [kp[base + 2 * j], kp[base + 2 * j + 1]];
                            seg_eval(px, py, a, b).d2
                        };
                        let z = d2 * inv_s2[e];
                        let s = if z > cutoff { T::zero() } else { weights[e] * (-z).exp() };
                        if s > best {
                            best = s;
                            win = e as u32;
                        }
                    }
                    out[(img * h + r) * w + c] = best;
                    winner[(img * h + r) * w + c] = win;
                } else {
                    for (e, &(i, j)) in pairs.iter().enumerate() {
                        let a = [kp[base + 2 * i], kp[base + 2 * i + 1]];
                        let b = [kp[base + 2 * j], kp[base + 2 * j + 1]];
                        let d2 = seg_eval(px, py, a, b).d2;
                        let z = d2 * inv_s2[e];
                        let s = if z > cutoff { T::zero() } else { weights[e] * (-z).exp() };
                        out[((img * ne + e) * h + r) * w + c] = s;
                    }
                }
            }
        }
    }
    (out, winner)
}

/// Differentiable edge-map rendering at full image resolution.
///
/// `keypoints` is `[n, k, 2]`. `weights` holds the effective (positive)
/// weights: one per edge for the edge modes, one per keypoint for
/// keypoints-only. `sigma` provides the effective sigma^2. Gradients flow to
/// keypoints, weights, and learnable sigma; the winning edge's pixel is the
/// only gradient path in the max modes, and ties go to the lowest pair index.
pub fn render_edge_map<T: Scalar>(
    g: &mut Graph<T>,
    keypoints: Var,
    weights: Var,
    sigma: SigmaSource<T>,
    h: usize,
    w: usize,
    mode: HeatmapMode,
) -> Result<Var> {
    let kv = g.value(keypoints).clone();
    let shape = kv.shape().to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::Shape(format!(
            "render_edge_map: keypoints must be [n, k, 2], got {shape:?}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("render_edge_map: output size {h}x{w} must be positive")));
    }
    let (n, k) = (shape[0], shape[1]);
    let pairs: Vec<(usize, usize)> = match mode {
        HeatmapMode::KeypointsOnly => (0..k).map(|i| (i, i)).collect(),
        _ => {
            if k < 2 {
                return Err(Error::Shape(format!(
                    "render_edge_map: edge modes need at least 2 keypoints, got {k}"
                )));
            }
            pair_list(k)
        }
    };
    let ne = pairs.len();
    let wv = g.value(weights).clone();
    if wv.len() != ne {
        return Err(Error::Shape(format!(
            "render_edge_map: expected {ne} weights for mode {} with {k} keypoints, got {}",
            mode.as_str(),
            wv.len()
        )));
    }
    let (sigma_vals, sigma_var): (Vec<T>, Option<Var>) = match sigma {
        SigmaSource::Fixed(v) => (vec![v], None),
        SigmaSource::Shared(sv) => {
            let t = g.value(sv).clone();
            if t.len() != 1 {
                return Err(Error::Shape(format!(
                    "render_edge_map: shared sigma2 must hold one element, got {}",
                    t.len()
                )));
            }
            (t.data().to_vec(), Some(sv))
        }
        SigmaSource::PerEdge(sv) => {
            if mode == HeatmapMode::KeypointsOnly {
                return Err(Error::Shape(
                    "render_edge_map: per-edge sigma2 is incompatible with keypoints_only".into(),
                ));
            }
            let t = g.value(sv).clone();
            if t.len() != ne {
                return Err(Error::Shape(format!(
                    "render_edge_map: per-edge sigma2 needs {ne} elements, got {}",
                    t.len()
                )));
            }
            (t.data().to_vec(), Some(sv))
        }
    };
    for (e, &s) in sigma_vals.iter().enumerate() {
        if !(s > T::zero()) {
            return Err(Error::Shape(format!(
                "render_edge_map: sigma2[{e}] must be positive, got {s}"
            )));
        }
    }
    let plan = RenderPlan {
        n,
        k,
        h,
        w,
        mode,
        pairs,
        weights: wv.data().to_vec(),
        sigma2: sigma_vals,
    };
    let (out, winner) = render_forward(&kv, &plan);
    let channels = if mode == HeatmapMode::PerEdgeChannel { ne } else { 1 };
    let value = Tensor::new(&[n, channels, h, w], out)?;

    let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
        let cutoff = exp_zero_cutoff::<T>();
        let kp = kv.data();
        let gx: Vec<T> = (0..plan.w).map(|c| grid_coord(c, plan.w)).collect();
        let gy: Vec<T> = (0..plan.h).map(|r| grid_coord(r, plan.h)).collect();
        let ne = plan.pairs.len();
        let shared_sigma = plan.sigma2.len() == 1;
        let mut gkp = vec![T::zero(); kp.len()];
        let mut gw = vec![T::zero(); ne];
        let mut gsig = vec![T::zero(); plan.sigma2.len()];
        let g = gout.data();
        let two = T::from_f64(2.0);
        let mut visit = |img: usize, r: usize, c: usize, e: usize, gpx: T| {
            if gpx == T::zero() {
                return;
            }
            let (i, j) = plan.pairs[e];
            let base = img * plan.k * 2;
            let a = [kp[base + 2 * i], kp[base + 2 * i + 1]];
            let (d2, t, rx, ry) = if i == j {
                let ex = gx[c] - a[0];
                let ey = gy[r] - a[1];
                (ex * ex + ey * ey, T::zero(), ex, ey)
            } else {
                let b = [kp[base + 2 * j], kp[base + 2 * j + 1]];
                let s = seg_eval(gx[c], gy[r], a, b);
                (s.d2, s.t, s.rx, s.ry)
            };
            let sidx = if shared_sigma { 0 } else { e };
            let inv = T::one() / plan.sigma2[sidx];
            let z = d2 * inv;
            if z > cutoff {
                return;
            }
            let ez = (-z).exp();
            let s = plan.weights[e] * ez;
            gw[e] += gpx * ez;
            // ds/d(d2) = -s/sigma2; d(d2)/da = -2(1-t)r, d(d2)/db = -2t*r.
            let gd2 = -gpx * s * inv;
            let ca = two * (T::one() - t);
            gkp[base + 2 * i] += gd2 * (-ca * rx);
            gkp[base + 2 * i + 1] += gd2 * (-ca * ry);
            if i != j {
                let cb = two * t;
                gkp[base + 2 * j] += gd2 * (-cb * rx);
                gkp[base + 2 * j + 1] += gd2 * (-cb * ry);
            }
            // ds/d(sigma2) = s * d2 / sigma2^2.
            gsig[sidx] += gpx * s * d2 * inv * inv;
        };
        for img in 0..plan.n {
            for r in 0..plan.h {
                for c in 0..plan.w {
                    if channels == 1 {
                        let px = (img * plan.h + r) * plan.w + c;
                        visit(img, r, c, winner[px] as usize, g[px]);
                    } else {
                        for e in 0..ne {
                            visit(img, r, c, e, g[((img * ne + e) * plan.h + r) * plan.w + c]);
                        }
                    }
                }
            }
        }
        sink.add(keypoints, Tensor::new(&shape, gkp).expect("shape"));
        sink.add(weights, Tensor::new(&[ne], gw).expect("shape"));
        if let Some(sv) = sigma_var {
            let len = gsig.len();
            sink.add(sv, Tensor::new(&[len], gsig).expect("shape"));
        }
    };
    let mut parents = vec![keypoints, weights];
    if let Some(sv) = sigma_var {
        parents.push(sv);
    }
    g.push_op("render_edge_map", value, &parents, backward)
}

/// Forward-only rendering for evaluation and visualization. `sigma2` holds
/// one element (fixed or shared) or one per edge.
pub fn render_edge_map_tensor<T: Scalar>(
    keypoints: &Tensor<T>,
    weights: &[T],
    sigma2: &[T],
    h: usize,
    w: usize,
    mode: HeatmapMode,
) -> Result<EdgeMap<T>> {
    let mut g = Graph::new();
    let kv = g.input(keypoints.clone());
    let wv = g.input(Tensor::new(&[weights.len()], weights.to_vec())?);
    let sig = if sigma2.len() == 1 {
        SigmaSource::Shared(g.input(Tensor::new(&[1], sigma2.to_vec())?))
    } else {
        SigmaSource::PerEdge(g.input(Tensor::new(&[sigma2.len()], sigma2.to_vec())?))
    };
    let out = render_edge_map(&mut g, kv, wv, sig, h, w, mode)?;
    Ok(EdgeMap { values: g.value(out).clone(), mode })
}

/// Softmax-weighted grid expectation: heatmaps `[n, k, h, w]` to coordinates
/// `[n, k, 2]` (x, then y). A flat (all-equal) heatmap maps to (0, 0), the
/// grid centroid.
pub fn soft_argmax<T: Scalar>(g: &mut Graph<T>, heat: Var) -> Result<Var> {
    let shape = g.value(heat).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("soft_argmax: input must be [n, k, h, w], got {shape:?}")));
    }
    let p = g.spatial_softmax(heat)?;
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pv = g.value(p).clone();
    let gx: Vec<T> = (0..w).map(|c| grid_coord(c, w)).collect();
    let gy: Vec<T> = (0..h).map(|r| grid_coord(r, h)).collect();
    let mut out = vec![T::zero(); n * k * 2];
    for s in 0..n * k {
        let prob = &pv.data()[s * h * w..(s + 1) * h * w];
        let mut ex = T::zero();
        let mut ey = T::zero();
        for r in 0..h {
            for c in 0..w {
                let pr = prob[r * w + c];
                ex += pr * gx[c];
                ey += pr * gy[r];
            }
        }
        out[2 * s] = ex;
        out[2 * s + 1] = ey;
    }
    let value = Tensor::new(&[n, k, 2], out)?;
    let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
        let mut gp = vec![T::zero(); n * k * h * w];
        for s in 0..n * k {
            let gox = gout.data()[2 * s];
            let goy = gout.data()[2 * s + 1];
            let dst = &mut gp[s * h * w..(s + 1) * h * w];
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + c] = gox * gx[c] + goy * gy[r];
                }
            }
        }
        sink.add(p, Tensor::new(&[n, k, h, w], gp).expect("shape"));
    };
    g.push_op("grid_expectation", value, &[p], backward)
}

/// Forward-only soft argmax used at inference time; same computation as the
/// graph op.
pub fn soft_argmax_tensor<T: Scalar>(heat: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let h = g.input(heat.clone());
    let out = soft_argmax(&mut g, h)?;
    Ok(g.value(out).clone())
}
