//! The gradient-check sweeps, shared by the gradcheck target (one test per
//! op) and the acceptance target (criterion 1 runs them all).

#![allow(dead_code)]

use super::{fd_check, fd_outcome, rand_tensor, sample_coords};
use keygraph::diffgeom::{
    grid_coord, render_edge_map, segment_distance, soft_argmax, HeatmapMode, SigmaSource,
};
use keygraph::nets::{Decoder, Encoder, FeatureExtractor};
use keygraph::numcore::{Graph, ParamGroup, ParamSet, Tensor, Var};
use keygraph::trainer::{mask_batch, reconstruction_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_CONFIGS: usize = 100;
pub const REL_TOL: f64 = 1e-3;

pub fn soft_argmax_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a01);
    let mut done = 0;
    let mut resamples = 0;
    while done < N_CONFIGS {
        let k = rng.gen_range(1..=2usize);
        let h = rng.gen_range(3..=6usize);
        let w = rng.gen_range(3..=6usize);
        let heat = rand_tensor(&[1, k, h, w], -2.0, 2.0, &mut rng);
        let target = rand_tensor(&[1, k, 2], -1.0, 1.0, &mut rng);
        let r = fd_check(&[heat], None, REL_TOL, |g, v| {
            let kp = soft_argmax(g, v[0])?;
            let t = g.input(target.clone());
            g.mse(kp, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

/// Raw (unclamped) projection parameter of `p` onto segment [a, b].
fn raw_t(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let v = [b[0] - a[0], b[1] - a[1]];
    let vv = v[0] * v[0] + v[1] * v[1];
    ((p[0] - a[0]) * v[0] + (p[1] - a[1]) * v[1]) / vv
}

pub fn segment_distance_suite() {
    // A 2x2 single-edge render: every pixel's intensity is a smooth function
    // of the point-to-segment distance, so this checks the distance gradient
    // for both interior and clamped projections. Configs whose projection
    // parameter sits within 1e-3 of a clamp boundary are resampled.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a02);
    let sigma2 = 0.3;
    let mut done = 0;
    let mut resamples = 0;
    while done < N_CONFIGS {
        let a: [f64; 2] = [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)];
        let b: [f64; 2] = [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)];
        let v = [b[0] - a[0], b[1] - a[1]];
        if (v[0] * v[0] + v[1] * v[1]).sqrt() < 0.3 {
            continue;
        }
        let mut clear = true;
        for r in 0..2 {
            for c in 0..2 {
                let p = [grid_coord::<f64>(c, 2), grid_coord::<f64>(r, 2)];
                let t = raw_t(p, a, b);
                if t.abs() < 1e-3 || (t - 1.0).abs() < 1e-3 {
                    clear = false;
                }
            }
        }
        if !clear {
            continue;
        }
        let kps = Tensor::new(&[1, 2, 2], vec![a[0], a[1], b[0], b[1]]).unwrap();
        let wts = Tensor::new(&[1], vec![rng.gen_range(0.5..1.5)]).unwrap();
        let target = rand_tensor(&[1, 1, 2, 2], 0.0, 1.0, &mut rng);
        let r = fd_check(&[kps, wts], None, REL_TOL, |g, v| {
            let out = render_edge_map(
                g,
                v[0],
                v[1],
                SigmaSource::Fixed(sigma2),
                2,
                2,
                HeatmapMode::MaxCombined,
            )?;
            let t = g.input(target.clone());
            g.mse(out, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
pub enum SigmaKind {
    Fixed,
    Shared,
    PerEdge,
}

/// Per-element map values recomputed directly, for the tie-margin filter.
fn brute_scores(
    kps: &[f64],
    weights: &[f64],
    sigma2: &[f64],
    pairs: &[(usize, usize)],
    h: usize,
    w: usize,
) -> Vec<Vec<f64>> {
    let mut scores = vec![vec![0.0; pairs.len()]; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = [grid_coord::<f64>(c, w), grid_coord::<f64>(r, h)];
            for (e, &(i, j)) in pairs.iter().enumerate() {
                let a = [kps[2 * i], kps[2 * i + 1]];
                let d = if i == j {
                    ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt()
                } else {
                    let b = [kps[2 * j], kps[2 * j + 1]];
                    segment_distance(p, a, b).0
                };
                let s2 = sigma2[if sigma2.len() == 1 { 0 } else { e }];
                scores[r * w + c][e] = weights[e] * (-d * d / s2).exp();
            }
        }
    }
    scores
}

/// True when some pixel's best and second-best scores are within 5%
/// (relatively) of each other. The margin is deliberately wider than the
/// minimal 1e-3 exclusion because perturbing sigma^2 by the FD step shifts
/// scores by up to d^2 * step / sigma^4, which can flip a narrow winner.
fn near_tie(scores: &[Vec<f64>]) -> bool {
    for px in scores {
        if px.len() < 2 {
            return false;
        }
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &s in px {
            if s > best {
                second = best;
                best = s;
            } else if s > second {
                second = s;
            }
        }
        if best - second < 5e-2 * best.abs().max(1e-12) {
            return true;
        }
    }
    false
}

/// True when any pixel projects within 1e-3 of a clamp boundary of any edge.
fn near_clamp(kps: &[f64], pairs: &[(usize, usize)], h: usize, w: usize) -> bool {
    for r in 0..h {
        for c in 0..w {
            let p = [grid_coord::<f64>(c, w), grid_coord::<f64>(r, h)];
            for &(i, j) in pairs {
                if i == j {
                    continue;
                }
                let a = [kps[2 * i], kps[2 * i + 1]];
                let b = [kps[2 * j], kps[2 * j + 1]];
                let t = raw_t(p, a, b);
                if t.abs() < 1e-3 || (t - 1.0).abs() < 1e-3 {
                    return true;
                }
            }
        }
    }
    false
}

fn pair_list(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            out.push((i, j));
        }
    }
    out
}

pub fn render_suite(mode: HeatmapMode, kind: SigmaKind, seed: u64, n_configs: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let mut resamples = 0;
    while done < n_configs {
        let k = match mode {
            HeatmapMode::KeypointsOnly => rng.gen_range(1..=3usize),
            _ => rng.gen_range(2..=3usize),
        };
        let h = rng.gen_range(4..=6usize);
        let w = rng.gen_range(4..=6usize);
        let pairs: Vec<(usize, usize)> = match mode {
            HeatmapMode::KeypointsOnly => (0..k).map(|i| (i, i)).collect(),
            _ => pair_list(k),
        };
        let ne = pairs.len();
        let kps = rand_tensor(&[1, k, 2], -0.9, 0.9, &mut rng);
        let wts = rand_tensor(&[ne], 0.3, 1.5, &mut rng);
        let n_sigma = if kind == SigmaKind::PerEdge { ne } else { 1 };
        let sig = rand_tensor(&[n_sigma], 0.1, 0.2, &mut rng);

        // Segment endpoints must be distinct and pixels clear of clamp
        // boundaries; max modes additionally need a clear per-pixel winner.
        let mut degenerate = false;
        for &(i, j) in &pairs {
            if i == j {
                continue;
            }
            let dx = kps.data()[2 * i] - kps.data()[2 * j];
            let dy = kps.data()[2 * i + 1] - kps.data()[2 * j + 1];
            if (dx * dx + dy * dy).sqrt() < 0.1 {
                degenerate = true;
            }
        }
        if degenerate || near_clamp(kps.data(), &pairs, h, w) {
            continue;
        }
        if mode != HeatmapMode::PerEdgeChannel {
            let scores = brute_scores(kps.data(), wts.data(), sig.data(), &pairs, h, w);
            if near_tie(&scores) {
                continue;
            }
        }

        let channels = if mode == HeatmapMode::PerEdgeChannel { ne } else { 1 };
        let target = rand_tensor(&[1, channels, h, w], 0.0, 1.0, &mut rng);
        let mut inputs = vec![kps, wts];
        if kind != SigmaKind::Fixed {
            inputs.push(sig.clone());
        }
        let fixed = sig.data()[0];
        let r = fd_check(&inputs, None, REL_TOL, |g, v| {
            let source = match kind {
                SigmaKind::Fixed => SigmaSource::Fixed(fixed),
                SigmaKind::Shared => SigmaSource::Shared(v[2]),
                SigmaKind::PerEdge => SigmaSource::PerEdge(v[2]),
            };
            let out = render_edge_map(g, v[0], v[1], source, h, w, mode)?;
            let t = g.input(target.clone());
            g.mse(out, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

pub fn render_max_combined_suite() {
    render_suite(HeatmapMode::MaxCombined, SigmaKind::Fixed, 0x5a10, 34);
    render_suite(HeatmapMode::MaxCombined, SigmaKind::Shared, 0x5a11, 34);
    render_suite(HeatmapMode::MaxCombined, SigmaKind::PerEdge, 0x5a12, 34);
}

pub fn render_per_edge_channel_suite() {
    render_suite(HeatmapMode::PerEdgeChannel, SigmaKind::Fixed, 0x5a20, 34);
    render_suite(HeatmapMode::PerEdgeChannel, SigmaKind::Shared, 0x5a21, 34);
    render_suite(HeatmapMode::PerEdgeChannel, SigmaKind::PerEdge, 0x5a22, 34);
}

pub fn render_keypoints_only_suite() {
    render_suite(HeatmapMode::KeypointsOnly, SigmaKind::Fixed, 0x5a30, 50);
    render_suite(HeatmapMode::KeypointsOnly, SigmaKind::Shared, 0x5a31, 50);
}

pub fn softplus_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a03);
    let mut done = 0;
    let mut resamples = 0;
    while done < N_CONFIGS {
        let n = rng.gen_range(1..=8usize);
        let x = rand_tensor(&[n], -4.0, 4.0, &mut rng);
        let target = rand_tensor(&[n], 0.0, 2.0, &mut rng);
        let r = fd_check(&[x], None, REL_TOL, |g, v| {
            let y = g.softplus(v[0])?;
            let t = g.input(target.clone());
            g.mse(y, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

pub fn conv2d_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a04);
    let mut done = 0;
    let mut resamples = 0;
    while done < N_CONFIGS {
        let n = rng.gen_range(1..=2usize);
        let cin = rng.gen_range(1..=3usize);
        let cout = rng.gen_range(1..=2usize);
        let ksize = if rng.gen_bool(0.5) { 1 } else { 3 };
        let stride = rng.gen_range(1..=2usize);
        let h = rng.gen_range(3..=5usize);
        let w = rng.gen_range(3..=5usize);
        let pad = ksize / 2;
        let oh = (h + 2 * pad - ksize) / stride + 1;
        let ow = (w + 2 * pad - ksize) / stride + 1;
        let x = rand_tensor(&[n, cin, h, w], -1.0, 1.0, &mut rng);
        let wt = rand_tensor(&[cout, cin, ksize, ksize], -0.7, 0.7, &mut rng);
        let bias = rand_tensor(&[cout], -0.5, 0.5, &mut rng);
        let target = rand_tensor(&[n, cout, oh, ow], -1.0, 1.0, &mut rng);
        let r = fd_check(&[x, wt, bias], None, REL_TOL, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let t = g.input(target.clone());
            g.mse(y, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

pub fn resize_bilinear_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a05);
    let mut done = 0;
    let mut resamples = 0;
    while done < N_CONFIGS {
        let c = rng.gen_range(1..=2usize);
        let ih = rng.gen_range(2..=5usize);
        let iw = rng.gen_range(2..=5usize);
        let oh = rng.gen_range(2..=7usize);
        let ow = rng.gen_range(2..=7usize);
        let x = rand_tensor(&[1, c, ih, iw], -1.0, 1.0, &mut rng);
        let target = rand_tensor(&[1, c, oh, ow], -1.0, 1.0, &mut rng);
        let r = fd_check(&[x], None, REL_TOL, |g, v| {
            let y = g.resize_bilinear(v[0], oh, ow)?;
            let t = g.input(target.clone());
            g.mse(y, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

pub fn spatial_standardize_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a08);
    let mut done = 0;
    let mut resamples = 0;
    while done < N_CONFIGS {
        let n = rng.gen_range(1..=2usize);
        let k = rng.gen_range(1..=3usize);
        let h = rng.gen_range(2..=5usize);
        let w = rng.gen_range(2..=5usize);
        let x = rand_tensor(&[n, k, h, w], -2.0, 2.0, &mut rng);
        let gain = rand_tensor(&[k], -1.2, 1.2, &mut rng);
        let bias = rand_tensor(&[k], -0.5, 0.5, &mut rng);
        let target = rand_tensor(&[n, k, h, w], -1.5, 1.5, &mut rng);
        let r = fd_check(&[x, gain, bias], None, REL_TOL, |g, v| {
            let y = g.spatial_standardize(v[0], v[1], v[2])?;
            let t = g.input(target.clone());
            g.mse(y, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

pub fn decode_through_alpha_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a06);
    let mut done = 0;
    let mut resamples = 0;
    let mut cfg = 0u64;
    while done < N_CONFIGS {
        cfg += 1;
        let mut net_rng = ChaCha8Rng::seed_from_u64(0x6000 + cfg);
        let mut ps = ParamSet::<f64>::new();
        let decoder = Decoder::build(&mut ps, 8, 1, &mut net_rng);
        let n_params = ps.len();
        let mut inputs: Vec<Tensor<f64>> = ps.iter().map(|(_, p)| p.value.clone()).collect();
        let masked_idx = inputs.len();
        inputs.push(rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let edge_idx = inputs.len();
        inputs.push(rand_tensor(&[1, 1, 8, 8], 0.0, 1.0, &mut rng));
        let alpha_idx = inputs.len();
        inputs.push(rand_tensor(&[1], 0.2, 1.5, &mut rng));
        let target = rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);

        let sizes: Vec<usize> = inputs[..n_params].iter().map(|t| t.len()).collect();
        let mut coords = sample_coords(&sizes, 6, &mut rng);
        coords.push((alpha_idx, 0));
        for _ in 0..3 {
            coords.push((masked_idx, rng.gen_range(0..inputs[masked_idx].len())));
        }
        coords.push((edge_idx, rng.gen_range(0..inputs[edge_idx].len())));

        let r = fd_check(&inputs, Some(&coords), REL_TOL, |g, v| {
            let recon =
                decoder.forward(g, &v[..n_params], v[masked_idx], v[edge_idx], v[alpha_idx])?;
            let t = g.input(target.clone());
            g.mse(recon, t)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

pub fn end_to_end_suite() {
    // Full miniature training graph: encode, soft-argmax, render through
    // softplus weights, decode the masked image gated by alpha, perceptual
    // plus pixel loss. 8x8 image, two keypoints (one edge, so the max can
    // never tie).
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a07);
    let extractor = FeatureExtractor::<f64>::new(99);
    let mut done = 0;
    let mut resamples = 0;
    let mut cfg = 0u64;
    while done < N_CONFIGS {
        cfg += 1;
        let mut net_rng = ChaCha8Rng::seed_from_u64(0x7000 + cfg);
        let mut ps = ParamSet::<f64>::new();
        let encoder = Encoder::build(&mut ps, 8, 2, &mut net_rng);
        let decoder = Decoder::build(&mut ps, 8, 1, &mut net_rng);
        let raw_w = ps.register(
            "graph.raw_weights",
            rand_tensor(&[1], -0.5, 1.0, &mut rng),
            ParamGroup::EdgeWeight,
        );
        let alpha = ps.register(
            "graph.alpha",
            rand_tensor(&[1], 0.3, 1.2, &mut rng),
            ParamGroup::Alpha,
        );
        let n_params = ps.len();

        let mut inputs: Vec<Tensor<f64>> = ps.iter().map(|(_, p)| p.value.clone()).collect();
        let image_idx = inputs.len();
        let image = rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        inputs.push(image.clone());

        // A nearly degenerate edge (coincident keypoints) has huge gradient
        // curvature, so finite differences are uninformative: resample.
        let kp = {
            let mut g = Graph::new();
            let vars: Vec<Var> =
                inputs[..n_params].iter().map(|t| g.input(t.clone())).collect();
            let x = g.input(image.clone());
            let heat = encoder.forward(&mut g, &vars, x).unwrap();
            let kv = soft_argmax(&mut g, heat).unwrap();
            g.value(kv).data().to_vec()
        };
        let sep = ((kp[0] - kp[2]).powi(2) + (kp[1] - kp[3]).powi(2)).sqrt();
        if sep < 0.05 {
            continue;
        }

        let mut mask_rng = ChaCha8Rng::seed_from_u64(0x8000 + cfg);
        let masked = mask_batch(&image, 1, 0.8, &mut mask_rng).unwrap();

        let sizes: Vec<usize> = inputs[..n_params - 2].iter().map(|t| t.len()).collect();
        let mut coords = sample_coords(&sizes, 4, &mut rng);
        coords.push((raw_w.0, 0));
        coords.push((alpha.0, 0));
        for _ in 0..4 {
            coords.push((image_idx, rng.gen_range(0..inputs[image_idx].len())));
        }

        let r = fd_check(&inputs, Some(&coords), REL_TOL, |g, v| {
            let vars = &v[..n_params];
            let heat = encoder.forward(g, vars, v[image_idx])?;
            let kps = soft_argmax(g, heat)?;
            let weights = g.softplus(vars[raw_w.0])?;
            let edge = render_edge_map(
                g,
                kps,
                weights,
                SigmaSource::Fixed(0.02),
                8,
                8,
                HeatmapMode::MaxCombined,
            )?;
            let mv = g.input(masked.clone());
            let recon = decoder.forward(g, vars, mv, edge, vars[alpha.0])?;
            reconstruction_loss(g, v[image_idx], recon, &extractor, 0.1)
        });
        if fd_outcome(r, &mut resamples) {
            done += 1;
        }
    }
}

/// Every sweep in sequence; the whole surface of the gradient criterion.
pub fn full_sweep() {
    soft_argmax_suite();
    segment_distance_suite();
    render_max_combined_suite();
    render_per_edge_channel_suite();
    render_keypoints_only_suite();
    softplus_suite();
    conv2d_suite();
    resize_bilinear_suite();
    spatial_standardize_suite();
    decode_through_alpha_suite();
    end_to_end_suite();
}
