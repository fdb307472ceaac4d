//! Training: configuration, model state, the masked-reconstruction training
//! step, Adam with learning-rate groups, and checkpointing.
//!
//! A training step is fully determined by (config, parameter state, step
//! index): batch selection and mask sampling derive their RNG from
//! `(seed, step)`, so rerunning a config reproduces every loss bit-for-bit,
//! and resuming from a checkpoint continues the exact same trajectory.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgeom::{
    render_edge_map, soft_argmax, EdgeGraph, HeatmapMode, SigmaSource, ThicknessMode,
};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, make_mask};
use crate::nets::{Decoder, Encoder, FeatureExtractor};
use crate::numcore::{Graph, ParamGroup, ParamId, ParamSet, Scalar, Tensor, Var};

/// Full training configuration. Serialized into checkpoints and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub image_size: usize,
    pub n_keypoints: usize,
    /// Squared thickness of rendered edges (fixed mode), and the initial
    /// value for the learnable thickness modes.
    pub sigma2: f64,
    pub thickness_mode: ThicknessMode,
    pub heatmap_mode: HeatmapMode,
    pub learnable_alpha: bool,
    /// Mask patch side in pixels; defaults to image_size / 8.
    pub patch_px: Option<usize>,
    pub mask_ratio: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning-rate multiplier for the edge-weight group.
    pub edge_lr_mult: f64,
    /// Weight of the pixel MSE term added to the feature loss; 0 disables it.
    pub pixel_loss_weight: f64,
    pub batch_size: usize,
    pub iters: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 64,
            n_keypoints: 8,
            sigma2: 5e-5,
            thickness_mode: ThicknessMode::Fixed,
            heatmap_mode: HeatmapMode::MaxCombined,
            learnable_alpha: true,
            patch_px: None,
            mask_ratio: 0.8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            edge_lr_mult: 512.0,
            pixel_loss_weight: 0.1,
            batch_size: 16,
            iters: 3000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_patch_px(&self) -> usize {
        self.patch_px.unwrap_or(self.image_size / 8)
    }

    pub fn edge_count(&self) -> usize {
        self.n_keypoints * (self.n_keypoints - 1) / 2
    }

    /// Channels of the rendered map fed to the decoder.
    pub fn edge_channels(&self) -> usize {
        match self.heatmap_mode {
            HeatmapMode::MaxCombined | HeatmapMode::KeypointsOnly => 1,
            HeatmapMode::PerEdgeChannel => self.edge_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 8 and at least 8, got {}",
                self.image_size
            )));
        }
        if self.n_keypoints == 0 {
            return Err(Error::Config("n_keypoints must be at least 1".into()));
        }
        if self.n_keypoints < 2 && self.heatmap_mode != HeatmapMode::KeypointsOnly {
            return Err(Error::Config(format!(
                "edge modes need at least 2 keypoints, got {}",
                self.n_keypoints
            )));
        }
        if self.heatmap_mode == HeatmapMode::KeypointsOnly
            && self.thickness_mode == ThicknessMode::PerEdgeLearnable
        {
            return Err(Error::Config(
                "keypoints_only has no edges, so per_edge_learnable thickness is inconsistent"
                    .into(),
            ));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        let patch = self.effective_patch_px();
        if patch == 0 || self.image_size % patch != 0 {
            return Err(Error::Config(format!(
                "patch_px {patch} must divide image_size {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in [0, 1], got {}",
                self.mask_ratio
            )));
        }
        if self.lr < 0.0 || self.edge_lr_mult < 0.0 || !(self.adam_eps > 0.0) {
            return Err(Error::Config(
                "lr and edge_lr_mult must be nonnegative and adam_eps positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.pixel_loss_weight < 0.0 {
            return Err(Error::Config(format!(
                "pixel_loss_weight must be nonnegative, got {}",
                self.pixel_loss_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Apply one `key=value` override; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::Config(format!("invalid value {v:?} for config key {key}"))
            })
        }
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "n_keypoints" => self.n_keypoints = parse(key, value)?,
            "sigma2" => self.sigma2 = parse(key, value)?,
            "thickness_mode" => self.thickness_mode = value.parse()?,
            "heatmap_mode" => self.heatmap_mode = value.parse()?,
            "learnable_alpha" => self.learnable_alpha = parse(key, value)?,
            "patch_px" => self.patch_px = Some(parse(key, value)?),
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "edge_lr_mult" => self.edge_lr_mult = parse(key, value)?,
            "pixel_loss_weight" => self.pixel_loss_weight = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// Parameter ids of the learned graph inside the [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct GraphParams {
    pub raw_weights: ParamId,
    pub per_point_weights: ParamId,
    pub alpha: ParamId,
    pub raw_thickness: Option<ParamId>,
}

/// First and second Adam moments, aligned with the parameter set.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    fn zeros_like(ps: &ParamSet<T>) -> Self {
        let m = ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { m, v }
    }
}

/// Everything a run owns: parameters, network topology, the frozen feature
/// extractor, optimizer moments, and the step counter.
#[derive(Clone, Debug)]
pub struct ModelState<T: Scalar> {
    pub config: TrainConfig,
    pub params: ParamSet<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub extractor: FeatureExtractor<T>,
    pub graph_params: GraphParams,
    pub opt: AdamState<T>,
    pub step: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent seed stream `stream` derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(stream))
}

const STREAM_PARAMS: u64 = 1;
const STREAM_EXTRACTOR: u64 = 2;
const STREAM_STEP_BASE: u64 = 1 << 32;

impl<T: Scalar> ModelState<T> {
    /// Fresh model for `config`; all randomness comes from `config.seed`.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PARAMS));
        let encoder = Encoder::build(&mut ps, config.image_size, config.n_keypoints, &mut rng);
        let decoder = Decoder::build(&mut ps, config.image_size, config.edge_channels(), &mut rng);
        let proto = EdgeGraph::<T>::new(config.n_keypoints, config.sigma2, config.thickness_mode)?;
        let kp_only = config.heatmap_mode == HeatmapMode::KeypointsOnly;
        let raw_weights = ps.register_with(
            "graph.raw_weights",
            proto.raw_weights.clone(),
            ParamGroup::EdgeWeight,
            !kp_only,
        );
        let per_point_weights = ps.register_with(
            "graph.per_point_weights",
            proto.per_point_weights.clone(),
            ParamGroup::EdgeWeight,
            kp_only,
        );
        let alpha = ps.register_with(
            "graph.alpha",
            proto.alpha.clone(),
            ParamGroup::Alpha,
            config.learnable_alpha,
        );
        let raw_thickness = match config.thickness_mode {
            ThicknessMode::Fixed => None,
            _ => Some(ps.register(
                "graph.raw_thickness",
                proto.raw_thickness.clone(),
                ParamGroup::Thickness,
            )),
        };
        let extractor = FeatureExtractor::new(derive_seed(config.seed, STREAM_EXTRACTOR));
        let opt = AdamState::zeros_like(&ps);
        Ok(ModelState {
            config,
            params: ps,
            encoder,
            decoder,
            extractor,
            graph_params: GraphParams { raw_weights, per_point_weights, alpha, raw_thickness },
            opt,
            step: 0,
        })
    }

    /// Materialize the learned graph for evaluation and rendering.
    pub fn edge_graph(&self) -> EdgeGraph<T> {
        let gp = &self.graph_params;
        let mut eg = EdgeGraph::new(
            self.config.n_keypoints,
            self.config.sigma2,
            self.config.thickness_mode,
        )
        .expect("config was validated at init");
        eg.raw_weights = self.params.get(gp.raw_weights).value.clone();
        eg.per_point_weights = self.params.get(gp.per_point_weights).value.clone();
        eg.alpha = self.params.get(gp.alpha).value.clone();
        if let Some(id) = gp.raw_thickness {
            eg.raw_thickness = self.params.get(id).value.clone();
        }
        eg
    }

    /// Feed every parameter onto a fresh graph: trainable ones as
    /// differentiable leaves, frozen ones as plain inputs.
    fn feed_params(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, p)| {
                if trainable && p.trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect()
    }

    /// Forward pass from images to keypoint coordinates `[n, k, 2]`; no
    /// gradients are recorded.
    pub fn infer_keypoints(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.feed_params(&mut g, false);
        let x = g.input(images.clone());
        let heat = self.encoder.forward(&mut g, &vars, x)?;
        let kps = soft_argmax(&mut g, heat)?;
        Ok(g.value(kps).clone())
    }

    /// Loss of one already-masked batch without touching any state; shares
    /// the graph-building path with [`train_step`].
    pub fn loss_only(&self, images: &Tensor<T>, masked: &Tensor<T>) -> Result<T> {
        let mut g = Graph::new();
        let vars = self.feed_params(&mut g, false);
        let (loss, _) = self.build_loss(&mut g, &vars, images, masked)?;
        Ok(g.value(loss).item())
    }

    fn build_loss(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: &Tensor<T>,
        masked: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let gp = &self.graph_params;
        let img_in = g.input(images.clone());
        let masked_in = g.input(masked.clone());
        let heat = self.encoder.forward(g, vars, img_in)?;
        let kps = soft_argmax(g, heat)?;
        let weights = if cfg.heatmap_mode == HeatmapMode::KeypointsOnly {
            g.softplus(vars[gp.per_point_weights.0])?
        } else {
            g.softplus(vars[gp.raw_weights.0])?
        };
        let sigma = match cfg.thickness_mode {
            ThicknessMode::Fixed => SigmaSource::Fixed(T::from_f64(cfg.sigma2)),
            ThicknessMode::SharedLearnable => {
                let id = gp.raw_thickness.expect("learnable thickness registered");
                SigmaSource::Shared(g.softplus(vars[id.0])?)
            }
            ThicknessMode::PerEdgeLearnable => {
                let id = gp.raw_thickness.expect("learnable thickness registered");
                SigmaSource::PerEdge(g.softplus(vars[id.0])?)
            }
        };
        let edge = render_edge_map(
            g,
            kps,
            weights,
            sigma,
            cfg.image_size,
            cfg.image_size,
            cfg.heatmap_mode,
        )?;
        let recon =
            self.decoder.forward(g, vars, masked_in, edge, vars[gp.alpha.0])?;
        let loss = reconstruction_loss(
            g,
            img_in,
            recon,
            &self.extractor,
            T::from_f64(cfg.pixel_loss_weight),
        )?;
        Ok((loss, kps))
    }
}

/// Perceptual reconstruction loss: the sum over pyramid levels of the MSE
/// between frozen-feature activations of `original` and `recon`, plus
/// `pixel_weight` times the pixel MSE (skipped when zero).
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    original: Var,
    recon: Var,
    extractor: &FeatureExtractor<T>,
    pixel_weight: T,
) -> Result<Var> {
    let fo = extractor.forward(g, original)?;
    let fr = extractor.forward(g, recon)?;
    let mut loss: Option<Var> = None;
    for (a, b) in fo.iter().zip(fr.iter()) {
        let l = g.mse(*a, *b)?;
        loss = Some(match loss {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let mut total = loss.expect("extractor has at least one level");
    if pixel_weight > T::zero() {
        let pix = g.mse(original, recon)?;
        total = g.add_scaled(total, pix, pixel_weight)?;
    }
    Ok(total)
}

/// One Adam update with bias correction:
/// `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`,
/// `p -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)`, with `t` counting
/// from 1.
pub fn adam_update<T: Scalar>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    debug_assert!(t >= 1, "Adam step count starts at 1");
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - beta2.powi(t as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(eps);
    let (md, vd) = (m.data_mut(), v.data_mut());
    let pd = value.data_mut();
    for ((p, &gr), (mi, vi)) in
        pd.iter_mut().zip(grad.data().iter()).zip(md.iter_mut().zip(vd.iter_mut()))
    {
        *mi = b1 * *mi + (one - b1) * gr;
        *vi = b2 * *vi + (one - b2) * gr * gr;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
}

fn group_lr(cfg: &TrainConfig, group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Net | ParamGroup::Alpha | ParamGroup::Thickness => cfg.lr,
        ParamGroup::EdgeWeight => cfg.lr * cfg.edge_lr_mult,
    }
}

/// Zero the masked patches of every image in a `[n, 3, s, s]` batch, one
/// freshly sampled mask per image.
pub fn mask_batch<T: Scalar>(
    batch: &Tensor<T>,
    patch_px: usize,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("mask_batch: batch must be 4D, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); batch.len()];
    for i in 0..n {
        let img = Tensor::new(&[c, h, w], batch.data()[i * c * h * w..(i + 1) * c * h * w].to_vec())?;
        let mask = make_mask(h, patch_px, ratio, rng)?;
        let masked = apply_mask(&img, &mask)?;
        out[i * c * h * w..(i + 1) * c * h * w].copy_from_slice(masked.data());
    }
    Tensor::new(&shape, out)
}

/// One optimization step on `batch`. Masks the batch, runs the forward and
/// backward passes, and applies Adam to every trainable parameter. Returns
/// the loss. A non-finite loss or intermediate aborts with the step number.
pub fn train_step<T: Scalar>(
    state: &mut ModelState<T>,
    batch: &Tensor<T>,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    fn forward_backward<T: Scalar>(
        state: &mut ModelState<T>,
        batch: &Tensor<T>,
        masked: &Tensor<T>,
    ) -> Result<T> {
        let mut g = Graph::new();
        let vars = state.feed_params(&mut g, true);
        let (loss, _) = state.build_loss(&mut g, &vars, batch, masked)?;
        let loss_val = g.value(loss).item();
        g.backward(loss)?;
        for (id, p) in state.params.iter_mut() {
            if !p.trainable {
                continue;
            }
            match g.grad(vars[id.0]) {
                Some(gr) => p.grad = gr.clone(),
                None => p.grad.fill(T::zero()),
            }
        }
        Ok(loss_val)
    }

    let cfg = state.config.clone();
    let step = state.step;
    let masked = mask_batch(batch, cfg.effective_patch_px(), cfg.mask_ratio, rng)?;
    let loss_val = forward_backward(state, batch, &masked).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged { step, detail: e.to_string() },
        other => other,
    })?;

    let t = state.step + 1;
    for (idx, (_, p)) in state.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        adam_update(
            &mut p.value,
            &p.grad,
            &mut state.opt.m[idx],
            &mut state.opt.v[idx],
            group_lr(&cfg, p.group),
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            t,
        );
    }
    state.params.zero_grads();
    state.step = t;
    Ok(loss_val)
}

/// RNG for one training step; depends only on (seed, step), so resumed runs
/// continue the original trajectory.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_STEP_BASE + step))
}

/// Assemble the batch for `step` by drawing indices from the step RNG.
pub fn sample_batch<T: Scalar>(
    images: &[Tensor<T>],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot sample a batch from an empty dataset".into()));
    }
    let shape = images[0].shape().to_vec();
    let per = images[0].len();
    let mut data = vec![T::zero(); batch_size * per];
    for b in 0..batch_size {
        let idx = rng.gen_range(0..images.len());
        let img = &images[idx];
        if img.shape() != shape {
            return Err(Error::Shape(format!(
                "image {idx} has shape {:?}, expected {shape:?}",
                img.shape()
            )));
        }
        data[b * per..(b + 1) * per].copy_from_slice(img.data());
    }
    let mut full = vec![batch_size];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

/// Run training from the state's current step up to `config.iters`, invoking
/// `on_step(state, loss)` after every update (`state.step` counts from 1).
/// The hook may checkpoint or log; its errors abort the loop.
pub fn train_loop<T: Scalar>(
    state: &mut ModelState<T>,
    images: &[Tensor<T>],
    mut on_step: impl FnMut(&ModelState<T>, f64) -> Result<()>,
) -> Result<()> {
    let cfg = state.config.clone();
    while state.step < cfg.iters {
        let mut rng = step_rng(cfg.seed, state.step);
        let batch = sample_batch(images, cfg.batch_size, &mut rng)?;
        let loss = train_step(state, &batch, &mut rng)?;
        on_step(state, loss.as_f64())?;
    }
    Ok(())
}

// --- Checkpointing -------------------------------------------------------
//
// A checkpoint is one JSON manifest line followed by raw little-endian f32
// data. The manifest lists every tensor with its byte offset and length
// relative to the start of the blob section, so
// `file size == manifest line + 1 + sum of tensor lengths`.

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    step: u64,
    extractor_seed: u64,
    tensors: Vec<TensorMeta>,
}

impl ModelState<f32> {
    fn checkpoint_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (_, p) in self.params.iter() {
            out.push((p.name.clone(), &p.value));
        }
        for (i, w) in self.extractor.weights.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), w));
        }
        for (idx, (_, p)) in self.params.iter().enumerate() {
            out.push((format!("opt.m.{}", p.name), &self.opt.m[idx]));
        }
        for (idx, (_, p)) in self.params.iter().enumerate() {
            out.push((format!("opt.v.{}", p.name), &self.opt.v[idx]));
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = self.checkpoint_tensors();
        let mut metas = Vec::with_capacity(tensors.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, t) in &tensors {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            metas.push(TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: (t.len() * 4) as u64,
            });
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            extractor_seed: self.extractor.seed,
            tensors: metas,
        };
        let line = serde_json::to_string(&manifest)
            .map_err(|e| Error::Checkpoint(format!("serializing manifest: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        f.write_all(&blob).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Checkpoint(format!("manifest parse failed: {e}")))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                manifest.version
            )));
        }
        let blob = &bytes[nl + 1..];
        let mut state = ModelState::<f32>::init(manifest.config.clone())?;
        state.extractor = FeatureExtractor::new(manifest.extractor_seed);
        state.step = manifest.step;

        let mut expected: std::collections::BTreeMap<String, Vec<usize>> = state
            .checkpoint_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for meta in &manifest.tensors {
            let want = expected.remove(&meta.name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected tensor {}", meta.name))
            })?;
            if want != meta.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?} but this configuration needs {:?}",
                    meta.name, meta.shape, want
                )));
            }
            let count: usize = meta.shape.iter().product();
            if meta.len != (count * 4) as u64 {
                return Err(Error::Checkpoint(format!(
                    "tensor {} length {} does not match shape {:?}",
                    meta.name, meta.len, meta.shape
                )));
            }
            let lo = meta.offset as usize;
            let hi = lo + meta.len as usize;
            if hi > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} extends past the end of the file",
                    meta.name
                )));
            }
            let data: Vec<f32> = blob[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&meta.shape, data)?;
            write_tensor(&mut state, &meta.name, tensor)?;
        }
        if let Some((name, _)) = expected.into_iter().next() {
            return Err(Error::Checkpoint(format!("missing tensor {name}")));
        }
        Ok(state)
    }
}

fn write_tensor(state: &mut ModelState<f32>, name: &str, tensor: Tensor<f32>) -> Result<()> {
    if let Some(rest) = name.strip_prefix("opt.m.") {
        let id = state.params.by_name(rest)?;
        state.opt.m[id.0] = tensor;
        return Ok(());
    }
    if let Some(rest) = name.strip_prefix("opt.v.") {
        let id = state.params.by_name(rest)?;
        state.opt.v[id.0] = tensor;
        return Ok(());
    }
    if let Some(rest) = name.strip_prefix("extractor.") {
        let idx: usize = rest
            .strip_suffix(".weight")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("malformed tensor name {name}")))?;
        state.extractor.weights[idx] = tensor;
        return Ok(());
    }
    let id = state.params.by_name(name)?;
    state.params.get_mut(id).value = tensor;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            n_keypoints: 3,
            sigma2: 1e-3,
            batch_size: 2,
            iters: 2,
            patch_px: Some(4),
            ..TrainConfig::default()
        }
    }

    fn tiny_images(n: usize, s: usize) -> Vec<Tensor<f32>> {
        (0..n).map(|i| crate::synthdata::generate_sample(i as u64, s).image).collect()
    }

    #[test]
    fn config_defaults_validate() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().effective_patch_px(), 8);
    }

    #[test]
    fn config_rejects_inconsistencies() {
        let mut c = TrainConfig::default();
        c.image_size = 60;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.heatmap_mode = HeatmapMode::KeypointsOnly;
        c.thickness_mode = ThicknessMode::PerEdgeLearnable;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.patch_px = Some(24);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.n_keypoints = 1;
        assert!(c.validate().is_err());
        c.heatmap_mode = HeatmapMode::KeypointsOnly;
        c.validate().unwrap();
    }

    #[test]
    fn config_kv_overrides() {
        let mut c = TrainConfig::default();
        c.apply_kv("n_keypoints", "5").unwrap();
        c.apply_kv("heatmap_mode", "per_edge_channel").unwrap();
        c.apply_kv("lr", "0.001").unwrap();
        assert_eq!(c.n_keypoints, 5);
        assert_eq!(c.heatmap_mode, HeatmapMode::PerEdgeChannel);
        assert_eq!(c.lr, 0.001);
        let err = c.apply_kv("learning_rate", "1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"), "{err}");
        let err = c.apply_kv("lr", "fast").unwrap_err();
        assert!(err.to_string().contains("invalid value"), "{err}");
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut m = Tensor::scalar(0.0f64);
        let mut v = Tensor::scalar(0.0f64);
        adam_update(&mut p, &g, &mut m, &mut v, 1e-4, 0.9, 0.99, 1e-8, 1);
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((p.item() - want).abs() < 1e-18, "{} vs {want}", p.item());
        // Moments hold the biased running averages.
        assert!((m.item() - 0.1).abs() < 1e-15);
        assert!((v.item() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_lr_and_zero_grad_leave_params_fixed() {
        let mut p = Tensor::scalar(0.5f64);
        let g = Tensor::scalar(0.7f64);
        let (mut m, mut v) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_update(&mut p, &g, &mut m, &mut v, 0.0, 0.9, 0.99, 1e-8, 1);
        assert_eq!(p.item(), 0.5, "lr 0 must not move the parameter");
        assert!(m.item() != 0.0, "moments still track the gradient");

        let mut p = Tensor::scalar(0.5f64);
        let zero = Tensor::scalar(0.0f64);
        let (mut m, mut v) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_update(&mut p, &zero, &mut m, &mut v, 1e-4, 0.9, 0.99, 1e-8, 1);
        assert_eq!(p.item(), 0.5, "zero gradient with zero moments is a no-op");
        assert_eq!(m.item(), 0.0);
    }

    #[test]
    fn edge_group_scales_learning_rate_exactly() {
        let grad = Tensor::scalar(0.37f64);
        let mut p_net = Tensor::scalar(1.0f64);
        let (mut m1, mut v1) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_update(&mut p_net, &grad, &mut m1, &mut v1, 1e-4, 0.9, 0.99, 1e-8, 1);
        let mut p_edge = Tensor::scalar(1.0f64);
        let (mut m2, mut v2) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_update(&mut p_edge, &grad, &mut m2, &mut v2, 512.0 * 1e-4, 0.9, 0.99, 1e-8, 1);
        let d_net = 1.0 - p_net.item();
        let d_edge = 1.0 - p_edge.item();
        assert!((d_edge / d_net - 512.0).abs() < 1e-9, "ratio {}", d_edge / d_net);
    }

    #[test]
    fn init_registers_expected_params() {
        let st = ModelState::<f32>::init(tiny_config()).unwrap();
        assert!(st.params.by_name("graph.raw_weights").is_ok());
        assert!(st.params.by_name("graph.alpha").is_ok());
        assert!(st.params.by_name("encoder.head.weight").is_ok());
        // Fixed thickness registers no thickness parameter.
        assert!(st.graph_params.raw_thickness.is_none());
        assert!(st.params.get(st.graph_params.raw_weights).trainable);
        assert!(!st.params.get(st.graph_params.per_point_weights).trainable);
        let eg = st.edge_graph();
        assert_eq!(eg.edge_count(), 3);

        let mut cfg = tiny_config();
        cfg.heatmap_mode = HeatmapMode::KeypointsOnly;
        let st = ModelState::<f32>::init(cfg).unwrap();
        assert!(!st.params.get(st.graph_params.raw_weights).trainable);
        assert!(st.params.get(st.graph_params.per_point_weights).trainable);
    }

    #[test]
    fn train_step_decreases_nothing_but_runs_and_is_deterministic() {
        let cfg = tiny_config();
        let images = tiny_images(4, 16);
        let run = || {
            let mut st = ModelState::<f32>::init(cfg.clone()).unwrap();
            let mut losses = Vec::new();
            train_loop(&mut st, &images, |_, l| {
                losses.push(l);
                Ok(())
            })
            .unwrap();
            (losses, st)
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1.len(), 2);
        assert!(l1.iter().all(|l| l.is_finite()));
        assert_eq!(l1, l2, "identical configs must produce identical losses");
        for ((_, a), (_, b)) in s1.params.iter().zip(s2.params.iter()) {
            assert!(a.value.bit_eq(&b.value), "param {} diverged", a.name);
        }
        assert_eq!(s1.step, 2);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_config();
        let images = tiny_images(4, 16);
        let mut full = ModelState::<f32>::init(cfg.clone()).unwrap();
        train_loop(&mut full, &images, |_, _| Ok(())).unwrap();

        let mut half = ModelState::<f32>::init(cfg.clone()).unwrap();
        let mut cfg1 = cfg.clone();
        cfg1.iters = 1;
        half.config = cfg1;
        train_loop(&mut half, &images, |_, _| Ok(())).unwrap();
        half.config = cfg.clone();
        train_loop(&mut half, &images, |_, _| Ok(())).unwrap();
        for ((_, a), (_, b)) in full.params.iter().zip(half.params.iter()) {
            assert!(a.value.bit_eq(&b.value), "param {} differs after resume", a.name);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = tiny_config();
        let images = tiny_images(4, 16);
        let mut st = ModelState::<f32>::init(cfg).unwrap();
        train_loop(&mut st, &images, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        st.save_checkpoint(&path).unwrap();

        // Byte accounting: manifest line + newline + blob.
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let total: u64 = st.checkpoint_tensors().iter().map(|(_, t)| (t.len() * 4) as u64).sum();
        assert_eq!(bytes.len() as u64, nl as u64 + 1 + total);

        let loaded = ModelState::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, st.step);
        assert_eq!(loaded.config, st.config);
        for ((_, a), (_, b)) in st.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bit_eq(&b.value), "param {}", a.name);
        }
        for (a, b) in st.opt.m.iter().zip(loaded.opt.m.iter()) {
            assert!(a.bit_eq(b));
        }
        for (a, b) in st.extractor.weights.iter().zip(loaded.extractor.weights.iter()) {
            assert!(a.bit_eq(b));
        }

        // Saving the loaded state reproduces the file byte for byte.
        let path2 = dir.path().join("ckpt2");
        loaded.save_checkpoint(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_shape_mismatch_names_tensor() {
        let cfg = tiny_config();
        let st = ModelState::<f32>::init(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        st.save_checkpoint(&path).unwrap();

        // Rewrite the manifest claiming a different keypoint count; the
        // stored tensors no longer match the rebuilt shapes.
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        manifest["config"]["n_keypoints"] = serde_json::json!(5);
        let tampered = dir.path().join("tampered");
        let mut out = serde_json::to_vec(&manifest).unwrap();
        out.push(b'\n');
        out.extend_from_slice(&bytes[nl + 1..]);
        std::fs::write(&tampered, out).unwrap();

        let err = ModelState::<f32>::load_checkpoint(&tampered).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("graph.raw_weights") || msg.contains("encoder.head"), "{msg}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let cfg = tiny_config();
        let mut st = ModelState::<f32>::init(cfg).unwrap();
        st.step = 41;
        // Poison the gate so the first op consuming it goes non-finite.
        let id = st.params.by_name("graph.alpha").unwrap();
        st.params.get_mut(id).value.fill(f32::NAN);
        let images = tiny_images(2, 16);
        let mut rng = step_rng(0, 0);
        let batch = sample_batch(&images, 2, &mut rng).unwrap();
        let err = train_step(&mut st, &batch, &mut rng).unwrap_err();
        match err {
            Error::Diverged { step, .. } => assert_eq!(step, 41),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn keypoints_inference_shape_and_range() {
        let st = ModelState::<f32>::init(tiny_config()).unwrap();
        let images = tiny_images(3, 16);
        let batch = {
            let mut rng = step_rng(0, 0);
            sample_batch(&images, 3, &mut rng).unwrap()
        };
        let kps = st.infer_keypoints(&batch).unwrap();
        assert_eq!(kps.shape(), &[3, 3, 2]);
        assert!(kps.data().iter().all(|v| v.abs() <= 1.0 + 1e-5));
    }
}
