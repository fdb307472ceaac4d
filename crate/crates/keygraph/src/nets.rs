//! The three networks: keypoint encoder, reconstruction decoder, and the
//! frozen random-feature pyramid used by the perceptual loss.
//!
//! All convolutions are 3x3 (except the encoder's 1x1 head) with same
//! padding, He-initialized, and followed by LeakyReLU(0.2) unless noted.
//! Downsampling is stride 2; upsampling is 2x bilinear followed by a
//! stride-1 convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamGroup, ParamId, ParamSet, Scalar, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

pub const ENCODER_CHANNELS: [usize; 4] = [32, 64, 128, 128];
pub const ENCODER_UP_CHANNELS: [usize; 2] = [64, 32];
pub const DECODER_DOWN_CHANNELS: [usize; 3] = [32, 64, 128];
pub const DECODER_UP_CHANNELS: [usize; 2] = [48, 24];
pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

/// One registered convolution: weight, bias, stride, and same-padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn build<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let std = T::from_f64((2.0 / (in_c * k * k) as f64).sqrt());
        let w = Tensor::randn(&[out_c, in_c, k, k], std, rng);
        ConvLayer {
            w: ps.register(&format!("{name}.weight"), w, ParamGroup::Net),
            b: ps.register(&format!("{name}.bias"), Tensor::zeros(&[out_c]), ParamGroup::Net),
            in_channels: in_c,
            out_channels: out_c,
            stride,
            pad: k / 2,
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, vars[self.w.0], Some(vars[self.b.0]), self.stride, self.pad)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Image to per-keypoint heatmaps. Four stride-2 blocks (with an additive
/// bilinear-downsampled shortcut wherever a block keeps its channel count)
/// then two upsample blocks and a 1x1 head, so a 64x64 input yields 16x16
/// heatmaps. Head logits are standardized per map with a learned
/// per-keypoint affine, which keeps softmax sharpness independent of the
/// upstream activation scale.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub image_size: usize,
    pub n_keypoints: usize,
    blocks: Vec<ConvLayer>,
    ups: Vec<ConvLayer>,
    head: ConvLayer,
    head_gain: ParamId,
    head_bias: ParamId,
}

impl Encoder {
    pub fn build<T: Scalar>(
        ps: &mut ParamSet<T>,
        image_size: usize,
        n_keypoints: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in ENCODER_CHANNELS.iter().enumerate() {
            blocks.push(ConvLayer::build(ps, rng, &format!("encoder.down{i}"), in_c, out_c, 3, 2));
            in_c = out_c;
        }
        let mut ups = Vec::new();
        for (i, &out_c) in ENCODER_UP_CHANNELS.iter().enumerate() {
            ups.push(ConvLayer::build(ps, rng, &format!("encoder.up{i}"), in_c, out_c, 3, 1));
            in_c = out_c;
        }
        let head = ConvLayer::build(ps, rng, "encoder.head", in_c, n_keypoints, 1, 1);
        let head_gain = ps.register(
            "encoder.head_gain",
            Tensor::full(&[n_keypoints], T::one()),
            ParamGroup::Net,
        );
        let head_bias =
            ps.register("encoder.head_bias", Tensor::zeros(&[n_keypoints]), ParamGroup::Net);
        Encoder { image_size, n_keypoints, blocks, ups, head, head_gain, head_bias }
    }

    /// Spatial side of the produced heatmaps for a given input side.
    pub fn heatmap_size(image_size: usize) -> usize {
        let mut s = image_size;
        for _ in 0..ENCODER_CHANNELS.len() {
            s = conv_out(s, 3, 2, 1);
        }
        s * (1 << ENCODER_UP_CHANNELS.len())
    }

    /// `[n, 3, s, s]` image to `[n, k, s', s']` heatmap logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut h = x;
        for blk in &self.blocks {
            let y = blk.apply(g, vars, h)?;
            let y = if blk.in_channels == blk.out_channels {
                let os = g.value(y).shape();
                let (oh, ow) = (os[2], os[3]);
                let shortcut = g.resize_bilinear(h, oh, ow)?;
                g.add(y, shortcut)?
            } else {
                y
            };
            h = g.leaky_relu(y, slope)?;
        }
        for up in &self.ups {
            let s = g.value(h).shape();
            let (oh, ow) = (s[2] * 2, s[3] * 2);
            let r = g.resize_bilinear(h, oh, ow)?;
            let y = up.apply(g, vars, r)?;
            h = g.leaky_relu(y, slope)?;
        }
        let logits = self.head.apply(g, vars, h)?;
        g.spatial_standardize(logits, vars[self.head_gain.0], vars[self.head_bias.0])
    }
}

/// Masked image (gated by alpha) plus edge map to reconstructed image.
/// Three-level hourglass with skip connections.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub image_size: usize,
    /// Expected channels of the concatenated input (3 + edge channels).
    pub in_channels: usize,
    downs: Vec<ConvLayer>,
    ups: Vec<ConvLayer>,
    out: ConvLayer,
}

impl Decoder {
    pub fn build<T: Scalar>(
        ps: &mut ParamSet<T>,
        image_size: usize,
        edge_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_channels = 3 + edge_channels;
        let mut downs = Vec::new();
        let mut in_c = in_channels;
        for (i, &out_c) in DECODER_DOWN_CHANNELS.iter().enumerate() {
            downs.push(ConvLayer::build(ps, rng, &format!("decoder.down{i}"), in_c, out_c, 3, 2));
            in_c = out_c;
        }
        // Each up block consumes the upsampled path concatenated with the
        // skip from the matching down level.
        let up0_in = DECODER_DOWN_CHANNELS[2] + DECODER_DOWN_CHANNELS[1];
        let up1_in = DECODER_UP_CHANNELS[0] + DECODER_DOWN_CHANNELS[0];
        let ups = vec![
            ConvLayer::build(ps, rng, "decoder.up0", up0_in, DECODER_UP_CHANNELS[0], 3, 1),
            ConvLayer::build(ps, rng, "decoder.up1", up1_in, DECODER_UP_CHANNELS[1], 3, 1),
        ];
        let out = ConvLayer::build(ps, rng, "decoder.out", DECODER_UP_CHANNELS[1], 3, 3, 1);
        Decoder { image_size, in_channels, downs, ups, out }
    }

    /// `masked` is `[n, 3, s, s]`, `edge` is `[n, c, s, s]`, `alpha` is a
    /// single-element gate multiplying the masked image.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        masked: Var,
        edge: Var,
        alpha: Var,
    ) -> Result<Var> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let mshape = g.value(masked).shape().to_vec();
        let eshape = g.value(edge).shape().to_vec();
        let got = mshape[1] + eshape[1];
        if got != self.in_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} input channels (3 + {} edge channels), got {} + {}",
                self.in_channels,
                self.in_channels - 3,
                mshape[1],
                eshape[1]
            )));
        }
        let gated = g.mul_scalar(masked, alpha)?;
        let mut h = g.concat_channels(gated, edge)?;
        let mut skips = Vec::new();
        for d in &self.downs {
            skips.push(h);
            h = d.apply(g, vars, h)?;
            h = g.leaky_relu(h, slope)?;
        }
        // skips = [input, d0 out, d1 out]; walk back up through the two
        // conv skips (the raw input is not concatenated back in).
        for (i, up) in self.ups.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            let ss = g.value(skip).shape().to_vec();
            let r = g.resize_bilinear(h, ss[2], ss[3])?;
            let cat = g.concat_channels(r, skip)?;
            h = up.apply(g, vars, cat)?;
            h = g.leaky_relu(h, slope)?;
        }
        let full = g.resize_bilinear(h, mshape[2], mshape[3])?;
        self.out.apply(g, vars, full)
    }
}

/// Frozen three-stage conv pyramid with He-initialized random weights; the
/// perceptual loss compares its activations. Never trained, but serialized
/// with checkpoints so a run is reproducible from the file alone.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub weights: Vec<Tensor<T>>,
    pub seed: u64,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut in_c = 3;
        for &out_c in FEATURE_CHANNELS.iter() {
            let std = T::from_f64((2.0 / (in_c * 9) as f64).sqrt());
            weights.push(Tensor::randn(&[out_c, in_c, 3, 3], std, &mut rng));
            in_c = out_c;
        }
        FeatureExtractor { weights, seed }
    }

    /// Stage activations for `[n, 3, s, s]`: `[n, 16, s/2, s/2]`,
    /// `[n, 32, s/4, s/4]`, `[n, 64, s/8, s/8]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut h = x;
        let mut levels = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let wv = g.input(w.clone());
            h = g.conv2d(h, wv, None, 2, 1)?;
            h = g.leaky_relu(h, slope)?;
            levels.push(h);
        }
        Ok(levels)
    }
}
