//! Differentiable ops recorded on a [`Graph`].
//!
//! Convolution lowers to im2col plus the blocked GEMM kernels; the column
//! buffer is rebuilt in the backward pass instead of being captured, trading a
//! little compute for a much smaller live set.

use crate::error::{Error, Result};
use crate::numcore::{gemm, gemm_abt, gemm_atb, Graph, Scalar, Tensor, Var};

/// Numerically stable softplus: `ln(1 + e^x)`, linear above 20, `e^x` below
/// -20.
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    let hi = T::from_f64(20.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// Derivative of softplus.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`softplus_scalar`] on positive inputs: `ln(e^y - 1)`.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse needs a positive value, got {y}");
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Variance floor of [`Graph::spatial_standardize`], keeping constant planes
/// finite.
pub const STANDARDIZE_EPS: f64 = 1e-5;

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn count(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image (`c`*`h`*`w` slice) into convolution columns:
/// `cols[(ci*k + ki)*k + kj][oy*ow + ox] = x[ci][oy*s + ki - pad][ox*s + kj - pad]`
/// with zeros outside the image.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let count = d.count();
    for ci in 0..d.c {
        let xc = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &mut cols[((ci * d.k + ki) * d.k + kj) * count..][..count];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let (lo, hi) = valid_ox(d, kj);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if d.stride == 1 {
                        let off = lo + kj - d.pad;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * d.stride + kj - d.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Fold convolution columns back into an image with accumulation; adjoint of
/// [`im2col`].
fn col2im_add<T: Scalar>(cols: &[T], d: &ConvDims, x: &mut [T]) {
    let count = d.count();
    for ci in 0..d.c {
        let xc = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &cols[((ci * d.k + ki) * d.k + kj) * count..][..count];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    let dstrow = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let (lo, hi) = valid_ox(d, kj);
                    for ox in lo..hi {
                        dstrow[ox * d.stride + kj - d.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Output-x range whose source column `ox*stride + kj - pad` lies inside the
/// image.
fn valid_ox(d: &ConvDims, kj: usize) -> (usize, usize) {
    let lo = if d.pad > kj { (d.pad - kj).div_ceil(d.stride) } else { 0 };
    let last = d.w + d.pad;
    if last <= kj {
        return (0, 0);
    }
    let hi = ((last - 1 - kj) / d.stride + 1).min(d.ow);
    (lo.min(hi), hi)
}

impl<T: Scalar> Graph<T> {
    /// 2D convolution with square odd kernels, zero padding, and optional
    /// per-output-channel bias. Input `[n, c, h, w]`, kernel `[o, c, k, k]`,
    /// output `[n, o, oh, ow]` with `oh = (h + 2*pad - k)/stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("conv2d: input must be 4D, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d: kernel must be 4D, got {ws:?}")));
        }
        let (n, c, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wi, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::Shape(format!("conv2d: kernel size {kh} must be odd")));
        }
        if wi != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels but kernel expects {wi}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be at least 1".into()));
        }
        if h + 2 * pad < kh || w_dim + 2 * pad < kh {
            return Err(Error::Shape(format!(
                "conv2d: padded input {}x{} is smaller than kernel {kh}",
                h + 2 * pad,
                w_dim + 2 * pad
            )));
        }
        let bv = bias.map(|b| self.value(b).clone());
        if let Some(b) = &bv {
            if b.shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?} must be [{o}]",
                    b.shape()
                )));
            }
        }
        let d = ConvDims {
            c,
            h,
            w: w_dim,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w_dim + 2 * pad - kh) / stride + 1,
        };
        let (rows, count) = (d.rows(), d.count());

        let mut out = vec![T::zero(); n * o * count];
        let mut cols = vec![T::zero(); rows * count];
        for img in 0..n {
            im2col(&xv.data()[img * c * h * w_dim..], &d, &mut cols);
            let out_n = &mut out[img * o * count..(img + 1) * o * count];
            if let Some(b) = &bv {
                for (oc, chunk) in out_n.chunks_exact_mut(count).enumerate() {
                    chunk.fill(b.data()[oc]);
                }
            }
            gemm(o, rows, count, wv.data(), &cols, out_n);
        }
        let value = Tensor::new(&[n, o, d.oh, d.ow], out)?;

        let x_req = self.requires_grad(x);
        let w_req = self.requires_grad(w);
        let b_req = bias.map(|b| self.requires_grad(b)).unwrap_or(false);
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let g = gout.data();
            if b_req {
                let mut gb = vec![T::zero(); o];
                for img in 0..n {
                    for (oc, gbv) in gb.iter_mut().enumerate() {
                        let chunk = &g[(img * o + oc) * count..(img * o + oc + 1) * count];
                        for &v in chunk {
                            *gbv += v;
                        }
                    }
                }
                sink.add(bias.expect("bias var present"), Tensor::new(&[o], gb).expect("shape"));
            }
            let mut cols = vec![T::zero(); rows * count];
            if w_req {
                let mut gw = vec![T::zero(); o * rows];
                for img in 0..n {
                    im2col(&xv.data()[img * c * h * w_dim..], &d, &mut cols);
                    gemm_abt(o, count, rows, &g[img * o * count..(img + 1) * o * count], &cols, &mut gw);
                }
                sink.add(w, Tensor::new(&[o, c, d.k, d.k], gw).expect("shape"));
            }
            if x_req {
                let mut gx = vec![T::zero(); n * c * h * w_dim];
                for img in 0..n {
                    cols.fill(T::zero());
                    gemm_atb(
                        rows,
                        o,
                        count,
                        wv.data(),
                        &g[img * o * count..(img + 1) * o * count],
                        &mut cols,
                    );
                    col2im_add(&cols, &d, &mut gx[img * c * h * w_dim..(img + 1) * c * h * w_dim]);
                }
                sink.add(x, Tensor::new(&[n, c, h, w_dim], gx).expect("shape"));
            }
        };
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push_op("conv2d", value, &parents, backward)
    }

    /// Elementwise `max(x, slope*x)`. The derivative at exactly 0 is 1.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let xv = self.value(x).clone();
        let value = xv.map(|v| if v >= T::zero() { v } else { v * slope });
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let mut gx = gout.clone();
            for (g, &v) in gx.data_mut().iter_mut().zip(xv.data().iter()) {
                if v < T::zero() {
                    *g *= slope;
                }
            }
            sink.add(x, gx);
        };
        self.push_op("leaky_relu", value, &[x], backward)
    }

    /// Elementwise stable softplus; the output is strictly positive.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let value = xv.map(softplus_scalar);
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let mut gx = gout.clone();
            for (g, &v) in gx.data_mut().iter_mut().zip(xv.data().iter()) {
                *g *= sigmoid_scalar(v);
            }
            sink.add(x, gx);
        };
        self.push_op("softplus", value, &[x], backward)
    }

    /// Bilinear resize of `[n, c, h, w]` to `[n, c, oh, ow]` with the
    /// half-pixel (align_corners = false) convention; source coordinates are
    /// clamped to the image.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let xs = xv.shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("resize_bilinear: input must be 4D, got {xs:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!(
                "resize_bilinear: output size {oh}x{ow} must be positive"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ytab = resize_axis_table::<T>(h, oh);
        let xtab = resize_axis_table::<T>(w, ow);

        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
                let r0 = &src[y0 * w..y0 * w + w];
                let r1 = &src[y1 * w..y1 * w + w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                let gy = T::one() - fy;
                for (d, &(x0, x1, fx)) in drow.iter_mut().zip(xtab.iter()) {
                    let gx = T::one() - fx;
                    *d = gy * (gx * r0[x0] + fx * r0[x1]) + fy * (gx * r1[x0] + fx * r1[x1]);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                let g = &gout.data()[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
                    let gy = T::one() - fy;
                    for (ox, &(x0, x1, fx)) in xtab.iter().enumerate() {
                        let gv = g[oy * ow + ox];
                        let gxw = T::one() - fx;
                        dst[y0 * w + x0] += gv * gy * gxw;
                        dst[y0 * w + x1] += gv * gy * fx;
                        dst[y1 * w + x0] += gv * fy * gxw;
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            sink.add(x, Tensor::new(&[n, c, h, w], gx).expect("shape"));
        };
        self.push_op("resize_bilinear", value, &[x], backward)
    }

    /// Softmax over the trailing two (spatial) dimensions, independently per
    /// leading index. Max-subtracted for stability.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let xs = xv.shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!(
                "spatial_softmax: input must have at least 2 dims, got {xs:?}"
            )));
        }
        let spatial = xs[xs.len() - 2] * xs[xs.len() - 1];
        let slices = xv.len() / spatial;
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..slices {
            let src = &xv.data()[s * spatial..(s + 1) * spatial];
            let dst = &mut out[s * spatial..(s + 1) * spatial];
            let mut m = src[0];
            for &v in src {
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = (v - m).exp();
                sum += *d;
            }
            let inv = T::one() / sum;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let value = Tensor::new(&xs, out)?;
        let pv = value.clone();
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let mut gx = vec![T::zero(); pv.len()];
            for s in 0..slices {
                let p = &pv.data()[s * spatial..(s + 1) * spatial];
                let g = &gout.data()[s * spatial..(s + 1) * spatial];
                let mut dot = T::zero();
                for (&pi, &gi) in p.iter().zip(g.iter()) {
                    dot += pi * gi;
                }
                for ((o, &pi), &gi) in
                    gx[s * spatial..(s + 1) * spatial].iter_mut().zip(p.iter()).zip(g.iter())
                {
                    *o = pi * (gi - dot);
                }
            }
            sink.add(x, Tensor::new(&pv.shape().to_vec(), gx).expect("shape"));
        };
        self.push_op("spatial_softmax", value, &[x], backward)
    }

    /// Standardizes each `[h, w]` plane of `x` (`[n, k, h, w]`) to zero mean
    /// and unit variance over its own spatial extent, then applies a learned
    /// per-channel affine: `gain[k] * y + bias[k]`. Statistics never cross
    /// samples or channels, so the result is batch-size independent. A
    /// constant plane maps to `bias[k]`.
    pub fn spatial_standardize(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let xs = xv.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!(
                "spatial_standardize: input must be [n, k, h, w], got {xs:?}"
            )));
        }
        let (n, k, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if gv.shape() != [k] || bv.shape() != [k] {
            return Err(Error::Shape(format!(
                "spatial_standardize: gain and bias must be [{k}], got {:?} and {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let m = h * w;
        let inv_m = T::one() / T::from_usize(m);
        let eps = T::from_f64(STANDARDIZE_EPS);
        let mut out = vec![T::zero(); xv.len()];
        let mut norm = vec![T::zero(); xv.len()];
        let mut inv_sd = vec![T::zero(); n * k];
        for s in 0..n * k {
            let src = &xv.data()[s * m..(s + 1) * m];
            let mut mean = T::zero();
            for &v in src {
                mean += v;
            }
            mean *= inv_m;
            let mut var = T::zero();
            for &v in src {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_m;
            let isd = T::one() / (var + eps).sqrt();
            inv_sd[s] = isd;
            let gk = gv.data()[s % k];
            let bk = bv.data()[s % k];
            for (i, &v) in src.iter().enumerate() {
                let y = (v - mean) * isd;
                norm[s * m + i] = y;
                out[s * m + i] = gk * y + bk;
            }
        }
        let value = Tensor::new(&xs, out)?;
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let mut gx = vec![T::zero(); n * k * m];
            let mut gg = vec![T::zero(); k];
            let mut gb = vec![T::zero(); k];
            for s in 0..n * k {
                let go = &gout.data()[s * m..(s + 1) * m];
                let y = &norm[s * m..(s + 1) * m];
                let gk = gv.data()[s % k];
                let mut sum_g = T::zero();
                let mut sum_gy = T::zero();
                for i in 0..m {
                    sum_g += go[i];
                    sum_gy += go[i] * y[i];
                }
                gb[s % k] += sum_g;
                gg[s % k] += sum_gy;
                // For y = (x - mean) / sd the Jacobian removes the plane mean
                // and the component along y itself.
                let isd = inv_sd[s];
                let mean_up = gk * sum_g * inv_m;
                let mean_up_y = gk * sum_gy * inv_m;
                let dst = &mut gx[s * m..(s + 1) * m];
                for i in 0..m {
                    dst[i] = isd * (gk * go[i] - mean_up - y[i] * mean_up_y);
                }
            }
            sink.add(x, Tensor::new(&[n, k, h, w], gx).expect("shape"));
            sink.add(gain, Tensor::new(&[k], gg).expect("shape"));
            sink.add(bias, Tensor::new(&[k], gb).expect("shape"));
        };
        self.push_op("spatial_standardize", value, &[x, gain, bias], backward)
    }

    /// Concatenate along the channel axis of 3D `[c, h, w]` or 4D
    /// `[n, c, h, w]` tensors; all other dimensions must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (asp, bsp) = (av.shape().to_vec(), bv.shape().to_vec());
        if asp.len() != bsp.len() || (asp.len() != 3 && asp.len() != 4) {
            return Err(Error::Shape(format!(
                "concat_channels: ranks must both be 3 or 4, got {asp:?} and {bsp:?}"
            )));
        }
        let caxis = asp.len() - 3;
        for (i, (&da, &db)) in asp.iter().zip(bsp.iter()).enumerate() {
            if i != caxis && da != db {
                return Err(Error::Shape(format!(
                    "concat_channels: dimension {i} differs ({da} vs {db})"
                )));
            }
        }
        let lead: usize = asp[..caxis].iter().product();
        let hw: usize = asp[caxis + 1..].iter().product();
        let (ca, cb) = (asp[caxis], bsp[caxis]);
        let mut shape = asp.clone();
        shape[caxis] = ca + cb;
        let (ablk, bblk) = (ca * hw, cb * hw);
        let mut out = vec![T::zero(); lead * (ablk + bblk)];
        for l in 0..lead {
            let dst = &mut out[l * (ablk + bblk)..(l + 1) * (ablk + bblk)];
            dst[..ablk].copy_from_slice(&av.data()[l * ablk..(l + 1) * ablk]);
            dst[ablk..].copy_from_slice(&bv.data()[l * bblk..(l + 1) * bblk]);
        }
        let value = Tensor::new(&shape, out)?;
        let (asp2, bsp2) = (asp.clone(), bsp.clone());
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            if sink.wants(a) {
                let mut ga = vec![T::zero(); lead * ablk];
                for l in 0..lead {
                    ga[l * ablk..(l + 1) * ablk]
                        .copy_from_slice(&gout.data()[l * (ablk + bblk)..l * (ablk + bblk) + ablk]);
                }
                sink.add(a, Tensor::new(&asp2, ga).expect("shape"));
            }
            if sink.wants(b) {
                let mut gb = vec![T::zero(); lead * bblk];
                for l in 0..lead {
                    gb[l * bblk..(l + 1) * bblk].copy_from_slice(
                        &gout.data()[l * (ablk + bblk) + ablk..(l + 1) * (ablk + bblk)],
                    );
                }
                sink.add(b, Tensor::new(&bsp2, gb).expect("shape"));
            }
        };
        self.push_op("concat_channels", value, &[a, b], backward)
    }

    /// Elementwise `a + beta*b` over identical shapes.
    pub fn add_scaled(&mut self, a: Var, b: Var, beta: T) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add_scaled: shapes differ ({:?} vs {:?})",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data().iter()) {
            *o += beta * v;
        }
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            if sink.wants(a) {
                sink.add(a, gout.clone());
            }
            if sink.wants(b) {
                let mut gb = gout.clone();
                gb.scale_in_place(beta);
                sink.add(b, gb);
            }
        };
        self.push_op("add_scaled", out, &[a, b], backward)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, T::one())
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let mut g = gout.clone();
            g.scale_in_place(c);
            sink.add(x, g);
        };
        self.push_op("scale", value, &[x], backward)
    }

    /// Multiply every element of `x` by a single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let sv = self.value(s).clone();
        if sv.len() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar: scale must hold one element, got shape {:?}",
                sv.shape()
            )));
        }
        let sc = sv.item();
        let value = xv.map(|v| v * sc);
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            if sink.wants(x) {
                let mut gx = gout.clone();
                gx.scale_in_place(sc);
                sink.add(x, gx);
            }
            if sink.wants(s) {
                let mut acc = [T::zero(); 8];
                let mut gi = gout.data().chunks_exact(8);
                let mut xi = xv.data().chunks_exact(8);
                for (gc, xc) in gi.by_ref().zip(xi.by_ref()) {
                    for l in 0..8 {
                        acc[l] += gc[l] * xc[l];
                    }
                }
                let mut gs = T::zero();
                for &v in &acc {
                    gs += v;
                }
                for (&gv, &xv) in gi.remainder().iter().zip(xi.remainder().iter()) {
                    gs += gv * xv;
                }
                sink.add(s, Tensor::scalar(gs));
            }
        };
        self.push_op("mul_scalar", value, &[x, s], backward)
    }

    /// Mean squared error over all elements; returns a single-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mse: shapes differ ({:?} vs {:?})",
                av.shape(),
                bv.shape()
            )));
        }
        let len = av.len();
        let mut acc = [T::zero(); 8];
        let mut ai = av.data().chunks_exact(8);
        let mut bi = bv.data().chunks_exact(8);
        for (ac, bc) in ai.by_ref().zip(bi.by_ref()) {
            for l in 0..8 {
                let d = ac[l] - bc[l];
                acc[l] += d * d;
            }
        }
        let mut sum = T::zero();
        for &v in &acc {
            sum += v;
        }
        for (&x, &y) in ai.remainder().iter().zip(bi.remainder().iter()) {
            let d = x - y;
            sum += d * d;
        }
        let value = Tensor::scalar(sum / T::from_usize(len));
        let backward = move |gout: &Tensor<T>, sink: &mut crate::numcore::GradSink<'_, T>| {
            let scale = gout.item() * T::from_f64(2.0) / T::from_usize(len);
            if sink.wants(a) {
                let mut ga = vec![T::zero(); len];
                for ((o, &x), &y) in ga.iter_mut().zip(av.data().iter()).zip(bv.data().iter()) {
                    *o = scale * (x - y);
                }
                sink.add(a, Tensor::new(&av.shape().to_vec(), ga).expect("shape"));
            }
            if sink.wants(b) {
                let mut gb = vec![T::zero(); len];
                for ((o, &x), &y) in gb.iter_mut().zip(av.data().iter()).zip(bv.data().iter()) {
                    *o = scale * (y - x);
                }
                sink.add(b, Tensor::new(&bv.shape().to_vec(), gb).expect("shape"));
            }
        };
        self.push_op("mse", value, &[a, b], backward)
    }
}

/// Per-output-index sampling table for one axis of a bilinear resize:
/// `(low index, high index, high weight)`.
fn resize_axis_table<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            if i0 >= src - 1 {
                (src - 1, src - 1, T::zero())
            } else {
                (i0, i0 + 1, T::from_f64(s - i0 as f64))
            }
        })
        .collect()
}
