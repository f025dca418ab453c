//! Forward operators and their hand-written backward passes.
//!
//! All convolutions use zero "same" padding: stride-1 output keeps the input
//! spatial size, stride-2 halves it (even sizes only). Per output element the
//! accumulation order is fixed (kernel row-major, then input channel) so a
//! run is bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Convolution weights plus bias. Weights are stored as `(out_c, in_c, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvParams<S: Scalar = f32> {
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
    pub stride: usize,
}

impl<S: Scalar> ConvParams<S> {
    pub fn out_channels(&self) -> usize {
        self.shape().0
    }

    pub fn in_channels(&self) -> usize {
        self.shape().1
    }

    pub fn kernel(&self) -> usize {
        self.shape().2
    }

    /// `(out_c, in_c, k, k)` reading of the weight tensor.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.weights.shape;
        (s.n, s.c, s.h, s.w)
    }

    pub fn validate(&self) -> Result<()> {
        let (oc, _ic, kh, kw) = self.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidSpec(format!(
                "kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidSpec(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if oc == 0 || self.bias.len() != oc {
            return Err(Error::InvalidSpec(format!(
                "bias length {} does not match {} output channels",
                self.bias.len(),
                oc
            )));
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ConvParams<T> {
        ConvParams {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            stride: self.stride,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.data.len() + self.bias.len()
    }
}

fn conv_out_size(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

/// Leading pad for "same" alignment (extra pad, if any, goes to the trailing side).
fn pad_begin(size: usize, k: usize, stride: usize) -> usize {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(size);
    total / 2
}

fn check_conv_input<S: Scalar>(input: &Tensor<S>, params: &ConvParams<S>) -> Result<()> {
    params.validate()?;
    if input.shape.c != params.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: params.in_channels(),
            got: input.shape.c,
        });
    }
    if params.stride == 2 && (!input.shape.h.is_multiple_of(2) || !input.shape.w.is_multiple_of(2)) {
        return Err(Error::OddSpatialSize {
            h: input.shape.h,
            w: input.shape.w,
        });
    }
    Ok(())
}

pub fn conv2d<S: Scalar>(input: &Tensor<S>, params: &ConvParams<S>) -> Result<Tensor<S>> {
    check_conv_input(input, params)?;
    let Shape { n, c: in_c, h, w } = input.shape;
    let (out_c, _, k, _) = params.shape();
    let s = params.stride;
    let (oh, ow) = conv_out_size(h, w, s);
    let pad_y = pad_begin(h, k, s) as isize;
    let pad_x = pad_begin(w, k, s) as isize;

    let mut out = Tensor::zeros(Shape::new(n, out_c, oh, ow));
    for ni in 0..n {
        for oc in 0..out_c {
            let plane_start = out.idx(ni, oc, 0, 0);
            let plane = &mut out.data[plane_start..plane_start + oh * ow];
            plane.fill(params.bias[oc]);
            for ky in 0..k {
                for kx in 0..k {
                    for ic in 0..in_c {
                        let wv = params.weights.at(oc, ic, ky, kx);
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + ky as isize - pad_y;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = input.row(ni, ic, iy as usize);
                            let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                            let off = kx as isize - pad_x;
                            if s == 1 {
                                // ix = ox + off must land in [0, w)
                                let lo = (-off).max(0) as usize;
                                let hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                                for ox in lo..hi {
                                    out_row[ox] += wv * in_row[(ox as isize + off) as usize];
                                }
                            } else {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    let ix = (ox * s) as isize + off;
                                    if ix >= 0 && ix < w as isize {
                                        *o += wv * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution w.r.t. input, weights, and bias.
pub struct ConvGrads<S: Scalar> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    check_conv_input(input, params)?;
    let Shape { n, c: in_c, h, w } = input.shape;
    let (out_c, _, k, _) = params.shape();
    let s = params.stride;
    let (oh, ow) = conv_out_size(h, w, s);
    let expected = Shape::new(n, out_c, oh, ow);
    if grad_out.shape != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.to_string(),
            got: grad_out.shape.to_string(),
        });
    }
    let pad_y = pad_begin(h, k, s) as isize;
    let pad_x = pad_begin(w, k, s) as isize;

    let mut g_in = Tensor::zeros(input.shape);
    let mut g_w = Tensor::zeros(params.weights.shape);
    let mut g_b = vec![S::ZERO; out_c];

    for ni in 0..n {
        for oc in 0..out_c {
            for oy in 0..oh {
                let g_row = grad_out.row(ni, oc, oy);
                for g in g_row {
                    g_b[oc] += *g;
                }
            }
            for ky in 0..k {
                for kx in 0..k {
                    for ic in 0..in_c {
                        let wv = params.weights.at(oc, ic, ky, kx);
                        let mut gw_acc = S::ZERO;
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + ky as isize - pad_y;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let g_row = grad_out.row(ni, oc, oy);
                            let in_start = input.idx(ni, ic, iy, 0);
                            let gin_start = g_in.idx(ni, ic, iy, 0);
                            let off = kx as isize - pad_x;
                            for ox in 0..ow {
                                let ix = (ox * s) as isize + off;
                                if ix >= 0 && ix < w as isize {
                                    let ix = ix as usize;
                                    let g = g_row[ox];
                                    gw_acc += g * input.data[in_start + ix];
                                    g_in.data[gin_start + ix] += wv * g;
                                }
                            }
                        }
                        *g_w.at_mut(oc, ic, ky, kx) += gw_acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let data = input
        .data
        .iter()
        .map(|&v| if v > S::ZERO { v } else { S::ZERO })
        .collect();
    Tensor {
        shape: input.shape,
        data,
    }
}

/// Gradient of ReLU; the subgradient at exactly 0 is 0.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > S::ZERO { g } else { S::ZERO })
        .collect();
    Tensor {
        shape: input.shape,
        data,
    }
}

pub fn add<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidSpec("add needs at least one input".into()))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        first.same_shape(t)?;
        for (o, v) in out.data.iter_mut().zip(&t.data) {
            *o += *v;
        }
    }
    Ok(out)
}

pub fn concat_channels<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidSpec("concat needs at least one input".into()))?;
    let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
    let mut total_c = 0;
    for t in inputs {
        if t.shape.n != n || t.shape.h != h || t.shape.w != w {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x*x{h}x{w}"),
                got: t.shape.to_string(),
            });
        }
        total_c += t.shape.c;
    }
    let mut out = Tensor::zeros(Shape::new(n, total_c, h, w));
    for ni in 0..n {
        let mut c_off = 0;
        for t in inputs {
            for ci in 0..t.shape.c {
                for y in 0..h {
                    let src = t.idx(ni, ci, y, 0);
                    let dst = out.idx(ni, c_off + ci, y, 0);
                    out.data[dst..dst + w].copy_from_slice(&t.data[src..src + w]);
                }
            }
            c_off += t.shape.c;
        }
    }
    Ok(out)
}

/// Extracts channels `[c_from, c_to)`; the gradient split of concat.
pub fn slice_channels<S: Scalar>(input: &Tensor<S>, c_from: usize, c_to: usize) -> Tensor<S> {
    let Shape { n, h, w, .. } = input.shape;
    let mut out = Tensor::zeros(Shape::new(n, c_to - c_from, h, w));
    for ni in 0..n {
        for ci in c_from..c_to {
            for y in 0..h {
                let src = input.idx(ni, ci, y, 0);
                let dst = out.idx(ni, ci - c_from, y, 0);
                out.data[dst..dst + w].copy_from_slice(&input.data[src..src + w]);
            }
        }
    }
    out
}

/// Rearranges channel blocks into 2x2 spatial cells. Channel block
/// `(f²q .. f²q+f²-1)` fills output channel `q`'s cell row-major
/// (top-left, top-right, bottom-left, bottom-right for factor 2).
pub fn depth_to_space<S: Scalar>(input: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let Shape { n, c, h, w } = input.shape;
    let f2 = factor * factor;
    if c % f2 != 0 {
        return Err(Error::ChannelsNotDivisible {
            channels: c,
            factor_sq: f2,
        });
    }
    let out_c = c / f2;
    let mut out = Tensor::zeros(Shape::new(n, out_c, h * factor, w * factor));
    for ni in 0..n {
        for q in 0..out_c {
            for dy in 0..factor {
                for dx in 0..factor {
                    let ci = f2 * q + dy * factor + dx;
                    for y in 0..h {
                        for x in 0..w {
                            *out.at_mut(ni, q, y * factor + dy, x * factor + dx) =
                                input.at(ni, ci, y, x);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`depth_to_space`].
pub fn space_to_depth<S: Scalar>(input: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let Shape { n, c, h, w } = input.shape;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial size divisible by {factor}"),
            got: input.shape.to_string(),
        });
    }
    let f2 = factor * factor;
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(Shape::new(n, c * f2, oh, ow));
    for ni in 0..n {
        for q in 0..c {
            for dy in 0..factor {
                for dx in 0..factor {
                    let ci = f2 * q + dy * factor + dx;
                    for y in 0..oh {
                        for x in 0..ow {
                            *out.at_mut(ni, ci, y, x) =
                                input.at(ni, q, y * factor + dy, x * factor + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    L1,
    L2,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossMode::L1),
            "l2" => Ok(LossMode::L2),
            other => Err(Error::Config(format!(
                "unknown loss '{other}', expected l1 or l2"
            ))),
        }
    }
}

/// Mean L1/L2 loss and its gradient w.r.t. `pred`. `sign(0)` is taken as 0.
pub fn compute_loss<S: Scalar>(
    mode: LossMode,
    pred: &Tensor<S>,
    target: &Tensor<S>,
) -> Result<(S, Tensor<S>)> {
    pred.same_shape(target)?;
    let count = S::from_f64(pred.data.len() as f64);
    let inv = S::ONE / count;
    let mut loss = S::ZERO;
    let mut grad = Tensor::zeros(pred.shape);
    match mode {
        LossMode::L1 => {
            for (i, (&p, &t)) in pred.data.iter().zip(&target.data).enumerate() {
                let d = p - t;
                loss += d.abs();
                grad.data[i] = if d > S::ZERO {
                    inv
                } else if d < S::ZERO {
                    -inv
                } else {
                    S::ZERO
                };
            }
        }
        LossMode::L2 => {
            for (i, (&p, &t)) in pred.data.iter().zip(&target.data).enumerate() {
                let d = p - t;
                loss += d * d;
                grad.data[i] = (d + d) * inv;
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Reflective padding (mirror without repeating the border sample).
/// Pads larger than the image bounce back and forth.
pub fn pad_reflect<S: Scalar>(
    input: &Tensor<S>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Tensor<S> {
    let Shape { n, c, h, w } = input.shape;
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let iy = reflect_index(oy as isize - top as isize, h);
                for ox in 0..ow {
                    let ix = reflect_index(ox as isize - left as isize, w);
                    *out.at_mut(ni, ci, oy, ox) = input.at(ni, ci, iy, ix);
                }
            }
        }
    }
    out
}

fn reflect_index(mut i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    i = i.rem_euclid(period);
    if i >= len {
        i = period - i;
    }
    i as usize
}

/// Crops the spatial window `[y0, y0+h) x [x0, x0+w)`.
pub fn crop<S: Scalar>(input: &Tensor<S>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<S> {
    let Shape { n, c, .. } = input.shape;
    let mut out = Tensor::zeros(Shape::new(n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = input.idx(ni, ci, y0 + y, x0);
                let dst = out.idx(ni, ci, y, 0);
                out.data[dst..dst + w].copy_from_slice(&input.data[src..src + w]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::filled(Shape::new(n, c, h, w), 1.0)
    }

    fn conv3x3(out_c: usize, in_c: usize, stride: usize, wv: f32) -> ConvParams<f32> {
        ConvParams {
            weights: Tensor::filled(Shape::new(out_c, in_c, 3, 3), wv),
            bias: vec![0.0; out_c],
            stride,
        }
    }

    #[test]
    fn conv_all_ones_3x3() {
        // Hand-expanded sums: center sees all 9 taps, corners 4, edges 6.
        let out = conv2d(&ones(1, 1, 3, 3), &conv3x3(1, 1, 1, 1.0)).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(0, 0, y, x), 4.0);
        }
        for (y, x) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(out.at(0, 0, y, x), 6.0);
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut p = conv3x3(1, 1, 1, 0.0);
        *p.weights.at_mut(0, 0, 1, 1) = 1.0;
        let x = Tensor::from_vec(
            Shape::new(1, 1, 4, 4),
            (0..16).map(|i| i as f32 * 0.37 - 2.0).collect(),
        )
        .unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn conv_stride2_shape() {
        let p = conv3x3(8, 3, 2, 0.1);
        let out = conv2d(&ones(1, 3, 4, 4), &p).unwrap();
        assert_eq!(out.shape, Shape::new(1, 8, 2, 2));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_odd_stride2() {
        let p = conv3x3(4, 3, 1, 0.1);
        assert!(conv2d(&ones(1, 2, 4, 4), &p).is_err());
        let p2 = conv3x3(4, 3, 2, 0.1);
        assert!(conv2d(&ones(1, 3, 5, 4), &p2).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data, vec![0.0, 0.0, 2.0]);
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, 1.0, 3.0]).unwrap();
        assert_eq!(relu(&y).data, y.data);
    }

    #[test]
    fn add_examples() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, 4.0]).unwrap();
        let z = Tensor::zeros(a.shape);
        assert_eq!(add(&[&a, &z]).unwrap().data, a.data);
        assert_eq!(add(&[&a, &b]).unwrap().data, vec![4.0, 6.0]);
        let bad = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(add(&[&a, &bad]).is_err());
    }

    #[test]
    fn concat_shapes_and_slice_roundtrip() {
        let a = Tensor::filled(Shape::new(1, 2, 3, 3), 1.5);
        let b = Tensor::filled(Shape::new(1, 3, 3, 3), -0.5);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape, Shape::new(1, 5, 3, 3));
        assert_eq!(slice_channels(&cat, 0, 2).data, a.data);
        assert_eq!(slice_channels(&cat, 2, 5).data, b.data);
        // single input is identity
        assert_eq!(concat_channels(&[&a]).unwrap().data, a.data);
        let bad = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn depth_to_space_convention() {
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = depth_to_space(&x, 2).unwrap();
        assert_eq!(y.shape, Shape::new(1, 1, 2, 2));
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0]); // [[a,b],[c,d]]
        let back = space_to_depth(&y, 2).unwrap();
        assert_eq!(back.data, x.data);
        let z = depth_to_space(&ones(1, 8, 2, 2), 2).unwrap();
        assert_eq!(z.shape, Shape::new(1, 2, 4, 4));
        assert!(depth_to_space(&ones(1, 3, 2, 2), 2).is_err());
    }

    #[test]
    fn loss_examples() {
        let p = Tensor::filled(Shape::new(1, 1, 2, 2), 0.5);
        let t = Tensor::zeros(p.shape);
        let (l2, _) = compute_loss(LossMode::L2, &p, &t).unwrap();
        assert!((l2 - 0.25).abs() < 1e-7);
        let (l0, g0) = compute_loss(LossMode::L1, &p, &p).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.data.iter().all(|&v| v == 0.0));
        // pred - target uniformly -0.5: L1 = 0.5, grad = -1/N
        let neg = Tensor::filled(p.shape, -0.5);
        let (l1, g1) = compute_loss(LossMode::L1, &neg, &t).unwrap();
        assert!((l1 - 0.5).abs() < 1e-7);
        assert!(g1.data.iter().all(|&v| v == -0.25));
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad_reflect(&x, 0, 0, 2, 2);
        assert_eq!(p.data, vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }
}
