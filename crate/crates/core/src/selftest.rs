//! Built-in diagnostics behind the `self-test` CLI subcommand. Each check
//! compares an engine result against an oracle computed a different way:
//! a naive direct convolution, finite differences, or a closed-form metric
//! value.

use rand::Rng;

use crate::error::Result;
use crate::graph::{gradcheck, single_conv_graph};
use crate::metrics::{psnr, ssim};
use crate::models::{build_network, BodyKind, NetworkSpec};
use crate::ops::{conv2d, depth_to_space, space_to_depth, ConvParams, LossMode};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Direct convolution written without the engine's loop structure or
/// padding helper: every output element is an explicit quadruple sum over
/// a virtually zero-padded input. Used only as an oracle.
pub fn conv2d_reference(input: &Tensor<f32>, params: &ConvParams<f32>) -> Result<Tensor<f32>> {
    params.validate()?;
    let (oc, ic, k, _) = params.shape();
    let s = params.stride;
    let (n, h, w) = (input.shape.n, input.shape.h, input.shape.w);
    let out_h = h.div_ceil(s);
    let out_w = w.div_ceil(s);
    let pad_beg_y = ((out_h - 1) * s + k).saturating_sub(h) / 2;
    let pad_beg_x = ((out_w - 1) * s + k).saturating_sub(w) / 2;
    let mut out = Tensor::zeros(Shape::new(n, oc, out_h, out_w));
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = params.bias[o] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            for c in 0..ic {
                                let iy = (oy * s + ky) as isize - pad_beg_y as isize;
                                let ix = (ox * s + kx) as isize - pad_beg_x as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = params.weights.at(o, c, ky, kx) as f64;
                                acc += wv * input.at(b, c, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    *out.at_mut(b, o, oy, ox) = acc as f32;
                }
            }
        }
    }
    Ok(out)
}

fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor<f32> {
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("sized by shape")
}

fn random_conv(
    oc: usize,
    ic: usize,
    k: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> ConvParams<f32> {
    ConvParams {
        weights: random_tensor(Shape::new(oc, ic, k, k), rng),
        bias: (0..oc).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        stride,
    }
}

fn check(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match body() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn conv_against_reference() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(11).stream("selftest");
    let mut worst = 0.0f64;
    for case in 0..12 {
        let k = [1, 3, 5][case % 3];
        let stride = if case % 4 == 3 { 2 } else { 1 };
        let ic = rng.gen_range(1..4);
        let oc = rng.gen_range(1..4);
        let h = 2 * rng.gen_range(2..7);
        let w = 2 * rng.gen_range(2..7);
        let input = random_tensor(Shape::new(1, ic, h, w), &mut rng);
        let conv = random_conv(oc, ic, k, stride, &mut rng);
        let got = conv2d(&input, &conv)?;
        let want = conv2d_reference(&input, &conv)?;
        worst = worst.max(got.max_abs_diff(&want));
    }
    Ok((
        worst < 1e-5,
        format!("max |engine - direct| = {worst:.2e} over 12 cases"),
    ))
}

fn gradients_against_finite_differences() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(seed).stream("selftest");
        let conv = random_conv(2, 2, 3, 1, &mut rng).cast::<f64>();
        let graph = single_conv_graph(conv);
        let input = random_tensor(Shape::new(1, 2, 6, 6), &mut rng).cast();
        let target = random_tensor(graph.forward(&input)?.shape, &mut rng).cast();
        worst = worst.max(gradcheck(&graph, &input, &target, LossMode::L2, 1e-3)?);
    }
    for (body, name) in [(BodyKind::Residual, "res"), (BodyKind::Dense, "den")] {
        let spec = NetworkSpec::custom(body, [0, 1, 1], [3, 4, 4]);
        let mut init = SeededRng::new(3).stream("init");
        let graph = build_network(&spec, &mut init)?.cast::<f64>();
        let mut rng = SeededRng::new(4).stream(name);
        let input = random_tensor(Shape::new(1, 3, 8, 8), &mut rng).cast();
        let target = random_tensor(Shape::new(1, 3, 8, 8), &mut rng).cast();
        worst = worst.max(gradcheck(&graph, &input, &target, LossMode::L2, 1e-3)?);
    }
    Ok((
        worst < 1e-4,
        format!("max relative gradient error = {worst:.2e}"),
    ))
}

fn metric_closed_forms() -> Result<(bool, String)> {
    let shape = Shape::new(1, 3, 16, 16);
    let a = Tensor::filled(shape, 0.5);
    let mut b = a.clone();
    for v in b.data.iter_mut() {
        *v += 1.0 / 255.0;
    }
    let p = psnr(&a, &b)?;
    let p_want = 20.0 * 255.0f64.log10();
    let zero = Tensor::zeros(shape);
    let one = Tensor::filled(shape, 1.0);
    let c1 = 0.01f64 * 0.01;
    let s = ssim(&zero, &one)?;
    let s_want = c1 / (1.0 + c1);
    let ok = (p - p_want).abs() < 1e-3
        && (s - s_want).abs() < 1e-6
        && psnr(&a, &a)?.is_infinite()
        && (ssim(&a, &a)? - 1.0).abs() < 1e-9;
    Ok((
        ok,
        format!("psnr {p:.4} (want {p_want:.4}), ssim {s:.3e} (want {s_want:.3e})"),
    ))
}

fn shuffle_bijection() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(5).stream("selftest");
    let mut ok = true;
    for _ in 0..8 {
        let c = 4 * rng.gen_range(1..4);
        let t = random_tensor(
            Shape::new(1, c, rng.gen_range(1..5), rng.gen_range(1..5)),
            &mut rng,
        );
        let back = space_to_depth(&depth_to_space(&t, 2)?, 2)?;
        ok &= back.shape == t.shape && back.data == t.data;
    }
    Ok((
        ok,
        "space_to_depth(depth_to_space(x)) == x over random shapes".into(),
    ))
}

pub fn run_self_test() -> Vec<CheckResult> {
    vec![
        check("conv-vs-direct-oracle", conv_against_reference),
        check(
            "gradcheck-finite-differences",
            gradients_against_finite_differences,
        ),
        check("metric-closed-forms", metric_closed_forms),
        check("depth-to-space-bijection", shuffle_bijection),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_self_test() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn reference_conv_matches_hand_value() {
        // 1x1 input, 3x3 all-ones kernel: only the center tap lands inside
        let input = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        let conv = ConvParams {
            weights: Tensor::filled(Shape::new(1, 1, 3, 3), 1.0),
            bias: vec![0.5],
            stride: 1,
        };
        let out = conv2d_reference(&input, &conv).unwrap();
        assert_eq!(out.data, vec![2.5]);
    }
}
