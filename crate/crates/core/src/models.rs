//! Declarative builders for the four network presets plus custom variants.
//!
//! A network processes the input in up to three spaces: DS0 (full size),
//! DS2 (one stride-2 downscale) and DS4 (two stride-2 downscales). The DS2
//! and DS4 branches both start from the input image, run a residual or
//! dense body, and come back to full size through sub-pixel upscaling
//! (3x3 conv to 4c channels + depth-to-space). The three branch outputs
//! meet in a single concatenation followed by a final 3x3 conv to RGB.
//! There is no global input addition.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::ConvParams;
use crate::rng::{normal, Stream};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyKind {
    /// conv -> ReLU -> conv plus identity addition, no normalization.
    Residual,
    /// conv -> ReLU -> conv whose output is concatenated with the block input.
    Dense,
}

/// Architecture description. `blocks`/`filters` are per space (DS0, DS2, DS4);
/// a zero filter count means the branch is absent (single-scale baselines).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub body: BodyKind,
    pub blocks: [usize; 3],
    pub filters: [usize; 3],
    /// Stride-2 conv filters: (DS2 downscale, (first DS4 downscale, second DS4 downscale)).
    pub downscale: (usize, (usize, usize)),
    /// Post-shuffle channels: (DS2 -> DS0 stage, (DS4 -> DS2 stage, DS4 -> DS0 stage)).
    pub upscale: (usize, (usize, usize)),
    pub output_channels: usize,
}

pub const PRESET_NAMES: [&str; 4] = ["baseline-r", "msrn", "baseline-d", "msdn"];

pub fn preset(name: &str) -> Result<NetworkSpec> {
    let canon = name.to_ascii_lowercase().replace('_', "-");
    let spec = match canon.as_str() {
        "baseline-r" => NetworkSpec {
            name: "baseline-r".into(),
            body: BodyKind::Residual,
            blocks: [32, 0, 0],
            filters: [16, 0, 0],
            downscale: (0, (0, 0)),
            upscale: (0, (0, 0)),
            output_channels: 3,
        },
        "msrn" => NetworkSpec {
            name: "msrn".into(),
            body: BodyKind::Residual,
            blocks: [0, 32, 32],
            filters: [3, 96, 96],
            downscale: (96, (48, 96)),
            upscale: (48, (48, 24)),
            output_channels: 3,
        },
        "baseline-d" => NetworkSpec {
            name: "baseline-d".into(),
            body: BodyKind::Dense,
            blocks: [12, 0, 0],
            filters: [16, 0, 0],
            downscale: (0, (0, 0)),
            upscale: (0, (0, 0)),
            output_channels: 3,
        },
        "msdn" => NetworkSpec {
            name: "msdn".into(),
            body: BodyKind::Dense,
            blocks: [12, 12, 12],
            filters: [12, 48, 96],
            downscale: (48, (48, 96)),
            upscale: (48, (48, 24)),
            output_channels: 3,
        },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(spec)
}

impl NetworkSpec {
    /// Scaled-down multi-scale spec with derived downscale/upscale widths,
    /// used for desk-scale experiments and tests.
    pub fn custom(body: BodyKind, blocks: [usize; 3], filters: [usize; 3]) -> Self {
        let multi = filters[1] > 0;
        NetworkSpec {
            name: "custom".into(),
            body,
            blocks,
            filters,
            downscale: if multi {
                (filters[1], (filters[2] / 2, filters[2]))
            } else {
                (0, (0, 0))
            },
            upscale: if multi {
                (
                    (filters[1] / 2).max(1),
                    ((filters[2] / 2).max(1), (filters[2] / 4).max(1)),
                )
            } else {
                (0, (0, 0))
            },
            output_channels: 3,
        }
    }

    pub fn multi_scale(&self) -> bool {
        self.filters[1] > 0 || self.filters[2] > 0
    }

    /// Spatial size the input must be divisible by (two stride-2 stages).
    pub fn spatial_divisor(&self) -> usize {
        if self.multi_scale() {
            4
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters[0] == 0 {
            return Err(Error::InvalidSpec(
                "DS0 branch needs at least one filter".into(),
            ));
        }
        if self.output_channels == 0 {
            return Err(Error::InvalidSpec(
                "output channels must be positive".into(),
            ));
        }
        if self.multi_scale() {
            if self.filters[1] == 0 || self.filters[2] == 0 {
                return Err(Error::InvalidSpec(
                    "multi-scale specs need filters in DS2 and DS4".into(),
                ));
            }
            let (d2, (d4a, d4b)) = self.downscale;
            let (u2, (u4a, u4b)) = self.upscale;
            if d2 == 0 || d4a == 0 || d4b == 0 || u2 == 0 || u4a == 0 || u4b == 0 {
                return Err(Error::InvalidSpec(
                    "multi-scale specs need downscale and upscale widths".into(),
                ));
            }
            if self.body == BodyKind::Residual && (d2 != self.filters[1] || d4b != self.filters[2])
            {
                return Err(Error::InvalidSpec(
                    "residual bodies run at the downscale width; it must match the space's filter count".into(),
                ));
            }
        }
        Ok(())
    }
}

struct Builder<'a> {
    graph: Graph<f32>,
    rng: &'a mut Stream,
}

impl<'a> Builder<'a> {
    /// Zero-mean normal init with std sqrt(2 / (k² · in_c)), biases zero.
    fn conv(
        &mut self,
        name: String,
        input: NodeId,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> NodeId {
        let std = (2.0 / (k * k * in_c) as f64).sqrt();
        let shape = Shape::new(out_c, in_c, k, k);
        let data = (0..shape.len())
            .map(|_| (normal(self.rng) * std) as f32)
            .collect();
        let conv = ConvParams {
            weights: Tensor::from_vec(shape, data).expect("init length"),
            bias: vec![0.0; out_c],
            stride,
        };
        self.graph.conv(name, input, conv)
    }

    fn residual_body(
        &mut self,
        prefix: &str,
        mut node: NodeId,
        channels: usize,
        blocks: usize,
    ) -> NodeId {
        for b in 0..blocks {
            let c1 = self.conv(
                format!("{prefix}.block{b}.conv1"),
                node,
                channels,
                channels,
                3,
                1,
            );
            let r = self.graph.relu(c1);
            let c2 = self.conv(
                format!("{prefix}.block{b}.conv2"),
                r,
                channels,
                channels,
                3,
                1,
            );
            node = self.graph.add(&[node, c2]);
        }
        node
    }

    /// Dense body with the first-three/last-three cross concatenations and a
    /// trailing 1x1 fusion conv back to `base` channels. Cross links are only
    /// meaningful when the first and last three blocks do not overlap.
    fn dense_body(
        &mut self,
        prefix: &str,
        mut node: NodeId,
        base: usize,
        growth: usize,
        blocks: usize,
    ) -> NodeId {
        let cross = blocks >= 7;
        let mut channels = base;
        let mut block_out: Vec<(NodeId, usize)> = Vec::with_capacity(blocks);
        for b in 1..=blocks {
            let (mut input_node, mut in_c) = (node, channels);
            if cross && b >= blocks - 2 {
                // block j in {1,2,3} feeds the input of block (blocks+1-j)
                let j = blocks + 1 - b;
                let (src, src_c) = block_out[j - 1];
                input_node = self.graph.concat(&[node, src]);
                in_c += src_c;
            }
            let c1 = self.conv(
                format!("{prefix}.block{b}.conv1"),
                input_node,
                in_c,
                growth,
                3,
                1,
            );
            let r = self.graph.relu(c1);
            let c2 = self.conv(format!("{prefix}.block{b}.conv2"), r, growth, growth, 3, 1);
            node = self.graph.concat(&[input_node, c2]);
            channels = in_c + growth;
            block_out.push((node, channels));
        }
        self.conv(format!("{prefix}.fusion"), node, channels, base, 1, 1)
    }

    /// Sub-pixel upscale: 3x3 conv to 4·out_c channels + depth-to-space(2).
    fn upscale(&mut self, name: String, node: NodeId, in_c: usize, out_c: usize) -> NodeId {
        let c = self.conv(name, node, in_c, 4 * out_c, 3, 1);
        self.graph.depth_to_space(c, 2)
    }
}

pub fn build_network(spec: &NetworkSpec, rng: &mut Stream) -> Result<Graph<f32>> {
    spec.validate()?;
    let mut b = Builder {
        graph: Graph::new(),
        rng,
    };
    let input = b.graph.input();

    // DS0 branch
    let ds0 = match (spec.body, spec.blocks[0]) {
        (BodyKind::Residual, 0) => b.conv("ds0.conv".into(), input, 3, spec.filters[0], 3, 1),
        (BodyKind::Residual, n) => {
            let head = b.conv("ds0.head".into(), input, 3, spec.filters[0], 3, 1);
            b.residual_body("ds0", head, spec.filters[0], n)
        }
        (BodyKind::Dense, n) => {
            let head = b.conv("ds0.head".into(), input, 3, spec.filters[0], 3, 1);
            b.dense_body("ds0", head, spec.filters[0], spec.filters[0], n)
        }
    };

    let merged = if spec.multi_scale() {
        let (d2, (d4a, d4b)) = spec.downscale;
        let (u2, (u4a, u4b)) = spec.upscale;

        // DS2: one stride-2 downscale from the input
        let down2 = b.conv("ds2.down".into(), input, 3, d2, 3, 2);
        let (base2, growth2) = (d2, spec.filters[1]);
        let body2 = match spec.body {
            BodyKind::Residual => b.residual_body("ds2", down2, base2, spec.blocks[1]),
            BodyKind::Dense => b.dense_body("ds2", down2, base2, growth2, spec.blocks[1]),
        };
        let up2 = b.upscale("ds2.up".into(), body2, base2, u2);

        // DS4: two successive stride-2 downscales from the input
        let down4a = b.conv("ds4.down1".into(), input, 3, d4a, 3, 2);
        let down4b = b.conv("ds4.down2".into(), down4a, d4a, d4b, 3, 2);
        let (base4, growth4) = (d4b, spec.filters[2]);
        let body4 = match spec.body {
            BodyKind::Residual => b.residual_body("ds4", down4b, base4, spec.blocks[2]),
            BodyKind::Dense => b.dense_body("ds4", down4b, base4, growth4, spec.blocks[2]),
        };
        let up4a = b.upscale("ds4.up1".into(), body4, base4, u4a);
        let up4b = b.upscale("ds4.up2".into(), up4a, u4a, u4b);

        let cat = b.graph.concat(&[ds0, up2, up4b]);
        let merge_in = spec.filters[0] + u2 + u4b;
        b.conv(
            "merge.conv".into(),
            cat,
            merge_in,
            spec.output_channels,
            3,
            1,
        )
    } else {
        b.conv(
            "tail.conv".into(),
            ds0,
            spec.filters[0],
            spec.output_channels,
            3,
            1,
        )
    };

    b.graph.set_output(merged);
    Ok(b.graph)
}

/// Node-kind census: `(additions, concatenations)`.
pub fn audit_graph<S: Scalar>(graph: &Graph<S>) -> (usize, usize) {
    let mut adds = 0;
    let mut concats = 0;
    for node in &graph.nodes {
        match node.kind {
            crate::graph::NodeKind::Add => adds += 1,
            crate::graph::NodeKind::Concat => concats += 1,
            _ => {}
        }
    }
    (adds, concats)
}

/// Analytic per-layer parameter counts (out·in·k² weights + out biases).
pub fn count_parameters<S: Scalar>(graph: &Graph<S>) -> (usize, Vec<(String, usize)>) {
    let mut per_layer = Vec::with_capacity(graph.params.len());
    let mut total = 0;
    for p in &graph.params {
        let (oc, ic, k, _) = p.conv.shape();
        let count = oc * ic * k * k + oc;
        total += count;
        per_layer.push((p.name.clone(), count));
    }
    (total, per_layer)
}

/// Conservative receptive-field size (maximal path), in input pixels.
pub fn receptive_field<S: Scalar>(graph: &Graph<S>) -> usize {
    // per node: (field size, jump between adjacent samples), in input pixels
    let mut rf: Vec<(f64, f64)> = vec![(1.0, 1.0); graph.nodes.len()];
    for (id, node) in graph.nodes.iter().enumerate() {
        use crate::graph::NodeKind::*;
        rf[id] = match &node.kind {
            Input => (1.0, 1.0),
            Conv { param } => {
                let (r, j) = rf[node.inputs[0]];
                let k = graph.params[*param].conv.kernel() as f64;
                let s = graph.params[*param].conv.stride as f64;
                (r + (k - 1.0) * j, j * s)
            }
            Relu => rf[node.inputs[0]],
            Add | Concat => node
                .inputs
                .iter()
                .map(|&i| rf[i])
                .fold((1.0, 1.0), |(ar, aj), (br, bj)| (ar.max(br), aj.max(bj))),
            DepthToSpace { factor } => {
                let (r, j) = rf[node.inputs[0]];
                (r, j / *factor as f64)
            }
        };
    }
    rf[graph.output].0.ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{self, LossMode};
    use crate::rng::SeededRng;

    fn build(name: &str) -> Graph<f32> {
        let mut rng = SeededRng::new(0).stream("init");
        build_network(&preset(name).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn presets_match_settings_table() {
        let msrn = preset("msrn").unwrap();
        assert_eq!(msrn.blocks, [0, 32, 32]);
        assert_eq!(msrn.filters, [3, 96, 96]);
        assert_eq!(msrn.downscale, (96, (48, 96)));

        let br = preset("baseline-r").unwrap();
        assert_eq!(br.blocks, [32, 0, 0]);
        assert_eq!(br.filters, [16, 0, 0]);

        let msdn = preset("msdn").unwrap();
        assert_eq!(msdn.blocks, [12, 12, 12]);
        assert_eq!(msdn.filters, [12, 48, 96]);
        assert_eq!(msdn.downscale, (48, (48, 96)));

        let bd = preset("baseline-d").unwrap();
        assert_eq!(bd.blocks, [12, 0, 0]);
        assert_eq!(bd.filters, [16, 0, 0]);

        assert!(preset("unknown").is_err());
    }

    #[test]
    fn audits_match_settings_table() {
        assert_eq!(audit_graph(&build("baseline-r")), (32, 0));
        assert_eq!(audit_graph(&build("msrn")), (64, 1));
        assert_eq!(audit_graph(&build("baseline-d")), (0, 15));
        assert_eq!(audit_graph(&build("msdn")), (0, 46));
    }

    #[test]
    fn analytic_count_equals_enumeration() {
        for name in PRESET_NAMES {
            let g = build(name);
            let (total, per_layer) = count_parameters(&g);
            let enumerated: usize = g
                .params
                .iter()
                .map(|p| p.conv.weights.data.len() + p.conv.bias.len())
                .sum();
            assert_eq!(total, enumerated, "{name}");
            assert_eq!(per_layer.len(), g.params.len());
        }
        let empty: Graph<f32> = Graph::new();
        assert_eq!(count_parameters(&empty).0, 0);
    }

    #[test]
    fn single_conv_parameter_count() {
        let mut rng = SeededRng::new(1).stream("init");
        let mut b = Builder {
            graph: Graph::new(),
            rng: &mut rng,
        };
        let x = b.graph.input();
        let c = b.conv("c".into(), x, 3, 16, 3, 1);
        b.graph.set_output(c);
        assert_eq!(count_parameters(&b.graph).0, 3 * 3 * 3 * 16 + 16); // 448
    }

    #[test]
    fn forward_preserves_shape() {
        let mut rng = SeededRng::new(5).stream("init");
        let spec = NetworkSpec::custom(BodyKind::Residual, [0, 2, 2], [3, 8, 8]);
        let g = build_network(&spec, &mut rng).unwrap();
        let x = Tensor::from_vec(
            Shape::new(1, 3, 16, 16),
            (0..3 * 256).map(|i| (i % 17) as f32 / 17.0).collect(),
        )
        .unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape, x.shape);
        assert!(y.all_finite());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = SeededRng::new(5).stream("init");
        let spec = NetworkSpec::custom(BodyKind::Dense, [1, 1, 1], [4, 4, 4]);
        let mut g = build_network(&spec, &mut rng).unwrap();
        for p in &mut g.params {
            p.conv.weights.data.fill(0.0);
            p.conv.bias.fill(0.0);
        }
        let x = Tensor::filled(Shape::new(1, 3, 8, 8), 0.7);
        let y = g.forward(&x).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_forward_matches_hand_composition() {
        // 1-block single-scale residual net, recomposed manually from engine ops
        let mut rng = SeededRng::new(9).stream("init");
        let spec = NetworkSpec::custom(BodyKind::Residual, [1, 0, 0], [4, 0, 0]);
        let g = build_network(&spec, &mut rng).unwrap();
        let x = Tensor::from_vec(
            Shape::new(1, 3, 6, 6),
            (0..108).map(|i| ((i * 31) % 101) as f32 / 101.0).collect(),
        )
        .unwrap();
        let got = g.forward(&x).unwrap();

        let p: Vec<_> = g.params.iter().map(|p| p.conv.clone()).collect();
        let head = ops::conv2d(&x, &p[0]).unwrap();
        let c1 = ops::conv2d(&head, &p[1]).unwrap();
        let r = ops::relu(&c1);
        let c2 = ops::conv2d(&r, &p[2]).unwrap();
        let res = ops::add(&[&head, &c2]).unwrap();
        let expect = ops::conv2d(&res, &p[3]).unwrap();
        assert_eq!(got.data, expect.data);
    }

    #[test]
    fn receptive_field_composition_rules() {
        let mut rng = SeededRng::new(2).stream("init");
        let mut b = Builder {
            graph: Graph::new(),
            rng: &mut rng,
        };
        let x = b.graph.input();
        let c1 = b.conv("c1".into(), x, 1, 1, 3, 1);
        b.graph.set_output(c1);
        assert_eq!(receptive_field(&b.graph), 3);

        let c2 = b.conv("c2".into(), c1, 1, 1, 3, 1);
        b.graph.set_output(c2);
        assert_eq!(receptive_field(&b.graph), 5);

        let mut b2 = Builder {
            graph: Graph::new(),
            rng: &mut rng,
        };
        let x2 = b2.graph.input();
        let d = b2.conv("down".into(), x2, 1, 1, 3, 2);
        let c = b2.conv("c".into(), d, 1, 1, 3, 1);
        b2.graph.set_output(c);
        assert_eq!(receptive_field(&b2.graph), 7);
    }

    #[test]
    fn tiny_nets_pass_gradcheck() {
        for seed in 0..3u64 {
            let mut rng = SeededRng::new(seed).stream("init");
            for body in [BodyKind::Residual, BodyKind::Dense] {
                let spec = NetworkSpec::custom(body, [1, 1, 1], [3, 4, 4]);
                let g = build_network(&spec, &mut rng).unwrap().cast::<f64>();
                let mut data_rng = SeededRng::new(seed).stream("data");
                let x = Tensor::from_vec(
                    Shape::new(1, 3, 8, 8),
                    (0..192)
                        .map(|_| rand::Rng::gen_range(&mut data_rng, 0.0..1.0))
                        .collect(),
                )
                .unwrap();
                let t = Tensor::from_vec(
                    Shape::new(1, 3, 8, 8),
                    (0..192)
                        .map(|_| rand::Rng::gen_range(&mut data_rng, 0.0..1.0))
                        .collect(),
                )
                .unwrap();
                let err = crate::graph::gradcheck(&g, &x, &t, LossMode::L2, 1e-3).unwrap();
                assert!(err < 1e-4, "{body:?} seed {seed}: L2 rel err {err}");

                // L1 kinks at zero diff, so keep the target well below the
                // output: every diff stays positive under the probes.
                let mut t1 = g.forward(&x).unwrap();
                for v in t1.data.iter_mut() {
                    *v -= 0.5;
                }
                let err = crate::graph::gradcheck(&g, &x, &t1, LossMode::L1, 1e-3).unwrap();
                assert!(err < 1e-4, "{body:?} seed {seed}: L1 rel err {err}");
            }
        }
    }
}
