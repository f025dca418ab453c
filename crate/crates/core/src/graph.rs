//! Operator DAG: declarative node list plus reverse-mode differentiation.
//!
//! Nodes are appended in topological order (a node may only reference earlier
//! nodes), so the graph is acyclic by construction and backward is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::ops::{self, ConvParams, LossMode};
use crate::tensor::{Scalar, Shape, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum NodeKind {
    Input,
    Conv { param: usize },
    Relu,
    Add,
    Concat,
    DepthToSpace { factor: usize },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

/// A named convolution parameter owned by the graph.
#[derive(Clone, Debug)]
pub struct NamedParam<S: Scalar = f32> {
    pub name: String,
    pub conv: ConvParams<S>,
}

#[derive(Clone, Debug)]
pub struct Graph<S: Scalar = f32> {
    pub nodes: Vec<Node>,
    pub params: Vec<NamedParam<S>>,
    pub output: NodeId,
}

/// Per-parameter gradients, indexed like `Graph::params`.
#[derive(Clone, Debug)]
pub struct ParamGrad<S: Scalar = f32> {
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            output: 0,
        }
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "node inputs must precede the node");
        }
        self.nodes.push(Node { kind, inputs });
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> NodeId {
        self.push(NodeKind::Input, vec![])
    }

    pub fn conv(&mut self, name: impl Into<String>, input: NodeId, conv: ConvParams<S>) -> NodeId {
        self.params.push(NamedParam {
            name: name.into(),
            conv,
        });
        let param = self.params.len() - 1;
        self.push(NodeKind::Conv { param }, vec![input])
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.push(NodeKind::Relu, vec![input])
    }

    pub fn add(&mut self, inputs: &[NodeId]) -> NodeId {
        self.push(NodeKind::Add, inputs.to_vec())
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        self.push(NodeKind::Concat, inputs.to_vec())
    }

    pub fn depth_to_space(&mut self, input: NodeId, factor: usize) -> NodeId {
        self.push(NodeKind::DepthToSpace { factor }, vec![input])
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = node;
    }

    pub fn cast<T: Scalar>(&self) -> Graph<T> {
        Graph {
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    conv: p.conv.cast(),
                })
                .collect(),
            output: self.output,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.conv.parameter_count()).sum()
    }

    fn eval_node(&self, id: NodeId, acts: &[Option<Tensor<S>>]) -> Result<Tensor<S>> {
        let node = &self.nodes[id];
        let arg = |i: usize| acts[node.inputs[i]].as_ref().expect("topological order");
        match &node.kind {
            NodeKind::Input => unreachable!("input activations are seeded"),
            NodeKind::Conv { param } => ops::conv2d(arg(0), &self.params[*param].conv),
            NodeKind::Relu => Ok(ops::relu(arg(0))),
            NodeKind::Add => {
                let refs: Vec<&Tensor<S>> = node
                    .inputs
                    .iter()
                    .map(|&i| acts[i].as_ref().unwrap())
                    .collect();
                ops::add(&refs)
            }
            NodeKind::Concat => {
                let refs: Vec<&Tensor<S>> = node
                    .inputs
                    .iter()
                    .map(|&i| acts[i].as_ref().unwrap())
                    .collect();
                ops::concat_channels(&refs)
            }
            NodeKind::DepthToSpace { factor } => ops::depth_to_space(arg(0), *factor),
        }
    }

    fn run_forward(&self, input: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let mut acts: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            let t = match self.nodes[id].kind {
                NodeKind::Input => input.clone(),
                _ => self.eval_node(id, &acts)?,
            };
            acts[id] = Some(t);
        }
        Ok(acts)
    }

    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let acts = self.run_forward(input)?;
        Ok(acts[self.output].clone().unwrap())
    }

    /// Forward plus the sign pattern at every ReLU input, used by the
    /// gradient checker to mask kink crossings.
    pub fn forward_with_relu_pattern(&self, input: &Tensor<S>) -> Result<(Tensor<S>, Vec<bool>)> {
        let acts = self.run_forward(input)?;
        let mut pattern = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Relu) {
                let src = acts[node.inputs[0]].as_ref().unwrap();
                pattern.extend(src.data.iter().map(|&v| v > S::ZERO));
                let _ = id;
            }
        }
        Ok((acts[self.output].clone().unwrap(), pattern))
    }

    /// Runs forward, evaluates the loss against `target`, and accumulates
    /// parameter gradients in reverse topological order. Parameters off any
    /// path to the loss keep zero gradients.
    pub fn backward(
        &self,
        input: &Tensor<S>,
        target: &Tensor<S>,
        mode: LossMode,
    ) -> Result<(S, Vec<ParamGrad<S>>)> {
        let acts = self.run_forward(input)?;
        let out = acts[self.output].as_ref().unwrap();
        let (loss, loss_grad) = ops::compute_loss(mode, out, target)?;

        let mut node_grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        node_grads[self.output] = Some(loss_grad);
        let mut param_grads: Vec<ParamGrad<S>> = self
            .params
            .iter()
            .map(|p| ParamGrad {
                weights: Tensor::zeros(p.conv.weights.shape),
                bias: vec![S::ZERO; p.conv.bias.len()],
            })
            .collect();

        for id in (0..self.nodes.len()).rev() {
            let g_out = match node_grads[id].take() {
                Some(g) => g,
                None => continue, // not on a path to the loss
            };
            let node = &self.nodes[id];
            match &node.kind {
                NodeKind::Input => {}
                NodeKind::Conv { param } => {
                    let src = acts[node.inputs[0]].as_ref().unwrap();
                    let grads = ops::conv2d_backward(src, &self.params[*param].conv, &g_out)?;
                    let pg = &mut param_grads[*param];
                    for (a, b) in pg.weights.data.iter_mut().zip(&grads.weights.data) {
                        *a += *b;
                    }
                    for (a, b) in pg.bias.iter_mut().zip(&grads.bias) {
                        *a += *b;
                    }
                    accumulate(&mut node_grads[node.inputs[0]], grads.input);
                }
                NodeKind::Relu => {
                    let src = acts[node.inputs[0]].as_ref().unwrap();
                    accumulate(
                        &mut node_grads[node.inputs[0]],
                        ops::relu_backward(src, &g_out),
                    );
                }
                NodeKind::Add => {
                    for &i in &node.inputs {
                        accumulate(&mut node_grads[i], g_out.clone());
                    }
                }
                NodeKind::Concat => {
                    let mut c_off = 0;
                    for &i in &node.inputs {
                        let ci = acts[i].as_ref().unwrap().shape.c;
                        accumulate(
                            &mut node_grads[i],
                            ops::slice_channels(&g_out, c_off, c_off + ci),
                        );
                        c_off += ci;
                    }
                }
                NodeKind::DepthToSpace { factor } => {
                    accumulate(
                        &mut node_grads[node.inputs[0]],
                        ops::space_to_depth(&g_out, *factor)?,
                    );
                }
            }
        }
        Ok((loss, param_grads))
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, grad: Tensor<S>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&grad.data) {
                *a += *b;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Finite-difference gradient check in double precision.
///
/// Central differences with perturbation `eps` (1e-3 by default callers).
/// Returns the max over all parameter elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Elements whose perturbation flips any ReLU input sign are skipped, since
/// the loss is not differentiable across that kink.
pub fn gradcheck(
    graph: &Graph<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    mode: LossMode,
    eps: f64,
) -> Result<f64> {
    let (_, analytic) = graph.backward(input, target, mode)?;
    let mut g = graph.clone();
    let mut max_rel = 0.0f64;

    let num_params = g.params.len();
    for pi in 0..num_params {
        let n_weights = g.params[pi].conv.weights.data.len();
        let n_bias = g.params[pi].conv.bias.len();
        for ei in 0..n_weights + n_bias {
            let read = |g: &Graph<f64>| {
                if ei < n_weights {
                    g.params[pi].conv.weights.data[ei]
                } else {
                    g.params[pi].conv.bias[ei - n_weights]
                }
            };
            let orig = read(&g);
            let eval = |g: &mut Graph<f64>, v: f64| -> Result<(f64, Vec<bool>)> {
                if ei < n_weights {
                    g.params[pi].conv.weights.data[ei] = v;
                } else {
                    g.params[pi].conv.bias[ei - n_weights] = v;
                }
                let (out, pattern) = g.forward_with_relu_pattern(input)?;
                let (loss, _) = ops::compute_loss(mode, &out, target)?;
                Ok((loss, pattern))
            };
            let (l_plus, pat_plus) = eval(&mut g, orig + eps)?;
            let (l_minus, pat_minus) = eval(&mut g, orig - eps)?;
            eval(&mut g, orig)?; // restore
            if pat_plus != pat_minus {
                continue; // perturbation crossed a ReLU kink
            }
            let numeric = (l_plus - l_minus) / (2.0 * eps);
            let a = if ei < n_weights {
                analytic[pi].weights.data[ei]
            } else {
                analytic[pi].bias[ei - n_weights]
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Convenience: builds a graph around a single op for op-level gradchecks.
pub fn single_conv_graph<S: Scalar>(conv: ConvParams<S>) -> Graph<S> {
    let mut g = Graph::new();
    let x = g.input();
    let y = g.conv("conv", x, conv);
    g.set_output(y);
    g
}

pub fn shape_after_conv(input: Shape, conv: &ConvParams<f32>) -> Result<Shape> {
    if input.c != conv.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: conv.in_channels(),
            got: input.c,
        });
    }
    let s = conv.stride;
    Ok(Shape::new(
        input.n,
        conv.out_channels(),
        input.h.div_ceil(s),
        input.w.div_ceil(s),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_tensor(shape: Shape, rng: &mut impl rand::Rng) -> Tensor<f64> {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random_conv(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        rng: &mut impl rand::Rng,
    ) -> ConvParams<f64> {
        let shape = Shape::new(out_c, in_c, k, k);
        ConvParams {
            weights: random_tensor(shape, rng),
            bias: (0..out_c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            stride,
        }
    }

    #[test]
    fn gradcheck_single_conv_both_strides() {
        for seed in 0..5u64 {
            let mut rng = SeededRng::new(seed).stream("test");
            for stride in [1, 2] {
                let g = single_conv_graph(random_conv(3, 2, 3, stride, &mut rng));
                let x = random_tensor(Shape::new(1, 2, 6, 6), &mut rng);
                let t = random_tensor(Shape::new(1, 3, 6 / stride, 6 / stride), &mut rng);
                let err = gradcheck(&g, &x, &t, LossMode::L2, 1e-3).unwrap();
                assert!(err < 1e-4, "stride {stride} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn gradcheck_add_is_nearly_exact() {
        // addition is linear, so central differences are exact up to rounding
        let mut rng = SeededRng::new(7).stream("test");
        let mut g: Graph<f64> = Graph::new();
        let x = g.input();
        let c1 = g.conv("a", x, random_conv(2, 2, 1, 1, &mut rng));
        let c2 = g.conv("b", x, random_conv(2, 2, 1, 1, &mut rng));
        let sum = g.add(&[c1, c2]);
        g.set_output(sum);
        let inp = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let tgt = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let err = gradcheck(&g, &inp, &tgt, LossMode::L2, 1e-3).unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn two_paths_sum_gradients() {
        // y = conv(x) + conv(x): the conv feeds the add twice, so its
        // gradient must be exactly double the single-path gradient.
        let mut rng = SeededRng::new(3).stream("test");
        let conv = random_conv(2, 2, 3, 1, &mut rng);
        let inp = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let tgt = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);

        let mut two: Graph<f64> = Graph::new();
        let x = two.input();
        let c = two.conv("c", x, conv.clone());
        let y = two.add(&[c, c]);
        two.set_output(y);
        let (_, g_two) = two.backward(&inp, &tgt, LossMode::L2).unwrap();

        // With L2 loss: d/dθ mean(2c-t)² = 4 · d/dθ mean(c-t/2)², so the
        // two-path gradient must be exactly 4x the single-path gradient
        // against the halved target.
        let mut one: Graph<f64> = Graph::new();
        let x1 = one.input();
        let c1 = one.conv("c", x1, conv);
        one.set_output(c1);
        let half = Tensor::from_vec(tgt.shape, tgt.data.iter().map(|v| v / 2.0).collect()).unwrap();
        let (_, g_one) = one.backward(&inp, &half, LossMode::L2).unwrap();
        for (a, b) in g_two[0].weights.data.iter().zip(&g_one[0].weights.data) {
            assert!(
                (a - 4.0 * b).abs() < 1e-12 * b.abs().max(1.0),
                "{a} vs 4*{b}"
            );
        }
        assert!(g_two[0].weights.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut rng = SeededRng::new(11).stream("test");
        let mut g: Graph<f64> = Graph::new();
        let x = g.input();
        let used = g.conv("used", x, random_conv(2, 2, 3, 1, &mut rng));
        let _dangling = g.conv("unused", x, random_conv(2, 2, 3, 1, &mut rng));
        g.set_output(used);
        let inp = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let tgt = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let (_, grads) = g.backward(&inp, &tgt, LossMode::L2).unwrap();
        assert!(grads[1].weights.data.iter().all(|&v| v == 0.0));
        assert!(grads[1].bias.iter().all(|&v| v == 0.0));
        assert!(grads[0].weights.data.iter().any(|&v| v != 0.0));
    }
}
