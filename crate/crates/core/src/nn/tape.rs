//! Recorded-tape reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate tensor of a forward pass. Ops append
//! nodes; [`Tape::backward`] walks the nodes in reverse creation order
//! (creation order is a topological order, since inputs always precede
//! consumers) and accumulates gradients. Frozen networks run on a no-grad
//! tape, which records values but no backward context.

use crate::error::{Error, Result};
use crate::nn::kernels as k;
use crate::nn::tensor::{Elem, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Batch statistics produced by a train-mode batch-norm node; the caller
/// folds them into the owning network's running stats after the pass.
#[derive(Clone, Debug)]
pub struct BnBatchStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

enum Op<E: Elem> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: k::BnSaved<E>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Bilinear {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Normalize {
        x: NodeId,
        norms: Vec<E>,
    },
    MulBroadcast {
        x: NodeId,
        a: NodeId,
    },
    DistillLoss {
        target: Tensor<E>,
        s: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        probs: Tensor<E>,
        labels: Vec<usize>,
    },
    SumScalars {
        xs: Vec<NodeId>,
    },
    SumAll {
        x: NodeId,
    },
}

struct Node<E: Elem> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op<E>,
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    grad_enabled: bool,
    ran_backward: bool,
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Tape<E> {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            ran_backward: false,
        }
    }

    /// A tape that records values only; no backward context is kept and
    /// `backward` is a state error.
    pub fn no_grad() -> Tape<E> {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Gradient of the last `backward` call w.r.t. node `id`, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>, what: &str) -> NodeId {
        value.debug_assert_finite(what);
        let keep = self.grad_enabled && needs_grad;
        self.nodes.push(Node {
            value,
            needs_grad: keep,
            op: if keep { op } else { Op::Leaf },
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    /// A constant: participates in forward values, never receives gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.leaf(value, false)
    }

    /// Copy a node's value out of the graph; gradient stops here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let y = k::conv2d_fwd(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ng = self.needs_grad(x)
            || self.needs_grad(w)
            || bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        Ok(self.push(y, ng, Op::Conv2d { x, w, bias, stride, pad }, "conv2d"))
    }

    /// Train-mode batch norm; returns the node plus the batch statistics for
    /// the running-stat update.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BnBatchStats<E>)> {
        let (y, saved) = k::bn_train_fwd(self.value(x), self.value(gamma), self.value(beta))?;
        let stats = BnBatchStats {
            mean: saved.mean.clone(),
            var: saved.var.clone(),
        };
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let id = self.push(y, ng, Op::BnTrain { x, gamma, beta, saved }, "batch_norm(train)");
        Ok((id, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
    ) -> Result<NodeId> {
        let y = k::bn_eval_fwd(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var)?;
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let op = Op::BnEval {
            x,
            gamma,
            beta,
            running_mean: running_mean.clone(),
            running_var: running_var.clone(),
        };
        Ok(self.push(y, ng, op, "batch_norm(eval)"))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = k::relu_fwd(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, ng, Op::Relu { x }, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = k::sigmoid_fwd(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, ng, Op::Sigmoid { x }, "sigmoid")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = k::add_fwd(self.value(a), self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(y, ng, Op::Add { a, b }, "add"))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let y = k::bilinear_fwd(self.value(x), oh, ow)?;
        let ng = self.needs_grad(x);
        Ok(self.push(y, ng, Op::Bilinear { x }, "upsample_bilinear"))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let y = k::global_avg_pool_fwd(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, ng, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = k::linear_fwd(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(y, ng, Op::Linear { x, w, b }, "linear"))
    }

    /// Per-position l2 normalization along channels.
    pub fn normalize_channels(&mut self, x: NodeId) -> NodeId {
        let (y, norms) = k::normalize_channels_fwd(self.value(x));
        let ng = self.needs_grad(x);
        self.push(y, ng, Op::Normalize { x, norms }, "normalize_channels")
    }

    /// Multiply features by a one-channel map broadcast across channels.
    pub fn mul_broadcast(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let y = k::mul_broadcast_fwd(self.value(x), self.value(a))?;
        let ng = self.needs_grad(x) || self.needs_grad(a);
        Ok(self.push(y, ng, Op::MulBroadcast { x, a }, "mul_broadcast"))
    }

    /// Distillation level loss against a fixed target:
    /// mean over batch/positions of 0.5 * ||target - s||^2 along channels.
    pub fn distill_loss(&mut self, target: Tensor<E>, s: NodeId) -> Result<NodeId> {
        let v = k::sq_diff_half_mean_fwd(&target, self.value(s))?;
        let ng = self.needs_grad(s);
        Ok(self.push(Tensor::scalar(v), ng, Op::DistillLoss { target, s }, "distill_loss"))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (loss, probs) = k::softmax_ce_fwd(self.value(logits), &labels)?;
        let ng = self.needs_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            ng,
            Op::SoftmaxCe { logits, probs, labels },
            "softmax_cross_entropy",
        ))
    }

    /// Sum of every element of a tensor node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(acc), ng, Op::SumAll { x }, "sum_all")
    }

    /// Sum of scalar nodes (total loss over levels).
    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut acc = E::zero();
        for &id in xs {
            let v = self.value(id);
            if v.numel() != 1 {
                return Err(Error::shape("sum_scalars on non-scalar node".to_string()));
            }
            acc = acc + v.scalar_value();
        }
        let ng = xs.iter().any(|&id| self.needs_grad(id));
        Ok(self.push(Tensor::scalar(acc), ng, Op::SumScalars { xs: xs.to_vec() }, "sum_scalars"))
    }

    fn accumulate(grads: &mut [Option<Tensor<E>>], nodes: &[Node<E>], id: NodeId, g: Tensor<E>) {
        if !nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss node. Gradients for every reachable
    /// node that needs them are retained and queryable via [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::state("backward on a no-grad tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::state(
                "backward before a gradient-producing forward: loss does not depend on any trainable leaf",
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(E::one()));
        self.ran_backward = true;

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // Take the gradient out to appease the borrow checker; leaf nodes
            // keep theirs (they are the outputs of the pass).
            let g = match self.nodes[i].op {
                Op::Leaf => continue,
                _ => self.grads[i].take().expect("checked above"),
            };
            g.debug_assert_finite("backward");
            let (grads, nodes) = (&mut self.grads, &self.nodes);
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, bias, stride, pad } => {
                    if nodes[x.0].needs_grad {
                        let dx = k::conv2d_bwd_input(&g, &nodes[w.0].value, nodes[x.0].value.shape(), *stride, *pad);
                        Self::accumulate(grads, nodes, *x, dx);
                    }
                    if nodes[w.0].needs_grad {
                        let dw = k::conv2d_bwd_weight(&g, &nodes[x.0].value, nodes[w.0].value.shape(), *stride, *pad);
                        Self::accumulate(grads, nodes, *w, dw);
                    }
                    if let Some(b) = bias {
                        if nodes[b.0].needs_grad {
                            let db = k::conv2d_bwd_bias(&g);
                            Self::accumulate(grads, nodes, *b, db);
                        }
                    }
                }
                Op::BnTrain { x, gamma, beta, saved } => {
                    let (dx, dgamma, dbeta) = k::bn_train_bwd(&g, saved, &nodes[gamma.0].value);
                    Self::accumulate(grads, nodes, *x, dx);
                    Self::accumulate(grads, nodes, *gamma, dgamma);
                    Self::accumulate(grads, nodes, *beta, dbeta);
                }
                Op::BnEval { x, gamma, beta, running_mean, running_var } => {
                    let (dx, dgamma, dbeta) =
                        k::bn_eval_bwd(&g, &nodes[x.0].value, &nodes[gamma.0].value, running_mean, running_var);
                    Self::accumulate(grads, nodes, *x, dx);
                    Self::accumulate(grads, nodes, *gamma, dgamma);
                    Self::accumulate(grads, nodes, *beta, dbeta);
                }
                Op::Relu { x } => {
                    let dx = k::relu_bwd(&g, &nodes[x.0].value);
                    Self::accumulate(grads, nodes, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = k::sigmoid_bwd(&g, &nodes[i].value);
                    Self::accumulate(grads, nodes, *x, dx);
                }
                Op::Add { a, b } => {
                    Self::accumulate(grads, nodes, *a, g.clone());
                    Self::accumulate(grads, nodes, *b, g);
                }
                Op::Bilinear { x } => {
                    let dx = k::bilinear_bwd(&g, nodes[x.0].value.shape());
                    Self::accumulate(grads, nodes, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let dx = k::global_avg_pool_bwd(&g, nodes[x.0].value.shape());
                    Self::accumulate(grads, nodes, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = k::linear_bwd(&g, &nodes[x.0].value, &nodes[w.0].value);
                    Self::accumulate(grads, nodes, *x, dx);
                    Self::accumulate(grads, nodes, *w, dw);
                    Self::accumulate(grads, nodes, *b, db);
                }
                Op::Normalize { x, norms } => {
                    let dx = k::normalize_channels_bwd(&g, &nodes[i].value, norms);
                    Self::accumulate(grads, nodes, *x, dx);
                }
                Op::MulBroadcast { x, a } => {
                    let (dx, da) = k::mul_broadcast_bwd(&g, &nodes[x.0].value, &nodes[a.0].value);
                    Self::accumulate(grads, nodes, *x, dx);
                    Self::accumulate(grads, nodes, *a, da);
                }
                Op::DistillLoss { target, s } => {
                    let ds = k::sq_diff_half_mean_bwd(g.scalar_value(), target, &nodes[s.0].value);
                    Self::accumulate(grads, nodes, *s, ds);
                }
                Op::SoftmaxCe { logits, probs, labels } => {
                    let dl = k::softmax_ce_bwd(g.scalar_value(), probs, labels);
                    Self::accumulate(grads, nodes, *logits, dl);
                }
                Op::SumScalars { xs } => {
                    for &xid in xs {
                        Self::accumulate(grads, nodes, xid, g.clone());
                    }
                }
                Op::SumAll { x } => {
                    let gv = g.scalar_value();
                    let dx = Tensor::filled(nodes[x.0].value.shape(), gv);
                    Self::accumulate(grads, nodes, *x, dx);
                }
            }
        }
        Ok(())
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Tape::new()
    }
}
