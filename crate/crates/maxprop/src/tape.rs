//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to replay the local backward rule. Node inputs always reference
//! earlier nodes, so a single reverse sweep visits them in topological order.
//! A tape is single-writer; tensors read out of it are immutable.

use crate::error::{Error, Result};
use crate::ops::{self, BinaryKind, ReduceKind};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<E: Scalar> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    /// Forward max, backward passes the upstream gradient to both inputs.
    MaxShared { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Scale { x: NodeId, factor: E },
    Matmul { a: NodeId, b: NodeId },
    Dense {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: NodeId,
        axes: Vec<usize>,
        argmax: Option<Vec<usize>>,
        count: usize,
    },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<E>,
        inv_std: Vec<E>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<E>,
        inv_std: Vec<E>,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<E>,
    },
    Mae { pred: NodeId, target: NodeId },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Per-channel batch statistics produced by a train-mode batch norm node.
pub struct BnBatchStats<E: Scalar> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    min_kink_gap: f64,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            min_kink_gap: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distance from the recorded forward pass to the nearest non-smooth
    /// point (max/min tie, relu zero crossing, reduce-max near-tie, mae
    /// equality). Finite-difference checks reject samples where this is
    /// smaller than the probe step allows.
    pub fn min_kink_gap(&self) -> f64 {
        self.min_kink_gap
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn note_kink(&mut self, gap: f64) {
        if gap < self.min_kink_gap {
            self.min_kink_gap = gap;
        }
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::elementwise(kind, self.value(a), self.value(b))?;
        if matches!(kind, BinaryKind::Max | BinaryKind::Min) {
            let gap = ops::min_abs_diff(self.value(a), self.value(b));
            self.note_kink(gap);
        }
        Ok(self.push(value, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise maximum; ties take the first operand, and the backward
    /// routes the whole gradient to the winning element.
    pub fn emax(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Max, a, b)
    }

    /// Elementwise minimum; ties take the second operand so that
    /// `emax + emin` is exactly equivalent to `add`, gradients included.
    pub fn emin(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Min, a, b)
    }

    /// Elementwise maximum whose backward hands the full upstream gradient
    /// to both operands instead of the winner only.
    pub fn max_shared(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::elementwise(BinaryKind::Max, self.value(a), self.value(b))?;
        let gap = ops::min_abs_diff(self.value(a), self.value(b));
        self.note_kink(gap);
        Ok(self.push(value, Op::MaxShared { a, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::relu(self.value(x));
        let gap = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(f64::INFINITY, f64::min);
        self.note_kink(gap);
        self.push(value, Op::Relu { x })
    }

    pub fn scale(&mut self, x: NodeId, factor: E) -> NodeId {
        let value = ops::scale(self.value(x), factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::dense(self.value(x), self.value(w), self.value(bias))?;
        Ok(self.push(value, Op::Dense { x, w, bias }))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let value = ops::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let out = ops::reduce(kind, self.value(x), axes)?;
        if axes.is_empty() {
            // Reduction over no axes leaves the input unchanged.
            return Ok(x);
        }
        self.note_kink(out.min_gap);
        Ok(self.push(
            out.value,
            Op::Reduce {
                kind,
                x,
                axes: axes.to_vec(),
                argmax: out.argmax,
                count: out.count,
            },
        ))
    }

    /// Sum over every axis, yielding a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceKind::Sum, x, &axes)
    }

    /// Mean over the two spatial axes of an NCHW tensor, yielding NC.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).rank() != 4 {
            return Err(Error::RankMismatch {
                op: "global_avg_pool",
                expected: 4,
                shape: self.value(x).shape().to_vec(),
            });
        }
        self.reduce(ReduceKind::Mean, x, &[2, 3])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat(&tensors, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let value = ops::slice(self.value(x), axis, start, len)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    /// Train-mode batch norm: normalize by this batch's statistics. Returns
    /// the node and the batch statistics so the caller can fold them into
    /// running averages.
    pub fn bn_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
    ) -> Result<(NodeId, BnBatchStats<E>)> {
        let out = ops::bn_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = BnBatchStats {
            mean: out.mean,
            var: out.var,
        };
        let id = self.push(
            out.y,
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm: normalize by fixed running statistics.
    pub fn bn_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<NodeId> {
        let out = ops::bn_eval_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            out.y,
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn mae(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (loss, gap) = ops::mae(self.value(pred), self.value(target))?;
        self.note_kink(gap);
        Ok(self.push(Tensor::scalar(loss), Op::Mae { pred, target }))
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate
    /// additively across fan-out, and every reachable node ends up with a
    /// gradient of the same shape as its value.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Binary { kind, a, b } => match kind {
                    BinaryKind::Add => {
                        acc(&mut grads, *a, &g);
                        acc(&mut grads, *b, &g);
                    }
                    BinaryKind::Sub => {
                        acc(&mut grads, *a, &g);
                        acc_neg(&mut grads, *b, &g);
                    }
                    BinaryKind::Mul => {
                        let da = ops::elementwise(BinaryKind::Mul, &g, self.value(*b)).unwrap();
                        let db = ops::elementwise(BinaryKind::Mul, &g, self.value(*a)).unwrap();
                        acc(&mut grads, *a, &da);
                        acc(&mut grads, *b, &db);
                    }
                    BinaryKind::Max | BinaryKind::Min => {
                        let (da, db) = route_minmax(
                            *kind,
                            self.value(*a),
                            self.value(*b),
                            &g,
                        );
                        acc(&mut grads, *a, &da);
                        acc(&mut grads, *b, &db);
                    }
                },
                Op::MaxShared { a, b } => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    acc(&mut grads, *x, &dx);
                }
                Op::Scale { x, factor } => {
                    let dx = ops::scale(&g, *factor);
                    acc(&mut grads, *x, &dx);
                }
                Op::Matmul { a, b } => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Dense { x, w, bias } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *w, &dw);
                    acc(&mut grads, *bias, &db);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (dx, dk) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *pad,
                    );
                    acc(&mut grads, *input, &dx);
                    acc(&mut grads, *kernel, &dk);
                }
                Op::Reduce {
                    kind,
                    x,
                    axes,
                    argmax,
                    count,
                } => {
                    let dx = ops::reduce_backward(
                        *kind,
                        self.value(*x).shape(),
                        axes,
                        &g,
                        argmax.as_deref(),
                        *count,
                    );
                    acc(&mut grads, *x, &dx);
                }
                Op::Concat { parts, axis } => {
                    let lens: Vec<usize> =
                        parts.iter().map(|&p| self.value(p).shape()[*axis]).collect();
                    for (part, dg) in parts.iter().zip(ops::concat_backward(&g, &lens, *axis)) {
                        acc(&mut grads, *part, &dg);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let dx = ops::slice_backward(&g, self.value(*x).shape(), *axis, *start);
                    acc(&mut grads, *x, &dx);
                }
                Op::BnTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dg, db) = ops::bn_train_backward(&g, self.value(*gamma), xhat, inv_std);
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *gamma, &dg);
                    acc(&mut grads, *beta, &db);
                }
                Op::BnEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dg, db) = ops::bn_eval_backward(&g, self.value(*gamma), xhat, inv_std);
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *gamma, &dg);
                    acc(&mut grads, *beta, &db);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let dl = ops::softmax_cross_entropy_backward(probs, labels, g.item());
                    acc(&mut grads, *logits, &dl);
                }
                Op::Mae { pred, target } => {
                    let (dp, dt) =
                        ops::mae_backward(self.value(*pred), self.value(*target), g.item());
                    acc(&mut grads, *pred, &dp);
                    acc(&mut grads, *target, &dt);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Route an upstream gradient to the winning side of an elementwise max/min.
/// Max ties go to the first operand, min ties to the second — the two
/// conventions together make max + min gradient-equivalent to add.
fn route_minmax<E: Scalar>(
    kind: BinaryKind,
    a: &Tensor<E>,
    b: &Tensor<E>,
    g: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for (((&av, &bv), &gv), (dav, dbv)) in a
        .data()
        .iter()
        .zip(b.data())
        .zip(g.data())
        .zip(da.data_mut().iter_mut().zip(db.data_mut().iter_mut()))
    {
        let first_wins = match kind {
            BinaryKind::Max => av >= bv,
            BinaryKind::Min => av < bv,
            _ => unreachable!(),
        };
        if first_wins {
            *dav = gv;
        } else {
            *dbv = gv;
        }
    }
    (da, db)
}

fn acc<E: Scalar>(grads: &mut [Option<Tensor<E>>], id: NodeId, contribution: &Tensor<E>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(contribution),
        slot => *slot = Some(contribution.clone()),
    }
}

fn acc_neg<E: Scalar>(grads: &mut [Option<Tensor<E>>], id: NodeId, contribution: &Tensor<E>) {
    let neg = contribution.map(|v| -v);
    acc(grads, id, &neg);
}

/// Gradient of the loss with respect to each tape node.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient w.r.t. a node, `None` if the loss does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1<E: Scalar>(vals: &[f64]) -> Tensor<E> {
        Tensor::new(vec![vals.len()], vals.iter().map(|&v| E::from_f64(v)).collect()).unwrap()
    }

    #[test]
    fn elementwise_max_example() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t1(&[3.0, -1.0]));
        let b = tape.leaf(t1(&[5.0, -2.0]));
        let m = tape.emax(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, -1.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(&[1.5, -2.5, 0.0]));
        let z = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn min_example_and_max_plus_min_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t1(&[2.0, 4.0]));
        let b = tape.leaf(t1(&[4.0, 2.0]));
        let mn = tape.emin(a, b).unwrap();
        assert_eq!(tape.value(mn).data(), &[2.0, 2.0]);
        let mx = tape.emax(a, b).unwrap();
        let sum_minmax = tape.add(mx, mn).unwrap();
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum_minmax).data(), tape.value(sum).data());
    }

    #[test]
    fn max_gradient_routes_to_larger_operand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let b = tape.leaf(Tensor::scalar(5.0));
        let m = tape.emax(a, b).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.wrt(a).unwrap().item(), 0.0);
        assert_eq!(grads.wrt(b).unwrap().item(), 1.0);
    }

    #[test]
    fn max_tie_routes_to_first_operand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(2.0));
        let m = tape.emax(a, b).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.wrt(a).unwrap().item(), 1.0);
        assert_eq!(grads.wrt(b).unwrap().item(), 0.0);
    }

    #[test]
    fn add_gradient_passes_to_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        let b = tape.leaf(t1(&[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // x used three times in a sum gets three times the gradient.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(&[1.0, -2.0]));
        let s1 = tape.add(x, x).unwrap();
        let s2 = tape.add(s1, x).unwrap();
        let loss = tape.sum_all(s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(&[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![7.0, -3.0]).unwrap());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, -3.0]);

        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let prod = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(prod).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_dim_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b).unwrap_err(),
            Error::DimMismatch { .. }
        ));
    }

    #[test]
    fn conv_identity_and_all_ones() {
        let mut tape = Tape::<f64>::new();
        // 1x1 kernel of value 1 is the per-channel identity.
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let k1 = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k1, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        // 3x3 all-ones kernel over a 3x3 all-ones input, no padding.
        let ones = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let k3 = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let s = tape.conv2d(ones, k3, 1, 0).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(s).item(), 9.0);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(
            tape.conv2d(x, k, 1, 0).unwrap_err(),
            Error::KernelTooLarge { .. }
        ));
    }

    #[test]
    fn conv_stride_and_padding_geometry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 8, 8]));
        let k = tape.leaf(Tensor::zeros(&[5, 3, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let s = tape.reduce(ReduceKind::Sum, x, &[0]).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);

        // Mean over an empty axis list leaves the input unchanged.
        let m = tape.reduce(ReduceKind::Mean, x, &[]).unwrap();
        assert_eq!(m, x);

        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_gradient_spreads_evenly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(&[1.0, 2.0, 3.0, 4.0]));
        let m = tape.reduce(ReduceKind::Mean, x, &[0]).unwrap();
        assert_eq!(tape.value(m).item(), 2.5);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn reduce_invalid_axis_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(&[1.0, 2.0]));
        assert!(matches!(
            tape.reduce(ReduceKind::Sum, x, &[1]).unwrap_err(),
            Error::InvalidAxis { .. }
        ));
    }

    #[test]
    fn reduce_max_routes_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 7.0, 0.0, 7.0]).unwrap());
        let m = tape.reduce(ReduceKind::Max, x, &[1]).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
        let loss = tape.sum_all(m).unwrap();
        let g = tape.backward(loss).unwrap();
        // Second row ties at 7.0: the first occurrence wins.
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 2], vec![
            1.0, 2.0, 3.0, 4.0, // channel 0
            5.0, 5.0, 5.0, 5.0, // channel 1 (constant)
        ]).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 2]);
        assert_eq!(tape.value(p).data(), &[2.5, 5.0]);
        let loss = tape.sum_all(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 8]);
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t1(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        // Gradient is zero at x == 0.
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 10]));
        let loss = tape.softmax_cross_entropy(logits, &[3, 7]).unwrap();
        assert!((tape.value(loss).item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_confident_correct_logit() {
        let mut tape = Tape::<f64>::new();
        let mut t = Tensor::zeros(&[1, 4]);
        t.data_mut()[2] = 100.0;
        let logits = tape.leaf(t);
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn softmax_ce_shift_invariance() {
        let vals = [0.3, -1.2, 2.0, 0.7];
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![1, 4], vals.to_vec()).unwrap());
        let la = tape.softmax_cross_entropy(a, &[1]).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let b = tape.leaf(Tensor::new(vec![1, 4], shifted).unwrap());
        let lb = tape.softmax_cross_entropy(b, &[1]).unwrap();
        assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3]).unwrap_err(),
            Error::LabelOutOfRange { .. }
        ));
    }

    #[test]
    fn mae_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t1(&[1.0, 3.0]));
        let t = tape.leaf(t1(&[2.0, 2.0]));
        let loss = tape.mae(p, t).unwrap();
        assert_eq!(tape.value(loss).item(), 1.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[-0.5, 0.5]);

        let same = tape.leaf(t1(&[4.0, 4.0]));
        let zero = tape.mae(same, same).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[1, 3, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 2, 2]);
        let sa = tape.slice(c, 1, 0, 2).unwrap();
        let sb = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(sa).data(), tape.value(a).data());
        assert_eq!(tape.value(sb).data(), tape.value(b).data());

        let loss_part = tape.sum_all(sb).unwrap();
        let g = tape.backward(loss_part).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[0.0; 8]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn kink_gap_tracks_near_ties() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        let b = tape.leaf(t1(&[1.0 + 1e-7, 5.0]));
        tape.emax(a, b).unwrap();
        assert!(tape.min_kink_gap() <= 1e-7 + 1e-12);
    }
}
