//! Reverse-mode differentiation over a linear tape of primitives.
//!
//! Leaves (constants and parameters) are plain values on the tape; every
//! primitive application appends one record. [`Tape::backward`] walks the
//! records in exact reverse order and accumulates input gradients with `+=`
//! in a fixed order, so identical tapes give bit-identical gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::bspline::KnotGrid;
use crate::error::{Error, Result};
use crate::kan::{self, KanCache};
use crate::nn;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identity of a learnable parameter; gradients are reported per id.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Differentiable primitive operations.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// Elementwise sum of two same-shaped tensors.
    Add,
    /// Elementwise product of two same-shaped tensors.
    Mul,
    /// `[m, k] x [k, n]`.
    MatMul,
    Relu,
    Silu,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    Scale(f64),
    Reshape(Vec<usize>),
    /// Inputs `(x, weight, bias)`.
    Conv2d,
    MaxPool2,
    /// Inputs `(x, weight, bias)`.
    Linear,
    /// Input `logits`; the labels are part of the descriptor.
    SoftmaxCrossEntropy(Vec<usize>),
    /// Input `x` of any shape; output `[x.len(), G + k]` of basis values.
    BsplineBasis(KnotGrid),
    /// Inputs `(x, coeffs, scaler, base)`.
    KanLinear(Arc<[KnotGrid]>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Silu => "silu",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Scale(_) => "scale",
            Primitive::Reshape(_) => "reshape",
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool2 => "maxpool2",
            Primitive::Linear => "linear",
            Primitive::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Primitive::BsplineBasis(_) => "bspline_basis",
            Primitive::KanLinear(_) => "kan_linear",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Mul | Primitive::MatMul => 2,
            Primitive::Conv2d | Primitive::Linear => 3,
            Primitive::KanLinear(_) => 4,
            _ => 1,
        }
    }
}

enum Saved {
    Nothing,
    Argmax(Vec<usize>),
    Probs(Tensor),
    Kan(KanCache),
}

struct Record {
    prim: Primitive,
    inputs: Vec<Var>,
    output: Var,
    saved: Saved,
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(BTreeMap<ParamId, Tensor>);

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<ParamId, Tensor> {
        self.0
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    params: Vec<(Var, ParamId)>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        let v = self.constant(t);
        self.params.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Number of recorded primitive applications (leaves excluded).
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Recorded primitives in recording order.
    pub fn ops(&self) -> impl Iterator<Item = &Primitive> {
        self.records.iter().map(|r| &r.prim)
    }

    /// Applies `prim` to `inputs`, records it, and returns the output handle.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != prim.arity() {
            return Err(Error::shape(
                prim.name(),
                format!("expected {} inputs, got {}", prim.arity(), inputs.len()),
            ));
        }
        let (out, saved) = self.forward(&prim, inputs)?;
        let output = self.constant(out);
        self.records.push(Record {
            prim,
            inputs: inputs.to_vec(),
            output,
            saved,
        });
        Ok(output)
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<(Tensor, Saved)> {
        let v = |i: usize| &self.values[inputs[i].0];
        let out = match prim {
            Primitive::Add | Primitive::Mul => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(Error::shape(
                        prim.name(),
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if matches!(prim, Primitive::Add) { x + y } else { x * y })
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Primitive::MatMul => matmul(v(0), v(1))?,
            Primitive::Relu => v(0).map(nn::relu),
            Primitive::Silu => v(0).map(nn::silu),
            Primitive::Sum => Tensor::scalar(v(0).sum()),
            Primitive::Mean => Tensor::scalar(v(0).sum() / v(0).len() as f64),
            Primitive::Scale(s) => v(0).scale(*s),
            Primitive::Reshape(shape) => v(0).clone().reshape(shape)?,
            Primitive::Conv2d => nn::conv2d_forward(v(0), v(1), v(2))?,
            Primitive::MaxPool2 => {
                let (out, argmax) = nn::maxpool2_forward(v(0))?;
                return Ok((out, Saved::Argmax(argmax)));
            }
            Primitive::Linear => nn::linear_forward(v(0), v(1), v(2))?,
            Primitive::SoftmaxCrossEntropy(labels) => {
                let (loss, probs) = nn::softmax_cross_entropy_forward(v(0), labels)?;
                return Ok((Tensor::scalar(loss), Saved::Probs(probs)));
            }
            Primitive::BsplineBasis(grid) => {
                let nb = grid.basis_count();
                let mut data = Vec::with_capacity(v(0).len() * nb);
                for &x in v(0).data() {
                    data.extend(grid.basis_eval(x));
                }
                Tensor::new(vec![v(0).len(), nb], data)?
            }
            Primitive::KanLinear(grids) => {
                let (out, cache) = kan::kan_forward(v(0), v(1), v(2), v(3), grids)?;
                return Ok((out, Saved::Kan(cache)));
            }
        };
        Ok((out, Saved::Nothing))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Silu, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::Conv2d, &[x, weight, bias])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::MaxPool2, &[x])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::Linear, &[x, weight, bias])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(Primitive::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }

    pub fn bspline_basis(&mut self, x: Var, grid: &KnotGrid) -> Result<Var> {
        self.apply(Primitive::BsplineBasis(grid.clone()), &[x])
    }

    pub fn kan_linear(
        &mut self,
        x: Var,
        coeffs: Var,
        scaler: Var,
        base: Var,
        grids: Arc<[KnotGrid]>,
    ) -> Result<Var> {
        self.apply(Primitive::KanLinear(grids), &[x, coeffs, scaler, base])
    }

    /// Gradients of scalar `loss` with respect to every registered parameter.
    /// Parameters the loss does not depend on get zero tensors.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        if self.records.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = &self.values[loss.0];
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for rec in self.records.iter().rev() {
            let Some(gy) = grads[rec.output.0].take() else {
                continue;
            };
            let input_grads = self.local_grads(rec, &gy);
            grads[rec.output.0] = Some(gy);
            for (var, g) in rec.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = BTreeMap::new();
        for &(var, id) in &self.params {
            let g = grads[var.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.values[var.0].shape()));
            match out.get_mut(&id) {
                Some(acc) => Tensor::add_assign(acc, &g),
                None => {
                    out.insert(id, g);
                }
            }
        }
        Ok(GradMap(out))
    }

    fn local_grads(&self, rec: &Record, gy: &Tensor) -> Vec<Option<Tensor>> {
        let v = |i: usize| &self.values[rec.inputs[i].0];
        match &rec.prim {
            Primitive::Add => vec![Some(gy.clone()), Some(gy.clone())],
            Primitive::Mul => {
                let ga = zip_map(gy, v(1), |g, b| g * b);
                let gb = zip_map(gy, v(0), |g, a| g * a);
                vec![Some(ga), Some(gb)]
            }
            Primitive::MatMul => {
                let (ga, gb) = matmul_backward(v(0), v(1), gy);
                vec![Some(ga), Some(gb)]
            }
            Primitive::Relu => vec![Some(zip_map(gy, v(0), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Primitive::Silu => vec![Some(zip_map(gy, v(0), |g, x| g * nn::silu_grad(x)))],
            Primitive::Sum => vec![Some(Tensor::full(v(0).shape(), gy.item()))],
            Primitive::Mean => {
                let n = v(0).len() as f64;
                vec![Some(Tensor::full(v(0).shape(), gy.item() / n))]
            }
            Primitive::Scale(s) => vec![Some(gy.scale(*s))],
            Primitive::Reshape(_) => vec![Some(
                gy.clone().reshape(v(0).shape()).expect("reshape is invertible"),
            )],
            Primitive::Conv2d => {
                let (gx, gw, gb) = nn::conv2d_backward(v(0), v(1), gy);
                vec![Some(gx), Some(gw), Some(gb)]
            }
            Primitive::MaxPool2 => {
                let Saved::Argmax(argmax) = &rec.saved else {
                    unreachable!("maxpool saves argmax")
                };
                vec![Some(nn::maxpool2_backward(v(0).shape(), argmax, gy))]
            }
            Primitive::Linear => {
                let (gx, gw, gb) = nn::linear_backward(v(0), v(1), gy);
                vec![Some(gx), Some(gw), Some(gb)]
            }
            Primitive::SoftmaxCrossEntropy(labels) => {
                let Saved::Probs(probs) = &rec.saved else {
                    unreachable!("cross-entropy saves probabilities")
                };
                vec![Some(nn::softmax_cross_entropy_backward(
                    probs,
                    labels,
                    gy.item(),
                ))]
            }
            Primitive::BsplineBasis(grid) => {
                let nb = grid.basis_count();
                let gx = v(0)
                    .data()
                    .iter()
                    .zip(gy.data().chunks(nb))
                    .map(|(&x, grow)| {
                        let local = grid.local_basis(x);
                        local
                            .derivs(grid.degree())
                            .iter()
                            .zip(&grow[local.start..])
                            .fold(0.0, |a, (d, g)| a + d * g)
                    })
                    .collect();
                vec![Some(Tensor::new(v(0).shape().to_vec(), gx).expect("shape"))]
            }
            Primitive::KanLinear(grids) => {
                let Saved::Kan(cache) = &rec.saved else {
                    unreachable!("kan_linear saves its basis cache")
                };
                let [gx, gc, gs, gb] = kan::kan_backward(v(0), v(1), v(2), v(3), grids, cache, gy);
                vec![Some(gx), Some(gc), Some(gs), Some(gb)]
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("same shape")
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd, g) = (a.data(), b.data(), gy.data());
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += g[i * n + j] * bd[p * n + j];
                gb[p * n + j] += ad[i * k + p] * g[i * n + j];
            }
            ga[i * k + p] = acc;
        }
    }
    (
        Tensor::new(vec![m, k], ga).expect("shape"),
        Tensor::new(vec![k, n], gb).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let b = tape.constant(Tensor::ones(&[2, 2]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &Tensor::full(&[2, 2], 2.0));
    }

    #[test]
    fn matmul_with_zeros() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 3]));
        let b = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 + 1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &Tensor::zeros(&[1, 4]));
    }

    #[test]
    fn records_in_order() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3]));
        let b = tape.relu(a).unwrap();
        let _ = tape.sum(b).unwrap();
        assert_eq!(tape.len(), 2);
        let names: Vec<_> = tape.ops().map(Primitive::name).collect();
        assert_eq!(names, ["relu", "sum"]);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 2]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add") && err.to_string().contains("[2, 3]"));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { op: "matmul", .. })));
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn weighted_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.sum(c).unwrap();
        assert!(tape.backward(loss).unwrap().is_empty());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::ones(&[3]));
        let _unused = tape.param(ParamId(1), Tensor::ones(&[2, 2]));
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(1)).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::EmptyTape)));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reused_value_accumulates() {
        // loss = sum(w * w) → 2w
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(ParamId(0)).unwrap().data(), &[3.0, -4.0]);
    }
}
