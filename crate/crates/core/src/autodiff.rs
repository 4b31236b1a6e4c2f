//! Minimal reverse-mode automatic differentiation on a tape of tensor ops.
//!
//! Forward evaluation happens eagerly as nodes are pushed; `Tape::backward`
//! walks the nodes in reverse creation order (a valid reverse topological
//! order, since parents always precede children) and accumulates gradients.
//! Fused ops cache whatever intermediates their backward needs inside the op
//! struct itself.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Backward rule of one op: maps the upstream gradient to per-parent
/// gradient contributions (`None` for parents that need no gradient).
pub trait Backward {
    fn backward(
        &self,
        grad: &Tensor,
        value: &Tensor,
        parents: &[&Tensor],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    op: Option<Box<dyn Backward>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], None, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        op: Option<Box<dyn Backward>>,
        force_grad: bool,
    ) -> NodeId {
        let needs_grad =
            force_grad || (op.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad));
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Gradients of a scalar `root` with respect to every node that needs
    /// one. Indexed by `NodeId`; entries are `None` for untouched nodes.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(self.nodes[root.0].value.shape(), vec![1.0]).unwrap());

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || node.op.is_none() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let op = node.op.as_ref().unwrap();
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let contribs = op.backward(&g, &node.value, &parent_vals);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    if !self.nodes[pid.0].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(c.shape(), self.nodes[pid.0].value.shape());
                    match &mut grads[pid.0] {
                        Some(acc) => acc.add_scaled(&c, 1.0),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        grads
    }

    // ---- generic ops -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, vec![a, b], Some(Box::new(AddOp)), false)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, vec![a, b], Some(Box::new(SubOp)), false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, vec![a, b], Some(Box::new(MulOp)), false)
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, vec![a], Some(Box::new(ScaleOp(s))), false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, vec![a, b], Some(Box::new(MatMulOp)), false)
    }

    /// Row gather: `weight[ids[i], :]` for each i.
    pub fn embedding(&mut self, weight: NodeId, ids: &[usize]) -> NodeId {
        let w = self.value(weight);
        assert_eq!(w.shape().len(), 2);
        let (v_rows, d) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v_rows, "token id {} out of vocab {}", id, v_rows);
            out[i * d..(i + 1) * d].copy_from_slice(&w.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::from_vec(&[ids.len(), d], out).unwrap();
        self.push(
            v,
            vec![weight],
            Some(Box::new(EmbeddingOp { ids: ids.to_vec() })),
            false,
        )
    }

    /// Row-wise RMS normalization with a learned gain: `y = x / rms(x) * w`.
    pub fn rmsnorm(&mut self, x: NodeId, w: NodeId, eps: f32) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.shape().len(), 2);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(wv.shape(), &[d]);
        let mut out = vec![0.0f32; n * d];
        let mut inv_rms = vec![0.0f32; n];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps as f64).sqrt();
            inv_rms[i] = inv as f32;
            for j in 0..d {
                out[i * d + j] = (row[j] as f64 * inv) as f32 * wv.data()[j];
            }
        }
        let v = Tensor::from_vec(&[n, d], out).unwrap();
        self.push(
            v,
            vec![x, w],
            Some(Box::new(RmsNormOp { inv_rms })),
            false,
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_scalar);
        self.push(v, vec![x], Some(Box::new(GeluOp)), false)
    }
}

struct AddOp;
impl Backward for AddOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, _p: &[&Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, _p: &[&Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.map(|x| -x))]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, p: &[&Tensor]) -> Vec<Option<Tensor>> {
        vec![
            Some(g.zip_map(p[1], |gi, b| gi * b)),
            Some(g.zip_map(p[0], |gi, a| gi * a)),
        ]
    }
}

struct ScaleOp(f32);
impl Backward for ScaleOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, _p: &[&Tensor]) -> Vec<Option<Tensor>> {
        vec![Some(g.map(|x| x * self.0))]
    }
}

struct MatMulOp;
impl Backward for MatMulOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, p: &[&Tensor]) -> Vec<Option<Tensor>> {
        let da = g.matmul(&p[1].transpose());
        let db = p[0].transpose().matmul(g);
        vec![Some(da), Some(db)]
    }
}

struct EmbeddingOp {
    ids: Vec<usize>,
}
impl Backward for EmbeddingOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, p: &[&Tensor]) -> Vec<Option<Tensor>> {
        let d = p[0].shape()[1];
        let mut dw = Tensor::zeros(p[0].shape());
        for (i, &id) in self.ids.iter().enumerate() {
            let src = &g.data()[i * d..(i + 1) * d];
            let dst = &mut dw.data_mut()[id * d..(id + 1) * d];
            for (o, &s) in dst.iter_mut().zip(src.iter()) {
                *o += s;
            }
        }
        vec![Some(dw)]
    }
}

struct RmsNormOp {
    inv_rms: Vec<f32>,
}
impl Backward for RmsNormOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, p: &[&Tensor]) -> Vec<Option<Tensor>> {
        let (x, w) = (p[0], p[1]);
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = vec![0.0f64; d];
        for i in 0..n {
            let xr = &x.data()[i * d..(i + 1) * d];
            let gr = &g.data()[i * d..(i + 1) * d];
            let inv = self.inv_rms[i] as f64;
            // s = sum_j g_j w_j x_j
            let mut s = 0.0f64;
            for j in 0..d {
                let gw = gr[j] as f64 * w.data()[j] as f64;
                s += gw * xr[j] as f64;
                dw[j] += gr[j] as f64 * xr[j] as f64 * inv;
            }
            let coef = s * inv * inv * inv / d as f64;
            let dxr = &mut dx.data_mut()[i * d..(i + 1) * d];
            for j in 0..d {
                let gw = gr[j] as f64 * w.data()[j] as f64;
                dxr[j] = (gw * inv - xr[j] as f64 * coef) as f32;
            }
        }
        let dw = Tensor::from_vec(&[d], dw.into_iter().map(|v| v as f32).collect()).unwrap();
        vec![Some(dx), Some(dw)]
    }
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    let x = x as f64;
    (0.5 * x * (1.0 + (S * (x + C * x * x * x)).tanh())) as f32
}

struct GeluOp;
impl Backward for GeluOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, p: &[&Tensor]) -> Vec<Option<Tensor>> {
        const S: f64 = 0.797_884_560_802_865_4;
        const C: f64 = 0.044_715;
        let dx = g.zip_map(p[0], |gi, x| {
            let x = x as f64;
            let u = S * (x + C * x * x * x);
            let t = u.tanh();
            let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * C * x * x);
            (gi as f64 * d) as f32
        });
        vec![Some(dx)]
    }
}

/// Central-difference gradient of `f` with respect to one flat tensor.
///
/// `f` must re-evaluate the full forward pass from the perturbed tensor.
/// Used by gradient-check tests throughout the crate.
pub fn finite_difference_grad(
    base: &Tensor,
    eps: f32,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Tensor {
    let mut grad = Tensor::zeros(base.shape());
    let mut work = base.clone();
    for i in 0..base.numel() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + eps;
        let plus = f(&work);
        work.data_mut()[i] = orig - eps;
        let minus = f(&work);
        work.data_mut()[i] = orig;
        grad.data_mut()[i] = ((plus - minus) / (2.0 * eps as f64)) as f32;
    }
    grad
}

/// Asserts `analytic` matches `numeric` within `atol + rtol * |numeric|`.
pub fn assert_grads_close(analytic: &Tensor, numeric: &Tensor, atol: f32, rtol: f32, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape");
    for (i, (&a, &n)) in analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .enumerate()
    {
        let tol = atol + rtol * n.abs();
        assert!(
            (a - n).abs() <= tol,
            "{what}[{i}]: analytic {a} vs numeric {n} (tol {tol})"
        );
    }
}
