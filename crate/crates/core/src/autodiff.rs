//! Minimal reverse-mode differentiation over dense vectors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a valid evaluation order. [`Graph::backward`] walks the nodes in
//! reverse once and returns gradients for every parameter leaf, in the order
//! the leaves were declared. There is no broadcasting: operand shapes must
//! conform exactly.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Lookup { table: NodeId, index: usize },
    Concat(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Mean(Vec<NodeId>),
    BceWithLogits { logit: NodeId, label: f64 },
    CrossEntropy { logits: NodeId, class: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::Bounds {
            what: "graph nodes",
            index: id.0,
            len: self.nodes.len(),
        })
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::contract(format!("parameter {name:?} declared twice")));
        }
        let id = self.push(value, Op::Param, true);
        self.params.push((name, id));
        Ok(id)
    }

    /// Registers every entry of `set` as a leaf, preserving order.
    pub fn params_from(&mut self, set: &ParamSet) -> Result<Vec<NodeId>> {
        set.iter().map(|(n, t)| self.param(n, t.clone())).collect()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
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

    fn vector_len(&self, op: &'static str, id: NodeId, operand: &str) -> Result<usize> {
        match self.node(id)?.value.shape() {
            &[n] => Ok(n),
            other => Err(Error::dim(op, format!("{operand} must be a vector, got shape {other:?}"))),
        }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// `y = W·x + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.vector_len("affine", x, "x")?;
        let m = self.vector_len("affine", b, "b")?;
        let (rows, cols) = self.node(w)?.value.as_matrix("affine")?;
        if rows != m || cols != n {
            return Err(Error::dim(
                "affine",
                format!("W is {rows}x{cols} but x has length {n} and b has length {m}"),
            ));
        }
        let xv = self.nodes[x.0].value.values();
        let wv = self.nodes[w.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let nz = nonzero(xv);
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for &j in &nz {
                acc += row[j] * xv[j];
            }
            *o = acc + bv[i];
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.node(x)?.value.clone();
        let shape = value.shape().to_vec();
        let out: Vec<f64> = value.into_values().into_iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu(x), rg))
    }

    /// Selects one row of a `U×D` table. Only that row receives gradient.
    pub fn embedding_lookup(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let row = self.node(table)?.value.row(index)?.to_vec();
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::vector(row), Op::Lookup { table, index }, rg))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.vector_len("concat", a, "a")?;
        self.vector_len("concat", b, "b")?;
        let mut out = self.nodes[a.0].value.values().to_vec();
        out.extend_from_slice(self.nodes[b.0].value.values());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::vector(out), Op::Concat(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out = Tensor::new(
            va.shape().to_vec(),
            va.values().iter().zip(vb.values()).map(|(x, y)| x * y).collect(),
        )?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.node(x)?.value.values().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Mean of scalar nodes, summed in the given order.
    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::contract("mean of an empty list"));
        }
        let mut acc = 0.0;
        for &id in items {
            acc += scalar_of(&self.node(id)?.value, "mean")?;
        }
        let rg = self.rg(items);
        Ok(self.push(
            Tensor::scalar(acc / items.len() as f64),
            Op::Mean(items.to_vec()),
            rg,
        ))
    }

    /// Binary cross-entropy on a single logit.
    pub fn bce_with_logits(&mut self, logit: NodeId, label: u32) -> Result<NodeId> {
        if label > 1 {
            return Err(Error::contract(format!("binary label must be 0 or 1, got {label}")));
        }
        let z = scalar_of(&self.node(logit)?.value, "bce_with_logits")?;
        let y = f64::from(label);
        let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let rg = self.rg(&[logit]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logit, label: y },
            rg,
        ))
    }

    /// `-log softmax(logits)[class]`.
    pub fn cross_entropy(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        let c = self.vector_len("cross_entropy", logits, "logits")?;
        if class >= c {
            return Err(Error::Bounds {
                what: "classes",
                index: class,
                len: c,
            });
        }
        let v = self.nodes[logits.0].value.values();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Subtracting before adding keeps small losses accurate when the
        // target logit is the largest.
        let loss = (max - v[class]) + v.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, class },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Returns one gradient per declared parameter leaf, in declaration
    /// order. Leaves the root does not depend on get exact zeros.
    pub fn backward(&self, root: NodeId) -> Result<ParamSet> {
        let root_node = self.node(root)?;
        if root_node.value.shape() != [1] {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Param | Op::Constant => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.nodes[x.0].value.values();
                    let n = xv.len();
                    if self.nodes[w.0].requires_grad {
                        let wlen = self.nodes[w.0].value.len();
                        let nz = nonzero(xv);
                        let gw = slot(&mut grads, *w, wlen);
                        for (i, gi) in g.iter().enumerate() {
                            let row = &mut gw[i * n..(i + 1) * n];
                            for &j in &nz {
                                row[j] += gi * xv[j];
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, *b, g.len());
                        for (gbi, gi) in gb.iter_mut().zip(&g) {
                            *gbi += gi;
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        let wv = self.nodes[w.0].value.values();
                        let gx = slot(&mut grads, *x, n);
                        for (i, gi) in g.iter().enumerate() {
                            let row = &wv[i * n..(i + 1) * n];
                            for (gxj, wij) in gx.iter_mut().zip(row) {
                                *gxj += wij * gi;
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.nodes[x.0].value.values();
                    let gx = slot(&mut grads, *x, xv.len());
                    for ((gxi, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *gxi += gi;
                        }
                    }
                }
                Op::Lookup { table, index } => {
                    let tlen = self.nodes[table.0].value.len();
                    let d = g.len();
                    let gt = slot(&mut grads, *table, tlen);
                    for (gti, gi) in gt[index * d..(index + 1) * d].iter_mut().zip(&g) {
                        *gti += gi;
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    if self.nodes[a.0].requires_grad {
                        let ga = slot(&mut grads, *a, na);
                        for (gai, gi) in ga.iter_mut().zip(&g[..na]) {
                            *gai += gi;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = slot(&mut grads, *b, g.len() - na);
                        for (gbi, gi) in gb.iter_mut().zip(&g[na..]) {
                            *gbi += gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (this, other) in [(a, b), (b, a)] {
                        if self.nodes[this.0].requires_grad {
                            let ov = self.nodes[other.0].value.values();
                            let gt = slot(&mut grads, *this, ov.len());
                            for ((gti, gi), oi) in gt.iter_mut().zip(&g).zip(ov) {
                                *gti += gi * oi;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    let gx = slot(&mut grads, *x, n);
                    for gxi in gx.iter_mut() {
                        *gxi += g[0];
                    }
                }
                Op::Mean(items) => {
                    let share = g[0] / items.len() as f64;
                    for id in items {
                        if self.nodes[id.0].requires_grad {
                            slot(&mut grads, *id, 1)[0] += share;
                        }
                    }
                }
                Op::BceWithLogits { logit, label } => {
                    let z = self.nodes[logit.0].value.values()[0];
                    slot(&mut grads, *logit, 1)[0] += g[0] * (sigmoid(z) - label);
                }
                Op::CrossEntropy { logits, class } => {
                    let probs = softmax(self.nodes[logits.0].value.values());
                    let gl = slot(&mut grads, *logits, probs.len());
                    for (k, (gk, pk)) in gl.iter_mut().zip(&probs).enumerate() {
                        let target = if k == *class { 1.0 } else { 0.0 };
                        *gk += g[0] * (pk - target);
                    }
                }
            }
        }

        let mut out = ParamSet::new();
        for (name, id) in &self.params {
            let shape = self.nodes[id.0].value.shape().to_vec();
            let values = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            out.insert(name.clone(), Tensor::new(shape, values)?)?;
        }
        Ok(out)
    }
}

// Zero inputs contribute nothing to W·x or to dW; skipping them keeps hashed
// feature vectors cheap.
fn nonzero(x: &[f64]) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, _)| j)
        .collect()
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn scalar_of(t: &Tensor, op: &'static str) -> Result<f64> {
    match t.values() {
        [v] => Ok(*v),
        _ => Err(Error::dim(op, format!("expected a scalar, got shape {:?}", t.shape()))),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Compares [`Graph::backward`] against central differences.
///
/// `build` receives a fresh graph and the leaf ids of `params` (in order) and
/// returns the scalar loss node. Returns the largest relative error over all
/// coordinates, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("grad_check needs eps > 0, got {eps}")));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let ids = g.params_from(p)?;
        let root = build(&mut g, &ids)?;
        scalar_of(g.value(root), "grad_check")
    };

    let mut g = Graph::new();
    let ids = g.params_from(params)?;
    let root = build(&mut g, &ids)?;
    let analytic = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).map_or(0, Tensor::len);
        for k in 0..n {
            let orig = params.get(name).unwrap().values()[k];
            probe.get_mut(name).unwrap().values_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().values_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().values_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(name).unwrap().values()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![5.0, -1.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).values(), &[5.0, -1.0]);
    }

    #[test]
    fn affine_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.5, -0.5]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).values(), &[3.5, 6.5]);
    }

    #[test]
    fn affine_shape_mismatch_names_operands() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.affine(x, w, b).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "affine", .. }));
        assert!(err.to_string().contains("x has length 3"));
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().values(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.0, -0.5]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_two_entries() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get("x").unwrap().values(), &[0.0, 1.0]);
    }

    #[test]
    fn lookup_selects_row_and_sparse_gradient() {
        let mut g = Graph::new();
        let t = g
            .param("table", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let row = g.embedding_lookup(t, 1).unwrap();
        assert_eq!(g.value(row).values(), &[3.0, 4.0]);
        let s = g.sum(row).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("table").unwrap().values(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(g.embedding_lookup(t, 2), Err(Error::Bounds { .. })));
    }

    #[test]
    fn bce_values_and_gradient() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::scalar(0.0)).unwrap();
        let l = g.bce_with_logits(z, 1).unwrap();
        assert!(close(g.value(l).values()[0], std::f64::consts::LN_2, 1e-15));
        assert_eq!(g.backward(l).unwrap().get("z").unwrap().values(), &[-0.5]);

        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(100.0));
        let l = g.bce_with_logits(z, 1).unwrap();
        let v = g.value(l).values()[0];
        assert!(v.is_finite() && v < 1e-10);

        let z = g.constant(Tensor::scalar(-800.0));
        let l = g.bce_with_logits(z, 1).unwrap();
        assert!(close(g.value(l).values()[0], 800.0, 1e-9));
        assert!(g.bce_with_logits(z, 2).is_err());
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::vector(vec![0.3; 4])).unwrap();
        let l = g.cross_entropy(z, 2).unwrap();
        assert!(close(g.value(l).values()[0], 4f64.ln(), 1e-15));
        let grad = g.backward(l).unwrap();
        let total: f64 = grad.get("z").unwrap().values().iter().sum();
        assert!(total.abs() < 1e-15);

        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![10.0, 0.0, 0.0, 0.0]));
        let l = g.cross_entropy(z, 0).unwrap();
        assert!(g.value(l).values()[0] < 1e-3);
        assert!(matches!(g.cross_entropy(z, 4), Err(Error::Bounds { .. })));

        let z = g.constant(Tensor::vector(vec![1000.0, -1000.0]));
        let l = g.cross_entropy(z, 1).unwrap();
        assert!(close(g.value(l).values()[0], 2000.0, 1e-9));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0)).unwrap();
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq).unwrap();
        assert_eq!(g.backward(l).unwrap().get("w").unwrap().values(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0)).unwrap();
        g.param("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let l = g.sum(w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.names().collect::<Vec<_>>(), ["w", "p"]);
        assert_eq!(grads.get("p").unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_quadratic_and_bad_eps() {
        let p = ParamSet::new().with("w", Tensor::scalar(1.7)).unwrap();
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let sq = g.mul(ids[0], ids[0])?;
            g.sum(sq)
        };
        assert!(grad_check(&p, 1e-6, build).unwrap() < 1e-8);
        assert!(grad_check(&p, 0.0, build).is_err());
    }

    #[test]
    fn affine_relu_bce_matches_finite_differences() {
        let p = ParamSet::new()
            .with("w", Tensor::matrix(2, 3, vec![0.4, -0.2, 0.7, -0.5, 0.3, 0.1]).unwrap())
            .unwrap()
            .with("b", Tensor::vector(vec![0.1, -0.05]))
            .unwrap()
            .with("v", Tensor::matrix(1, 2, vec![0.8, -1.1]).unwrap())
            .unwrap()
            .with("c", Tensor::scalar(0.2))
            .unwrap();
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
            let h = g.affine(x, ids[0], ids[1])?;
            let h = g.relu(h)?;
            let z = g.affine(h, ids[2], ids[3])?;
            g.bce_with_logits(z, 1)
        };
        assert!(grad_check(&p, 1e-6, build).unwrap() < 1e-5);
    }

    mod properties {
        use proptest::prelude::*;

        use super::*;

        fn values(n: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-range..range, n)
        }

        /// Data inputs in [-10, 10]; parameter leaves in [-1, 1].
        fn mlp_instance() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>, usize)> {
            (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, m, c)| {
                (
                    Just(n),
                    Just(m),
                    Just(c),
                    values(n, 10.0),
                    values(m * n + m + c * m + c, 1.0),
                    0..c.max(2),
                )
            })
        }

        /// Absolute error floor of a central difference with eps = 1e-6 on
        /// losses of magnitude up to about 100: a few ulps divided by eps.
        const NOISE: f64 = 1e-7;

        type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

        fn mlp_loss(x: Vec<f64>, c: usize, label: usize) -> Build {
            Box::new(move |g: &mut Graph, ids: &[NodeId]| {
                let x = g.constant(Tensor::vector(x.clone()));
                let h = g.affine(x, ids[0], ids[1])?;
                let h = g.relu(h)?;
                let z = g.affine(h, ids[2], ids[3])?;
                if c == 1 {
                    g.bce_with_logits(z, label as u32)
                } else {
                    g.cross_entropy(z, label)
                }
            })
        }

        fn gradients(params: &ParamSet, build: &Build) -> ParamSet {
            let mut g = Graph::new();
            let ids = g.params_from(params).unwrap();
            let root = build(&mut g, &ids).unwrap();
            g.backward(root).unwrap()
        }

        fn loss(params: &ParamSet, build: &Build) -> f64 {
            let mut g = Graph::new();
            let ids = g.params_from(params).unwrap();
            let root = build(&mut g, &ids).unwrap();
            g.value(root).values()[0]
        }

        fn central_difference(params: &ParamSet, build: &Build, name: &str, k: usize) -> f64 {
            let shifted = |d: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().values_mut()[k] += d;
                loss(&p, build)
            };
            (shifted(1e-6) - shifted(-1e-6)) / 2e-6
        }

        /// Every gradient coordinate is exactly zero or well above the
        /// central-difference noise floor, so a relative comparison at
        /// 1e-5 is meaningful.
        fn well_conditioned(params: &ParamSet, build: &Build) -> bool {
            gradients(params, build)
                .iter()
                .flat_map(|(_, t)| t.values().to_vec())
                .all(|g| g == 0.0 || g.abs() >= 1e-2)
        }

        fn split_params(n: usize, m: usize, c: usize, w: &[f64]) -> ParamSet {
            let (w1, rest) = w.split_at(m * n);
            let (b1, rest) = rest.split_at(m);
            let (w2, b2) = rest.split_at(c * m);
            ParamSet::new()
                .with("w1", Tensor::matrix(m, n, w1.to_vec()).unwrap())
                .unwrap()
                .with("b1", Tensor::vector(b1.to_vec()))
                .unwrap()
                .with("w2", Tensor::matrix(c, m, w2.to_vec()).unwrap())
                .unwrap()
                .with("b2", Tensor::vector(b2.to_vec()))
                .unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig {
                cases: 128,
                max_global_rejects: 100_000,
                rng_seed: prop::test_runner::RngSeed::Fixed(7),
                ..ProptestConfig::default()
            })]

            #[test]
            fn mlp_gradients_match_finite_differences((n, m, c, x, w, label) in mlp_instance()) {
                let params = split_params(n, m, c, &w);
                let build = mlp_loss(x, c, label);
                prop_assume!(well_conditioned(&params, &build));
                let err = grad_check(&params, 1e-6, &build).unwrap();
                prop_assert!(err <= 1e-5, "relative error {err}");
            }

            #[test]
            fn mlp_gradients_within_difference_noise((n, m, c, x, w, label) in mlp_instance()) {
                let params = split_params(n, m, c, &w);
                let build = mlp_loss(x, c, label);
                let analytic = gradients(&params, &build);
                for (name, t) in params.iter() {
                    for k in 0..t.len() {
                        let numeric = central_difference(&params, &build, name, k);
                        let a = analytic.get(name).unwrap().values()[k];
                        prop_assert!((a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()) + NOISE, "{name}[{k}]: {a} vs {numeric}");
                    }
                }
            }

            #[test]
            fn lookup_concat_mul_gradients_match_finite_differences(
                x in values(3, 10.0),
                table in values(3 * 2, 1.0),
                w in values(2 * 3 + 2, 1.0),
                v in values(4, 1.0),
                rows in (0usize..3, 0usize..3),
                labels in (0u32..2, 0u32..2),
            ) {
                let params = ParamSet::new()
                    .with("table", Tensor::matrix(3, 2, table).unwrap())
                    .unwrap()
                    .with("w", Tensor::matrix(2, 3, w[..6].to_vec()).unwrap())
                    .unwrap()
                    .with("b", Tensor::vector(w[6..].to_vec()))
                    .unwrap()
                    .with("v", Tensor::vector(v))
                    .unwrap();
                let err = grad_check(&params, 1e-6, |g, ids| {
                    let x = g.constant(Tensor::vector(x.clone()));
                    let h = g.affine(x, ids[1], ids[2])?;
                    let h = g.relu(h)?;
                    let mut losses = Vec::new();
                    for (row, label) in [(rows.0, labels.0), (rows.1, labels.1)] {
                        let e = g.embedding_lookup(ids[0], row)?;
                        let joined = g.concat(h, e)?;
                        let prod = g.mul(joined, ids[3])?;
                        let z = g.sum(prod)?;
                        losses.push(g.bce_with_logits(z, label)?);
                    }
                    g.mean(&losses)
                })
                .unwrap();
                prop_assert!(err <= 1e-5, "relative error {err}");
            }

            #[test]
            fn backward_is_deterministic((n, m, c, x, w, label) in mlp_instance()) {
                let params = split_params(n, m, c, &w);
                let run = || {
                    let mut g = Graph::new();
                    let ids = g.params_from(&params).unwrap();
                    let x = g.constant(Tensor::vector(x.clone()));
                    let h = g.affine(x, ids[0], ids[1]).unwrap();
                    let h = g.relu(h).unwrap();
                    let z = g.affine(h, ids[2], ids[3]).unwrap();
                    let root = if c == 1 { g.bce_with_logits(z, label as u32) } else { g.cross_entropy(z, label) }.unwrap();
                    (g.value(root).clone(), g.backward(root).unwrap())
                };
                let (a, b) = (run(), run());
                prop_assert_eq!(a.0.values()[0].to_bits(), b.0.values()[0].to_bits());
                for ((_, ga), (_, gb)) in a.1.iter().zip(b.1.iter()) {
                    prop_assert!(ga.values().iter().zip(gb.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
                }
            }
        }
    }
}
