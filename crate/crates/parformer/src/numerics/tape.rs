//! Reverse-mode differentiation on a Wengert tape.
//!
//! Each forward operation appends a node holding its output value and enough
//! metadata to replay the adjoint. Nodes reference earlier nodes only, so the
//! tape is already topologically ordered and `backward` is a single reverse
//! sweep. The op set is deliberately small and model-shaped: attention,
//! normalization and the three losses are built from these pieces, and every
//! adjoint is checked against central finite differences in the tests.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::ops::{
    gelu_grad_scalar, gelu_scalar, matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid_scalar,
};
use crate::numerics::tensor::{Real, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// How an ASL batch term is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    /// y = x . w + b over the trailing dimension of x.
    Linear { x: TensorId, w: TensorId, b: TensorId },
    /// Per trailing slice, biased-variance normalization.
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    },
    Gelu { x: TensorId },
    Sigmoid { x: TensorId },
    /// Softmax over the trailing dimension.
    Softmax { x: TensorId },
    /// out[g] = a[g] . b[g] (optionally b transposed), g = batch index.
    BatMatMul {
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Scale { x: TensorId, c: T },
    Add { a: TensorId, b: TensorId },
    /// out.data[i] = x.data[index[i]]; adjoint scatter-adds.
    Gather {
        x: TensorId,
        index: Rc<Vec<u32>>,
    },
    /// [m, s, c] -> [m, c] spatial mean.
    SpatialMean { x: TensorId, m: usize, s: usize, c: usize },
    /// Multiply cell s of every sample and channel by mask[s] (0 or 1).
    CellMask {
        x: TensorId,
        mask: Rc<Vec<T>>,
        m: usize,
        s: usize,
        c: usize,
    },
    /// Rows scaled to unit length, guarded by eps for zero rows.
    RowNormalize { x: TensorId, eps: T },
    /// Clamp values into [-1, 1]; adjoint is zero outside the open interval.
    ClampUnit { x: TensorId },
    /// scores[b, i, j] += table[index[i, j], b % heads]
    AddRelBias {
        scores: TensorId,
        table: TensorId,
        heads: usize,
        tt: usize,
        index: Rc<Vec<u32>>,
    },
    /// scores[b] += mask[(b / heads) % nw]; the mask is a constant, so only
    /// the scores id is kept for the adjoint.
    AddWindowMask { scores: TensorId },
    /// Asymmetric focal loss on probabilities.
    AslLoss {
        p: TensorId,
        y: Rc<Vec<T>>,
        gamma_pos: T,
        gamma_neg: T,
        clamp: T,
        reduction: Reduction,
    },
    /// Multi-attribute center loss; gradients flow to features and centers.
    MaclLoss {
        features: TensorId,
        centers: TensorId,
        y: Rc<Vec<T>>,
        m: usize,
        n: usize,
        d: usize,
    },
    /// Contrastive loss over a scaled similarity matrix with per-anchor
    /// positive sets (self excluded from the denominator).
    ContrastiveSims {
        sims: TensorId,
        positives: Rc<Vec<Vec<u32>>>,
        m: usize,
    },
    /// Mean cross-entropy of softmax(logits) against class indices.
    CrossEntropyMean {
        logits: TensorId,
        labels: Rc<Vec<u32>>,
        m: usize,
        k: usize,
    },
    /// Scalar combination sum_i w_i * term_i.
    WeightedSum { terms: Vec<(TensorId, T)> },
    /// Mean over all elements (test harness root).
    MeanAll { x: TensorId },
    /// Scalar projection against a fixed weighting; breaks symmetries that a
    /// plain mean would hide when checking adjoints.
    DotConst { x: TensorId, w: Rc<Vec<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by `TensorId`.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `id`; zeros if the node did not influence the root.
    pub fn get(&self, id: TensorId, shape: &[usize]) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Leaf that never receives a gradient (inputs, labels-as-tensors).
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf we differentiate with respect to (parameters, probe inputs).
    pub fn var(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // -- graph builders ----------------------------------------------------

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let out = crate::numerics::ops::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<TensorId> {
        let out =
            crate::numerics::ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).map(sigmoid_scalar);
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let out = crate::numerics::ops::softmax(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    pub fn bat_matmul(
        &mut self,
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    ) -> Result<TensorId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != batch * m * k {
            return Err(Error::dimension("bat_matmul lhs", &[batch, m, k], av.shape()));
        }
        let expect_b = batch * k * n;
        if bv.numel() != expect_b {
            return Err(Error::dimension("bat_matmul rhs", &[batch, k, n], bv.shape()));
        }
        let mut out = vec![T::ZERO; batch * m * n];
        for g in 0..batch {
            let a_s = &av.data()[g * m * k..(g + 1) * m * k];
            let b_s = &bv.data()[g * k * n..(g + 1) * k * n];
            let o_s = &mut out[g * m * n..(g + 1) * m * n];
            if transpose_b {
                matmul_bt_acc(a_s, b_s, m, k, n, o_s);
            } else {
                matmul_acc(a_s, b_s, m, k, n, o_s);
            }
        }
        let out = Tensor::new(&[batch, m, n], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            out,
            Op::BatMatMul {
                a,
                b,
                transpose_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dimension("add", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// `index` must reference valid elements of `x`; callers build it from a
    /// geometry (window partition, cyclic shift, patch regrouping, ...).
    pub fn gather(
        &mut self,
        x: TensorId,
        index: Rc<Vec<u32>>,
        out_shape: &[usize],
    ) -> Result<TensorId> {
        let xv = self.value(x);
        let numel: usize = out_shape.iter().product();
        if numel != index.len() {
            return Err(Error::dimension("gather", &[index.len()], out_shape));
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            data.push(xv.data()[i as usize]);
        }
        let out = Tensor::new(out_shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    pub fn spatial_mean(&mut self, x: TensorId, m: usize, s: usize, c: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.numel() != m * s * c {
            return Err(Error::dimension("spatial_mean", &[m, s, c], xv.shape()));
        }
        let inv = T::ONE / T::from_f64(s as f64);
        let mut out = vec![T::ZERO; m * c];
        for mi in 0..m {
            for si in 0..s {
                let src = &xv.data()[(mi * s + si) * c..(mi * s + si + 1) * c];
                let dst = &mut out[mi * c..(mi + 1) * c];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let out = Tensor::new(&[m, c], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SpatialMean { x, m, s, c }, rg))
    }

    pub fn cell_mask(
        &mut self,
        x: TensorId,
        mask: Rc<Vec<T>>,
        m: usize,
        s: usize,
        c: usize,
    ) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.numel() != m * s * c || mask.len() != s {
            return Err(Error::dimension("cell_mask", &[m, s, c], xv.shape()));
        }
        let mut data = xv.data().to_vec();
        for mi in 0..m {
            for (si, &mv) in mask.iter().enumerate() {
                let dst = &mut data[(mi * s + si) * c..(mi * s + si + 1) * c];
                for v in dst.iter_mut() {
                    *v = *v * mv;
                }
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::CellMask { x, mask, m, s, c }, rg))
    }

    pub fn row_normalize(&mut self, x: TensorId, eps: T) -> Result<TensorId> {
        let xv = self.value(x);
        let d = xv.last_dim()?;
        let rows = xv.numel() / d;
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            let inv = T::ONE / denom;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::RowNormalize { x, eps }, rg))
    }

    pub fn clamp_unit(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).map(|v| v.min(T::ONE).max(-T::ONE));
        let rg = self.needs(&[x]);
        self.push(out, Op::ClampUnit { x }, rg)
    }

    pub fn add_rel_bias(
        &mut self,
        scores: TensorId,
        table: TensorId,
        heads: usize,
        tt: usize,
        index: Rc<Vec<u32>>,
    ) -> Result<TensorId> {
        let sv = self.value(scores);
        if sv.numel() % (heads * tt) != 0 || index.len() != tt {
            return Err(Error::dimension("add_rel_bias", &[heads, tt], sv.shape()));
        }
        let batches = sv.numel() / tt;
        let tv = self.value(table).data().to_vec();
        let mut data = sv.data().to_vec();
        for b in 0..batches {
            let h = b % heads;
            let dst = &mut data[b * tt..(b + 1) * tt];
            for (i, v) in dst.iter_mut().enumerate() {
                *v += tv[index[i] as usize * heads + h];
            }
        }
        let out = Tensor::new(sv.shape(), data)?;
        let rg = self.needs(&[scores, table]);
        Ok(self.push(
            out,
            Op::AddRelBias {
                scores,
                table,
                heads,
                tt,
                index,
            },
            rg,
        ))
    }

    pub fn add_window_mask(
        &mut self,
        scores: TensorId,
        mask: Rc<Vec<T>>,
        heads: usize,
        nw: usize,
        tt: usize,
    ) -> Result<TensorId> {
        let sv = self.value(scores);
        if mask.len() != nw * tt || sv.numel() % (heads * nw * tt) != 0 {
            return Err(Error::dimension("add_window_mask", &[nw, tt], sv.shape()));
        }
        let batches = sv.numel() / tt;
        let mut data = sv.data().to_vec();
        for b in 0..batches {
            let w = (b / heads) % nw;
            let src = &mask[w * tt..(w + 1) * tt];
            let dst = &mut data[b * tt..(b + 1) * tt];
            for (v, &mv) in dst.iter_mut().zip(src) {
                *v += mv;
            }
        }
        let out = Tensor::new(sv.shape(), data)?;
        let rg = self.needs(&[scores]);
        Ok(self.push(out, Op::AddWindowMask { scores }, rg))
    }

    pub fn asl_loss(
        &mut self,
        p: TensorId,
        y: Rc<Vec<T>>,
        gamma_pos: T,
        gamma_neg: T,
        clamp: T,
        reduction: Reduction,
    ) -> Result<TensorId> {
        let pv = self.value(p);
        if pv.numel() != y.len() {
            return Err(Error::dimension("asl_loss", &[y.len()], pv.shape()));
        }
        let mut total = T::ZERO;
        for (&pi, &yi) in pv.data().iter().zip(y.iter()) {
            if yi > T::from_f64(0.5) {
                let pc = pi.max(clamp);
                total += -((T::ONE - pi).powf(gamma_pos) * pc.ln());
            } else {
                let qc = (T::ONE - pi).max(clamp);
                total += -(pi.powf(gamma_neg) * qc.ln());
            }
        }
        if reduction == Reduction::Mean {
            total = total / T::from_f64(y.len() as f64);
        }
        let out = Tensor::scalar(total);
        let rg = self.needs(&[p]);
        Ok(self.push(
            out,
            Op::AslLoss {
                p,
                y,
                gamma_pos,
                gamma_neg,
                clamp,
                reduction,
            },
            rg,
        ))
    }

    pub fn macl_loss(
        &mut self,
        features: TensorId,
        centers: TensorId,
        y: Rc<Vec<T>>,
        m: usize,
        n: usize,
        d: usize,
    ) -> Result<TensorId> {
        let fv = self.value(features);
        let cv = self.value(centers);
        if fv.numel() != m * d {
            return Err(Error::dimension("macl features", &[m, d], fv.shape()));
        }
        if cv.numel() != n * d {
            return Err(Error::dimension("macl centers", &[n, d], cv.shape()));
        }
        if y.len() != m * n {
            return Err(Error::dimension("macl labels", &[m, n], &[y.len()]));
        }
        let mut total = T::ZERO;
        for i in 0..m {
            let f = &fv.data()[i * d..(i + 1) * d];
            for j in 0..n {
                if y[i * n + j] > T::from_f64(0.5) {
                    let c = &cv.data()[j * d..(j + 1) * d];
                    let mut sq = T::ZERO;
                    for (&a, &b) in f.iter().zip(c) {
                        let diff = a - b;
                        sq += diff * diff;
                    }
                    total += sq;
                }
            }
        }
        let scale = T::ONE / (T::from_f64(2.0) * T::from_f64((m * n) as f64));
        let out = Tensor::scalar(total * scale);
        let rg = self.needs(&[features, centers]);
        Ok(self.push(
            out,
            Op::MaclLoss {
                features,
                centers,
                y,
                m,
                n,
                d,
            },
            rg,
        ))
    }

    /// `positives[i]` lists the same-view partners of anchor `i` that enter
    /// its numerator; anchors with an empty list are skipped. The denominator
    /// always ranges over every k != i.
    pub fn contrastive_sims(
        &mut self,
        sims: TensorId,
        positives: Rc<Vec<Vec<u32>>>,
        m: usize,
    ) -> Result<TensorId> {
        let sv = self.value(sims);
        if sv.numel() != m * m || positives.len() != m {
            return Err(Error::dimension("contrastive_sims", &[m, m], sv.shape()));
        }
        let mut anchors = 0usize;
        let mut total = T::ZERO;
        for i in 0..m {
            if positives[i].is_empty() {
                continue;
            }
            anchors += 1;
            let row = &sv.data()[i * m..(i + 1) * m];
            let lse = log_sum_exp_excluding(row, i);
            let mut anchor_loss = T::ZERO;
            for &j in &positives[i] {
                anchor_loss += lse - row[j as usize];
            }
            total += anchor_loss / T::from_f64(positives[i].len() as f64);
        }
        let value = if anchors == 0 {
            T::ZERO
        } else {
            total / T::from_f64(anchors as f64)
        };
        let out = Tensor::scalar(value);
        let rg = self.needs(&[sims]);
        Ok(self.push(out, Op::ContrastiveSims { sims, positives, m }, rg))
    }

    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        labels: Rc<Vec<u32>>,
        m: usize,
        k: usize,
    ) -> Result<TensorId> {
        let lv = self.value(logits);
        if lv.numel() != m * k || labels.len() != m {
            return Err(Error::dimension("cross_entropy", &[m, k], lv.shape()));
        }
        let mut total = T::ZERO;
        for i in 0..m {
            let row = &lv.data()[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            total += lse - row[labels[i] as usize];
        }
        let out = Tensor::scalar(total / T::from_f64(m as f64));
        let rg = self.needs(&[logits]);
        Ok(self.push(out, Op::CrossEntropyMean { logits, labels, m, k }, rg))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(TensorId, T)>) -> Result<TensorId> {
        let mut total = T::ZERO;
        for &(id, w) in &terms {
            total += self.value(id).item()? * w;
        }
        let rg = self.needs(&terms.iter().map(|&(id, _)| id).collect::<Vec<_>>());
        let out = Tensor::scalar(total);
        Ok(self.push(out, Op::WeightedSum { terms }, rg))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let inv = T::ONE / T::from_f64(xv.numel() as f64);
        let total: T = xv.data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total * inv), Op::MeanAll { x }, rg)
    }

    pub fn dot_const(&mut self, x: TensorId, w: Rc<Vec<T>>) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.numel() != w.len() {
            return Err(Error::dimension("dot_const", &[w.len()], xv.shape()));
        }
        let total: T = xv.data().iter().zip(w.iter()).map(|(&a, &b)| a * b).sum();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::DotConst { x, w }, rg))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: TensorId) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(T::ONE));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let grad_out = grads[id].clone().unwrap();
            self.backprop_node(id, &grad_out, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: TensorId, contribution: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += *c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, grad_out: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let d_in = wv.shape()[0];
                let d_out = wv.shape()[1];
                let rows = xv.numel() / d_in;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::ZERO; rows * d_in];
                    matmul_bt_acc(grad_out.data(), wv.data(), rows, d_out, d_in, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::ZERO; d_in * d_out];
                    matmul_at_acc(xv.data(), grad_out.data(), rows, d_in, d_out, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(&[d_in, d_out], dw).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; d_out];
                    for r in 0..rows {
                        let g = &grad_out.data()[r * d_out..(r + 1) * d_out];
                        for (dbv, &gv) in db.iter_mut().zip(g) {
                            *dbv += gv;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[d_out], db).unwrap());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = gv.numel();
                let rows = xv.numel() / d;
                let inv_d = T::ONE / T::from_f64(d as f64);
                let mut dx = vec![T::ZERO; xv.numel()];
                let mut dgamma = vec![T::ZERO; d];
                let mut dbeta = vec![T::ZERO; d];
                for r in 0..rows {
                    let xs = &xv.data()[r * d..(r + 1) * d];
                    let gs = &grad_out.data()[r * d..(r + 1) * d];
                    let mean = xs.iter().copied().sum::<T>() * inv_d;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let inv_std = T::ONE / (var + *eps).sqrt();
                    // xh = normalized input, g = gamma .* dy
                    let mut mean_g = T::ZERO;
                    let mut mean_gxh = T::ZERO;
                    for j in 0..d {
                        let xh = (xs[j] - mean) * inv_std;
                        let g = gv.data()[j] * gs[j];
                        mean_g += g;
                        mean_gxh += g * xh;
                        dgamma[j] += gs[j] * xh;
                        dbeta[j] += gs[j];
                    }
                    mean_g = mean_g * inv_d;
                    mean_gxh = mean_gxh * inv_d;
                    let dst = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xh = (xs[j] - mean) * inv_std;
                        let g = gv.data()[j] * gs[j];
                        dst[j] = (g - mean_g - xh * mean_gxh) * inv_std;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if self.nodes[gamma.0].requires_grad {
                    self.accumulate(grads, *gamma, Tensor::new(&[d], dgamma).unwrap());
                }
                if self.nodes[beta.0].requires_grad {
                    self.accumulate(grads, *beta, Tensor::new(&[d], dbeta).unwrap());
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&xi, &g)| g * gelu_grad_scalar(xi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[id].value;
                let data = yv
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&p, &g)| g * p * (T::ONE - p))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(yv.shape(), data).unwrap());
            }
            Op::Softmax { x } => {
                let pv = &self.nodes[id].value;
                let d = pv.shape().last().copied().unwrap();
                let rows = pv.numel() / d;
                let mut dx = vec![T::ZERO; pv.numel()];
                for r in 0..rows {
                    let p = &pv.data()[r * d..(r + 1) * d];
                    let g = &grad_out.data()[r * d..(r + 1) * d];
                    let dot: T = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
                    let dst = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dst[j] = p[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(pv.shape(), dx).unwrap());
            }
            Op::BatMatMul {
                a,
                b,
                transpose_b,
                batch,
                m,
                k,
                n,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; av.numel()];
                    for g in 0..batch {
                        let go = &grad_out.data()[g * m * n..(g + 1) * m * n];
                        let b_s = &bv.data()[g * k * n..(g + 1) * k * n];
                        let da_s = &mut da[g * m * k..(g + 1) * m * k];
                        if *transpose_b {
                            // out = A B^T with B [n, k]: dA = dOut . B
                            matmul_acc(go, b_s, m, n, k, da_s);
                        } else {
                            // dA = dOut . B^T
                            matmul_bt_acc(go, b_s, m, n, k, da_s);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; bv.numel()];
                    for g in 0..batch {
                        let go = &grad_out.data()[g * m * n..(g + 1) * m * n];
                        let a_s = &av.data()[g * m * k..(g + 1) * m * k];
                        let db_s = &mut db[g * k * n..(g + 1) * k * n];
                        if *transpose_b {
                            // dB = dOut^T . A with dB [n, k]
                            matmul_at_acc(go, a_s, m, n, k, db_s);
                        } else {
                            // dB = A^T . dOut
                            matmul_at_acc(a_s, go, m, k, n, db_s);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::Scale { x, c } => {
                let data = grad_out.data().iter().map(|&g| g * *c).collect();
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, grad_out.clone());
                self.accumulate(grads, *b, grad_out.clone());
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = vec![T::ZERO; xv.numel()];
                for (i, &src) in index.iter().enumerate() {
                    dx[src as usize] += grad_out.data()[i];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::SpatialMean { x, m, s, c } => {
                let (m, s, c) = (*m, *s, *c);
                let inv = T::ONE / T::from_f64(s as f64);
                let mut dx = vec![T::ZERO; m * s * c];
                for mi in 0..m {
                    let g = &grad_out.data()[mi * c..(mi + 1) * c];
                    for si in 0..s {
                        let dst = &mut dx[(mi * s + si) * c..(mi * s + si + 1) * c];
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = gv * inv;
                        }
                    }
                }
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::CellMask { x, mask, m, s, c } => {
                let (m, s, c) = (*m, *s, *c);
                let mut dx = grad_out.data().to_vec();
                for mi in 0..m {
                    for (si, &mv) in mask.iter().enumerate() {
                        let dst = &mut dx[(mi * s + si) * c..(mi * s + si + 1) * c];
                        for v in dst.iter_mut() {
                            *v = *v * mv;
                        }
                    }
                }
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::RowNormalize { x, eps } => {
                let xv = self.value(*x);
                let yv = &self.nodes[id].value;
                let d = xv.shape().last().copied().unwrap();
                let rows = xv.numel() / d;
                let mut dx = vec![T::ZERO; xv.numel()];
                for r in 0..rows {
                    let xs = &xv.data()[r * d..(r + 1) * d];
                    let ys = &yv.data()[r * d..(r + 1) * d];
                    let gs = &grad_out.data()[r * d..(r + 1) * d];
                    let norm = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dst = &mut dx[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot: T = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                        let inv = T::ONE / norm;
                        for j in 0..d {
                            dst[j] = (gs[j] - ys[j] * dot) * inv;
                        }
                    } else {
                        let inv = T::ONE / *eps;
                        for j in 0..d {
                            dst[j] = gs[j] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
            }
            Op::ClampUnit { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&xi, &g)| {
                        if xi > -T::ONE && xi < T::ONE {
                            g
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data).unwrap());
            }
            Op::AddRelBias {
                scores,
                table,
                heads,
                tt,
                index,
            } => {
                self.accumulate(grads, *scores, grad_out.clone());
                if self.nodes[table.0].requires_grad {
                    let tv = self.value(*table);
                    let mut dt = vec![T::ZERO; tv.numel()];
                    let batches = grad_out.numel() / tt;
                    for b in 0..batches {
                        let h = b % heads;
                        let g = &grad_out.data()[b * tt..(b + 1) * tt];
                        for (i, &gv) in g.iter().enumerate() {
                            dt[index[i] as usize * heads + h] += gv;
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(tv.shape(), dt).unwrap());
                }
            }
            Op::AddWindowMask { scores } => {
                self.accumulate(grads, *scores, grad_out.clone());
            }
            Op::AslLoss {
                p,
                y,
                gamma_pos,
                gamma_neg,
                clamp,
                reduction,
            } => {
                let pv = self.value(*p);
                let g0 = grad_out.data()[0];
                let scale = match reduction {
                    Reduction::Sum => g0,
                    Reduction::Mean => g0 / T::from_f64(y.len() as f64),
                };
                let half = T::from_f64(0.5);
                let data = pv
                    .data()
                    .iter()
                    .zip(y.iter())
                    .map(|(&pi, &yi)| {
                        let d = if yi > half {
                            let pc = pi.max(*clamp);
                            let focus = if *gamma_pos == T::ZERO {
                                T::ZERO
                            } else {
                                *gamma_pos * (T::ONE - pi).powf(*gamma_pos - T::ONE) * pc.ln()
                            };
                            let log_part = if pi > *clamp {
                                (T::ONE - pi).powf(*gamma_pos) / pc
                            } else {
                                T::ZERO
                            };
                            focus - log_part
                        } else {
                            let qc = (T::ONE - pi).max(*clamp);
                            let lnq = qc.ln();
                            let focus = if *gamma_neg == T::ZERO || pi == T::ZERO || lnq == T::ZERO
                            {
                                T::ZERO
                            } else {
                                -(*gamma_neg) * pi.powf(*gamma_neg - T::ONE) * lnq
                            };
                            let log_part = if T::ONE - pi > *clamp {
                                pi.powf(*gamma_neg) / qc
                            } else {
                                T::ZERO
                            };
                            focus + log_part
                        };
                        d * scale
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::new(pv.shape(), data).unwrap());
            }
            Op::MaclLoss {
                features,
                centers,
                y,
                m,
                n,
                d,
            } => {
                let (m, n, d) = (*m, *n, *d);
                let fv = self.value(*features);
                let cv = self.value(*centers);
                let scale = grad_out.data()[0] / T::from_f64((m * n) as f64);
                let mut df = vec![T::ZERO; m * d];
                let mut dc = vec![T::ZERO; n * d];
                for i in 0..m {
                    let f = &fv.data()[i * d..(i + 1) * d];
                    for j in 0..n {
                        if y[i * n + j] > T::from_f64(0.5) {
                            let c = &cv.data()[j * d..(j + 1) * d];
                            for k in 0..d {
                                let diff = (f[k] - c[k]) * scale;
                                df[i * d + k] += diff;
                                dc[j * d + k] += -diff;
                            }
                        }
                    }
                }
                if self.nodes[features.0].requires_grad {
                    self.accumulate(grads, *features, Tensor::new(fv.shape(), df).unwrap());
                }
                if self.nodes[centers.0].requires_grad {
                    self.accumulate(grads, *centers, Tensor::new(cv.shape(), dc).unwrap());
                }
            }
            Op::ContrastiveSims { sims, positives, m } => {
                let m = *m;
                let sv = self.value(*sims);
                let anchors = positives.iter().filter(|p| !p.is_empty()).count();
                if anchors == 0 {
                    return;
                }
                let g0 = grad_out.data()[0] / T::from_f64(anchors as f64);
                let mut ds = vec![T::ZERO; m * m];
                for i in 0..m {
                    if positives[i].is_empty() {
                        continue;
                    }
                    let row = &sv.data()[i * m..(i + 1) * m];
                    let weights = softmax_excluding(row, i);
                    let inv_p = T::ONE / T::from_f64(positives[i].len() as f64);
                    let dst = &mut ds[i * m..(i + 1) * m];
                    for (k, item) in dst.iter_mut().enumerate() {
                        if k != i {
                            *item += g0 * weights[k];
                        }
                    }
                    for &j in positives[i].iter() {
                        dst[j as usize] += -g0 * inv_p;
                    }
                }
                self.accumulate(grads, *sims, Tensor::new(sv.shape(), ds).unwrap());
            }
            Op::CrossEntropyMean { logits, labels, m, k } => {
                let (m, k) = (*m, *k);
                let lv = self.value(*logits);
                let g0 = grad_out.data()[0] / T::from_f64(m as f64);
                let mut dl = vec![T::ZERO; m * k];
                for i in 0..m {
                    let row = &lv.data()[i * k..(i + 1) * k];
                    let p = softmax_row(row);
                    let dst = &mut dl[i * k..(i + 1) * k];
                    for j in 0..k {
                        dst[j] = p[j] * g0;
                    }
                    dst[labels[i] as usize] += -g0;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), dl).unwrap());
            }
            Op::WeightedSum { terms } => {
                let g0 = grad_out.data()[0];
                for &(term, w) in terms {
                    self.accumulate(grads, term, Tensor::scalar(g0 * w));
                }
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                let g = grad_out.data()[0] / T::from_f64(xv.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::DotConst { x, w } => {
                let xv = self.value(*x);
                let g = grad_out.data()[0];
                let data = w.iter().map(|&wi| wi * g).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data).unwrap());
            }
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(row[0], T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn log_sum_exp_excluding<T: Real>(row: &[T], skip: usize) -> T {
    let mut max: Option<T> = None;
    for (k, &v) in row.iter().enumerate() {
        if k != skip {
            max = Some(match max {
                Some(m) => m.max(v),
                None => v,
            });
        }
    }
    let max = max.expect("excluded log-sum-exp over empty set");
    let mut sum = T::ZERO;
    for (k, &v) in row.iter().enumerate() {
        if k != skip {
            sum += (v - max).exp();
        }
    }
    max + sum.ln()
}

/// Softmax over `row` with index `skip` forced to zero weight.
fn softmax_excluding<T: Real>(row: &[T], skip: usize) -> Vec<T> {
    let mut max: Option<T> = None;
    for (k, &v) in row.iter().enumerate() {
        if k != skip {
            max = Some(match max {
                Some(m) => m.max(v),
                None => v,
            });
        }
    }
    let max = max.expect("softmax over empty set");
    let mut out = vec![T::ZERO; row.len()];
    let mut sum = T::ZERO;
    for (k, &v) in row.iter().enumerate() {
        if k != skip {
            let e = (v - max).exp();
            out[k] = e;
            sum += e;
        }
    }
    let inv = T::ONE / sum;
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    out
}

fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut out: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    let inv = T::ONE / sum;
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_difference_gradient, max_relative_error, DifferentiableFn};
    use crate::rng::{self, domain};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| lo + (hi - lo) * rng::uniform_f64(rng))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn rand_weights(rng: &mut ChaCha8Rng, n: usize) -> Rc<Vec<f64>> {
        Rc::new((0..n).map(|_| rng::uniform_f64(rng) * 2.0 - 1.0).collect())
    }

    /// Check d(root)/d(x) for a graph built by `build`, where `build` pushes
    /// `x` plus anything else it needs and must end in a scalar.
    fn check_grad(
        x: &Tensor<f64>,
        tol: f64,
        build: impl Fn(&mut Tape<f64>, TensorId) -> TensorId,
    ) {
        let mut tape = Tape::new();
        let vx = tape.var(x.clone());
        let root = build(&mut tape, vx);
        let analytic = tape.backward(root).unwrap().get(vx, x.shape());

        let f = DifferentiableFn::new(
            |probe: &Tensor<f64>| {
                let mut t = Tape::new();
                let v = t.var(probe.clone());
                let r = build(&mut t, v);
                Ok(t.value(r).clone())
            },
            |_: &Tensor<f64>| unreachable!(),
        );
        let numerical = finite_difference_gradient(&f, x, 1e-6).unwrap();
        let err = max_relative_error(&analytic, &numerical).unwrap();
        assert!(err <= tol, "gradient mismatch: max rel err {err}");
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng::derive(101, domain::GRADCHECK, &[1]);
        for _ in 0..5 {
            let x = rand_tensor(&mut r, &[3, 4], -1.5, 1.5);
            let w = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
            let b = rand_tensor(&mut r, &[5], -1.0, 1.0);
            let proj = rand_weights(&mut r, 15);
            // input gradient
            check_grad(&x, 1e-6, |t, vx| {
                let vw = t.constant(w.clone());
                let vb = t.constant(b.clone());
                let y = t.linear(vx, vw, vb).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
            // weight gradient
            check_grad(&w, 1e-6, |t, vw| {
                let vx = t.constant(x.clone());
                let vb = t.constant(b.clone());
                let y = t.linear(vx, vw, vb).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
            // bias gradient
            check_grad(&b, 1e-6, |t, vb| {
                let vx = t.constant(x.clone());
                let vw = t.constant(w.clone());
                let y = t.linear(vx, vw, vb).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng::derive(102, domain::GRADCHECK, &[2]);
        for _ in 0..5 {
            let x = rand_tensor(&mut r, &[4, 6], -2.0, 2.0);
            let gamma = rand_tensor(&mut r, &[6], 0.5, 1.5);
            let beta = rand_tensor(&mut r, &[6], -0.5, 0.5);
            let proj = rand_weights(&mut r, 24);
            check_grad(&x, 1e-5, |t, vx| {
                let vg = t.constant(gamma.clone());
                let vb = t.constant(beta.clone());
                let y = t.layer_norm(vx, vg, vb, 1e-5).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
            check_grad(&gamma, 1e-6, |t, vg| {
                let vx = t.constant(x.clone());
                let vb = t.constant(beta.clone());
                let y = t.layer_norm(vx, vg, vb, 1e-5).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
            check_grad(&beta, 1e-6, |t, vb| {
                let vx = t.constant(x.clone());
                let vg = t.constant(gamma.clone());
                let y = t.layer_norm(vx, vg, vb, 1e-5).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut r = rng::derive(103, domain::GRADCHECK, &[3]);
        for _ in 0..5 {
            let x = rand_tensor(&mut r, &[3, 5], -3.0, 3.0);
            let proj = rand_weights(&mut r, 15);
            check_grad(&x, 1e-6, |t, vx| {
                let y = t.gelu(vx);
                t.dot_const(y, proj.clone()).unwrap()
            });
            check_grad(&x, 1e-6, |t, vx| {
                let y = t.sigmoid(vx);
                t.dot_const(y, proj.clone()).unwrap()
            });
            check_grad(&x, 1e-6, |t, vx| {
                let y = t.scale(vx, -1.7);
                t.dot_const(y, proj.clone()).unwrap()
            });
        }
    }

    #[test]
    fn softmax_gradients() {
        let mut r = rng::derive(104, domain::GRADCHECK, &[4]);
        for _ in 0..5 {
            let x = rand_tensor(&mut r, &[4, 7], -4.0, 4.0);
            let proj = rand_weights(&mut r, 28);
            check_grad(&x, 1e-5, |t, vx| {
                let y = t.softmax(vx).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
        }
    }

    #[test]
    fn bat_matmul_gradients() {
        let mut r = rng::derive(105, domain::GRADCHECK, &[5]);
        for &transpose_b in &[false, true] {
            let (batch, m, k, n) = (3, 2, 4, 3);
            let a = rand_tensor(&mut r, &[batch, m, k], -1.0, 1.0);
            let b_shape = if transpose_b { [batch, n, k] } else { [batch, k, n] };
            let b = rand_tensor(&mut r, &b_shape, -1.0, 1.0);
            let proj = rand_weights(&mut r, batch * m * n);
            check_grad(&a, 1e-6, |t, va| {
                let vb = t.constant(b.clone());
                let y = t.bat_matmul(va, vb, transpose_b, batch, m, k, n).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
            check_grad(&b, 1e-6, |t, vb| {
                let va = t.constant(a.clone());
                let y = t.bat_matmul(va, vb, transpose_b, batch, m, k, n).unwrap();
                t.dot_const(y, proj.clone()).unwrap()
            });
        }
    }

    #[test]
    fn self_matmul_accumulates_both_sides() {
        // sims = R R^T with the same node on both sides; the adjoint must
        // accumulate both contributions.
        let mut r = rng::derive(106, domain::GRADCHECK, &[6]);
        let x = rand_tensor(&mut r, &[1, 4, 3], -1.0, 1.0);
        let proj = rand_weights(&mut r, 16);
        check_grad(&x, 1e-6, |t, vx| {
            let y = t.bat_matmul(vx, vx, true, 1, 4, 3, 4).unwrap();
            t.dot_const(y, proj.clone()).unwrap()
        });
    }

    #[test]
    fn gather_scatter_gradients() {
        let mut r = rng::derive(107, domain::GRADCHECK, &[7]);
        let x = rand_tensor(&mut r, &[6], -1.0, 1.0);
        // non-bijective index exercises the scatter-add
        let index = Rc::new(vec![0u32, 5, 2, 2, 4, 1, 0, 3]);
        let proj = rand_weights(&mut r, 8);
        check_grad(&x, 1e-6, |t, vx| {
            let y = t.gather(vx, index.clone(), &[8]).unwrap();
            t.dot_const(y, proj.clone()).unwrap()
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut r = rng::derive(108, domain::GRADCHECK, &[8]);
        let (m, s, c) = (2, 4, 3);
        let x = rand_tensor(&mut r, &[m, s, c], -1.0, 1.0);
        let proj_mc = rand_weights(&mut r, m * c);
        check_grad(&x, 1e-6, |t, vx| {
            let y = t.spatial_mean(vx, m, s, c).unwrap();
            t.dot_const(y, proj_mc.clone()).unwrap()
        });
        let mask = Rc::new(vec![1.0, 0.0, 1.0, 0.0]);
        let proj_msc = rand_weights(&mut r, m * s * c);
        check_grad(&x, 1e-6, |t, vx| {
            let y = t.cell_mask(vx, mask.clone(), m, s, c).unwrap();
            t.dot_const(y, proj_msc.clone()).unwrap()
        });
    }

    #[test]
    fn masked_cells_get_exactly_zero_gradient() {
        let mut r = rng::derive(109, domain::GRADCHECK, &[9]);
        let (m, s, c) = (2, 4, 3);
        let x = rand_tensor(&mut r, &[m, s, c], -1.0, 1.0);
        let mask = Rc::new(vec![1.0, 0.0, 1.0, 0.0]);
        let mut tape = Tape::new();
        let vx = tape.var(x.clone());
        let y = tape.cell_mask(vx, mask, m, s, c).unwrap();
        let root = tape.mean_all(y);
        let g = tape.backward(root).unwrap().get(vx, x.shape());
        for mi in 0..m {
            for si in [1usize, 3] {
                for ci in 0..c {
                    assert_eq!(g.data()[(mi * s + si) * c + ci], 0.0);
                }
            }
        }
    }

    #[test]
    fn row_normalize_and_clamp_gradients() {
        let mut r = rng::derive(110, domain::GRADCHECK, &[10]);
        let x = rand_tensor(&mut r, &[3, 5], 0.2, 1.5);
        let proj = rand_weights(&mut r, 15);
        check_grad(&x, 1e-5, |t, vx| {
            let y = t.row_normalize(vx, 1e-12).unwrap();
            t.dot_const(y, proj.clone()).unwrap()
        });
        // values straddling the clamp boundary: inside passes, outside zero
        let x = Tensor::from_f64_slice(&[4], &[-1.8, -0.4, 0.6, 1.9]).unwrap();
        let proj = rand_weights(&mut r, 4);
        check_grad(&x, 1e-6, |t, vx| {
            let y = t.clamp_unit(vx);
            t.dot_const(y, proj.clone()).unwrap()
        });
    }

    #[test]
    fn rel_bias_gradients() {
        let mut r = rng::derive(111, domain::GRADCHECK, &[11]);
        let heads = 2;
        let tt = 4; // 2x2 window
        let batches = 6; // g = 3 window-instances x 2 heads
        let scores = rand_tensor(&mut r, &[batches, tt], -1.0, 1.0);
        let table = rand_tensor(&mut r, &[9, heads], -0.5, 0.5);
        let index = Rc::new(vec![4u32, 3, 1, 0]);
        let proj = rand_weights(&mut r, batches * tt);
        check_grad(&scores, 1e-6, |t, vs| {
            let vt = t.constant(table.clone());
            let y = t.add_rel_bias(vs, vt, heads, tt, index.clone()).unwrap();
            t.dot_const(y, proj.clone()).unwrap()
        });
        check_grad(&table, 1e-6, |t, vt| {
            let vs = t.constant(scores.clone());
            let y = t.add_rel_bias(vs, vt, heads, tt, index.clone()).unwrap();
            t.dot_const(y, proj.clone()).unwrap()
        });
    }

    #[test]
    fn asl_loss_gradients() {
        let mut r = rng::derive(112, domain::GRADCHECK, &[12]);
        let y: Rc<Vec<f64>> = Rc::new(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        for &(gp, gn) in &[(0.0, 1.0), (1.0, 2.0), (0.0, 0.0), (2.0, 4.0)] {
            for &reduction in &[Reduction::Sum, Reduction::Mean] {
                let p = rand_tensor(&mut r, &[2, 3], 0.05, 0.95);
                check_grad(&p, 1e-6, |t, vp| {
                    t.asl_loss(vp, y.clone(), gp, gn, 1e-8, reduction).unwrap()
                });
            }
        }
    }

    #[test]
    fn asl_through_sigmoid_gradients() {
        let mut r = rng::derive(113, domain::GRADCHECK, &[13]);
        let y: Rc<Vec<f64>> = Rc::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let logits = rand_tensor(&mut r, &[2, 3], -3.0, 3.0);
        check_grad(&logits, 1e-6, |t, vl| {
            let p = t.sigmoid(vl);
            t.asl_loss(p, y.clone(), 0.0, 1.0, 1e-8, Reduction::Mean)
                .unwrap()
        });
    }

    #[test]
    fn macl_loss_gradients() {
        let mut r = rng::derive(114, domain::GRADCHECK, &[14]);
        let (m, n, d) = (3, 4, 5);
        let y: Rc<Vec<f64>> = Rc::new(
            (0..m * n)
                .map(|_| if rng::uniform_f64(&mut r) < 0.5 { 1.0 } else { 0.0 })
                .collect(),
        );
        let f = rand_tensor(&mut r, &[m, d], -1.0, 1.0);
        let c = rand_tensor(&mut r, &[n, d], -1.0, 1.0);
        check_grad(&f, 1e-6, |t, vf| {
            let vc = t.constant(c.clone());
            t.macl_loss(vf, vc, y.clone(), m, n, d).unwrap()
        });
        check_grad(&c, 1e-6, |t, vc| {
            let vf = t.constant(f.clone());
            t.macl_loss(vf, vc, y.clone(), m, n, d).unwrap()
        });
    }

    #[test]
    fn contrastive_sims_gradients() {
        let mut r = rng::derive(115, domain::GRADCHECK, &[15]);
        let m = 5;
        // views (0, 0, 1, 0, 1): anchors 0,1,3 pull each other, 2 and 4 pair up
        let positives: Rc<Vec<Vec<u32>>> = Rc::new(vec![
            vec![1, 3],
            vec![0, 3],
            vec![4],
            vec![0, 1],
            vec![2],
        ]);
        let sims = rand_tensor(&mut r, &[m, m], -0.9, 0.9);
        check_grad(&sims, 1e-6, |t, vs| {
            t.contrastive_sims(vs, positives.clone(), m).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut r = rng::derive(116, domain::GRADCHECK, &[16]);
        let (m, k) = (4, 3);
        let labels: Rc<Vec<u32>> = Rc::new(vec![0, 2, 1, 2]);
        let logits = rand_tensor(&mut r, &[m, k], -2.0, 2.0);
        check_grad(&logits, 1e-6, |t, vl| {
            t.cross_entropy_mean(vl, labels.clone(), m, k).unwrap()
        });
    }

    #[test]
    fn composite_graph_gradients() {
        // residual + layer norm + linear + gelu chain, like one backbone block
        let mut r = rng::derive(117, domain::GRADCHECK, &[17]);
        let x = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let gamma = rand_tensor(&mut r, &[4], 0.8, 1.2);
        let beta = rand_tensor(&mut r, &[4], -0.1, 0.1);
        let w = rand_tensor(&mut r, &[4, 4], -0.5, 0.5);
        let b = rand_tensor(&mut r, &[4], -0.2, 0.2);
        check_grad(&x, 1e-5, |t, vx| {
            let vg = t.constant(gamma.clone());
            let vbt = t.constant(beta.clone());
            let vw = t.constant(w.clone());
            let vb = t.constant(b.clone());
            let normed = t.layer_norm(vx, vg, vbt, 1e-5).unwrap();
            let lin = t.linear(normed, vw, vb).unwrap();
            let act = t.gelu(lin);
            let res = t.add(vx, act).unwrap();
            t.mean_all(res)
        });
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::scalar(1.0));
        let b = tape.var(Tensor::scalar(2.0));
        let c = tape.var(Tensor::scalar(3.0));
        let total = tape
            .weighted_sum(vec![(a, 1.0), (b, 0.5), (c, 1.0)])
            .unwrap();
        assert_eq!(tape.value(total).item().unwrap(), 5.0);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(b, &[1]).data()[0], 0.5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add(x, c).unwrap();
        let root = tape.mean_all(y);
        let mut grads = tape.backward(root).unwrap();
        assert!(grads.take(c).is_none());
        assert_eq!(grads.get(x, &[1]).data()[0], 1.0);
    }
}
