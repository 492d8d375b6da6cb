//! Minimal reverse-mode differentiation over dense `f64` buffers.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! intermediates its backward rule needs. [`Graph::backward`] then walks the
//! record in reverse and accumulates vector-Jacobian products. Each operation
//! carries a hand-written backward rule; there is no symbolic machinery.
//!
//! Tensors are row-major. Operations that act "per row" treat the last
//! dimension as the row length.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.len() / self.cols()
        }
    }
}

/// Sparse row mixing: output row `o` is `sum_k w_k * input_row[i_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMap {
    pub n_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    pub fn apply(&self, x: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * c];
        for (dst, row) in out.chunks_exact_mut(c).zip(&self.rows) {
            for &(i, w) in row {
                for (d, v) in dst.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                    *d += w * v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Gather { x: Var, idx: Arc<Vec<usize>> },
    RowMix { x: Var, map: Arc<RowMap> },
    Attention { qkv: Var, bias: Var, heads: usize, tokens: usize, probs: Vec<f64> },
    MeanRows(Var),
    ConcatCols(Var, Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    SiLog { pred: Var, target: Arc<Vec<f64>>, mask: Arc<Vec<bool>>, lambda: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Named parameter tensors with a stable insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> usize {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
            return i;
        }
        let i = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.id(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero-filled gradient buffers matching every parameter.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }
}

fn check_finite(what: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or infinite values")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (receives a gradient but is not a parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.by_id(id).clone(), Op::Param);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// `x W (+ b)` over the last dimension of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape.len() != 2 || xv.cols() != wv.shape[0] {
            return Err(Error::Contract(format!(
                "linear: input width {} does not match weight {:?}",
                xv.cols(),
                wv.shape
            )));
        }
        let (n, k, m) = (xv.rows(), wv.shape[0], wv.shape[1]);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::Contract(format!("linear: bias length {} != {m}", bv.len())));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(&bv.data);
            }
        }
        for i in 0..n {
            let xr = &xv.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &xip) in xr.iter().enumerate() {
                if xip == 0.0 {
                    continue;
                }
                for (o, wv) in orow.iter_mut().zip(&wv.data[p * m..(p + 1) * m]) {
                    *o += xip * wv;
                }
            }
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = m;
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Contract(format!("add: {:?} vs {:?}", av.shape, bv.shape)));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Contract(format!("layer_norm: affine size != {c}")));
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &xv.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for (h, v) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
        }
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Gelu(x))
    }

    /// Element gather: `out[i] = x[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != idx.len() || idx.iter().any(|&i| i >= xv.len()) {
            return Err(Error::Contract(format!(
                "gather: {} indices into {} values as {shape:?}",
                idx.len(),
                xv.len()
            )));
        }
        let data = idx.iter().map(|&i| xv.data[i]).collect();
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, idx }))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        self.gather(x, Arc::new((0..n).collect()), shape)
    }

    pub fn row_mix(&mut self, x: Var, map: Arc<RowMap>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.rows() != map.n_in || map.rows.iter().flatten().any(|&(i, _)| i >= map.n_in) {
            return Err(Error::Contract(format!(
                "row_mix: map expects {} rows, input has {}",
                map.n_in,
                xv.rows()
            )));
        }
        let data = map.apply(&xv.data, c);
        let shape = vec![map.rows.len(), c];
        Ok(self.push(Tensor { shape, data }, Op::RowMix { x, map }))
    }

    /// Multi-head attention inside consecutive groups of `tokens` rows.
    ///
    /// `qkv` is `[n_windows * tokens, 3 c]` (queries, keys, values side by
    /// side); `bias` holds `tokens x tokens` logits added to every head of
    /// every window. Returns `[n_windows * tokens, c]`.
    pub fn window_attention(&mut self, qkv: Var, bias: Var, heads: usize, tokens: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let three_c = qv.cols();
        if three_c % 3 != 0 || heads == 0 || (three_c / 3) % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: width {three_c} is not 3 x (multiple of {heads} heads)"
            )));
        }
        if tokens == 0 || qv.rows() % tokens != 0 {
            return Err(Error::Contract(format!(
                "attention: {} rows are not whole windows of {tokens}",
                qv.rows()
            )));
        }
        let bv = self.value(bias);
        if bv.len() != tokens * tokens {
            return Err(Error::Contract(format!(
                "attention: bias has {} entries, window needs {}",
                bv.len(),
                tokens * tokens
            )));
        }
        check_finite("attention input", &qv.data)?;
        check_finite("attention bias", &bv.data)?;
        let c = three_c / 3;
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let n_win = qv.rows() / tokens;
        let mut probs = vec![0.0; n_win * heads * tokens * tokens];
        let mut out = vec![0.0; qv.rows() * c];
        let q = &qv.data;
        let bias_d = &bv.data;
        let mut row = vec![0.0; tokens];
        for w in 0..n_win {
            for h in 0..heads {
                let base = (w * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &q[(w * tokens + i) * three_c + h * d..][..d];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..tokens {
                        let kj = &q[(w * tokens + j) * three_c + c + h * d..][..d];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                            + bias_d[i * tokens + j];
                        row[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    let p = &mut probs[base + i * tokens..base + (i + 1) * tokens];
                    for (pj, r) in p.iter_mut().zip(&row) {
                        *pj = r / z;
                    }
                    let orow = &mut out[(w * tokens + i) * c + h * d..][..d];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &q[(w * tokens + j) * three_c + 2 * c + h * d..][..d];
                        for (o, v) in orow.iter_mut().zip(vj) {
                            *o += pj * v;
                        }
                    }
                }
            }
        }
        let shape = vec![qv.rows(), c];
        Ok(self.push(Tensor { shape, data: out }, Op::Attention { qkv, bias, heads, tokens, probs }))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for row in xv.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor { shape: vec![1, c], data: out }, Op::MeanRows(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Contract(format!(
                "concat: {} rows vs {} rows",
                av.rows(),
                bv.rows()
            )));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data.chunks_exact(ca).zip(bv.data.chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let shape = vec![av.rows(), ca + cb];
        Ok(self.push(Tensor { shape, data }, Op::ConcatCols(a, b)))
    }

    /// Softmax cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(Error::Contract(format!("label {label} >= {} classes", lv.len())));
        }
        let mx = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lv.data.iter().map(|v| (v - mx).exp()).sum();
        let probs: Vec<f64> = lv.data.iter().map(|v| (v - mx).exp() / z).collect();
        let loss = mx + z.ln() - lv.data[label];
        Ok(self.push(Tensor { shape: vec![1], data: vec![loss] }, Op::CrossEntropy { logits, label, probs }))
    }

    /// Scale-invariant log loss of `pred` against a constant target.
    pub fn si_log(
        &mut self,
        pred: Var,
        target: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
        lambda: f64,
    ) -> Result<Var> {
        let loss = si_log_value(&self.value(pred).data, &target, &mask, lambda)?;
        Ok(self.push(Tensor { shape: vec![1], data: vec![loss] }, Op::SiLog { pred, target, mask, lambda }))
    }

    /// Largest deviation from 1 of any attention row sum recorded so far.
    pub fn max_softmax_row_error(&self) -> f64 {
        let mut worst = 0.0_f64;
        for node in &self.nodes {
            if let Op::Attention { probs, tokens, .. } = &node.op {
                for row in probs.chunks_exact(*tokens) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
        worst
    }

    /// Number of attention rows recorded so far.
    pub fn attention_rows(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Attention { probs, tokens, .. } => probs.len() / tokens,
                _ => 0,
            })
            .sum()
    }

    /// Attention probabilities of an attention node, `[window][head][i][j]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of bound parameters, keyed by parameter id.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> = self
            .bound
            .iter()
            .map(|(&id, &v)| {
                let g = grads.get(v).map_or_else(|| vec![0.0; self.value(v).len()], <[f64]>::to_vec);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backward_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, g: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), wv.shape[0], wv.shape[1]);
                let mut gx = vec![0.0; n * k];
                let mut gw = vec![0.0; k * m];
                for i in 0..n {
                    let gyr = &gy[i * m..(i + 1) * m];
                    let xr = &xv.data[i * k..(i + 1) * k];
                    for p in 0..k {
                        let wr = &wv.data[p * m..(p + 1) * m];
                        gx[i * k + p] = gyr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        let xip = xr[p];
                        if xip != 0.0 {
                            for (g, a) in gw[p * m..(p + 1) * m].iter_mut().zip(gyr) {
                                *g += xip * a;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; m];
                    for row in gy.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
                    }
                    acc(*b, gb);
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let g = &self.value(*gamma).data;
                let c = g.len();
                let n = rstd.len();
                let mut gx = vec![0.0; n * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..n {
                    let gyr = &gy[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let dxh = gyr[j] * g[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                        gg[j] += gyr[j] * xh[j];
                        gb[j] += gyr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        gx[i * c + j] = rstd[i] * (gyr[j] * g[j] - m1 - xh[j] * m2);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                let gx = xv
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| {
                        let u = GELU_K * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&i, g) in idx.iter().zip(gy) {
                    gx[i] += g;
                }
                acc(*x, gx);
            }
            Op::RowMix { x, map } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                for (o, row) in map.rows.iter().enumerate() {
                    let gr = &gy[o * c..(o + 1) * c];
                    for &(i, w) in row {
                        for (d, g) in gx[i * c..(i + 1) * c].iter_mut().zip(gr) {
                            *d += w * g;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Attention { qkv, bias, heads, tokens, probs } => {
                let (heads, t) = (*heads, *tokens);
                let qv = self.value(*qkv);
                let three_c = qv.cols();
                let c = three_c / 3;
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let q = &qv.data;
                let n_win = qv.rows() / t;
                let mut gq = vec![0.0; q.len()];
                let mut gbias = vec![0.0; t * t];
                let mut dp = vec![0.0; t];
                for w in 0..n_win {
                    for h in 0..heads {
                        let base = (w * heads + h) * t * t;
                        for i in 0..t {
                            let go = &gy[(w * t + i) * c + h * d..][..d];
                            let p = &probs[base + i * t..base + (i + 1) * t];
                            for j in 0..t {
                                let vrow = (w * t + j) * three_c + 2 * c + h * d;
                                dp[j] = go.iter().zip(&q[vrow..vrow + d]).map(|(a, b)| a * b).sum();
                                for (gv, g) in gq[vrow..vrow + d].iter_mut().zip(go) {
                                    *gv += p[j] * g;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qrow = (w * t + i) * three_c + h * d;
                            for j in 0..t {
                                let ds = p[j] * (dp[j] - dot);
                                gbias[i * t + j] += ds;
                                let krow = (w * t + j) * three_c + c + h * d;
                                for e in 0..d {
                                    gq[qrow + e] += ds * scale * q[krow + e];
                                    gq[krow + e] += ds * scale * q[qrow + e];
                                }
                            }
                        }
                    }
                }
                acc(*qkv, gq);
                acc(*bias, gbias);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let mut gx = vec![0.0; n * c];
                for row in gx.chunks_exact_mut(c) {
                    for (d, g) in row.iter_mut().zip(gy) {
                        *d = g / n as f64;
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in gy.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut g: Vec<f64> = probs.iter().map(|p| p * gy[0]).collect();
                g[*label] -= gy[0];
                acc(*logits, g);
            }
            Op::SiLog { pred, target, mask, lambda } => {
                let p = &self.value(*pred).data;
                let loss = node.value.data[0];
                let mut g = vec![0.0; p.len()];
                if loss > 0.0 {
                    let n = mask.iter().filter(|&&m| m).count() as f64;
                    let s: f64 = p
                        .iter()
                        .zip(target.iter())
                        .zip(mask.iter())
                        .filter(|(_, &m)| m)
                        .map(|((a, b), _)| a - b)
                        .sum();
                    for (i, gi) in g.iter_mut().enumerate() {
                        if mask[i] {
                            let di = p[i] - target[i];
                            *gi = gy[0] * (di / n - lambda * s / (n * n)) / loss;
                        }
                    }
                }
                acc(*pred, g);
            }
        }
    }
}

/// `sqrt(mean(d^2) - lambda * mean(d)^2)` over masked entries, `d = pred - target`.
pub fn si_log_value(pred: &[f64], target: &[f64], mask: &[bool], lambda: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Contract(format!(
            "si-log: pred {}, target {}, mask {} lengths differ",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            let d = p - t;
            n += 1;
            s += d;
            s2 += d * d;
        }
    }
    if n == 0 {
        return Err(Error::Contract("si-log: empty mask".into()));
    }
    let n = n as f64;
    let radicand = s2 / n - lambda * s * s / (n * n);
    if radicand < -1e-12 {
        return Err(Error::Domain(format!("si-log: negative radicand {radicand}")));
    }
    Ok(radicand.max(0.0).sqrt())
}
