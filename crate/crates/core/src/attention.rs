//! Polar transformer building blocks: token embedding, angular relative
//! position bias, azimuth-windowed attention, merging and expanding.
//!
//! Token maps are radius-major: token `(r, p)` lives at row `r * n_phi + p`.
//! Every operation has a graph form (used by the model so that gradients
//! flow) and most have a plain form that builds a throwaway graph.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, RowMap, Tensor, Var};
use crate::error::{Error, Result};

pub const MLP_RATIO: usize = 4;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap {
    pub n_r: usize,
    pub n_phi: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl TokenMap {
    pub fn new(n_r: usize, n_phi: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_r * n_phi * c {
            return Err(Error::Contract(format!(
                "token map ({n_r}, {n_phi}, {c}) cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token map".into()));
        }
        Ok(Self { n_r, n_phi, c, data })
    }

    pub fn zeros(n_r: usize, n_phi: usize, c: usize) -> Self {
        Self { n_r, n_phi, c, data: vec![0.0; n_r * n_phi * c] }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_r * self.n_phi
    }

    pub fn token(&self, r: usize, p: usize) -> &[f64] {
        let i = (r * self.n_phi + p) * self.c;
        &self.data[i..i + self.c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.n_tokens(), self.c], data: self.data.clone() }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_r, self.n_phi, self.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Azimuth windows, 1x4 azimuth merging.
    A,
    /// Radius-azimuth windows, 2x2 merging.
    Ra,
}

impl Variant {
    pub fn merge_rule(self) -> MergeRule {
        match self {
            Variant::A => MergeRule::Azimuth4,
            Variant::Ra => MergeRule::RadiusAzimuth2x2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergeRule {
    Azimuth4,
    RadiusAzimuth2x2,
}

impl MergeRule {
    /// Merge factors along (radius, azimuth).
    pub fn factors(self) -> (usize, usize) {
        match self {
            MergeRule::Azimuth4 => (1, 4),
            MergeRule::RadiusAzimuth2x2 => (2, 2),
        }
    }

    /// Offsets of the four merged neighbours, in concatenation order.
    fn offsets(self) -> [(usize, usize); 4] {
        match self {
            MergeRule::Azimuth4 => [(0, 0), (0, 1), (0, 2), (0, 3)],
            MergeRule::RadiusAzimuth2x2 => [(0, 0), (1, 0), (0, 1), (1, 1)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub m_r: usize,
    pub m_phi: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(m_r: usize, m_phi: usize, shift: usize) -> Result<Self> {
        if m_r == 0 || m_phi == 0 {
            return Err(Error::Contract("window sides must be positive".into()));
        }
        Ok(Self { m_r, m_phi, shift })
    }

    /// Window for a stage of `(n_r, n_phi)` tokens with a budget of `m * m`
    /// tokens. Shifted windows move by half the azimuth width, unless the
    /// window already spans the whole azimuth.
    pub fn for_stage(variant: Variant, n_r: usize, n_phi: usize, m: usize, shifted: bool) -> Self {
        let (m_r, m_phi) = match variant {
            Variant::A => {
                let m_phi = (m * m).min(n_phi);
                ((m * m / m_phi).max(1).min(n_r), m_phi)
            }
            Variant::Ra => {
                let m_r = m.min(n_r);
                (m_r, (m * m / m_r).max(1).min(n_phi))
            }
        };
        let shift = if shifted && m_phi < n_phi { m_phi / 2 } else { 0 };
        Self { m_r, m_phi, shift }
    }

    pub fn tokens(&self) -> usize {
        self.m_r * self.m_phi
    }

    pub fn check(&self, n_r: usize, n_phi: usize) -> Result<()> {
        if n_r % self.m_r != 0 || n_phi % self.m_phi != 0 {
            return Err(Error::Contract(format!(
                "window ({}, {}) does not tile a ({n_r}, {n_phi}) map",
                self.m_r, self.m_phi
            )));
        }
        Ok(())
    }

    pub fn unshifted(&self) -> Self {
        Self { shift: 0, ..*self }
    }
}

/// Learnable `(a, b)` pairs per relative offset, rows indexed by `d + m - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosTables {
    pub m_r: usize,
    pub m_phi: usize,
    pub theta: Vec<[f64; 2]>,
    pub phi: Vec<[f64; 2]>,
}

impl RelPosTables {
    pub fn zeros(window: &WindowSpec) -> Self {
        Self {
            m_r: window.m_r,
            m_phi: window.m_phi,
            theta: vec![[0.0; 2]; 2 * window.m_r - 1],
            phi: vec![[0.0; 2]; 2 * window.m_phi - 1],
        }
    }

    pub fn check(&self, window: &WindowSpec) -> Result<()> {
        if self.m_r != window.m_r
            || self.m_phi != window.m_phi
            || self.theta.len() != 2 * self.m_r - 1
            || self.phi.len() != 2 * self.m_phi - 1
        {
            return Err(Error::Contract(format!(
                "relpos tables ({}, {}) do not fit window ({}, {})",
                self.theta.len(),
                self.phi.len(),
                window.m_r,
                window.m_phi
            )));
        }
        Ok(())
    }

    fn flat(rows: &[[f64; 2]]) -> Tensor {
        Tensor { shape: vec![rows.len(), 2], data: rows.iter().flatten().copied().collect() }
    }

    pub fn theta_tensor(&self) -> Tensor {
        Self::flat(&self.theta)
    }

    pub fn phi_tensor(&self) -> Tensor {
        Self::flat(&self.phi)
    }
}

/// Token center angles: `theta_i = theta_max (i - 0.5) / n_r` and
/// `phi_i = 2 pi (i - 0.5) / n_phi`, for `i = 1..=n`.
pub fn token_angles(n_r: usize, n_phi: usize, theta_max: f64) -> (Vec<f64>, Vec<f64>) {
    let theta = (0..n_r).map(|i| theta_max * (i as f64 + 0.5) / n_r as f64).collect();
    let phi = (0..n_phi).map(|i| TAU * (i as f64 + 0.5) / n_phi as f64).collect();
    (theta, phi)
}

/// Sparse maps from the flattened tables to the `T x T` bias entries.
///
/// Entry `(i, j)` of the radial map picks `a` and `b` of row `dr + m_r - 1`
/// weighted by `sin` and `cos` of the angle difference between the tokens'
/// radial positions; the azimuth map does the same along azimuth.
pub fn relpos_maps(window: &WindowSpec, theta: &[f64], phi: &[f64]) -> Result<(RowMap, RowMap)> {
    let (mr, mp) = (window.m_r, window.m_phi);
    if theta.len() < mr || phi.len() < mp {
        return Err(Error::Contract(format!(
            "window ({mr}, {mp}) needs at least that many token angles, got ({}, {})",
            theta.len(),
            phi.len()
        )));
    }
    let t = mr * mp;
    let mut rows_t = Vec::with_capacity(t * t);
    let mut rows_p = Vec::with_capacity(t * t);
    for i in 0..t {
        let (ri, pi) = (i / mp, i % mp);
        for j in 0..t {
            let (rj, pj) = (j / mp, j % mp);
            let kt = 2 * (ri + mr - 1 - rj);
            let dt = theta[ri] - theta[rj];
            rows_t.push(vec![(kt, dt.sin()), (kt + 1, dt.cos())]);
            let kp = 2 * (pi + mp - 1 - pj);
            let dp = phi[pi] - phi[pj];
            rows_p.push(vec![(kp, dp.sin()), (kp + 1, dp.cos())]);
        }
    }
    Ok((
        RowMap { n_in: 2 * (2 * mr - 1), rows: rows_t },
        RowMap { n_in: 2 * (2 * mp - 1), rows: rows_p },
    ))
}

/// Bias matrix `B_theta + B_phi` for one window, row-major `T x T`.
pub fn relpos_bias(tables: &RelPosTables, window: &WindowSpec, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
    tables.check(window)?;
    let (mt, mp) = relpos_maps(window, theta, phi)?;
    let bt = mt.apply(&tables.theta_tensor().data, 1);
    let bp = mp.apply(&tables.phi_tensor().data, 1);
    Ok(bt.iter().zip(&bp).map(|(a, b)| a + b).collect())
}

/// Cyclic azimuth rotation: output token `(r, p)` is input `(r, p - offset)`.
pub fn shift_azimuth(map: &TokenMap, offset: i64) -> TokenMap {
    let n = map.n_phi as i64;
    let mut out = TokenMap::zeros(map.n_r, map.n_phi, map.c);
    for r in 0..map.n_r {
        for p in 0..map.n_phi {
            let src = (p as i64 - offset).rem_euclid(n) as usize;
            let d = (r * map.n_phi + p) * map.c;
            out.data[d..d + map.c].copy_from_slice(map.token(r, src));
        }
    }
    out
}

/// Token order that lists windows one after another. Entry `k` is the
/// source token of window-major position `k`.
pub fn window_order(n_r: usize, n_phi: usize, window: &WindowSpec) -> Result<Vec<usize>> {
    window.check(n_r, n_phi)?;
    let (mr, mp) = (window.m_r, window.m_phi);
    let mut order = Vec::with_capacity(n_r * n_phi);
    for wr in 0..n_r / mr {
        for wp in 0..n_phi / mp {
            for lr in 0..mr {
                for lp in 0..mp {
                    let r = wr * mr + lr;
                    let p = (wp * mp + lp + window.shift) % n_phi;
                    order.push(r * n_phi + p);
                }
            }
        }
    }
    Ok(order)
}

fn element_index(tokens: &[usize], c: usize) -> Arc<Vec<usize>> {
    Arc::new(tokens.iter().flat_map(|&t| t * c..(t + 1) * c).collect())
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (k, &t) in order.iter().enumerate() {
        inv[t] = k;
    }
    inv
}

/// Truncated normal (cut at two standard deviations).
pub fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

pub fn init_linear<R: Rng>(store: &mut ParamStore, prefix: &str, n_in: usize, n_out: usize, bias: bool, rng: &mut R) {
    let w = Tensor { shape: vec![n_in, n_out], data: trunc_normal(rng, n_in * n_out, INIT_STD) };
    store.insert(&format!("{prefix}.weight"), w);
    if bias {
        store.insert(&format!("{prefix}.bias"), Tensor::zeros(vec![n_out]));
    }
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(&format!("{prefix}.weight"), Tensor { shape: vec![c], data: vec![1.0; c] });
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(vec![c]));
}

pub fn init_embed<R: Rng>(store: &mut ParamStore, prefix: &str, n_in: usize, c: usize, rng: &mut R) {
    init_linear(store, prefix, n_in, c, true, rng);
}

pub fn init_attention<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) {
    init_linear(store, &format!("{prefix}.qkv"), c, 3 * c, true, rng);
    init_linear(store, &format!("{prefix}.proj"), c, c, true, rng);
}

pub fn init_relpos(store: &mut ParamStore, prefix: &str, window: &WindowSpec) {
    let t = RelPosTables::zeros(window);
    store.insert(&format!("{prefix}.theta"), t.theta_tensor());
    store.insert(&format!("{prefix}.phi"), t.phi_tensor());
}

pub fn init_block<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, window: &WindowSpec, rng: &mut R) {
    init_norm(store, &format!("{prefix}.norm1"), c);
    init_attention(store, &format!("{prefix}.attn"), c, rng);
    init_relpos(store, &format!("{prefix}.relpos"), window);
    init_norm(store, &format!("{prefix}.norm2"), c);
    init_linear(store, &format!("{prefix}.mlp.fc1"), c, MLP_RATIO * c, true, rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), MLP_RATIO * c, c, true, rng);
}

pub fn init_merge<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) {
    init_linear(store, &format!("{prefix}.reduction"), 4 * c, 2 * c, false, rng);
}

pub fn init_expand<R: Rng>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) {
    init_linear(store, &format!("{prefix}.expand"), c, 2 * c, false, rng);
}

fn param(g: &mut Graph, store: &ParamStore, prefix: &str, name: &str) -> Result<Var> {
    g.param(store, &format!("{prefix}.{name}"))
}

fn linear_var(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, bias: bool) -> Result<Var> {
    let w = param(g, store, prefix, "weight")?;
    let b = if bias { Some(param(g, store, prefix, "bias")?) } else { None };
    g.linear(x, w, b)
}

fn norm_var(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, store, prefix, "weight")?;
    let b = param(g, store, prefix, "bias")?;
    g.layer_norm(x, w, b)
}

/// A token map inside a graph, with its polar resolution.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub var: Var,
    pub n_r: usize,
    pub n_phi: usize,
    pub c: usize,
}

/// Patch embedding: `samples` is `[n_patches, S * channels]`.
pub fn embed_var(g: &mut Graph, store: &ParamStore, prefix: &str, samples: Var, n_r: usize, n_phi: usize) -> Result<Tokens> {
    if g.value(samples).rows() != n_r * n_phi {
        return Err(Error::Contract(format!(
            "embed: {} sample blocks for {} patches",
            g.value(samples).rows(),
            n_r * n_phi
        )));
    }
    let var = linear_var(g, store, prefix, samples, true)?;
    let c = g.value(var).cols();
    Ok(Tokens { var, n_r, n_phi, c })
}

/// Bias node `B_theta + B_phi` built from the stored tables.
pub fn relpos_bias_var(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    window: &WindowSpec,
    theta: &[f64],
    phi: &[f64],
) -> Result<Var> {
    let (mt, mp) = relpos_maps(window, theta, phi)?;
    let tt = param(g, store, prefix, "theta")?;
    let tp = param(g, store, prefix, "phi")?;
    if g.value(tt).len() != mt.n_in || g.value(tp).len() != mp.n_in {
        return Err(Error::Contract(format!(
            "relpos tables {prefix} do not fit window ({}, {})",
            window.m_r, window.m_phi
        )));
    }
    let ft = g.reshape(tt, vec![mt.n_in, 1])?;
    let fp = g.reshape(tp, vec![mp.n_in, 1])?;
    let bt = g.row_mix(ft, Arc::new(mt))?;
    let bp = g.row_mix(fp, Arc::new(mp))?;
    g.add(bt, bp)
}

/// Multi-head attention over window-major rows followed by the output
/// projection.
pub fn attention_var(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    bias: Var,
    heads: usize,
    tokens: usize,
) -> Result<Var> {
    let qkv = linear_var(g, store, &format!("{prefix}.qkv"), x, true)?;
    let a = g.window_attention(qkv, bias, heads, tokens)?;
    linear_var(g, store, &format!("{prefix}.proj"), a, true)
}

/// Pre-norm transformer block with windowed attention.
pub fn block_var(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Tokens,
    window: &WindowSpec,
    heads: usize,
    theta_max: f64,
) -> Result<Tokens> {
    let order = window_order(x.n_r, x.n_phi, window)?;
    let (theta, phi) = token_angles(x.n_r, x.n_phi, theta_max);
    let c = x.c;
    let n = x.n_r * x.n_phi;

    let h = norm_var(g, store, &format!("{prefix}.norm1"), x.var)?;
    let hw = g.gather(h, element_index(&order, c), vec![n, c])?;
    let bias = relpos_bias_var(g, store, &format!("{prefix}.relpos"), window, &theta, &phi)?;
    let a = attention_var(g, store, &format!("{prefix}.attn"), hw, bias, heads, window.tokens())?;
    let back = g.gather(a, element_index(&inverse(&order), c), vec![n, c])?;
    let x1 = g.add(x.var, back)?;

    let h = norm_var(g, store, &format!("{prefix}.norm2"), x1)?;
    let h = linear_var(g, store, &format!("{prefix}.mlp.fc1"), h, true)?;
    let h = g.gelu(h);
    let h = linear_var(g, store, &format!("{prefix}.mlp.fc2"), h, true)?;
    let var = g.add(x1, h)?;
    Ok(Tokens { var, ..x })
}

/// Concatenates four neighbours (4c) and reduces them to 2c.
pub fn merge_var(g: &mut Graph, store: &ParamStore, prefix: &str, x: Tokens, rule: MergeRule) -> Result<Tokens> {
    let (fr, fp) = rule.factors();
    if x.n_r % fr != 0 || x.n_phi % fp != 0 {
        return Err(Error::Contract(format!(
            "merge {rule:?} needs ({fr}, {fp}) to divide ({}, {})",
            x.n_r, x.n_phi
        )));
    }
    let (nr, np) = (x.n_r / fr, x.n_phi / fp);
    let mut order = Vec::with_capacity(x.n_r * x.n_phi);
    for r in 0..nr {
        for p in 0..np {
            for (dr, dp) in rule.offsets() {
                order.push((r * fr + dr) * x.n_phi + p * fp + dp);
            }
        }
    }
    let cat = g.gather(x.var, element_index(&order, x.c), vec![nr * np, 4 * x.c])?;
    let var = linear_var(g, store, &format!("{prefix}.reduction"), cat, false)?;
    Ok(Tokens { var, n_r: nr, n_phi: np, c: 2 * x.c })
}

/// Dense `c -> 2c` map, then each token's features are split into four
/// `c/2` chunks placed at the positions a merge of `rule` would collect.
pub fn expand_var(g: &mut Graph, store: &ParamStore, prefix: &str, x: Tokens, rule: MergeRule) -> Result<Tokens> {
    if x.c % 2 != 0 {
        return Err(Error::Contract(format!("expand needs an even width, got {}", x.c)));
    }
    let (fr, fp) = rule.factors();
    let y = linear_var(g, store, &format!("{prefix}.expand"), x.var, false)?;
    let ch = x.c / 2;
    let (nr, np) = (x.n_r * fr, x.n_phi * fp);
    let offsets = rule.offsets();
    let mut idx = Vec::with_capacity(nr * np * ch);
    for r in 0..nr {
        for p in 0..np {
            let src = (r / fr) * x.n_phi + p / fp;
            let q = offsets.iter().position(|&o| o == (r % fr, p % fp)).unwrap();
            let base = src * 2 * x.c + q * ch;
            idx.extend(base..base + ch);
        }
    }
    let var = g.gather(y, Arc::new(idx), vec![nr * np, ch])?;
    Ok(Tokens { var, n_r: nr, n_phi: np, c: ch })
}

fn run_tokens(map: &TokenMap, f: impl FnOnce(&mut Graph, Tokens) -> Result<Tokens>) -> Result<TokenMap> {
    let mut g = Graph::new();
    let var = g.input(map.to_tensor());
    let out = f(&mut g, Tokens { var, n_r: map.n_r, n_phi: map.n_phi, c: map.c })?;
    TokenMap::new(out.n_r, out.n_phi, out.c, g.value(out.var).data.clone())
}

/// Embeds `[n_patches, S * channels]` sample blocks with `{prefix}.weight/bias`.
pub fn embed(samples: &[Vec<f64>], n_r: usize, n_phi: usize, store: &ParamStore, prefix: &str) -> Result<TokenMap> {
    let width = samples.first().map_or(0, Vec::len);
    if samples.iter().any(|s| s.len() != width) {
        return Err(Error::Contract("embed: ragged sample blocks".into()));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![samples.len(), width], samples.concat())?);
    let t = embed_var(&mut g, store, prefix, x, n_r, n_phi)?;
    TokenMap::new(n_r, n_phi, t.c, g.value(t.var).data.clone())
}

/// Attention over consecutive windows of `T` rows, `T^2 = bias.len()`.
/// `tokens` is `[n_windows * T, c]` row-major.
pub fn window_attention(
    tokens: &[f64],
    c: usize,
    heads: usize,
    store: &ParamStore,
    prefix: &str,
    bias: &[f64],
) -> Result<Vec<f64>> {
    let t = (bias.len() as f64).sqrt().round() as usize;
    if t * t != bias.len() || t == 0 {
        return Err(Error::Contract(format!("bias of {} entries is not square", bias.len())));
    }
    if c == 0 || tokens.len() % (t * c) != 0 {
        return Err(Error::Contract(format!("{} values are not whole windows of {t} x {c}", tokens.len())));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![tokens.len() / c, c], tokens.to_vec())?);
    let b = g.input(Tensor::new(vec![t * t], bias.to_vec())?);
    let y = attention_var(&mut g, store, prefix, x, b, heads, t)?;
    Ok(g.value(y).data.clone())
}

pub fn block(map: &TokenMap, store: &ParamStore, prefix: &str, window: &WindowSpec, heads: usize, theta_max: f64) -> Result<TokenMap> {
    run_tokens(map, |g, x| block_var(g, store, prefix, x, window, heads, theta_max))
}

pub fn merge(map: &TokenMap, rule: MergeRule, store: &ParamStore, prefix: &str) -> Result<TokenMap> {
    run_tokens(map, |g, x| merge_var(g, store, prefix, x, rule))
}

pub fn expand(map: &TokenMap, rule: MergeRule, store: &ParamStore, prefix: &str) -> Result<TokenMap> {
    run_tokens(map, |g, x| expand_var(g, store, prefix, x, rule))
}

/// Per-stage resolution, window and width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub n_r: usize,
    pub n_phi: usize,
    pub channels: usize,
    pub window: WindowSpec,
    pub shifted_window: WindowSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub variant: Variant,
    pub stages: Vec<StageSpec>,
}

/// One row of a shape trace: where in the network, token resolution,
/// window sides and channel width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub label: String,
    pub resolution: (usize, usize),
    pub window: Option<(usize, usize)>,
    pub channels: usize,
}

impl StageSchedule {
    /// Stage `s` (0-based) has resolution divided by the merge factors `s`
    /// times and `c * 2^s` channels.
    pub fn new(variant: Variant, n_r: usize, n_phi: usize, c: usize, m: usize, n_stages: usize) -> Result<Self> {
        if n_stages == 0 || c == 0 || m == 0 {
            return Err(Error::Contract("schedule needs stages, channels and a window".into()));
        }
        let (fr, fp) = variant.merge_rule().factors();
        let mut stages = Vec::with_capacity(n_stages);
        let (mut nr, mut np) = (n_r, n_phi);
        for s in 0..n_stages {
            if nr == 0 || np == 0 {
                return Err(Error::Contract(format!("stage {} has an empty token map", s + 1)));
            }
            let window = WindowSpec::for_stage(variant, nr, np, m, false);
            window.check(nr, np)?;
            let shifted_window = WindowSpec::for_stage(variant, nr, np, m, true);
            stages.push(StageSpec { n_r: nr, n_phi: np, channels: c << s, window, shifted_window });
            if s + 1 < n_stages {
                if nr % fr != 0 || np % fp != 0 {
                    return Err(Error::Contract(format!(
                        "stage {} map ({nr}, {np}) cannot be merged by ({fr}, {fp})",
                        s + 1
                    )));
                }
                nr /= fr;
                np /= fp;
            }
        }
        Ok(Self { variant, stages })
    }

    /// Encoder stages, bottleneck, then decoder stages mirrored.
    pub fn trace(&self) -> Vec<ShapeRow> {
        let row = |label: String, s: &StageSpec| ShapeRow {
            label,
            resolution: (s.n_r, s.n_phi),
            window: Some((s.window.m_r, s.window.m_phi)),
            channels: s.channels,
        };
        let mut rows: Vec<ShapeRow> =
            self.stages.iter().enumerate().map(|(i, s)| row(format!("encoder stage {}", i + 1), s)).collect();
        let last = self.stages.len();
        rows.push(row(format!("bottleneck stage {last}"), &self.stages[last - 1]));
        for i in (0..last - 1).rev() {
            rows.push(row(format!("decoder stage {}", i + 1), &self.stages[i]));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(n_r: usize, n_phi: usize, c: usize, seed: u64) -> TokenMap {
        let mut r = rng(seed);
        TokenMap::new(n_r, n_phi, c, (0..n_r * n_phi * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            for v in &mut store.get_mut(&n).unwrap().data {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }

    /// Straight-line softmax(QK^T / sqrt(d) + B) V for one window.
    fn scalar_attention(x: &[Vec<f64>], store: &ParamStore, p: &str, heads: usize, bias: &[f64]) -> Vec<Vec<f64>> {
        let w = |n: &str| store.get(&format!("{p}.{n}")).unwrap().clone();
        let (wqkv, bqkv, wp, bp) = (w("qkv.weight"), w("qkv.bias"), w("proj.weight"), w("proj.bias"));
        let c = x[0].len();
        let t = x.len();
        let d = c / heads;
        let mut qkv = vec![vec![0.0; 3 * c]; t];
        for i in 0..t {
            for o in 0..3 * c {
                let mut s = bqkv.data[o];
                for k in 0..c {
                    s += x[i][k] * wqkv.data[k * 3 * c + o];
                }
                qkv[i][o] = s;
            }
        }
        let mut att = vec![vec![0.0; c]; t];
        for h in 0..heads {
            for i in 0..t {
                let mut logits = vec![0.0; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for e in 0..d {
                        s += qkv[i][h * d + e] * qkv[j][c + h * d + e];
                    }
                    logits[j] = s / (d as f64).sqrt() + bias[i * t + j];
                }
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..t {
                    let pij = (logits[j] - mx).exp() / z;
                    for e in 0..d {
                        att[i][h * d + e] += pij * qkv[j][2 * c + h * d + e];
                    }
                }
            }
        }
        att.iter()
            .map(|a| {
                (0..c)
                    .map(|o| bp.data[o] + (0..c).map(|k| a[k] * wp.data[k * c + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn token_angle_examples() {
        let (t, p) = token_angles(16, 64, 87.5f64.to_radians());
        assert_abs_diff_eq!(t[0].to_degrees(), 2.734375, epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 0.049_087_385_212_340_52, epsilon = 1e-12);
        let (t, _) = token_angles(1, 1, 1.2);
        assert_eq!(t, vec![0.6]);
    }

    #[test]
    fn window_rules_match_stage_table() {
        let w = |v, nr, np| {
            let s = WindowSpec::for_stage(v, nr, np, 4, false);
            (s.m_r, s.m_phi)
        };
        assert_eq!(w(Variant::A, 16, 64), (1, 16));
        assert_eq!(w(Variant::A, 16, 16), (1, 16));
        assert_eq!(w(Variant::A, 16, 4), (4, 4));
        assert_eq!(w(Variant::A, 16, 1), (16, 1));
        assert_eq!(w(Variant::Ra, 16, 64), (4, 4));
        assert_eq!(w(Variant::Ra, 2, 8), (2, 8));
        assert_eq!(WindowSpec::for_stage(Variant::A, 16, 64, 4, true).shift, 8);
        assert_eq!(WindowSpec::for_stage(Variant::Ra, 2, 8, 4, true).shift, 0);
    }

    #[test]
    fn relpos_bias_examples() {
        let w = WindowSpec::new(2, 2, 0).unwrap();
        let theta_max = 87.5f64.to_radians();
        let (th, ph) = token_angles(16, 64, theta_max);
        assert!(relpos_bias(&RelPosTables::zeros(&w), &w, &th, &ph).unwrap().iter().all(|&b| b == 0.0));

        let mut t = RelPosTables::zeros(&w);
        t.theta[1] = [0.3, 0.7]; // offset 0
        t.theta[2] = [1.0, 0.0]; // offset +1
        let b = relpos_bias(&t, &w, &th, &ph).unwrap();
        // token 0 = (0, 0), token 2 = (1, 0)
        assert_abs_diff_eq!(b[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(b[2 * 4], (theta_max / 16.0).sin(), epsilon = 1e-15);
        // offset -1 reads a different (zero) row
        assert_eq!(b[2], 0.0);

        let bad = RelPosTables::zeros(&WindowSpec::new(1, 2, 0).unwrap());
        assert!(relpos_bias(&bad, &w, &th, &ph).is_err());
    }

    #[test]
    fn relpos_bias_is_linear_in_tables() {
        let w = WindowSpec::new(2, 4, 0).unwrap();
        let (th, ph) = token_angles(4, 8, 1.4);
        let mut r = rng(3);
        let mut both = RelPosTables::zeros(&w);
        for row in both.theta.iter_mut().chain(both.phi.iter_mut()) {
            *row = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        }
        let mut t_only = both.clone();
        t_only.phi.iter_mut().for_each(|v| *v = [0.0; 2]);
        let mut p_only = both.clone();
        p_only.theta.iter_mut().for_each(|v| *v = [0.0; 2]);
        let b = relpos_bias(&both, &w, &th, &ph).unwrap();
        let bt = relpos_bias(&t_only, &w, &th, &ph).unwrap();
        let bp = relpos_bias(&p_only, &w, &th, &ph).unwrap();
        for i in 0..b.len() {
            assert_eq!(bt[i] + bp[i], b[i]);
        }
    }

    fn attention_store(c: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_attention(&mut s, "a", c, &mut rng(seed));
        randomize(&mut s, seed + 1);
        s
    }

    #[test]
    fn window_attention_matches_scalar_reference() {
        for trial in 0..20u64 {
            let c = 6;
            let store = attention_store(c, trial);
            let mut r = rng(100 + trial);
            let x: Vec<Vec<f64>> = (0..4).map(|_| (0..c).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
            let bias: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
            let got = window_attention(&x.concat(), c, 2, &store, "a", &bias).unwrap();
            let want = scalar_attention(&x, &store, "a", 2, &bias).concat();
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn window_attention_trivial_cases() {
        let c = 4;
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", c, &mut rng(1));
        // identity value and projection paths
        let qkv = store.get_mut("a.qkv.weight").unwrap();
        qkv.data.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..c {
            qkv.data[k * 3 * c + 2 * c + k] = 1.0;
        }
        let proj = store.get_mut("a.proj.weight").unwrap();
        proj.data.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..c {
            proj.data[k * c + k] = 1.0;
        }
        let x = [0.5, -1.0, 2.0, 0.25];
        assert_eq!(window_attention(&x, c, 2, &store, "a", &[0.3]).unwrap(), x.to_vec());

        let store = attention_store(c, 9);
        let y = window_attention(&[x, x].concat(), c, 1, &store, "a", &[0.0; 4]).unwrap();
        assert_eq!(y[..c], y[c..]);

        assert!(window_attention(&[f64::NAN, 0.0, 0.0, 0.0], c, 1, &store, "a", &[0.0]).is_err());
        assert!(window_attention(&x, c, 3, &store, "a", &[0.0]).is_err());
    }

    #[test]
    fn window_attention_is_permutation_equivariant() {
        let c = 4;
        let store = attention_store(c, 5);
        let mut r = rng(6);
        let x: Vec<f64> = (0..4 * c).map(|_| r.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 3, 1];
        let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * c..(i + 1) * c].to_vec()).collect();
        let pb: Vec<f64> = (0..16).map(|k| bias[perm[k / 4] * 4 + perm[k % 4]]).collect();
        let y = window_attention(&x, c, 2, &store, "a", &bias).unwrap();
        let py = window_attention(&px, c, 2, &store, "a", &pb).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for e in 0..c {
                assert_abs_diff_eq!(py[k * c + e], y[i * c + e], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn global_window_equals_global_attention() {
        let (c, heads, theta_max) = (8, 2, 1.5);
        let w = WindowSpec::new(4, 4, 0).unwrap();
        let mut store = ParamStore::new();
        init_block(&mut store, "b", c, &w, &mut rng(1));
        randomize(&mut store, 2);
        let map = random_map(4, 4, c, 3);
        let out = block(&map, &store, "b", &w, heads, theta_max).unwrap();

        // same block computed directly, with every token in one window
        let (th, ph) = token_angles(4, 4, theta_max);
        let tables = RelPosTables {
            m_r: 4,
            m_phi: 4,
            theta: store.get("b.relpos.theta").unwrap().data.chunks(2).map(|v| [v[0], v[1]]).collect(),
            phi: store.get("b.relpos.phi").unwrap().data.chunks(2).map(|v| [v[0], v[1]]).collect(),
        };
        let bias = relpos_bias(&tables, &w, &th, &ph).unwrap();
        let mut g = Graph::new();
        let x = g.input(map.to_tensor());
        let h = norm_var(&mut g, &store, "b.norm1", x).unwrap();
        let rows: Vec<Vec<f64>> = g.value(h).data.chunks(c).map(<[f64]>::to_vec).collect();
        let att = scalar_attention(&rows, &store, "b.attn", heads, &bias).concat();
        let a = g.input(Tensor::new(vec![16, c], att).unwrap());
        let x1 = g.add(x, a).unwrap();
        let h = norm_var(&mut g, &store, "b.norm2", x1).unwrap();
        let h = linear_var(&mut g, &store, "b.mlp.fc1", h, true).unwrap();
        let h = g.gelu(h);
        let h = linear_var(&mut g, &store, "b.mlp.fc2", h, true).unwrap();
        let y = g.add(x1, h).unwrap();
        for (a, b) in out.data.iter().zip(&g.value(y).data) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn shift_identities() {
        let m = random_map(3, 8, 2, 1);
        assert_eq!(shift_azimuth(&m, 0), m);
        assert_eq!(shift_azimuth(&m, 8), m);
        assert_eq!(shift_azimuth(&m, -16), m);
        assert_eq!(shift_azimuth(&shift_azimuth(&m, 3), -3), m);
        let s = shift_azimuth(&m, 1);
        assert_eq!(s.token(2, 1), m.token(2, 0));
        assert_eq!(s.token(2, 0), m.token(2, 7));
    }

    fn stack_store(c: usize, windows: &[WindowSpec], seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, w) in windows.iter().enumerate() {
            init_block(&mut s, &format!("b{i}"), c, w, &mut rng(seed + i as u64));
        }
        randomize(&mut s, seed + 99);
        s
    }

    #[test]
    fn block_stack_is_equivariant_under_window_rotation() {
        let (c, n_r, n_phi) = (4, 2, 16);
        for variant in [Variant::A, Variant::Ra] {
            let windows = [
                WindowSpec::for_stage(variant, n_r, n_phi, 2, false),
                WindowSpec::for_stage(variant, n_r, n_phi, 2, true),
            ];
            let store = stack_store(c, &windows, 10);
            let run = |m: &TokenMap| {
                let mut out = m.clone();
                for (i, w) in windows.iter().enumerate() {
                    out = block(&out, &store, &format!("b{i}"), w, 2, 1.5).unwrap();
                }
                out
            };
            let m = random_map(n_r, n_phi, c, 7);
            let k = windows[0].m_phi as i64;
            assert_eq!(run(&shift_azimuth(&m, k)), shift_azimuth(&run(&m), k));
        }
    }

    #[test]
    fn merge_shapes_and_shared_weights() {
        let mut s = ParamStore::new();
        init_merge(&mut s, "m", 3, &mut rng(1));
        let m = random_map(16, 64, 3, 2);
        assert_eq!(merge(&m, MergeRule::Azimuth4, &s, "m").unwrap().shape(), (16, 16, 6));
        assert_eq!(merge(&m, MergeRule::RadiusAzimuth2x2, &s, "m").unwrap().shape(), (8, 32, 6));
        assert!(merge(&random_map(3, 8, 3, 2), MergeRule::RadiusAzimuth2x2, &s, "m").is_err());

        let v = [0.2, -0.4, 1.0];
        let constant = TokenMap::new(2, 8, 3, v.repeat(16)).unwrap();
        let out = merge(&constant, MergeRule::Azimuth4, &s, "m").unwrap();
        let w = &s.get("m.reduction.weight").unwrap().data;
        let cat = v.repeat(4);
        let want: Vec<f64> = (0..6).map(|o| (0..12).map(|k| cat[k] * w[k * 6 + o]).sum()).collect();
        for p in 0..2 {
            for (a, b) in out.token(1, p).iter().zip(&want) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn merge_gathers_expected_neighbours() {
        let mut s = ParamStore::new();
        init_merge(&mut s, "m", 1, &mut rng(1));
        let w = s.get_mut("m.reduction.weight").unwrap();
        w.data = vec![1.0, 0.0, 10.0, 0.0, 100.0, 0.0, 1000.0, 0.0];
        // token value = 10 r + p
        let m = TokenMap::new(4, 4, 1, (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect()).unwrap();
        let ra = merge(&m, MergeRule::RadiusAzimuth2x2, &s, "m").unwrap();
        // (1, 1) collects (2,2)=22, (3,2)=32, (2,3)=23, (3,3)=33
        assert_eq!(ra.token(1, 1)[0], 22.0 + 320.0 + 2300.0 + 33000.0);
        let a = merge(&m, MergeRule::Azimuth4, &s, "m").unwrap();
        assert_eq!(a.token(2, 0)[0], 20.0 + 210.0 + 2200.0 + 23000.0);
    }

    #[test]
    fn expand_shapes_and_zero_weights() {
        let c = 8;
        let mut s = ParamStore::new();
        init_expand(&mut s, "e", 8 * c, &mut rng(1));
        let m = random_map(16, 1, 8 * c, 2);
        let out = expand(&m, MergeRule::Azimuth4, &s, "e").unwrap();
        assert_eq!(out.shape(), (16, 4, 4 * c));
        s.get_mut("e.expand.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let z = expand(&random_map(2, 8, 8 * c, 3), MergeRule::RadiusAzimuth2x2, &s, "e").unwrap();
        assert_eq!(z.shape(), (4, 16, 4 * c));
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(expand(&random_map(2, 2, 3, 1), MergeRule::Azimuth4, &s, "e").is_err());
    }

    #[test]
    fn expand_undoes_merge_placement() {
        // With identity-like weights, expand places chunk q where merge took neighbour q.
        for rule in [MergeRule::Azimuth4, MergeRule::RadiusAzimuth2x2] {
            let mut s = ParamStore::new();
            init_expand(&mut s, "e", 4, &mut rng(1));
            let w = s.get_mut("e.expand.weight").unwrap();
            w.data = vec![0.0; 32];
            for k in 0..4 {
                w.data[k * 8 + 2 * k] = 1.0; // feature k -> chunk k, first channel
            }
            let m = TokenMap::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
            let e = expand(&m, rule, &s, "e").unwrap();
            for (q, (dr, dp)) in rule.offsets().into_iter().enumerate() {
                assert_eq!(e.token(dr, dp), &[q as f64 + 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn embed_examples() {
        let mut s = ParamStore::new();
        init_embed(&mut s, "p", 3, 3, &mut rng(1));
        s.get_mut("p.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        s.get_mut("p.bias").unwrap().data = vec![1.0, 2.0, 3.0];
        let samples = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]];
        let t = embed(&samples, 1, 2, &s, "p").unwrap();
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        s.get_mut("p.weight").unwrap().data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        s.get_mut("p.bias").unwrap().data = vec![0.0; 3];
        assert_eq!(embed(&samples, 1, 2, &s, "p").unwrap().data, samples.concat());

        randomize(&mut s, 4);
        let t = embed(&[vec![0.3, 0.1, 0.9], vec![0.3, 0.1, 0.9]], 1, 2, &s, "p").unwrap();
        assert_eq!(t.token(0, 0), t.token(0, 1));
        assert!(embed(&[vec![0.1; 3], vec![0.1; 2]], 1, 2, &s, "p").is_err());
    }

    #[test]
    fn schedule_rows() {
        let a = StageSchedule::new(Variant::A, 16, 64, 96, 4, 4).unwrap();
        let res: Vec<_> = a.stages.iter().map(|s| ((s.n_r, s.n_phi), (s.window.m_r, s.window.m_phi), s.channels)).collect();
        assert_eq!(
            res,
            vec![((16, 64), (1, 16), 96), ((16, 16), (1, 16), 192), ((16, 4), (4, 4), 384), ((16, 1), (16, 1), 768)]
        );
        let ra = StageSchedule::new(Variant::Ra, 16, 64, 96, 4, 4).unwrap();
        let res: Vec<_> = ra.stages.iter().map(|s| ((s.n_r, s.n_phi), (s.window.m_r, s.window.m_phi))).collect();
        assert_eq!(res, vec![((16, 64), (4, 4)), ((8, 32), (4, 4)), ((4, 16), (4, 4)), ((2, 8), (2, 8))]);
        assert_eq!(a.trace().len(), 8);
        assert!(StageSchedule::new(Variant::Ra, 3, 64, 8, 4, 2).is_err());
    }

    #[test]
    fn relpos_table_gradients_match_finite_differences() {
        let (c, heads) = (4, 2);
        let w = WindowSpec::new(2, 2, 0).unwrap();
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", c, &mut rng(1));
        init_relpos(&mut store, "r", &w);
        randomize(&mut store, 2);
        let (th, ph) = token_angles(4, 8, 1.5);
        let x: Vec<f64> = {
            let mut r = rng(3);
            (0..8 * c).map(|_| r.random_range(-1.0..1.0)).collect()
        };
        let loss = |s: &ParamStore| -> (Graph, Var) {
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(vec![8, c], x.clone()).unwrap());
            let b = relpos_bias_var(&mut g, s, "r", &w, &th, &ph).unwrap();
            let y = attention_var(&mut g, s, "a", xv, b, heads, 4).unwrap();
            let probe = g.input(Tensor::new(vec![8 * c, 1], (0..8 * c).map(|i| (i as f64).cos()).collect()).unwrap());
            let flat = g.reshape(y, vec![1, 8 * c]).unwrap();
            let l = g.linear(flat, probe, None).unwrap();
            (g, l)
        };
        let (mut g, l) = loss(&store);
        let grads = g.backward(l).unwrap();
        for name in ["r.theta", "r.phi"] {
            let v = g.param(&store, name).unwrap();
            let analytic = grads.get(v).unwrap().to_vec();
            for e in 0..analytic.len() {
                let mut s = store.clone();
                s.get_mut(name).unwrap().data[e] += 1e-5;
                let (gp, lp) = loss(&s);
                s.get_mut(name).unwrap().data[e] -= 2e-5;
                let (gm, lm) = loss(&s);
                let num = (gp.value(lp).data[0] - gm.value(lm).data[0]) / 2e-5;
                let err = (num - analytic[e]).abs() / num.abs().max(analytic[e].abs()).max(1e-6);
                assert!(err < 1e-5, "{name}[{e}]: {} vs {num}", analytic[e]);
            }
        }
    }

    proptest! {
        #[test]
        fn shift_composes(k1 in -40i64..40, k2 in -40i64..40) {
            let m = random_map(2, 8, 3, 11);
            prop_assert_eq!(shift_azimuth(&shift_azimuth(&m, k1), k2), shift_azimuth(&m, k1 + k2));
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let store = attention_store(4, seed);
            let mut r = rng(seed);
            let x: Vec<f64> = (0..16).map(|_| r.random_range(-scale..scale)).collect();
            let bias: Vec<f64> = (0..16).map(|_| r.random_range(-scale..scale)).collect();
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(vec![4, 4], x).unwrap());
            let b = g.input(Tensor::new(vec![16], bias).unwrap());
            attention_var(&mut g, &store, "a", xv, b, 2, 4).unwrap();
            prop_assert!(g.max_softmax_row_error() < 1e-12);
        }
    }
}
