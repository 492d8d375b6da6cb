//! Encoder and encoder-decoder assembly, losses, metrics, gradient checking,
//! SGD training and checkpoints.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, block_var, embed_var, expand_var, init_block, init_embed, init_expand, init_linear, init_merge, init_norm,
    merge_var, ShapeRow, StageSchedule, TokenMap, Tokens, Variant, WindowSpec,
};
use crate::autodiff::{si_log_value, Graph, ParamStore, RowMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{knn_table, partition, sampling_grid, KnnTable, SamplingPattern};
use crate::imageops::{bilinear_sample, ImageBuffer};
use crate::lens::LensProjection;
use crate::npy;

pub const SI_LOG_LAMBDA: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Classes(usize),
    /// Per-pixel regression with this many output channels.
    Dense(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_r: usize,
    pub n_phi: usize,
    pub channels: usize,
    /// Window budget: `window^2` tokens per window.
    pub window: usize,
    pub heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub in_channels: usize,
    pub samples_r: usize,
    pub samples_phi: usize,
    pub knn_k: usize,
    /// Side of the dense output raster.
    pub out_size: usize,
    pub head: Head,
    pub theta_max_deg: f64,
}

impl ModelConfig {
    fn base(variant: Variant, head: Head) -> Self {
        Self {
            variant,
            n_r: 16,
            n_phi: 64,
            channels: 96,
            window: 4,
            heads: vec![3, 6, 12, 24],
            depths: vec![2, 2, 2, 2],
            decoder_depths: vec![2, 2, 2],
            bottleneck_depth: 2,
            in_channels: 3,
            samples_r: 10,
            samples_phi: 10,
            knn_k: 4,
            out_size: 64,
            head,
            theta_max_deg: crate::lens::DEFAULT_THETA_MAX_DEG,
        }
    }

    pub fn darswin_a(head: Head) -> Self {
        Self::base(Variant::A, head)
    }

    pub fn darswin_ra(head: Head) -> Self {
        Self::base(Variant::Ra, head)
    }

    /// Two-stage model small enough for finite differences.
    pub fn tiny(head: Head) -> Self {
        Self {
            n_r: 4,
            n_phi: 8,
            channels: 8,
            window: 2,
            heads: vec![1, 1],
            depths: vec![2, 2],
            decoder_depths: vec![1],
            bottleneck_depth: 1,
            in_channels: 1,
            samples_r: 2,
            samples_phi: 2,
            out_size: 16,
            ..Self::base(Variant::A, head)
        }
    }

    pub fn n_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max_deg.to_radians()
    }

    pub fn schedule(&self) -> Result<StageSchedule> {
        StageSchedule::new(self.variant, self.n_r, self.n_phi, self.channels, self.window, self.n_stages())
    }

    pub fn validate(&self) -> Result<StageSchedule> {
        let n = self.n_stages();
        if self.heads.len() != n {
            return Err(Error::Contract(format!("{} head counts for {n} stages", self.heads.len())));
        }
        if self.decoder_depths.len() + 1 != n {
            return Err(Error::Contract(format!(
                "{} decoder depths for {n} stages (need {})",
                self.decoder_depths.len(),
                n.saturating_sub(1)
            )));
        }
        if self.in_channels == 0 || self.samples_r == 0 || self.samples_phi == 0 {
            return Err(Error::Contract("input channels and samples per patch must be positive".into()));
        }
        match self.head {
            Head::Classes(0) | Head::Dense(0) => {
                return Err(Error::Contract("head needs at least one output".into()));
            }
            _ => {}
        }
        let schedule = self.schedule()?;
        for (s, (stage, &h)) in schedule.stages.iter().zip(&self.heads).enumerate() {
            if h == 0 || stage.channels % h != 0 {
                return Err(Error::Contract(format!(
                    "stage {} width {} is not divisible by {h} heads",
                    s + 1,
                    stage.channels
                )));
            }
        }
        Ok(schedule)
    }

    pub fn samples_per_patch(&self) -> usize {
        self.samples_r * self.samples_phi
    }
}

/// Fresh parameters: truncated normal weights, zero biases, unit norms,
/// zero relative-position tables.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let schedule = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_embed(&mut s, "embed", cfg.samples_per_patch() * cfg.in_channels, cfg.channels, &mut rng);
    let n = schedule.stages.len();
    for (i, st) in schedule.stages.iter().enumerate() {
        for b in 0..cfg.depths[i] {
            let w = stage_window(st, b);
            init_block(&mut s, &format!("encoder.{i}.block{b}"), st.channels, &w, &mut rng);
        }
        if i + 1 < n {
            init_merge(&mut s, &format!("encoder.{i}.merge"), st.channels, &mut rng);
        }
    }
    let last = &schedule.stages[n - 1];
    match cfg.head {
        Head::Classes(k) => {
            init_norm(&mut s, "norm", last.channels);
            init_linear(&mut s, "head", last.channels, k, true, &mut rng);
        }
        Head::Dense(out) => {
            for b in 0..cfg.bottleneck_depth {
                init_block(&mut s, &format!("bottleneck.block{b}"), last.channels, &stage_window(last, b), &mut rng);
            }
            for i in (0..n - 1).rev() {
                let st = &schedule.stages[i];
                init_expand(&mut s, &format!("decoder.{i}.expand"), 2 * st.channels, &mut rng);
                init_linear(&mut s, &format!("decoder.{i}.fuse"), 2 * st.channels, st.channels, true, &mut rng);
                for b in 0..cfg.decoder_depths[i] {
                    init_block(&mut s, &format!("decoder.{i}.block{b}"), st.channels, &stage_window(st, b), &mut rng);
                }
            }
            init_norm(&mut s, "norm", cfg.channels);
            init_linear(&mut s, "head", cfg.channels, out, true, &mut rng);
        }
    }
    Ok(s)
}

/// Odd blocks use shifted windows.
fn stage_window(stage: &attention::StageSpec, block: usize) -> WindowSpec {
    if block % 2 == 1 {
        stage.shifted_window
    } else {
        stage.window
    }
}

/// Sample blocks of one image: `[n_patches, S * in_channels]`, plus the
/// pattern they came from.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: Tensor,
    pub pattern: SamplingPattern,
}

pub fn prepare(cfg: &ModelConfig, img: &ImageBuffer, lens: &LensProjection) -> Result<Prepared> {
    if img.h != img.w {
        return Err(Error::Contract(format!("model input must be square, got {}x{}", img.h, img.w)));
    }
    if img.c != cfg.in_channels {
        return Err(Error::Contract(format!("image has {} channels, model takes {}", img.c, cfg.in_channels)));
    }
    if (lens.theta_max_deg() - cfg.theta_max_deg).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "lens theta_max {} deg differs from model {} deg",
            lens.theta_max_deg(),
            cfg.theta_max_deg
        )));
    }
    let grid = partition(lens, cfg.n_r, cfg.n_phi)?;
    let pattern = sampling_grid(&grid, lens, cfg.samples_r, cfg.samples_phi, None)?;
    let values = bilinear_sample(img, &pattern.points)?;
    let width = cfg.samples_per_patch() * cfg.in_channels;
    let samples = Tensor::new(vec![grid.n_patches(), width], values)?;
    Ok(Prepared { samples, pattern })
}

/// Row map that averages, for every pixel, the patch tokens owning its `k`
/// nearest samples.
pub fn knn_row_map(table: &KnnTable, pattern: &SamplingPattern) -> RowMap {
    let w = table.weight();
    let rows = (0..table.h * table.w)
        .map(|px| table.neighbors(px).iter().map(|&s| (pattern.patch_of_sample(s), w)).collect())
        .collect();
    RowMap { n_in: pattern.n_patches(), rows }
}

pub struct EncoderPass {
    pub tokens: Tokens,
    pub skips: Vec<Tokens>,
    pub trace: Vec<ShapeRow>,
}

fn row(label: String, t: &Tokens, w: Option<&WindowSpec>) -> ShapeRow {
    ShapeRow { label, resolution: (t.n_r, t.n_phi), window: w.map(|w| (w.m_r, w.m_phi)), channels: t.c }
}

fn run_blocks(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    mut x: Tokens,
    stage: &attention::StageSpec,
    depth: usize,
    heads: usize,
    theta_max: f64,
) -> Result<Tokens> {
    for b in 0..depth {
        x = block_var(g, params, &format!("{prefix}.block{b}"), x, &stage_window(stage, b), heads, theta_max)?;
    }
    Ok(x)
}

pub fn encoder_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamStore, samples: Var) -> Result<EncoderPass> {
    let schedule = cfg.validate()?;
    let theta_max = cfg.theta_max();
    let mut x = embed_var(g, params, "embed", samples, cfg.n_r, cfg.n_phi)?;
    let mut skips = Vec::new();
    let mut trace = Vec::new();
    let n = schedule.stages.len();
    for (i, st) in schedule.stages.iter().enumerate() {
        if (x.n_r, x.n_phi, x.c) != (st.n_r, st.n_phi, st.channels) {
            return Err(Error::Contract(format!("encoder stage {} shape drifted from the schedule", i + 1)));
        }
        x = run_blocks(g, params, &format!("encoder.{i}"), x, st, cfg.depths[i], cfg.heads[i], theta_max)?;
        trace.push(row(format!("encoder stage {}", i + 1), &x, Some(&st.window)));
        if i + 1 < n {
            skips.push(x);
            x = merge_var(g, params, &format!("encoder.{i}.merge"), x, cfg.variant.merge_rule())?;
        }
    }
    Ok(EncoderPass { tokens: x, skips, trace })
}

pub fn classifier_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamStore, samples: Var) -> Result<(Var, EncoderPass)> {
    let enc = encoder_graph(g, cfg, params, samples)?;
    let w = g.param(params, "norm.weight")?;
    let b = g.param(params, "norm.bias")?;
    let h = g.layer_norm(enc.tokens.var, w, b)?;
    let pooled = g.mean_rows(h);
    let hw = g.param(params, "head.weight")?;
    let hb = g.param(params, "head.bias")?;
    let logits = g.linear(pooled, hw, Some(hb))?;
    Ok((logits, enc))
}

/// Encoder, bottleneck, decoder with skips, k-NN remap and linear head.
/// Returns `[H * W, out]` and the shape trace.
pub fn unet_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParamStore,
    samples: Var,
    knn: Arc<RowMap>,
    out_hw: (usize, usize),
) -> Result<(Var, Vec<ShapeRow>)> {
    let schedule = cfg.validate()?;
    let theta_max = cfg.theta_max();
    let EncoderPass { tokens, skips, mut trace } = encoder_graph(g, cfg, params, samples)?;
    let n = schedule.stages.len();
    let last = &schedule.stages[n - 1];
    let mut x = run_blocks(g, params, "bottleneck", tokens, last, cfg.bottleneck_depth, cfg.heads[n - 1], theta_max)?;
    trace.push(row(format!("bottleneck stage {n}"), &x, Some(&last.window)));
    for i in (0..n - 1).rev() {
        let st = &schedule.stages[i];
        x = expand_var(g, params, &format!("decoder.{i}.expand"), x, cfg.variant.merge_rule())?;
        let skip = skips[i];
        if (x.n_r, x.n_phi, x.c) != (skip.n_r, skip.n_phi, skip.c) {
            return Err(Error::Contract(format!("decoder stage {} does not mirror its encoder stage", i + 1)));
        }
        let cat = g.concat_cols(x.var, skip.var)?;
        let fw = g.param(params, &format!("decoder.{i}.fuse.weight"))?;
        let fb = g.param(params, &format!("decoder.{i}.fuse.bias"))?;
        let fused = g.linear(cat, fw, Some(fb))?;
        x = Tokens { var: fused, ..skip };
        x = run_blocks(g, params, &format!("decoder.{i}"), x, st, cfg.decoder_depths[i], cfg.heads[i], theta_max)?;
        trace.push(row(format!("decoder stage {}", i + 1), &x, Some(&st.window)));
    }
    let w = g.param(params, "norm.weight")?;
    let b = g.param(params, "norm.bias")?;
    let h = g.layer_norm(x.var, w, b)?;
    let pixels = g.row_mix(h, knn)?;
    trace.push(ShapeRow { label: "knn".into(), resolution: out_hw, window: None, channels: x.c });
    let hw = g.param(params, "head.weight")?;
    let hb = g.param(params, "head.bias")?;
    Ok((g.linear(pixels, hw, Some(hb))?, trace))
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub logits: Option<Vec<f64>>,
    /// Last-stage tokens before pooling.
    pub tokens: TokenMap,
    pub trace: Vec<ShapeRow>,
    pub max_softmax_row_error: f64,
    pub attention_rows: usize,
}

pub fn forward_encoder(cfg: &ModelConfig, img: &ImageBuffer, lens: &LensProjection, params: &ParamStore) -> Result<EncoderOutput> {
    forward_encoder_prepared(cfg, &prepare(cfg, img, lens)?, params)
}

pub fn forward_encoder_prepared(cfg: &ModelConfig, prep: &Prepared, params: &ParamStore) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let x = g.input(prep.samples.clone());
    let (logits, enc) = match cfg.head {
        Head::Classes(_) => {
            let (l, enc) = classifier_graph(&mut g, cfg, params, x)?;
            (Some(g.value(l).data.clone()), enc)
        }
        Head::Dense(_) => (None, encoder_graph(&mut g, cfg, params, x)?),
    };
    let t = enc.tokens;
    Ok(EncoderOutput {
        logits,
        tokens: TokenMap::new(t.n_r, t.n_phi, t.c, g.value(t.var).data.clone())?,
        trace: enc.trace,
        max_softmax_row_error: g.max_softmax_row_error(),
        attention_rows: g.attention_rows(),
    })
}

#[derive(Clone, Debug)]
pub struct UnetOutput {
    /// `out_size x out_size x out` raster.
    pub map: ImageBuffer,
    pub trace: Vec<ShapeRow>,
}

/// Dense prediction with a fresh k-NN table for the lens.
pub fn forward_unet(cfg: &ModelConfig, img: &ImageBuffer, lens: &LensProjection, params: &ParamStore) -> Result<UnetOutput> {
    let prep = prepare(cfg, img, lens)?;
    let table = knn_table(&prep.pattern, cfg.out_size, cfg.out_size, cfg.knn_k)?;
    forward_unet_prepared(cfg, &prep, &table, params)
}

pub fn forward_unet_prepared(cfg: &ModelConfig, prep: &Prepared, table: &KnnTable, params: &ParamStore) -> Result<UnetOutput> {
    let Head::Dense(out) = cfg.head else {
        return Err(Error::Contract("forward_unet needs a dense head".into()));
    };
    let mut g = Graph::new();
    let x = g.input(prep.samples.clone());
    let map = Arc::new(knn_row_map(table, &prep.pattern));
    let (y, trace) = unet_graph(&mut g, cfg, params, x, map, (table.h, table.w))?;
    let img = ImageBuffer::new(table.h, table.w, out, g.value(y).data.clone())?;
    Ok(UnetOutput { map: img.with_mask(table.valid.clone())?, trace })
}

/// Scale-invariant log loss over pixels selected by `mask`.
pub fn si_log_loss(pred_log: &[f64], gt_log: &[f64], mask: &[bool], lambda: f64) -> Result<f64> {
    si_log_value(pred_log, gt_log, mask, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub sq_rel: f64,
}

/// Standard monocular depth metrics over valid pixels (linear depths).
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Contract("depth metrics need equally sized inputs".into()));
    }
    let mut n = 0usize;
    let mut hits = [0usize; 3];
    let (mut abs_rel, mut se, mut se_log, mut sq_rel) = (0.0, 0.0, 0.0, 0.0);
    for ((&p, &t), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        if !(p > 0.0 && t > 0.0) {
            return Err(Error::Domain(format!("depths must be positive, got pred {p}, gt {t}")));
        }
        n += 1;
        let ratio = (p / t).max(t / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio <= 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
        let d = p - t;
        abs_rel += d.abs() / t;
        sq_rel += d * d / t;
        se += d * d;
        se_log += (p.ln() - t.ln()).powi(2);
    }
    if n == 0 {
        return Err(Error::Contract("depth metrics: empty mask".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        abs_rel: abs_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        sq_rel: sq_rel / nf,
    })
}

/// Training or checking objective for one item.
#[derive(Clone, Debug)]
pub enum Objective {
    CrossEntropy { label: usize },
    SiLog { target_log: Arc<Vec<f64>>, mask: Arc<Vec<bool>>, lambda: f64, knn: Arc<RowMap>, out_hw: (usize, usize) },
}

fn loss_graph(g: &mut Graph, cfg: &ModelConfig, params: &ParamStore, samples: &Tensor, obj: &Objective) -> Result<Var> {
    let x = g.input(samples.clone());
    match obj {
        Objective::CrossEntropy { label } => {
            let (logits, _) = classifier_graph(g, cfg, params, x)?;
            g.cross_entropy(logits, *label)
        }
        Objective::SiLog { target_log, mask, lambda, knn, out_hw } => {
            let (y, _) = unet_graph(g, cfg, params, x, knn.clone(), *out_hw)?;
            g.si_log(y, target_log.clone(), mask.clone(), *lambda)
        }
    }
}

/// Loss and per-parameter gradients (indexed by parameter id).
pub fn loss_and_grads(cfg: &ModelConfig, params: &ParamStore, samples: &Tensor, obj: &Objective) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let loss = loss_graph(&mut g, cfg, params, samples, obj)?;
    let grads = g.backward(loss)?;
    let mut out = params.zeros_like();
    for (id, gr) in g.param_grads(&grads) {
        out[id] = gr;
    }
    Ok((g.value(loss).data[0], out))
}

pub fn loss_value(cfg: &ModelConfig, params: &ParamStore, samples: &Tensor, obj: &Objective) -> Result<f64> {
    let mut g = Graph::new();
    let loss = loss_graph(&mut g, cfg, params, samples, obj)?;
    Ok(g.value(loss).data[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms: with a step of
/// 1e-5 the central difference carries roundoff near 1e-11 for losses of
/// order one.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central-difference check of the parameters whose name contains one of
/// `prefixes` (all parameters when empty). At most `per_tensor` entries of
/// each tensor are checked, spread evenly.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &ParamStore,
    samples: &Tensor,
    obj: &Objective,
    prefixes: &[&str],
    per_tensor: usize,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(cfg, params, samples, obj)?;
    let mut entries = Vec::new();
    let mut work = params.clone();
    for id in 0..params.len() {
        let name = params.name(id).to_string();
        if !prefixes.is_empty() && !prefixes.iter().any(|p| name.contains(p)) {
            continue;
        }
        let n = params.by_id(id).len();
        if let Some(bad) = grads[id].iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} is {bad}")));
        }
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        let mut entry = GradCheckEntry { param: name, checked: 0, max_rel_err: 0.0, max_abs_err: 0.0 };
        for e in (0..n).step_by(stride) {
            let orig = params.by_id(id).data[e];
            work.by_id_mut(id).data[e] = orig + FD_STEP;
            let lp = loss_value(cfg, &work, samples, obj)?;
            work.by_id_mut(id).data[e] = orig - FD_STEP;
            let lm = loss_value(cfg, &work, samples, obj)?;
            work.by_id_mut(id).data[e] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = grads[id][e];
            entry.checked += 1;
            entry.max_rel_err = entry.max_rel_err.max(rel_err(a, numeric));
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
        }
        entries.push(entry);
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let op = match obj {
        Objective::CrossEntropy { .. } => "encoder+cross_entropy",
        Objective::SiLog { .. } => "unet+si_log",
    };
    Ok(GradCheckReport { op: op.into(), entries, max_rel_err, tolerance, pass: max_rel_err < tolerance })
}

/// SGD with momentum: `v = mu v + g`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        for (id, (v, g)) in self.velocity.iter_mut().zip(grads).enumerate() {
            let p = params.by_id_mut(id);
            for ((pi, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

/// Mean loss and gradients over a batch. Items run in parallel; the
/// reduction is sequential so results do not depend on scheduling.
pub fn batch_grads(cfg: &ModelConfig, params: &ParamStore, batch: &[(&Tensor, Objective)]) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_item: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|(x, obj)| loss_and_grads(cfg, params, x, obj))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, gs) in per_item {
        loss += l * scale;
        for (t, g) in total.iter_mut().zip(gs) {
            t.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
        }
    }
    Ok((loss, total))
}

pub fn predict_class(cfg: &ModelConfig, params: &ParamStore, samples: &Tensor) -> Result<usize> {
    let mut g = Graph::new();
    let x = g.input(samples.clone());
    let (logits, _) = classifier_graph(&mut g, cfg, params, x)?;
    Ok(argmax(&g.value(logits).data))
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// First step (1-based) after which every training item was classified
    /// correctly.
    pub solved_at: Option<usize>,
}

/// Full-batch SGD on a classification set. Stops early once training
/// accuracy reaches 1.
pub fn train_classifier(
    cfg: &ModelConfig,
    params: &mut ParamStore,
    data: &[(Tensor, usize)],
    steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<TrainLog> {
    let mut opt = Sgd::new(params, lr, momentum);
    let batch: Vec<(&Tensor, Objective)> =
        data.iter().map(|(x, y)| (x, Objective::CrossEntropy { label: *y })).collect();
    let mut log = TrainLog { losses: Vec::new(), accuracies: Vec::new(), solved_at: None };
    for step in 1..=steps {
        let (loss, grads) = batch_grads(cfg, params, &batch)?;
        opt.step(params, &grads);
        let correct: Vec<bool> = data
            .par_iter()
            .map(|(x, y)| predict_class(cfg, params, x).map(|p| p == *y))
            .collect::<Result<_>>()?;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / data.len().max(1) as f64;
        log.losses.push(loss);
        log.accuracies.push(acc);
        if acc == 1.0 {
            log.solved_at = Some(step);
            break;
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    tensors: Vec<CheckpointEntry>,
}

/// Writes one `.npy` per tensor plus `manifest.json` listing names and
/// shapes in store order.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("{name}.npy");
        npy::write(&dir.join(&file), &t.shape, &t.data)?;
        tensors.push(CheckpointEntry { name: name.to_string(), shape: t.shape.clone(), file });
    }
    let manifest = CheckpointManifest { config: cfg.clone(), tensors };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ParamStore)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut params = ParamStore::new();
    for e in manifest.tensors {
        let arr = npy::read(&dir.join(&e.file))?;
        if arr.shape != e.shape {
            return Err(Error::Parse(format!("{}: shape {:?} != manifest {:?}", e.file, arr.shape, e.shape)));
        }
        params.insert(&e.name, Tensor::new(arr.shape, arr.data)?);
    }
    let expected = init_params(&manifest.config, 0)?;
    for (name, t) in expected.iter() {
        let got = params.get(name)?;
        if got.shape != t.shape {
            return Err(Error::Parse(format!("{name}: shape {:?} does not fit the config ({:?})", got.shape, t.shape)));
        }
    }
    Ok((manifest.config, params))
}
