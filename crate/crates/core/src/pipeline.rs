//! Synthetic wide-angle datasets, xi sweeps, sensitivity matrices and
//! external xi ingestion.
//!
//! Manifests are JSON lines: one `params` record, then one record per item
//! (and per skipped source). Every random draw comes from a ChaCha stream
//! keyed by `(seed, item index)`, so items can be generated in any order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::imageops::{
    downsample_box, downsample_nearest, read_png, warp_pano_to_lens, warp_perspective_to_lens, write_png,
    write_png16, ImageBuffer, Panorama, Sampler,
};
use crate::lens::LensProjection;
use crate::model::{depth_metrics, forward_unet, predict_class, prepare, ModelConfig};

/// 16-bit depth PNGs store millimetres.
pub const DEPTH_PNG_SCALE: f64 = 1000.0;
pub const DEFAULT_DEPTH_FOV_DEG: f64 = 175.0;
pub const DEFAULT_SRC_FOV_DEG: f64 = 90.0;
pub const XI_GRID_NOTE: &str = "xi grid read as 10 steps of 0.1 over [0, 1] (11 values)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionLevel {
    VeryLow,
    Low,
    Medium,
    High,
}

impl DistortionLevel {
    pub const ALL: [DistortionLevel; 4] = [Self::VeryLow, Self::Low, Self::Medium, Self::High];

    pub fn interval(self) -> [f64; 2] {
        match self {
            Self::VeryLow => [0.0, 0.05],
            Self::Low => [0.2, 0.35],
            Self::Medium => [0.5, 0.7],
            Self::High => [0.85, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::VeryLow => "very_low",
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }

    pub fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        let [lo, hi] = self.interval();
        rng.random_range(lo..=hi)
    }
}

impl FromStr for DistortionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown distortion level {s:?} (very_low, low, medium, high)")))
    }
}

/// `steps + 1` evenly spaced values over `[0, 1]`.
pub fn xi_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps.max(1) as f64).collect()
}

/// Offsets `k / 10` for `k` in `[-4, 4]`.
pub fn default_dxi_grid() -> Vec<f64> {
    (-4..=4).map(|k| k as f64 / 10.0).collect()
}

/// Per-item generator: stream `item` of `seed`, advanced to `epoch`.
pub fn item_rng(seed: u64, item: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng.set_word_pos((epoch as u128) << 32);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Classification,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub kind: DatasetKind,
    pub level: DistortionLevel,
    pub split: Split,
    pub seed: u64,
    /// Side of the stored (downsampled) images.
    pub out_size: usize,
    /// Side of the warp before downsampling; the source side when absent.
    pub native_size: Option<usize>,
    /// Full field of view of perspective sources (classification).
    pub src_fov_deg: f64,
    /// Full field of view of the wide-angle lens.
    pub fov_deg: f64,
}

impl GenerationParams {
    pub fn classification(level: DistortionLevel, split: Split, seed: u64, out_size: usize) -> Self {
        Self {
            kind: DatasetKind::Classification,
            level,
            split,
            seed,
            out_size,
            native_size: None,
            src_fov_deg: DEFAULT_SRC_FOV_DEG,
            fov_deg: DEFAULT_DEPTH_FOV_DEG,
        }
    }

    pub fn depth(level: DistortionLevel, split: Split, seed: u64, out_size: usize) -> Self {
        Self { kind: DatasetKind::Depth, ..Self::classification(level, split, seed, out_size) }
    }

    pub fn theta_max_deg(&self) -> f64 {
        self.fov_deg / 2.0
    }

    pub fn lens(&self, xi: f64) -> Result<LensProjection> {
        LensProjection::spherical_normalized(xi, self.theta_max_deg())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub index: u64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// xi used to render the stored image.
    pub xi: f64,
    /// Interval train items redraw xi from every epoch.
    pub xi_interval: [f64; 2],
    /// Externally estimated xi used on the model side.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw_deg: Option<f64>,
    pub seed: u64,
    pub split: Split,
    pub lens: LensProjection,
}

impl ManifestItem {
    /// xi for `epoch`: test items keep the recorded value, train items redraw.
    pub fn epoch_xi(&self, level: DistortionLevel, epoch: u64) -> f64 {
        match self.split {
            Split::Test => self.xi,
            Split::Train if epoch == 0 => self.xi,
            Split::Train => level.sample(&mut item_rng(self.seed, self.index, epoch)),
        }
    }

    /// Model-side correction `xi_hat - xi`, rounded to 1e-12 so that text
    /// round-trips of xi_hat do not leak into reports.
    pub fn xi_offset(&self) -> f64 {
        self.xi_hat.map_or(0.0, |h| ((h - self.xi) * 1e12).round() / 1e12)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub source: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ManifestLine {
    Params(GenerationParams),
    Item(ManifestItem),
    Skipped(SkippedItem),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub params: GenerationParams,
    pub items: Vec<ManifestItem>,
    pub skipped: Vec<SkippedItem>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ManifestLine::Params(self.params.clone()))?;
        out.push('\n');
        for it in &self.items {
            out.push_str(&serde_json::to_string(&ManifestLine::Item(it.clone()))?);
            out.push('\n');
        }
        for s in &self.skipped {
            out.push_str(&serde_json::to_string(&ManifestLine::Skipped(s.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut params = None;
        let mut items = Vec::new();
        let mut skipped = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestLine =
                serde_json::from_str(line).map_err(|e| Error::Parse(format!("manifest line {}: {e}", n + 1)))?;
            match rec {
                ManifestLine::Params(p) if params.is_none() => params = Some(p),
                ManifestLine::Params(_) => {
                    return Err(Error::Parse(format!("manifest line {}: second params record", n + 1)))
                }
                ManifestLine::Item(i) => items.push(i),
                ManifestLine::Skipped(s) => skipped.push(s),
            }
        }
        let params = params.ok_or_else(|| Error::Parse("manifest has no params record".into()))?;
        Ok(Self { params, items, skipped })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Source images with optional class: `dir/<class>/*.png`, or a flat
/// directory of unlabeled images.
fn classification_sources(dir: &Path) -> Result<Vec<(PathBuf, Option<(usize, String)>)>> {
    let entries = sorted_entries(dir)?;
    let classes: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut out = Vec::new();
    if classes.is_empty() {
        out.extend(entries.iter().filter(|p| is_image(p)).map(|p| (p.clone(), None)));
    } else {
        for (label, cdir) in classes.into_iter().enumerate() {
            let name = cdir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for p in sorted_entries(cdir)?.into_iter().filter(|p| is_image(p)) {
                out.push((p, Some((label, name.clone()))));
            }
        }
    }
    Ok(out)
}

/// Largest centered square.
pub fn center_square(img: &ImageBuffer) -> ImageBuffer {
    let s = img.h.min(img.w);
    let (y0, x0) = ((img.h - s) / 2, (img.w - s) / 2);
    let mut data = Vec::with_capacity(s * s * img.c);
    for y in 0..s {
        for x in 0..s {
            data.extend_from_slice(img.pixel(x0 + x, y0 + y));
        }
    }
    ImageBuffer { h: s, w: s, c: img.c, data, mask: None }
}

/// Converts between gray and RGB by averaging or replicating channels.
pub fn to_channels(img: &ImageBuffer, c: usize) -> Result<ImageBuffer> {
    if img.c == c {
        return Ok(img.clone());
    }
    let data: Vec<f64> = match (img.c, c) {
        (3, 1) => img.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
        (1, 3) => img.data.iter().flat_map(|&v| [v, v, v]).collect(),
        (a, b) => return Err(Error::Contract(format!("cannot convert {a} channels to {b}"))),
    };
    let out = ImageBuffer::new(img.h, img.w, c, data)?;
    match &img.mask {
        Some(m) => out.with_mask(m.clone()),
        None => Ok(out),
    }
}

/// Warps a perspective source at native size, then area-downsamples.
pub fn render_classification(src: &ImageBuffer, xi: f64, params: &GenerationParams) -> Result<ImageBuffer> {
    let sq = center_square(src);
    let native = params.native_size.unwrap_or(sq.h);
    let lens = params.lens(xi)?;
    let warped = warp_perspective_to_lens(&sq, params.src_fov_deg.to_radians(), &lens, native)?;
    if native == params.out_size {
        return Ok(warped);
    }
    downsample_box(&warped, params.out_size, params.out_size)
}

/// Warps panorama RGB (bilinear) and depth (nearest) at native size, then
/// downsamples (area for RGB, nearest for depth). Zero depth is invalid.
pub fn render_depth(
    rgb: &Panorama,
    depth: &Panorama,
    xi: f64,
    yaw_deg: f64,
    params: &GenerationParams,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let native = params.native_size.unwrap_or(rgb.image().h);
    let lens = params.lens(xi)?;
    let yaw = yaw_deg.to_radians();
    let img = warp_pano_to_lens(rgb, &lens, yaw, native, Sampler::Bilinear)?;
    let d = warp_pano_to_lens(depth, &lens, yaw, native, Sampler::Nearest)?;
    let (img, mut d) = if native == params.out_size {
        (img, d)
    } else {
        (downsample_box(&img, params.out_size, params.out_size)?, downsample_nearest(&d, params.out_size, params.out_size)?)
    };
    let mask: Vec<bool> = d.valid_mask().iter().zip(&d.data).map(|(&m, &v)| m && v > 0.0).collect();
    d.mask = Some(mask);
    Ok((img, d))
}

fn item_id(index: usize) -> String {
    format!("{index:06}")
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Renders a classification set from `src_dir` into `out_dir/images` and
/// writes `out_dir/manifest.jsonl`. Unreadable sources are recorded as
/// skipped.
pub fn synth_classification_set(src_dir: &Path, out_dir: &Path, params: &GenerationParams) -> Result<DatasetManifest> {
    if params.kind != DatasetKind::Classification {
        return Err(Error::Contract("classification synthesis needs classification params".into()));
    }
    let sources = classification_sources(src_dir)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let results: Vec<std::result::Result<ManifestItem, SkippedItem>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, (path, class))| {
            let skip = |e: Error| SkippedItem { source: display(path), reason: e.to_string() };
            let src = read_png(path).map_err(skip)?;
            let xi = params.level.sample(&mut item_rng(params.seed, i as u64, 0));
            let img = render_classification(&src, xi, params).map_err(skip)?;
            let id = item_id(i);
            let name = format!("{id}_xi{xi:.4}.png");
            write_png(&img, &img_dir.join(&name)).map_err(skip)?;
            Ok(ManifestItem {
                id,
                index: i as u64,
                source: display(path),
                depth_source: None,
                label: class.as_ref().map(|c| c.0),
                class_name: class.as_ref().map(|c| c.1.clone()),
                image: format!("images/{name}"),
                depth: None,
                xi,
                xi_interval: params.level.interval(),
                xi_hat: None,
                yaw_deg: None,
                seed: params.seed,
                split: params.split,
                lens: params.lens(xi).map_err(skip)?,
            })
        })
        .collect();
    finish_manifest(out_dir, params, results)
}

fn finish_manifest(
    out_dir: &Path,
    params: &GenerationParams,
    results: Vec<std::result::Result<ManifestItem, SkippedItem>>,
) -> Result<DatasetManifest> {
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(i) => items.push(i),
            Err(s) => skipped.push(s),
        }
    }
    let manifest = DatasetManifest { params: params.clone(), items, skipped };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Panorama pairs: `name.png` with depth `name_depth.png` (16-bit, mm).
fn depth_sources(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| is_image(p) && !p.file_stem().is_some_and(|s| s.to_string_lossy().ends_with("_depth")))
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let d = p.with_file_name(format!("{stem}_depth.png"));
            (p, d)
        })
        .collect())
}

pub fn read_depth_png(path: &Path) -> Result<ImageBuffer> {
    let mut d = read_png(path)?;
    if d.c != 1 {
        return Err(Error::Contract(format!("{} is not a single-channel depth map", display(path))));
    }
    d.data.iter_mut().for_each(|v| *v *= 65535.0 / DEPTH_PNG_SCALE);
    Ok(d)
}

pub fn write_depth_png(depth: &ImageBuffer, path: &Path) -> Result<()> {
    write_png16(depth, path, DEPTH_PNG_SCALE)
}

fn load_pano_pair(rgb: &Path, depth: &Path) -> Result<(Panorama, Panorama)> {
    Ok((Panorama::new(read_png(rgb)?)?, Panorama::new(read_depth_png(depth)?)?))
}

/// Renders wide-angle RGB and depth crops from panoramas with a uniform
/// random yaw per item.
pub fn synth_depth_set(pano_dir: &Path, out_dir: &Path, params: &GenerationParams) -> Result<DatasetManifest> {
    if params.kind != DatasetKind::Depth {
        return Err(Error::Contract("depth synthesis needs depth params".into()));
    }
    let sources = depth_sources(pano_dir)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let results = sources
        .par_iter()
        .enumerate()
        .map(|(i, (rgb_path, depth_path))| {
            let skip = |e: Error| SkippedItem { source: display(rgb_path), reason: e.to_string() };
            let (rgb, depth) = load_pano_pair(rgb_path, depth_path).map_err(skip)?;
            let mut rng = item_rng(params.seed, i as u64, 0);
            let xi = params.level.sample(&mut rng);
            let yaw = rng.random_range(0.0..360.0);
            let (img, d) = render_depth(&rgb, &depth, xi, yaw, params).map_err(skip)?;
            let id = item_id(i);
            let stem = format!("{id}_xi{xi:.4}_yaw{yaw:.1}");
            write_png(&img, &img_dir.join(format!("{stem}.png"))).map_err(skip)?;
            write_depth_png(&d, &img_dir.join(format!("{stem}_depth.png"))).map_err(skip)?;
            Ok(ManifestItem {
                id,
                index: i as u64,
                source: display(rgb_path),
                depth_source: Some(display(depth_path)),
                label: None,
                class_name: None,
                image: format!("images/{stem}.png"),
                depth: Some(format!("images/{stem}_depth.png")),
                xi,
                xi_interval: params.level.interval(),
                xi_hat: None,
                yaw_deg: Some(yaw),
                seed: params.seed,
                split: params.split,
                lens: params.lens(xi).map_err(skip)?,
            })
        })
        .collect();
    finish_manifest(out_dir, params, results)
}

/// Reads `id,xi` rows (optional `id,xi` header, blank lines ignored) and
/// attaches each value to its item as `xi_hat`.
pub fn ingest_external_xi(manifest: &DatasetManifest, csv: &str) -> Result<DatasetManifest> {
    let mut values = std::collections::HashMap::new();
    for (n, raw) in csv.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (n == 0 && line.replace(' ', "").eq_ignore_ascii_case("id,xi")) {
            continue;
        }
        let bad = |why: &str| Error::Parse(format!("xi file line {}: {why}: {raw:?}", n + 1));
        let mut parts = line.split(',').map(str::trim);
        let (Some(id), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `id,xi`"));
        };
        let xi: f64 = v.parse().map_err(|_| bad("xi is not a number"))?;
        if !(0.0..=1.0).contains(&xi) {
            return Err(bad("xi outside [0, 1]"));
        }
        if values.insert(id.to_string(), xi).is_some() {
            return Err(bad("duplicate id"));
        }
    }
    let missing: Vec<String> =
        manifest.items.iter().filter(|i| !values.contains_key(&i.id)).map(|i| i.id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let mut out = manifest.clone();
    for it in &mut out.items {
        it.xi_hat = Some(values[&it.id]);
    }
    Ok(out)
}

/// Ground truth of a rendered test item.
#[derive(Clone, Debug)]
pub enum Target {
    Label(usize),
    /// Linear depth with validity mask.
    Depth(ImageBuffer),
}

#[derive(Clone, Debug)]
enum Source {
    Perspective(ImageBuffer),
    Pano { rgb: Panorama, depth: Panorama },
}

#[derive(Clone, Debug)]
pub struct TestItem {
    pub meta: ManifestItem,
    source: Source,
}

/// Test items with their sources in memory, ready to be re-rendered at any xi.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub params: GenerationParams,
    pub items: Vec<TestItem>,
}

impl TestSet {
    /// Loads the sources named by `manifest`.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let items = manifest
            .items
            .par_iter()
            .map(|m| {
                let source = match manifest.params.kind {
                    DatasetKind::Classification => Source::Perspective(read_png(Path::new(&m.source))?),
                    DatasetKind::Depth => {
                        let d = m
                            .depth_source
                            .as_ref()
                            .ok_or_else(|| Error::Parse(format!("item {} lacks a depth source", m.id)))?;
                        let (rgb, depth) = load_pano_pair(Path::new(&m.source), Path::new(d))?;
                        Source::Pano { rgb, depth }
                    }
                };
                Ok(TestItem { meta: m.clone(), source })
            })
            .collect::<Result<_>>()?;
        Ok(Self { params: manifest.params.clone(), items })
    }

    /// In-memory classification set.
    pub fn from_images(params: GenerationParams, items: Vec<(ManifestItem, ImageBuffer)>) -> Self {
        let items = items.into_iter().map(|(meta, img)| TestItem { meta, source: Source::Perspective(img) }).collect();
        Self { params, items }
    }

    /// In-memory depth set.
    pub fn from_panoramas(params: GenerationParams, items: Vec<(ManifestItem, Panorama, Panorama)>) -> Self {
        let items =
            items.into_iter().map(|(meta, rgb, depth)| TestItem { meta, source: Source::Pano { rgb, depth } }).collect();
        Self { params, items }
    }

    pub fn render(&self, item: &TestItem, xi: f64) -> Result<(ImageBuffer, Target)> {
        match &item.source {
            Source::Perspective(src) => {
                let label = item.meta.label.ok_or_else(|| Error::Contract(format!("item {} has no label", item.meta.id)))?;
                Ok((render_classification(src, xi, &self.params)?, Target::Label(label)))
            }
            Source::Pano { rgb, depth } => {
                let (img, d) = render_depth(rgb, depth, xi, item.meta.yaw_deg.unwrap_or(0.0), &self.params)?;
                Ok((img, Target::Depth(d)))
            }
        }
    }

    /// Replaces item metadata (e.g. after ingesting external xi).
    pub fn with_manifest(&self, manifest: &DatasetManifest) -> Result<Self> {
        let mut out = self.clone();
        for it in &mut out.items {
            it.meta = manifest
                .items
                .iter()
                .find(|m| m.id == it.meta.id)
                .cloned()
                .ok_or_else(|| Error::MissingIds(vec![it.meta.id.clone()]))?;
        }
        Ok(out)
    }
}

/// Scores one rendered item seen through the model-side lens.
pub trait Evaluator: Sync {
    fn metric(&self) -> &str;
    fn score(&self, img: &ImageBuffer, target: &Target, lens: &LensProjection) -> Result<f64>;
}

/// Top-1 accuracy of a classifier.
pub struct ClassifierEvaluator<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl Evaluator for ClassifierEvaluator<'_> {
    fn metric(&self) -> &str {
        "top1"
    }

    fn score(&self, img: &ImageBuffer, target: &Target, lens: &LensProjection) -> Result<f64> {
        let Target::Label(y) = target else {
            return Err(Error::Contract("classifier evaluation needs labels".into()));
        };
        let img = to_channels(img, self.cfg.in_channels)?;
        let prep = prepare(self.cfg, &img, lens)?;
        Ok(f64::from(u8::from(predict_class(self.cfg, self.params, &prep.samples)? == *y)))
    }
}

/// delta1 of a log-depth network.
pub struct DepthEvaluator<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl Evaluator for DepthEvaluator<'_> {
    fn metric(&self) -> &str {
        "delta1"
    }

    fn score(&self, img: &ImageBuffer, target: &Target, lens: &LensProjection) -> Result<f64> {
        let Target::Depth(gt) = target else {
            return Err(Error::Contract("depth evaluation needs depth maps".into()));
        };
        let img = to_channels(img, self.cfg.in_channels)?;
        let out = forward_unet(self.cfg, &img, lens, self.params)?;
        let gt = if (gt.h, gt.w) == (out.map.h, out.map.w) { gt.clone() } else { downsample_nearest(gt, out.map.h, out.map.w)? };
        let pred: Vec<f64> = out.map.data.iter().map(|v| v.exp()).collect();
        let mask: Vec<bool> = out.map.valid_mask().iter().zip(gt.valid_mask()).map(|(a, b)| *a && b).collect();
        Ok(depth_metrics(&pred, &gt.data, &mask)?.delta1)
    }
}

/// Wraps a closure as an evaluator.
pub struct FnEvaluator<F> {
    pub name: String,
    pub f: F,
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&ImageBuffer, &Target, &LensProjection) -> Result<f64> + Sync,
{
    fn metric(&self) -> &str {
        &self.name
    }

    fn score(&self, img: &ImageBuffer, target: &Target, lens: &LensProjection) -> Result<f64> {
        (self.f)(img, target, lens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub xi: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub dxi: f64,
    /// xi given to the model after clamping.
    pub model_xi: f64,
    pub clamped: bool,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub xi: f64,
    pub cells: Vec<SensitivityCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: String,
    pub note: String,
    pub n_items: usize,
    pub xi_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<SweepRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dxi_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub matrix: Vec<SensitivityRow>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Values of the sensitivity column for `dxi`.
    pub fn column(&self, dxi: f64) -> Option<Vec<f64>> {
        let j = self.dxi_grid.iter().position(|&d| d == dxi)?;
        Some(self.matrix.iter().map(|r| r.cells[j].value).collect())
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Domain(format!("xi grid must be non-empty and inside [0, 1], got {grid:?}")));
    }
    Ok(())
}

fn mean_score(eval: &dyn Evaluator, set: &TestSet, xi: f64, model_xi: impl Fn(&TestItem) -> f64 + Sync) -> Result<f64> {
    if set.items.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let scores: Vec<f64> = set
        .items
        .par_iter()
        .map(|it| {
            let (img, target) = set.render(it, xi)?;
            let lens = set.params.lens(model_xi(it))?;
            eval.score(&img, &target, &lens)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Re-renders every test item at each grid xi and averages the metric. The
/// model sees `xi + (xi_hat - xi_item)` when an external estimate exists.
pub fn sweep_eval(eval: &dyn Evaluator, set: &TestSet, grid: &[f64]) -> Result<SweepReport> {
    check_grid(grid)?;
    let rows = grid
        .iter()
        .map(|&xi| {
            let value = mean_score(eval, set, xi, |it| (xi + it.meta.xi_offset()).clamp(0.0, 1.0))?;
            Ok(SweepRow { xi, value })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        metric: eval.metric().to_string(),
        note: XI_GRID_NOTE.into(),
        n_items: set.items.len(),
        xi_grid: grid.to_vec(),
        rows,
        dxi_grid: Vec::new(),
        matrix: Vec::new(),
    })
}

/// Images rendered with true xi, model lens at `xi + dxi` clamped to [0, 1].
pub fn sensitivity(eval: &dyn Evaluator, set: &TestSet, xi_grid: &[f64], dxi_grid: &[f64]) -> Result<SweepReport> {
    check_grid(xi_grid)?;
    if dxi_grid.is_empty() || dxi_grid.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("dxi grid must be non-empty and finite".into()));
    }
    let matrix = xi_grid
        .iter()
        .map(|&xi| {
            let cells = dxi_grid
                .iter()
                .map(|&dxi| {
                    let raw = xi + dxi;
                    let model_xi = raw.clamp(0.0, 1.0);
                    let value = mean_score(eval, set, xi, |_| model_xi)?;
                    Ok(SensitivityCell { dxi, model_xi, clamped: model_xi != raw, value })
                })
                .collect::<Result<_>>()?;
            Ok(SensitivityRow { xi, cells })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        metric: eval.metric().to_string(),
        note: format!("{XI_GRID_NOTE}; model xi = clamp(xi + dxi, 0, 1)"),
        n_items: set.items.len(),
        xi_grid: xi_grid.to_vec(),
        rows: Vec::new(),
        dxi_grid: dxi_grid.to_vec(),
        matrix,
    })
}

/// Draws a metric-vs-xi curve (sweep) or a gray heat map (sensitivity).
pub fn plot_report(report: &SweepReport, path: &Path) -> Result<()> {
    let (h, w) = (240usize, 320usize);
    let mut img = ImageBuffer::filled(h, w, 3, 1.0);
    let (x0, x1, y0, y1) = (30.0, w as f64 - 10.0, h as f64 - 25.0, 10.0);
    let mut put = |x: f64, y: f64, rgb: [f64; 3]| {
        let (px, py) = (x.round() as isize, y.round() as isize);
        if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
            let i = (py as usize * w + px as usize) * 3;
            img.data[i..i + 3].copy_from_slice(&rgb);
        }
    };
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        put(x0 + t * (x1 - x0), y0, [0.0; 3]);
        put(x0, y0 + t * (y1 - y0), [0.0; 3]);
    }
    let to_xy = |xi: f64, v: f64| (x0 + xi * (x1 - x0), y0 + v.clamp(0.0, 1.0) * (y1 - y0));
    if report.matrix.is_empty() {
        for pair in report.rows.windows(2) {
            let (a, b) = (to_xy(pair[0].xi, pair[0].value), to_xy(pair[1].xi, pair[1].value));
            for s in 0..=200 {
                let t = s as f64 / 200.0;
                put(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), [0.1, 0.3, 0.9]);
            }
        }
        for r in &report.rows {
            let (x, y) = to_xy(r.xi, r.value);
            for dx in -2..=2 {
                for dy in -2..=2 {
                    put(x + dx as f64, y + dy as f64, [0.8, 0.1, 0.1]);
                }
            }
        }
    } else {
        let (nr, nc) = (report.matrix.len(), report.dxi_grid.len());
        let (cw, ch) = ((x1 - x0) / nc as f64, (y0 - y1) / nr as f64);
        for (i, row) in report.matrix.iter().enumerate() {
            for (j, cell) in row.cells.iter().enumerate() {
                let g = 1.0 - cell.value.clamp(0.0, 1.0);
                let tint = if cell.clamped { [g, g, (g + 0.3).min(1.0)] } else { [g; 3] };
                let (cx, cy) = (x0 + j as f64 * cw, y1 + (nr - 1 - i) as f64 * ch);
                for a in 1..(cw as usize).max(2) {
                    for b in 1..(ch as usize).max(2) {
                        put(cx + a as f64, cy + b as f64, tint);
                    }
                }
            }
        }
    }
    write_png(&img, path)
}

/// Human-readable table of a report.
pub fn report_table(report: &SweepReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} ({} items); {}", report.metric, report.n_items, report.note);
    if report.matrix.is_empty() {
        for r in &report.rows {
            let _ = writeln!(s, "xi={:.2}\t{:.4}", r.xi, r.value);
        }
    } else {
        let head: Vec<String> = report.dxi_grid.iter().map(|d| format!("{d:+.1}")).collect();
        let _ = writeln!(s, "xi\\dxi\t{}", head.join("\t"));
        for r in &report.matrix {
            let cells: Vec<String> =
                r.cells.iter().map(|c| format!("{:.4}{}", c.value, if c.clamped { "*" } else { "" })).collect();
            let _ = writeln!(s, "{:.2}\t{}", r.xi, cells.join("\t"));
        }
        let _ = writeln!(s, "* model xi clamped to [0, 1]");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::checkerboard;

    fn write_sources(dir: &Path, n_per_class: usize) {
        for (class, squares) in [("coarse", 2usize), ("fine", 8)] {
            let d = dir.join(class);
            fs::create_dir_all(&d).unwrap();
            for i in 0..n_per_class {
                let img = checkerboard(48 + 4 * i, squares).unwrap();
                write_png(&img, &d.join(format!("{i}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn levels_and_grids() {
        assert_eq!(DistortionLevel::from_str("very_low").unwrap().interval(), [0.0, 0.05]);
        assert_eq!(DistortionLevel::High.interval(), [0.85, 1.0]);
        assert!(DistortionLevel::from_str("extreme").is_err());
        let g = xi_grid(10);
        assert_eq!(g.len(), 11);
        assert_eq!((g[0], g[4], g[10]), (0.0, 0.4, 1.0));
        assert_eq!(default_dxi_grid(), vec![-0.4, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn item_streams_are_independent_of_order() {
        let a: f64 = item_rng(7, 3, 0).random();
        let _: f64 = item_rng(7, 2, 0).random();
        let b: f64 = item_rng(7, 3, 0).random();
        assert_eq!(a, b);
        let e1: f64 = item_rng(7, 3, 1).random();
        assert_ne!(a, e1);
    }

    #[test]
    fn high_level_mean_is_centered() {
        let n = 100;
        let mean = (0..n).map(|i| DistortionLevel::High.sample(&mut item_rng(11, i, 0))).sum::<f64>() / n as f64;
        // uniform on [0.85, 1]: sd of the mean = 0.15 / sqrt(12 n); 99% band ~ 2.58 sd
        let band = 2.58 * 0.15 / (12.0 * n as f64).sqrt();
        assert!((mean - 0.925).abs() < band, "{mean}");
        assert!((0.9..=0.95).contains(&mean));
    }

    #[test]
    fn classification_synthesis_is_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        write_sources(&src, 3);
        fs::write(src.join("coarse").join("broken.png"), b"not a png").unwrap();
        let params = GenerationParams::classification(DistortionLevel::VeryLow, Split::Test, 5, 32);
        let a = synth_classification_set(&src, &tmp.path().join("a"), &params).unwrap();
        let b = synth_classification_set(&src, &tmp.path().join("b"), &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.items.len(), 6);
        assert_eq!(a.skipped.len(), 1);
        assert!(a.items.iter().all(|i| (0.0..=0.05).contains(&i.xi)));
        assert_eq!(
            fs::read(tmp.path().join("a/manifest.jsonl")).unwrap(),
            fs::read(tmp.path().join("b/manifest.jsonl")).unwrap()
        );
        for it in &a.items {
            assert_eq!(fs::read(tmp.path().join("a").join(&it.image)).unwrap(), fs::read(tmp.path().join("b").join(&it.image)).unwrap());
            assert!(it.image.contains(&format!("_xi{:.4}", it.xi)));
        }
        let back = DatasetManifest::read(&tmp.path().join("a/manifest.jsonl")).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.items[0].label, Some(0));
        assert_eq!(back.items[5].class_name.as_deref(), Some("fine"));
    }

    #[test]
    fn train_items_redraw_per_epoch() {
        let tmp = tempfile::tempdir().unwrap();
        write_sources(&tmp.path().join("src"), 1);
        let params = GenerationParams::classification(DistortionLevel::Medium, Split::Train, 2, 32);
        let m = synth_classification_set(&tmp.path().join("src"), &tmp.path().join("out"), &params).unwrap();
        let it = &m.items[0];
        assert_eq!(it.epoch_xi(params.level, 0), it.xi);
        let e1 = it.epoch_xi(params.level, 1);
        assert_ne!(e1, it.xi);
        assert!((0.5..=0.7).contains(&e1));
        let mut test = it.clone();
        test.split = Split::Test;
        assert_eq!(test.epoch_xi(params.level, 3), test.xi);
    }

    fn pano_pair(h: usize, depth: f64) -> (ImageBuffer, ImageBuffer) {
        let rgb = ImageBuffer::from_fn(h, 2 * h, 3, |x, y, c| (0.5 + 0.4 * (x * 3.0 + c as f64).sin() * y.cos()).clamp(0.0, 1.0));
        (rgb, ImageBuffer::filled(h, 2 * h, 1, depth))
    }

    #[test]
    fn depth_synthesis_records_yaw_and_fov() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("panos");
        fs::create_dir_all(&src).unwrap();
        for i in 0..2 {
            let (rgb, d) = pano_pair(32, 2.5);
            write_png(&rgb, &src.join(format!("p{i}.png"))).unwrap();
            write_depth_png(&d, &src.join(format!("p{i}_depth.png"))).unwrap();
        }
        let params = GenerationParams::depth(DistortionLevel::Low, Split::Test, 4, 16);
        let m = synth_depth_set(&src, &tmp.path().join("out"), &params).unwrap();
        assert_eq!(m.items.len(), 2);
        for it in &m.items {
            assert_eq!(it.lens.theta_max_deg(), 87.5);
            assert!((0.0..360.0).contains(&it.yaw_deg.unwrap()));
            let d = read_depth_png(&tmp.path().join("out").join(it.depth.as_ref().unwrap())).unwrap();
            let valid: Vec<f64> = d.data.iter().copied().filter(|&v| v > 0.0).collect();
            assert!(!valid.is_empty());
            assert!(valid.iter().all(|v| (v - 2.5).abs() < 1e-9));
        }
        let again = synth_depth_set(&src, &tmp.path().join("again"), &params).unwrap();
        assert_eq!(again.to_jsonl().unwrap(), m.to_jsonl().unwrap());
    }

    fn toy_set() -> TestSet {
        let params = GenerationParams::classification(DistortionLevel::Low, Split::Test, 1, 16);
        let items = (0..4)
            .map(|i| {
                let xi = 0.2 + 0.05 * i as f64;
                let meta = ManifestItem {
                    id: item_id(i),
                    index: i as u64,
                    source: String::new(),
                    depth_source: None,
                    label: Some(i % 2),
                    class_name: None,
                    image: String::new(),
                    depth: None,
                    xi,
                    xi_interval: params.level.interval(),
                    xi_hat: None,
                    yaw_deg: None,
                    seed: 1,
                    split: Split::Test,
                    lens: params.lens(xi).unwrap(),
                };
                (meta, checkerboard(32, 2 + 2 * (i % 2)).unwrap())
            })
            .collect();
        TestSet::from_images(params, items)
    }

    /// Scores 1 when the model-side xi is within 0.15 of the true one,
    /// recovered from the rendered image's valid area.
    fn lens_probe() -> FnEvaluator<impl Fn(&ImageBuffer, &Target, &LensProjection) -> Result<f64> + Sync> {
        FnEvaluator {
            name: "probe".into(),
            f: |img: &ImageBuffer, _: &Target, lens: &LensProjection| Ok(img.data.iter().sum::<f64>() / img.data.len() as f64 + lens.xi().unwrap()),
        }
    }

    #[test]
    fn sweep_and_sensitivity_axes() {
        let set = toy_set();
        let ev = lens_probe();
        let rep = sweep_eval(&ev, &set, &xi_grid(10)).unwrap();
        assert_eq!(rep.rows.len(), 11);
        assert!(sweep_eval(&ev, &set, &[1.2]).is_err());

        let sens = sensitivity(&ev, &set, &[0.4, 0.95], &default_dxi_grid()).unwrap();
        assert_eq!((sens.matrix.len(), sens.matrix[0].cells.len()), (2, 9));
        let corner = &sens.matrix[1].cells[8];
        assert_eq!((corner.model_xi, corner.clamped), (1.0, true));
        assert!(!sens.matrix[0].cells[8].clamped);

        let plain = sweep_eval(&ev, &set, &[0.4, 0.95]).unwrap();
        let zero: Vec<f64> = plain.rows.iter().map(|r| r.value).collect();
        assert_eq!(sens.column(0.0).unwrap(), zero);
    }

    #[test]
    fn ingest_semantics() {
        let set = toy_set();
        let manifest = DatasetManifest {
            params: set.params.clone(),
            items: set.items.iter().map(|i| i.meta.clone()).collect(),
            skipped: vec![],
        };
        let exact: String = manifest.items.iter().map(|i| format!("{},{}\n", i.id, i.xi)).collect();
        let ingested = ingest_external_xi(&manifest, &format!("id,xi\n{exact}")).unwrap();
        let ev = lens_probe();
        let grid = xi_grid(10);
        let a = sweep_eval(&ev, &set, &grid).unwrap().to_json().unwrap();
        let b = sweep_eval(&ev, &set.with_manifest(&ingested).unwrap(), &grid).unwrap().to_json().unwrap();
        assert_eq!(a, b);

        let shifted: String = manifest.items.iter().map(|i| format!("{},{:.6}\n", i.id, i.xi + 0.1)).collect();
        let ingested = ingest_external_xi(&manifest, &shifted).unwrap();
        let sweep = sweep_eval(&ev, &set.with_manifest(&ingested).unwrap(), &grid).unwrap();
        let sens = sensitivity(&ev, &set, &grid, &default_dxi_grid()).unwrap();
        let col = sens.column(0.1).unwrap();
        assert_eq!(sweep.rows.iter().map(|r| r.value).collect::<Vec<_>>(), col);

        let missing = ingest_external_xi(&manifest, "000000,0.2\n").unwrap_err();
        assert!(matches!(missing, Error::MissingIds(ref ids) if ids.len() == 3));
        let err = ingest_external_xi(&manifest, "000000,0.2\n000001;0.3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(ingest_external_xi(&manifest, "000000,1.5\n").is_err());
    }

    #[test]
    fn reports_plot_and_tabulate() {
        let set = toy_set();
        let ev = lens_probe();
        let tmp = tempfile::tempdir().unwrap();
        let rep = sweep_eval(&ev, &set, &xi_grid(4)).unwrap();
        plot_report(&rep, &tmp.path().join("s.png")).unwrap();
        let sens = sensitivity(&ev, &set, &[0.0, 0.5], &[-0.1, 0.0]).unwrap();
        plot_report(&sens, &tmp.path().join("m.png")).unwrap();
        let table = report_table(&sens);
        assert!(table.lines().nth(2).unwrap().contains('*'), "{table}");
        assert!(!table.lines().nth(3).unwrap().contains('*'), "{table}");
        let back: SweepReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }
}
