//! Polar partition of the unit image disk, per-patch sampling patterns and the
//! fixed k-nearest-neighbour table that maps polar samples back to pixels.
//!
//! Radial boundaries are equiangular in the incident angle and pushed through
//! the lens curve, so two lenses with the same field of view produce
//! different radii. Azimuth boundaries are equiangular over `[0, 2pi]`.
//! Patches are indexed radius-major: `patch = ir * n_phi + iphi`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::imageops::pixel_center_normalized;
use crate::lens::LensProjection;

/// Samples per patch along radius and azimuth when nothing else is configured.
pub const DEFAULT_SAMPLES_PER_AXIS: usize = 10;
/// Jitter fraction used when jitter is enabled without an explicit amount.
pub const DEFAULT_JITTER_FRACTION: f64 = 0.25;
/// Neighbours per pixel in the polar-to-cartesian table.
pub const DEFAULT_KNN_K: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub n_r: usize,
    pub n_phi: usize,
    pub theta_bounds: Vec<f64>,
    pub r_bounds: Vec<f64>,
    pub phi_bounds: Vec<f64>,
}

impl PolarGrid {
    pub fn n_patches(&self) -> usize {
        self.n_r * self.n_phi
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_bounds[self.n_r]
    }

    /// `(ir, iphi)` of the cell containing normalized point `(x, y)`, or
    /// `None` outside the unit disk.
    pub fn cell_of(&self, lens: &LensProjection, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = x.hypot(y);
        if r > 1.0 {
            return None;
        }
        let theta = lens.unproject(r.min(lens.max_radius())).ok()?;
        let ir = ((theta / self.theta_max() * self.n_r as f64) as usize).min(self.n_r - 1);
        let phi = y.atan2(x).rem_euclid(TAU);
        let iphi = ((phi / TAU * self.n_phi as f64) as usize).min(self.n_phi - 1);
        Some((ir, iphi))
    }
}

/// Splits the unit disk into `n_r` radial rings (equiangular in theta) and
/// `n_phi` azimuth sectors.
pub fn partition(lens: &LensProjection, n_r: usize, n_phi: usize) -> Result<PolarGrid> {
    if n_r == 0 || n_phi == 0 {
        return Err(Error::Contract(format!("partition counts must be >= 1, got {n_r} x {n_phi}")));
    }
    if !lens.is_normalized() {
        return Err(Error::Contract(format!(
            "partition needs a normalized lens, P(theta_max) = {}",
            lens.max_radius()
        )));
    }
    let theta_max = lens.theta_max();
    let theta_bounds: Vec<f64> =
        (0..=n_r).map(|i| i as f64 * theta_max / n_r as f64).collect();
    let mut r_bounds = theta_bounds
        .iter()
        .map(|&t| lens.project(t))
        .collect::<Result<Vec<_>>>()?;
    r_bounds[n_r] = 1.0;
    let phi_bounds = (0..=n_phi).map(|i| i as f64 * TAU / n_phi as f64).collect();
    Ok(PolarGrid { n_r, n_phi, theta_bounds, r_bounds, phi_bounds })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Maximum displacement as a fraction of the local sample spacing.
    pub fraction: f64,
    pub seed: u64,
}

/// Sample locations for every patch, laid out patch by patch and, inside a
/// patch, radius-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPattern {
    pub n_r: usize,
    pub n_phi: usize,
    pub n_sr: usize,
    pub n_sphi: usize,
    /// Normalized cartesian coordinates of each sample.
    pub points: Vec<[f64; 2]>,
    /// `(theta, phi)` of each sample.
    pub angles: Vec<[f64; 2]>,
    pub jitter: Option<Jitter>,
}

impl SamplingPattern {
    pub fn samples_per_patch(&self) -> usize {
        self.n_sr * self.n_sphi
    }

    pub fn n_patches(&self) -> usize {
        self.n_r * self.n_phi
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn patch_of_sample(&self, sample: usize) -> usize {
        sample / self.samples_per_patch()
    }

    pub fn patch_points(&self, patch: usize) -> &[[f64; 2]] {
        let s = self.samples_per_patch();
        &self.points[patch * s..(patch + 1) * s]
    }
}

/// Builds the distortion-aware sampling pattern of `grid`: equiangular in
/// theta within each ring (mapped through the lens), equiangular in azimuth.
pub fn sampling_grid(
    grid: &PolarGrid,
    lens: &LensProjection,
    n_sr: usize,
    n_sphi: usize,
    jitter: Option<Jitter>,
) -> Result<SamplingPattern> {
    if n_sr == 0 || n_sphi == 0 {
        return Err(Error::Contract("samples per patch must be >= 1".into()));
    }
    for (t, r) in grid.theta_bounds.iter().zip(&grid.r_bounds) {
        if (lens.project(*t)? - r).abs() > 1e-9 {
            return Err(Error::Contract("grid was not built from this lens".into()));
        }
    }
    if let Some(j) = jitter {
        if !(0.0..0.5).contains(&j.fraction) {
            return Err(Error::Contract(format!(
                "jitter fraction must lie in [0, 0.5), got {}",
                j.fraction
            )));
        }
    }
    let mut rng = jitter.map(|j| ChaCha8Rng::seed_from_u64(j.seed));
    let frac = jitter.map_or(0.0, |j| j.fraction);

    let total = grid.n_patches() * n_sr * n_sphi;
    let mut points = Vec::with_capacity(total);
    let mut angles = Vec::with_capacity(total);
    for ir in 0..grid.n_r {
        let (t0, t1) = (grid.theta_bounds[ir], grid.theta_bounds[ir + 1]);
        for ip in 0..grid.n_phi {
            let (p0, p1) = (grid.phi_bounds[ip], grid.phi_bounds[ip + 1]);
            for jr in 0..n_sr {
                for jp in 0..n_sphi {
                    let (ur, up) = match rng.as_mut() {
                        Some(rng) => (
                            frac * rng.random_range(-1.0..=1.0),
                            frac * rng.random_range(-1.0..=1.0),
                        ),
                        None => (0.0, 0.0),
                    };
                    let theta = t0 + (jr as f64 + 0.5 + ur) / n_sr as f64 * (t1 - t0);
                    let phi = p0 + (jp as f64 + 0.5 + up) / n_sphi as f64 * (p1 - p0);
                    let r = lens.project(theta)?;
                    points.push([r * phi.cos(), r * phi.sin()]);
                    angles.push([theta, phi]);
                }
            }
        }
    }
    Ok(SamplingPattern {
        n_r: grid.n_r,
        n_phi: grid.n_phi,
        n_sr,
        n_sphi,
        points,
        angles,
        jitter,
    })
}

/// Fixed polar-to-cartesian lookup: the `k` nearest samples of every pixel
/// center, each weighted `1/k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnTable {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// Row-major `h * w * k` sample indices, nearest first.
    pub indices: Vec<usize>,
    /// Pixels whose center lies inside the unit disk.
    pub valid: Vec<bool>,
}

impl KnnTable {
    pub fn weight(&self) -> f64 {
        1.0 / self.k as f64
    }

    pub fn neighbors(&self, pixel: usize) -> &[usize] {
        &self.indices[pixel * self.k..(pixel + 1) * self.k]
    }

    /// Averages per-sample features (`n_samples x c`, row-major) into an
    /// `h x w x c` raster.
    pub fn remap(&self, features: &[f64], c: usize) -> Vec<f64> {
        let wgt = self.weight();
        let mut out = vec![0.0; self.h * self.w * c];
        for (pixel, dst) in out.chunks_exact_mut(c).enumerate() {
            for &s in self.neighbors(pixel) {
                for (d, v) in dst.iter_mut().zip(&features[s * c..(s + 1) * c]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= wgt);
        }
        out
    }
}

/// Uniform bucket grid over the sample bounding box.
struct BucketIndex {
    x0: f64,
    y0: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl BucketIndex {
    fn new(points: &[[f64; 2]]) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let extent = (x1 - x0).max(y1 - y0).max(1e-9);
        let per_axis = ((points.len() as f64 / 4.0).sqrt().ceil() as usize).clamp(1, 512);
        let cell = extent / per_axis as f64;
        let nx = (((x1 - x0) / cell) as usize + 1).min(per_axis + 1);
        let ny = (((y1 - y0) / cell) as usize + 1).min(per_axis + 1);
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut index = Self { x0, y0, cell, nx, ny, buckets: Vec::new() };
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = index.cell_coords(p[0], p[1]);
            buckets[cy * nx + cx].push(i);
        }
        index.buckets = buckets;
        index
    }

    fn cell_coords(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = ((x - self.x0) / self.cell).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let cy = ((y - self.y0) / self.cell).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (cx, cy)
    }

    /// Nearest `k` points to `q`; ties resolved by lower index.
    fn nearest(&self, points: &[[f64; 2]], q: [f64; 2], k: usize, out: &mut Vec<usize>) {
        // Distance from q to the boundary of its (possibly clamped) cell
        // region grows by at least `cell` per ring, measured from the query.
        let qx = (q[0] - self.x0) / self.cell;
        let qy = (q[1] - self.y0) / self.cell;
        let (cx, cy) = self.cell_coords(q[0], q[1]);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let max_ring = self.nx.max(self.ny);
        for ring in 0..=max_ring {
            let lo_x = cx as isize - ring as isize;
            let hi_x = cx as isize + ring as isize;
            let lo_y = cy as isize - ring as isize;
            let hi_y = cy as isize + ring as isize;
            for gy in lo_y..=hi_y {
                if gy < 0 || gy >= self.ny as isize {
                    continue;
                }
                for gx in lo_x..=hi_x {
                    if gx < 0 || gx >= self.nx as isize {
                        continue;
                    }
                    let on_ring = gx == lo_x || gx == hi_x || gy == lo_y || gy == hi_y;
                    if !on_ring {
                        continue;
                    }
                    for &i in &self.buckets[gy as usize * self.nx + gx as usize] {
                        cand.push((dist2(points[i], q), i));
                    }
                }
            }
            if cand.len() >= k {
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.truncate(k);
                // Any unvisited point lies outside the searched square of
                // cells, whose edges are at least this far from q.
                let reach = [
                    qx - lo_x as f64,
                    hi_x as f64 + 1.0 - qx,
                    qy - lo_y as f64,
                    hi_y as f64 + 1.0 - qy,
                ]
                .into_iter()
                .fold(f64::MAX, f64::min)
                    * self.cell;
                let kth = cand[k - 1].0;
                if reach > 0.0 && kth < reach * reach {
                    break;
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.clear();
        out.extend(cand.iter().take(k).map(|c| c.1));
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Builds the k-NN table of `pattern` for an `h x w` raster.
pub fn knn_table(pattern: &SamplingPattern, h: usize, w: usize, k: usize) -> Result<KnnTable> {
    if pattern.is_empty() {
        return Err(Error::Contract("empty sampling pattern".into()));
    }
    if k == 0 || k > pattern.len() {
        return Err(Error::Contract(format!(
            "k = {k} must lie in [1, {}] (number of samples)",
            pattern.len()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Contract("raster must be non-empty".into()));
    }
    let index = BucketIndex::new(&pattern.points);
    let mut indices = Vec::with_capacity(h * w * k);
    let mut valid = Vec::with_capacity(h * w);
    let mut scratch = Vec::with_capacity(k);
    for py in 0..h {
        for px in 0..w {
            let (x, y) = pixel_center_normalized(px, py, h, w);
            index.nearest(&pattern.points, [x, y], k, &mut scratch);
            indices.extend_from_slice(&scratch);
            valid.push(x.hypot(y) <= 1.0);
        }
    }
    Ok(KnnTable { h, w, k, indices, valid })
}
