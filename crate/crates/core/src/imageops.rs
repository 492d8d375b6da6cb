//! Raster buffers, resampling and lens warps.
//!
//! Normalized image coordinates put the optical center at the origin and the
//! image edges at `-1` and `1`; `y` grows downwards. Pixel `(px, py)` has its
//! center at `((px + 0.5) / w * 2 - 1, (py + 0.5) / h * 2 - 1)`. All warps are
//! pull-based: each output pixel computes where it comes from and samples
//! there, so outputs never have holes. Pixels that map outside a source or
//! outside the lens field of view are flagged in the validity mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lens::{check_perspective_fov, LensProjection, WorldPoint};

/// `h x w x c` raster, row-major and channel-interleaved, values nominally in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl ImageBuffer {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Contract(format!(
                "image data length {} != {h} x {w} x {c}",
                data.len()
            )));
        }
        Ok(Self { h, w, c, data, mask: None })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self { h, w, c, data: vec![value; h * w * c], mask: None }
    }

    /// Raster whose pixel values come from a function of normalized coordinates.
    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(f64, f64, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for py in 0..h {
            for px in 0..w {
                let (x, y) = pixel_center_normalized(px, py, h, w);
                for ch in 0..c {
                    data.push(f(x, y, ch));
                }
            }
        }
        Self { h, w, c, data, mask: None }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.h * self.w {
            return Err(Error::Contract("mask length must equal h * w".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.h == 0 || self.w == 0 || self.c == 0
    }

    pub fn pixel(&self, px: usize, py: usize) -> &[f64] {
        let i = (py * self.w + px) * self.c;
        &self.data[i..i + self.c]
    }

    pub fn is_valid(&self, px: usize, py: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[py * self.w + px])
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.mask.clone().unwrap_or_else(|| vec![true; self.h * self.w])
    }

    /// Rotates the raster by 90 degrees clockwise (square images map pixel
    /// centers onto pixel centers).
    pub fn rotate90(&self) -> Self {
        let (h, w, c) = (self.w, self.h, self.c);
        let mut data = vec![0.0; h * w * c];
        let mut mask = self.mask.as_ref().map(|_| vec![false; h * w]);
        for py in 0..h {
            for px in 0..w {
                // Destination (px, py) pulls source (py, src_h - 1 - px).
                let (sx, sy) = (py, self.h - 1 - px);
                let d = (py * w + px) * c;
                data[d..d + c].copy_from_slice(self.pixel(sx, sy));
                if let Some(m) = mask.as_mut() {
                    m[py * w + px] = self.is_valid(sx, sy);
                }
            }
        }
        Self { h, w, c, data, mask }
    }
}

/// Equirectangular panorama covering the full sphere, `w = 2 h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama(ImageBuffer);

impl Panorama {
    pub fn new(img: ImageBuffer) -> Result<Self> {
        if img.w != 2 * img.h || img.is_empty() {
            return Err(Error::Contract(format!(
                "panorama must be 2:1, got {} x {}",
                img.h, img.w
            )));
        }
        Ok(Self(img))
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    Bilinear,
    Nearest,
}

pub fn pixel_center_normalized(px: usize, py: usize, h: usize, w: usize) -> (f64, f64) {
    (
        (px as f64 + 0.5) / w as f64 * 2.0 - 1.0,
        (py as f64 + 0.5) / h as f64 * 2.0 - 1.0,
    )
}

/// Continuous pixel coordinates (pixel centers at integers).
pub fn normalized_to_pixel(x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
    ((x + 1.0) * 0.5 * w as f64 - 0.5, (y + 1.0) * 0.5 * h as f64 - 0.5)
}

/// Horizontal edge handling during sampling.
#[derive(Clone, Copy, PartialEq, Eq)]
enum EdgeX {
    Clamp,
    Wrap,
}

/// Bilinear sample at continuous pixel coordinates; clamp-to-edge (or wrap
/// horizontally). Returns `false` when a contributing pixel is masked out.
fn bilinear_px(img: &ImageBuffer, fx: f64, fy: f64, edge: EdgeX, out: &mut [f64]) -> bool {
    let fy = fy.clamp(0.0, (img.h - 1) as f64);
    let fx = match edge {
        EdgeX::Clamp => fx.clamp(0.0, (img.w - 1) as f64),
        EdgeX::Wrap => fx.rem_euclid(img.w as f64),
    };
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (ax, ay) = (fx - x0, fy - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = match edge {
        EdgeX::Clamp => (x0 + 1).min(img.w - 1),
        EdgeX::Wrap => (x0 + 1) % img.w,
    };
    let x0 = x0.min(img.w - 1);
    let y1 = (y0 + 1).min(img.h - 1);
    let taps = [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x1, y0, ax * (1.0 - ay)),
        (x0, y1, (1.0 - ax) * ay),
        (x1, y1, ax * ay),
    ];
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut valid = true;
    for (x, y, wgt) in taps {
        if wgt == 0.0 {
            continue;
        }
        valid &= img.is_valid(x, y);
        for (o, v) in out.iter_mut().zip(img.pixel(x, y)) {
            *o += wgt * v;
        }
    }
    valid
}

fn nearest_px(img: &ImageBuffer, fx: f64, fy: f64, edge: EdgeX, out: &mut [f64]) -> bool {
    let y = (fy.round().clamp(0.0, (img.h - 1) as f64)) as usize;
    let x = match edge {
        EdgeX::Clamp => fx.round().clamp(0.0, (img.w - 1) as f64) as usize,
        EdgeX::Wrap => (fx.round().rem_euclid(img.w as f64) as usize) % img.w,
    };
    out.copy_from_slice(img.pixel(x, y));
    img.is_valid(x, y)
}

fn sample_px(img: &ImageBuffer, s: Sampler, fx: f64, fy: f64, edge: EdgeX, out: &mut [f64]) -> bool {
    match s {
        Sampler::Bilinear => bilinear_px(img, fx, fy, edge, out),
        Sampler::Nearest => nearest_px(img, fx, fy, edge, out),
    }
}

/// Bilinearly samples `img` at normalized coordinates, clamp-to-edge.
/// Returns `coords.len() * c` values.
pub fn bilinear_sample(img: &ImageBuffer, coords: &[[f64; 2]]) -> Result<Vec<f64>> {
    if img.is_empty() {
        return Err(Error::Contract("cannot sample an empty image".into()));
    }
    let c = img.c;
    let mut out = vec![0.0; coords.len() * c];
    for (p, dst) in coords.iter().zip(out.chunks_exact_mut(c)) {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::NonFinite(format!("sample coordinate {p:?}")));
        }
        let (fx, fy) = normalized_to_pixel(p[0], p[1], img.h, img.w);
        bilinear_px(img, fx, fy, EdgeX::Clamp, dst);
    }
    Ok(out)
}

/// Runs `f` for every output pixel in parallel. `f` writes the pixel value and
/// returns its validity.
fn pull_warp(
    h: usize,
    w: usize,
    c: usize,
    f: impl Fn(usize, usize, &mut [f64]) -> bool + Sync,
) -> ImageBuffer {
    let mut data = vec![0.0; h * w * c];
    let mut mask = vec![false; h * w];
    data.par_chunks_mut(w * c)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(py, (row, mrow))| {
            for px in 0..w {
                let dst = &mut row[px * c..(px + 1) * c];
                let ok = f(px, py, dst);
                if !ok {
                    dst.iter_mut().for_each(|v| *v = 0.0);
                }
                mrow[px] = ok;
            }
        });
    ImageBuffer { h, w, c, data, mask: Some(mask) }
}

fn require_normalized(lens: &LensProjection) -> Result<()> {
    if !lens.is_normalized() {
        return Err(Error::Contract("warps need a normalized lens".into()));
    }
    Ok(())
}

/// Renders a perspective source image with full field of view `src_fov`
/// (edge to edge) as seen through `lens`, at `out x out` pixels.
pub fn warp_perspective_to_lens(
    src: &ImageBuffer,
    src_fov: f64,
    lens: &LensProjection,
    out: usize,
) -> Result<ImageBuffer> {
    warp_perspective_to_lens_with(src, src_fov, lens, out, Sampler::Bilinear)
}

pub fn warp_perspective_to_lens_with(
    src: &ImageBuffer,
    src_fov: f64,
    lens: &LensProjection,
    out: usize,
    sampler: Sampler,
) -> Result<ImageBuffer> {
    check_perspective_fov(src_fov)?;
    require_normalized(lens)?;
    if src.is_empty() {
        return Err(Error::Contract("empty source image".into()));
    }
    let half = src_fov / 2.0;
    let f_src = 1.0 / half.tan();
    Ok(pull_warp(out, out, src.c, |px, py, dst| {
        let (x, y) = pixel_center_normalized(px, py, out, out);
        let r = x.hypot(y);
        if r > 1.0 {
            return false;
        }
        if r == 0.0 {
            let (fx, fy) = normalized_to_pixel(0.0, 0.0, src.h, src.w);
            return sample_px(src, sampler, fx, fy, EdgeX::Clamp, dst);
        }
        let Ok(theta) = lens.unproject(r) else { return false };
        if theta >= FRAC_PI_2_MINUS {
            return false;
        }
        let rs = f_src * theta.tan();
        let (sx, sy) = (rs * x / r, rs * y / r);
        if sx.abs() > 1.0 || sy.abs() > 1.0 {
            return false;
        }
        let (fx, fy) = normalized_to_pixel(sx, sy, src.h, src.w);
        sample_px(src, sampler, fx, fy, EdgeX::Clamp, dst)
    }))
}

const FRAC_PI_2_MINUS: f64 = std::f64::consts::FRAC_PI_2 - 1e-9;

/// Renders a wide-angle view of an equirectangular panorama. The camera
/// looks along the horizon; `yaw` rotates it about the vertical axis.
pub fn warp_pano_to_lens(
    pano: &Panorama,
    lens: &LensProjection,
    yaw: f64,
    out: usize,
    sampler: Sampler,
) -> Result<ImageBuffer> {
    require_normalized(lens)?;
    let img = pano.image();
    let yaw = yaw.rem_euclid(TAU);
    Ok(pull_warp(out, out, img.c, |px, py, dst| {
        let (x, y) = pixel_center_normalized(px, py, out, out);
        let r = x.hypot(y);
        if r > 1.0 {
            return false;
        }
        let Ok(theta) = lens.unproject(r) else { return false };
        let (cx, cy) = if r > 0.0 { (x / r, y / r) } else { (0.0, 0.0) };
        let s = theta.sin();
        let dir = [s * cx, s * cy, theta.cos()];
        // Longitude about the up axis, latitude positive upwards.
        let lon = dir[0].atan2(dir[2]) + yaw;
        let lat = (-dir[1]).clamp(-1.0, 1.0).asin();
        let fx = (lon / TAU + 0.5) * img.w as f64 - 0.5;
        let fy = (0.5 - lat / PI) * img.h as f64 - 0.5;
        sample_px(img, sampler, fx, fy, EdgeX::Wrap, dst);
        true
    }))
}

/// Re-projects a lens image to a perspective view with full field of view
/// `out_fov`.
pub fn undistort_to_perspective(
    img: &ImageBuffer,
    lens: &LensProjection,
    out_fov: f64,
    out: usize,
) -> Result<ImageBuffer> {
    check_perspective_fov(out_fov)?;
    require_normalized(lens)?;
    let f_out = 1.0 / (out_fov / 2.0).tan();
    let theta_max = lens.theta_max();
    Ok(pull_warp(out, out, img.c, |px, py, dst| {
        let (x, y) = pixel_center_normalized(px, py, out, out);
        let ro = x.hypot(y);
        let theta = (ro / f_out).atan();
        if theta > theta_max {
            return false;
        }
        let Ok(rl) = lens.project(theta) else { return false };
        let (sx, sy) = if ro > 0.0 { (rl * x / ro, rl * y / ro) } else { (0.0, 0.0) };
        let (fx, fy) = normalized_to_pixel(sx, sy, img.h, img.w);
        bilinear_px(img, fx, fy, EdgeX::Clamp, dst) && rl <= 1.0
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CubeFace {
    Front,
    Right,
    Back,
    Left,
    Top,
    Bottom,
}

impl CubeFace {
    /// `(column, row)` of the face in the unrolled 4 x 3 cross.
    pub fn cross_cell(self) -> (usize, usize) {
        match self {
            CubeFace::Top => (1, 0),
            CubeFace::Left => (0, 1),
            CubeFace::Front => (1, 1),
            CubeFace::Right => (2, 1),
            CubeFace::Back => (3, 1),
            CubeFace::Bottom => (1, 2),
        }
    }

    fn from_cross_cell(col: usize, row: usize) -> Option<Self> {
        match (col, row) {
            (1, 0) => Some(CubeFace::Top),
            (0, 1) => Some(CubeFace::Left),
            (1, 1) => Some(CubeFace::Front),
            (2, 1) => Some(CubeFace::Right),
            (3, 1) => Some(CubeFace::Back),
            (1, 2) => Some(CubeFace::Bottom),
            _ => None,
        }
    }

    /// Camera-frame ray through face coordinates `(a, b)` in `[-1, 1]^2`.
    pub fn ray(self, a: f64, b: f64) -> [f64; 3] {
        match self {
            CubeFace::Front => [a, b, 1.0],
            CubeFace::Right => [1.0, b, -a],
            CubeFace::Back => [-a, b, -1.0],
            CubeFace::Left => [-1.0, b, a],
            CubeFace::Top => [a, -1.0, b],
            CubeFace::Bottom => [a, 1.0, -b],
        }
    }
}

/// Face a ray hits, chosen by its dominant axis (ties favour front, then the
/// horizontal faces).
pub fn cube_face(dir: [f64; 3]) -> CubeFace {
    let [x, y, z] = dir;
    let (ax, ay, az) = (x.abs(), y.abs(), z.abs());
    if az >= ax && az >= ay {
        if z > 0.0 {
            CubeFace::Front
        } else {
            CubeFace::Back
        }
    } else if ax >= ay {
        if x > 0.0 {
            CubeFace::Right
        } else {
            CubeFace::Left
        }
    } else if y < 0.0 {
        CubeFace::Top
    } else {
        CubeFace::Bottom
    }
}

/// Undistorts a lens image onto an unrolled cross of six 90-degree
/// perspective faces (`4 face` wide, `3 face` tall). Directions outside the
/// lens field of view, and the unused cross cells, are masked.
pub fn undistort_to_cubemap(
    img: &ImageBuffer,
    lens: &LensProjection,
    face: usize,
) -> Result<ImageBuffer> {
    require_normalized(lens)?;
    if lens.theta_max_deg() > 90.0 {
        return Err(Error::Contract("cubemap undistortion supports theta_max <= 90 deg".into()));
    }
    if face == 0 {
        return Err(Error::Contract("face size must be positive".into()));
    }
    let theta_max = lens.theta_max();
    Ok(pull_warp(3 * face, 4 * face, img.c, |px, py, dst| {
        let Some(cf) = CubeFace::from_cross_cell(px / face, py / face) else { return false };
        let (a, b) = pixel_center_normalized(px % face, py % face, face, face);
        let p = cf.ray(a, b);
        let wp = WorldPoint::new(p[0], p[1], p[2]);
        let theta = wp.incident_angle();
        if theta > theta_max {
            return false;
        }
        let Ok(r) = lens.project(theta) else { return false };
        let rho = p[0].hypot(p[1]);
        let (sx, sy) = if rho > 0.0 { (r * p[0] / rho, r * p[1] / rho) } else { (0.0, 0.0) };
        let (fx, fy) = normalized_to_pixel(sx, sy, img.h, img.w);
        bilinear_px(img, fx, fy, EdgeX::Clamp, dst)
    }))
}

/// Single-channel checkerboard of `squares x squares` blocks.
pub fn checkerboard(size: usize, squares: usize) -> Result<ImageBuffer> {
    if size == 0 || squares == 0 || squares > size {
        return Err(Error::Contract(format!(
            "checkerboard needs 1 <= squares <= size, got {squares} squares at {size} px"
        )));
    }
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            data.push(((i * squares / size + j * squares / size) % 2) as f64);
        }
    }
    ImageBuffer::new(size, size, 1, data)
}

/// Area-average downsampling. Each output pixel averages the valid source
/// area it covers; it is valid when at least half of that area is valid.
pub fn downsample_box(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 || out_h > img.h || out_w > img.w {
        return Err(Error::Contract(format!(
            "cannot box-downsample {}x{} to {out_h}x{out_w}",
            img.h, img.w
        )));
    }
    let sy = img.h as f64 / out_h as f64;
    let sx = img.w as f64 / out_w as f64;
    let spans = |o: usize, s: f64, n: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * s, (o + 1) as f64 * s);
        (a.floor() as usize..(b.ceil() as usize).min(n))
            .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0)))
            .filter(|(_, w)| *w > 0.0)
            .collect()
    };
    let c = img.c;
    let mut data = vec![0.0; out_h * out_w * c];
    let mut mask = vec![false; out_h * out_w];
    for oy in 0..out_h {
        let ys = spans(oy, sy, img.h);
        for ox in 0..out_w {
            let xs = spans(ox, sx, img.w);
            let (mut total, mut good) = (0.0, 0.0);
            let dst = &mut data[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
            for &(y, wy) in &ys {
                for &(x, wx) in &xs {
                    let wgt = wy * wx;
                    total += wgt;
                    if img.is_valid(x, y) {
                        good += wgt;
                        for (d, v) in dst.iter_mut().zip(img.pixel(x, y)) {
                            *d += wgt * v;
                        }
                    }
                }
            }
            if good > 0.0 {
                dst.iter_mut().for_each(|d| *d /= good);
            }
            mask[oy * out_w + ox] = good >= 0.5 * total && good > 0.0;
        }
    }
    Ok(ImageBuffer { h: out_h, w: out_w, c, data, mask: img.mask.as_ref().map(|_| mask) })
}

/// Nearest-neighbour downsampling (picks the source pixel under each output
/// center), used for depth maps.
pub fn downsample_nearest(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Contract("output size must be positive".into()));
    }
    let c = img.c;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    let mut mask = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = (((oy as f64 + 0.5) * img.h as f64 / out_h as f64) as usize).min(img.h - 1);
        for ox in 0..out_w {
            let x = (((ox as f64 + 0.5) * img.w as f64 / out_w as f64) as usize).min(img.w - 1);
            data.extend_from_slice(img.pixel(x, y));
            mask.push(img.is_valid(x, y));
        }
    }
    Ok(ImageBuffer { h: out_h, w: out_w, c, data, mask: img.mask.as_ref().map(|_| mask) })
}

/// Peak signal-to-noise ratio (dB) over pixels valid in `mask`, peak 1.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: &[bool]) -> Result<f64> {
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) || mask.len() != a.h * a.w {
        return Err(Error::Contract("psnr needs equally shaped images and mask".into()));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for ch in 0..a.c {
            let d = a.data[p * a.c + ch] - b.data[p * a.c + ch];
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("psnr over an empty mask".into()));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Intersection of two validity masks.
pub fn mask_and(a: &ImageBuffer, b: &ImageBuffer) -> Vec<bool> {
    a.valid_mask().iter().zip(b.valid_mask()).map(|(x, y)| *x && y).collect()
}

/// Reads an 8- or 16-bit PNG (gray or RGB) into `[0, 1]` values.
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, data): (usize, Vec<f64>) = match img {
        image::DynamicImage::ImageLuma8(b) => (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        image::DynamicImage::ImageLuma16(b) => {
            (1, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        image::DynamicImage::ImageRgb16(b) => {
            (3, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        other => (3, other.to_rgb8().into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
    };
    ImageBuffer::new(h, w, c, data)
}

/// Writes a 1- or 3-channel image as an 8-bit PNG (values clamped to `[0, 1]`).
pub fn write_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (img.w as u32, img.h as u32);
    match img.c {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        c => return Err(Error::Contract(format!("cannot write {c}-channel PNG"))),
    }
    .ok_or_else(|| Error::Contract("raster size mismatch".into()))??;
    Ok(())
}

/// Writes a single-channel image as a 16-bit PNG storing `value * scale`.
pub fn write_png16(img: &ImageBuffer, path: &Path, scale: f64) -> Result<()> {
    if img.c != 1 {
        return Err(Error::Contract("16-bit PNG output is single-channel".into()));
    }
    let px: Vec<u16> =
        img.data.iter().map(|v| (v * scale).round().clamp(0.0, 65535.0) as u16).collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.w as u32, img.h as u32, px)
        .ok_or_else(|| Error::Contract("raster size mismatch".into()))?
        .save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn smooth(n: usize) -> ImageBuffer {
        ImageBuffer::from_fn(n, n, 1, |x, y, _| 0.5 + 0.3 * x - 0.15 * y + 0.05 * x * y)
    }

    #[test]
    fn bilinear_examples() {
        let img = ImageBuffer::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&img, &[[0.0, 0.0]]).unwrap(), vec![1.5]);
        let centers = [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]];
        assert_eq!(bilinear_sample(&img, &centers).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        // Clamp to edge.
        assert_eq!(bilinear_sample(&img, &[[-5.0, -5.0], [9.0, 9.0]]).unwrap(), vec![0.0, 3.0]);
        let k = ImageBuffer::filled(5, 7, 3, 0.25);
        let v = bilinear_sample(&k, &[[0.13, -0.77], [0.9, 0.4]]).unwrap();
        assert!(v.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let empty = ImageBuffer::filled(0, 0, 1, 0.0);
        assert!(bilinear_sample(&empty, &[[0.0, 0.0]]).is_err());
        assert!(bilinear_sample(&img, &[[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn checkerboard_layout() {
        let one = checkerboard(8, 1).unwrap();
        assert!(one.data.iter().all(|&v| v == 0.0));
        let two = checkerboard(4, 2).unwrap();
        assert_eq!(
            two.data,
            vec![0., 0., 1., 1., 0., 0., 1., 1., 1., 1., 0., 0., 1., 1., 0., 0.]
        );
        let b = checkerboard(224, 7).unwrap();
        for (i, j) in [(0, 0), (31, 33), (100, 5), (223, 223)] {
            assert_eq!(b.pixel(j, i)[0], ((i * 7 / 224 + j * 7 / 224) % 2) as f64);
        }
    }

    #[test]
    fn xi_zero_warp_is_identity_inside_disk() {
        let src = smooth(64);
        let lens = LensProjection::spherical_normalized(0.0, 45.0).unwrap();
        let out = warp_perspective_to_lens(&src, 90f64.to_radians(), &lens, 64).unwrap();
        let mask = out.valid_mask();
        assert!(psnr(&src, &out, &mask).unwrap() > 40.0);
        let center = mask[32 * 64 + 32];
        assert!(center);
    }

    #[test]
    fn constant_source_gives_constant_output() {
        let src = ImageBuffer::filled(40, 40, 3, 0.6);
        let lens = LensProjection::spherical_normalized(0.8, 87.5).unwrap();
        let out = warp_perspective_to_lens(&src, 170f64.to_radians(), &lens, 32).unwrap();
        for (p, &m) in out.valid_mask().iter().enumerate() {
            if m {
                assert!(out.data[p * 3..p * 3 + 3].iter().all(|v| (v - 0.6).abs() < 1e-12));
            }
        }
        let und = undistort_to_perspective(&out, &lens, 90f64.to_radians(), 16).unwrap();
        assert!(und.valid_mask().iter().any(|&m| m));
    }

    #[test]
    fn round_trip_psnr() {
        let src = smooth(128);
        let lens = LensProjection::spherical_normalized(0.7, 60.0).unwrap();
        let fov = 90f64.to_radians();
        let fish = warp_perspective_to_lens(&src, fov, &lens, 128).unwrap();
        let back = undistort_to_perspective(&fish, &lens, fov, 128).unwrap();
        let mask = mask_and(&back, &src);
        assert!(mask.iter().filter(|&&m| m).count() > 1000);
        assert!(psnr(&src, &back, &mask).unwrap() > 30.0);
    }

    #[test]
    fn perspective_fov_must_be_below_pi() {
        let img = ImageBuffer::filled(8, 8, 1, 0.0);
        let lens = LensProjection::spherical_normalized(0.5, 80.0).unwrap();
        assert!(undistort_to_perspective(&img, &lens, PI, 8).is_err());
        assert!(warp_perspective_to_lens(&img, PI, &lens, 8).is_err());
    }

    #[test]
    fn rotation_equivariance_with_nearest() {
        let src = ImageBuffer::from_fn(64, 64, 1, |x, y, _| (3.0 * x).sin() * (2.0 * y + 0.3).cos());
        let lens = LensProjection::spherical_normalized(0.6, 60.0).unwrap();
        let fov = 120f64.to_radians();
        let a = warp_perspective_to_lens_with(&src.rotate90(), fov, &lens, 64, Sampler::Nearest)
            .unwrap();
        let b = warp_perspective_to_lens_with(&src, fov, &lens, 64, Sampler::Nearest)
            .unwrap()
            .rotate90();
        assert_eq!(a.mask, b.mask);
        let max = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 1e-6, "max diff {max}");
    }

    #[test]
    fn pano_yaw_periodicity_and_constant() {
        let pano = Panorama::new(ImageBuffer::from_fn(32, 64, 3, |x, y, c| {
            0.5 + 0.4 * (PI * x).sin() * (c as f64 + 1.0) / 3.0 + 0.1 * y
        }))
        .unwrap();
        let lens = LensProjection::spherical_normalized(0.95, 87.5).unwrap();
        let a = warp_pano_to_lens(&pano, &lens, 0.0, 24, Sampler::Bilinear).unwrap();
        let b = warp_pano_to_lens(&pano, &lens, TAU, 24, Sampler::Bilinear).unwrap();
        assert_eq!(a, b);
        let c = warp_pano_to_lens(&pano, &lens, 1.0, 24, Sampler::Bilinear).unwrap();
        assert_ne!(a.data, c.data);

        let flat = Panorama::new(ImageBuffer::filled(16, 32, 1, 2.5)).unwrap();
        let d = warp_pano_to_lens(&flat, &lens, 0.7, 16, Sampler::Nearest).unwrap();
        for (p, m) in d.valid_mask().iter().enumerate() {
            if *m {
                assert_eq!(d.data[p], 2.5);
            }
        }
        assert!(Panorama::new(ImageBuffer::filled(16, 16, 1, 0.0)).is_err());
    }

    #[test]
    fn pano_center_looks_at_horizon() {
        // Longitude 0 sits at the horizontal center of the panorama.
        let pano = Panorama::new(ImageBuffer::from_fn(64, 128, 1, |x, y, _| {
            if x.abs() < 0.05 && y.abs() < 0.1 { 1.0 } else { 0.0 }
        }))
        .unwrap();
        let lens = LensProjection::spherical_normalized(0.5, 87.5).unwrap();
        let img = warp_pano_to_lens(&pano, &lens, 0.0, 33, Sampler::Nearest).unwrap();
        assert_eq!(img.pixel(16, 16)[0], 1.0);
    }

    #[test]
    fn cube_face_assignment() {
        assert_eq!(cube_face([0.0, 0.0, 1.0]), CubeFace::Front);
        let t = 60f64.to_radians();
        assert_eq!(cube_face([t.sin(), 0.0, t.cos()]), CubeFace::Right);
        let t = 40f64.to_radians();
        assert_eq!(cube_face([t.sin(), 0.0, t.cos()]), CubeFace::Front);
        assert_eq!(cube_face([0.0, -1.0, 0.2]), CubeFace::Top);
        assert_eq!(cube_face([-1.0, 0.1, 0.2]), CubeFace::Left);
        for f in [CubeFace::Front, CubeFace::Right, CubeFace::Back, CubeFace::Left, CubeFace::Top, CubeFace::Bottom] {
            assert_eq!(cube_face(f.ray(0.3, -0.2)), f);
        }
    }

    #[test]
    fn cubemap_layout_and_constant() {
        let face = 16;
        let lens = LensProjection::spherical_normalized(0.9, 87.5).unwrap();
        let img = ImageBuffer::filled(48, 48, 1, 0.3);
        let cube = undistort_to_cubemap(&img, &lens, face).unwrap();
        assert_eq!((cube.h, cube.w), (48, 64));
        let mask = cube.valid_mask();
        // Front face is entirely inside a 175 degree field of view.
        for py in face..2 * face {
            for px in face..2 * face {
                assert!(mask[py * cube.w + px]);
            }
        }
        // Back face and unused cells are masked.
        assert!(!mask[(face + 3) * cube.w + 3 * face + 3]);
        assert!(!mask[3]);
        for (p, m) in mask.iter().enumerate() {
            if *m {
                assert_abs_diff_eq!(cube.data[p], 0.3, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cubemap_center_is_image_center() {
        let lens = LensProjection::spherical_normalized(0.9, 87.5).unwrap();
        let img = ImageBuffer::from_fn(33, 33, 1, |x, y, _| x.hypot(y));
        let cube = undistort_to_cubemap(&img, &lens, 15).unwrap();
        // Center pixel of the front face is the on-axis ray.
        let v = cube.pixel(15 + 7, 15 + 7)[0];
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn downsample_box_averages_area() {
        let img = ImageBuffer::new(2, 4, 1, vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let d = downsample_box(&img, 1, 2).unwrap();
        assert_eq!(d.data, vec![2.5, 4.5]);
        let big = checkerboard(224, 7).unwrap();
        let small = downsample_box(&big, 64, 64).unwrap();
        let mean_big = big.data.iter().sum::<f64>() / big.data.len() as f64;
        let mean_small = small.data.iter().sum::<f64>() / small.data.len() as f64;
        assert_abs_diff_eq!(mean_big, mean_small, epsilon = 1e-12);
        assert!(downsample_box(&img, 3, 3).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(5, 7, 3, |x, y, c| ((x + y + c as f64) * 0.2).rem_euclid(1.0));
        let path = dir.path().join("a.png");
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!((back.h, back.w, back.c), (5, 7, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let depth = ImageBuffer::from_fn(4, 4, 1, |x, _, _| 2.0 + x);
        let p16 = dir.path().join("d.png");
        write_png16(&depth, &p16, 1000.0).unwrap();
        let d = read_png(&p16).unwrap();
        assert_abs_diff_eq!(d.data[0] * 65535.0 / 1000.0, depth.data[0], epsilon = 1e-3);
    }
}
