//! Radial lens projection models.
//!
//! A lens maps the incident angle `theta` of a ray (measured from the optical
//! axis) to a radius in normalized image coordinates, `r = P(theta)`. Three
//! families are supported: perspective (`f tan theta`), an odd/even
//! polynomial in `theta`, and the unified spherical model parameterized by a
//! single `xi` in `[0, 1]`.
//!
//! After [`LensProjection::normalize`] the image circle is the unit disk, i.e.
//! `P(theta_max) = 1`. Everything downstream (partitioning, warping) works in
//! that frame.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Half field of view used when none is given: 175 degrees full FOV.
pub const DEFAULT_THETA_MAX_DEG: f64 = 87.5;

/// Number of uniform samples used to verify strict monotonicity.
const MONOTONIC_SAMPLES: usize = 1000;

/// Relative slack accepted on range checks, to absorb `i * t / n` rounding.
const RANGE_SLACK: f64 = 1e-12;

/// Tolerance used by [`LensProjection::is_normalized`].
pub const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum LensModel {
    /// `r = f tan(theta)`.
    Perspective,
    /// `r = a1 theta + a2 theta^2 + ... + an theta^n` (no focal factor).
    Polynomial { coeffs: Vec<f64> },
    /// `r = f sin(theta) / (xi + cos(theta))`.
    Spherical { xi: f64 },
}

/// A validated radial projection curve together with its half field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LensRecord", into = "LensRecord")]
pub struct LensProjection {
    model: LensModel,
    f: f64,
    theta_max_deg: f64,
}

/// 3D point in camera coordinates: x right, y down, z along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Incident angle from the optical axis, in `[0, pi]`.
    pub fn incident_angle(&self) -> f64 {
        self.x.hypot(self.y).atan2(self.z)
    }

    pub fn azimuth(&self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Unit ray with incident angle `theta` and azimuth `phi`.
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let s = theta.sin();
        Self::new(s * phi.cos(), s * phi.sin(), theta.cos())
    }
}

impl LensProjection {
    pub fn perspective(f: f64, theta_max_deg: f64) -> Result<Self> {
        Self::new(LensModel::Perspective, f, theta_max_deg)
    }

    pub fn spherical(xi: f64, f: f64, theta_max_deg: f64) -> Result<Self> {
        Self::new(LensModel::Spherical { xi }, f, theta_max_deg)
    }

    pub fn polynomial(coeffs: Vec<f64>, theta_max_deg: f64) -> Result<Self> {
        Self::new(LensModel::Polynomial { coeffs }, 1.0, theta_max_deg)
    }

    /// Spherical lens with `P(theta_max) = 1`.
    pub fn spherical_normalized(xi: f64, theta_max_deg: f64) -> Result<Self> {
        Ok(Self::spherical(xi, 1.0, theta_max_deg)?.normalize())
    }

    pub fn new(model: LensModel, f: f64, theta_max_deg: f64) -> Result<Self> {
        if !(theta_max_deg.is_finite() && theta_max_deg > 0.0 && theta_max_deg <= 90.0) {
            return Err(Error::InvalidLens(format!(
                "theta_max_deg must lie in (0, 90], got {theta_max_deg}"
            )));
        }
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::InvalidLens(format!("focal scale must be positive, got {f}")));
        }
        let theta_max = theta_max_deg.to_radians();
        match &model {
            LensModel::Perspective => {
                if theta_max_deg >= 90.0 {
                    return Err(Error::InvalidLens(
                        "perspective lens needs theta_max < 90 deg".into(),
                    ));
                }
            }
            LensModel::Spherical { xi } => {
                if !(0.0..=1.0).contains(xi) {
                    return Err(Error::InvalidLens(format!("xi must lie in [0, 1], got {xi}")));
                }
                if xi + theta_max.cos() <= 1e-12 {
                    return Err(Error::InvalidLens(format!(
                        "xi = {xi} diverges at theta_max = {theta_max_deg} deg"
                    )));
                }
            }
            LensModel::Polynomial { coeffs } => {
                if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidLens(
                        "polynomial needs at least one finite coefficient".into(),
                    ));
                }
                if f != 1.0 {
                    return Err(Error::InvalidLens("polynomial lenses carry f = 1".into()));
                }
            }
        }
        let lens = Self { model, f, theta_max_deg };
        lens.check_monotonic()?;
        Ok(lens)
    }

    fn check_monotonic(&self) -> Result<()> {
        let theta_max = self.theta_max();
        let mut prev = 0.0;
        for i in 1..=MONOTONIC_SAMPLES {
            let t = theta_max * i as f64 / MONOTONIC_SAMPLES as f64;
            let r = self.eval(t);
            if !(r.is_finite() && r > prev) {
                return Err(Error::InvalidLens(format!(
                    "projection is not strictly increasing near theta = {t:.6} rad"
                )));
            }
            prev = r;
        }
        Ok(())
    }

    pub fn model(&self) -> &LensModel {
        &self.model
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    /// Spherical distortion parameter, if this is a spherical lens.
    pub fn xi(&self) -> Option<f64> {
        match self.model {
            LensModel::Spherical { xi } => Some(xi),
            _ => None,
        }
    }

    pub fn theta_max_deg(&self) -> f64 {
        self.theta_max_deg
    }

    /// Half field of view in radians.
    pub fn theta_max(&self) -> f64 {
        self.theta_max_deg.to_radians()
    }

    pub fn family_name(&self) -> &'static str {
        match self.model {
            LensModel::Perspective => "perspective",
            LensModel::Polynomial { .. } => "polynomial",
            LensModel::Spherical { .. } => "spherical",
        }
    }

    /// Unchecked evaluation of the projection curve.
    fn eval(&self, theta: f64) -> f64 {
        match &self.model {
            LensModel::Perspective => self.f * theta.tan(),
            LensModel::Spherical { xi } => self.f * theta.sin() / (xi + theta.cos()),
            LensModel::Polynomial { coeffs } => {
                coeffs.iter().rev().fold(0.0, |acc, a| (acc + a) * theta)
            }
        }
    }

    /// Normalized radius of a ray with incident angle `theta`.
    pub fn project(&self, theta: f64) -> Result<f64> {
        let theta_max = self.theta_max();
        if theta.is_nan() || theta < 0.0 {
            return Err(Error::Domain(format!("theta = {theta} is below the lower bound 0")));
        }
        if theta > theta_max * (1.0 + RANGE_SLACK) {
            return Err(Error::Domain(format!(
                "theta = {theta} exceeds the upper bound theta_max = {theta_max}"
            )));
        }
        Ok(self.eval(theta.min(theta_max)))
    }

    /// Radius of the image circle, `P(theta_max)`.
    pub fn max_radius(&self) -> f64 {
        self.eval(self.theta_max())
    }

    /// Incident angle producing radius `r`, found by bisection over `[0, theta_max]`.
    pub fn unproject(&self, r: f64) -> Result<f64> {
        let r_max = self.max_radius();
        if r.is_nan() || r < 0.0 {
            return Err(Error::Domain(format!("r = {r} is below the lower bound 0")));
        }
        if r > r_max * (1.0 + RANGE_SLACK) {
            return Err(Error::Domain(format!("r = {r} exceeds the image circle radius {r_max}")));
        }
        if r == 0.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0_f64, self.theta_max());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.eval(mid) < r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (self.eval(lo) - r).abs() <= (self.eval(hi) - r).abs() {
            Ok(lo)
        } else {
            Ok(hi)
        }
    }

    /// Projects a 3D point to normalized image coordinates `(u, v)`.
    pub fn project_point(&self, p: WorldPoint) -> Result<(f64, f64)> {
        let norm = p.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::OutOfField(format!("degenerate point {p:?}")));
        }
        let theta = p.incident_angle();
        if theta > self.theta_max() * (1.0 + RANGE_SLACK) {
            return Err(Error::OutOfField(format!(
                "point at theta = {:.4} deg is outside the {:.4} deg half field of view",
                theta.to_degrees(),
                self.theta_max_deg
            )));
        }
        match self.model {
            LensModel::Spherical { xi } => {
                let denom = xi * norm + p.z;
                Ok((p.x * self.f / denom, p.y * self.f / denom))
            }
            _ => {
                let r = self.project(theta)?;
                let phi = p.azimuth();
                Ok((r * phi.cos(), r * phi.sin()))
            }
        }
    }

    /// Rescales the lens so that the image circle has unit radius.
    pub fn normalize(&self) -> Self {
        let theta_max = self.theta_max();
        let model = self.model.clone();
        match model {
            LensModel::Perspective => Self {
                model,
                f: 1.0 / theta_max.tan(),
                theta_max_deg: self.theta_max_deg,
            },
            LensModel::Spherical { xi } => Self {
                model,
                f: (xi + theta_max.cos()) / theta_max.sin(),
                theta_max_deg: self.theta_max_deg,
            },
            LensModel::Polynomial { coeffs } => {
                let scale = self.max_radius();
                Self {
                    model: LensModel::Polynomial {
                        coeffs: coeffs.iter().map(|a| a / scale).collect(),
                    },
                    f: 1.0,
                    theta_max_deg: self.theta_max_deg,
                }
            }
        }
    }

    pub fn is_normalized(&self) -> bool {
        (self.max_radius() - 1.0).abs() <= NORMALIZED_TOL
    }

    /// Same family and field of view with a different `xi` (spherical only).
    pub fn with_xi(&self, xi: f64) -> Result<Self> {
        match self.model {
            LensModel::Spherical { .. } => {
                let lens = Self::spherical(xi, 1.0, self.theta_max_deg)?;
                Ok(if self.is_normalized() { lens.normalize() } else { lens })
            }
            _ => Err(Error::Contract(format!("{} lens has no xi", self.family_name()))),
        }
    }
}

/// Structured-text form of a lens.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LensRecord {
    pub family: String,
    pub f: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    pub theta_max_deg: f64,
}

impl From<LensProjection> for LensRecord {
    fn from(lens: LensProjection) -> Self {
        let family = lens.family_name().to_string();
        let (xi, coeffs) = match lens.model {
            LensModel::Perspective => (None, None),
            LensModel::Spherical { xi } => (Some(xi), None),
            LensModel::Polynomial { coeffs } => (None, Some(coeffs)),
        };
        Self { family, f: lens.f, xi, coeffs, theta_max_deg: lens.theta_max_deg }
    }
}

impl TryFrom<LensRecord> for LensProjection {
    type Error = Error;

    fn try_from(rec: LensRecord) -> Result<Self> {
        let model = match rec.family.as_str() {
            "perspective" => LensModel::Perspective,
            "spherical" => LensModel::Spherical {
                xi: rec.xi.ok_or_else(|| Error::Parse("spherical lens without xi".into()))?,
            },
            "polynomial" => LensModel::Polynomial {
                coeffs: rec
                    .coeffs
                    .ok_or_else(|| Error::Parse("polynomial lens without coeffs".into()))?,
            },
            other => return Err(Error::Parse(format!("unknown lens family {other:?}"))),
        };
        LensProjection::new(model, rec.f, rec.theta_max_deg)
    }
}

/// Largest half field of view a perspective view may use.
pub fn check_perspective_fov(fov: f64) -> Result<()> {
    if !(fov > 0.0 && fov < 2.0 * FRAC_PI_2) {
        return Err(Error::Domain(format!(
            "perspective field of view must lie in (0, pi), got {fov} rad"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn perspective_45_is_unit() {
        let lens = LensProjection::perspective(1.0, 60.0).unwrap();
        assert_abs_diff_eq!(lens.project(deg(45.0)).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lens.unproject(1.0).unwrap(), deg(45.0), epsilon = 1e-14);
    }

    #[test]
    fn spherical_values() {
        let l1 = LensProjection::spherical(1.0, 1.0, 90.0).unwrap();
        assert_abs_diff_eq!(l1.project(deg(90.0)).unwrap(), 1.0, epsilon = 1e-15);
        // Eq. cross-check through the point form: (1, 0, 0) is at theta = 90 deg.
        let (u, v) = l1.project_point(WorldPoint::new(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(u, 1.0, epsilon = 1e-15);
        assert_eq!(v, 0.0);

        let l05 = LensProjection::spherical(0.5, 1.0, 90.0).unwrap();
        assert_abs_diff_eq!(l05.project(deg(60.0)).unwrap(), 0.866025, epsilon = 1e-6);
        let p = WorldPoint::from_angles(deg(60.0), 0.0);
        let (u, _) = l05.project_point(p).unwrap();
        assert_abs_diff_eq!(u, 0.75_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn project_point_examples() {
        let lens = LensProjection::spherical(1.0, 1.0, 90.0).unwrap();
        assert_eq!(lens.project_point(WorldPoint::new(0.0, 0.0, 1.0)).unwrap(), (0.0, 0.0));
        let (u, v) = lens.project_point(WorldPoint::new(1.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(u, 1.0 / (2f64.sqrt() + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(u, 0.414214, epsilon = 1e-6);
        assert_eq!(v, 0.0);
        let (u2, v2) = lens.project_point(WorldPoint::new(0.0, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(u2, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v2, u, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_errors() {
        let lens = LensProjection::spherical_normalized(0.5, 80.0).unwrap();
        let err = lens.project(deg(81.0)).unwrap_err();
        assert!(err.to_string().contains("theta_max"), "{err}");
        assert!(lens.project(-0.1).unwrap_err().to_string().contains("lower bound"));
        assert!(matches!(lens.unproject(1.5), Err(Error::Domain(_))));
        assert!(matches!(
            lens.project_point(WorldPoint::new(0.0, 0.0, -1.0)),
            Err(Error::OutOfField(_))
        ));
        assert!(matches!(
            lens.project_point(WorldPoint::new(1.0, 0.0, 0.01)),
            Err(Error::OutOfField(_))
        ));
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(LensProjection::perspective(1.0, 90.0).is_err());
        assert!(LensProjection::spherical(1.2, 1.0, 80.0).is_err());
        assert!(LensProjection::spherical(0.0, 1.0, 90.0).is_err());
        assert!(LensProjection::spherical(0.5, -1.0, 80.0).is_err());
        assert!(LensProjection::polynomial(vec![], 80.0).is_err());
        // Decreasing past theta = 0.5 rad.
        assert!(LensProjection::polynomial(vec![1.0, -1.0], 60.0).is_err());
        assert!(LensProjection::spherical(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = LensProjection::spherical(1.0, 3.0, 90.0).unwrap().normalize();
        assert_abs_diff_eq!(s.f(), 1.0, epsilon = 1e-15);
        let p = LensProjection::perspective(2.0, 45.0).unwrap().normalize();
        assert_abs_diff_eq!(p.f(), 1.0, epsilon = 1e-15);
        let q = LensProjection::polynomial(vec![1.0, 0.0, 0.0, 0.0], 1.0f64.to_degrees())
            .unwrap()
            .normalize();
        match q.model() {
            LensModel::Polynomial { coeffs } => {
                assert_abs_diff_eq!(coeffs[0], 1.0, epsilon = 1e-15);
                assert_eq!(&coeffs[1..], &[0.0, 0.0, 0.0]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn normalize_preserves_shape() {
        let lens = LensProjection::polynomial(vec![1.1, 0.05, -0.04, 0.002], 85.0).unwrap();
        let n = lens.normalize();
        assert_abs_diff_eq!(n.max_radius(), 1.0, epsilon = 1e-12);
        let ratio = n.project(0.3).unwrap() / lens.project(0.3).unwrap();
        for i in 1..50 {
            let t = lens.theta_max() * i as f64 / 50.0;
            let q = n.project(t).unwrap() / lens.project(t).unwrap();
            assert_abs_diff_eq!(q, ratio, epsilon = 1e-12);
        }
    }

    #[test]
    fn spherical_xi_zero_is_perspective() {
        let s = LensProjection::spherical(0.0, 1.3, 87.5).unwrap();
        let p = LensProjection::perspective(1.3, 87.5).unwrap();
        for i in 0..=1000 {
            let t = s.theta_max() * i as f64 / 1000.0;
            assert_abs_diff_eq!(s.project(t).unwrap(), p.project(t).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn record_round_trip_is_exact() {
        let lenses = [
            LensProjection::spherical_normalized(0.7, 87.5).unwrap(),
            LensProjection::perspective(0.1 + 0.2, 44.9).unwrap(),
            LensProjection::polynomial(vec![1.0 / 3.0, 1e-3, -2e-4], 88.0).unwrap().normalize(),
        ];
        for lens in lenses {
            let text = serde_json::to_string(&lens).unwrap();
            let back: LensProjection = serde_json::from_str(&text).unwrap();
            assert_eq!(back, lens);
        }
        let bad = r#"{"family":"spherical","f":1.0,"xi":2.0,"theta_max_deg":80.0}"#;
        assert!(serde_json::from_str::<LensProjection>(bad).is_err());
    }

    proptest! {
        #[test]
        fn unproject_inverts_project(xi in 0.0..=1.0f64, frac in 0.0..=1.0f64) {
            let lens = LensProjection::spherical_normalized(xi, 87.5).unwrap();
            let theta = frac * lens.theta_max();
            let back = lens.unproject(lens.project(theta).unwrap()).unwrap();
            prop_assert!((back - theta).abs() < 1e-9);
        }

        #[test]
        fn point_radius_matches_curve(
            xi in 0.0..=1.0f64,
            theta in 0.0..1.5f64,
            phi in -3.1..3.1f64,
            scale in 0.1..10.0f64,
        ) {
            let lens = LensProjection::spherical_normalized(xi, 87.5).unwrap();
            let mut p = WorldPoint::from_angles(theta, phi);
            p.x *= scale; p.y *= scale; p.z *= scale;
            let (u, v) = lens.project_point(p).unwrap();
            let r = lens.project(p.incident_angle()).unwrap();
            prop_assert!((u.hypot(v) - r).abs() < 1e-10);
            if theta > 1e-6 {
                let d = (v.atan2(u) - phi).abs();
                prop_assert!(d < 1e-9 || (d - std::f64::consts::TAU).abs() < 1e-9);
            }
        }
    }
}
