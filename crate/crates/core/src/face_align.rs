//! Pose normalization from 68-point facial landmarks.
//!
//! A least-squares similarity transform maps detected landmarks onto a
//! canonical template. The face is resampled into a template-sized crop for
//! downstream services, and later warped back and feather-blended into the
//! original image.
//!
//! Coordinates are pixel coordinates with pixel `(i, j)` sitting at the
//! integer point `(i, j)`, so integer-aligned warps sample exactly.

use std::f64::consts::PI;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Channels, LandmarkSet, Raster, LANDMARK_COUNT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("landmarks are degenerate (zero spread or no correlation with the template)")]
    DegenerateLandmarks,
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("point sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("transform is not invertible (scale {0})")]
    NonInvertibleTransform(f64),
    #[error("crop is {found:?}, session expects {expected:?}")]
    SizeMismatch {
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

/// `p ↦ s·R(θ)·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Radians in (−π, π].
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: f64, tx: f64, ty: f64) -> Result<Self, AlignError> {
        if !(scale.is_finite() && rotation.is_finite() && tx.is_finite() && ty.is_finite()) {
            return Err(AlignError::NonFinite);
        }
        if scale <= 0.0 {
            return Err(AlignError::NonInvertibleTransform(scale));
        }
        Ok(SimilarityTransform {
            scale,
            rotation: wrap_angle(rotation),
            tx,
            ty,
        })
    }

    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    /// `[[s·cosθ, −s·sinθ, tx], [s·sinθ, s·cosθ, ty]]`
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        let (sin, cos) = self.rotation.sin_cos();
        let (a, b) = (self.scale * cos, self.scale * sin);
        [[a, -b, self.tx], [b, a, self.ty]]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = self.matrix();
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let rotation = wrap_angle(-self.rotation);
        let (sin, cos) = rotation.sin_cos();
        // t' = −s⁻¹·R(−θ)·t
        let tx = -inv_scale * (cos * self.tx - sin * self.ty);
        let ty = -inv_scale * (sin * self.tx + cos * self.ty);
        SimilarityTransform {
            scale: inv_scale,
            rotation,
            tx,
            ty,
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &SimilarityTransform) -> Self {
        let rotation = wrap_angle(self.rotation + next.rotation);
        let [tx, ty] = next.apply([self.tx, self.ty]);
        SimilarityTransform {
            scale: self.scale * next.scale,
            rotation,
            tx,
            ty,
        }
    }
}

/// Result of a least-squares similarity fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityFit {
    pub transform: SimilarityTransform,
    /// Σ‖T(xᵢ) − yᵢ‖²
    pub residual: f64,
}

pub fn residual(transform: &SimilarityTransform, source: &[[f64; 2]], target: &[[f64; 2]]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(x, y)| {
            let p = transform.apply(*x);
            (p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2)
        })
        .sum()
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

/// Closed-form least-squares similarity (rotation only, no reflection)
/// mapping `source` onto `target`.
pub fn fit_similarity(source: &[[f64; 2]], target: &[[f64; 2]]) -> Result<SimilarityFit, AlignError> {
    if source.len() != target.len() {
        return Err(AlignError::LengthMismatch(source.len(), target.len()));
    }
    if source.iter().chain(target).flatten().any(|v| !v.is_finite()) {
        return Err(AlignError::NonFinite);
    }
    if source.is_empty() {
        return Err(AlignError::DegenerateLandmarks);
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let (mut var, mut dot, mut cross) = (0.0, 0.0, 0.0);
    for (x, y) in source.iter().zip(target) {
        let (x0, x1) = (x[0] - cs[0], x[1] - cs[1]);
        let (y0, y1) = (y[0] - ct[0], y[1] - ct[1]);
        var += x0 * x0 + x1 * x1;
        dot += x0 * y0 + x1 * y1;
        cross += x0 * y1 - x1 * y0;
    }
    let spread = source
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    if var <= f64::EPSILON * spread * spread * source.len() as f64 {
        return Err(AlignError::DegenerateLandmarks);
    }
    // s·cosθ and s·sinθ
    let a = dot / var;
    let b = cross / var;
    let scale = a.hypot(b);
    if scale == 0.0 || !scale.is_finite() {
        return Err(AlignError::DegenerateLandmarks);
    }
    let tx = ct[0] - (a * cs[0] - b * cs[1]);
    let ty = ct[1] - (b * cs[0] + a * cs[1]);
    let transform = SimilarityTransform {
        scale,
        rotation: wrap_angle(b.atan2(a)),
        tx,
        ty,
    };
    Ok(SimilarityFit {
        residual: residual(&transform, source, target),
        transform,
    })
}

/// 68 canonical points for a crop of `crop_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTemplate {
    pub points: Vec<[f64; 2]>,
    pub crop_size: (u32, u32),
}

const DEFAULT_TEMPLATE: &str = include_str!("../assets/template_256.json");

impl LandmarkTemplate {
    pub fn new(points: Vec<[f64; 2]>, crop_size: (u32, u32)) -> Result<Self, AlignError> {
        let t = LandmarkTemplate { points, crop_size };
        t.validate()?;
        Ok(t)
    }

    /// The shipped 256×256 template.
    pub fn default_256() -> Self {
        Self::from_json(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, AlignError> {
        let t: LandmarkTemplate =
            serde_json::from_str(text).map_err(|e| AlignError::InvalidTemplate(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), AlignError> {
        let (w, h) = self.crop_size;
        if w == 0 || h == 0 {
            return Err(AlignError::InvalidTemplate("empty crop size".into()));
        }
        if self.points.len() != LANDMARK_COUNT {
            return Err(AlignError::InvalidTemplate(format!(
                "expected {LANDMARK_COUNT} points, got {}",
                self.points.len()
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            let inside = p[0].is_finite()
                && p[1].is_finite()
                && (0.0..w as f64).contains(&p[0])
                && (0.0..h as f64).contains(&p[1]);
            if !inside {
                return Err(AlignError::InvalidTemplate(format!("point {i} lies outside the crop")));
            }
        }
        Ok(())
    }
}

pub fn estimate_similarity(
    source: &LandmarkSet,
    template: &LandmarkTemplate,
) -> Result<SimilarityFit, AlignError> {
    fit_similarity(source.points(), &template.points)
}

/// Axis-aligned box in original image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Everything needed to put a processed crop back where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignSession {
    /// Original image → crop coordinates.
    pub transform: SimilarityTransform,
    pub source_landmarks: LandmarkSet,
    pub crop_size: (u32, u32),
    pub source_region: Region,
    /// Image the crop was cut from, when the session must be self-contained.
    pub original: Option<Raster>,
}

#[derive(Serialize, Deserialize)]
struct SessionDoc {
    transform: SimilarityTransform,
    source_landmarks: Vec<[f64; 2]>,
    crop_size: (u32, u32),
    source_region: Region,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    original: Option<String>,
}

fn raster_from_canonical(bytes: &[u8]) -> Result<Raster, String> {
    if bytes.len() < 24 {
        return Err("truncated raster".into());
    }
    let word = |i: usize| u64::from_be_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
    let channels = match word(2) {
        3 => Channels::Rgb,
        4 => Channels::Rgba,
        n => return Err(format!("unsupported channel count {n}")),
    };
    let w = u32::try_from(word(0)).map_err(|e| e.to_string())?;
    let h = u32::try_from(word(1)).map_err(|e| e.to_string())?;
    Raster::new(w, h, channels, bytes[24..].to_vec()).map_err(|e| e.to_string())
}

impl AlignSession {
    /// Canonical JSON; an embedded original is stored as base64 of its
    /// canonical raster bytes so the encoding is bit-stable.
    pub fn to_canonical_json(&self) -> String {
        let b64 = base64::engine::general_purpose::STANDARD;
        crate::canonical::to_string(&SessionDoc {
            transform: self.transform,
            source_landmarks: self.source_landmarks.points().to_vec(),
            crop_size: self.crop_size,
            source_region: self.source_region,
            original: self.original.as_ref().map(|r| b64.encode(r.canonical_bytes())),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: SessionDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let transform = SimilarityTransform::new(
            doc.transform.scale,
            doc.transform.rotation,
            doc.transform.tx,
            doc.transform.ty,
        )
        .map_err(|e| e.to_string())?;
        let original = match doc.original {
            None => None,
            Some(s) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(s)
                    .map_err(|e| e.to_string())?;
                Some(raster_from_canonical(&bytes)?)
            }
        };
        Ok(AlignSession {
            transform,
            source_landmarks: LandmarkSet::new(doc.source_landmarks).map_err(|e| e.to_string())?,
            crop_size: doc.crop_size,
            source_region: doc.source_region,
            original,
        })
    }
}

/// Values within this distance of an integer are treated as that integer.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear RGBA sample with transparent black outside the raster.
/// Colour is alpha-weighted so transparent neighbours do not darken edges.
fn sample(img: &Raster, x: f64, y: f64) -> [f64; 4] {
    let (x, y) = (snap(x), snap(y));
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut acc = [0.0f64; 4];
    for (dx, dy, weight) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if weight == 0.0 {
            continue;
        }
        let (px, py) = (x0 as i64 + dx, y0 as i64 + dy);
        if px < 0 || py < 0 || px >= w || py >= h {
            continue;
        }
        let p = img.rgba(px as u32, py as u32);
        let wa = weight * f64::from(p[3]);
        for c in 0..3 {
            acc[c] += wa * f64::from(p[c]);
        }
        acc[3] += wa;
    }
    if acc[3] > 0.0 {
        let a = acc[3];
        for v in &mut acc[..3] {
            *v /= a;
        }
    }
    acc
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Resamples `image` into an RGBA crop: crop pixel `q` takes the image value at `T⁻¹(q)`.
pub fn warp_crop(
    image: &Raster,
    transform: &SimilarityTransform,
    crop_size: (u32, u32),
) -> Result<Raster, AlignError> {
    if !(transform.scale > 0.0 && transform.scale.is_finite()) {
        return Err(AlignError::NonInvertibleTransform(transform.scale));
    }
    let inv = transform.inverse();
    Ok(Raster::from_fn(crop_size.0, crop_size.1, Channels::Rgba, |u, v| {
        let [x, y] = inv.apply([f64::from(u), f64::from(v)]);
        let s = sample(image, x, y);
        [to_u8(s[0]), to_u8(s[1]), to_u8(s[2]), to_u8(s[3])]
    }))
}

fn crop_region(transform: &SimilarityTransform, crop_size: (u32, u32)) -> Region {
    let inv = transform.inverse();
    let (w, h) = (f64::from(crop_size.0 - 1), f64::from(crop_size.1 - 1));
    let corners = [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]].map(|c| inv.apply(c));
    Region {
        x0: corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min),
        y0: corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min),
        x1: corners.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max),
        y1: corners.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Builds the session for a crop taken with `transform`.
pub fn session_for(
    transform: SimilarityTransform,
    source_landmarks: LandmarkSet,
    crop_size: (u32, u32),
) -> AlignSession {
    AlignSession {
        source_region: crop_region(&transform, crop_size),
        transform,
        source_landmarks,
        crop_size,
        original: None,
    }
}

/// Estimates the pose, warps the crop and returns it with its session.
pub fn align_face(
    image: &Raster,
    landmarks: &LandmarkSet,
    template: &LandmarkTemplate,
) -> Result<(Raster, AlignSession), AlignError> {
    let fit = estimate_similarity(landmarks, template)?;
    let crop = warp_crop(image, &fit.transform, template.crop_size)?;
    Ok((crop, session_for(fit.transform, landmarks.clone(), template.crop_size)))
}

/// Default feather width in pixels.
pub const DEFAULT_FEATHER: u32 = 8;

/// Warps `processed_crop` back into a copy of `original`.
///
/// Per-pixel blend weight is the crop alpha times a linear ramp rising from
/// 0 at the crop border to 1 at `feather` pixels inside it (`feather == 0`
/// disables the ramp). Pixels not covered by the crop are untouched.
pub fn reintegrate(
    processed_crop: &Raster,
    session: &AlignSession,
    original: &Raster,
    feather: u32,
) -> Result<Raster, AlignError> {
    let found = (processed_crop.width(), processed_crop.height());
    if found != session.crop_size {
        return Err(AlignError::SizeMismatch {
            expected: session.crop_size,
            found,
        });
    }
    let t = &session.transform;
    let (cw, ch) = (f64::from(found.0 - 1), f64::from(found.1 - 1));
    let r = crop_region(t, session.crop_size);
    let clamp_x = |v: f64| v.clamp(0.0, f64::from(original.width() - 1)) as u32;
    let clamp_y = |v: f64| v.clamp(0.0, f64::from(original.height() - 1)) as u32;
    let (x_lo, x_hi) = (clamp_x(r.x0.floor()), clamp_x(r.x1.ceil()));
    let (y_lo, y_hi) = (clamp_y(r.y0.floor()), clamp_y(r.y1.ceil()));

    let mut out = original.clone();
    if r.x1 < 0.0 || r.y1 < 0.0 || r.x0 > f64::from(original.width()) || r.y0 > f64::from(original.height()) {
        return Ok(out);
    }
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let [qx, qy] = t.apply([f64::from(x), f64::from(y)]);
            let (qx, qy) = (snap(qx), snap(qy));
            if qx < 0.0 || qy < 0.0 || qx > cw || qy > ch {
                continue;
            }
            let s = sample(processed_crop, qx, qy);
            let ramp = if feather == 0 {
                1.0
            } else {
                let d = qx.min(qy).min(cw - qx).min(ch - qy);
                (d / f64::from(feather)).clamp(0.0, 1.0)
            };
            let weight = s[3] / 255.0 * ramp;
            if weight <= 0.0 {
                continue;
            }
            let px = out.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = to_u8(f64::from(px[c]) * (1.0 - weight) + s[c] * weight);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> LandmarkTemplate {
        LandmarkTemplate::default_256()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn bundled_template_is_valid() {
        let t = template();
        assert_eq!(t.crop_size, (256, 256));
        assert_eq!(t.points.len(), 68);
    }

    #[test]
    fn identity_fit() {
        let t = template();
        let src = LandmarkSet::new(t.points.clone()).unwrap();
        let fit = estimate_similarity(&src, &t).unwrap();
        assert_close(fit.transform.scale, 1.0, 1e-12);
        assert_close(fit.transform.rotation, 0.0, 1e-12);
        assert_close(fit.transform.tx, 0.0, 1e-9);
        assert_close(fit.transform.ty, 0.0, 1e-9);
        assert!(fit.residual < 1e-18);
    }

    #[test]
    fn translation_fit() {
        let t = template();
        let src = LandmarkSet::new(t.points.iter().map(|p| [p[0] + 10.0, p[1] - 5.0]).collect()).unwrap();
        let fit = estimate_similarity(&src, &t).unwrap();
        assert_close(fit.transform.scale, 1.0, 1e-12);
        assert_close(fit.transform.rotation, 0.0, 1e-12);
        assert_close(fit.transform.tx, -10.0, 1e-9);
        assert_close(fit.transform.ty, 5.0, 1e-9);
        assert!(fit.residual < 1e-16);
    }

    #[test]
    fn recovers_scaled_rotated_transform() {
        let t = template();
        let truth = SimilarityTransform::new(2.0, 30f64.to_radians(), 10.0, -5.0).unwrap();
        let inv = truth.inverse();
        let src = LandmarkSet::new(t.points.iter().map(|p| inv.apply(*p)).collect()).unwrap();
        let fit = estimate_similarity(&src, &t).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        assert!(rel(fit.transform.scale, 2.0) < 1e-9);
        assert!(rel(fit.transform.rotation, 30f64.to_radians()) < 1e-9);
        assert!(rel(fit.transform.tx, 10.0) < 1e-9);
        assert!(rel(fit.transform.ty, -5.0) < 1e-9);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn reflection_is_not_fitted() {
        // mirrored source: the best proper similarity cannot reach zero residual
        let t = template();
        let src: Vec<[f64; 2]> = t.points.iter().map(|p| [256.0 - p[0], p[1]]).collect();
        let fit = fit_similarity(&src, &t.points).unwrap();
        assert!(fit.transform.scale > 0.0);
        assert!(fit.residual > 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        let t = template();
        let same = LandmarkSet::new(vec![[5.0, 5.0]; 68]).unwrap();
        assert_eq!(estimate_similarity(&same, &t), Err(AlignError::DegenerateLandmarks));
        let mut pts = t.points.clone();
        pts[0][0] = f64::INFINITY;
        assert_eq!(fit_similarity(&pts, &t.points), Err(AlignError::NonFinite));
    }

    #[test]
    fn transform_algebra() {
        let t = SimilarityTransform::new(1.7, -2.5, 13.0, 4.5).unwrap();
        let id = t.then(&t.inverse());
        let m = id.matrix();
        let e = SimilarityTransform::identity().matrix();
        for r in 0..2 {
            for c in 0..3 {
                assert!((m[r][c] - e[r][c]).abs() < 1e-12, "{m:?}");
            }
        }
        let p = [3.0, -7.0];
        let q = t.inverse().apply(t.apply(p));
        assert_close(q[0], p[0], 1e-12);
        assert_close(q[1], p[1], 1e-12);
        assert!(SimilarityTransform::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert_close(SimilarityTransform::new(1.0, -PI, 0.0, 0.0).unwrap().rotation, PI, 0.0);
    }

    fn pattern(w: u32, h: u32) -> Raster {
        Raster::from_fn(w, h, Channels::Rgb, |x, y| [(16 * y + x) as u8, (x * 40) as u8, (y * 50) as u8, 255])
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = pattern(6, 5);
        let crop = warp_crop(&img, &SimilarityTransform::identity(), (6, 5)).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(crop.rgba(x, y), img.rgba(x, y));
            }
        }
    }

    #[test]
    fn integer_translation_shifts_with_transparent_fill() {
        let img = pattern(4, 4);
        // crop(u, v) = image(u − 1, v + 2)
        let t = SimilarityTransform::new(1.0, 0.0, 1.0, -2.0).unwrap();
        let crop = warp_crop(&img, &t, (4, 4)).unwrap();
        for v in 0..4i32 {
            for u in 0..4i32 {
                let (x, y) = (u - 1, v + 2);
                let expected = if (0..4).contains(&x) && (0..4).contains(&y) {
                    img.rgba(x as u32, y as u32)
                } else {
                    [0, 0, 0, 0]
                };
                assert_eq!(crop.rgba(u as u32, v as u32), expected, "at ({u},{v})");
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let img = pattern(4, 4);
        // T(x, y) = (3 − y, x)  ⇒  crop(u, v) = image(v, 3 − u)
        let t = SimilarityTransform::new(1.0, PI / 2.0, 3.0, 0.0).unwrap();
        let crop = warp_crop(&img, &t, (4, 4)).unwrap();
        for v in 0..4 {
            for u in 0..4 {
                assert_eq!(crop.rgba(u, v), img.rgba(v, 3 - u), "at ({u},{v})");
            }
        }
    }

    #[test]
    fn reintegrate_identity_replaces_region() {
        let original = pattern(8, 8);
        let session = session_for(
            SimilarityTransform::identity(),
            LandmarkSet::new(vec![[1.0, 1.0]; 68]).unwrap(),
            (4, 4),
        );
        let crop = Raster::filled(4, 4, &[9, 8, 7, 255]);
        let out = reintegrate(&crop, &session, &original, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x < 4 && y < 4 { [9, 8, 7, 255] } else { original.rgba(x, y) };
                assert_eq!(out.rgba(x, y), expected);
            }
        }
    }

    #[test]
    fn transparent_crop_changes_nothing() {
        let original = pattern(8, 8);
        let t = SimilarityTransform::new(1.3, 0.4, 2.0, -1.0).unwrap();
        let session = session_for(t, LandmarkSet::new(vec![[1.0, 1.0]; 68]).unwrap(), (5, 5));
        let crop = Raster::filled(5, 5, &[255, 0, 0, 0]);
        assert_eq!(reintegrate(&crop, &session, &original, 3).unwrap(), original);
    }

    #[test]
    fn feather_ramps_from_border() {
        let original = Raster::filled(20, 20, &[0, 0, 0]);
        let session = session_for(
            SimilarityTransform::identity(),
            LandmarkSet::new(vec![[1.0, 1.0]; 68]).unwrap(),
            (20, 20),
        );
        let crop = Raster::filled(20, 20, &[200, 200, 200, 255]);
        let out = reintegrate(&crop, &session, &original, 4).unwrap();
        assert_eq!(out.rgba(0, 10)[0], 0);
        assert_eq!(out.rgba(2, 10)[0], 100);
        assert_eq!(out.rgba(10, 10)[0], 200);
    }

    #[test]
    fn size_mismatch() {
        let session = session_for(
            SimilarityTransform::identity(),
            LandmarkSet::new(vec![[1.0, 1.0]; 68]).unwrap(),
            (4, 4),
        );
        assert!(matches!(
            reintegrate(&Raster::filled(3, 4, &[0, 0, 0, 0]), &session, &pattern(4, 4), 0),
            Err(AlignError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn session_json_round_trip() {
        let t = SimilarityTransform::new(0.7, 1.1, -3.25, 8.0).unwrap();
        let mut s = session_for(t, LandmarkSet::new(vec![[0.1, 1.0 / 3.0]; 68]).unwrap(), (16, 12));
        s.original = Some(pattern(3, 2));
        let text = s.to_canonical_json();
        assert_eq!(AlignSession::from_json(&text).unwrap(), s);
    }
}
