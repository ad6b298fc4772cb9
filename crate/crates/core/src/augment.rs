//! Single-image crop planning: five aspect ratios times five face-relative scales,
//! each crop centered on the face box, plus per-sample horizontal flips.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.w as u64 <= width as u64 && self.y as u64 + self.h as u64 <= height as u64
    }
}

pub type FaceBox = Rect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AspectRatio {
    Landscape16x9,
    Landscape4x3,
    Square,
    Portrait3x4,
    Portrait9x16,
}

impl AspectRatio {
    pub const ALL: [AspectRatio; 5] = [
        AspectRatio::Landscape16x9,
        AspectRatio::Landscape4x3,
        AspectRatio::Square,
        AspectRatio::Portrait3x4,
        AspectRatio::Portrait9x16,
    ];

    /// `(width, height)` ratio terms.
    pub fn terms(self) -> (u32, u32) {
        match self {
            AspectRatio::Landscape16x9 => (16, 9),
            AspectRatio::Landscape4x3 => (4, 3),
            AspectRatio::Square => (1, 1),
            AspectRatio::Portrait3x4 => (3, 4),
            AspectRatio::Portrait9x16 => (9, 16),
        }
    }

    /// Crop `(w, h)` whose shorter side is `short`.
    pub fn dims_for_short_side(self, short: u32) -> (u32, u32) {
        let (aw, ah) = self.terms();
        let s = short as f64;
        if aw >= ah {
            ((s * aw as f64 / ah as f64).round() as u32, short)
        } else {
            (short, (s * ah as f64 / aw as f64).round() as u32)
        }
    }
}

impl fmt::Display for AspectRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (w, h) = self.terms();
        write!(f, "{w}:{h}")
    }
}

impl Serialize for AspectRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AspectRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AspectRatio::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown aspect ratio {s:?}")))
    }
}

pub const SCALE_MULTIPLIERS: [f64; 5] = [1.5, 2.0, 2.5, 3.5, 4.5];

pub const MAX_PLAN_SIZE: usize = AspectRatio::ALL.len() * SCALE_MULTIPLIERS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub rect: Rect,
    pub aspect: AspectRatio,
    pub scale_multiplier: f64,
    pub requested_short_side: u32,
    pub short_side: u32,
    pub flip_allowed: bool,
}

impl CropSpec {
    pub fn clamped(&self) -> bool {
        self.short_side != self.requested_short_side
    }
}

fn fits(aspect: AspectRatio, short: u32, width: u32, height: u32) -> bool {
    let (w, h) = aspect.dims_for_short_side(short);
    short > 0 && w > 0 && h > 0 && w <= width && h <= height
}

/// Largest feasible short side not above `requested`, else the smallest feasible one above it.
fn feasible_short_side(aspect: AspectRatio, requested: u32, width: u32, height: u32) -> Option<u32> {
    let cap = requested.min(width).min(height);
    if let Some(s) = (1..=cap).rev().find(|s| fits(aspect, *s, width, height)) {
        return Some(s);
    }
    (requested.max(1)..=width.max(height)).find(|s| fits(aspect, *s, width, height))
}

/// Offset along one axis that centers `len` on the face interval, then shifts it in bounds.
fn centered_offset(face_start: u32, face_len: u32, len: u32, extent: u32) -> u32 {
    let doubled = 2 * face_start as i64 + face_len as i64 - len as i64;
    let start = doubled.div_euclid(2);
    start.clamp(0, (extent - len) as i64) as u32
}

pub fn validate_face(width: u32, height: u32, face: &FaceBox) -> Result<()> {
    if face.w == 0 || face.h == 0 {
        return Err(Error::Invalid("face box must have positive size".into()));
    }
    if face.w > width || face.h > height {
        return Err(Error::Invalid(format!(
            "face box {}x{} larger than image {width}x{height}",
            face.w, face.h
        )));
    }
    if !face.within(width, height) {
        return Err(Error::Invalid(format!("face box {face:?} extends outside {width}x{height} image")));
    }
    Ok(())
}

/// Plans up to 25 distinct crops, aspect-major then multiplier-minor.
pub fn plan_crops(width: u32, height: u32, face: &FaceBox) -> Result<Vec<CropSpec>> {
    validate_face(width, height, face)?;
    let f_long = face.w.max(face.h);
    let mut seen = HashSet::new();
    let mut plan = Vec::with_capacity(MAX_PLAN_SIZE);
    for aspect in AspectRatio::ALL {
        for m in SCALE_MULTIPLIERS {
            let requested = (m * f_long as f64).round() as u32;
            let Some(short) = feasible_short_side(aspect, requested, width, height) else {
                continue;
            };
            let (w, h) = aspect.dims_for_short_side(short);
            let rect = Rect {
                x: centered_offset(face.x, face.w, w, width),
                y: centered_offset(face.y, face.h, h, height),
                w,
                h,
            };
            if seen.insert(rect) {
                plan.push(CropSpec {
                    rect,
                    aspect,
                    scale_multiplier: m,
                    requested_short_side: requested,
                    short_side: short,
                    flip_allowed: true,
                });
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct View {
    pub rect: Rect,
    pub flip: bool,
}

pub fn sample_view(spec: &CropSpec, rng: &mut Rng) -> View {
    View {
        rect: spec.rect,
        flip: spec.flip_allowed && rng.bernoulli(0.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_direct_formula() {
        let face = Rect { x: 1850, y: 1300, w: 300, h: 400 };
        let plan = plan_crops(4000, 3000, &face).unwrap();
        let spec = plan
            .iter()
            .find(|s| s.aspect == AspectRatio::Square && s.scale_multiplier == 1.5)
            .unwrap();
        assert_eq!(spec.rect, Rect { x: 1700, y: 1200, w: 600, h: 600 });
        assert!(!spec.clamped());
    }

    #[test]
    fn huge_image_gives_full_plan() {
        let face = Rect { x: 9800, y: 9800, w: 300, h: 400 };
        let plan = plan_crops(20_000, 20_000, &face).unwrap();
        assert_eq!(plan.len(), 25);
        assert_eq!(plan[0].aspect, AspectRatio::Landscape16x9);
        assert_eq!(plan[4].scale_multiplier, 4.5);
        assert!(plan.iter().all(|s| s.rect.contains(&face)));
    }

    #[test]
    fn small_square_image_collapses_duplicates() {
        let face = Rect { x: 150, y: 150, w: 400, h: 400 };
        let plan = plan_crops(700, 700, &face).unwrap();
        assert!(plan.len() < 25);
        let squares: Vec<_> = plan.iter().filter(|s| s.aspect == AspectRatio::Square).collect();
        assert_eq!(squares.len(), 2);
        assert_eq!(squares[0].rect, Rect { x: 50, y: 50, w: 600, h: 600 });
        assert_eq!(squares[1].rect, Rect { x: 0, y: 0, w: 700, h: 700 });
    }

    #[test]
    fn face_outside_image_is_rejected() {
        assert!(plan_crops(100, 100, &Rect { x: 0, y: 0, w: 200, h: 50 }).is_err());
        assert!(plan_crops(100, 100, &Rect { x: 90, y: 0, w: 20, h: 50 }).is_err());
        assert!(plan_crops(100, 100, &Rect { x: 0, y: 0, w: 0, h: 50 }).is_err());
    }

    #[test]
    fn aspect_serializes_as_ratio_text() {
        let s = serde_json::to_string(&AspectRatio::Portrait9x16).unwrap();
        assert_eq!(s, "\"9:16\"");
        let back: AspectRatio = serde_json::from_str(&s).unwrap();
        assert_eq!(back, AspectRatio::Portrait9x16);
    }

    #[test]
    fn flips_follow_seed_and_permission() {
        let face = Rect { x: 100, y: 100, w: 50, h: 50 };
        let mut spec = plan_crops(1000, 1000, &face).unwrap().remove(0);
        let seq = |seed| {
            let mut rng = Rng::new(seed);
            (0..64).map(|_| sample_view(&spec, &mut rng).flip).collect::<Vec<_>>()
        };
        assert_eq!(seq(3), seq(3));
        spec.flip_allowed = false;
        let mut rng = Rng::new(3);
        assert!((0..100).all(|_| !sample_view(&spec, &mut rng).flip));
    }
}
