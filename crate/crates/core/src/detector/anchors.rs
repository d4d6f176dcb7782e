use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AnchorSpec {
    /// Aspect ratios `h / w`.
    pub ratios: Vec<f64>,
    /// Anchor side in units of the level stride.
    pub scale: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            ratios: alloc::vec![0.5, 1.0, 2.0],
            scale: 8.0,
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("anchor ratios must be positive".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("anchor scale must be positive".into()));
        }
        Ok(())
    }

    pub fn per_location(&self) -> usize {
        self.ratios.len()
    }
}

/// Anchors for an `h × w` level, location-major then ratio: anchor
/// `(y·w + x)·|ratios| + r` is centred on `((x + ½)·stride, (y + ½)·stride)`
/// with area `(scale·stride)²` and `h/w = ratios[r]`.
pub fn gen_anchors(h: usize, w: usize, stride: usize, spec: &AnchorSpec) -> Vec<BBox> {
    let side = spec.scale * stride as f64;
    let s = stride as f64;
    let shapes: Vec<(f64, f64)> = spec
        .ratios
        .iter()
        .map(|&r| {
            let q = libm::sqrt(r);
            (side / q, side * q)
        })
        .collect();
    let mut out = Vec::with_capacity(h * w * shapes.len());
    for y in 0..h {
        let cy = (y as f64 + 0.5) * s;
        for x in 0..w {
            let cx = (x as f64 + 0.5) * s;
            for &(aw, ah) in &shapes {
                out.push(BBox {
                    x1: cx - 0.5 * aw,
                    y1: cy - 0.5 * ah,
                    x2: cx + 0.5 * aw,
                    y2: cy + 0.5 * ah,
                });
            }
        }
    }
    out
}
