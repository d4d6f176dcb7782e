//! RoI align: a fixed `out × out` grid of bilinear samples per box, each
//! taken at its cell centre on one pyramid level.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::deform::{bilinear, bilinear_backward};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::graph::{GradBuf, Graph, Op, Var};
use crate::tensor::Tensor;

pub(crate) struct RoiRecord {
    levels: Vec<Var>,
    /// Per box: pyramid level and the `out²` feature-space `(y, x)` samples.
    picks: Vec<(usize, Vec<(f64, f64)>)>,
    channels: usize,
}

/// Pyramid level for a box: `round(log₂(√area / canonical))`, clamped.
/// `canonical` is the box side that maps onto level 0.
pub fn roi_level(b: &BBox, n_levels: usize, canonical: f64) -> usize {
    let k = libm::round(libm::log2(libm::sqrt(b.area()) / canonical));
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n_levels - 1)
    }
}

/// Cell-centre sample points of `b` in the coordinates of a level with the
/// given stride (feature pixel `i` is centred on image coordinate `(i + ½)·s`).
pub fn cell_centres(b: &BBox, out: usize, stride: usize) -> Vec<(f64, f64)> {
    let (cw, ch) = (b.width() / out as f64, b.height() / out as f64);
    let s = stride as f64;
    let mut pts = Vec::with_capacity(out * out);
    for i in 0..out {
        let y = b.y1 + (i as f64 + 0.5) * ch;
        for j in 0..out {
            let x = b.x1 + (j as f64 + 0.5) * cw;
            pts.push((y / s - 0.5, x / s - 0.5));
        }
    }
    pts
}

impl Graph {
    /// Features for each box in `rois`, stacked to `[R × C × out × out]`.
    /// All levels must share the channel count.
    pub fn roi_align(
        &mut self,
        levels: &[Var],
        strides: &[usize],
        rois: &[BBox],
        out: usize,
        canonical: f64,
    ) -> Result<Var> {
        if levels.is_empty() || levels.len() != strides.len() || out == 0 {
            return Err(Error::Config("roi_align needs one stride per level and out > 0".into()));
        }
        let c = self.shape(levels[0])[0];
        for &l in levels {
            let s = self.shape(l);
            if s.len() != 3 || s[0] != c {
                return Err(Error::ShapeMismatch {
                    op: "roi_align levels",
                    lhs: self.shape(levels[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let cells = out * out;
        let mut data = vec![0.0; rois.len() * c * cells];
        let mut picks = Vec::with_capacity(rois.len());
        for (r, b) in rois.iter().enumerate() {
            if !b.is_valid() {
                return Err(Error::DegenerateBox);
            }
            let lv = roi_level(b, levels.len(), canonical);
            let pts = cell_centres(b, out, strides[lv]);
            let s = self.shape(levels[lv]);
            let (h, w) = (s[1], s[2]);
            let feat = self.data(levels[lv]);
            for ch in 0..c {
                let plane = &feat[ch * h * w..(ch + 1) * h * w];
                let dst = &mut data[(r * c + ch) * cells..][..cells];
                for (d, &(y, x)) in dst.iter_mut().zip(&pts) {
                    *d = bilinear(plane, h, w, y, x);
                }
            }
            picks.push((lv, pts));
        }
        let t = Tensor::new(&[rois.len(), c, out, out], data)?;
        let rec = RoiRecord {
            levels: levels.to_vec(),
            picks,
            channels: c,
        };
        Ok(self.push(t, Op::RoiAlign(Box::new(rec)), levels))
    }
}

pub(crate) fn roi_backward(g: &Graph, rec: &RoiRecord, gout: &[f64], buf: &mut GradBuf) {
    let c = rec.channels;
    for (lv, &level) in rec.levels.iter().enumerate() {
        let s = g.shape(level);
        let (h, w) = (s[1], s[2]);
        let feat = g.data(level);
        let Some(dst) = buf.slot(level) else { continue };
        for (r, (l, pts)) in rec.picks.iter().enumerate() {
            if *l != lv {
                continue;
            }
            let cells = pts.len();
            for ch in 0..c {
                let plane = &feat[ch * h * w..(ch + 1) * h * w];
                let dplane = &mut dst[ch * h * w..(ch + 1) * h * w];
                let go = &gout[(r * c + ch) * cells..][..cells];
                for (&(y, x), &gv) in pts.iter().zip(go) {
                    if gv != 0.0 {
                        bilinear_backward(plane, h, w, y, x, gv, Some(&mut *dplane));
                    }
                }
            }
        }
    }
}
