//! Deterministic synthetic document pages: text bands, ruled and partially
//! ruled tables, and line-heavy distractor figures.
//!
//! Page `i` of a spec is drawn from ChaCha8 seeded with `spec.seed` on
//! stream `i`, so every page is reproducible on its own. All placement is
//! integer arithmetic; the only floating-point randomness is the additive
//! pixel noise. Intensities are quantised to multiples of 1/255 so pages
//! survive an 8-bit round trip unchanged.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;

/// Gap kept between any two placed objects and from the page edge.
pub const MARGIN: usize = 8;
const PLACEMENT_TRIES: usize = 64;
const INK: f64 = 0.0;
const TEXT_INK: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PageSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of tables per page.
    pub tables: (usize, usize),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    /// Probability that a table carries every ruling line; otherwise only
    /// the top, header and bottom rules are drawn.
    pub ruling_prob: f64,
    pub figures: (usize, usize),
    /// Amplitude of uniform additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PageSpec {
    fn default() -> Self {
        Self {
            width: 192,
            height: 256,
            tables: (1, 3),
            rows: (3, 7),
            cols: (2, 5),
            ruling_prob: 0.6,
            figures: (0, 2),
            noise: 0.03,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: (usize, usize)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::Config(format!("{name} range {r:?} is empty")));
    }
    Ok(())
}

impl PageSpec {
    pub fn validate(&self) -> Result<()> {
        check_range("tables", self.tables)?;
        check_range("rows", self.rows)?;
        check_range("cols", self.cols)?;
        check_range("figures", self.figures)?;
        if self.rows.0 == 0 || self.cols.0 == 0 {
            return Err(Error::Config("tables need at least one row and column".into()));
        }
        if !(0.0..=1.0).contains(&self.ruling_prob) {
            return Err(Error::Config("ruling_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 1]".into()));
        }
        if self.width < 64 || self.height < 64 {
            return Err(Error::Config("pages must be at least 64×64".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentSample {
    pub id: String,
    pub image: GrayImage,
    pub gt_boxes: Vec<BBox>,
    /// Zero-based class per box (0 = table).
    pub gt_classes: Vec<usize>,
}

pub fn page_id(index: usize) -> String {
    format!("page_{index:05}")
}

/// Inverse of [`page_id`].
pub fn page_index(id: &str) -> Option<usize> {
    id.strip_prefix("page_")?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    /// Whether the two rectangles come closer than `gap` pixels.
    fn near(&self, o: &Rect, gap: usize) -> bool {
        self.x < o.x + o.w + gap && o.x < self.x + self.w + gap && self.y < o.y + o.h + gap && o.y < self.y + self.h + gap
    }

    fn contains(&self, x: usize, y: usize, pad: usize) -> bool {
        x + pad >= self.x && x < self.x + self.w + pad && y + pad >= self.y && y < self.y + self.h + pad
    }

    fn bbox(&self) -> BBox {
        BBox {
            x1: self.x as f64,
            y1: self.y as f64,
            x2: (self.x + self.w) as f64,
            y2: (self.y + self.h) as f64,
        }
    }
}

fn place(rng: &mut ChaCha8Rng, spec: &PageSpec, taken: &[Rect], w: (usize, usize), h: (usize, usize)) -> Option<Rect> {
    let max_w = spec.width - 2 * MARGIN;
    let max_h = spec.height - 2 * MARGIN;
    for _ in 0..PLACEMENT_TRIES {
        let rw = rng.gen_range(w.0..=w.1).min(max_w);
        let rh = rng.gen_range(h.0..=h.1).min(max_h);
        let x = rng.gen_range(MARGIN..=spec.width - MARGIN - rw);
        let y = rng.gen_range(MARGIN..=spec.height - MARGIN - rh);
        let r = Rect { x, y, w: rw, h: rh };
        if taken.iter().all(|t| !r.near(t, MARGIN)) {
            return Some(r);
        }
    }
    None
}

fn hline(img: &mut GrayImage, x0: usize, x1: usize, y: usize, v: f64) {
    img.fill_rect(x0 as isize, y as isize, x1 as isize, y as isize + 1, v);
}

fn vline(img: &mut GrayImage, x: usize, y0: usize, y1: usize, v: f64) {
    img.fill_rect(x as isize, y0 as isize, x as isize + 1, y1 as isize, v);
}

/// Split `len` into `n` integer parts differing by at most one; returns the
/// `n + 1` boundaries.
fn cuts(start: usize, len: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| start + i * len / n).collect()
}

fn draw_table(img: &mut GrayImage, r: &Rect, rows: usize, cols: usize, ruled: bool, rng: &mut ChaCha8Rng) {
    let ys = cuts(r.y, r.h, rows);
    let xs = cuts(r.x, r.w, cols);
    let (right, bottom) = (r.x + r.w, r.y + r.h);
    hline(img, r.x, right, r.y, INK);
    hline(img, r.x, right, bottom - 1, INK);
    hline(img, r.x, right, ys[1], INK);
    if ruled {
        for &y in &ys[2..rows] {
            hline(img, r.x, right, y, INK);
        }
        for &x in &xs[1..cols] {
            vline(img, x, r.y, bottom, INK);
        }
        vline(img, r.x, r.y, bottom, INK);
        vline(img, right - 1, r.y, bottom, INK);
    }
    for i in 0..rows {
        let (cy0, cy1) = (ys[i], ys[i + 1]);
        if cy1 - cy0 < 7 {
            continue;
        }
        let ty = cy0 + (cy1 - cy0) / 2 - 1;
        for j in 0..cols {
            let (cx0, cx1) = (xs[j], xs[j + 1]);
            let avail = (cx1 - cx0).saturating_sub(7);
            if avail < 3 {
                continue;
            }
            let len = rng.gen_range(avail / 3..=avail).max(2);
            img.fill_rect((cx0 + 3) as isize, ty as isize, (cx0 + 3 + len) as isize, (ty + 3) as isize, TEXT_INK);
        }
    }
}

fn draw_figure(img: &mut GrayImage, r: &Rect, rng: &mut ChaCha8Rng) {
    let (right, bottom) = (r.x + r.w, r.y + r.h);
    match rng.gen_range(0..3) {
        // bar chart with axes and gridlines
        0 => {
            vline(img, r.x, r.y, bottom, INK);
            hline(img, r.x, right, bottom - 1, INK);
            for y in (r.y..bottom).step_by(8) {
                for x in (r.x..right).step_by(3) {
                    img.ink(x as isize, y as isize, 0.5);
                }
            }
            let mut x = r.x + 4;
            while x + 6 < right {
                let bh = rng.gen_range(r.h / 5..=r.h - 2);
                img.fill_rect(x as isize, (bottom - bh) as isize, (x + 5) as isize, bottom as isize, 0.35);
                x += rng.gen_range(8..=12);
            }
        }
        // hatched panel
        1 => {
            img.outline(&r.bbox(), INK, 0);
            let step = rng.gen_range(3..=6);
            for y in r.y..bottom {
                for x in r.x..right {
                    if (x + y) % step == 0 {
                        img.ink(x as isize, y as isize, 0.4);
                    }
                }
            }
        }
        // flowchart: boxes joined by horizontal and vertical connectors
        _ => {
            let n = rng.gen_range(3..=5);
            let bw = (r.w / 3).max(8);
            let bh = (r.h / (n + 1)).max(6);
            let mut prev: Option<(usize, usize)> = None;
            for i in 0..n {
                let bx = r.x + rng.gen_range(0..=r.w - bw);
                let by = r.y + i * (r.h - bh) / (n - 1).max(1);
                let b = Rect { x: bx, y: by, w: bw, h: bh };
                img.outline(&b.bbox(), INK, if rng.gen_bool(0.3) { 2 } else { 0 });
                let c = (bx + bw / 2, by);
                if let Some((px, py)) = prev {
                    let mid = (py + by) / 2;
                    vline(img, px, py, mid, INK);
                    hline(img, px.min(c.0), px.max(c.0) + 1, mid, INK);
                    vline(img, c.0, mid, by, INK);
                }
                prev = Some((c.0, by + bh - 1));
            }
        }
    }
}

fn draw_text(img: &mut GrayImage, spec: &PageSpec, reserved: &[Rect], rng: &mut ChaCha8Rng) {
    let mut y = MARGIN / 2 + 2;
    while y + 4 < spec.height - MARGIN / 2 {
        if rng.gen_bool(0.85) {
            let mut x = MARGIN;
            let end = spec.width - MARGIN - rng.gen_range(0..spec.width / 3);
            while x < end {
                let len = rng.gen_range(5..=22).min(end - x);
                for yy in y..y + 4 {
                    for xx in x..x + len {
                        if !reserved.iter().any(|r| r.contains(xx, yy, MARGIN / 2)) {
                            img.ink(xx as isize, yy as isize, TEXT_INK);
                        }
                    }
                }
                x += len + rng.gen_range(3..=6);
            }
        }
        y += rng.gen_range(9..=12);
    }
}

/// Render page `index`. Tables that cannot be placed after bounded retries
/// are skipped, so a page may carry fewer tables than drawn.
pub fn generate_page(spec: &PageSpec, index: usize) -> Result<DocumentSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let mut img = GrayImage::new(spec.width, spec.height, 1.0);

    let n_tables = rng.gen_range(spec.tables.0..=spec.tables.1);
    let n_figs = rng.gen_range(spec.figures.0..=spec.figures.1);
    let mut taken: Vec<Rect> = Vec::new();
    let mut tables = Vec::new();
    let max_tw = spec.width - 2 * MARGIN;
    for _ in 0..n_tables {
        let w = (spec.width * 3 / 10, max_tw);
        let h = (spec.height / 7, spec.height * 9 / 20);
        if let Some(r) = place(&mut rng, spec, &taken, w, h) {
            taken.push(r);
            tables.push(r);
        }
    }
    let mut figs = Vec::new();
    for _ in 0..n_figs {
        let w = (spec.width / 4, spec.width / 2);
        let h = (spec.height / 8, spec.height / 4);
        if let Some(r) = place(&mut rng, spec, &taken, w, h) {
            taken.push(r);
            figs.push(r);
        }
    }

    draw_text(&mut img, spec, &taken, &mut rng);
    for r in &tables {
        let rows = rng.gen_range(spec.rows.0..=spec.rows.1).min(r.h / 6).max(1);
        let cols = rng.gen_range(spec.cols.0..=spec.cols.1).min(r.w / 10).max(1);
        let ruled = rng.gen_bool(spec.ruling_prob);
        draw_table(&mut img, r, rows, cols, ruled, &mut rng);
    }
    for r in &figs {
        draw_figure(&mut img, r, &mut rng);
    }
    if spec.noise > 0.0 {
        for v in img.data.iter_mut() {
            *v += rng.gen_range(-spec.noise..=spec.noise);
        }
    }
    for v in img.data.iter_mut() {
        *v = libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0;
    }

    let gt_boxes: Vec<BBox> = tables.iter().map(Rect::bbox).collect();
    Ok(DocumentSample {
        id: page_id(index),
        image: img,
        gt_classes: alloc::vec![0; gt_boxes.len()],
        gt_boxes,
    })
}

/// A white page with no content and no ground truth.
pub fn blank_page(spec: &PageSpec) -> DocumentSample {
    DocumentSample {
        id: String::from("blank"),
        image: GrayImage::new(spec.width, spec.height, 1.0),
        gt_boxes: Vec::new(),
        gt_classes: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Consecutive, disjoint index ranges: train first, then val, then test.
pub fn make_split(n_train: usize, n_val: usize, n_test: usize) -> SplitManifest {
    let ids = |a: usize, n: usize| (a..a + n).map(page_id).collect();
    SplitManifest {
        train: ids(0, n_train),
        val: ids(n_train, n_val),
        test: ids(n_train + n_val, n_test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    #[test]
    fn pages_are_reproducible() {
        let spec = PageSpec {
            seed: 11,
            ..Default::default()
        };
        for i in 0..3 {
            assert_eq!(generate_page(&spec, i).unwrap(), generate_page(&spec, i).unwrap());
        }
        assert_ne!(generate_page(&spec, 0).unwrap().image, generate_page(&spec, 1).unwrap().image);
    }

    #[test]
    fn no_tables_means_no_ground_truth() {
        let spec = PageSpec {
            tables: (0, 0),
            ..Default::default()
        };
        let p = generate_page(&spec, 4).unwrap();
        assert!(p.gt_boxes.is_empty() && p.gt_classes.is_empty());
    }

    #[test]
    fn placement_contract() {
        let spec = PageSpec::default();
        let mut total = 0;
        for i in 0..40 {
            let p = generate_page(&spec, i).unwrap();
            total += p.gt_boxes.len();
            assert_eq!(p.gt_boxes.len(), p.gt_classes.len());
            for (a, b) in p.gt_boxes.iter().enumerate() {
                assert!(b.within(spec.width as f64, spec.height as f64));
                for c in &p.gt_boxes[a + 1..] {
                    assert_eq!(iou(b, c), 0.0);
                    let gap_x = (c.x1 - b.x2).max(b.x1 - c.x2);
                    let gap_y = (c.y1 - b.y2).max(b.y1 - c.y2);
                    assert!(gap_x.max(gap_y) >= MARGIN as f64);
                }
            }
            assert!(p.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(GrayImage::from_u8(p.image.width, p.image.height, &p.image.to_u8()), p.image);
        }
        assert!(total >= 40, "only {total} tables on 40 pages");
    }

    #[test]
    fn splits() {
        let s = make_split(20, 5, 5);
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        assert_eq!(all.len(), 30);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 30);
        assert_eq!(make_split(2, 0, 1).val.len(), 0);
        assert_eq!(make_split(20, 5, 5), s);
        assert_eq!(page_index(&s.test[0]), Some(25));
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(PageSpec {
            tables: (3, 1),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PageSpec {
            ruling_prob: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
