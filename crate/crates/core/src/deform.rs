//! Regular and deformable 2-D convolution, and the bilinear sampler they
//! share.
//!
//! Both convolutions are lowered to a column matrix with one row per
//! `(input channel, kernel point)` pair (row-major over the kernel grid) and
//! one column per output location, followed by a matrix product with the
//! weights. A deformable convolution only differs in how the column matrix
//! is filled: each kernel point is displaced by its learned offset and
//! sampled bilinearly. With zero offsets every sample lands on an integer
//! grid point and the two paths produce identical bits.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{GradBuf, Graph, Op, Var};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Shape bookkeeping for one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(Error::ConvGeometry(format!(
                "expected x[C×H×W] and w[O×C×kh×kw], got {x_shape:?} and {w_shape:?}"
            )));
        }
        let [in_ch, height, width] = [x_shape[0], x_shape[1], x_shape[2]];
        let [out_ch, wc, kh, kw] = [w_shape[0], w_shape[1], w_shape[2], w_shape[3]];
        if wc != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ConvGeometry(format!("kernel {kh}×{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::ConvGeometry("stride must be positive".into()));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::ConvGeometry(format!(
                "input {height}×{width} with padding {padding} is smaller than kernel {kh}×{kw}"
            )));
        }
        Ok(Self {
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    /// Kernel points per input channel, `N = |R|`.
    pub fn points(&self) -> usize {
        self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn rows(&self) -> usize {
        self.in_ch * self.points()
    }

    /// Undisplaced sampling position of kernel point `n` for output `(oy, ox)`.
    fn base(&self, n: usize, oy: usize, ox: usize) -> (isize, isize) {
        let (ky, kx) = (n / self.kw, n % self.kw);
        (
            (oy * self.stride + ky) as isize - self.padding as isize,
            (ox * self.stride + kx) as isize - self.padding as isize,
        )
    }
}

/// Convolution weights as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    /// `[out_ch × in_ch × kh × kw]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvKernel {
    pub fn geom(&self, x: &Tensor) -> Result<ConvGeom> {
        ConvGeom::new(x.shape(), self.weight.shape(), self.stride, self.padding)
    }

    pub fn conv2d(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (xv, w, b) = self.bind(&mut g, x);
        let y = g.conv2d(xv, w, b, self.stride, self.padding)?;
        Ok(g.value(y).clone())
    }

    pub fn deform_conv2d(&self, x: &Tensor, offsets: &OffsetField) -> Result<Tensor> {
        let mut g = Graph::new();
        let (xv, w, b) = self.bind(&mut g, x);
        let off = g.constant(offsets.0.clone());
        let y = g.deform_conv2d(xv, w, b, off, self.stride, self.padding)?;
        Ok(g.value(y).clone())
    }

    fn bind(&self, g: &mut Graph, x: &Tensor) -> (Var, Var, Var) {
        (
            g.constant(x.clone()),
            g.constant(self.weight.clone()),
            g.constant(self.bias.clone()),
        )
    }
}

/// Per-location kernel displacements `[2N × out_h × out_w]`, channel order
/// `(dy₁, dx₁, …, dy_N, dx_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField(pub Tensor);

impl OffsetField {
    pub fn zeros(points: usize, out_h: usize, out_w: usize) -> Self {
        Self(Tensor::zeros(&[2 * points, out_h, out_w]))
    }

    pub fn constant(points: usize, out_h: usize, out_w: usize, dy: f64, dx: f64) -> Self {
        let mut t = Self::zeros(points, out_h, out_w);
        let hw = out_h * out_w;
        for n in 0..points {
            t.0.data_mut()[2 * n * hw..(2 * n + 1) * hw].fill(dy);
            t.0.data_mut()[(2 * n + 1) * hw..(2 * n + 2) * hw].fill(dx);
        }
        t
    }
}

/// Bilinear read of `plane[h×w]` at fractional `(y, x)`; neighbours outside
/// the plane read as zero.
#[inline]
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if !(y > -1.0 && y < h as f64 && x > -1.0 && x < w as f64) {
        return 0.0;
    }
    let (y0, x0) = (libm::floor(y), libm::floor(x));
    let (ly, lx) = (y - y0, x - x0);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    hy * hx * at(y0, x0) + hy * lx * at(y0, x0 + 1) + ly * hx * at(y0 + 1, x0) + ly * lx * at(y0 + 1, x0 + 1)
}

/// Backward of [`bilinear`]: scatters `g` into `dplane` (when given) and
/// returns `(∂/∂y, ∂/∂x)` scaled by `g`. At integer coordinates the
/// derivative is taken from the floor cell.
#[inline]
pub fn bilinear_backward(
    plane: &[f64],
    h: usize,
    w: usize,
    y: f64,
    x: f64,
    g: f64,
    dplane: Option<&mut [f64]>,
) -> (f64, f64) {
    if !(y > -1.0 && y < h as f64 && x > -1.0 && x < w as f64) {
        return (0.0, 0.0);
    }
    let (y0f, x0f) = (libm::floor(y), libm::floor(x));
    let (ly, lx) = (y - y0f, x - x0f);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0f as isize, x0f as isize);
    let idx = |yy: isize, xx: isize| {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
            .then(|| yy as usize * w + xx as usize)
    };
    let corners = [
        (idx(y0, x0), hy * hx),
        (idx(y0, x0 + 1), hy * lx),
        (idx(y0 + 1, x0), ly * hx),
        (idx(y0 + 1, x0 + 1), ly * lx),
    ];
    let v = |k: usize| corners[k].0.map_or(0.0, |i| plane[i]);
    let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
    if let Some(dp) = dplane {
        for (i, wgt) in corners {
            if let Some(i) = i {
                dp[i] += g * wgt;
            }
        }
    }
    let dy = hx * (v10 - v00) + lx * (v11 - v01);
    let dx = hy * (v01 - v00) + ly * (v11 - v10);
    (g * dy, g * dx)
}

pub(crate) struct ConvRecord {
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeom,
    cols: Vec<f64>,
}

pub(crate) struct DeformRecord {
    x: Var,
    w: Var,
    b: Var,
    off: Var,
    geom: ConvGeom,
    cols: Vec<f64>,
}

pub(crate) struct SampleRecord {
    x: Var,
    pts: Var,
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let p_len = geom.out_len();
    let n_pts = geom.points();
    let mut cols = vec![0.0; geom.rows() * p_len];
    for ic in 0..geom.in_ch {
        let plane = &x[ic * geom.height * geom.width..(ic + 1) * geom.height * geom.width];
        for n in 0..n_pts {
            let row = &mut cols[(ic * n_pts + n) * p_len..(ic * n_pts + n + 1) * p_len];
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let (y, x) = geom.base(n, oy, ox);
                    if y >= 0 && x >= 0 && (y as usize) < geom.height && (x as usize) < geom.width {
                        row[oy * geom.out_w + ox] = plane[y as usize * geom.width + x as usize];
                    }
                }
            }
        }
    }
    cols
}

fn deform_cols(x: &[f64], off: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let p_len = geom.out_len();
    let n_pts = geom.points();
    let mut cols = vec![0.0; geom.rows() * p_len];
    for ic in 0..geom.in_ch {
        let plane = &x[ic * geom.height * geom.width..(ic + 1) * geom.height * geom.width];
        for n in 0..n_pts {
            let row = &mut cols[(ic * n_pts + n) * p_len..(ic * n_pts + n + 1) * p_len];
            let (dys, dxs) = (&off[2 * n * p_len..], &off[(2 * n + 1) * p_len..]);
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let p = oy * geom.out_w + ox;
                    let (by, bx) = geom.base(n, oy, ox);
                    let y = by as f64 + dys[p];
                    let x = bx as f64 + dxs[p];
                    row[p] = bilinear(plane, geom.height, geom.width, y, x);
                }
            }
        }
    }
    cols
}

/// `y[o, p] = Σ_k w[o, k]·cols[k, p] + b[o]`, summing `k` in ascending order.
fn project(w: &[f64], b: &[f64], cols: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let p_len = geom.out_len();
    let mut y = vec![0.0; geom.out_ch * p_len];
    gemm_acc(w, cols, &mut y, geom.out_ch, geom.rows(), p_len);
    for (row, &bias) in y.chunks_mut(p_len).zip(b) {
        row.iter_mut().for_each(|v| *v += bias);
    }
    y
}

fn check_bias(geom: &ConvGeom, b_shape: &[usize]) -> Result<()> {
    if b_shape != [geom.out_ch] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: vec![geom.out_ch],
            rhs: b_shape.to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    /// Zero-padded 2-D convolution of `x[C×H×W]` with `w[O×C×kh×kw]` and `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        check_bias(&geom, self.shape(b))?;
        let cols = im2col(self.data(x), &geom);
        let y = project(self.data(w), self.data(b), &cols, &geom);
        let out = Tensor::new(&[geom.out_ch, geom.out_h, geom.out_w], y)?;
        let rec = ConvRecord { x, w, b, geom, cols };
        Ok(self.push(out, Op::Conv(Box::new(rec)), &[x, w, b]))
    }

    /// Deformable convolution: every kernel point of every output location
    /// is displaced by its entry in `off[2N×out_h×out_w]` and read
    /// bilinearly. Gradients flow to `x`, `w`, `b` and `off`.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        off: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        check_bias(&geom, self.shape(b))?;
        let want = [2 * geom.points(), geom.out_h, geom.out_w];
        if self.shape(off) != want {
            return Err(Error::ShapeMismatch {
                op: "deform_conv2d offsets",
                lhs: want.to_vec(),
                rhs: self.shape(off).to_vec(),
            });
        }
        let cols = deform_cols(self.data(x), self.data(off), &geom);
        let y = project(self.data(w), self.data(b), &cols, &geom);
        let out = Tensor::new(&[geom.out_ch, geom.out_h, geom.out_w], y)?;
        let rec = DeformRecord {
            x,
            w,
            b,
            off,
            geom,
            cols,
        };
        Ok(self.push(out, Op::DeformConv(Box::new(rec)), &[x, w, b, off]))
    }

    /// Sample `x[C×H×W]` at `pts[len×2]` (rows of `(y, x)`), giving `[C×len]`.
    pub fn bilinear_sample(&mut self, x: Var, pts: Var) -> Result<Var> {
        let (xs, ps) = (self.shape(x), self.shape(pts));
        if xs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: xs.to_vec(),
                rhs: ps.to_vec(),
            });
        }
        let (c, h, w, len) = (xs[0], xs[1], xs[2], ps[0]);
        let (xd, pd) = (self.data(x), self.data(pts));
        let mut out = vec![0.0; c * len];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for i in 0..len {
                out[ch * len + i] = bilinear(plane, h, w, pd[2 * i], pd[2 * i + 1]);
            }
        }
        let t = Tensor::new(&[c, len], out)?;
        Ok(self.push(t, Op::Bilinear(Box::new(SampleRecord { x, pts })), &[x, pts]))
    }
}

fn linear_backward(
    w: Var,
    b: Var,
    cols: &[f64],
    geom: &ConvGeom,
    gout: &[f64],
    buf: &mut GradBuf,
) {
    let p_len = geom.out_len();
    if let Some(gw) = buf.slot(w) {
        gemm_nt_acc(gout, cols, gw, geom.out_ch, p_len, geom.rows());
    }
    if let Some(gb) = buf.slot(b) {
        for (o, row) in gout.chunks(p_len).enumerate() {
            gb[o] += row.iter().sum::<f64>();
        }
    }
}

fn dcols(g: &Graph, w: Var, geom: &ConvGeom, gout: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; geom.rows() * geom.out_len()];
    gemm_tn_acc(g.data(w), gout, &mut d, geom.out_ch, geom.rows(), geom.out_len());
    d
}

pub(crate) fn conv_backward(g: &Graph, rec: &ConvRecord, gout: &[f64], buf: &mut GradBuf) {
    let geom = &rec.geom;
    linear_backward(rec.w, rec.b, &rec.cols, geom, gout, buf);
    if let Some(gx) = buf.slot(rec.x) {
        let d = dcols(g, rec.w, geom, gout);
        let p_len = geom.out_len();
        for ic in 0..geom.in_ch {
            let plane = &mut gx[ic * geom.height * geom.width..(ic + 1) * geom.height * geom.width];
            for n in 0..geom.points() {
                let row = &d[(ic * geom.points() + n) * p_len..][..p_len];
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let (y, x) = geom.base(n, oy, ox);
                        if y >= 0 && x >= 0 && (y as usize) < geom.height && (x as usize) < geom.width {
                            plane[y as usize * geom.width + x as usize] += row[oy * geom.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn deform_backward(g: &Graph, rec: &DeformRecord, gout: &[f64], buf: &mut GradBuf) {
    let geom = &rec.geom;
    linear_backward(rec.w, rec.b, &rec.cols, geom, gout, buf);
    let (want_x, want_off) = (buf.wants(rec.x), buf.wants(rec.off));
    if !want_x && !want_off {
        return;
    }
    let d = dcols(g, rec.w, geom, gout);
    let p_len = geom.out_len();
    let n_pts = geom.points();
    let (xd, off) = (g.data(rec.x), g.data(rec.off));
    let hw = geom.height * geom.width;
    let mut gx = want_x.then(|| vec![0.0; xd.len()]);
    let mut goff = vec![0.0; off.len()];
    for ic in 0..geom.in_ch {
        let plane = &xd[ic * hw..(ic + 1) * hw];
        for n in 0..n_pts {
            let row = &d[(ic * n_pts + n) * p_len..][..p_len];
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let p = oy * geom.out_w + ox;
                    if row[p] == 0.0 {
                        continue;
                    }
                    let (by, bx) = geom.base(n, oy, ox);
                    let y = by as f64 + off[2 * n * p_len + p];
                    let x = bx as f64 + off[(2 * n + 1) * p_len + p];
                    let dplane = gx.as_mut().map(|v| &mut v[ic * hw..(ic + 1) * hw]);
                    let (dy, dx) = bilinear_backward(plane, geom.height, geom.width, y, x, row[p], dplane);
                    goff[2 * n * p_len + p] += dy;
                    goff[(2 * n + 1) * p_len + p] += dx;
                }
            }
        }
    }
    if let (Some(src), Some(dst)) = (gx, buf.slot(rec.x)) {
        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
    if let Some(dst) = buf.slot(rec.off) {
        dst.iter_mut().zip(goff).for_each(|(a, b)| *a += b);
    }
}

pub(crate) fn sample_backward(g: &Graph, rec: &SampleRecord, gout: &[f64], buf: &mut GradBuf) {
    let xs = g.shape(rec.x);
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let len = g.shape(rec.pts)[0];
    let (xd, pd) = (g.data(rec.x), g.data(rec.pts));
    let mut gx = buf.wants(rec.x).then(|| vec![0.0; xd.len()]);
    let mut gp = vec![0.0; pd.len()];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for i in 0..len {
            let dplane = gx.as_mut().map(|v| &mut v[ch * h * w..(ch + 1) * h * w]);
            let (dy, dx) = bilinear_backward(plane, h, w, pd[2 * i], pd[2 * i + 1], gout[ch * len + i], dplane);
            gp[2 * i] += dy;
            gp[2 * i + 1] += dx;
        }
    }
    if let (Some(src), Some(dst)) = (gx, buf.slot(rec.x)) {
        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
    if let Some(dst) = buf.slot(rec.pts) {
        dst.iter_mut().zip(gp).for_each(|(a, b)| *a += b);
    }
}

/// A convolution layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// He-initialised weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let weight = store.add_he(&format!("{name}.w"), &[out_ch, in_ch, k, k], in_ch * k * k, rng);
        let bias = store.add_zeros(&format!("{name}.b"), &[out_ch]);
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        let weight = store.add_zeros(&format!("{name}.w"), &[out_ch, in_ch, k, k]);
        let bias = store.add_zeros(&format!("{name}.b"), &[out_ch]);
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn kernel_points(&self, store: &ParamStore) -> usize {
        let s = store.get(self.weight).shape();
        s[2] * s[3]
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn kernel(&self, store: &ParamStore) -> ConvKernel {
        ConvKernel {
            weight: store.get(self.weight).clone(),
            bias: store.get(self.bias).clone(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Offset predictor paired with a deformable kernel: a regular convolution
/// with `2N` outputs and the paired kernel's stride and padding, starting
/// at exactly zero.
pub fn offset_head(store: &mut ParamStore, name: &str, in_ch: usize, paired: &ConvLayer) -> ConvLayer {
    let s = store.get(paired.weight).shape().to_vec();
    let (kh, kw) = (s[2], s[3]);
    let weight = store.add_zeros(&format!("{name}.w"), &[2 * kh * kw, in_ch, kh, kw]);
    let bias = store.add_zeros(&format!("{name}.b"), &[2 * kh * kw]);
    ConvLayer {
        weight,
        bias,
        stride: paired.stride,
        padding: paired.padding,
    }
}

/// A deformable convolution together with its offset head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformLayer {
    pub conv: ConvLayer,
    pub offsets: ConvLayer,
}

impl DeformLayer {
    pub fn new(store: &mut ParamStore, name: &str, conv: ConvLayer) -> Self {
        let in_ch = store.get(conv.weight).shape()[1];
        let offsets = offset_head(store, &format!("{name}.offset"), in_ch, &conv);
        Self { conv, offsets }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let off = self.offsets.forward(g, store, x)?;
        let w = g.param(store, self.conv.weight);
        let b = g.param(store, self.conv.bias);
        g.deform_conv2d(x, w, b, off, self.conv.stride, self.conv.padding)
    }
}
