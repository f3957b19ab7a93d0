//! 2-D convolution via im2col + GEMM, and nearest upsampling.

use crate::gemm::gemm;
use crate::graph::{GradSink, Op};
use crate::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug)]
pub(crate) struct ConvRecord {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    /// im2col buffers for every image, `[B, C*k*k, Ho*Wo]`.
    cols: Vec<Real>,
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[Real], g: Geom, cols: &mut [Real]) {
    let pix = g.pixels();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[Real], g: Geom, dx: &mut [Real]) {
    let pix = g.pixels();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * pix..(row + 1) * pix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Geom), TensorError> {
    let bad = || TensorError::Shape {
        op: "conv2d",
        lhs: xs.to_vec(),
        rhs: ws.to_vec(),
    };
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
        return Err(bad());
    }
    if stride == 0 {
        return Err(TensorError::Config("conv2d stride must be positive".into()));
    }
    let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let k = ws[2];
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(bad());
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    Ok((
        bsz,
        ws[0],
        Geom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

impl Graph {
    /// `x: [B, C, H, W]`, `w: [O, C, k, k]`, optional bias `[O]` -> `[B, O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (bsz, o, geo) = geometry(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::Shape {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![o],
                });
            }
        }
        let (rows, pix) = (geo.rows(), geo.pixels());
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut cols = vec![0.0; bsz * rows * pix];
        let mut out = vec![0.0; bsz * o * pix];
        let img = geo.c * geo.h * geo.w;
        for n in 0..bsz {
            let col = &mut cols[n * rows * pix..(n + 1) * rows * pix];
            im2col(&xd[n * img..(n + 1) * img], geo, col);
            gemm(o, rows, pix, wd, false, col, false, &mut out[n * o * pix..(n + 1) * o * pix], false);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_exact_mut(pix).enumerate() {
                let bias = bd[i % o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = Tensor::new(vec![bsz, o, geo.ho, geo.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            t,
            Op::Conv2d(ConvRecord {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            }),
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || factor == 0 {
            return Err(TensorError::Config(format!("cannot upsample {shape:?} by {factor}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(a).numel() / (h * w);
        let src = self.value(a).data();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                let row = &src[p * h * w + (y / factor) * w..p * h * w + (y / factor + 1) * w];
                out.extend((0..ow).map(|x| row[x / factor]));
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let t = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::UpsampleNearest { a, factor }, rg))
    }
}

pub(crate) fn conv2d_backward(rec: &ConvRecord, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    let xv = sink.value(rec.x);
    let wv = sink.value(rec.w);
    let (bsz, o, geo) = geometry(xv.shape(), wv.shape(), rec.stride, rec.pad).expect("validated in forward");
    let (rows, pix) = (geo.rows(), geo.pixels());
    debug_assert_eq!(out.numel(), bsz * o * pix);
    if let Some(b) = rec.b {
        if let Some(gb) = sink.buf(b) {
            for (i, chunk) in g.chunks_exact(pix).enumerate() {
                gb[i % o] += chunk.iter().sum::<Real>();
            }
        }
    }
    if let Some(gw) = sink.buf(rec.w) {
        for n in 0..bsz {
            gemm(
                o,
                pix,
                rows,
                &g[n * o * pix..(n + 1) * o * pix],
                false,
                &rec.cols[n * rows * pix..(n + 1) * rows * pix],
                true,
                gw,
                true,
            );
        }
    }
    if sink.wants(rec.x) {
        let wd = wv.data();
        let img = geo.c * geo.h * geo.w;
        let mut dcols = vec![0.0; rows * pix];
        let gx = sink.buf(rec.x).expect("wants grad");
        for n in 0..bsz {
            gemm(rows, o, pix, wd, true, &g[n * o * pix..(n + 1) * o * pix], false, &mut dcols, false);
            col2im(&dcols, geo, &mut gx[n * img..(n + 1) * img]);
        }
    }
}

pub(crate) fn upsample_backward(a: Var, factor: usize, out: &Tensor, g: &[Real], sink: &mut GradSink<'_>) {
    let os = out.shape();
    let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
    let (h, w) = (oh / factor, ow / factor);
    let planes = out.numel() / (oh * ow);
    if let Some(ga) = sink.buf(a) {
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    ga[p * h * w + (y / factor) * w + x / factor] += g[p * oh * ow + y * ow + x];
                }
            }
        }
    }
}
