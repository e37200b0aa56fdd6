//! Direct 2-D convolution kernels with hand-written backward passes.
//!
//! Memory traffic dominates on small CPUs, so unit-stride layers never
//! materialize an im2col matrix: they work on zero-padded planes where every
//! kernel tap is one long contiguous axpy. Strided layers go through im2col.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Geometry {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    fn is_unit(&self) -> bool {
        self.sh == 1 && self.sw == 1
    }
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn new(g: &Geometry, b: usize, ci: usize, co: usize, h: usize, w: usize) -> Self {
        let (ho, wo) = g.out_dims(h, w);
        Self { b, ci, co, h, w, ho, wo }
    }
}

fn axpy<T: WithDType>(y: &mut [T], a: T, x: &[T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

fn dot<T: WithDType>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut s = T::zero();
    for (a, b) in xr.iter().zip(yr) {
        s += *a * *b;
    }
    for a in acc {
        s += a;
    }
    s
}

// Stride-1 layout: each input plane is zero-padded to (h + 2ph) × (w + 2pw);
// outputs live in "wide" planes of ho rows × (w + 2pw) columns whose trailing
// columns are scratch. Tap (ky, kx) then maps wide index p to padded index
// p + ky·wp + kx for every p in 0..span.
struct Wide {
    hp: usize,
    wp: usize,
    span: usize,
}

impl Wide {
    fn new(g: &Geometry, d: &Dims) -> Self {
        let wp = d.w + 2 * g.pw;
        Self { hp: d.h + 2 * g.ph, wp, span: (d.ho - 1) * wp + d.wo }
    }

    fn pad<T: WithDType>(&self, x: &[T], planes: usize, h: usize, w: usize, g: &Geometry) -> Vec<T> {
        let mut out = vec![T::zero(); planes * self.hp * self.wp];
        for p in 0..planes {
            for r in 0..h {
                let src = &x[(p * h + r) * w..][..w];
                out[(p * self.hp + r + g.ph) * self.wp + g.pw..][..w].copy_from_slice(src);
            }
        }
        out
    }

    /// Spread dense (planes, ho, wo) into wide planes with zero scratch columns.
    fn widen<T: WithDType>(&self, y: &[T], planes: usize, ho: usize, wo: usize) -> Vec<T> {
        let mut out = vec![T::zero(); planes * ho * self.wp];
        for p in 0..planes {
            for r in 0..ho {
                out[(p * ho + r) * self.wp..][..wo].copy_from_slice(&y[(p * ho + r) * wo..][..wo]);
            }
        }
        out
    }
}

fn forward<T: WithDType>(x: &[T], wt: &[T], d: Dims, g: &Geometry) -> Vec<T> {
    let (kk, plane_o) = (g.kh * g.kw, d.ho * d.wo);
    let mut y = vec![T::zero(); d.b * d.co * plane_o];
    let wide = Wide::new(g, &d);
    let xp = wide.pad(x, d.b * d.ci, d.h, d.w, g);
    let plane_p = wide.hp * wide.wp;
    let mut acc = vec![T::zero(); d.ho * wide.wp];
    for bi in 0..d.b {
        for o in 0..d.co {
            acc.iter_mut().for_each(|v| *v = T::zero());
            for c in 0..d.ci {
                let xc = &xp[(bi * d.ci + c) * plane_p..][..plane_p];
                let wk = &wt[(o * d.ci + c) * kk..][..kk];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let off = ky * wide.wp + kx;
                        axpy(&mut acc[..wide.span], wk[ky * g.kw + kx], &xc[off..off + wide.span]);
                    }
                }
            }
            let yo = &mut y[(bi * d.co + o) * plane_o..][..plane_o];
            for r in 0..d.ho {
                yo[r * d.wo..][..d.wo].copy_from_slice(&acc[r * wide.wp..][..d.wo]);
            }
        }
    }
    y
}

fn backward_input<T: WithDType>(dy: &[T], wt: &[T], d: Dims, g: &Geometry) -> Vec<T> {
    let (kk, plane_i) = (g.kh * g.kw, d.h * d.w);
    let mut dx = vec![T::zero(); d.b * d.ci * plane_i];
    let wide = Wide::new(g, &d);
    let dyw = wide.widen(dy, d.b * d.co, d.ho, d.wo);
    let plane_w = d.ho * wide.wp;
    let mut acc = vec![T::zero(); wide.hp * wide.wp];
    for bi in 0..d.b {
        for c in 0..d.ci {
            acc.iter_mut().for_each(|v| *v = T::zero());
            for o in 0..d.co {
                let gy = &dyw[(bi * d.co + o) * plane_w..][..plane_w];
                let wk = &wt[(o * d.ci + c) * kk..][..kk];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let off = ky * wide.wp + kx;
                        axpy(&mut acc[off..off + wide.span], wk[ky * g.kw + kx], &gy[..wide.span]);
                    }
                }
            }
            let xo = &mut dx[(bi * d.ci + c) * plane_i..][..plane_i];
            for r in 0..d.h {
                xo[r * d.w..][..d.w].copy_from_slice(&acc[(r + g.ph) * wide.wp + g.pw..][..d.w]);
            }
        }
    }
    dx
}

fn backward_weight<T: WithDType>(dy: &[T], x: &[T], d: Dims, g: &Geometry) -> Vec<T> {
    let kk = g.kh * g.kw;
    let mut dw = vec![T::zero(); d.co * d.ci * kk];
    let wide = Wide::new(g, &d);
    let xp = wide.pad(x, d.b * d.ci, d.h, d.w, g);
    let dyw = wide.widen(dy, d.b * d.co, d.ho, d.wo);
    let (plane_p, plane_w) = (wide.hp * wide.wp, d.ho * wide.wp);
    for bi in 0..d.b {
        for o in 0..d.co {
            let gy = &dyw[(bi * d.co + o) * plane_w..][..wide.span];
            for c in 0..d.ci {
                let xc = &xp[(bi * d.ci + c) * plane_p..][..plane_p];
                let wk = &mut dw[(o * d.ci + c) * kk..][..kk];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let off = ky * wide.wp + kx;
                        wk[ky * g.kw + kx] += dot(gy, &xc[off..off + wide.span]);
                    }
                }
            }
        }
    }
    dw
}

// Row kernels for stride > 1, on the same zero-padded planes.
/// Patch matrix of a strided convolution: `(B, Cin·KH·KW, Ho·Wo)`.
///
/// Strided layers only see small maps here, so the matrix stays small and
/// the product runs through the regular matmul.
fn im2col<T: WithDType>(x: &[T], d: Dims, g: &Geometry) -> Vec<T> {
    let (kk, plane_o) = (g.kh * g.kw, d.ho * d.wo);
    let wide = Wide::new(g, &d);
    let xp = wide.pad(x, d.b * d.ci, d.h, d.w, g);
    let plane_p = wide.hp * wide.wp;
    let mut cols = vec![T::zero(); d.b * d.ci * kk * plane_o];
    for (bc, col) in cols.chunks_exact_mut(kk * plane_o).enumerate() {
        let xc = &xp[bc * plane_p..][..plane_p];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[(ky * g.kw + kx) * plane_o..][..plane_o];
                for oy in 0..d.ho {
                    let xr = &xc[(oy * g.sh + ky) * wide.wp + kx..];
                    for (j, v) in row[oy * d.wo..][..d.wo].iter_mut().enumerate() {
                        *v = xr[j * g.sw];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: WithDType>(cols: &[T], d: Dims, g: &Geometry) -> Vec<T> {
    let (kk, plane_o, plane_i) = (g.kh * g.kw, d.ho * d.wo, d.h * d.w);
    let wide = Wide::new(g, &d);
    let mut acc = vec![T::zero(); wide.hp * wide.wp];
    let mut dx = vec![T::zero(); d.b * d.ci * plane_i];
    for (col, xo) in cols.chunks_exact(kk * plane_o).zip(dx.chunks_exact_mut(plane_i)) {
        acc.iter_mut().for_each(|v| *v = T::zero());
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[(ky * g.kw + kx) * plane_o..][..plane_o];
                for oy in 0..d.ho {
                    let base = (oy * g.sh + ky) * wide.wp + kx;
                    for (j, v) in row[oy * d.wo..][..d.wo].iter().enumerate() {
                        acc[base + j * g.sw] += *v;
                    }
                }
            }
        }
        for r in 0..d.h {
            xo[r * d.w..][..d.w].copy_from_slice(&acc[(r + g.ph) * wide.wp + g.pw..][..d.w]);
        }
    }
    dx
}

struct Im2Col(Geometry);

struct Col2Im {
    geo: Geometry,
    h: usize,
    w: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ci, h, w) = l.shape().dims4()?;
        let d = Dims::new(&self.0, b, ci, 0, h, w);
        let g = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, l)?, d, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, l)?, d, &g)),
            _ => bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((b, ci * g.kh * g.kw, d.ho * d.wo))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, dy: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        Ok(Some(dy.contiguous()?.apply_op1_no_bwd(&Col2Im { geo: self.0, h, w })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, k, _) = l.shape().dims3()?;
        let ci = k / (self.geo.kh * self.geo.kw);
        let d = Dims::new(&self.geo, b, ci, 0, self.h, self.w);
        let g = self.geo;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, l)?, d, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, l)?, d, &g)),
            _ => bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from((b, ci, self.h, self.w))))
    }
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("convolution expects contiguous operands"),
    }
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            _ => bail!("convolution: unsupported or mismatched dtypes"),
        }
    };
}

struct ConvFwd(Geometry);

struct ConvBwdInput {
    geo: Geometry,
    h: usize,
    w: usize,
}

struct ConvBwdWeight(Geometry);

impl CustomOp2 for ConvFwd {
    fn name(&self) -> &'static str {
        "conv2d-direct"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ci, h, w) = l1.shape().dims4()?;
        let (co, _, _, _) = l2.shape().dims4()?;
        let d = Dims::new(&self.0, b, ci, co, h, w);
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, wt| forward(x, wt, d, &g));
        Ok((out, Shape::from((b, co, d.ho, d.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let dy = dy.contiguous()?;
        let dx = dy.apply_op2_no_bwd(&w.contiguous()?, &ConvBwdInput { geo: self.0, h, w: wd })?;
        let dw = dy.apply_op2_no_bwd(&x.contiguous()?, &ConvBwdWeight(self.0))?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for ConvBwdInput {
    fn name(&self) -> &'static str {
        "conv2d-direct-bwd-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, co, _, _) = l1.shape().dims4()?;
        let (_, ci, _, _) = l2.shape().dims4()?;
        let d = Dims::new(&self.geo, b, ci, co, self.h, self.w);
        let g = self.geo;
        let out = dispatch!(s1, l1, s2, l2, |dy, wt| backward_input(dy, wt, d, &g));
        Ok((out, Shape::from((b, ci, self.h, self.w))))
    }
}

impl CustomOp2 for ConvBwdWeight {
    fn name(&self) -> &'static str {
        "conv2d-direct-bwd-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, co, _, _) = l1.shape().dims4()?;
        let (_, ci, h, w) = l2.shape().dims4()?;
        let d = Dims::new(&self.0, b, ci, co, h, w);
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |dy, x| backward_weight(dy, x, d, &g));
        Ok((out, Shape::from((co, ci, g.kh, g.kw))))
    }
}

/// 2-D convolution of `x` (B, Cin, H, W) with `w` (Cout, Cin, KH, KW).
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, g: Geometry) -> candle_core::Result<Tensor> {
    let (_, ci, h, wd) = x.dims4()?;
    let (_, wci, kh, kw) = w.dims4()?;
    if (kh, kw) != (g.kh, g.kw) || wci != ci {
        bail!("conv2d: weight {:?} does not fit {ci} input channels and a {}x{} kernel", w.dims(), g.kh, g.kw);
    }
    if h + 2 * g.ph < g.kh || wd + 2 * g.pw < g.kw {
        bail!("conv2d: input {h}x{wd} smaller than the kernel");
    }
    if g.is_unit() {
        return x.contiguous()?.apply_op2(&w.contiguous()?, ConvFwd(g));
    }
    let (b, co) = (x.dim(0)?, w.dim(0)?);
    let (ho, wo) = g.out_dims(h, wd);
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    w.reshape((co, ci * kh * kw))?
        .broadcast_left(b)?
        .contiguous()?
        .matmul(&cols)?
        .reshape((b, co, ho, wo))
}
