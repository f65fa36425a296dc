//! 2-D convolution as a candle custom op built on im2col + GEMM.
//!
//! Patches are laid out as one `(C*k*k, B*Ho*Wo)` matrix, so the forward
//! pass and both gradients are single 2-D matrix products. Candle's own
//! conv backward goes through a naive transposed convolution and strided
//! copies, which is several times slower on CPU. The backward here is
//! first-order only; higher-order terms (the gradient penalty) are built
//! from explicit forward-mode graphs instead.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, DType, Device, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PatchGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn columns(&self) -> usize {
        self.batch * self.positions()
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    fn valid(&self, kk: usize, size: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
        let hi = if size + p > kk { ((size + p - kk - 1) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Walks every (row, output line) pair; `f(img_start, col_start, len)`
    /// handles one contiguous run of `len` output columns.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let cols = self.columns();
        let hw = ho * wo;
        for n in 0..self.batch {
            for c in 0..self.channels {
                let img_base = (n * self.channels + c) * self.height;
                for ky in 0..k {
                    let (oy0, oy1) = self.valid(ky, self.height, ho);
                    for kx in 0..k {
                        let (ox0, ox1) = self.valid(kx, self.width, wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let row = (c * k + ky) * k + kx;
                        let col_base = row * cols + n * hw;
                        for oy in oy0..oy1 {
                            let iy = oy * self.stride + ky - self.padding;
                            let ix0 = ox0 * self.stride + kx - self.padding;
                            f((img_base + iy) * self.width + ix0, col_base + oy * wo + ox0, ox1 - ox0);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, img: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; self.rows() * self.columns()];
        let s = self.stride;
        self.for_each_run(|i, j, len| {
            if s == 1 {
                out[j..j + len].copy_from_slice(&img[i..i + len]);
            } else {
                for (t, o) in out[j..j + len].iter_mut().enumerate() {
                    *o = img[i + t * s];
                }
            }
        });
        out
    }

    fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; self.batch * self.channels * self.height * self.width];
        let s = self.stride;
        self.for_each_run(|i, j, len| {
            if s == 1 {
                for (o, v) in out[i..i + len].iter_mut().zip(&cols[j..j + len]) {
                    *o += v;
                }
            } else {
                for (t, v) in cols[j..j + len].iter().enumerate() {
                    out[i + t * s] += v;
                }
            }
        });
        out
    }
}

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv op needs contiguous inputs"),
    }
}

/// `(O, B*P)` to `(B, O, P)`.
fn batch_major(src: &[f32], o: usize, b: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for oc in 0..o {
        for n in 0..b {
            let s = &src[oc * b * p + n * p..oc * b * p + (n + 1) * p];
            out[(n * o + oc) * p..(n * o + oc + 1) * p].copy_from_slice(s);
        }
    }
    out
}

/// `(B, O, P)` to `(O, B*P)`.
fn channel_major(src: &[f32], o: usize, b: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for n in 0..b {
        for oc in 0..o {
            let s = &src[(n * o + oc) * p..(n * o + oc + 1) * p];
            out[oc * b * p + n * p..oc * b * p + (n + 1) * p].copy_from_slice(s);
        }
    }
    out
}

pub(crate) struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dOp {
    fn geometry(&self, x: &[usize], w: &[usize]) -> candle_core::Result<PatchGeometry> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
            candle_core::bail!("conv2d: input {x:?} incompatible with kernel {w:?}");
        }
        if x[2] + 2 * self.padding < w[2] || x[3] + 2 * self.padding < w[3] {
            candle_core::bail!("conv2d: kernel {w:?} larger than padded input {x:?}");
        }
        Ok(PatchGeometry {
            batch: x[0],
            channels: x[1],
            height: x[2],
            width: x[3],
            kernel: w[2],
            stride: self.stride,
            padding: self.padding,
        })
    }
}

/// A row-major or transposed view of a dense f32 matrix.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
            ..self
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// Row-major `a @ b`.
fn gemm(a: Mat, b: Mat) -> Vec<f32> {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![0f32; m * n];
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the slices hold exactly rows * cols elements and the strides
    // describe in-bounds row-major or column-major layouts of them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

impl Conv2dOp {
    fn forward(&self, xs: &CpuStorage, xl: &Layout, ws: &CpuStorage, wl: &Layout, bias: Option<&[f32]>) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(xl.dims(), wl.dims())?;
        let o = wl.dims()[0];
        let cols = g.im2col(f32_slice(xs, xl)?);
        let y = gemm(
            Mat::new(f32_slice(ws, wl)?, o, g.rows()),
            Mat::new(&cols, g.rows(), g.columns()),
        );
        let p = g.positions();
        let mut out = batch_major(&y, o, g.batch, p);
        if let Some(bias) = bias {
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let b = bias[i % o];
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
        Ok((
            CpuStorage::F32(out),
            Shape::from((g.batch, o, g.out_height(), g.out_width())),
        ))
    }

    /// Returns `(dx, dw, db)`.
    fn backward(&self, x: &Tensor, w: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let g = self.geometry(x.dims(), w.dims())?;
        let o = w.dim(0)?;
        let gy = grad.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let gy = channel_major(&gy, o, g.batch, g.positions());
        let db: Vec<f32> = gy.chunks(g.columns()).map(|r| r.iter().sum()).collect();
        let cols = g.im2col(&x.flatten_all()?.to_vec1::<f32>()?);
        let gy_m = Mat::new(&gy, o, g.columns());
        let dw = gemm(gy_m, Mat::new(&cols, g.rows(), g.columns()).t());
        let dw = Tensor::from_vec(dw, w.dims(), &Device::Cpu)?;
        let wv = w.flatten_all()?.to_vec1::<f32>()?;
        let dcols = gemm(Mat::new(&wv, o, g.rows()).t(), gy_m);
        let dx = Tensor::from_vec(g.col2im(&dcols), x.dims(), &Device::Cpu)?;
        Ok((dx, dw, Tensor::from_vec(db, o, &Device::Cpu)?))
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        self.forward(xs, xl, ws, wl, None)
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (dx, dw, _) = self.backward(x, w, grad)?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col-bias"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if bl.dims() != [wl.dims()[0]] {
            candle_core::bail!("conv2d: bias {:?} does not match kernel {:?}", bl.dims(), wl.dims());
        }
        self.forward(xs, xl, ws, wl, Some(f32_slice(bs, bl)?))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dw, db) = self.backward(x, w, grad)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = PatchGeometry {
            batch: 2,
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f32> = (0..80).map(|v| v as f32 * 0.1).collect();
        let cols = g.im2col(&x);
        let y: Vec<f32> = (0..cols.len()).map(|v| (v % 7) as f32 - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = g.col2im(&y);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
    }

    #[test]
    fn layout_shuffles_invert() {
        let v: Vec<f32> = (0..24).map(|x| x as f32).collect();
        assert_eq!(channel_major(&batch_major(&v, 3, 2, 4), 3, 2, 4), v);
    }
}
