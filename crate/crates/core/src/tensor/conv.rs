use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// `floor((input + 2·padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, bias: Shape, stride: usize, padding: usize) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::config(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if weight.channels != input.channels {
            return Err(Error::config(format!(
                "conv2d weight {weight} expects {} input channels, input is {input}",
                weight.channels
            )));
        }
        if bias.numel() != weight.batch {
            return Err(Error::config(format!(
                "conv2d bias has {} entries for {} output channels",
                bias.numel(),
                weight.batch
            )));
        }
        let ho = conv_output_size(input.height, weight.height, stride, padding);
        let wo = conv_output_size(input.width, weight.width, stride, padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::config(format!(
                "conv2d kernel {}x{} does not fit input {input} with padding {padding}",
                weight.height, weight.width
            )));
        };
        Ok(Self {
            c_in: input.channels,
            h: input.height,
            w: input.width,
            c_out: weight.batch,
            kh: weight.height,
            kw: weight.width,
            stride,
            padding,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn output_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.c_out, self.ho, self.wo)
    }

    /// Calls `f(row, ci, iy, oy, ox_lo, ox_hi)` for every unfolded row and
    /// output row whose input row is in bounds; `ox_lo..ox_hi` is the range
    /// of output columns whose input column is in bounds.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    // input column = ox*s + off must lie in [0, w)
                    let off = kx as isize - p;
                    let ox_lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
                    let lim = self.w as isize - off;
                    let ox_hi = if lim <= 0 {
                        0
                    } else {
                        (((lim + s - 1) / s) as usize).min(self.wo)
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        f(row, ci, iy as usize, oy, ox_lo, ox_hi);
                    }
                }
            }
        }
    }
}

/// Unfolds one batch item `x` (C×H×W) into `col` (K×P), zero padded.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    col.fill(T::ZERO);
    let (p_out, s) = (g.p(), g.stride);
    let pad = g.padding as isize;
    g.for_each_run(|row, ci, iy, oy, ox_lo, ox_hi| {
        let kx = row % g.kw;
        let src = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
        let dst = &mut col[row * p_out + oy * g.wo..row * p_out + (oy + 1) * g.wo];
        let first = ((ox_lo * s) as isize + kx as isize - pad) as usize;
        if s == 1 {
            dst[ox_lo..ox_hi].copy_from_slice(&src[first..first + ox_hi - ox_lo]);
        } else {
            for (d, &v) in dst[ox_lo..ox_hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                *d = v;
            }
        }
    });
}

/// Folds `col` (K×P) back onto `dx` (C×H×W), accumulating.
fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (p_out, s) = (g.p(), g.stride);
    let pad = g.padding as isize;
    g.for_each_run(|row, ci, iy, oy, ox_lo, ox_hi| {
        let kx = row % g.kw;
        let src = &col[row * p_out + oy * g.wo..row * p_out + (oy + 1) * g.wo];
        let dst = &mut dx[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
        let first = ((ox_lo * s) as isize + kx as isize - pad) as usize;
        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(&src[ox_lo..ox_hi]) {
            *d += v;
        }
    });
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let batch = x.shape().batch;
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(g.output_shape(batch));
    let mut col = vec![T::ZERO; k * p];
    for n in 0..batch {
        im2col(&g, x.batch_item(n), &mut col);
        let y = &mut out.data_mut()[n * g.c_out * p..(n + 1) * g.c_out * p];
        for (co, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        T::gemm(
            g.c_out,
            k,
            p,
            T::ONE,
            weight.data(),
            (k as isize, 1),
            &col,
            (p as isize, 1),
            T::ONE,
            y,
            p as isize,
        );
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &[T],
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let batch = x.shape().batch;
    let (k, p) = (g.k(), g.p());
    let mut dx = need[0].then(|| vec![T::ZERO; x.shape().numel()]);
    let mut dw = need[1].then(|| vec![T::ZERO; weight.shape().numel()]);
    let mut db = need[2].then(|| vec![T::ZERO; g.c_out]);
    let mut col = vec![T::ZERO; k * p];
    for n in 0..batch {
        let gy = &grad_out[n * g.c_out * p..(n + 1) * g.c_out * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in gy.chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&g, x.batch_item(n), &mut col);
            // dW (Cout×K) += dY (Cout×P) · colᵀ (P×K)
            T::gemm(
                g.c_out,
                p,
                k,
                T::ONE,
                gy,
                (p as isize, 1),
                &col,
                (1, p as isize),
                T::ONE,
                dw,
                k as isize,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (K×P) = Wᵀ (K×Cout) · dY (Cout×P)
            T::gemm(
                k,
                g.c_out,
                p,
                T::ONE,
                weight.data(),
                (1, k as isize),
                gy,
                (p as isize, 1),
                T::ZERO,
                &mut col,
                p as isize,
            );
            let item = x.shape().item();
            col2im_add(&g, &col, &mut dx[n * item..(n + 1) * item]);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}
