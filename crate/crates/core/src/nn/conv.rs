//! 2-D convolution lowered to `im2col` + matrix multiply.
//!
//! The patch extraction is a custom op whose backward pass is the matching `col2im`
//! scatter, so both the input and weight gradients reduce to large GEMMs.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self, h: usize, w: usize) -> candle_core::Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            candle_core::bail!(
                "conv input {h}x{w} (padding {}) smaller than kernel {}x{}",
                self.padding,
                self.kernel_h,
                self.kernel_w
            );
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Visits every (column index, source pixel) pair of one output location.
    #[inline]
    fn for_each_tap(
        &self,
        c: usize,
        h: usize,
        w: usize,
        oy: usize,
        ox: usize,
        mut f: impl FnMut(usize, usize),
    ) {
        let mut col = 0;
        for ci in 0..c {
            let plane = ci * h * w;
            for ky in 0..self.kernel_h {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                for kx in 0..self.kernel_w {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        f(col, plane + iy as usize * w + ix as usize);
                    }
                    col += 1;
                }
            }
        }
    }
}

struct Im2Col {
    geom: ConvGeometry,
}

struct Col2Im {
    geom: ConvGeometry,
    c: usize,
    h: usize,
    w: usize,
}

impl Im2Col {
    fn run<T: WithDType>(&self, src: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = self.geom.out_hw(h, w).expect("checked by caller");
        let row_len = c * self.geom.kernel_h * self.geom.kernel_w;
        let mut dst = vec![T::zero(); n * ho * wo * row_len];
        for b in 0..n {
            let image = &src[b * c * h * w..(b + 1) * c * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let start = ((b * ho + oy) * wo + ox) * row_len;
                    let row = &mut dst[start..start + row_len];
                    self.geom
                        .for_each_tap(c, h, w, oy, ox, |col, px| row[col] = image[px]);
                }
            }
        }
        dst
    }
}

impl Col2Im {
    fn run<T: WithDType>(&self, cols: &[T], n: usize) -> Vec<T> {
        let (c, h, w) = (self.c, self.h, self.w);
        let (ho, wo) = self.geom.out_hw(h, w).expect("checked by caller");
        let row_len = c * self.geom.kernel_h * self.geom.kernel_w;
        let mut dst = vec![T::zero(); n * c * h * w];
        for b in 0..n {
            let image = &mut dst[b * c * h * w..(b + 1) * c * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let start = ((b * ho + oy) * wo + ox) * row_len;
                    let row = &cols[start..start + row_len];
                    self.geom
                        .for_each_tap(c, h, w, oy, ox, |col, px| image[px] += row[col]);
                }
            }
        }
        dst
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let (ho, wo) = self.geom.out_hw(h, w)?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?, n, c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?, n, c, h, w)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        let row_len = c * self.geom.kernel_h * self.geom.kernel_w;
        Ok((out, Shape::from((n, ho * wo, row_len))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            geom: self.geom,
            c,
            h,
            w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, _, _) = layout.shape().dims3()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?, n)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, Shape::from((n, self.c, self.h, self.w))))
    }
}

/// `input`: (N, C, H, W), `weight`: (Cout, C, kh, kw). Returns (N, Cout, Ho, Wo).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (c_out, c_in, kernel_h, kernel_w) = weight.dims4()?;
    if c != c_in {
        candle_core::bail!("conv2d: input has {c} channels, weight expects {c_in}");
    }
    let geom = ConvGeometry {
        kernel_h,
        kernel_w,
        stride,
        padding,
    };
    let (ho, wo) = geom.out_hw(h, w)?;
    let row_len = c * kernel_h * kernel_w;
    let cols = input.contiguous()?.apply_op1(Im2Col { geom })?;
    let out = cols
        .reshape((n * ho * wo, row_len))?
        .matmul(&weight.reshape((c_out, row_len))?.t()?)?;
    let out = match bias {
        Some(b) => out.broadcast_add(b)?,
        None => out,
    };
    out.reshape((n, ho * wo, c_out))?
        .transpose(1, 2)?
        .reshape((n, c_out, ho, wo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn matches_reference_conv() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1., (2, 3, 9, 7), &dev)?;
        let w = Tensor::randn(0f64, 1., (4, 3, 3, 3), &dev)?;
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
            let ours = conv2d(&x, &w, None, stride, pad)?;
            let reference = x.conv2d(&w, pad, stride, 1, 1)?;
            let diff = (ours - reference)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(diff < 1e-10, "stride {stride} pad {pad}: {diff}");
        }
        Ok(())
    }

    #[test]
    fn gradients_match_reference_conv() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1., (2, 2, 6, 6), &dev)?)?;
        let w = Var::from_tensor(&Tensor::randn(0f64, 1., (3, 2, 3, 3), &dev)?)?;
        let probe = Tensor::randn(0f64, 1., (2, 3, 3, 3), &dev)?;
        let ours = (conv2d(x.as_tensor(), w.as_tensor(), None, 2, 1)? * &probe)?.sum_all()?;
        let reference = (x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1)? * &probe)?.sum_all()?;
        let g1 = ours.backward()?;
        let g2 = reference.backward()?;
        for v in [&x, &w] {
            let a = g1.get(v).unwrap();
            let b = g2.get(v).unwrap();
            let diff = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(diff < 1e-9, "{diff}");
        }
        assert_eq!(x.dtype(), DType::F64);
        Ok(())
    }

    #[test]
    fn odd_size_gradient_matches_finite_differences() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        let x0 = Tensor::randn(0f64, 1., (1, 2, 5, 7), &dev)?;
        let w = Tensor::randn(0f64, 1., (2, 2, 3, 3), &dev)?;
        let probe = Tensor::randn(0f64, 1., (1, 2, 3, 4), &dev)?;
        let f = |x: &Tensor| -> candle_core::Result<f64> {
            (conv2d(x, &w, None, 2, 1)? * &probe)?.sum_all()?.to_scalar::<f64>()
        };
        let x = Var::from_tensor(&x0)?;
        let loss = (conv2d(x.as_tensor(), &w, None, 2, 1)? * &probe)?.sum_all()?;
        let grad = loss.backward()?.get(&x).unwrap().flatten_all()?.to_vec1::<f64>()?;
        let base = x0.flatten_all()?.to_vec1::<f64>()?;
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let fp = f(&Tensor::from_vec(plus, x0.shape(), &dev)?)?;
            let fm = f(&Tensor::from_vec(minus, x0.shape(), &dev)?)?;
            let numeric = (fp - fm) / (2.0 * eps);
            assert!((numeric - grad[i]).abs() < 1e-6, "{i}: {numeric} vs {}", grad[i]);
        }
        Ok(())
    }

    #[test]
    fn rejects_kernel_larger_than_input() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &dev).unwrap();
        let w = Tensor::zeros((1, 1, 5, 5), DType::F32, &dev).unwrap();
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }
}
