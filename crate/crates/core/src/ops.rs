//! Fused tensor kernels with analytic backward passes.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor};

struct SoftmaxLastDim;

macro_rules! softmax_rows {
    ($name:ident, $t:ty) => {
        fn $name(src: &[$t], dim: usize) -> Vec<$t> {
            let mut out = vec![0.0; src.len()];
            for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                let max = row.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                let mut sum = 0.0;
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - max).exp();
                    sum += *d;
                }
                for d in dst.iter_mut() {
                    *d /= sum;
                }
            }
            out
        }
    };
}

softmax_rows!(softmax_rows_f32, f32);
softmax_rows!(softmax_rows_f64, f64);

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "cohedit-softmax-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
        let dim = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows_f32(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows_f64(&v[start..end], dim)),
            _ => candle_core::bail!("softmax: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2(&grad_res.contiguous()?, SoftmaxGrad)?))
    }
}

/// `dx = y * (g - sum(g * y))` row-wise, with `y` the softmax output.
struct SoftmaxGrad;

macro_rules! softmax_grad_rows {
    ($name:ident, $t:ty) => {
        fn $name(y: &[$t], g: &[$t], dim: usize) -> Vec<$t> {
            let mut out = vec![0.0; y.len()];
            for ((yr, gr), dst) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
                let dot: $t = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &a), &b) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = a * (b - dot);
                }
            }
            out
        }
    };
}

softmax_grad_rows!(softmax_grad_f32, f32);
softmax_grad_rows!(softmax_grad_f64, f64);

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "cohedit-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let contiguous = |l: &Layout| {
            l.contiguous_offsets()
                .ok_or_else(|| candle_core::Error::Msg("softmax grad inputs must be contiguous".into()))
        };
        let (a0, a1) = contiguous(l1)?;
        let (b0, b1) = contiguous(l2)?;
        let dim = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(softmax_grad_f32(&y[a0..a1], &g[b0..b1], dim)),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(softmax_grad_f64(&y[a0..a1], &g[b0..b1], dim)),
            _ => candle_core::bail!("softmax grad: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last dimension; differentiable, f32 and f64 only.
pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    match x.dtype() {
        DType::F32 | DType::F64 => x.contiguous()?.apply_op1(SoftmaxLastDim),
        _ => candle_nn::ops::softmax(x, candle_core::D::Minus1),
    }
}
