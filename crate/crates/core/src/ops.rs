//! Fused tensor kernels with hand-written backward passes.
//!
//! candle composes softmax and layer norm out of five or six primitive ops,
//! each allocating a full tensor; on a single CPU core that dominates the
//! cost of the small transformer blocks used here. These kernels run the
//! forward in one pass over contiguous rows and supply their own gradients.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};
use num_traits::Float;

const LN_EPS: f64 = 1e-6;
const GELU_ALPHA: f64 = 1.702;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("fused op expects a contiguous input"),
    }
}

fn last_dim(shape: &Shape) -> candle_core::Result<usize> {
    match shape.dims().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => bail!("fused op expects a non-empty last dimension"),
    }
}

macro_rules! dispatch1 {
    ($storage:expr, $layout:expr, $f:ident $(, $arg:expr)*) => {
        dispatch1!(@shape $layout.shape().clone(), $storage, $layout, $f $(, $arg)*)
    };
    (@shape $shape:expr, $storage:expr, $layout:expr, $f:ident $(, $arg:expr)*) => {
        match $storage {
            CpuStorage::F32(data) => {
                let out = $f(contiguous(data, $layout)?, $($arg),*);
                Ok((CpuStorage::F32(out), $shape))
            }
            CpuStorage::F64(data) => {
                let out = $f(contiguous(data, $layout)?, $($arg),*);
                Ok((CpuStorage::F64(out), $shape))
            }
            other => bail!("unsupported dtype {:?}", other.dtype()),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:ident $(, $arg:expr)*) => {
        dispatch2!(@shape $l1.shape().clone(), $s1, $l1, $s2, $l2, $f $(, $arg)*)
    };
    (@shape $shape:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:ident $(, $arg:expr)*) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let out = $f(contiguous(a, $l1)?, contiguous(b, $l2)?, $($arg),*);
                Ok((CpuStorage::F32(out), $shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let out = $f(contiguous(a, $l1)?, contiguous(b, $l2)?, $($arg),*);
                Ok((CpuStorage::F64(out), $shape))
            }
            _ => bail!("dtype mismatch in fused op"),
        }
    };
}

macro_rules! dispatch3 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, $f:ident $(, $arg:expr)*) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => {
                let out = $f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?, $($arg),*);
                Ok((CpuStorage::F32(out), $l1.shape().clone()))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => {
                let out = $f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?, $($arg),*);
                Ok((CpuStorage::F64(out), $l1.shape().clone()))
            }
            _ => bail!("dtype mismatch in fused op"),
        }
    };
}

fn softmax_rows<T: Float>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        let inv = T::one() / sum;
        for v in &mut out[start..] {
            *v = *v * inv;
        }
    }
    out
}

fn softmax_grad_rows<T: Float>(p: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks_exact(n).zip(g.chunks_exact(n)) {
        let dot = pr
            .iter()
            .zip(gr)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        out.extend(pr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

fn row_stats<T: Float>(row: &[T]) -> (T, T) {
    let n = T::from(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from(LN_EPS).unwrap()).sqrt())
}

fn normalize_rows<T: Float>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let (mean, rstd) = row_stats(row);
        out.extend(row.iter().map(|&v| (v - mean) * rstd));
    }
    out
}

fn normalize_grad_rows<T: Float>(x: &[T], g: &[T], n: usize) -> Vec<T> {
    let nf = T::from(n).unwrap();
    let mut out = Vec::with_capacity(x.len());
    for (xr, gr) in x.chunks_exact(n).zip(g.chunks_exact(n)) {
        let (mean, rstd) = row_stats(xr);
        let mut g_mean = T::zero();
        let mut gy_mean = T::zero();
        for (&xv, &gv) in xr.iter().zip(gr) {
            g_mean = g_mean + gv;
            gy_mean = gy_mean + gv * (xv - mean) * rstd;
        }
        g_mean = g_mean / nf;
        gy_mean = gy_mean / nf;
        out.extend(
            xr.iter()
                .zip(gr)
                .map(|(&xv, &gv)| rstd * (gv - g_mean - (xv - mean) * rstd * gy_mean)),
        );
    }
    out
}

fn add_rows<T: Float>(x: &[T], b: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(b.len()) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v = *v + bv;
        }
    }
    out
}

fn mul_rows<T: Float>(x: &[T], w: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(w.len()) {
        for (v, &wv) in row.iter_mut().zip(w) {
            *v = *v * wv;
        }
    }
    out
}

fn scale_shift_rows<T: Float>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(w.len()) {
        for ((v, &wv), &bv) in row.iter_mut().zip(w).zip(b) {
            *v = *v * wv + bv;
        }
    }
    out
}

fn col_sum<T: Float>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

fn col_sum_prod<T: Float>(g: &[T], x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (gr, xr) in g.chunks_exact(n).zip(x.chunks_exact(n)) {
        for ((o, &a), &b) in out.iter_mut().zip(gr).zip(xr) {
            *o = *o + a * b;
        }
    }
    out
}

fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn gelu_fwd<T: Float>(x: &[T]) -> Vec<T> {
    let a = T::from(GELU_ALPHA).unwrap();
    x.iter().map(|&v| v * sigmoid(a * v)).collect()
}

fn gelu_grad<T: Float>(x: &[T], g: &[T]) -> Vec<T> {
    let a = T::from(GELU_ALPHA).unwrap();
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let s = sigmoid(a * v);
            gv * (s + a * v * s * (T::one() - s))
        })
        .collect()
}

struct Softmax;
struct SoftmaxGrad;
struct Normalize;
struct NormalizeGrad;
struct Gelu;
struct GeluGrad;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l.shape())?;
        dispatch1!(s, l, softmax_rows, n)
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&g, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1.shape())?;
        dispatch2!(s1, l1, s2, l2, softmax_grad_rows, n)
    }
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "fused-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l.shape())?;
        dispatch1!(s, l, normalize_rows, n)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&g, &NormalizeGrad)?))
    }
}

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "fused-normalize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1.shape())?;
        dispatch2!(s1, l1, s2, l2, normalize_grad_rows, n)
    }
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch1!(s, l, gelu_fwd)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&g, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "fused-gelu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch2!(s1, l1, s2, l2, gelu_grad)
    }
}

struct AddBias;
struct ScaleShift;
struct MulRows;
struct ColSum;
struct ColSumProd;

fn check_row_vector(l: &Layout, v: &Layout) -> candle_core::Result<usize> {
    let n = last_dim(l.shape())?;
    if v.shape().dims() != [n] {
        bail!("row vector of shape {:?} does not match last dim {n}", v.shape());
    }
    Ok(n)
}

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "fused-add-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        check_row_vector(l1, l2)?;
        dispatch2!(s1, l1, s2, l2, add_rows)
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let _ = b;
        let g = grad.contiguous()?;
        let gb = g.apply_op1_no_bwd(&ColSum)?;
        Ok((Some(g), Some(gb)))
    }
}

impl CustomOp3 for ScaleShift {
    fn name(&self) -> &'static str {
        "fused-scale-shift"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        check_row_vector(l1, l2)?;
        check_row_vector(l1, l3)?;
        dispatch3!(s1, l1, s2, l2, s3, l3, scale_shift_rows)
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = grad.contiguous()?;
        let gx = g.apply_op2_no_bwd(&w.contiguous()?, &MulRows)?;
        let gw = g.apply_op2_no_bwd(&x.contiguous()?, &ColSumProd)?;
        let gb = g.apply_op1_no_bwd(&ColSum)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

impl CustomOp2 for MulRows {
    fn name(&self) -> &'static str {
        "fused-mul-rows"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        check_row_vector(l1, l2)?;
        dispatch2!(s1, l1, s2, l2, mul_rows)
    }
}

impl CustomOp1 for ColSum {
    fn name(&self) -> &'static str {
        "fused-col-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l.shape())?;
        dispatch1!(@shape Shape::from(n), s, l, col_sum, n)
    }
}

impl CustomOp2 for ColSumProd {
    fn name(&self) -> &'static str {
        "fused-col-sum-prod"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = last_dim(l1.shape())?;
        dispatch2!(@shape Shape::from(n), s1, l1, s2, l2, col_sum_prod, n)
    }
}

fn check_float(t: &Tensor) -> candle_core::Result<()> {
    match t.dtype() {
        DType::F32 | DType::F64 => Ok(()),
        dt => bail!("fused ops support f32/f64, got {dt:?}"),
    }
}

/// Softmax over the last dimension.
pub fn softmax(x: &Tensor) -> candle_core::Result<Tensor> {
    check_float(x)?;
    x.contiguous()?.apply_op1(Softmax)
}

/// Zero-mean, unit-variance normalization over the last dimension (no affine).
pub fn normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    check_float(x)?;
    x.contiguous()?.apply_op1(Normalize)
}

/// Layer norm with a learned scale and shift.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    normalize(x)?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, ScaleShift)
}

/// Adds a vector to every row (last dimension) of `x`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    check_float(x)?;
    x.contiguous()?.apply_op2(&b.contiguous()?, AddBias)
}

/// Sigmoid-approximated GELU, `x * sigmoid(1.702 x)`.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    check_float(x)?;
    x.contiguous()?.apply_op1(Gelu)
}

/// `x @ w + b` over the last dimension of an arbitrary-rank input.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> candle_core::Result<Tensor> {
    let dims = x.dims();
    let inner = *dims.last().expect("linear on a scalar");
    let rows = x.elem_count() / inner;
    let out = w.dim(1)?;
    let y = x.reshape((rows, inner))?.matmul(w)?;
    let y = match b {
        Some(b) => add_bias(&y, b)?,
        None => y,
    };
    let mut shape = dims.to_vec();
    *shape.last_mut().unwrap() = out;
    y.reshape(shape)
}
