//! Differentiable operations.
//!
//! Every function here records a backward closure when any input tracks
//! gradients, and returns a plain constant tensor otherwise. Image tensors
//! use `[batch, channel, height, width]` order throughout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use super::{Scalar, Tensor, TensorError};

/// Whether batch normalization uses batch statistics (and updates running
/// stats) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn same_shape<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    context: &'static str,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            context,
            expected: a.shape(),
            got: b.shape(),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors (also the residual connection).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape(a, b, "add")?;
    let values = &*a.values() + &*b.values();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(values, &[a, b], move |g| {
        ac.accumulate_grad(g);
        bc.accumulate_grad(g);
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape(a, b, "sub")?;
    let values = &*a.values() - &*b.values();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(values, &[a, b], move |g| {
        ac.accumulate_grad(g);
        bc.accumulate_grad(&g.mapv(|x| -x));
    }))
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape(a, b, "mul")?;
    let values = &*a.values() * &*b.values();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(values, &[a, b], move |g| {
        ac.accumulate_grad(&(g * &*bc.values()));
        bc.accumulate_grad(&(g * &*ac.values()));
    }))
}

pub fn neg<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let values = x.values().mapv(|v| -v);
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        xc.accumulate_grad(&g.mapv(|v| -v));
    })
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let values = x.values().mapv(|v| v + c);
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        xc.accumulate_grad(g);
    })
}

pub fn mul_scalar<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let values = x.values().mapv(|v| v * c);
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        xc.accumulate_grad(&g.mapv(|v| v * c));
    })
}

/// Natural log of `x + offset`; `offset` guards zero-valued inputs.
pub fn log_offset<T: Scalar>(x: &Tensor<T>, offset: T) -> Tensor<T> {
    let values = x.values().mapv(|v| (v + offset).ln());
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        let dx = g / &xc.values().mapv(|v| v + offset);
        xc.accumulate_grad(&dx);
    })
}

pub fn sqrt<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let values = x.values().mapv(|v| v.sqrt());
    let xc = x.clone();
    let saved = values.clone();
    Tensor::from_op(values, &[x], move |g| {
        let two = T::from_f64(2.0);
        let dx = g / &saved.mapv(|y| two * y);
        xc.accumulate_grad(&dx);
    })
}

/// Clamp to `[lo, hi]` with the pass-through subgradient convention: the
/// gradient is exactly the upstream gradient inside the interval (bounds
/// inclusive) and exactly zero outside.
pub fn clamp<T: Scalar>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    let values = x.values().mapv(|v| v.max(lo).min(hi));
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        let xv = xc.values();
        let mut dx = g.clone();
        ndarray::Zip::from(&mut dx).and(&*xv).for_each(|d, &v| {
            if v < lo || v > hi {
                *d = T::zero();
            }
        });
        drop(xv);
        xc.accumulate_grad(&dx);
    })
}

/// Lower clamp only; same subgradient convention as [`clamp`].
pub fn clamp_min<T: Scalar>(x: &Tensor<T>, lo: T) -> Tensor<T> {
    let values = x.values().mapv(|v| v.max(lo));
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        let xv = xc.values();
        let mut dx = g.clone();
        ndarray::Zip::from(&mut dx).and(&*xv).for_each(|d, &v| {
            if v < lo {
                *d = T::zero();
            }
        });
        drop(xv);
        xc.accumulate_grad(&dx);
    })
}

/// Sum of all elements, as a 0-d tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.values().sum();
    let values = ArrayD::from_elem(IxDyn(&[]), s);
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        let gv = *g.iter().next().unwrap();
        let delta = ArrayD::from_elem(xc.values().raw_dim(), gv);
        xc.accumulate_grad(&delta);
    })
}

/// Arithmetic mean of all elements, as a 0-d tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::from_f64(x.numel() as f64);
    let s = x.values().sum() / n;
    let values = ArrayD::from_elem(IxDyn(&[]), s);
    let xc = x.clone();
    Tensor::from_op(values, &[x], move |g| {
        let gv = *g.iter().next().unwrap() / n;
        let delta = ArrayD::from_elem(xc.values().raw_dim(), gv);
        xc.accumulate_grad(&delta);
    })
}

/// Mean squared error between two same-shape tensors, as a 0-d tensor.
pub fn mse_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let d = sub(a, b)?;
    let sq = mul(&d, &d)?;
    Ok(mean_all(&sq))
}

/// Per-sample mean over all non-batch axes: `[n, ...] -> [n]`.
pub fn mean_per_sample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    let n = shape[0];
    let m: usize = shape[1..].iter().product::<usize>().max(1);
    let minv = T::from_f64(1.0 / m as f64);
    let xv = x.values();
    let flat = xv.view().into_shape_with_order((n, m)).unwrap();
    let mut out = Array1::<T>::zeros(n);
    for (i, row) in flat.axis_iter(Axis(0)).enumerate() {
        out[i] = row.sum() * minv;
    }
    drop(xv);
    let xc = x.clone();
    Tensor::from_op(out.into_dyn(), &[x], move |g| {
        let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
        let mut dx = ArrayD::<T>::zeros(xc.values().raw_dim());
        {
            let mut dxf = dx.view_mut().into_shape_with_order((n, m)).unwrap();
            for (i, mut row) in dxf.axis_iter_mut(Axis(0)).enumerate() {
                row.fill(g1[i] * minv);
            }
        }
        xc.accumulate_grad(&dx);
    })
}

/// Broadcast subtraction of a per-sample scalar: `x[n, ...] - s[n]`.
pub fn sub_batch<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    batch_broadcast_check(x, s, "sub_batch")?;
    let shape = x.shape();
    let (n, m) = (shape[0], shape[1..].iter().product::<usize>().max(1));
    let sv = s.values();
    let s1 = sv.view().into_dimensionality::<Ix1>().unwrap();
    let mut values = x.values().clone();
    {
        let mut flat = values.view_mut().into_shape_with_order((n, m)).unwrap();
        for (i, mut row) in flat.axis_iter_mut(Axis(0)).enumerate() {
            let si = s1[i];
            row.mapv_inplace(|v| v - si);
        }
    }
    drop(sv);
    let (xc, sc) = (x.clone(), s.clone());
    Ok(Tensor::from_op(values, &[x, s], move |g| {
        xc.accumulate_grad(g);
        let gf = g.view().into_shape_with_order((n, m)).unwrap();
        let mut ds = Array1::<T>::zeros(n);
        for (i, row) in gf.axis_iter(Axis(0)).enumerate() {
            ds[i] = -row.sum();
        }
        sc.accumulate_grad(&ds.into_dyn());
    }))
}

/// Broadcast division by a per-sample scalar: `x[n, ...] / s[n]`.
pub fn div_batch<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    batch_broadcast_check(x, s, "div_batch")?;
    let shape = x.shape();
    let (n, m) = (shape[0], shape[1..].iter().product::<usize>().max(1));
    let sv = s.values();
    let s1 = sv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let mut values = x.values().clone();
    {
        let mut flat = values.view_mut().into_shape_with_order((n, m)).unwrap();
        for (i, mut row) in flat.axis_iter_mut(Axis(0)).enumerate() {
            let si = s1[i];
            row.mapv_inplace(|v| v / si);
        }
    }
    drop(sv);
    let (xc, sc) = (x.clone(), s.clone());
    Ok(Tensor::from_op(values, &[x, s], move |g| {
        let gf = g.view().into_shape_with_order((n, m)).unwrap();
        // dx = g / s
        let mut dx = g.clone();
        {
            let mut dxf = dx.view_mut().into_shape_with_order((n, m)).unwrap();
            for (i, mut row) in dxf.axis_iter_mut(Axis(0)).enumerate() {
                let si = s1[i];
                row.mapv_inplace(|v| v / si);
            }
        }
        xc.accumulate_grad(&dx);
        // ds[i] = -sum(g * x)[i] / s[i]^2
        let xv = sc_values_flat(&xc, n, m);
        let mut ds = Array1::<T>::zeros(n);
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..m {
                acc += gf[(i, j)] * xv[(i, j)];
            }
            ds[i] = -acc / (s1[i] * s1[i]);
        }
        sc.accumulate_grad(&ds.into_dyn());
    }))
}

fn sc_values_flat<T: Scalar>(t: &Tensor<T>, n: usize, m: usize) -> Array2<T> {
    t.values()
        .view()
        .into_shape_with_order((n, m))
        .unwrap()
        .to_owned()
}

fn batch_broadcast_check<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    context: &'static str,
) -> Result<(), TensorError> {
    let xs = x.shape();
    let ss = s.shape();
    if ss.len() != 1 || xs.is_empty() || ss[0] != xs[0] {
        return Err(TensorError::ShapeMismatch {
            context,
            expected: vec![xs.first().copied().unwrap_or(0)],
            got: ss,
        });
    }
    Ok(())
}

/// View with a new shape (same element count); the gradient is reshaped back.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(TensorError::ShapeMismatch {
            context: "reshape",
            expected: x.shape(),
            got: shape.to_vec(),
        });
    }
    let old_shape = x.shape();
    let values = x
        .values()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .unwrap();
    let xc = x.clone();
    Ok(Tensor::from_op(values, &[x], move |g| {
        let back = g
            .clone()
            .into_shape_with_order(IxDyn(&old_shape))
            .unwrap();
        xc.accumulate_grad(&back);
    }))
}

/// Concatenate two `[n, c, h, w]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4
        || sb.len() != 4
        || sa[0] != sb[0]
        || sa[2] != sb[2]
        || sa[3] != sb[3]
    {
        return Err(TensorError::ShapeMismatch {
            context: "concat_channels",
            expected: sa,
            got: sb,
        });
    }
    let ca = sa[1];
    let values = ndarray::concatenate(Axis(1), &[a.values().view(), b.values().view()])
        .expect("checked shapes");
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(values, &[a, b], move |g| {
        let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
        let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
        ac.accumulate_grad(&ga);
        bc.accumulate_grad(&gb);
    }))
}

/// Channel slice `[from, to)` of a `[n, c, h, w]` tensor.
pub fn slice_channels<T: Scalar>(
    x: &Tensor<T>,
    from: usize,
    to: usize,
) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 4 || to > s[1] || from >= to {
        return Err(TensorError::ShapeMismatch {
            context: "slice_channels",
            expected: s,
            got: vec![from, to],
        });
    }
    let values = x
        .values()
        .slice_axis(Axis(1), ndarray::Slice::from(from..to))
        .to_owned();
    let xc = x.clone();
    Ok(Tensor::from_op(values, &[x], move |g| {
        let mut dx = ArrayD::<T>::zeros(xc.values().raw_dim());
        dx.slice_axis_mut(Axis(1), ndarray::Slice::from(from..to))
            .assign(g);
        xc.accumulate_grad(&dx);
    }))
}

/// Sum over the channel axis: `[n, c, h, w] -> [n, 1, h, w]`.
pub fn sum_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            context: "sum_channels",
            expected: vec![0, 0, 0, 0],
            got: s,
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let values = x
        .values()
        .sum_axis(Axis(1))
        .into_shape_with_order(IxDyn(&[n, 1, h, w]))
        .unwrap();
    let xc = x.clone();
    Ok(Tensor::from_op(values, &[x], move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            dx.index_axis_mut(Axis(1), ci)
                .assign(&g4.index_axis(Axis(1), 0));
        }
        xc.accumulate_grad(&dx.into_dyn());
    }))
}

/// Per-channel scaling of an image batch by per-sample coefficients:
/// `out[n,c,h,w] = x[n,c,h,w] * s[n,c]`.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    let ss = s.shape();
    if xs.len() != 4 || ss.len() != 2 || ss[0] != xs[0] || ss[1] != xs[1] {
        return Err(TensorError::ShapeMismatch {
            context: "scale_channels",
            expected: xs,
            got: ss,
        });
    }
    let (n, c) = (xs[0], xs[1]);
    let sv = s.values().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mut values = x.values().clone();
    {
        let mut v4 = values.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let k = sv[(ni, ci)];
                v4.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * k);
            }
        }
    }
    let (xc, sc) = (x.clone(), s.clone());
    Ok(Tensor::from_op(values, &[x, s], move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        if xc.requires_grad() {
            let mut dx = g.clone();
            let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let k = sv[(ni, ci)];
                    dx4.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|v| v * k);
                }
            }
            drop(dx4);
            xc.accumulate_grad(&dx);
        }
        if sc.requires_grad() {
            let xv = xc.values();
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let mut ds = Array2::<T>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let xp = x4.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    let mut acc = T::zero();
                    ndarray::Zip::from(&gp).and(&xp).for_each(|&gv, &xv| {
                        acc += gv * xv;
                    });
                    ds[(ni, ci)] = acc;
                }
            }
            drop(xv);
            sc.accumulate_grad(&ds.into_dyn());
        }
    }))
}

/// Broadcast per-sample coefficients to constant spatial maps:
/// `s[n, c] -> out[n, c, h, w]` with `out[n,c,:,:] = s[n,c]`.
pub fn broadcast_scalar_map<T: Scalar>(
    s: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>, TensorError> {
    let ss = s.shape();
    if ss.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            context: "broadcast_scalar_map",
            expected: vec![0, 0],
            got: ss,
        });
    }
    let (n, c) = (ss[0], ss[1]);
    let sv = s.values().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mut values = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            values
                .index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(sv[(ni, ci)]);
        }
    }
    let sc = s.clone();
    Ok(Tensor::from_op(values.into_dyn(), &[s], move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut ds = Array2::<T>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let gp = g4.index_axis(Axis(0), ni);
                ds[(ni, ci)] = gp.index_axis(Axis(0), ci).sum();
            }
        }
        sc.accumulate_grad(&ds.into_dyn());
    }))
}

/// Repeat a `[k]` vector into `[n, k]` rows (gradient sums over rows).
pub fn broadcast_rows<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 1 {
        return Err(TensorError::ShapeMismatch {
            context: "broadcast_rows",
            expected: vec![0],
            got: s,
        });
    }
    let k = s[0];
    let xv = x.values().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let mut values = Array2::<T>::zeros((n, k));
    for mut row in values.axis_iter_mut(Axis(0)) {
        row.assign(&xv);
    }
    let xc = x.clone();
    Ok(Tensor::from_op(values.into_dyn(), &[x], move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let ds = g2.sum_axis(Axis(0));
        xc.accumulate_grad(&ds.into_dyn());
    }))
}

/// Divide each row of `[n, k]` by its L1 norm. Rows whose norm falls below
/// `min_norm` signal a degenerate encoder output.
pub fn l1_normalize_rows<T: Scalar>(
    x: &Tensor<T>,
    min_norm: f64,
) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            context: "l1_normalize_rows",
            expected: vec![0, 0],
            got: s,
        });
    }
    let (n, k) = (s[0], s[1]);
    let xv = x.values().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mut norms = Array1::<T>::zeros(n);
    for i in 0..n {
        let mut acc = T::zero();
        for j in 0..k {
            acc += xv[(i, j)].abs();
        }
        if acc.to_f64() < min_norm {
            return Err(TensorError::DegenerateNorm {
                norm: acc.to_f64(),
                min: min_norm,
            });
        }
        norms[i] = acc;
    }
    let mut values = Array2::<T>::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            values[(i, j)] = xv[(i, j)] / norms[i];
        }
    }
    let y = values.clone();
    let xc = x.clone();
    Ok(Tensor::from_op(values.into_dyn(), &[x], move |g| {
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        // d/dx_j (x_i / s) = delta_ij / s - x_i * sign(x_j) / s^2
        let mut dx = Array2::<T>::zeros((n, k));
        for i in 0..n {
            let mut gdoty = T::zero();
            for j in 0..k {
                gdoty += g2[(i, j)] * y[(i, j)];
            }
            for j in 0..k {
                let sign = if xv[(i, j)] > T::zero() {
                    T::one()
                } else if xv[(i, j)] < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                dx[(i, j)] = (g2[(i, j)] - gdoty * sign) / norms[i];
            }
        }
        xc.accumulate_grad(&dx.into_dyn());
    }))
}

/// Parametric ReLU with one learnable slope per channel:
/// `out = x` if `x > 0`, else `slope[c] * x`. Input is `[n, c, h, w]`.
pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    let ss = slope.shape();
    if xs.len() != 4 || ss != vec![xs[1]] {
        return Err(TensorError::ShapeMismatch {
            context: "prelu",
            expected: vec![xs.get(1).copied().unwrap_or(0)],
            got: ss,
        });
    }
    let (n, c) = (xs[0], xs[1]);
    let sv = slope.values().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let mut values = x.values().clone();
    {
        let mut v4 = values.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let k = sv[ci];
                v4.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| if v > T::zero() { v } else { k * v });
            }
        }
    }
    let (xc, sc) = (x.clone(), slope.clone());
    Ok(Tensor::from_op(values, &[x, slope], move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let xv = xc.values();
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        if xc.requires_grad() {
            let mut dx = Array4::<T>::zeros(g4.raw_dim());
            for ni in 0..n {
                for ci in 0..c {
                    let k = sv[ci];
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let xp = x4.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    let mut dp = dx.index_axis_mut(Axis(0), ni);
                    let mut dp = dp.index_axis_mut(Axis(0), ci);
                    ndarray::Zip::from(&mut dp).and(&gp).and(&xp).for_each(
                        |d, &gv, &xvv| {
                            *d = if xvv > T::zero() { gv } else { k * gv };
                        },
                    );
                }
            }
            xc.accumulate_grad(&dx.into_dyn());
        }
        if sc.requires_grad() {
            let mut ds = Array1::<T>::zeros(c);
            for ni in 0..n {
                for ci in 0..c {
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let xp = x4.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    let mut acc = T::zero();
                    ndarray::Zip::from(&gp).and(&xp).for_each(|&gv, &xvv| {
                        if xvv <= T::zero() {
                            acc += gv * xvv;
                        }
                    });
                    ds[ci] += acc;
                }
            }
            sc.accumulate_grad(&ds.into_dyn());
        }
    }))
}

/// Global average pooling: `[n, c, h, w] -> [n, c, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            context: "global_avg_pool",
            expected: vec![0, 0, 0, 0],
            got: s,
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let minv = T::from_f64(1.0 / (h * w) as f64);
    let xv = x.values();
    let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
    let mut values = Array4::<T>::zeros((n, c, 1, 1));
    for ni in 0..n {
        for ci in 0..c {
            let xp = x4.index_axis(Axis(0), ni);
            values[(ni, ci, 0, 0)] = xp.index_axis(Axis(0), ci).sum() * minv;
        }
    }
    drop(xv);
    let xc = x.clone();
    Ok(Tensor::from_op(values.into_dyn(), &[x], move |g| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let gv = g4[(ni, ci, 0, 0)] * minv;
                dx.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(gv);
            }
        }
        xc.accumulate_grad(&dx.into_dyn());
    }))
}

fn conv_out_extent(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize), TensorError> {
    let he = (h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let we = (w + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    match (he, we) {
        (Some(he), Some(we)) if he >= 1 && we >= 1 => Ok((he, we)),
        _ => Err(TensorError::EmptyConvOutput {
            h,
            w,
            k,
            stride,
            padding,
        }),
    }
}

/// Dense patch matrix: `[cin*k*k, h2*w2]` for one `[cin, h, w]` sample.
fn im2col<T: Scalar>(
    x: &ndarray::ArrayView3<T>,
    k: usize,
    stride: usize,
    padding: usize,
    h2: usize,
    w2: usize,
) -> Array2<T> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((cin * k * k, h2 * w2));
    for c in 0..cin {
        let plane = x.index_axis(Axis(0), c);
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut out_row = col.row_mut(row);
                for oh in 0..h2 {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..w2 {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out_row[oh * w2 + ow] = plane[(ih as usize, iw as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a patch-gradient matrix back onto the input layout.
fn col2im_add<T: Scalar>(
    gcol: &Array2<T>,
    k: usize,
    stride: usize,
    padding: usize,
    h2: usize,
    w2: usize,
    gx: &mut ndarray::ArrayViewMut3<T>,
) {
    let (cin, h, w) = gx.dim();
    for c in 0..cin {
        let mut plane = gx.index_axis_mut(Axis(0), c);
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let grow = gcol.row(row);
                for oh in 0..h2 {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..w2 {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        plane[(ih as usize, iw as usize)] += grow[oh * w2 + ow];
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation with square kernels.
///
/// `input` is `[n, cin, h, w]`, `weight` is `[cout, cin, k, k]`, `bias` is
/// `[cout]`. Gradients flow to all three.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let xs = input.shape();
    let ws = weight.shape();
    let bs = bias.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d",
            expected: vec![0, 0, 0, 0],
            got: if xs.len() != 4 { xs } else { ws },
        });
    }
    if xs[1] != ws[1] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d input channels",
            expected: vec![ws[1]],
            got: vec![xs[1]],
        });
    }
    if bs != vec![ws[0]] {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d bias",
            expected: vec![ws[0]],
            got: bs,
        });
    }
    assert!(stride >= 1, "conv2d stride must be >= 1");
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let (h2, w2) = conv_out_extent(h, w, k, stride, padding)?;

    let wv = weight.values();
    let wmat = wv
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .unwrap()
        .to_owned();
    drop(wv);
    let bv = bias.values().view().into_dimensionality::<Ix1>().unwrap().to_owned();

    let xv = input.values();
    let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
    let mut values = Array4::<T>::zeros((n, cout, h2, w2));
    for ni in 0..n {
        let col = im2col(&x4.index_axis(Axis(0), ni), k, stride, padding, h2, w2);
        let mut out = Array2::<T>::zeros((cout, h2 * w2));
        general_mat_mul(T::one(), &wmat, &col, T::zero(), &mut out);
        let mut sample = values.index_axis_mut(Axis(0), ni);
        for co in 0..cout {
            let mut plane = sample.index_axis_mut(Axis(0), co);
            let src = out.row(co);
            let b = bv[co];
            for oh in 0..h2 {
                for ow in 0..w2 {
                    plane[(oh, ow)] = src[oh * w2 + ow] + b;
                }
            }
        }
    }
    drop(xv);

    let (ic, wc, bc) = (input.clone(), weight.clone(), bias.clone());
    Ok(Tensor::from_op(
        values.into_dyn(),
        &[input, weight, bias],
        move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            if bc.requires_grad() {
                let mut db = Array1::<T>::zeros(cout);
                for ni in 0..n {
                    let gs = g4.index_axis(Axis(0), ni);
                    for co in 0..cout {
                        db[co] += gs.index_axis(Axis(0), co).sum();
                    }
                }
                bc.accumulate_grad(&db.into_dyn());
            }
            let need_dw = wc.requires_grad();
            let need_dx = ic.requires_grad();
            if !need_dw && !need_dx {
                return;
            }
            let wv = wc.values();
            let wmat = wv
                .view()
                .into_shape_with_order((cout, cin * k * k))
                .unwrap()
                .to_owned();
            drop(wv);
            let xv = ic.values();
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let mut dw = Array2::<T>::zeros((cout, cin * k * k));
            let mut dx = Array4::<T>::zeros((n, cin, h, w));
            for ni in 0..n {
                let gs = g4.index_axis(Axis(0), ni);
                let gmat = gs
                    .to_owned()
                    .into_shape_with_order((cout, h2 * w2))
                    .unwrap();
                if need_dw {
                    // im2col is recomputed here instead of cached from the
                    // forward pass; it is cheap relative to the matmuls.
                    let col = im2col(&x4.index_axis(Axis(0), ni), k, stride, padding, h2, w2);
                    general_mat_mul(T::one(), &gmat, &col.t().to_owned(), T::one(), &mut dw);
                }
                if need_dx {
                    let mut gcol = Array2::<T>::zeros((cin * k * k, h2 * w2));
                    general_mat_mul(T::one(), &wmat.t().to_owned(), &gmat, T::zero(), &mut gcol);
                    col2im_add(
                        &gcol,
                        k,
                        stride,
                        padding,
                        h2,
                        w2,
                        &mut dx.index_axis_mut(Axis(0), ni),
                    );
                }
            }
            drop(xv);
            if need_dw {
                wc.accumulate_grad(
                    &dw.into_shape_with_order(IxDyn(&[cout, cin, k, k])).unwrap(),
                );
            }
            if need_dx {
                ic.accumulate_grad(&dx.into_dyn());
            }
        },
    ))
}

/// Affine map on `[n, c, 1, 1]` feature vectors, implemented as a 1x1
/// convolution. `weight` is `[out, c, 1, 1]`.
pub fn fully_connected<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    conv2d(x, weight, bias, 1, 0)
}

/// Batch normalization over `[n, c, h, w]` with per-channel gain and shift.
///
/// Train mode normalizes by batch statistics and folds them into the running
/// statistics by exponential moving average; eval mode uses the running
/// statistics as constants. Gradients flow through the train-mode
/// normalization exactly.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            context: "batch_norm",
            expected: vec![0, 0, 0, 0],
            got: xs,
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    for (t, name) in [
        (gain, "batch_norm gain"),
        (shift, "batch_norm shift"),
        (running_mean, "batch_norm running_mean"),
        (running_var, "batch_norm running_var"),
    ] {
        if t.shape() != vec![c] {
            return Err(TensorError::ShapeMismatch {
                context: name,
                expected: vec![c],
                got: t.shape(),
            });
        }
    }
    let m = n * h * w;
    let eps_t = T::from_f64(eps);

    let (mean, var) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(TensorError::UndefinedVariance(m));
            }
            let xv = x.values();
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let minv = T::from_f64(1.0 / m as f64);
            let mut mean = Array1::<T>::zeros(c);
            let mut var = Array1::<T>::zeros(c);
            for ci in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    let xp = x4.index_axis(Axis(0), ni);
                    acc += xp.index_axis(Axis(0), ci).sum();
                }
                mean[ci] = acc * minv;
            }
            for ci in 0..c {
                let mu = mean[ci];
                let mut acc = T::zero();
                for ni in 0..n {
                    let xp = x4.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    xp.for_each(|&v| {
                        let d = v - mu;
                        acc += d * d;
                    });
                }
                var[ci] = acc * minv;
            }
            drop(xv);
            // Exponential moving average of the batch statistics.
            let mom = T::from_f64(momentum);
            let keep = T::one() - mom;
            {
                let mut rm = running_mean.values_mut();
                let mut rv = running_var.values_mut();
                for ci in 0..c {
                    rm[ci] = keep * rm[ci] + mom * mean[ci];
                    rv[ci] = keep * rv[ci] + mom * var[ci];
                }
            }
            (mean, var)
        }
        Mode::Eval => {
            let rm = running_mean.values().view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let rv = running_var.values().view().into_dimensionality::<Ix1>().unwrap().to_owned();
            (rm, rv)
        }
    };

    let gv = gain.values().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let sv = shift.values().view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let inv_std: Array1<T> = var.mapv(|v| T::one() / (v + eps_t).sqrt());

    let xv = x.values();
    let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
    let mut values = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            let ga = gv[ci];
            let sh = sv[ci];
            let xp = x4.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let mut vp = values.index_axis_mut(Axis(0), ni);
            let mut vp = vp.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut vp).and(&xp).for_each(|o, &v| {
                *o = (v - mu) * is * ga + sh;
            });
        }
    }
    drop(xv);

    let (xc, gc, sc) = (x.clone(), gain.clone(), shift.clone());
    Ok(Tensor::from_op(
        values.into_dyn(),
        &[x, gain, shift],
        move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let xv = xc.values();
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let minv = T::from_f64(1.0 / m as f64);

            // Per-channel reductions over the batch.
            let mut sum_g = Array1::<T>::zeros(c);
            let mut sum_g_xhat = Array1::<T>::zeros(c);
            for ci in 0..c {
                let mu = mean[ci];
                let is = inv_std[ci];
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for ni in 0..n {
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let xp = x4.index_axis(Axis(0), ni);
                    let xp = xp.index_axis(Axis(0), ci);
                    ndarray::Zip::from(&gp).and(&xp).for_each(|&gvv, &xvv| {
                        sg += gvv;
                        sgx += gvv * (xvv - mu) * is;
                    });
                }
                sum_g[ci] = sg;
                sum_g_xhat[ci] = sgx;
            }
            if sc.requires_grad() {
                sc.accumulate_grad(&sum_g.clone().into_dyn());
            }
            if gc.requires_grad() {
                gc.accumulate_grad(&sum_g_xhat.clone().into_dyn());
            }
            if xc.requires_grad() {
                let mut dx = Array4::<T>::zeros((n, c, h, w));
                match mode {
                    Mode::Train => {
                        // dx = gain*inv_std/m * (m*g - sum_g - xhat*sum_g_xhat)
                        for ci in 0..c {
                            let mu = mean[ci];
                            let is = inv_std[ci];
                            let ga = gv[ci];
                            let sg = sum_g[ci];
                            let sgx = sum_g_xhat[ci];
                            let mt = T::from_f64(m as f64);
                            for ni in 0..n {
                                let gp = g4.index_axis(Axis(0), ni);
                                let gp = gp.index_axis(Axis(0), ci);
                                let xp = x4.index_axis(Axis(0), ni);
                                let xp = xp.index_axis(Axis(0), ci);
                                let mut dp = dx.index_axis_mut(Axis(0), ni);
                                let mut dp = dp.index_axis_mut(Axis(0), ci);
                                ndarray::Zip::from(&mut dp).and(&gp).and(&xp).for_each(
                                    |d, &gvv, &xvv| {
                                        let xhat = (xvv - mu) * is;
                                        *d = ga * is * minv * (mt * gvv - sg - xhat * sgx);
                                    },
                                );
                            }
                        }
                    }
                    Mode::Eval => {
                        // Running stats are constants: dx = g * gain * inv_std.
                        for ci in 0..c {
                            let is = inv_std[ci];
                            let ga = gv[ci];
                            for ni in 0..n {
                                let gp = g4.index_axis(Axis(0), ni);
                                let gp = gp.index_axis(Axis(0), ci);
                                let mut dp = dx.index_axis_mut(Axis(0), ni);
                                let mut dp = dp.index_axis_mut(Axis(0), ci);
                                ndarray::Zip::from(&mut dp).and(&gp).for_each(|d, &gvv| {
                                    *d = gvv * ga * is;
                                });
                            }
                        }
                    }
                }
                xc.accumulate_grad(&dx.into_dyn());
            }
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn t4(shape: (usize, usize, usize, usize), fill: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(fill).collect();
        Tensor::param(
            Array4::from_shape_vec(shape, data)
                .unwrap()
                .into_dyn(),
        )
    }

    #[test]
    fn identity_one_by_one_conv_preserves_input() {
        let x = t4((1, 3, 4, 4), |i| (i as f64) * 0.1 - 1.0);
        let mut w = Array4::<f64>::zeros((3, 3, 1, 1));
        for c in 0..3 {
            w[(c, c, 0, 0)] = 1.0;
        }
        let weight = Tensor::param(w.into_dyn());
        let bias = Tensor::param(arr1(&[0.0, 0.0, 0.0]).into_dyn());
        let y = conv2d(&x, &weight, &bias, 1, 0).unwrap();
        assert_eq!(&*y.values(), &*x.values());
    }

    #[test]
    fn constant_convolution_matches_kernel_sum() {
        let v = 0.5;
        let cin = 2;
        let x = t4((1, cin, 5, 5), |_| v);
        let weight = Tensor::param(ArrayD::from_elem(IxDyn(&[1, cin, 3, 3]), 1.0));
        let bias = Tensor::param(arr1(&[0.0]).into_dyn());
        let y = conv2d(&x, &weight, &bias, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        for &o in y.values().iter() {
            assert!((o - 9.0 * v * cin as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_conv_output_extent() {
        let x = t4((1, 1, 8, 8), |i| i as f64);
        let weight = Tensor::param(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 0.1));
        let bias = Tensor::param(arr1(&[0.0]).into_dyn());
        let y = conv2d(&x, &weight, &bias, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t4((1, 2, 4, 4), |_| 0.0);
        let weight = Tensor::param(ArrayD::from_elem(IxDyn(&[1, 3, 3, 3]), 0.0));
        let bias = Tensor::param(arr1(&[0.0]).into_dyn());
        assert!(matches!(
            conv2d(&x, &weight, &bias, 1, 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = t4((1, 1, 2, 2), |_| 0.0);
        let weight = Tensor::param(ArrayD::from_elem(IxDyn(&[1, 1, 5, 5]), 0.0));
        let bias = Tensor::param(arr1(&[0.0]).into_dyn());
        assert!(matches!(
            conv2d(&x, &weight, &bias, 1, 0),
            Err(TensorError::EmptyConvOutput { .. })
        ));
    }

    #[test]
    fn prelu_positive_and_negative_branches() {
        let x = Tensor::param(
            Array4::from_shape_vec((1, 1, 1, 2), vec![2.0, -3.0])
                .unwrap()
                .into_dyn(),
        );
        let slope = Tensor::param(arr1(&[0.25]).into_dyn());
        let y = prelu(&x, &slope).unwrap();
        let v: Vec<f64> = y.values().iter().copied().collect();
        assert_eq!(v, vec![2.0, -0.75]);
    }

    #[test]
    fn prelu_slope_gradient_is_negative_input() {
        let x = Tensor::param(
            Array4::from_shape_vec((1, 1, 1, 1), vec![-3.0])
                .unwrap()
                .into_dyn(),
        );
        let slope = Tensor::param(arr1(&[0.25]).into_dyn());
        let y = prelu(&x, &slope).unwrap();
        let loss = sum_all(&y);
        loss.backward().unwrap();
        assert!((slope.grad()[0] - (-3.0)).abs() < 1e-12);
    }

    #[test]
    fn mse_of_identical_tensors_is_zero_with_zero_grad() {
        let x = Tensor::param(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let y = x.detach();
        let loss = mse_loss(&x, &y).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(x.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l1_normalize_matches_definition() {
        let x = Tensor::param(arr2(&[[2.0, -1.0, 1.0]]).into_dyn());
        let y = l1_normalize_rows(&x, 1e-8).unwrap();
        let v: Vec<f64> = y.values().iter().copied().collect();
        assert_eq!(v, vec![0.5, -0.25, 0.25]);
        let norm: f64 = v.iter().map(|a| a.abs()).sum();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l1_normalize_rejects_near_zero_rows() {
        let x = Tensor::param(arr2(&[[1e-12, -1e-12, 0.0]]).into_dyn());
        assert!(matches!(
            l1_normalize_rows(&x, 1e-8),
            Err(TensorError::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn concat_channel_arithmetic() {
        let a = t4((2, 8, 3, 3), |_| 1.0);
        let b = t4((2, 8, 3, 3), |_| 2.0);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), vec![2, 16, 3, 3]);
    }

    #[test]
    fn clamp_gradient_is_pass_through_inside_zero_outside() {
        let x = Tensor::param(arr1(&[-2.0, -1.0, 0.0, 1.0, 2.0]).into_dyn());
        let y = clamp(&x, -1.0, 1.0);
        let loss = sum_all(&y);
        loss.backward().unwrap();
        let g: Vec<f64> = x.grad().iter().copied().collect();
        assert_eq!(g, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let x = t4((2, 3, 4, 4), |i| (i as f64) * 0.37 - 3.0);
        let gain = Tensor::param(arr1(&[1.0, 1.0, 1.0]).into_dyn());
        let shift = Tensor::param(arr1(&[0.0, 0.0, 0.0]).into_dyn());
        let rm = Tensor::from_array(arr1(&[0.0, 0.0, 0.0]).into_dyn());
        let rv = Tensor::from_array(arr1(&[1.0, 1.0, 1.0]).into_dyn());
        let y = batch_norm(&x, &gain, &shift, &rm, &rv, Mode::Train, 0.1, 1e-5).unwrap();
        let yv = y.values();
        let y4 = yv.view().into_dimensionality::<Ix4>().unwrap();
        for ci in 0..3 {
            let mut vals = Vec::new();
            for ni in 0..2 {
                let p = y4.index_axis(Axis(0), ni);
                vals.extend(p.index_axis(Axis(0), ci).iter().copied());
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "channel mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "channel var {var}");
        }
    }

    #[test]
    fn batch_norm_is_near_identity_on_standardized_input() {
        // Zero-mean unit-variance input, gain 1, shift 0, tiny eps.
        let raw: Vec<f64> = (0..32).map(|i| (i as f64) - 15.5).collect();
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / raw.len() as f64).sqrt();
        let data: Vec<f64> = raw.iter().map(|v| (v - m) / sd).collect();
        let x = Tensor::param(
            Array4::from_shape_vec((2, 1, 4, 4), data)
                .unwrap()
                .into_dyn(),
        );
        let gain = Tensor::param(arr1(&[1.0]).into_dyn());
        let shift = Tensor::param(arr1(&[0.0]).into_dyn());
        let rm = Tensor::from_array(arr1(&[0.0]).into_dyn());
        let rv = Tensor::from_array(arr1(&[1.0]).into_dyn());
        let y = batch_norm(&x, &gain, &shift, &rm, &rv, Mode::Train, 0.1, 1e-12).unwrap();
        for (o, i) in y.values().iter().zip(x.values().iter()) {
            assert!((o - i).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_rejects_single_element_channels() {
        let x = t4((1, 2, 1, 1), |_| 1.0);
        let gain = Tensor::param(arr1(&[1.0, 1.0]).into_dyn());
        let shift = Tensor::param(arr1(&[0.0, 0.0]).into_dyn());
        let rm = Tensor::from_array(arr1(&[0.0, 0.0]).into_dyn());
        let rv = Tensor::from_array(arr1(&[1.0, 1.0]).into_dyn());
        assert!(matches!(
            batch_norm(&x, &gain, &shift, &rm, &rv, Mode::Train, 0.1, 1e-5),
            Err(TensorError::UndefinedVariance(1))
        ));
    }
}
