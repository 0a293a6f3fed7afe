//! Forward and vector-Jacobian kernels for every recorded operator.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Square,
    Sqrt,
    Log,
    Exp,
    Relu,
    /// `[m, k] x [k, n]`
    MatMul,
    /// input `[T, F, Cin]`, kernel `[kt, kf, Cin, Cout]`, stride 1, zero "same" padding
    Conv2d,
    /// input `[T, F, C]`, non-overlapping windows, trailing remainder dropped
    MaxPool2d {
        time: usize,
        freq: usize,
    },
    /// input `[..., C]` scaled by `[C]` and shifted by `[C]`
    ChannelAffine,
    Sum {
        axes: Vec<usize>,
    },
    Mean {
        axes: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    /// `out.flat[i] = in.flat[indices[i]]`
    Gather {
        indices: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// `[T, N] -> [N, N]`, `(1/T) XᵀX`
    Gram,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Relu => "relu",
            Op::MatMul => "matmul",
            Op::Conv2d => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::ChannelAffine => "channel_affine",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::Gram => "gram",
        }
    }

    /// Evaluates the operator. The second element carries auxiliary indices
    /// (max-pool argmax positions) needed by the backward pass.
    pub(crate) fn forward(&self, x: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
        let out = match self {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::Add => binary(self, x, |a, b| a + b)?,
            Op::Sub => binary(self, x, |a, b| a - b)?,
            Op::Mul => binary(self, x, |a, b| a * b)?,
            Op::Div => binary(self, x, |a, b| a / b)?,
            Op::AddScalar(s) => x[0].map(|v| v + s),
            Op::MulScalar(s) => x[0].map(|v| v * s),
            Op::Square => x[0].map(|v| v * v),
            Op::Sqrt => x[0].map(f64::sqrt),
            Op::Log => x[0].map(f64::ln),
            Op::Exp => x[0].map(f64::exp),
            Op::Relu => x[0].map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::MatMul => matmul_forward(x[0], x[1])?,
            Op::Conv2d => conv2d_forward(x[0], x[1])?,
            Op::MaxPool2d { time, freq } => return maxpool_forward(x[0], *time, *freq),
            Op::ChannelAffine => channel_affine_forward(x[0], x[1], x[2])?,
            Op::Sum { axes } => reduce(x[0], axes, false)?,
            Op::Mean { axes } => reduce(x[0], axes, true)?,
            Op::Concat { axis } => concat_forward(x, *axis)?,
            Op::Gather { indices, shape } => gather_forward(x[0], indices, shape)?,
            Op::Reshape { shape } => {
                let n: usize = shape.iter().product();
                if n != x[0].len() {
                    return Err(shape_err("reshape", format!("{:?} -> {:?}", x[0].shape(), shape)));
                }
                Tensor::new(shape.clone(), x[0].data().to_vec())?
            }
            Op::Gram => gram_forward(x[0])?,
        };
        Ok((out, Vec::new()))
    }

    /// Returns one gradient per input; `None` where `needs[i]` is false.
    pub(crate) fn backward(
        &self,
        x: &[&Tensor],
        out: &Tensor,
        aux: &[usize],
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = grad.data();
        let shape = |t: &Tensor| t.shape().to_vec();
        let elementwise =
            |f: &dyn Fn(usize) -> f64, t: &Tensor| Tensor::from_parts(shape(t), (0..t.len()).map(f).collect());
        match self {
            Op::Leaf => vec![],
            Op::Add => vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())],
            Op::Sub => vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (x[0].data(), x[1].data());
                vec![
                    needs[0].then(|| elementwise(&|i| g[i] * b[i], x[0])),
                    needs[1].then(|| elementwise(&|i| g[i] * a[i], x[1])),
                ]
            }
            Op::Div => {
                let (a, b) = (x[0].data(), x[1].data());
                vec![
                    needs[0].then(|| elementwise(&|i| g[i] / b[i], x[0])),
                    needs[1].then(|| elementwise(&|i| -g[i] * a[i] / (b[i] * b[i]), x[1])),
                ]
            }
            Op::AddScalar(_) => vec![Some(grad.clone())],
            Op::MulScalar(s) => vec![Some(grad.map(|v| v * s))],
            Op::Square => {
                let a = x[0].data();
                vec![Some(elementwise(&|i| 2.0 * a[i] * g[i], x[0]))]
            }
            Op::Sqrt => {
                let y = out.data();
                vec![Some(elementwise(&|i| g[i] * 0.5 / y[i], x[0]))]
            }
            Op::Log => {
                let a = x[0].data();
                vec![Some(elementwise(&|i| g[i] / a[i], x[0]))]
            }
            Op::Exp => {
                let y = out.data();
                vec![Some(elementwise(&|i| g[i] * y[i], x[0]))]
            }
            Op::Relu => {
                let a = x[0].data();
                vec![Some(elementwise(&|i| if a[i] > 0.0 { g[i] } else { 0.0 }, x[0]))]
            }
            Op::MatMul => {
                let (da, db) = matmul_backward(x[0], x[1], grad, needs);
                vec![da, db]
            }
            Op::Conv2d => {
                let (dx, dk) = conv2d_backward(x[0], x[1], grad, needs);
                vec![dx, dk]
            }
            Op::MaxPool2d { .. } => {
                let mut dx = vec![0.0; x[0].len()];
                for (o, &src) in aux.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![Some(Tensor::from_parts(shape(x[0]), dx))]
            }
            Op::ChannelAffine => channel_affine_backward(x[0], x[1], grad, needs),
            Op::Sum { axes } => vec![Some(expand(x[0], axes, grad, 1.0))],
            Op::Mean { axes } => {
                let count = (x[0].len() / grad.len()) as f64;
                vec![Some(expand(x[0], axes, grad, 1.0 / count))]
            }
            Op::Concat { axis } => concat_backward(x, *axis, grad, needs),
            Op::Gather { indices, .. } => {
                let mut dx = vec![0.0; x[0].len()];
                for (o, &src) in indices.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![Some(Tensor::from_parts(shape(x[0]), dx))]
            }
            Op::Reshape { .. } => vec![Some(Tensor::from_parts(shape(x[0]), g.to_vec()))],
            Op::Gram => vec![Some(gram_backward(x[0], grad))],
        }
    }
}

fn binary(op: &Op, x: &[&Tensor], f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (a, b) = (x[0], x[1]);
    if a.shape() != b.shape() {
        return Err(shape_err(op.name(), format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Ok(Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor, needs: &[bool]) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let g = grad.data();
    let da = needs[0].then(|| {
        // dA = G Bᵀ
        let bd = b.data();
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &bd[p * n..(p + 1) * n];
                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Tensor::from_parts(vec![m, k], da)
    });
    let db = needs[1].then(|| {
        // dB = Aᵀ G
        let ad = a.data();
        let mut db = vec![0.0; k * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
        Tensor::from_parts(vec![k, n], db)
    });
    (da, db)
}

fn conv_dims(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let bad = || shape_err("conv2d", format!("input {:?} kernel {:?}", x.shape(), k.shape()));
    if x.rank() != 3 || k.rank() != 4 || x.shape()[2] != k.shape()[2] {
        return Err(bad());
    }
    let (kt, kf) = (k.shape()[0], k.shape()[1]);
    if kt % 2 == 0 || kf % 2 == 0 {
        return Err(shape_err("conv2d", format!("even kernel {:?}", k.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], kt, kf, k.shape()[3]))
}

fn conv2d_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (t_len, f_len, cin, kt, kf, cout) = conv_dims(x, k)?;
    let (pt, pf) = ((kt / 2) as isize, (kf / 2) as isize);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; t_len * f_len * cout];
    for t in 0..t_len {
        for dt in 0..kt {
            let ts = t as isize + dt as isize - pt;
            if ts < 0 || ts >= t_len as isize {
                continue;
            }
            let ts = ts as usize;
            for f in 0..f_len {
                let orow = (t * f_len + f) * cout;
                for df in 0..kf {
                    let fs = f as isize + df as isize - pf;
                    if fs < 0 || fs >= f_len as isize {
                        continue;
                    }
                    let xrow = &xd[(ts * f_len + fs as usize) * cin..][..cin];
                    let kbase = (dt * kf + df) * cin * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * cout..][..cout];
                        for (o, &kv) in out[orow..orow + cout].iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t_len, f_len, cout], out))
}

fn conv2d_backward(x: &Tensor, k: &Tensor, grad: &Tensor, needs: &[bool]) -> (Option<Tensor>, Option<Tensor>) {
    let (t_len, f_len, cin, kt, kf, cout) = conv_dims(x, k).expect("validated at record time");
    let (pt, pf) = ((kt / 2) as isize, (kf / 2) as isize);
    let (xd, kd, g) = (x.data(), k.data(), grad.data());
    let mut dx = needs[0].then(|| vec![0.0; xd.len()]);
    let mut dk = needs[1].then(|| vec![0.0; kd.len()]);
    for t in 0..t_len {
        for dt in 0..kt {
            let ts = t as isize + dt as isize - pt;
            if ts < 0 || ts >= t_len as isize {
                continue;
            }
            let ts = ts as usize;
            for f in 0..f_len {
                let grow = &g[(t * f_len + f) * cout..][..cout];
                for df in 0..kf {
                    let fs = f as isize + df as isize - pf;
                    if fs < 0 || fs >= f_len as isize {
                        continue;
                    }
                    let xoff = (ts * f_len + fs as usize) * cin;
                    let kbase = (dt * kf + df) * cin * cout;
                    for ci in 0..cin {
                        let krow = kbase + ci * cout;
                        if let Some(dx) = dx.as_mut() {
                            let s: f64 = grow.iter().zip(&kd[krow..krow + cout]).map(|(a, b)| a * b).sum();
                            dx[xoff + ci] += s;
                        }
                        if let Some(dk) = dk.as_mut() {
                            let xv = xd[xoff + ci];
                            if xv != 0.0 {
                                for (d, &gv) in dk[krow..krow + cout].iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
    )
}

fn maxpool_forward(x: &Tensor, pt: usize, pf: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 || pt == 0 || pf == 0 {
        return Err(shape_err(
            "maxpool2d",
            format!("input {:?} window {pt}x{pf}", x.shape()),
        ));
    }
    let (t_len, f_len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (to, fo) = (t_len / pt, f_len / pf);
    if to == 0 || fo == 0 {
        return Err(shape_err(
            "maxpool2d",
            format!("input {:?} smaller than window {pt}x{pf}", x.shape()),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(to * fo * c);
    let mut arg = Vec::with_capacity(to * fo * c);
    for ot in 0..to {
        for of in 0..fo {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for wt in 0..pt {
                    for wf in 0..pf {
                        let i = ((ot * pt + wt) * f_len + of * pf + wf) * c + ch;
                        // strict comparison keeps the lowest flat index on ties
                        if xd[i] > best || best_i == usize::MAX {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![to, fo, c], out), arg))
}

fn channel_affine_forward(x: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().expect("non-empty shape");
    if a.shape() != [c] || b.shape() != [c] {
        return Err(shape_err(
            "channel_affine",
            format!("input {:?} scale {:?} shift {:?}", x.shape(), a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * ad[i % c] + bd[i % c])
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn channel_affine_backward(x: &Tensor, a: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let c = a.len();
    let (xd, ad, g) = (x.data(), a.data(), grad.data());
    let dx = needs[0].then(|| {
        Tensor::from_parts(
            x.shape().to_vec(),
            g.iter().enumerate().map(|(i, &gv)| gv * ad[i % c]).collect(),
        )
    });
    let da = needs[1].then(|| {
        let mut d = vec![0.0; c];
        for (i, (&gv, &xv)) in g.iter().zip(xd).enumerate() {
            d[i % c] += gv * xv;
        }
        Tensor::vector(d)
    });
    let db = needs[2].then(|| {
        let mut d = vec![0.0; c];
        for (i, &gv) in g.iter().enumerate() {
            d[i % c] += gv;
        }
        Tensor::vector(d)
    });
    vec![dx, da, db]
}

fn check_axes(op: &'static str, x: &Tensor, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; x.rank()];
    for &a in axes {
        if a >= x.rank() || seen[a] {
            return Err(shape_err(op, format!("axes {axes:?} for shape {:?}", x.shape())));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Maps every flat input index to the flat index of its reduced output cell.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<bool> = (0..shape.len()).map(|d| !axes.contains(&d)).collect();
    let mut out_shape: Vec<usize> = shape.iter().zip(&keep).filter(|(_, &k)| k).map(|(&e, _)| e).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for d in 0..shape.len() {
            if keep[d] {
                o = o * shape[d] + idx[d];
            }
        }
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn reduce(x: &Tensor, axes: &[usize], mean: bool) -> Result<Tensor> {
    check_axes(if mean { "mean" } else { "sum" }, x, axes)?;
    let (out_shape, map) = reduce_map(x.shape(), axes);
    let mut out = vec![0.0; out_shape.iter().product()];
    for (&v, &o) in x.data().iter().zip(&map) {
        out[o] += v;
    }
    if mean {
        let count = (x.len() / out.len()) as f64;
        out.iter_mut().for_each(|v| *v /= count);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

fn expand(x: &Tensor, axes: &[usize], grad: &Tensor, scale: f64) -> Tensor {
    let (_, map) = reduce_map(x.shape(), axes);
    let g = grad.data();
    Tensor::from_parts(x.shape().to_vec(), map.iter().map(|&o| g[o] * scale).collect())
}

fn concat_forward(x: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = x[0];
    if axis >= first.rank() {
        return Err(shape_err("concat", format!("axis {axis} for {:?}", first.shape())));
    }
    for t in x {
        let ok = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(shape_err(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = x.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in x {
            let block = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

fn concat_backward(x: &[&Tensor], axis: usize, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let outer: usize = x[0].shape()[..axis].iter().product();
    let inner: usize = x[0].shape()[axis + 1..].iter().product();
    let total: usize = x.iter().map(|t| t.shape()[axis]).sum();
    let g = grad.data();
    let mut start = 0;
    x.iter()
        .zip(needs)
        .map(|(t, &need)| {
            let block = t.shape()[axis] * inner;
            let s = start;
            start += block;
            need.then(|| {
                let mut d = Vec::with_capacity(t.len());
                for o in 0..outer {
                    let base = o * total * inner + s;
                    d.extend_from_slice(&g[base..base + block]);
                }
                Tensor::from_parts(t.shape().to_vec(), d)
            })
        })
        .collect()
}

fn gather_forward(x: &Tensor, indices: &[usize], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != indices.len() || shape.contains(&0) {
        return Err(shape_err(
            "gather",
            format!("{} indices for output shape {shape:?}", indices.len()),
        ));
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(n);
    for &i in indices {
        if i >= xd.len() {
            return Err(shape_err(
                "gather",
                format!("index {i} out of range for {:?}", x.shape()),
            ));
        }
        data.push(xd[i]);
    }
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

fn gram_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(shape_err("gram", format!("expected [T, N], got {:?}", x.shape())));
    }
    let (t_len, n) = (x.shape()[0], x.shape()[1]);
    Ok(Tensor::from_parts(vec![n, n], gram_raw(x.data(), t_len, n)))
}

/// Exactly symmetric `(1/T) XᵀX`; only the upper triangle is accumulated.
pub(crate) fn gram_raw(x: &[f64], t_len: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for t in 0..t_len {
        let row = &x[t * n..(t + 1) * n];
        for (i, &a) in row.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let gi = &mut g[i * n..(i + 1) * n];
            for j in i..n {
                gi[j] += a * row[j];
            }
        }
    }
    let inv = 1.0 / t_len as f64;
    for i in 0..n {
        for j in i..n {
            let v = g[i * n + j] * inv;
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

fn gram_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let (t_len, n) = (x.shape()[0], x.shape()[1]);
    let g = grad.data();
    let inv = 1.0 / t_len as f64;
    // S = (dG + dGᵀ) / T, dX = X S
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (g[i * n + j] + g[j * n + i]) * inv;
        }
    }
    Tensor::from_parts(vec![t_len, n], matmul_raw(x.data(), &s, t_len, n, n))
}
