//! Differentiable primitives. Each forward has a matching backward that maps
//! the output gradient to input (and parameter) gradients.

use crate::error::{ensure, Result};

use super::gemm::gemm;
use super::tensor::Tensor;

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    ensure!(t.rank() == 4, Contract, "{what}: expected rank 4, got {:?}", t.shape());
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

fn dims5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    ensure!(t.rank() == 5, Contract, "{what}: expected rank 5, got {:?}", t.shape());
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    ensure!(stride >= 1, Contract, "stride must be >= 1");
    ensure!(n + 2 * pad >= k, Contract, "kernel {k} larger than padded input {}", n + 2 * pad);
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Geometry of a convolution over `S` spatial axes.
#[derive(Clone, Copy, Debug)]
struct ConvGeom<const S: usize> {
    c: usize,
    input: [usize; S],
    output: [usize; S],
    k: usize,
    stride: usize,
    pad: usize,
}

impl<const S: usize> ConvGeom<S> {
    fn col_rows(&self) -> usize {
        self.c * self.k.pow(S as u32)
    }

    fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    /// Visit every (column-matrix index, input index or None for padding).
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let kk = self.k.pow(S as u32);
        let cols = self.col_cols();
        let plane = self.in_plane();
        for c in 0..self.c {
            for kidx in 0..kk {
                let mut koff = [0usize; S];
                let mut r = kidx;
                for a in (0..S).rev() {
                    koff[a] = r % self.k;
                    r /= self.k;
                }
                let row = (c * kk + kidx) * cols;
                for o in 0..cols {
                    let mut r = o;
                    let mut inside = true;
                    let mut lin = 0usize;
                    let mut pos = [0usize; S];
                    for a in (0..S).rev() {
                        pos[a] = r % self.output[a];
                        r /= self.output[a];
                    }
                    for a in 0..S {
                        let p = (pos[a] * self.stride + koff[a]) as isize - self.pad as isize;
                        if p < 0 || p >= self.input[a] as isize {
                            inside = false;
                            break;
                        }
                        lin = lin * self.input[a] + p as usize;
                    }
                    f(row + o, inside.then_some(c * plane + lin));
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        self.for_each(|ci, xi| col[ci] = xi.map_or(0.0, |i| x[i]));
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        self.for_each(|ci, xi| {
            if let Some(i) = xi {
                dx[i] += col[ci];
            }
        });
    }
}

fn conv_forward<const S: usize>(
    x: &[f64],
    n: usize,
    g: ConvGeom<S>,
    w: &Tensor,
    b: &Tensor,
    out_c: usize,
) -> Vec<f64> {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_sz = g.c * g.in_plane();
    let mut col = vec![0.0; rows * cols];
    let mut y = vec![0.0; n * out_c * cols];
    for s in 0..n {
        g.im2col(&x[s * in_sz..(s + 1) * in_sz], &mut col);
        let ys = &mut y[s * out_c * cols..(s + 1) * out_c * cols];
        for (o, chunk) in ys.chunks_mut(cols).enumerate() {
            chunk.fill(b.data()[o]);
        }
        gemm(out_c, rows, cols, 1.0, w.data(), false, &col, false, 1.0, ys);
    }
    y
}

fn conv_backward<const S: usize>(
    x: &[f64],
    n: usize,
    g: ConvGeom<S>,
    w: &Tensor,
    out_c: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_sz = g.c * g.in_plane();
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; out_c * rows];
    let mut db = vec![0.0; out_c];
    for s in 0..n {
        let dys = &dy[s * out_c * cols..(s + 1) * out_c * cols];
        for (o, chunk) in dys.chunks(cols).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        g.im2col(&x[s * in_sz..(s + 1) * in_sz], &mut col);
        // dW += dY * col^T
        gemm(out_c, cols, rows, 1.0, dys, false, &col, true, 1.0, &mut dw);
        // dcol = W^T * dY
        gemm(rows, out_c, cols, 1.0, w.data(), true, dys, false, 0.0, &mut dcol);
        g.col2im(&dcol, &mut dx[s * in_sz..(s + 1) * in_sz]);
    }
    (dx, dw, db)
}

/// Gradients of a layer with weight and bias.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

fn check_conv_params(x_c: usize, w: &Tensor, b: &Tensor, spatial: usize) -> Result<(usize, usize)> {
    ensure!(w.rank() == 2 + spatial, Contract, "conv weight rank {} != {}", w.rank(), 2 + spatial);
    let s = w.shape();
    let k = s[2];
    ensure!(s[2..].iter().all(|&d| d == k), Contract, "conv kernel must be cubic/square, got {:?}", s);
    ensure!(s[1] == x_c, Contract, "conv weight expects {} input channels, got {}", s[1], x_c);
    ensure!(b.shape() == [s[0]], Contract, "conv bias shape {:?} != [{}]", b.shape(), s[0]);
    Ok((s[0], k))
}

/// 2D convolution. `x: [N, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd] = dims4(x, "conv2d input")?;
    let (o, k) = check_conv_params(c, w, b, 2)?;
    let g = ConvGeom::<2> {
        c,
        input: [h, wd],
        output: [out_len(h, k, stride, pad)?, out_len(wd, k, stride, pad)?],
        k,
        stride,
        pad,
    };
    let y = conv_forward(x.data(), n, g, w, b, o);
    Tensor::from_vec(&[n, o, g.output[0], g.output[1]], y)
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, stride: usize, pad: usize) -> Result<LayerGrads> {
    let [n, c, h, wd] = dims4(x, "conv2d input")?;
    let o = w.shape()[0];
    let k = w.shape()[2];
    let g = ConvGeom::<2> {
        c,
        input: [h, wd],
        output: [out_len(h, k, stride, pad)?, out_len(wd, k, stride, pad)?],
        k,
        stride,
        pad,
    };
    ensure!(
        dy.shape() == [n, o, g.output[0], g.output[1]],
        Contract,
        "conv2d output gradient shape {:?}",
        dy.shape()
    );
    let (dx, dw, db) = conv_backward(x.data(), n, g, w, o, dy.data());
    Ok(LayerGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[o], db)?,
    })
}

/// 3D convolution. `x: [N, C, D, H, W]`, `w: [O, C, K, K, K]`, `b: [O]`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, d, h, wd] = dims5(x, "conv3d input")?;
    let (o, k) = check_conv_params(c, w, b, 3)?;
    let g = ConvGeom::<3> {
        c,
        input: [d, h, wd],
        output: [
            out_len(d, k, stride, pad)?,
            out_len(h, k, stride, pad)?,
            out_len(wd, k, stride, pad)?,
        ],
        k,
        stride,
        pad,
    };
    let y = conv_forward(x.data(), n, g, w, b, o);
    Tensor::from_vec(&[n, o, g.output[0], g.output[1], g.output[2]], y)
}

pub fn conv3d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, stride: usize, pad: usize) -> Result<LayerGrads> {
    let [n, c, d, h, wd] = dims5(x, "conv3d input")?;
    let o = w.shape()[0];
    let k = w.shape()[2];
    let g = ConvGeom::<3> {
        c,
        input: [d, h, wd],
        output: [
            out_len(d, k, stride, pad)?,
            out_len(h, k, stride, pad)?,
            out_len(wd, k, stride, pad)?,
        ],
        k,
        stride,
        pad,
    };
    ensure!(
        dy.shape() == [n, o, g.output[0], g.output[1], g.output[2]],
        Contract,
        "conv3d output gradient shape {:?}",
        dy.shape()
    );
    let (dx, dw, db) = conv_backward(x.data(), n, g, w, o, dy.data());
    Ok(LayerGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[o], db)?,
    })
}

/// Output of a max pool together with the flat input index of each maximum.
#[derive(Clone, Debug)]
pub struct Pooled {
    pub y: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2x2 max pool over the last two axes. Odd trailing rows
/// and columns are dropped.
pub fn maxpool2d(x: &Tensor) -> Result<Pooled> {
    let [n, c, h, w] = dims4(x, "maxpool2d input")?;
    ensure!(h >= 2 && w >= 2, Contract, "maxpool2d needs spatial size >= 2, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(y.capacity());
    let xd = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        y: Tensor::from_vec(&[n, c, ho, wo], y)?,
        argmax,
    })
}

/// Non-overlapping 2x2x2 max pool over the last three axes.
pub fn maxpool3d(x: &Tensor) -> Result<Pooled> {
    let [n, c, d, h, w] = dims5(x, "maxpool3d input")?;
    ensure!(d >= 2 && h >= 2 && w >= 2, Contract, "maxpool3d needs spatial size >= 2");
    let (dout, ho, wo) = (d / 2, h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * dout * ho * wo);
    let mut argmax = Vec::with_capacity(y.capacity());
    let xd = x.data();
    for p in 0..n * c {
        let base = p * d * h * w;
        for a in 0..dout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + ((2 * a) * h + 2 * i) * w + 2 * j;
                    for da in 0..2 {
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = base + ((2 * a + da) * h + 2 * i + di) * w + 2 * j + dj;
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    y.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok(Pooled {
        y: Tensor::from_vec(&[n, c, dout, ho, wo], y)?,
        argmax,
    })
}

/// Scatter the pooled gradient back to the argmax positions.
pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    ensure!(dy.numel() == argmax.len(), Contract, "pool gradient size mismatch");
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour 2x upsampling over the last `spatial` axes.
pub fn upsample2x(x: &Tensor, spatial: usize) -> Result<Tensor> {
    ensure!(
        (1..=3).contains(&spatial) && x.rank() >= spatial,
        Contract,
        "upsample2x over {spatial} axes of rank-{} tensor",
        x.rank()
    );
    let s = x.shape();
    let lead = s.len() - spatial;
    let outer: usize = s[..lead].iter().product();
    let sp = &s[lead..];
    let mut out_shape = s.to_vec();
    for a in 0..spatial {
        out_shape[lead + a] *= 2;
    }
    let osp = &out_shape[lead..];
    let in_sz: usize = sp.iter().product();
    let out_sz: usize = osp.iter().product();
    let mut y = vec![0.0; outer * out_sz];
    for p in 0..outer {
        for o in 0..out_sz {
            y[p * out_sz + o] = x.data()[p * in_sz + upsample_source(o, sp, osp)];
        }
    }
    Tensor::from_vec(&out_shape, y)
}

#[inline]
fn upsample_source(o: usize, sp: &[usize], osp: &[usize]) -> usize {
    let mut r = o;
    let mut coords = [0usize; 3];
    for a in (0..osp.len()).rev() {
        coords[a] = (r % osp[a]) / 2;
        r /= osp[a];
    }
    let mut lin = 0;
    for a in 0..sp.len() {
        lin = lin * sp[a] + coords[a];
    }
    lin
}

pub fn upsample2x_backward(input_shape: &[usize], dy: &Tensor, spatial: usize) -> Result<Tensor> {
    let lead = input_shape.len() - spatial;
    let outer: usize = input_shape[..lead].iter().product();
    let sp = &input_shape[lead..];
    let osp = &dy.shape()[lead..];
    ensure!(
        osp.iter().zip(sp).all(|(o, i)| *o == 2 * i),
        Contract,
        "upsample gradient shape {:?} vs input {:?}",
        dy.shape(),
        input_shape
    );
    let in_sz: usize = sp.iter().product();
    let out_sz: usize = osp.iter().product();
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..outer {
        for o in 0..out_sz {
            dx.data_mut()[p * in_sz + upsample_source(o, sp, osp)] += dy.data()[p * out_sz + o];
        }
    }
    Ok(dx)
}

/// Fully connected layer. `x: [N, I]`, `w: [O, I]`, `b: [O]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(x.rank() == 2 && w.rank() == 2, Contract, "dense expects rank-2 input and weight");
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    ensure!(w.shape()[1] == i, Contract, "dense weight {:?} vs input width {}", w.shape(), i);
    ensure!(b.shape() == [o], Contract, "dense bias shape {:?}", b.shape());
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(n, i, o, 1.0, x.data(), false, w.data(), true, 1.0, &mut y);
    Tensor::from_vec(&[n, o], y)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<LayerGrads> {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    ensure!(dy.shape() == [n, o], Contract, "dense output gradient shape {:?}", dy.shape());
    let mut dx = vec![0.0; n * i];
    gemm(n, o, i, 1.0, dy.data(), false, w.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; o * i];
    gemm(o, n, i, 1.0, dy.data(), true, x.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; o];
    for row in dy.data().chunks(o) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(LayerGrads {
        dx: Tensor::from_vec(&[n, i], dx)?,
        dw: Tensor::from_vec(&[o, i], dw)?,
        db: Tensor::from_vec(&[o], db)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of relu given its input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.same_shape(dy)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of sigmoid given its output.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.same_shape(dy)?;
    let data = y.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
    Tensor::from_vec(y.shape(), data)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Gradient of tanh given its output.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.same_shape(dy)?;
    let data = y.data().iter().zip(dy.data()).map(|(&t, &g)| g * (1.0 - t * t)).collect();
    Tensor::from_vec(y.shape(), data)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    ensure!(axis < shape.len(), Contract, "axis {axis} out of range for {:?}", shape);
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut y = x.clone();
    let d = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..len {
                let e = (d[at(k)] - m).exp();
                d[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                d[at(k)] /= s;
            }
        }
    }
    Ok(y)
}

/// Gradient of softmax given its output: `y * (dy - sum(dy * y))` along `axis`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    y.same_shape(dy)?;
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), dy.data());
    let out = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Ok(dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Reduction along `axis` (the axis is removed). For `Max` the second value
/// holds the flat input index of each maximum.
pub fn reduce(x: &Tensor, axis: usize, kind: Reduce) -> Result<(Tensor, Vec<usize>)> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    ensure!(len >= 1, Contract, "reduction over an empty axis");
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let mut y = Vec::with_capacity(outer * inner);
    let mut arg = Vec::new();
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            match kind {
                Reduce::Sum => y.push((0..len).map(|k| d[at(k)]).sum()),
                Reduce::Mean => y.push((0..len).map(|k| d[at(k)]).sum::<f64>() / len as f64),
                Reduce::Max => {
                    let best = (1..len).fold(at(0), |b, k| if d[at(k)] > d[b] { at(k) } else { b });
                    y.push(d[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&shape, y)?, arg))
}

pub fn reduce_backward(
    input_shape: &[usize],
    axis: usize,
    kind: Reduce,
    argmax: &[usize],
    dy: &Tensor,
) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(input_shape, axis)?;
    ensure!(dy.numel() == outer * inner, Contract, "reduction gradient size mismatch");
    let mut dx = Tensor::zeros(input_shape);
    let out = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let g = dy.data()[o * inner + i];
            match kind {
                Reduce::Sum | Reduce::Mean => {
                    let g = if kind == Reduce::Mean { g / len as f64 } else { g };
                    for k in 0..len {
                        out[(o * len + k) * inner + i] += g;
                    }
                }
                Reduce::Max => out[argmax[o * inner + i]] += g,
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b + 0.5);
        }
        let y2 = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y2.shape(), &[1, 1, 2, 2]);
        assert_eq!(y2.data(), &[0.5, 2.5, 6.5, 8.5]);
    }

    #[test]
    fn conv3d_sums_neighbourhood() {
        let x = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.data()[13], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 7., 1.]).unwrap();
        let p = maxpool2d(&x).unwrap();
        assert_eq!(p.y.data(), &[5.0, 7.0]);
        assert_eq!(p.argmax, vec![1, 6]);
        let u = upsample2x(&p.y, 2).unwrap();
        assert_eq!(u.shape(), &[1, 1, 2, 4]);
        assert_eq!(u.data(), &[5., 5., 7., 7., 5., 5., 7., 7.]);
        let back = upsample2x_backward(p.y.shape(), &Tensor::full(&[1, 1, 2, 4], 1.0), 2).unwrap();
        assert_eq!(back.data(), &[4.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]).unwrap();
        for axis in 0..2 {
            let y = softmax(&x, axis).unwrap();
            let (s, _) = reduce(&y, axis, Reduce::Sum).unwrap();
            for v in s.data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
            assert!(y.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn reductions() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 4.0, 2.0, 3.0, 0.0, 5.0]).unwrap();
        assert_eq!(reduce(&x, 1, Reduce::Sum).unwrap().0.data(), &[7.0, 8.0]);
        assert_eq!(reduce(&x, 0, Reduce::Mean).unwrap().0.data(), &[2.0, 2.0, 3.5]);
        let (m, arg) = reduce(&x, 1, Reduce::Max).unwrap();
        assert_eq!(m.data(), &[4.0, 5.0]);
        assert_eq!(arg, vec![1, 5]);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 1, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[3]), 1, 1).is_err());
        assert!(dense(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4])).is_err());
    }
}
