//! Dense NCHW tensors and the forward/backward kernels of every layer type.

use crate::error::{Error, Result};
use crate::preprocess::terrain::reflect;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// `dims` is (batch, channels, height, width).
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("tensor dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} values for tensor dims {dims:?}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], v: T) -> Self {
        Tensor {
            dims,
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.dims;
        ((n * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let [_, _, h, w] = self.dims;
        let i = self.index(n, c, 0, 0);
        &self.data[i..i + h * w]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

fn check_kernel(k: usize, dilation: usize) -> Result<()> {
    if k != 1 && k != 3 {
        return Err(Error::invalid(format!("kernel size must be 1 or 3, got {k}")));
    }
    if dilation == 0 {
        return Err(Error::invalid("dilation must be at least 1"));
    }
    Ok(())
}

/// Reflect-pads every plane by `pad` cells on each side.
fn pad_reflect<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Vec<T>> {
    let [n, c, h, w] = x.dims;
    if pad > 0 && (pad >= h || pad >= w) {
        return Err(Error::shape(format!(
            "reflect padding {pad} needs spatial dims above it, got {h}x{w}"
        )));
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * hp * wp);
    let cols: Vec<usize> = (0..wp).map(|px| reflect(px as isize - pad as isize, w)).collect();
    for p in 0..n * c {
        let plane = &x.data[p * h * w..(p + 1) * h * w];
        for py in 0..hp {
            let row = &plane[reflect(py as isize - pad as isize, h) * w..][..w];
            out.extend(cols.iter().map(|&sx| row[sx]));
        }
    }
    Ok(out)
}

/// Cached state needed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    padded: Vec<T>,
    pad: usize,
}

/// Cross-correlation of `x` (N, I, H, W) with `w` (O, I, k, k), `k` in {1, 3},
/// dilated, with reflect padding so the spatial dims are kept.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    dilation: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [n, ci, h, wd] = x.dims;
    let [co, wi, k, k2] = w.dims;
    check_kernel(k, dilation)?;
    if k != k2 {
        return Err(Error::shape(format!("kernel must be square, got {k}x{k2}")));
    }
    if wi != ci {
        return Err(Error::shape(format!("kernel expects {wi} input channels, input has {ci}")));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::shape(format!("{} biases for {co} output channels", b.len())));
        }
    }
    let pad = dilation * (k / 2);
    let padded = pad_reflect(x, pad)?;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let mut out = Tensor::zeros([n, co, h, wd]);
    for b in 0..n {
        for o in 0..co {
            let oi = out.index(b, o, 0, 0);
            let oplane = &mut out.data[oi..oi + h * wd];
            if let Some(bias) = bias {
                oplane.fill(bias[o]);
            }
            for i in 0..ci {
                let ip = &padded[(b * ci + i) * hp * wp..][..hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                        for y in 0..h {
                            let src = &ip[(y + ky * dilation) * wp + kx * dilation..][..wd];
                            let dst = &mut oplane[y * wd..(y + 1) * wd];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, ConvCache { padded, pad }))
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x_dims: [usize; 4],
    w: &Tensor<T>,
    dilation: usize,
    cache: &ConvCache<T>,
    grad_out: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, ci, h, wd] = x_dims;
    let [co, _, k, _] = w.dims;
    let pad = cache.pad;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let mut gpad = vec![T::zero(); n * ci * hp * wp];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); co];
    for b in 0..n {
        for o in 0..co {
            let g = grad_out.plane(b, o);
            gb[o] += g.iter().copied().sum::<T>();
            for i in 0..ci {
                let base = (b * ci + i) * hp * wp;
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((o * ci + i) * k + ky) * k + kx;
                        let wv = w.data[wi];
                        let mut acc = T::zero();
                        for y in 0..h {
                            let off = base + (y + ky * dilation) * wp + kx * dilation;
                            let grow = &g[y * wd..(y + 1) * wd];
                            let src = &cache.padded[off..off + wd];
                            for (&gv, &s) in grow.iter().zip(src) {
                                acc += gv * s;
                            }
                            let dst = &mut gpad[off..off + wd];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    // fold the padded gradient back onto the cells it was reflected from
    let mut gx = vec![T::zero(); n * ci * h * wd];
    let cols: Vec<usize> = (0..wp).map(|px| reflect(px as isize - pad as isize, wd)).collect();
    for p in 0..n * ci {
        for py in 0..hp {
            let sy = reflect(py as isize - pad as isize, h);
            let src = &gpad[(p * hp + py) * wp..][..wp];
            let dst = &mut gx[(p * h + sy) * wd..][..wd];
            for (&sx, &v) in cols.iter().zip(src) {
                dst[sx] += v;
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        dims: x.dims,
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

/// 2x2 max pooling. `indices[j]` is the flat input index of output `j`'s
/// winner; ties go to the first cell in row-major order.
pub fn maxpool_argmax<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max pooling needs even dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut idx = vec![0usize; out.len()];
    for p in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = (p * h + 2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (p * h + 2 * y + dy) * w + 2 * xx + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = (p * ho + y) * wo + xx;
                out.data[o] = x.data[best];
                idx[o] = best;
            }
        }
    }
    Ok((out, idx))
}

/// Places every pooled value back at its recorded position in a zero tensor of `out_dims`.
pub fn max_unpool<T: Scalar>(pooled: &Tensor<T>, indices: &[usize], out_dims: [usize; 4]) -> Result<Tensor<T>> {
    if indices.len() != pooled.len() {
        return Err(Error::shape(format!(
            "{} indices for {} pooled values",
            indices.len(),
            pooled.len()
        )));
    }
    let mut out = Tensor::zeros(out_dims);
    for (&i, &v) in indices.iter().zip(&pooled.data) {
        if i >= out.len() {
            return Err(Error::invalid(format!("unpool index {i} outside {out_dims:?}")));
        }
        out.data[i] = v;
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be positive"));
    }
    let [n, c, h, w] = x.dims;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for p in 0..n * c {
        for y in 0..ho {
            let src = &x.data[(p * h + y / factor) * w..][..w];
            let dst = &mut out.data[(p * ho + y) * wo..][..wo];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / factor];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<T: Scalar>(x_dims: [usize; 4], factor: usize, g: &Tensor<T>) -> Vec<T> {
    let [n, c, h, w] = x_dims;
    let (ho, wo) = (h * factor, w * factor);
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for y in 0..ho {
            let src = &g.data[(p * ho + y) * wo..][..wo];
            let dst = &mut gx[(p * h + y / factor) * w..][..w];
            for (xx, &v) in src.iter().enumerate() {
                dst[xx / factor] += v;
            }
        }
    }
    gx
}

/// Average pooling of every plane to `bins x bins` equal blocks.
pub fn avg_pool_bins<T: Scalar>(x: &Tensor<T>, bins: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims;
    if bins == 0 || h % bins != 0 || w % bins != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible into {bins} bins")));
    }
    let (bh, bw) = (h / bins, w / bins);
    let area = T::of((bh * bw) as f64);
    let mut out = Tensor::zeros([n, c, bins, bins]);
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(p * bins + y / bh) * bins + xx / bw] += x.data[(p * h + y) * w + xx];
            }
        }
    }
    for v in &mut out.data {
        *v /= area;
    }
    Ok(out)
}

pub fn avg_pool_bins_backward<T: Scalar>(x_dims: [usize; 4], bins: usize, g: &Tensor<T>) -> Vec<T> {
    let [n, c, h, w] = x_dims;
    let (bh, bw) = (h / bins, w / bins);
    let area = T::of((bh * bw) as f64);
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                gx[(p * h + y) * w + xx] = g.data[(p * bins + y / bh) * bins + xx / bw] / area;
            }
        }
    }
    gx
}

/// Channel concatenation in argument order.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
    let [n, _, h, w] = first.dims;
    for p in parts {
        let [pn, _, ph, pw] = p.dims;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} with {:?}",
                first.dims, p.dims
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.dims[1]).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            let per = p.dims[1] * h * w;
            data.extend_from_slice(&p.data[b * per..(b + 1) * per]);
        }
    }
    Ok(Tensor { dims: [n, c, h, w], data })
}

/// Channel-wise softmax.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = logits.dims;
    let hw = h * w;
    let mut out = Tensor::zeros(logits.dims);
    for b in 0..n {
        for i in 0..hw {
            let at = |c: usize| (b * k + c) * hw + i;
            let m = (0..k).map(|c| logits.data[at(c)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for c in 0..k {
                let e = (logits.data[at(c)] - m).exp();
                out.data[at(c)] = e;
                s += e;
            }
            for c in 0..k {
                out.data[at(c)] /= s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = t([1, 1, 3, 4], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t([1, 1, 3, 3], &k);
        assert_eq!(conv2d(&x, &w, None, 1).unwrap().0, x);
        assert_eq!(conv2d(&x, &w, None, 2).unwrap().0, x);
    }

    #[test]
    fn ones_kernel_on_constant() {
        let x = Tensor::filled([1, 1, 5, 5], 2.5);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let (y, _) = conv2d(&x, &w, None, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 22.5));
    }

    #[test]
    fn conv_errors() {
        let x: Tensor<f64> = Tensor::zeros([1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), None, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 5, 5]), None, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 3, 3]), None, 4).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 3, 3]), Some(&[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn pooling_examples() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (p, i) = maxpool_argmax(&x).unwrap();
        assert_eq!((p.data(), i.as_slice()), (&[4.0][..], &[3usize][..]));
        let u = max_unpool(&p, &i, [1, 1, 2, 2]).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 0.0, 4.0]);
        let (_, i) = maxpool_argmax(&Tensor::filled([1, 1, 2, 2], 7.0)).unwrap();
        assert_eq!(i, vec![0]);
        assert!(maxpool_argmax(&Tensor::<f64>::zeros([1, 1, 3, 2])).is_err());
        assert!(max_unpool(&p, &[4], [1, 1, 2, 2]).is_err());
    }

    #[test]
    fn unpool_keeps_sum_and_sparsity() {
        let x = t([1, 2, 4, 4], &(0..32).map(|v| ((v * 7) % 11) as f64 + 0.5).collect::<Vec<_>>());
        let (p, i) = maxpool_argmax(&x).unwrap();
        let u = max_unpool(&p, &i, x.dims()).unwrap();
        assert_eq!(u.sum(), p.sum());
        assert!(u.data().iter().filter(|&&v| v != 0.0).count() <= p.len());
        for (&j, &v) in i.iter().zip(p.data()) {
            assert_eq!(x.data()[j], v);
        }
    }

    #[test]
    fn upsample_and_concat() {
        let d = t([1, 1, 1, 1], &[3.0]);
        let up = upsample_nearest(&d, 2).unwrap();
        assert_eq!(up.data(), &[3.0; 4]);
        let skip = Tensor::zeros([1, 2, 2, 2]);
        let c = concat(&[&skip, &up]).unwrap();
        assert_eq!(c.dims(), [1, 3, 2, 2]);
        assert_eq!(c.plane(0, 2), up.data());
        assert!(concat(&[&skip, &d]).is_err());
    }

    #[test]
    fn global_average() {
        let x = Tensor::filled([1, 1, 4, 4], 1.5);
        let a = avg_pool_bins(&x, 1).unwrap();
        assert_eq!(a.data(), &[1.5]);
        assert_eq!(upsample_nearest(&a, 4).unwrap(), x);
        assert!(avg_pool_bins(&Tensor::<f64>::zeros([1, 1, 6, 6]), 4).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t([1, 3, 1, 2], &[1000.0, -5.0, 0.0, 2.0, 3.0, 1e-3]);
        let s = softmax(&x);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|c| s.at(0, c, 0, i)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}
