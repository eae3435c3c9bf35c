//! Class-weighted categorical cross-entropy with nodata exclusion.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::raster::NODATA;
use crate::scalar::Scalar;

/// Unnormalized loss terms: the loss is `numerator / denominator`, and `grad`
/// is the gradient of the numerator with respect to the logits. Keeping the
/// parts separate lets a batch normalize by its total weight.
#[derive(Debug, Clone)]
pub struct CeParts<T> {
    pub numerator: T,
    pub denominator: T,
    pub grad: Tensor<T>,
}

/// `labels` holds one class id (or [`NODATA`]) per pixel of `logits` (N, K, H, W).
pub fn ce_parts<T: Scalar>(logits: &Tensor<T>, labels: &[u8], weights: &[T]) -> Result<CeParts<T>> {
    let [n, k, h, w] = logits.dims();
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(format!("{} labels for {n}x{h}x{w} pixels", labels.len())));
    }
    if weights.len() != k {
        return Err(Error::shape(format!("{} class weights for {k} classes", weights.len())));
    }
    let z = logits.data();
    let mut grad = Tensor::zeros(logits.dims());
    let mut num = T::zero();
    let mut den = T::zero();
    let mut e = vec![T::zero(); k];
    for b in 0..n {
        for i in 0..hw {
            let y = labels[b * hw + i];
            if y == NODATA {
                continue;
            }
            let y = y as usize;
            if y >= k {
                return Err(Error::IllegalClassId(y as u8));
            }
            let wy = weights[y];
            let at = |c: usize| (b * k + c) * hw + i;
            let (mut top, mut m) = (0, z[at(0)]);
            for c in 1..k {
                if z[at(c)] > m {
                    m = z[at(c)];
                    top = c;
                }
            }
            let mut rest = T::zero();
            for (c, ec) in e.iter_mut().enumerate() {
                *ec = (z[at(c)] - m).exp();
                if c != top {
                    rest += *ec;
                }
            }
            // -log softmax_y = (m - z_y) + log(1 + rest); ln_1p keeps tiny losses exact
            num += wy * ((m - z[at(y)]) + rest.ln_1p());
            den += wy;
            let s = T::one() + rest;
            let gd = grad.data_mut();
            for (c, &ec) in e.iter().enumerate() {
                let p = ec / s;
                gd[at(c)] = wy * if c == y { p - T::one() } else { p };
            }
        }
    }
    Ok(CeParts {
        numerator: num,
        denominator: den,
        grad,
    })
}

/// Weighted mean cross-entropy over non-nodata pixels and its gradient.
pub fn weighted_ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], weights: &[T]) -> Result<(T, Tensor<T>)> {
    let mut parts = ce_parts(logits, labels, weights)?;
    if parts.denominator <= T::zero() {
        return Err(Error::Empty("no labelled pixel carries loss weight".into()));
    }
    let d = parts.denominator;
    for g in parts.grad.data_mut() {
        *g /= d;
    }
    Ok((parts.numerator / d, parts.grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let z = Tensor::<f64>::zeros([1, 4, 2, 2]);
        let (l, _) = weighted_ce_loss(&z, &[0, 1, 2, 3], &[1.0; 4]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_is_nearly_free() {
        let mut z = Tensor::<f64>::zeros([1, 3, 1, 1]);
        z.data_mut()[1] = 30.0;
        let (l, _) = weighted_ce_loss(&z, &[1], &[1.0; 3]).unwrap();
        assert!(l > 0.0 && l < 1e-12, "{l}");
    }

    #[test]
    fn weights_cancel_on_single_class_batches() {
        let z = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let w = [2.0, 1.0];
        let (a, ga) = weighted_ce_loss(&z, &[0; 4], &w).unwrap();
        let (b, gb) = weighted_ce_loss(&z, &[1; 4], &w).unwrap();
        assert_eq!(a, b);
        // normalized gradients match; the raw numerator gradients differ by the weight
        assert_eq!(ga.data()[0].abs(), gb.data()[4].abs());
        let pa = ce_parts(&z, &[0; 4], &w).unwrap();
        let pb = ce_parts(&z, &[1; 4], &w).unwrap();
        assert_eq!(pa.grad.data()[0], 2.0 * pb.grad.data()[4]);
    }

    #[test]
    fn nodata_is_ignored() {
        let mut z = Tensor::<f64>::zeros([1, 2, 1, 2]);
        z.data_mut()[1] = 5.0;
        let (a, g) = weighted_ce_loss(&z, &[0, NODATA], &[1.0, 1.0]).unwrap();
        assert!((a - 2f64.ln()).abs() < 1e-15);
        assert_eq!((g.data()[1], g.data()[3]), (0.0, 0.0));
        assert!(weighted_ce_loss(&z, &[NODATA, NODATA], &[1.0, 1.0]).is_err());
        assert!(weighted_ce_loss(&z, &[2, 0], &[1.0, 1.0]).is_err());
    }
}
