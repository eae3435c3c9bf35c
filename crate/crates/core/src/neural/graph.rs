//! Reverse-mode tape over [`Tensor`] operations.

use super::tensor::{self, ConvCache, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        cache: ConvCache<T>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        indices: Vec<usize>,
    },
    Unpool {
        x: Var,
        pool: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        bins: usize,
    },
    Concat(Vec<Var>),
}

struct Entry<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records values in creation order; since every op only reads earlier
/// entries, reverse creation order is a valid backward schedule.
pub struct Graph<T> {
    entries: Vec<Entry<T>>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { entries: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.entries.push(Entry { value, op });
        Var(self.entries.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.entries[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data());
        let (out, cache) = tensor::conv2d(self.value(x), self.value(w), bias, dilation)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                dilation,
                cache,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn maxpool(&mut self, x: Var) -> Result<Var> {
        let (out, indices) = tensor::maxpool_argmax(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, indices }))
    }

    /// Winner indices recorded by a [`Graph::maxpool`] node.
    pub fn pool_indices(&self, pool: Var) -> Option<&[usize]> {
        match &self.entries[pool.0].op {
            Op::MaxPool { indices, .. } => Some(indices),
            _ => None,
        }
    }

    /// Unpools `x` through the indices of the earlier max-pool node `pool`.
    pub fn max_unpool(&mut self, x: Var, pool: Var) -> Result<Var> {
        let Op::MaxPool { x: src, indices } = &self.entries[pool.0].op else {
            return Err(Error::invalid("unpool needs a max-pool node"));
        };
        if self.value(x).dims() != self.value(pool).dims() {
            return Err(Error::shape(format!(
                "unpool input {:?} does not match pooled {:?}",
                self.value(x).dims(),
                self.value(pool).dims()
            )));
        }
        let out = tensor::max_unpool(self.value(x), indices, self.value(*src).dims())?;
        Ok(self.push(out, Op::Unpool { x, pool }))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = tensor::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }))
    }

    pub fn avg_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let out = tensor::avg_pool_bins(self.value(x), bins)?;
        Ok(self.push(out, Op::AvgPool { x, bins }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Upsamples the decoder 2x and concatenates it after the encoder skip.
    pub fn upsample_concat(&mut self, decoder: Var, skip: Var) -> Result<Var> {
        let [_, _, h, w] = self.value(decoder).dims();
        let [_, _, sh, sw] = self.value(skip).dims();
        if (2 * h, 2 * w) != (sh, sw) {
            return Err(Error::shape(format!(
                "decoder {h}x{w} upsampled does not match skip {sh}x{sw}"
            )));
        }
        let up = self.upsample(decoder, 2)?;
        self.concat(&[skip, up])
    }

    /// For each bin size: average-pool, 1x1 convolution `(w, b)`, upsample
    /// back; the results are concatenated after `x`.
    pub fn pyramid_pool(&mut self, x: Var, bins: &[usize], reduce: &[(Var, Var)]) -> Result<Var> {
        if bins.len() != reduce.len() {
            return Err(Error::invalid(format!(
                "{} bins but {} reduction convolutions",
                bins.len(),
                reduce.len()
            )));
        }
        let [_, _, h, w] = self.value(x).dims();
        let mut parts = vec![x];
        for (&b, &(rw, rb)) in bins.iter().zip(reduce) {
            if b == 0 || h % b != 0 || w % b != 0 || h / b != w / b {
                return Err(Error::shape(format!("{h}x{w} is not divisible into {b} square bins")));
            }
            let pooled = self.avg_pool(x, b)?;
            let reduced = self.conv2d(pooled, rw, Some(rb), 1)?;
            parts.push(self.upsample(reduced, h / b)?);
        }
        self.concat(&parts)
    }

    /// Backpropagates `seed` (the gradient of some scalar with respect to
    /// `out`) through every recorded operation.
    pub fn backward(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.dims() != self.value(out).dims() {
            return Err(Error::shape(format!(
                "seed {:?} does not match output {:?}",
                seed.dims(),
                self.value(out).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.data().to_vec());

        fn add<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g.to_vec()),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let entry = &self.entries[i];
            let gt = Tensor::new(entry.value.dims(), g)?;
            match &entry.op {
                Op::Leaf => {}
                Op::Conv {
                    x,
                    w,
                    b,
                    dilation,
                    cache,
                } => {
                    let (gx, gw, gb) =
                        tensor::conv2d_backward(self.value(*x).dims(), self.value(*w), *dilation, cache, &gt);
                    add(&mut grads, *x, &gx);
                    add(&mut grads, *w, &gw);
                    if let Some(b) = b {
                        add(&mut grads, *b, &gb);
                    }
                }
                Op::Relu(x) => {
                    let gx: Vec<T> = gt
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    add(&mut grads, *x, &gx);
                }
                Op::MaxPool { x, indices } => {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    for (&j, &g) in indices.iter().zip(gt.data()) {
                        gx[j] += g;
                    }
                    add(&mut grads, *x, &gx);
                }
                Op::Unpool { x, pool } => {
                    let indices = self.pool_indices(*pool).expect("unpool refers to a pool node");
                    let gx: Vec<T> = indices.iter().map(|&j| gt.data()[j]).collect();
                    add(&mut grads, *x, &gx);
                }
                Op::Upsample { x, factor } => {
                    let gx = tensor::upsample_nearest_backward(self.value(*x).dims(), *factor, &gt);
                    add(&mut grads, *x, &gx);
                }
                Op::AvgPool { x, bins } => {
                    let gx = tensor::avg_pool_bins_backward(self.value(*x).dims(), *bins, &gt);
                    add(&mut grads, *x, &gx);
                }
                Op::Concat(parts) => {
                    let [n, c, h, w] = gt.dims();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).dims()[1];
                        let mut gp = Vec::with_capacity(n * pc * h * w);
                        for b in 0..n {
                            let start = (b * c + offset) * h * w;
                            gp.extend_from_slice(&gt.data()[start..start + pc * h * w]);
                        }
                        add(&mut grads, p, &gp);
                        offset += pc;
                    }
                }
            }
            grads[i] = Some(gt.into_data());
        }
        Ok(Gradients { grads })
    }
}
