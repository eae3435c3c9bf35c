//! Mini-batch training with best-validation checkpointing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::loss::ce_parts;
use super::network::{Arch, NetworkParams};
use super::optim::{Optimizer, OptimizerState};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::raster::{LabelRaster, Raster};
use crate::sampling::{augment, ClassWeights};
use crate::scalar::Scalar;
use crate::tiling::{SampleSet, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class loss weights; derived from the training labels when absent.
    pub class_weights: Option<Vec<f64>>,
    /// Adds the four rotated and reflected copies of every training tile.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::adam(),
            epochs: 10,
            batch_size: 8,
            seed: 0,
            class_weights: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Adam for the SegNet and U-Net variants, SGD with momentum for PSP.
    pub fn for_arch(arch: Arch) -> Self {
        TrainConfig {
            optimizer: match arch {
                Arch::SegnetMini | Arch::UnetMini => Optimizer::adam(),
                Arch::PspMini => Optimizer::sgd(),
            },
            ..Default::default()
        }
    }
}

/// A standardized input tile and its labels.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub input: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> TrainSample<T> {
    pub fn new(net: &NetworkParams<T>, raster: &Raster, labels: &LabelRaster) -> Result<Self> {
        if raster.dims() != labels.dims() {
            return Err(Error::GeometryMismatch {
                expected: raster.dims(),
                found: labels.dims(),
            });
        }
        Ok(TrainSample {
            input: net.input_tensor(raster)?,
            labels: labels.labels().to_vec(),
        })
    }
}

/// Per-band mean and population standard deviation over valid pixels; a
/// constant band gets standard deviation 1.
pub fn input_statistics<'a>(rasters: impl IntoIterator<Item = &'a Raster>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sums: Vec<(f64, f64)> = Vec::new();
    let mut n = 0usize;
    for r in rasters {
        if sums.is_empty() {
            sums = vec![(0.0, 0.0); r.n_bands()];
        } else if sums.len() != r.n_bands() {
            return Err(Error::shape("tiles disagree on band count"));
        }
        for (i, &ok) in r.mask().iter().enumerate() {
            if ok {
                n += 1;
                for (b, s) in sums.iter_mut().enumerate() {
                    let v = r.band(b)[i] as f64;
                    s.0 += v;
                    s.1 += v * v;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("no valid pixels to standardize on".into()));
    }
    let nf = n as f64;
    let mean: Vec<f64> = sums.iter().map(|s| s.0 / nf).collect();
    let std = sums
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s.1 / nf - m * m).max(0.0);
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, std))
}

/// Optimizer loop over a network's flat parameters.
pub struct Trainer<T> {
    pub net: NetworkParams<T>,
    pub optimizer: Optimizer,
    pub weights: Vec<T>,
    state: OptimizerState<T>,
    pub steps: usize,
}

/// Loss terms and parameter gradient of one sample; the gradient is of the
/// unnormalized numerator.
fn sample_terms<T: Scalar>(net: &NetworkParams<T>, s: &TrainSample<T>, weights: &[T], want_grad: bool) -> Result<(T, T, Option<Vec<T>>)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let x = g.leaf(s.input.clone());
    let out = net.forward(&mut g, x, &vars)?;
    let parts = ce_parts(g.value(out), &s.labels, weights)?;
    let grad = if want_grad && parts.denominator > T::zero() {
        let grads = g.backward(out, &parts.grad)?;
        Some(net.collect_grads(&grads, &vars))
    } else {
        None
    };
    Ok((parts.numerator, parts.denominator, grad))
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: NetworkParams<T>, optimizer: Optimizer, class_weights: &[f64]) -> Result<Self> {
        optimizer.validate()?;
        if class_weights.len() != net.classes {
            return Err(Error::shape(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                net.classes
            )));
        }
        let state = OptimizerState::new(&optimizer, net.n_params());
        Ok(Trainer {
            weights: class_weights.iter().map(|&w| T::of(w)).collect(),
            net,
            optimizer,
            state,
            steps: 0,
        })
    }

    /// Summed loss numerator and denominator over `samples`.
    pub fn loss_terms(&self, samples: &[&TrainSample<T>]) -> Result<(T, T)> {
        let terms = samples
            .par_iter()
            .map(|s| sample_terms(&self.net, s, &self.weights, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(terms.iter().fold((T::zero(), T::zero()), |a, t| (a.0 + t.0, a.1 + t.1)))
    }

    pub fn loss(&self, samples: &[&TrainSample<T>]) -> Result<T> {
        let (n, d) = self.loss_terms(samples)?;
        if d <= T::zero() {
            return Err(Error::Empty("no labelled pixel carries loss weight".into()));
        }
        Ok(n / d)
    }

    /// One optimizer step on a batch. Per-sample gradients run in parallel
    /// and are summed in batch order, so the result does not depend on the
    /// thread count. Returns the batch loss terms before the step.
    pub fn step(&mut self, batch: &[&TrainSample<T>]) -> Result<(T, T)> {
        let terms = batch
            .par_iter()
            .map(|s| sample_terms(&self.net, s, &self.weights, true))
            .collect::<Result<Vec<_>>>()?;
        let mut num = T::zero();
        let mut den = T::zero();
        let mut grad = vec![T::zero(); self.net.n_params()];
        for (n, d, g) in &terms {
            num += *n;
            den += *d;
            if let Some(g) = g {
                for (a, &b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        if den <= T::zero() {
            return Ok((num, den));
        }
        for g in &mut grad {
            *g /= den;
        }
        self.state.step(&self.optimizer, &mut self.net.values, &grad)?;
        self.steps += 1;
        Ok((num, den))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest validation loss (training
    /// loss when there is no validation split).
    pub net: NetworkParams<T>,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Trains on the train split of `set`, validating on its val split after every
/// epoch. Input standardization is fitted on the train tiles first.
pub fn train<T: Scalar>(mut net: NetworkParams<T>, set: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epochs must be positive"));
    }
    let train_tiles: Vec<_> = set.of_split(Split::Train).collect();
    if train_tiles.is_empty() {
        return Err(Error::Empty("no training tiles".into()));
    }
    let (mean, std) = input_statistics(train_tiles.iter().map(|t| &t.raster))?;
    net.input_mean = mean.into_iter().map(T::of).collect();
    net.input_std = std.into_iter().map(T::of).collect();

    let mut samples = Vec::new();
    let mut counts = vec![0usize; net.classes];
    for t in &train_tiles {
        for (i, c) in t.labels.class_counts(net.classes).into_iter().enumerate() {
            counts[i] += c;
        }
        samples.push(TrainSample::new(&net, &t.raster, &t.labels)?);
        if cfg.augment {
            for (r, l) in augment(&t.raster, &t.labels)? {
                samples.push(TrainSample::new(&net, &r, &l)?);
            }
        }
    }
    let val: Vec<TrainSample<T>> = set
        .of_split(Split::Val)
        .map(|t| TrainSample::new(&net, &t.raster, &t.labels))
        .collect::<Result<_>>()?;
    let val_refs: Vec<&TrainSample<T>> = val.iter().collect();

    let weights = match &cfg.class_weights {
        Some(w) => w.clone(),
        None => ClassWeights::from_counts(&counts)?.weights,
    };
    let mut trainer = Trainer::new(net, cfg.optimizer, &weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<T>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut num, mut den) = (T::zero(), T::zero());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (n, d) = trainer.step(&batch)?;
            num += n;
            den += d;
        }
        let train_loss = (num / den).to_f64_lossy();
        let val_loss = if val_refs.is_empty() {
            f64::NAN
        } else {
            let (n, d) = trainer.loss_terms(&val_refs)?;
            (n / d).to_f64_lossy()
        };
        log::info!("epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}");
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let score = if val_loss.is_nan() { train_loss } else { val_loss };
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, trainer.net.values.clone()));
        }
    }
    let (_, best_epoch, values) = best.expect("at least one epoch ran");
    let steps = trainer.steps;
    let mut net = trainer.net;
    net.values = values;
    Ok(TrainOutcome {
        net,
        curve,
        best_epoch,
        steps,
    })
}

/// Writes `epoch,train_loss,val_loss` rows.
pub fn write_loss_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
