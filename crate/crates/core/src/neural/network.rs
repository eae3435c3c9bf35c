//! Miniature SegNet, U-Net and PSPNet style segmentation networks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{softmax, Tensor};
use crate::error::{Error, Result};
use crate::raster::{body_path, sidecar_path, Raster};
use crate::scalar::Scalar;
use crate::tiling::{extract_raster_patch, ProbPatch, TilePlan};

pub const DEFAULT_WIDTH: usize = 16;
pub const DEFAULT_PATCH: usize = 64;
pub const PYRAMID_BINS: [usize; 3] = [1, 2, 4];
const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SegnetMini,
    UnetMini,
    PspMini,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::SegnetMini, Arch::UnetMini, Arch::PspMini];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::SegnetMini => "segnet_mini",
            Arch::UnetMini => "unet_mini",
            Arch::PspMini => "psp_mini",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture {s:?}")))
    }
}

/// One convolution; its kernel `(out, in, k, k)` starts at `offset` in the
/// flat parameter vector and is followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.out_ch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: Arch,
    pub in_ch: usize,
    pub classes: usize,
    pub width: usize,
    pub patch: usize,
    pub layers: Vec<LayerSpec>,
    /// All kernels and biases in layer order.
    pub values: Vec<T>,
    /// Per-band standardization applied to inputs.
    pub input_mean: Vec<T>,
    pub input_std: Vec<T>,
}

fn layer_plan(arch: Arch, in_ch: usize, classes: usize, w: usize) -> Vec<(String, usize, usize, usize, usize)> {
    let l = |n: &str, i, o, k, d| (n.to_string(), i, o, k, d);
    match arch {
        Arch::SegnetMini => vec![
            l("enc1", in_ch, w, 3, 1),
            l("enc2", w, w, 3, 1),
            l("dec2", w, w, 3, 1),
            l("dec1", w, w, 3, 1),
            l("classifier", w, classes, 1, 1),
        ],
        Arch::UnetMini => vec![
            l("enc1", in_ch, w, 3, 1),
            l("enc2", w, w, 3, 1),
            l("bottleneck", w, w, 3, 1),
            l("dec2", 2 * w, w, 3, 1),
            l("dec1", 2 * w, w, 3, 1),
            l("classifier", w, classes, 1, 1),
        ],
        Arch::PspMini => {
            let r = w / 4;
            let mut v = vec![l("conv1", in_ch, w, 3, 1), l("conv2", w, w, 3, 2)];
            for b in PYRAMID_BINS {
                v.push(l(&format!("pyramid{b}"), w, r, 1, 1));
            }
            v.push(l("classifier", w + PYRAMID_BINS.len() * r, classes, 1, 1));
            v
        }
    }
}

/// Builds a network with He-scaled normal kernels (std `sqrt(2 / fan_in)`)
/// and zero biases.
pub fn build_network<T: Scalar>(
    arch: Arch,
    in_ch: usize,
    classes: usize,
    width: usize,
    patch: usize,
    seed: u64,
) -> Result<NetworkParams<T>> {
    if in_ch == 0 || classes == 0 || width == 0 {
        return Err(Error::invalid("channels, classes and width must be positive"));
    }
    if patch < 8 || !patch.is_multiple_of(4) {
        return Err(Error::invalid(format!("patch must be a multiple of 4 and at least 8, got {patch}")));
    }
    if arch == Arch::PspMini && !width.is_multiple_of(4) {
        return Err(Error::invalid(format!("psp_mini width must be a multiple of 4, got {width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut values = Vec::new();
    for (name, i, o, k, d) in layer_plan(arch, in_ch, classes, width) {
        let spec = LayerSpec {
            name,
            in_ch: i,
            out_ch: o,
            kernel: k,
            dilation: d,
            offset: values.len(),
        };
        let normal = Normal::new(0.0, (2.0 / (i * k * k) as f64).sqrt()).expect("positive std");
        values.extend((0..spec.weight_len()).map(|_| T::of(normal.sample(&mut rng))));
        values.extend(std::iter::repeat_n(T::zero(), o));
        layers.push(spec);
    }
    Ok(NetworkParams {
        arch,
        in_ch,
        classes,
        width,
        patch,
        layers,
        values,
        input_mean: vec![T::zero(); in_ch],
        input_std: vec![T::one(); in_ch],
    })
}

/// Leaves holding one layer's kernel and bias on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Puts every kernel and bias on `g` as leaves, in layer order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| {
                let k = &self.values[l.offset..l.offset + l.weight_len()];
                let b = &self.values[l.offset + l.weight_len()..l.offset + l.len()];
                let weight = g.leaf(
                    Tensor::new([l.out_ch, l.in_ch, l.kernel, l.kernel], k.to_vec()).expect("layer shape"),
                );
                let bias = g.leaf(Tensor::new([1, 1, 1, l.out_ch], b.to_vec()).expect("bias shape"));
                LayerVars { weight, bias }
            })
            .collect()
    }

    /// Records the forward pass of standardized input `x` and returns the logits.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, vars: &[LayerVars]) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims();
        if c != self.in_ch {
            return Err(Error::shape(format!("network takes {} bands, input has {c}", self.in_ch)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("input dims must be multiples of 4, got {h}x{w}")));
        }
        let idx = |name: &str| self.layers.iter().position(|l| l.name == name).expect("layer exists");
        let conv = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
            let i = idx(name);
            g.conv2d(x, vars[i].weight, Some(vars[i].bias), self.layers[i].dilation)
        };
        match self.arch {
            Arch::SegnetMini => {
                let e1 = conv(g, x, "enc1")?;
                let e1 = g.relu(e1);
                let p1 = g.maxpool(e1)?;
                let e2 = conv(g, p1, "enc2")?;
                let e2 = g.relu(e2);
                let p2 = g.maxpool(e2)?;
                let u2 = g.max_unpool(p2, p2)?;
                let d2 = conv(g, u2, "dec2")?;
                let d2 = g.relu(d2);
                let u1 = g.max_unpool(d2, p1)?;
                let d1 = conv(g, u1, "dec1")?;
                let d1 = g.relu(d1);
                conv(g, d1, "classifier")
            }
            Arch::UnetMini => {
                let e1 = conv(g, x, "enc1")?;
                let e1 = g.relu(e1);
                let p1 = g.maxpool(e1)?;
                let e2 = conv(g, p1, "enc2")?;
                let e2 = g.relu(e2);
                let p2 = g.maxpool(e2)?;
                let b = conv(g, p2, "bottleneck")?;
                let b = g.relu(b);
                let c2 = g.upsample_concat(b, e2)?;
                let d2 = conv(g, c2, "dec2")?;
                let d2 = g.relu(d2);
                let c1 = g.upsample_concat(d2, e1)?;
                let d1 = conv(g, c1, "dec1")?;
                let d1 = g.relu(d1);
                conv(g, d1, "classifier")
            }
            Arch::PspMini => {
                let c1 = conv(g, x, "conv1")?;
                let c1 = g.relu(c1);
                let c2 = conv(g, c1, "conv2")?;
                let c2 = g.relu(c2);
                let reduce: Vec<(Var, Var)> = PYRAMID_BINS
                    .iter()
                    .map(|b| {
                        let i = idx(&format!("pyramid{b}"));
                        (vars[i].weight, vars[i].bias)
                    })
                    .collect();
                let pp = g.pyramid_pool(c2, &PYRAMID_BINS, &reduce)?;
                conv(g, pp, "classifier")
            }
        }
    }

    /// Flattens per-layer gradients into the layout of `values`.
    pub fn collect_grads(&self, grads: &super::graph::Gradients<T>, vars: &[LayerVars]) -> Vec<T> {
        let mut out = vec![T::zero(); self.values.len()];
        for (l, v) in self.layers.iter().zip(vars) {
            if let Some(gw) = grads.get(v.weight) {
                out[l.offset..l.offset + l.weight_len()].copy_from_slice(gw);
            }
            if let Some(gb) = grads.get(v.bias) {
                out[l.offset + l.weight_len()..l.offset + l.len()].copy_from_slice(gb);
            }
        }
        out
    }

    /// Standardizes a raster patch into a (1, bands, H, W) tensor; masked
    /// pixels become 0, the band mean.
    pub fn input_tensor(&self, r: &Raster) -> Result<Tensor<T>> {
        if r.n_bands() != self.in_ch {
            return Err(Error::shape(format!(
                "network takes {} bands, raster has {}",
                self.in_ch,
                r.n_bands()
            )));
        }
        let (w, h) = r.dims();
        let mask = r.mask();
        let mut data = Vec::with_capacity(self.in_ch * w * h);
        for (b, band) in r.bands().iter().enumerate() {
            let (m, s) = (self.input_mean[b], self.input_std[b]);
            data.extend(
                band.iter()
                    .zip(mask)
                    .map(|(&v, &ok)| if ok { (T::of(v as f64) - m) / s } else { T::zero() }),
            );
        }
        Tensor::new([1, self.in_ch, h, w], data)
    }

    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.leaf(input.clone());
        let out = self.forward(&mut g, x, &vars)?;
        Ok(g.value(out).clone())
    }

    /// Class probabilities for one raster patch, (1, K, H, W).
    pub fn predict_patch(&self, r: &Raster) -> Result<Tensor<T>> {
        Ok(softmax(&self.logits(&self.input_tensor(r)?)?))
    }
}

/// Forward passes over every tile of `plan`, in anchor order, with the
/// softmax taken in f64. Feed the result to
/// [`crate::tiling::stitch_center`].
pub fn predict_tiles<T: Scalar>(net: &NetworkParams<T>, r: &Raster, plan: &TilePlan) -> Result<Vec<ProbPatch>> {
    if plan.image_dims != r.dims() {
        return Err(Error::GeometryMismatch {
            expected: plan.image_dims,
            found: r.dims(),
        });
    }
    plan.anchors
        .par_iter()
        .map(|&anchor| {
            let patch = extract_raster_patch(r, plan.patch, anchor);
            let z = net.logits(&net.input_tensor(&patch)?)?;
            let z = Tensor::new(z.dims(), z.data().iter().map(|v| v.to_f64_lossy()).collect())?;
            Ok(ProbPatch {
                anchor,
                patch: plan.patch,
                classes: net.classes,
                probs: softmax(&z).into_data(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    format_version: u32,
    arch: Arch,
    in_ch: usize,
    classes: usize,
    width: usize,
    patch: usize,
    layers: Vec<LayerSpec>,
    n_values: usize,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

/// Writes `<stem>.json` (architecture and layer shapes) and `<stem>.bin`
/// (little-endian f64 values in manifest order).
pub fn save_weights<T: Scalar>(net: &NetworkParams<T>, stem: &Path) -> Result<()> {
    let manifest = WeightsManifest {
        format_version: WEIGHTS_FORMAT_VERSION,
        arch: net.arch,
        in_ch: net.in_ch,
        classes: net.classes,
        width: net.width,
        patch: net.patch,
        layers: net.layers.clone(),
        n_values: net.values.len(),
        input_mean: net.input_mean.iter().map(|v| v.to_f64_lossy()).collect(),
        input_std: net.input_std.iter().map(|v| v.to_f64_lossy()).collect(),
    };
    let json = sidecar_path(stem);
    std::fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
    let bytes: Vec<u8> = net.values.iter().flat_map(|v| v.to_f64_lossy().to_le_bytes()).collect();
    let bin = body_path(stem);
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

pub fn load_weights<T: Scalar>(stem: &Path) -> Result<NetworkParams<T>> {
    let json = sidecar_path(stem);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let m: WeightsManifest = serde_json::from_str(&text)?;
    if m.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(Error::Sidecar {
            path: json,
            reason: format!("unsupported weights format version {}", m.format_version),
        });
    }
    let reference = build_network::<T>(m.arch, m.in_ch, m.classes, m.width, m.patch, 0)?;
    if reference.layers != m.layers || m.n_values != reference.values.len() {
        return Err(Error::Sidecar {
            path: json,
            reason: format!("layer table does not match {} with width {}", m.arch, m.width),
        });
    }
    if m.input_mean.len() != m.in_ch || m.input_std.len() != m.in_ch {
        return Err(Error::Sidecar {
            path: json,
            reason: "input standardization must have one entry per band".into(),
        });
    }
    let bin = body_path(stem);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != m.n_values * 8 {
        return Err(Error::BodySize {
            path: bin,
            expected: (m.n_values * 8) as u64,
            found: bytes.len() as u64,
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    Ok(NetworkParams {
        values,
        input_mean: m.input_mean.into_iter().map(T::of).collect(),
        input_std: m.input_std.into_iter().map(T::of).collect(),
        ..reference
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(layers: &[(usize, usize, usize)]) -> usize {
        layers.iter().map(|&(o, i, k)| o * i * k * k + o).sum()
    }

    #[test]
    fn parameter_counts_match_formula() {
        let (c, k, w) = (7, 6, 16);
        let seg = build_network::<f64>(Arch::SegnetMini, c, k, w, 64, 0).unwrap();
        assert_eq!(seg.n_params(), count(&[(w, c, 3), (w, w, 3), (w, w, 3), (w, w, 3), (k, w, 1)]));
        let unet = build_network::<f64>(Arch::UnetMini, c, k, w, 64, 0).unwrap();
        assert_eq!(
            unet.n_params(),
            count(&[(w, c, 3), (w, w, 3), (w, w, 3), (w, 2 * w, 3), (w, 2 * w, 3), (k, w, 1)])
        );
        let psp = build_network::<f64>(Arch::PspMini, c, k, w, 64, 0).unwrap();
        assert_eq!(
            psp.n_params(),
            count(&[(w, c, 3), (w, w, 3), (4, w, 1), (4, w, 1), (4, w, 1), (k, w + 12, 1)])
        );
    }

    #[test]
    fn forward_shapes() {
        for arch in Arch::ALL {
            let net = build_network::<f64>(arch, 7, 5, 8, 64, 1).unwrap();
            let out = net.logits(&Tensor::filled([1, 7, 64, 64], 0.3)).unwrap();
            assert_eq!(out.dims(), [1, 5, 64, 64], "{arch}");
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn unet_first_decoder_takes_skip_plus_decoder_channels() {
        let net = build_network::<f64>(Arch::UnetMini, 7, 3, 16, 64, 0).unwrap();
        assert_eq!(net.layer("dec2").unwrap().in_ch, 16 + 16);
    }

    #[test]
    fn build_errors() {
        assert!(build_network::<f64>(Arch::PspMini, 7, 3, 6, 64, 0).is_err());
        assert!(build_network::<f64>(Arch::UnetMini, 7, 3, 16, 66, 0).is_err());
        assert!("resnet".parse::<Arch>().is_err());
        assert_eq!("psp_mini".parse::<Arch>().unwrap(), Arch::PspMini);
    }

    #[test]
    fn he_initialization_scale() {
        let net = build_network::<f64>(Arch::SegnetMini, 7, 3, 16, 64, 5).unwrap();
        let l = net.layer("enc2").unwrap();
        let w = &net.values[l.offset..l.offset + l.weight_len()];
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (16.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.15, "{var} vs {expect}");
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        let mut net = build_network::<f64>(Arch::PspMini, 7, 4, 8, 32, 3).unwrap();
        net.input_mean[2] = 5.5;
        save_weights(&net, &stem).unwrap();
        assert_eq!(std::fs::metadata(stem.with_extension("bin")).unwrap().len(), 8 * net.n_params() as u64);
        assert_eq!(load_weights::<f64>(&stem).unwrap(), net);
        let f32net = load_weights::<f32>(&stem).unwrap();
        assert_eq!(f32net.values.len(), net.values.len());
    }
}
