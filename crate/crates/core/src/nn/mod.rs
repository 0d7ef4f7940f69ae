//! A small strided CNN with two 1x1-conv classification heads and hand-written backprop.
//!
//! Parameters are stored as `f32`; activations, losses and gradients are accumulated in
//! `f64` so finite-difference checks stay meaningful.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, grad_check_against, GradCheckReport};
pub use loss::{bce_multilabel, bce_multilabel_grad, joint_loss, LabeledImage, LossBreakdown};
pub use optim::{OneCycleSchedule, Sgd};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Field2D, Result, SeededRng};

pub const KERNEL: usize = 3;
/// Negative-side slope of the encoder's leaky ReLU.
pub const LEAK: f64 = 0.1;
/// Inputs enter the first convolution as `(x - INPUT_CENTER) * INPUT_GAIN`.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyNetConfig {
    pub image_size: usize,
    pub encoder: Vec<ConvSpec>,
    pub n_classes: usize,
    /// Sub-classes per primary class (K); the sub-class head has `n_classes * K` outputs.
    pub n_subclasses: usize,
    pub init_seed: u64,
}

impl TinyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.encoder.len() > 4 {
            return Err(Error::InvalidArgument(format!(
                "encoder needs 1-4 conv layers, got {}",
                self.encoder.len()
            )));
        }
        if self
            .encoder
            .iter()
            .any(|l| l.channels == 0 || !(1..=2).contains(&l.stride))
        {
            return Err(Error::InvalidArgument(
                "conv layers need channels >= 1 and stride 1 or 2".into(),
            ));
        }
        if self.n_classes == 0 || self.n_subclasses == 0 {
            return Err(Error::InvalidArgument(
                "n_classes and K must be >= 1".into(),
            ));
        }
        if self.feature_dim() < self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "feature dim {} < {} classes",
                self.feature_dim(),
                self.n_classes
            )));
        }
        let mut size = self.image_size;
        for l in &self.encoder {
            if l.stride == 2 && !size.is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "stride-2 layer on odd size {size}"
                )));
            }
            size /= l.stride;
        }
        if size == 0 {
            return Err(Error::InvalidArgument(
                "encoder downsamples to nothing".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.channels)
    }

    /// Side of the square feature grid.
    pub fn feature_size(&self) -> usize {
        self.encoder
            .iter()
            .fold(self.image_size, |s, l| s / l.stride)
    }

    pub fn n_sub_outputs(&self) -> usize {
        self.n_classes * self.n_subclasses
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    HeadP,
    HeadS,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn group(&self) -> ParamGroup {
        if self.name.starts_with("head_p") {
            ParamGroup::HeadP
        } else if self.name.starts_with("head_s") {
            ParamGroup::HeadS
        } else {
            ParamGroup::Encoder
        }
    }
}

/// Encoder conv layers followed by primary head `head_p` (d -> C) and sub-class head
/// `head_s` (d -> C*K), both 1x1 convolutions read out by global average pooling.
#[derive(Clone, PartialEq)]
pub struct TinyNet {
    config: TinyNetConfig,
    params: Vec<Param>,
}

impl std::fmt::Debug for TinyNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let count: usize = self.params.iter().map(|p| p.data.len()).sum();
        f.debug_struct("TinyNet")
            .field("config", &self.config)
            .field("parameters", &count)
            .finish_non_exhaustive()
    }
}

/// Gradients aligned with [`TinyNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &TinyNet) -> Self {
        Self {
            tensors: net.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }

    /// Global L2 norm over all tensors.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Result of a forward pass on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `d x h x w`, channel-major.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub feature_size: usize,
    pub logits_p: Vec<f64>,
    pub logits_s: Vec<f64>,
}

impl ForwardOutput {
    /// Channel means of the feature stack.
    pub fn pooled_features(&self) -> Vec<f64> {
        let hw = self.feature_size * self.feature_size;
        self.features
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect()
    }
}

pub(crate) struct Activations {
    /// `layers[0]` is the input; `layers[l + 1]` the post-activation output of conv `l`.
    layers: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

impl Activations {
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        self.layers[1..]
            .iter()
            .flatten()
            .map(|&v| v > 0.0)
            .collect()
    }
}

impl TinyNet {
    pub fn new(config: TinyNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.init_seed);
        let mut params = Vec::new();
        let mut cin = 1;
        for (l, spec) in config.encoder.iter().enumerate() {
            let fan_in = (cin * KERNEL * KERNEL) as f64;
            let std = (2.0 / fan_in).sqrt();
            let n = spec.channels * cin * KERNEL * KERNEL;
            params.push(Param {
                name: format!("enc.{l}.weight"),
                shape: vec![spec.channels, cin, KERNEL, KERNEL],
                data: (0..n).map(|_| (std * rng.normal()) as f32).collect(),
            });
            params.push(Param {
                name: format!("enc.{l}.bias"),
                shape: vec![spec.channels],
                data: vec![0.0; spec.channels],
            });
            cin = spec.channels;
        }
        let d = config.feature_dim();
        let head_std = (1.0 / d as f64).sqrt();
        for (name, outputs) in [
            ("head_p", config.n_classes),
            ("head_s", config.n_sub_outputs()),
        ] {
            params.push(Param {
                name: format!("{name}.weight"),
                shape: vec![outputs, d],
                data: (0..outputs * d)
                    .map(|_| (head_std * rng.normal()) as f32)
                    .collect(),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                shape: vec![outputs],
                data: vec![0.0; outputs],
            });
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a network from named tensors, checking names and shapes against `config`.
    pub fn from_params(config: TinyNetConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(config.clone())?;
        if template.params.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} tensors, expected {}",
                params.len(),
                template.params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.shape != p.shape || p.data.len() != t.data.len() {
                return Err(Error::Dimension(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, t.name, t.shape
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {}", p.name)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TinyNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Short content hash used as checkpoint provenance.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn head_index(&self, head: ParamGroup) -> usize {
        let base = 2 * self.config.encoder.len();
        match head {
            ParamGroup::HeadP => base,
            ParamGroup::HeadS => base + 2,
            ParamGroup::Encoder => unreachable!(),
        }
    }

    pub fn forward(&self, image: &Field2D) -> Result<ForwardOutput> {
        let acts = self.encode(image)?;
        Ok(self.read_out(acts))
    }

    pub(crate) fn read_out(&self, mut acts: Activations) -> ForwardOutput {
        let features = acts.layers.pop().unwrap();
        let size = *acts.sizes.last().unwrap();
        let d = self.config.feature_dim();
        let mut out = ForwardOutput {
            features,
            feature_dim: d,
            feature_size: size,
            logits_p: Vec::new(),
            logits_s: Vec::new(),
        };
        let gap = out.pooled_features();
        out.logits_p = self.apply_head(ParamGroup::HeadP, &gap);
        out.logits_s = self.apply_head(ParamGroup::HeadS, &gap);
        out
    }

    /// `W x + b` for a head on a single d-vector (pooled or per-position features).
    fn apply_head(&self, head: ParamGroup, x: &[f64]) -> Vec<f64> {
        let i = self.head_index(head);
        let (w, b) = (&self.params[i], &self.params[i + 1]);
        let d = x.len();
        (0..w.shape[0])
            .map(|o| {
                let row = &w.data[o * d..(o + 1) * d];
                b.data[o] as f64
                    + row
                        .iter()
                        .zip(x)
                        .map(|(&wv, &xv)| wv as f64 * xv)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Pre-pooling response map of primary-head output `class` (bias included), `h x w`.
    pub fn class_response(&self, out: &ForwardOutput, class: usize) -> Result<Field2D> {
        if class >= self.config.n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} >= {}",
                self.config.n_classes
            )));
        }
        let i = self.head_index(ParamGroup::HeadP);
        let d = out.feature_dim;
        let hw = out.feature_size * out.feature_size;
        let w = &self.params[i].data[class * d..(class + 1) * d];
        let mut map = vec![self.params[i + 1].data[class] as f64; hw];
        for (ch, &wv) in w.iter().enumerate() {
            let plane = &out.features[ch * hw..(ch + 1) * hw];
            for (m, &f) in map.iter_mut().zip(plane) {
                *m += wv as f64 * f;
            }
        }
        Field2D::new(out.feature_size, out.feature_size, map)
    }

    pub(crate) fn encode(&self, image: &Field2D) -> Result<Activations> {
        let s = self.config.image_size;
        if image.shape() != (s, s) {
            return Err(Error::Dimension(format!(
                "image {:?} for a network expecting {s}x{s}",
                image.shape()
            )));
        }
        let mut layers = vec![image
            .values()
            .iter()
            .map(|v| (v - INPUT_CENTER) * INPUT_GAIN)
            .collect::<Vec<f64>>()];
        let mut sizes = vec![s];
        let mut cin = 1;
        for (l, spec) in self.config.encoder.iter().enumerate() {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            let size = *sizes.last().unwrap();
            let (mut out, osize) = conv3x3_forward(
                layers.last().unwrap(),
                cin,
                size,
                &w.data,
                &b.data,
                spec.channels,
                spec.stride,
            );
            for v in &mut out {
                if *v <= 0.0 {
                    *v *= LEAK;
                }
            }
            layers.push(out);
            sizes.push(osize);
            cin = spec.channels;
        }
        Ok(Activations { layers, sizes })
    }

    /// Forward + backward for one example given dL/dlogits. Returns the logits too.
    pub(crate) fn backward(
        &self,
        image: &Field2D,
        dloss: impl FnOnce(&ForwardOutput) -> Result<(Vec<f64>, Vec<f64>)>,
    ) -> Result<(ForwardOutput, Grads)> {
        let acts = self.encode(image)?;
        let layers = acts.layers.clone();
        let sizes = acts.sizes.clone();
        let out = self.read_out(acts);
        let (g_p, g_s) = dloss(&out)?;

        let mut grads = Grads::zeros_like(self);
        let d = out.feature_dim;
        let hw = out.feature_size * out.feature_size;
        let gap = out.pooled_features();
        let mut dgap = vec![0.0; d];
        for (head, g) in [(ParamGroup::HeadP, &g_p), (ParamGroup::HeadS, &g_s)] {
            let i = self.head_index(head);
            let w = &self.params[i].data;
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                for k in 0..d {
                    grads.tensors[i][o * d + k] += go * gap[k];
                    dgap[k] += go * w[o * d + k] as f64;
                }
                grads.tensors[i + 1][o] += go;
            }
        }

        // GAP spreads the pooled gradient uniformly over positions.
        let mut dout: Vec<f64> = dgap
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
            .collect();
        for l in (0..self.config.encoder.len()).rev() {
            let spec = self.config.encoder[l];
            let cin = if l == 0 {
                1
            } else {
                self.config.encoder[l - 1].channels
            };
            let out_act = &layers[l + 1];
            for (g, &a) in dout.iter_mut().zip(out_act) {
                if a <= 0.0 {
                    *g *= LEAK;
                }
            }
            let need_input_grad = l > 0;
            let (gw, gb, din) = conv3x3_backward(
                &layers[l],
                cin,
                sizes[l],
                &self.params[2 * l].data,
                &dout,
                spec.channels,
                spec.stride,
                sizes[l + 1],
                need_input_grad,
            );
            grads.tensors[2 * l] = gw;
            grads.tensors[2 * l + 1] = gb;
            dout = din;
        }
        Ok((out, grads))
    }
}

/// Valid output range of `ox` for kernel column `k`: `0 <= ox*stride + k - 1 < size`.
#[inline]
fn tap_range(k: usize, stride: usize, size: usize, osize: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    // ox*stride + k - 1 <= size - 1  <=>  ox <= (size - k) / stride
    let hi = if size >= k {
        ((size - k) / stride + 1).min(osize)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 3x3 convolution, zero padding 1. Input `cin x size x size`, output `cout x osize x osize`.
fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    size: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    stride: usize,
) -> (Vec<f64>, usize) {
    let osize = (size - 1) / stride + 1;
    let plane = osize * osize;
    let mut out = vec![0.0; cout * plane];
    let ranges: Vec<(usize, usize)> = (0..KERNEL)
        .map(|k| tap_range(k, stride, size, osize))
        .collect();
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co] as f64);
        for ci in 0..cin {
            let inp = &input[ci * size * size..(ci + 1) * size * size];
            for ky in 0..KERNEL {
                let (ylo, yhi) = ranges[ky];
                for kx in 0..KERNEL {
                    let wv = weight[((co * cin + ci) * KERNEL + ky) * KERNEL + kx] as f64;
                    let (xlo, xhi) = ranges[kx];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - 1;
                        let irow = &inp[iy * size..(iy + 1) * size];
                        let orow = &mut o[oy * osize..(oy + 1) * osize];
                        if stride == 1 {
                            let src = &irow[xlo + kx - 1..xhi + kx - 1];
                            for (dst, &x) in orow[xlo..xhi].iter_mut().zip(src) {
                                *dst += wv * x;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, osize)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    size: usize,
    weight: &[f32],
    dout: &[f64],
    cout: usize,
    stride: usize,
    osize: usize,
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = osize * osize;
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    let mut din = if need_input_grad {
        vec![0.0; cin * size * size]
    } else {
        Vec::new()
    };
    let ranges: Vec<(usize, usize)> = (0..KERNEL)
        .map(|k| tap_range(k, stride, size, osize))
        .collect();
    for co in 0..cout {
        let g = &dout[co * plane..(co + 1) * plane];
        gb[co] = g.iter().sum();
        for ci in 0..cin {
            let inp = &input[ci * size * size..(ci + 1) * size * size];
            for ky in 0..KERNEL {
                let (ylo, yhi) = ranges[ky];
                for kx in 0..KERNEL {
                    let widx = ((co * cin + ci) * KERNEL + ky) * KERNEL + kx;
                    let wv = weight[widx] as f64;
                    let (xlo, xhi) = ranges[kx];
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - 1;
                        let grow = &g[oy * osize..(oy + 1) * osize];
                        let irow = &inp[iy * size..(iy + 1) * size];
                        for ox in xlo..xhi {
                            acc += grow[ox] * irow[ox * stride + kx - 1];
                        }
                        if need_input_grad {
                            let drow = &mut din
                                [ci * size * size + iy * size..ci * size * size + (iy + 1) * size];
                            for ox in xlo..xhi {
                                drow[ox * stride + kx - 1] += wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (gw, gb, din)
}


#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub struct OwnedExample {
        pub image: Field2D,
        pub y_p: Vec<u8>,
        pub y_s: Option<Vec<u8>>,
    }

    impl OwnedExample {
        pub fn as_labeled(&self) -> LabeledImage<'_> {
            LabeledImage {
                image: &self.image,
                y_p: &self.y_p,
                y_s: self.y_s.as_deref(),
            }
        }
    }

    pub fn tiny_net(size: usize, layers: &[(usize, usize)], seed: u64) -> TinyNet {
        TinyNet::new(TinyNetConfig {
            image_size: size,
            encoder: layers
                .iter()
                .map(|&(channels, stride)| ConvSpec { channels, stride })
                .collect(),
            n_classes: 2,
            n_subclasses: 3,
            init_seed: seed,
        })
        .unwrap()
    }

    /// Random images with random primary labels and one-hot sub-class blocks.
    pub fn batch_fixture(
        size: usize,
        n: usize,
        cfg: &TinyNetConfig,
        seed: u64,
    ) -> Vec<OwnedExample> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| {
                let image = Field2D::from_fn(size, size, |_, _| rng.uniform());
                let y_p: Vec<u8> = (0..cfg.n_classes)
                    .map(|_| rng.bernoulli(0.5) as u8)
                    .collect();
                let mut y_s = vec![0u8; cfg.n_sub_outputs()];
                for (c, &y) in y_p.iter().enumerate() {
                    if y == 1 {
                        y_s[c * cfg.n_subclasses + rng.below(cfg.n_subclasses)] = 1;
                    }
                }
                OwnedExample {
                    image,
                    y_p,
                    y_s: Some(y_s),
                }
            })
            .collect()
    }
}
