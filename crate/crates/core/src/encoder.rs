//! Differentiable image encoders with ℓ2-normalized outputs.
//!
//! Two families: a single affine map (`linear`) and a fully connected network
//! (`mlp`) with `tanh` or `relu` hidden activations. Both end with
//! `e = z / ‖z‖`. Input gradients of text scores `t·e` are derived by hand:
//! the normalization Jacobian `(I − e eᵀ) / ‖z‖` followed by the chain rule
//! back through each affine layer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng::Lcg64;
use crate::tensor::{dot, encode_uapt, norm2, write_uapt, PixelImage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// `φ(a) − φ(b)` given an accurate `d = a − b`.
    fn difference(self, a: f64, b: f64, d: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let denom = a.cosh() * b.cosh();
                if denom.is_finite() {
                    d.sinh() / denom
                } else {
                    a.tanh() - b.tanh()
                }
            }
            Activation::Relu if a > 0.0 && b > 0.0 => d,
            Activation::Relu if a <= 0.0 && b <= 0.0 => 0.0,
            Activation::Relu => a.max(0.0) - b.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    /// The relu subgradient at 0 is 0.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture and seed. Together with the layer weights this is what an
/// encoder manifest persists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_shape: [usize; 3],
    pub embed_dim: usize,
    #[serde(default)]
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl EncoderConfig {
    /// The benchmark encoder: 3×32×32 → 256 → 128 → 64, tanh, seed 42.
    pub fn toy_mlp() -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_shape: [3, 32, 32],
            embed_dim: 64,
            layer_widths: vec![256, 128],
            activation: Activation::Tanh,
            seed: 42,
        }
    }

    pub fn linear(input_shape: [usize; 3], embed_dim: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Linear,
            input_shape,
            embed_dim,
            layer_widths: Vec::new(),
            activation: Activation::Tanh,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// `(fan_in, fan_out)` of each affine layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_len()];
        widths.extend(&self.layer_widths);
        widths.push(self.embed_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) || self.embed_dim == 0 {
            return invalid("encoder dimensions must be positive");
        }
        match self.kind {
            EncoderKind::Linear if !self.layer_widths.is_empty() => {
                invalid("linear encoders take no hidden layer widths")
            }
            EncoderKind::Mlp if self.layer_widths.is_empty() => {
                invalid("mlp encoders need at least one hidden layer width")
            }
            _ if self.layer_widths.contains(&0) => invalid("layer widths must be positive"),
            _ => Ok(()),
        }
    }
}

/// One affine layer; `weight` has shape `(fan_out, fan_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        let fan_in = self.fan_in();
        out.clear();
        out.extend(
            self.weight
                .data()
                .chunks_exact(fan_in)
                .zip(self.bias.data())
                .map(|(row, b)| dot(row, input) + b),
        );
    }

    /// `Wᵀ g`.
    fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        let fan_in = self.fan_in();
        let mut grad_in = vec![0.0; fan_in];
        for (row, &g) in self.weight.data().chunks_exact(fan_in).zip(grad_out) {
            if g == 0.0 {
                continue;
            }
            for (gi, w) in grad_in.iter_mut().zip(row) {
                *gi += g * w;
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<DenseLayer>,
}

/// Intermediate values kept for the backward pass.
struct Forward {
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Outputs of each hidden layer.
    post: Vec<Vec<f64>>,
    embedding: Vec<f64>,
    norm: f64,
}

/// Precomputed split of the input into frozen and active pixels.
#[derive(Debug, Clone)]
pub struct InputSplit {
    active: Vec<usize>,
    /// First-layer weights of the active columns, `(fan_out, n_active)`.
    columns: Vec<f64>,
    is_active: Vec<bool>,
}

impl InputSplit {
    pub fn active(&self) -> &[usize] {
        &self.active
    }
}

/// Result of [`Encoder::forward_split`]; feeds [`Encoder::backward_split`].
pub struct ForwardPass(Forward);

impl ForwardPass {
    pub fn embedding(&self) -> &[f64] {
        &self.0.embedding
    }
}

/// A text score `f = t·E(v)` and its gradient with respect to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradient {
    pub value: f64,
    pub gradient: Tensor,
}

impl Encoder {
    /// Glorot-uniform weights drawn row-major, layer by layer, from the seeded
    /// LCG; biases start at zero.
    pub fn random(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Lcg64::new(config.seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.uniform_symmetric(a)).collect();
                Ok(DenseLayer {
                    weight: Tensor::new(vec![fan_out, fan_in], w)?,
                    bias: Tensor::zeros(&[fan_out])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: EncoderConfig, layers: Vec<DenseLayer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return invalid(format!("expected {} layers, got {}", dims.len(), layers.len()));
        }
        for (i, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != [*fan_out, *fan_in] || layer.bias.shape() != [*fan_out] {
                return invalid(format!(
                    "layer {i}: expected weight ({fan_out}, {fan_in}) and bias ({fan_out}), got {:?} and {:?}",
                    layer.weight.shape(),
                    layer.bias.shape()
                ));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.input_shape {
            return invalid(format!(
                "image shape {:?} does not match encoder input {:?}",
                image.shape(),
                self.config.input_shape
            ));
        }
        Ok(())
    }

    fn forward(&self, input: &[f64]) -> Result<Forward> {
        let mut first = Vec::new();
        self.layers[0].forward(input, &mut first);
        self.forward_from_first(first)
    }

    /// Runs everything after the first affine layer.
    fn forward_from_first(&self, first: Vec<f64>) -> Result<Forward> {
        let hidden = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(hidden);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(hidden);
        let mut buf = first;
        for i in 0..=hidden {
            if i > 0 {
                let mut next = Vec::new();
                self.layers[i].forward(&post[i - 1], &mut next);
                buf = next;
            }
            if i < hidden {
                let out = buf.iter().map(|&p| self.config.activation.apply(p)).collect();
                pre.push(std::mem::take(&mut buf));
                post.push(out);
            }
        }
        let norm = norm2(&buf);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateEncoding);
        }
        let embedding = buf.iter().map(|z| z / norm).collect();
        Ok(Forward { pre, post, embedding, norm })
    }

    /// Gradient of `direction · e` with respect to the input.
    fn backward(&self, fwd: &Forward, direction: &[f64]) -> Vec<f64> {
        self.layers[0].backward(&self.backward_to_first(fwd, direction))
    }

    /// Gradient of `direction · e` with respect to the first layer's output.
    fn backward_to_first(&self, fwd: &Forward, direction: &[f64]) -> Vec<f64> {
        let e = &fwd.embedding;
        let proj = dot(e, direction);
        let mut grad: Vec<f64> = direction
            .iter()
            .zip(e)
            .map(|(d, ei)| (d - ei * proj) / fwd.norm)
            .collect();
        for i in (1..self.layers.len()).rev() {
            let mut g = self.layers[i].backward(&grad);
            let act = self.config.activation;
            for ((gi, p), o) in g.iter_mut().zip(&fwd.pre[i - 1]).zip(&fwd.post[i - 1]) {
                *gi *= act.derivative(*p, *o);
            }
            grad = g;
        }
        grad
    }

    /// `f(x + h eᵢ) − f(x − h eᵢ)` for `f = text · e`, evaluated without
    /// subtracting two nearly equal scores: the difference is carried through
    /// every layer alongside the two perturbed activations, so the central
    /// difference is not swamped by rounding when `f′` is small.
    fn score_difference(&self, input: &[f64], text: &[f64], index: usize, h: f64) -> Result<f64> {
        let first = &self.layers[0];
        let fan_in = first.fan_in();
        let mut mid = Vec::new();
        first.forward(input, &mut mid);
        let column: Vec<f64> = first.weight.data().iter().skip(index).step_by(fan_in).copied().collect();
        let mut plus: Vec<f64> = mid.iter().zip(&column).map(|(m, w)| m + h * w).collect();
        let mut minus: Vec<f64> = mid.iter().zip(&column).map(|(m, w)| m - h * w).collect();
        let mut diff: Vec<f64> = column.iter().map(|w| 2.0 * h * w).collect();
        let act = self.config.activation;
        for layer in &self.layers[1..] {
            let d: Vec<f64> = plus
                .iter()
                .zip(&minus)
                .zip(&diff)
                .map(|((&a, &b), &d)| act.difference(a, b, d))
                .collect();
            let p: Vec<f64> = plus.iter().map(|&x| act.apply(x)).collect();
            let m: Vec<f64> = minus.iter().map(|&x| act.apply(x)).collect();
            layer.forward(&p, &mut plus);
            layer.forward(&m, &mut minus);
            diff = layer.weight.data().chunks_exact(layer.fan_in()).map(|row| dot(row, &d)).collect();
        }
        let (np, nm) = (norm2(&plus), norm2(&minus));
        if np == 0.0 || nm == 0.0 {
            return Err(Error::DegenerateEncoding);
        }
        // 1/‖z₊‖ − 1/‖z₋‖ = (‖z₋‖² − ‖z₊‖²) / (‖z₊‖‖z₋‖(‖z₊‖ + ‖z₋‖))
        let sq_gap: f64 = -diff.iter().zip(plus.iter().zip(&minus)).map(|(d, (p, m))| d * (p + m)).sum::<f64>();
        let inv_gap = sq_gap / (np * nm * (np + nm));
        Ok(text
            .iter()
            .zip(diff.iter().zip(&minus))
            .map(|(t, (d, m))| t * (d / np + m * inv_gap))
            .sum())
    }

    /// Partitions the input into frozen pixels and the `active` ones that will
    /// vary, gathering the first-layer weight columns of the active pixels.
    pub fn split_input(&self, active: Vec<usize>) -> Result<InputSplit> {
        let n = self.config.input_len();
        if let Some(&bad) = active.iter().find(|&&a| a >= n) {
            return invalid(format!("active index {bad} out of range for {n} inputs"));
        }
        let first = &self.layers[0];
        let fan_in = first.fan_in();
        let mut columns = Vec::with_capacity(first.fan_out() * active.len());
        for row in first.weight.data().chunks_exact(fan_in) {
            columns.extend(active.iter().map(|&a| row[a]));
        }
        let mut is_active = vec![false; n];
        active.iter().for_each(|&a| is_active[a] = true);
        Ok(InputSplit { active, columns, is_active })
    }

    /// First-layer output with every active pixel set to zero (bias included).
    pub fn frozen_preactivation(&self, split: &InputSplit, image: &Tensor) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let frozen: Vec<f64> = image
            .data()
            .iter()
            .zip(&split.is_active)
            .map(|(&v, &a)| if a { 0.0 } else { v })
            .collect();
        let mut out = Vec::new();
        self.layers[0].forward(&frozen, &mut out);
        Ok(out)
    }

    /// Forward pass for an input whose frozen part is summarized by `frozen`
    /// and whose active pixels take `values`.
    pub fn forward_split(&self, split: &InputSplit, frozen: &[f64], values: &[f64]) -> Result<ForwardPass> {
        let n_active = split.active.len();
        if values.len() != n_active || frozen.len() != self.layers[0].fan_out() {
            return invalid("split forward: argument lengths do not match the split");
        }
        let first: Vec<f64> = if n_active == 0 {
            frozen.to_vec()
        } else {
            split
                .columns
                .chunks_exact(n_active)
                .zip(frozen)
                .map(|(cols, f)| f + dot(cols, values))
                .collect()
        };
        Ok(ForwardPass(self.forward_from_first(first)?))
    }

    /// Gradient of `direction · e` with respect to the active pixels only.
    pub fn backward_split(&self, split: &InputSplit, pass: &ForwardPass, direction: &[f64]) -> Vec<f64> {
        let n_active = split.active.len();
        let g1 = self.backward_to_first(&pass.0, direction);
        let mut grad = vec![0.0; n_active];
        if n_active == 0 {
            return grad;
        }
        for (cols, &g) in split.columns.chunks_exact(n_active).zip(&g1) {
            if g == 0.0 {
                continue;
            }
            for (gi, w) in grad.iter_mut().zip(cols) {
                *gi += g * w;
            }
        }
        grad
    }

    /// Unit-norm embedding of any input of the right shape. Pixel values are
    /// not range-checked here: attack iterates may leave `[0, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let fwd = self.forward(image.data())?;
        Ok(Tensor::from_parts_unchecked(vec![self.embed_dim()], fwd.embedding))
    }

    pub fn encode_image(&self, image: &PixelImage) -> Result<Tensor> {
        self.encode(image.tensor())
    }

    /// Embedding plus the input gradient of `direction · e` in one pass.
    pub fn embed_with_gradient(&self, image: &Tensor, direction: &[f64]) -> Result<(Tensor, Tensor)> {
        self.check_input(image)?;
        if direction.len() != self.embed_dim() {
            return invalid(format!(
                "direction has {} values, embedding has {}",
                direction.len(),
                self.embed_dim()
            ));
        }
        let fwd = self.forward(image.data())?;
        let grad = self.backward(&fwd, direction);
        Ok((
            Tensor::from_parts_unchecked(vec![self.embed_dim()], fwd.embedding),
            Tensor::from_parts_unchecked(image.shape().to_vec(), grad),
        ))
    }

    /// `f = t · E(v)` and `∇_v f`.
    pub fn score_with_gradient(&self, image: &Tensor, text_embedding: &Tensor) -> Result<ScoreGradient> {
        if text_embedding.shape() != [self.embed_dim()] {
            return invalid(format!(
                "text embedding shape {:?}, expected ({})",
                text_embedding.shape(),
                self.embed_dim()
            ));
        }
        let n = norm2(text_embedding.data());
        if (n - 1.0).abs() > 1e-6 {
            return invalid(format!("text embedding must be unit norm, got norm {n}"));
        }
        let (e, gradient) = self.embed_with_gradient(image, text_embedding.data())?;
        Ok(ScoreGradient {
            value: dot(text_embedding.data(), e.data()),
            gradient,
        })
    }

    /// SHA-256 over the architecture JSON and every weight tensor's UAPT bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for layer in &self.layers {
            h.update(encode_uapt(&layer.weight).expect("weights encode"));
            h.update(encode_uapt(&layer.bias).expect("bias encodes"));
        }
        hex::encode(h.finalize())
    }

    /// Writes `encoder.json` plus one UAPT file per weight and bias tensor into
    /// `dir`, returning the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let weight = format!("layer{i}_weight.uapt");
            let bias = format!("layer{i}_bias.uapt");
            write_uapt(&dir.join(&weight), &layer.weight)?;
            write_uapt(&dir.join(&bias), &layer.bias)?;
            entries.push(LayerFiles {
                weight_sha256: sha256_hex(&encode_uapt(&layer.weight)?),
                bias_sha256: sha256_hex(&encode_uapt(&layer.bias)?),
                weight,
                bias,
            });
        }
        let manifest = EncoderManifest {
            config: self.config.clone(),
            layers: entries,
            content_hash: self.content_hash(),
        };
        let path = dir.join(ENCODER_MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Loads a manifest written by [`Encoder::save`]. `path` may be the
    /// manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(ENCODER_MANIFEST) } else { path.to_path_buf() };
        let dir = path.parent().unwrap_or(Path::new("."));
        let manifest: EncoderManifest = serde_json::from_slice(&fs::read(&path)?)?;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for files in &manifest.layers {
            let weight = read_checked(&dir.join(&files.weight), &files.weight_sha256)?;
            let bias = read_checked(&dir.join(&files.bias), &files.bias_sha256)?;
            layers.push(DenseLayer { weight, bias });
        }
        let encoder = Self::from_layers(manifest.config, layers)?;
        if encoder.content_hash() != manifest.content_hash {
            return Err(Error::Integrity("encoder content hash does not match manifest".into()));
        }
        Ok(encoder)
    }
}

pub const ENCODER_MANIFEST: &str = "encoder.json";

#[derive(Debug, Serialize, Deserialize)]
struct LayerFiles {
    weight: String,
    bias: String,
    weight_sha256: String,
    bias_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderManifest {
    #[serde(flatten)]
    config: EncoderConfig,
    layers: Vec<LayerFiles>,
    content_hash: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn read_checked(path: &Path, expected_sha256: &str) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if sha256_hex(&bytes) != expected_sha256 {
        return Err(Error::Integrity(format!("hash mismatch for {}", path.display())));
    }
    crate::tensor::decode_uapt(&bytes)
}

/// Largest relative error between the analytic gradient and central finite
/// differences over `n_probes` random pixel coordinates.
pub fn gradcheck(
    encoder: &Encoder,
    image: &Tensor,
    text_embedding: &Tensor,
    n_probes: usize,
    step: f64,
    rng: &mut Lcg64,
) -> Result<f64> {
    if !(step > 0.0) {
        return invalid(format!("step must be positive, got {step}"));
    }
    let analytic = encoder.score_with_gradient(image, text_embedding)?;
    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let i = rng.below(image.len());
        let numeric = encoder.score_difference(image.data(), text_embedding.data(), i, step)? / (2.0 * step);
        let a = analytic.gradient.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-12));
    }
    Ok(worst)
}

/// [`gradcheck`] over `trials` random (image, text) pairs drawn from `seed`:
/// pixels uniform in `[0, 1]`, texts normalized Gaussian vectors. Returns the
/// largest error seen.
pub fn gradcheck_random(encoder: &Encoder, trials: usize, n_probes: usize, step: f64, seed: u64) -> Result<f64> {
    let mut rng = Lcg64::new(seed);
    let shape = encoder.input_shape();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let pixels = (0..encoder.config.input_len()).map(|_| rng.next_f64()).collect();
        let image = Tensor::new(shape.to_vec(), pixels)?;
        let mut text: Vec<f64> = (0..encoder.embed_dim()).map(|_| rng.gaussian()).collect();
        let n = norm2(&text);
        text.iter_mut().for_each(|x| *x /= n);
        let text = Tensor::from_vec(text)?;
        worst = worst.max(gradcheck(encoder, &image, &text, n_probes, step, &mut rng)?);
    }
    Ok(worst)
}
