//! Universal perturbation synthesis against image–text retrieval.
//!
//! Three drivers share two inner loops:
//!
//! * the **image loop** (TRA) pushes one image's embedding across the text
//!   boundaries built by its `k` most similar non-matching texts, stepping
//!   from the strongest matching text `y_max` towards the weakest target
//!   `y'_min`;
//! * the **text loop** (IRA) moves the patched candidate images `{y} ∪ Y'` of
//!   one text so that its matching image `y` drops below the weakest target
//!   image `y'_min`, with one shared `r` applied to every candidate.
//!
//! Each step is `r += (∇f_{y'} − ∇f_y)(f_y − f_{y'}) / ‖∇f_{y'} − ∇f_y‖²`, and the
//! loop runs until the indicator at `x + (1 + η) r` reports that no match
//! survives in the top `k`, or `max_inner_iters` is reached. The accumulated
//! `r` is committed as `δ ← clamp(δ + (1 + η) r)` in patch mode and
//! `δ ← P(δ + (1 + η) r, ε)` in global mode.
//!
//! TIRA alternates both loops over batches of images and their matching
//! texts, sharing one `r` per loop within a batch.

use std::cell::OnceCell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::DEGENERATE_NORM;
use crate::datagen::Dataset;
use crate::encoder::{read_checked, sha256_hex, Encoder, ForwardPass, InputSplit};
use crate::error::{invalid, Error, Result};
use crate::retrieval::{
    indicator_from_scores, nonmatching_topk_from_scores, recall_at_k, EmbeddingIndex,
};
use crate::rng::Lcg64;
use crate::tensor::{
    apply_patch, clamp_unit, dot, encode_uapt, norm2, project_l2, project_linf, Mask, PixelImage, Tensor,
};

/// `2000 / 255`: the ℓ2 budget rescaled to `[0, 1]` pixels.
pub const DEFAULT_L2_EPSILON: f64 = 2000.0 / 255.0;
/// `10 / 255`: the ℓ∞ budget rescaled to `[0, 1]` pixels.
pub const DEFAULT_LINF_EPSILON: f64 = 10.0 / 255.0;
/// Patch area as a fraction of the image.
pub const DEFAULT_PATCH_FRACTION: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Tra,
    Ira,
    Tira,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Patch,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    Patch { mask: Mask },
    Global { norm: Norm, epsilon: f64 },
}

impl Constraint {
    pub fn mode(&self) -> Mode {
        match self {
            Constraint::Patch { .. } => Mode::Patch,
            Constraint::Global { .. } => Mode::Global,
        }
    }

    /// Bottom-right square covering 3% of the image.
    pub fn default_patch(image_shape: [usize; 3]) -> Result<Self> {
        let side = Mask::side_for_area(image_shape[1], image_shape[2], DEFAULT_PATCH_FRACTION);
        Ok(Constraint::Patch { mask: Mask::bottom_right_square(&image_shape, side, (0, 0))? })
    }

    pub fn default_global(norm: Norm) -> Self {
        let epsilon = match norm {
            Norm::L2 => DEFAULT_L2_EPSILON,
            Norm::Linf => DEFAULT_LINF_EPSILON,
        };
        Constraint::Global { norm, epsilon }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Number of boundaries to cross, and the evaluation depth of the indicator.
    pub k: usize,
    /// Overshoot past each boundary.
    pub eta: f64,
    pub epochs: usize,
    pub max_inner_iters: usize,
    /// Images per TIRA batch.
    pub batch_size: usize,
    pub constraint: Constraint,
    pub seed: u64,
    /// Visit samples in a seeded random order instead of index order.
    pub shuffle: bool,
    /// Number of leading images (and their texts) scored after every epoch.
    pub probe_images: usize,
}

impl AttackConfig {
    pub fn new(constraint: Constraint) -> Self {
        Self {
            k: 10,
            eta: 0.02,
            epochs: 10,
            max_inner_iters: 50,
            batch_size: 16,
            constraint,
            seed: 7,
            shuffle: false,
            probe_images: 64,
        }
    }

    fn validate(&self, dataset: &Dataset) -> Result<()> {
        if dataset.n_images() == 0 || dataset.n_texts() == 0 {
            return invalid("dataset is empty");
        }
        if self.k == 0 {
            return invalid("k must be positive");
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return invalid(format!("eta must be positive, got {}", self.eta));
        }
        if self.max_inner_iters == 0 || self.batch_size == 0 {
            return invalid("max_inner_iters and batch_size must be positive");
        }
        let shape = dataset.params.image_shape;
        match &self.constraint {
            Constraint::Patch { mask } if mask.shape() != shape => invalid(format!(
                "mask shape {:?} does not match images {shape:?}",
                mask.shape()
            )),
            Constraint::Global { epsilon, .. } if !(*epsilon > 0.0) || !epsilon.is_finite() => {
                invalid(format!("epsilon must be positive, got {epsilon}"))
            }
            _ => Ok(()),
        }
    }

    /// Serializable summary; masks are represented by their hash.
    pub fn echo(&self, strategy: Strategy) -> ConfigEcho {
        let (mode, norm, epsilon, mask_sha256, mask_active) = match &self.constraint {
            Constraint::Patch { mask } => {
                let bytes = encode_uapt(mask.tensor()).expect("mask encodes");
                (
                    Mode::Patch,
                    None,
                    None,
                    Some(sha256_hex(&bytes)),
                    Some(mask.active_indices().len()),
                )
            }
            Constraint::Global { norm, epsilon } => (Mode::Global, Some(*norm), Some(*epsilon), None, None),
        };
        ConfigEcho {
            strategy,
            mode,
            k: self.k,
            eta: self.eta,
            epochs: self.epochs,
            max_inner_iters: self.max_inner_iters,
            batch_size: self.batch_size,
            norm,
            epsilon,
            mask_sha256,
            mask_active,
            seed: self.seed,
            shuffle: self.shuffle,
            probe_images: self.probe_images,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub strategy: Strategy,
    pub mode: Mode,
    pub k: usize,
    pub eta: f64,
    pub epochs: usize,
    pub max_inner_iters: usize,
    pub batch_size: usize,
    pub norm: Option<Norm>,
    pub epsilon: Option<f64>,
    pub mask_sha256: Option<String>,
    pub mask_active: Option<usize>,
    pub seed: u64,
    pub shuffle: bool,
    pub probe_images: usize,
}

impl ConfigEcho {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("echo serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: ConfigEcho,
    pub config_hash: String,
    pub encoder_hash: String,
    pub dataset_hash: String,
}

/// A universal perturbation with its constraint regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub constraint: Constraint,
    pub provenance: Provenance,
}

impl Perturbation {
    /// Evaluation-time application: patch replacement, or `clamp(v + δ)` for
    /// global noise. Clamping is applied to the image, never folded into `δ`.
    pub fn apply(&self, image: &PixelImage) -> Result<PixelImage> {
        match &self.constraint {
            Constraint::Patch { mask } => apply_patch(image, &self.delta, mask),
            Constraint::Global { .. } => PixelImage::new(clamp_unit(&image.tensor().add(&self.delta)?)),
        }
    }

    /// SHA-256 of the UAPT encoding of `δ`.
    pub fn delta_hash(&self) -> String {
        sha256_hex(&encode_uapt(&self.delta).expect("delta encodes"))
    }

    /// Writes `delta.uapt`, `mask.uapt` (patch mode) and the JSON sidecar
    /// into `dir`; returns the sidecar path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let put = |name: &str, t: &Tensor| -> Result<FileEntry> {
            let bytes = encode_uapt(t)?;
            fs::write(dir.join(name), &bytes)?;
            Ok(FileEntry { path: name.to_string(), sha256: sha256_hex(&bytes) })
        };
        let delta = put("delta.uapt", &self.delta)?;
        let (mask, norm, epsilon) = match &self.constraint {
            Constraint::Patch { mask } => (Some(put("mask.uapt", mask.tensor())?), None, None),
            Constraint::Global { norm, epsilon } => (None, Some(*norm), Some(*epsilon)),
        };
        let sidecar = Sidecar {
            mode: self.constraint.mode(),
            delta,
            mask,
            norm,
            epsilon,
            provenance: self.provenance.clone(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = dir.join(PERTURBATION_SIDECAR);
        fs::write(&path, serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(path)
    }

    /// Loads a sidecar (or its directory), verifying file hashes and that `δ`
    /// satisfies its constraint.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(PERTURBATION_SIDECAR) } else { path.to_path_buf() };
        let dir = path.parent().unwrap_or(Path::new("."));
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(&path)?)?;
        let delta = read_checked(&dir.join(&sidecar.delta.path), &sidecar.delta.sha256)?;
        let constraint = match (sidecar.mode, &sidecar.mask, sidecar.norm, sidecar.epsilon) {
            (Mode::Patch, Some(entry), _, _) => {
                let mask = Mask::new(read_checked(&dir.join(&entry.path), &entry.sha256)?)?;
                if mask.shape() != delta.shape() {
                    return Err(Error::Integrity("mask and delta shapes differ".into()));
                }
                if delta.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Integrity("patch values outside [0, 1]".into()));
                }
                Constraint::Patch { mask }
            }
            (Mode::Global, None, Some(norm), Some(epsilon)) => {
                let size = match norm {
                    Norm::L2 => norm2(delta.data()),
                    Norm::Linf => delta.max_abs(),
                };
                if size > epsilon + 1e-9 {
                    return Err(Error::Integrity(format!("{norm:?} norm {size} exceeds epsilon {epsilon}")));
                }
                Constraint::Global { norm, epsilon }
            }
            _ => return Err(Error::Integrity("sidecar fields do not match its mode".into())),
        };
        if delta.shape().len() != 3 {
            return Err(Error::Integrity(format!("delta has shape {:?}", delta.shape())));
        }
        Ok(Self { delta, constraint, provenance: sidecar.provenance })
    }
}

pub const PERTURBATION_SIDECAR: &str = "perturbation.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    mode: Mode,
    delta: FileEntry,
    mask: Option<FileEntry>,
    norm: Option<Norm>,
    epsilon: Option<f64>,
    provenance: Provenance,
    library_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Outcome of one inner loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub epoch: usize,
    pub modality: Modality,
    pub index: usize,
    pub iterations: usize,
    pub converged: bool,
    /// The loop stopped on a vanishing gradient difference.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub epoch: usize,
    pub l2_norm: f64,
    pub linf_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub k: usize,
    pub probe_images: usize,
    pub probe_texts: usize,
    pub clean_tr: f64,
    pub clean_ir: f64,
    pub adv_tr: f64,
    pub adv_ir: f64,
    /// Fraction of this epoch's inner loops that converged.
    pub converged_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub samples: Vec<SampleRecord>,
    pub commits: Vec<CommitRecord>,
    pub epochs: Vec<EpochMetrics>,
}

impl AttackTrace {
    pub fn converged_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.converged).count() as f64 / self.samples.len() as f64
    }
}

/// One inner-loop step, recorded when step logging is enabled.
#[derive(Debug, Clone)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct StepLog {
    pub modality: Modality,
    pub index: usize,
    /// `r` before the step, over the active pixels.
    pub r_before: Vec<f64>,
    pub increment: Vec<f64>,
    /// The (boundary-side, matching-side) pair the step targeted.
    pub target: usize,
    pub matched: usize,
}

struct Engine<'a> {
    encoder: &'a Encoder,
    dataset: &'a Dataset,
    cfg: &'a AttackConfig,
    split: InputSplit,
    frozen: Vec<OnceCell<Vec<f64>>>,
    clean_embeddings: EmbeddingIndex,
    /// `Y'` per image: the k most similar non-matching texts.
    tra_targets: Vec<OnceCell<Vec<usize>>>,
    /// `Y'` per text: the k most similar non-matching images.
    ira_targets: Vec<OnceCell<Vec<usize>>>,
    delta: Vec<f64>,
    /// Embeddings at `r = 0` under the current `δ`; cleared on every commit.
    base_cache: Vec<Option<Vec<f64>>>,
    epoch: usize,
    trace: AttackTrace,
    step_log: Option<Vec<StepLog>>,
}

impl<'a> Engine<'a> {
    fn new(encoder: &'a Encoder, dataset: &'a Dataset, cfg: &'a AttackConfig, delta: &Tensor) -> Result<Self> {
        cfg.validate(dataset)?;
        let shape = dataset.params.image_shape;
        if encoder.input_shape() != shape || encoder.embed_dim() != dataset.params.embed_dim {
            return invalid("encoder does not match the dataset's image shape or embedding size");
        }
        if delta.shape() != shape {
            return invalid(format!("delta shape {:?} does not match images {shape:?}", delta.shape()));
        }
        let active = match &cfg.constraint {
            Constraint::Patch { mask } => mask.active_indices().to_vec(),
            Constraint::Global { .. } => (0..delta.len()).collect(),
        };
        let n_images = dataset.n_images();
        Ok(Self {
            encoder,
            dataset,
            cfg,
            split: encoder.split_input(active)?,
            frozen: (0..n_images).map(|_| OnceCell::new()).collect(),
            clean_embeddings: dataset.embed_images(encoder)?,
            tra_targets: (0..n_images).map(|_| OnceCell::new()).collect(),
            ira_targets: (0..dataset.n_texts()).map(|_| OnceCell::new()).collect(),
            delta: delta.data().to_vec(),
            base_cache: vec![None; n_images],
            epoch: 0,
            trace: AttackTrace::default(),
            step_log: None,
        })
    }

    fn n_active(&self) -> usize {
        self.split.active().len()
    }

    fn frozen(&self, i: usize) -> &[f64] {
        self.frozen[i].get_or_init(|| {
            self.encoder
                .frozen_preactivation(&self.split, self.dataset.images[i].tensor())
                .expect("image shape was validated")
        })
    }

    fn tra_targets(&self, i: usize) -> Result<&[usize]> {
        if let Some(t) = self.tra_targets[i].get() {
            return Ok(t);
        }
        let matches = &self.dataset.annotations.image_to_texts[i];
        let available = self.dataset.n_texts() - matches.len();
        if self.cfg.k > available {
            return invalid(format!("k = {} exceeds the {available} non-matching texts", self.cfg.k));
        }
        let scores = self.dataset.texts.similarities(self.clean_embeddings.row(i));
        Ok(self.tra_targets[i].get_or_init(|| nonmatching_topk_from_scores(&scores, matches, self.cfg.k)))
    }

    fn ira_targets(&self, t: usize) -> Result<&[usize]> {
        if let Some(v) = self.ira_targets[t].get() {
            return Ok(v);
        }
        if self.cfg.k > self.dataset.n_images() - 1 {
            return invalid(format!(
                "k = {} exceeds the {} non-matching images",
                self.cfg.k,
                self.dataset.n_images() - 1
            ));
        }
        let y = self.dataset.annotations.text_to_image[t];
        let scores = self.clean_embeddings.similarities(self.dataset.texts.row(t));
        Ok(self.ira_targets[t].get_or_init(|| nonmatching_topk_from_scores(&scores, &[y], self.cfg.k)))
    }

    /// Active-pixel values of image `i` under the current `δ`, before `r`.
    fn base_values(&self, i: usize) -> Vec<f64> {
        match self.cfg.constraint {
            Constraint::Patch { .. } => self.split.active().iter().map(|&a| self.delta[a]).collect(),
            Constraint::Global { .. } => {
                let clean = self.dataset.images[i].tensor().data();
                clean.iter().zip(&self.delta).map(|(v, d)| v + d).collect()
            }
        }
    }

    fn pass_at(&self, i: usize, r: &[f64], scale: f64) -> Result<ForwardPass> {
        let mut values = self.base_values(i);
        if scale != 0.0 {
            for (v, ri) in values.iter_mut().zip(r) {
                *v += scale * ri;
            }
        }
        self.encoder.forward_split(&self.split, self.frozen(i), &values)
    }

    fn embedding_at(&mut self, i: usize, r: &[f64], scale: f64) -> Result<Vec<f64>> {
        if is_zero(r) {
            if let Some(e) = &self.base_cache[i] {
                return Ok(e.clone());
            }
            let e = self.pass_at(i, r, 0.0)?.embedding().to_vec();
            self.base_cache[i] = Some(e.clone());
            return Ok(e);
        }
        Ok(self.pass_at(i, r, scale)?.embedding().to_vec())
    }

    fn apply_step(&mut self, r: &mut [f64], grad: &[f64], gap: f64, log: Option<(Modality, usize, usize, usize)>) -> bool {
        let n2: f64 = grad.iter().map(|g| g * g).sum();
        if n2.sqrt() < DEGENERATE_NORM {
            return false;
        }
        let scale = gap / n2;
        let increment: Vec<f64> = grad.iter().map(|g| g * scale).collect();
        if let (Some(steps), Some((modality, index, target, matched))) = (self.step_log.as_mut(), log) {
            steps.push(StepLog {
                modality,
                index,
                r_before: r.to_vec(),
                increment: increment.clone(),
                target,
                matched,
            });
        }
        for (ri, inc) in r.iter_mut().zip(&increment) {
            *ri += inc;
        }
        true
    }

    /// Image loop for image `i`, continuing from `r`.
    fn refine_image(&mut self, i: usize, r: &mut [f64]) -> Result<SampleRecord> {
        let dataset = self.dataset;
        let matches = &dataset.annotations.image_to_texts[i];
        let targets = self.tra_targets(i)?.to_vec();
        let over = 1.0 + self.cfg.eta;
        let mut record = self.record(Modality::Image, i);
        loop {
            let e = self.embedding_at(i, r, over)?;
            let scores = dataset.texts.similarities(&e);
            if !indicator_from_scores(&scores, matches, self.cfg.k) {
                record.converged = true;
                break;
            }
            if record.iterations == self.cfg.max_inner_iters {
                break;
            }
            let pass = self.pass_at(i, r, 1.0)?;
            let f = |t: usize| dot(dataset.texts.row(t), pass.embedding());
            let y_max = argbest(matches, &f, |a, b| a > b);
            let y_min = argbest(&targets, &f, |a, b| a < b);
            let direction: Vec<f64> = dataset
                .texts
                .row(y_min)
                .iter()
                .zip(dataset.texts.row(y_max))
                .map(|(a, b)| a - b)
                .collect();
            let grad = self.encoder.backward_split(&self.split, &pass, &direction);
            let gap = f(y_max) - f(y_min);
            if !self.apply_step(r, &grad, gap, Some((Modality::Image, i, y_min, y_max))) {
                record.degenerate = true;
                break;
            }
            record.iterations += 1;
        }
        Ok(record)
    }

    /// Text loop for text `t`, continuing from `r`.
    fn refine_text(&mut self, t: usize, r: &mut [f64]) -> Result<SampleRecord> {
        let dataset = self.dataset;
        let y = dataset.annotations.text_to_image[t];
        let targets = self.ira_targets(t)?.to_vec();
        let mut candidates = targets.clone();
        candidates.push(y);
        candidates.sort_unstable();
        let y_pos = candidates.iter().position(|&c| c == y).expect("y is a candidate");
        let text = dataset.texts.row(t);
        let over = 1.0 + self.cfg.eta;
        let mut record = self.record(Modality::Text, t);
        loop {
            let scores = candidates
                .iter()
                .map(|&c| Ok(dot(&self.embedding_at(c, r, over)?, text)))
                .collect::<Result<Vec<f64>>>()?;
            if !indicator_from_scores(&scores, &[y_pos], self.cfg.k) {
                record.converged = true;
                break;
            }
            if record.iterations == self.cfg.max_inner_iters {
                break;
            }
            let mut passes = Vec::with_capacity(candidates.len());
            for &c in &candidates {
                passes.push(self.pass_at(c, r, 1.0)?);
            }
            let f = |c: usize| {
                let p = candidates.iter().position(|&x| x == c).expect("candidate");
                dot(passes[p].embedding(), text)
            };
            let y_min = argbest(&targets, &f, |a, b| a < b);
            let pass_of = |c: usize| &passes[candidates.iter().position(|&x| x == c).expect("candidate")];
            let g_target = self.encoder.backward_split(&self.split, pass_of(y_min), text);
            let g_match = self.encoder.backward_split(&self.split, pass_of(y), text);
            let grad: Vec<f64> = g_target.iter().zip(&g_match).map(|(a, b)| a - b).collect();
            let gap = f(y) - f(y_min);
            if !self.apply_step(r, &grad, gap, Some((Modality::Text, t, y_min, y))) {
                record.degenerate = true;
                break;
            }
            record.iterations += 1;
        }
        Ok(record)
    }

    fn record(&self, modality: Modality, index: usize) -> SampleRecord {
        SampleRecord {
            epoch: self.epoch,
            modality,
            index,
            iterations: 0,
            converged: false,
            degenerate: false,
        }
    }

    /// `δ ← clamp(δ + (1+η) r)` or `δ ← P(δ + (1+η) r, ε)`.
    fn commit(&mut self, r: &[f64]) -> Result<()> {
        let over = 1.0 + self.cfg.eta;
        if !is_zero(r) {
            match self.cfg.constraint {
                Constraint::Patch { .. } => {
                    for (&a, ri) in self.split.active().iter().zip(r) {
                        self.delta[a] = (self.delta[a] + over * ri).clamp(0.0, 1.0);
                    }
                }
                Constraint::Global { norm, epsilon } => {
                    let moved: Vec<f64> = self.delta.iter().zip(r).map(|(d, ri)| d + over * ri).collect();
                    let moved = Tensor::new(self.dataset.params.image_shape.to_vec(), moved)?;
                    let projected = match norm {
                        Norm::L2 => project_l2(&moved, epsilon)?,
                        Norm::Linf => project_linf(&moved, epsilon)?,
                    };
                    self.delta = projected.into_data();
                }
            }
            self.base_cache.iter_mut().for_each(|c| *c = None);
        }
        self.trace.commits.push(CommitRecord {
            epoch: self.epoch,
            l2_norm: norm2(&self.delta),
            linf_norm: self.delta.iter().fold(0.0, |m, v| m.max(v.abs())),
        });
        Ok(())
    }

    /// Embeddings of every image as it is used at evaluation time.
    fn evaluation_embeddings(&self) -> Result<EmbeddingIndex> {
        let mut rows = Vec::with_capacity(self.dataset.n_images());
        for i in 0..self.dataset.n_images() {
            let mut values = self.base_values(i);
            if let Constraint::Global { .. } = self.cfg.constraint {
                values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            let pass = self.encoder.forward_split(&self.split, self.frozen(i), &values)?;
            rows.push(Tensor::from_parts_unchecked(vec![self.encoder.embed_dim()], pass.embedding().to_vec()));
        }
        EmbeddingIndex::from_rows(&rows)
    }

    fn epoch_metrics(&self, samples_from: usize) -> Result<EpochMetrics> {
        let ds = self.dataset;
        let n_probe = self.cfg.probe_images.clamp(1, ds.n_images());
        let k_tr = self.cfg.k.min(ds.n_texts());
        let k_ir = self.cfg.k.min(ds.n_images());
        let probe_texts: Vec<usize> = ds.annotations.image_to_texts[..n_probe].iter().flatten().copied().collect();

        let text_queries = EmbeddingIndex::from_rows(
            &probe_texts
                .iter()
                .map(|&t| Tensor::from_parts_unchecked(vec![ds.texts.dim()], ds.texts.row(t).to_vec()))
                .collect::<Vec<_>>(),
        )?;
        let ir_matches: Vec<Vec<usize>> = probe_texts.iter().map(|&t| vec![ds.annotations.text_to_image[t]]).collect();
        let tr_matches = &ds.annotations.image_to_texts[..n_probe];

        let probe_rows = |index: &EmbeddingIndex| {
            EmbeddingIndex::from_rows(
                &(0..n_probe)
                    .map(|i| Tensor::from_parts_unchecked(vec![index.dim()], index.row(i).to_vec()))
                    .collect::<Vec<_>>(),
            )
        };
        let adv = self.evaluation_embeddings()?;
        let clean_tr = recall_at_k(&probe_rows(&self.clean_embeddings)?, &ds.texts, tr_matches, k_tr)?;
        let adv_tr = recall_at_k(&probe_rows(&adv)?, &ds.texts, tr_matches, k_tr)?;
        let clean_ir = recall_at_k(&text_queries, &self.clean_embeddings, &ir_matches, k_ir)?;
        let adv_ir = recall_at_k(&text_queries, &adv, &ir_matches, k_ir)?;

        let samples = &self.trace.samples[samples_from..];
        let converged_fraction = if samples.is_empty() {
            0.0
        } else {
            samples.iter().filter(|s| s.converged).count() as f64 / samples.len() as f64
        };
        Ok(EpochMetrics {
            epoch: self.epoch,
            k: self.cfg.k,
            probe_images: n_probe,
            probe_texts: probe_texts.len(),
            clean_tr,
            clean_ir,
            adv_tr,
            adv_ir,
            converged_fraction,
        })
    }

    fn run(&mut self, strategy: Strategy) -> Result<()> {
        let ds = self.dataset;
        let mut rng = Lcg64::new(self.cfg.seed);
        for epoch in 0..self.cfg.epochs {
            self.epoch = epoch;
            let samples_from = self.trace.samples.len();
            match strategy {
                Strategy::Tra => {
                    for i in visit_order(ds.n_images(), self.cfg.shuffle, &mut rng) {
                        let mut r = vec![0.0; self.n_active()];
                        let rec = self.refine_image(i, &mut r)?;
                        self.trace.samples.push(rec);
                        self.commit(&r)?;
                    }
                }
                Strategy::Ira => {
                    for t in visit_order(ds.n_texts(), self.cfg.shuffle, &mut rng) {
                        let mut r = vec![0.0; self.n_active()];
                        let rec = self.refine_text(t, &mut r)?;
                        self.trace.samples.push(rec);
                        self.commit(&r)?;
                    }
                }
                Strategy::Tira => {
                    let order = visit_order(ds.n_images(), self.cfg.shuffle, &mut rng);
                    for batch in order.chunks(self.cfg.batch_size) {
                        let mut r = vec![0.0; self.n_active()];
                        for &i in batch {
                            let rec = self.refine_image(i, &mut r)?;
                            self.trace.samples.push(rec);
                        }
                        self.commit(&r)?;

                        let mut r = vec![0.0; self.n_active()];
                        for &i in batch {
                            for &t in &ds.annotations.image_to_texts[i] {
                                let rec = self.refine_text(t, &mut r)?;
                                self.trace.samples.push(rec);
                            }
                        }
                        self.commit(&r)?;
                    }
                }
            }
            let metrics = self.epoch_metrics(samples_from)?;
            self.trace.epochs.push(metrics);
        }
        Ok(())
    }

    fn delta_tensor(&self) -> Tensor {
        Tensor::from_parts_unchecked(self.dataset.params.image_shape.to_vec(), self.delta.clone())
    }

    fn finish(self, strategy: Strategy) -> Result<(Perturbation, AttackTrace)> {
        let perturbation = Perturbation {
            delta: self.delta_tensor(),
            constraint: self.cfg.constraint.clone(),
            provenance: Provenance {
                config: self.cfg.echo(strategy),
                config_hash: self.cfg.echo(strategy).hash(),
                encoder_hash: self.encoder.content_hash(),
                dataset_hash: self.dataset.content_hash()?,
            },
        };
        Ok((perturbation, self.trace))
    }
}

fn is_zero(r: &[f64]) -> bool {
    r.iter().all(|&v| v == 0.0)
}

/// First index in `candidates` whose score wins under `better`; candidates are
/// scanned in ascending index order so ties go to the smaller index.
fn argbest(candidates: &[usize], score: &impl Fn(usize) -> f64, better: impl Fn(f64, f64) -> bool) -> usize {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    let mut best_score = score(best);
    for &c in &sorted[1..] {
        let s = score(c);
        if better(s, best_score) {
            best = c;
            best_score = s;
        }
    }
    best
}

fn visit_order(n: usize, shuffle: bool, rng: &mut Lcg64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order
}

fn require_mode(cfg: &AttackConfig, mode: Mode) -> Result<()> {
    if cfg.constraint.mode() != mode {
        return invalid(format!("this driver needs {mode:?} mode"));
    }
    Ok(())
}

/// Runs a strategy under the config's constraint, starting from `δ = 0`.
/// TIRA is patch-only.
pub fn run_attack(
    encoder: &Encoder,
    dataset: &Dataset,
    cfg: &AttackConfig,
    strategy: Strategy,
) -> Result<(Perturbation, AttackTrace)> {
    if strategy == Strategy::Tira && cfg.constraint.mode() == Mode::Global {
        return invalid("global perturbations use the tra or ira strategy");
    }
    let zeros = Tensor::zeros(&dataset.params.image_shape)?;
    let mut engine = Engine::new(encoder, dataset, cfg, &zeros)?;
    engine.run(strategy)?;
    engine.finish(strategy)
}

/// Image loop over every image, one commit per image.
pub fn run_tra(encoder: &Encoder, dataset: &Dataset, cfg: &AttackConfig) -> Result<(Perturbation, AttackTrace)> {
    require_mode(cfg, Mode::Patch)?;
    run_attack(encoder, dataset, cfg, Strategy::Tra)
}

/// Text loop over every text, one commit per text.
pub fn run_ira(encoder: &Encoder, dataset: &Dataset, cfg: &AttackConfig) -> Result<(Perturbation, AttackTrace)> {
    require_mode(cfg, Mode::Patch)?;
    run_attack(encoder, dataset, cfg, Strategy::Ira)
}

/// Batched alternation: the image loop over a batch, commit, then the text
/// loop over the batch's matching texts, commit.
pub fn run_tira(encoder: &Encoder, dataset: &Dataset, cfg: &AttackConfig) -> Result<(Perturbation, AttackTrace)> {
    require_mode(cfg, Mode::Patch)?;
    run_attack(encoder, dataset, cfg, Strategy::Tira)
}

/// Global-noise variant of the image or text loop.
pub fn run_global(
    encoder: &Encoder,
    dataset: &Dataset,
    cfg: &AttackConfig,
    strategy: Strategy,
) -> Result<(Perturbation, AttackTrace)> {
    require_mode(cfg, Mode::Global)?;
    run_attack(encoder, dataset, cfg, strategy)
}

/// One image-loop visit from `delta`: returns the committed `δ` and the record.
pub fn tra_step(
    encoder: &Encoder,
    dataset: &Dataset,
    image: usize,
    delta: &Tensor,
    cfg: &AttackConfig,
) -> Result<(Tensor, SampleRecord)> {
    if image >= dataset.n_images() {
        return invalid(format!("image {image} out of range"));
    }
    let mut engine = Engine::new(encoder, dataset, cfg, delta)?;
    let mut r = vec![0.0; engine.n_active()];
    let record = engine.refine_image(image, &mut r)?;
    engine.commit(&r)?;
    Ok((engine.delta_tensor(), record))
}

/// One text-loop visit from `delta`.
pub fn ira_step(
    encoder: &Encoder,
    dataset: &Dataset,
    text: usize,
    delta: &Tensor,
    cfg: &AttackConfig,
) -> Result<(Tensor, SampleRecord)> {
    if text >= dataset.n_texts() {
        return invalid(format!("text {text} out of range"));
    }
    let mut engine = Engine::new(encoder, dataset, cfg, delta)?;
    let mut r = vec![0.0; engine.n_active()];
    let record = engine.refine_text(text, &mut r)?;
    engine.commit(&r)?;
    Ok((engine.delta_tensor(), record))
}

/// Runs a strategy with step logging on; used to audit step directions.
#[cfg(test)]
pub(crate) fn run_logged(
    encoder: &Encoder,
    dataset: &Dataset,
    cfg: &AttackConfig,
    strategy: Strategy,
) -> Result<(Perturbation, AttackTrace, Vec<StepLog>, Vec<usize>)> {
    let zeros = Tensor::zeros(&dataset.params.image_shape)?;
    let mut engine = Engine::new(encoder, dataset, cfg, &zeros)?;
    engine.step_log = Some(Vec::new());
    engine.run(strategy)?;
    let steps = engine.step_log.take().unwrap_or_default();
    let active = engine.split.active().to_vec();
    let (p, t) = engine.finish(strategy)?;
    Ok((p, t, steps, active))
}

#[cfg(test)]
mod tests;
