//! Deterministic synthetic image/text retrieval datasets.
//!
//! Recipe, all draws from one [`Lcg64`] stream seeded with `seed`, in this
//! order:
//!
//! 1. decoder matrix `P` of shape `(c·h·w, d)`, standard normal entries;
//! 2. for each image `i`: a latent seed `u_i` (standard normal, normalized),
//!    rendered as `v_i = sigmoid(DECODER_GAIN · P u_i)` reshaped to `(c, h, w)`;
//! 3. for each image `i` and match `j`: text embedding
//!    `normalize(z_i + σ g_ij)` with `z_i = E_v(v_i)` and `g_ij` standard normal;
//! 4. `C` class prototypes (normalized standard normal vectors); image `i` is
//!    labelled with the prototype most similar to `z_i`.
//!
//! Anchoring texts at the encoder's own embedding of each rendered image is
//! what gives an untrained encoder nonzero clean retrieval.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{read_checked, sha256_hex, Encoder};
use crate::error::{invalid, Error, Result};
use crate::retrieval::{recall_at_k, EmbeddingIndex, MatchAnnotation};
use crate::rng::Lcg64;
use crate::tensor::{dot, encode_uapt, norm2, PixelImage, Tensor};

/// Pre-sigmoid gain of the image decoder.
pub const DECODER_GAIN: f64 = 1.0;

/// Clean R@k must reach this multiple of the chance rate `k / M`.
pub const CLEAN_FLOOR_FACTOR: f64 = 5.0;

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_images: usize,
    pub texts_per_image: usize,
    pub image_shape: [usize; 3],
    pub embed_dim: usize,
    pub class_count: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_images: 200,
            texts_per_image: 5,
            image_shape: [3, 32, 32],
            embed_dim: 64,
            class_count: 10,
            noise_level: 0.1,
            seed: 7,
        }
    }
}

impl DatasetParams {
    pub fn n_texts(&self) -> usize {
        self.n_images * self.texts_per_image
    }

    fn validate(&self, encoder: &Encoder) -> Result<()> {
        if self.n_images == 0 || self.texts_per_image == 0 || self.class_count == 0 {
            return invalid("image, text, and class counts must be positive");
        }
        if self.image_shape.contains(&0) || self.embed_dim == 0 {
            return invalid("image shape and embedding dimension must be positive");
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return invalid(format!("noise level must be >= 0, got {}", self.noise_level));
        }
        if self.image_shape != encoder.input_shape() {
            return invalid(format!(
                "image shape {:?} does not match encoder input {:?}",
                self.image_shape,
                encoder.input_shape()
            ));
        }
        if self.embed_dim != encoder.embed_dim() {
            return invalid(format!(
                "embedding dimension {} does not match encoder output {}",
                self.embed_dim,
                encoder.embed_dim()
            ));
        }
        Ok(())
    }
}

/// An in-memory multimodal dataset with validated invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: DatasetParams,
    pub images: Vec<PixelImage>,
    pub texts: EmbeddingIndex,
    pub annotations: MatchAnnotation,
    pub prototypes: EmbeddingIndex,
    pub labels: Vec<usize>,
    /// Content hash of the encoder the texts were anchored to.
    pub encoder_hash: String,
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    v.iter_mut().for_each(|x| *x /= n);
}

fn unit_gaussian(rng: &mut Lcg64, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
    normalize(&mut v);
    v
}

/// Generates a dataset without the clean-retrieval floor check.
pub fn generate_unchecked(params: &DatasetParams, encoder: &Encoder) -> Result<Dataset> {
    params.validate(encoder)?;
    let mut rng = Lcg64::new(params.seed);
    let pixels: usize = params.image_shape.iter().product();
    let d = params.embed_dim;

    let decoder: Vec<f64> = (0..pixels * d).map(|_| rng.gaussian()).collect();

    let mut images = Vec::with_capacity(params.n_images);
    let mut anchors = Vec::with_capacity(params.n_images);
    for _ in 0..params.n_images {
        let u = unit_gaussian(&mut rng, d);
        let data = decoder
            .chunks_exact(d)
            .map(|row| 1.0 / (1.0 + (-DECODER_GAIN * dot(row, &u)).exp()))
            .collect();
        let image = PixelImage::new(Tensor::new(params.image_shape.to_vec(), data)?)?;
        anchors.push(encoder.encode_image(&image)?);
        images.push(image);
    }

    let mut text_rows = Vec::with_capacity(params.n_texts() * d);
    let mut text_to_image = Vec::with_capacity(params.n_texts());
    for (i, z) in anchors.iter().enumerate() {
        for _ in 0..params.texts_per_image {
            let mut t: Vec<f64> = z
                .data()
                .iter()
                .map(|zi| zi + params.noise_level * rng.gaussian())
                .collect();
            normalize(&mut t);
            text_rows.extend(t);
            text_to_image.push(i);
        }
    }
    let texts = EmbeddingIndex::new(Tensor::new(vec![params.n_texts(), d], text_rows)?)?;

    let mut proto_rows = Vec::with_capacity(params.class_count * d);
    for _ in 0..params.class_count {
        proto_rows.extend(unit_gaussian(&mut rng, d));
    }
    let prototypes = EmbeddingIndex::new(Tensor::new(vec![params.class_count, d], proto_rows)?)?;
    let labels = anchors
        .iter()
        .map(|z| crate::retrieval::ranking(&prototypes.similarities(z.data()))[0])
        .collect();

    Ok(Dataset {
        params: params.clone(),
        images,
        texts,
        annotations: MatchAnnotation::from_text_to_image(params.n_images, text_to_image)?,
        prototypes,
        labels,
        encoder_hash: encoder.content_hash(),
    })
}

/// Generates a dataset and rejects it if clean text retrieval under `encoder`
/// does not clear the floor at `k`.
pub fn generate(params: &DatasetParams, encoder: &Encoder, k: usize) -> Result<Dataset> {
    let dataset = generate_unchecked(params, encoder)?;
    dataset.check_clean_floor(encoder, k)?;
    Ok(dataset)
}

/// Clean text-retrieval R@k and the floor it must clear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanFloor {
    pub k: usize,
    pub recall: f64,
    pub chance: f64,
    pub required: f64,
}

impl Dataset {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_texts(&self) -> usize {
        self.texts.len()
    }

    pub fn embed_images(&self, encoder: &Encoder) -> Result<EmbeddingIndex> {
        let rows = self
            .images
            .iter()
            .map(|v| encoder.encode_image(v))
            .collect::<Result<Vec<_>>>()?;
        EmbeddingIndex::from_rows(&rows)
    }

    pub fn clean_floor(&self, encoder: &Encoder, k: usize) -> Result<CleanFloor> {
        let k = k.min(self.n_texts());
        let images = self.embed_images(encoder)?;
        let recall = recall_at_k(&images, &self.texts, &self.annotations.image_to_texts, k)?;
        let chance = k as f64 / self.n_texts() as f64;
        Ok(CleanFloor { k, recall, chance, required: CLEAN_FLOOR_FACTOR * chance })
    }

    pub fn check_clean_floor(&self, encoder: &Encoder, k: usize) -> Result<CleanFloor> {
        let floor = self.clean_floor(encoder, k)?;
        if floor.recall < floor.required {
            return Err(Error::DegenerateDataset(format!(
                "clean text R@{} = {:.4} is below {} x chance ({:.4}); choose another seed pairing",
                floor.k, floor.recall, CLEAN_FLOOR_FACTOR, floor.required
            )));
        }
        Ok(floor)
    }

    fn images_tensor(&self) -> Result<Tensor> {
        let mut shape = vec![self.n_images()];
        shape.extend(self.params.image_shape);
        let data = self.images.iter().flat_map(|v| v.tensor().data().iter().copied()).collect();
        Tensor::new(shape, data)
    }

    fn labels_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect())
    }

    /// Writes the manifest and its tensor files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut files = DatasetFiles::default();
        let put = |name: &str, bytes: Vec<u8>| -> Result<FileEntry> {
            fs::write(dir.join(name), &bytes)?;
            Ok(FileEntry { path: name.to_string(), sha256: sha256_hex(&bytes) })
        };
        files.images = put("images.uapt", encode_uapt(&self.images_tensor()?)?)?;
        files.texts = put("texts.uapt", encode_uapt(self.texts.tensor())?)?;
        files.annotations = put("annotations.json", serde_json::to_vec(&self.annotations)?)?;
        files.prototypes = put("prototypes.uapt", encode_uapt(self.prototypes.tensor())?)?;
        files.labels = put("labels.uapt", encode_uapt(&self.labels_tensor()?)?)?;

        let manifest = DatasetManifest {
            n_texts: self.n_texts(),
            params: self.params.clone(),
            dataset_hash: files.combined_hash(),
            encoder_hash: self.encoder_hash.clone(),
            files,
        };
        let path = dir.join(DATASET_MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Content hash derived from the per-file hashes; equals the manifest's
    /// `dataset_hash` for a saved dataset.
    pub fn content_hash(&self) -> Result<String> {
        let entry = |bytes: Vec<u8>| FileEntry { path: String::new(), sha256: sha256_hex(&bytes) };
        let files = DatasetFiles {
            images: entry(encode_uapt(&self.images_tensor()?)?),
            texts: entry(encode_uapt(self.texts.tensor())?),
            annotations: entry(serde_json::to_vec(&self.annotations)?),
            prototypes: entry(encode_uapt(self.prototypes.tensor())?),
            labels: entry(encode_uapt(&self.labels_tensor()?)?),
        };
        Ok(files.combined_hash())
    }

    /// Loads a dataset manifest (or its directory), checking file hashes and
    /// every structural invariant.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(DATASET_MANIFEST) } else { path.to_path_buf() };
        let dir = path.parent().unwrap_or(Path::new("."));
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&path)?)?;
        if manifest.files.combined_hash() != manifest.dataset_hash {
            return Err(Error::Integrity("dataset hash does not match its file hashes".into()));
        }
        let params = manifest.params;
        let corrupt = |m: String| Error::CorruptDataset(m);

        let images = read_checked(&dir.join(&manifest.files.images.path), &manifest.files.images.sha256)?;
        let mut expected_shape = vec![params.n_images];
        expected_shape.extend(params.image_shape);
        if images.shape() != expected_shape {
            return Err(corrupt(format!("images have shape {:?}, expected {expected_shape:?}", images.shape())));
        }
        let per_image: usize = params.image_shape.iter().product();
        let images = images
            .data()
            .chunks_exact(per_image)
            .map(|c| PixelImage::new(Tensor::new(params.image_shape.to_vec(), c.to_vec())?))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| corrupt(e.to_string()))?;

        let texts = read_checked(&dir.join(&manifest.files.texts.path), &manifest.files.texts.sha256)?;
        if texts.shape() != [params.n_texts(), params.embed_dim] || manifest.n_texts != params.n_texts() {
            return Err(corrupt(format!(
                "texts have shape {:?}, expected ({}, {})",
                texts.shape(),
                params.n_texts(),
                params.embed_dim
            )));
        }
        let texts = EmbeddingIndex::new(texts).map_err(|e| corrupt(e.to_string()))?;

        let ann_bytes = fs::read(dir.join(&manifest.files.annotations.path))?;
        if sha256_hex(&ann_bytes) != manifest.files.annotations.sha256 {
            return Err(Error::Integrity("hash mismatch for annotations".into()));
        }
        let annotations: MatchAnnotation =
            serde_json::from_slice(&ann_bytes).map_err(|e| corrupt(e.to_string()))?;
        annotations.validate()?;
        if annotations.n_images() != params.n_images || annotations.n_texts() != params.n_texts() {
            return Err(corrupt("annotation sizes do not match the manifest".into()));
        }
        if let Some(v) = annotations
            .image_to_texts
            .iter()
            .position(|ts| ts.len() != params.texts_per_image)
        {
            return Err(corrupt(format!(
                "image {v} has {} texts, expected {}",
                annotations.image_to_texts[v].len(),
                params.texts_per_image
            )));
        }

        let prototypes =
            read_checked(&dir.join(&manifest.files.prototypes.path), &manifest.files.prototypes.sha256)?;
        if prototypes.shape() != [params.class_count, params.embed_dim] {
            return Err(corrupt(format!("prototypes have shape {:?}", prototypes.shape())));
        }
        let prototypes = EmbeddingIndex::new(prototypes).map_err(|e| corrupt(e.to_string()))?;

        let labels = read_checked(&dir.join(&manifest.files.labels.path), &manifest.files.labels.sha256)?;
        if labels.shape() != [params.n_images] {
            return Err(corrupt(format!("labels have shape {:?}", labels.shape())));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 && (l as usize) < params.class_count {
                    Ok(l as usize)
                } else {
                    Err(corrupt(format!("invalid label {l}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            params,
            images,
            texts,
            annotations,
            prototypes,
            labels,
            encoder_hash: manifest.encoder_hash,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct DatasetFiles {
    images: FileEntry,
    texts: FileEntry,
    annotations: FileEntry,
    prototypes: FileEntry,
    labels: FileEntry,
}

impl DatasetFiles {
    fn combined_hash(&self) -> String {
        let joined = [&self.images, &self.texts, &self.annotations, &self.prototypes, &self.labels]
            .iter()
            .map(|f| f.sha256.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        sha256_hex(joined.as_bytes())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    #[serde(flatten)]
    params: DatasetParams,
    n_texts: usize,
    files: DatasetFiles,
    dataset_hash: String,
    encoder_hash: String,
}

/// Reads just the content hash recorded in a dataset manifest.
pub fn manifest_hash(path: &Path) -> Result<String> {
    let path = if path.is_dir() { path.join(DATASET_MANIFEST) } else { path.to_path_buf() };
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
    Ok(manifest.dataset_hash)
}
