//! Dense row-major `f64` tensors, the pixel/mask newtypes built on them, the
//! norm-ball projections, and the `UAPT` binary file format.
//!
//! There is no broadcasting anywhere: every binary operation requires
//! identical shapes and reports a mismatch as [`Error::InvalidArgument`].

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Dense tensor with explicit shape. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return invalid("tensor shape must have at least one dimension");
        }
        if shape.contains(&0) {
            return invalid(format!("tensor dimensions must be positive, got {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value at flat index {pos}"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a tensor from values already known to be finite and of the right
    /// length. Used on hot paths inside the crate.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() needs a rank-2 tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| v * factor).collect())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Euclidean norm.
pub fn l2_norm(t: &Tensor) -> Result<f64> {
    if t.is_empty() {
        return invalid("l2_norm of an empty tensor");
    }
    Ok(norm2(&t.data))
}

/// Projection onto the ℓ2 ball of radius `epsilon`.
///
/// Points inside the ball are returned unchanged. Points outside are rescaled
/// along their own direction; the scale factor is nudged down by ulps until the
/// result's computed norm is `<= epsilon`, which makes the projection bitwise
/// idempotent.
pub fn project_l2(delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return invalid(format!("epsilon must be positive and finite, got {epsilon}"));
    }
    let norm = norm2(&delta.data);
    if norm <= epsilon {
        return Ok(delta.clone());
    }
    let mut factor = epsilon / norm;
    loop {
        let data: Vec<f64> = delta.data.iter().map(|v| v * factor).collect();
        if norm2(&data) <= epsilon {
            return Ok(Tensor::from_parts_unchecked(delta.shape.clone(), data));
        }
        factor = factor.next_down();
    }
}

/// Projection onto the ℓ∞ ball: elementwise clamp to `[-epsilon, epsilon]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return invalid(format!("epsilon must be positive and finite, got {epsilon}"));
    }
    let data = delta.data.iter().map(|v| v.clamp(-epsilon, epsilon)).collect();
    Ok(Tensor::from_parts_unchecked(delta.shape.clone(), data))
}

/// Elementwise clamp to `[0, 1]`.
pub fn clamp_unit(t: &Tensor) -> Tensor {
    let data = t.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_parts_unchecked(t.shape.clone(), data)
}

/// An image tensor of shape `(c, h, w)` with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage(Tensor);

impl PixelImage {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return invalid(format!("image must have shape (c, h, w), got {:?}", tensor.shape()));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// Binary patch-location mask of shape `(c, h, w)`, identical across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    tensor: Tensor,
    active: Vec<usize>,
}

impl Mask {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 {
            return invalid(format!("mask must have shape (c, h, w), got {shape:?}"));
        }
        if tensor.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("mask values must be exactly 0 or 1");
        }
        let plane = shape[1] * shape[2];
        let first = &tensor.data()[..plane];
        for ch in 1..shape[0] {
            if &tensor.data()[ch * plane..(ch + 1) * plane] != first {
                return invalid("mask must be identical across channels");
            }
        }
        let active = tensor
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        Ok(Self { tensor, active })
    }

    /// Square patch of side `side`, placed `inset = (rows, cols)` pixels away
    /// from the bottom-right corner.
    pub fn bottom_right_square(shape: &[usize], side: usize, inset: (usize, usize)) -> Result<Self> {
        if shape.len() != 3 {
            return invalid(format!("mask shape must be (c, h, w), got {shape:?}"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if side == 0 || side + inset.0 > h || side + inset.1 > w {
            return invalid(format!(
                "patch side {side} with inset {inset:?} does not fit a {h}x{w} image"
            ));
        }
        let row0 = h - inset.0 - side;
        let col0 = w - inset.1 - side;
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for row in row0..row0 + side {
                for col in col0..col0 + side {
                    data[(ch * h + row) * w + col] = 1.0;
                }
            }
        }
        Self::new(Tensor::new(shape.to_vec(), data)?)
    }

    /// Side length of a square patch covering `fraction` of the image area.
    pub fn side_for_area(h: usize, w: usize, fraction: f64) -> usize {
        (fraction * (h * w) as f64).sqrt().floor() as usize
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(Tensor::zeros(shape)?)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::new(Tensor::filled(shape, 1.0)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Flat indices where the mask is 1.
    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    /// Fraction of spatial positions covered.
    pub fn area_fraction(&self) -> f64 {
        self.active.len() as f64 / self.tensor.len() as f64
    }
}

/// `image ⊙ (1 − mask) + delta ⊙ mask`, computed by selection so both regions
/// are bit-exact copies of their sources.
pub fn apply_patch(image: &PixelImage, delta: &Tensor, mask: &Mask) -> Result<PixelImage> {
    if image.shape() != delta.shape() || image.shape() != mask.shape() {
        return invalid(format!(
            "apply_patch shape mismatch: image {:?}, delta {:?}, mask {:?}",
            image.shape(),
            delta.shape(),
            mask.shape()
        ));
    }
    let mut data = image.tensor().data().to_vec();
    for &i in mask.active_indices() {
        let v = delta.data()[i];
        if !(0.0..=1.0).contains(&v) {
            return invalid(format!("patch value {v} at flat index {i} outside [0, 1]"));
        }
        data[i] = v;
    }
    Ok(PixelImage(Tensor::from_parts_unchecked(image.shape().to_vec(), data)))
}

const UAPT_MAGIC: &[u8; 4] = b"UAPT";
const UAPT_VERSION: u8 = 1;

/// Serializes a tensor in the `UAPT v1` layout: magic, version byte, rank
/// byte, `rank` little-endian `u32` dims, then little-endian `f64` values.
pub fn encode_uapt(t: &Tensor) -> Result<Vec<u8>> {
    let rank = t.shape().len();
    if rank > u8::MAX as usize {
        return invalid(format!("rank {rank} does not fit UAPT"));
    }
    let mut out = Vec::with_capacity(6 + 4 * rank + 8 * t.len());
    out.extend_from_slice(UAPT_MAGIC);
    out.push(UAPT_VERSION);
    out.push(rank as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_uapt(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: String| Error::Integrity(msg);
    if bytes.len() < 6 || &bytes[..4] != UAPT_MAGIC {
        return Err(bad("missing UAPT magic".into()));
    }
    if bytes[4] != UAPT_VERSION {
        return Err(bad(format!("unsupported UAPT version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated UAPT header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("UAPT element count overflows".into()))?;
    let payload = &bytes[header..];
    if payload.len() != count * 8 {
        return Err(bad(format!(
            "UAPT payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_uapt(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_uapt(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_uapt(path: &Path) -> Result<Tensor> {
    decode_uapt(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(l2_norm(&t(&[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(l2_norm(&Tensor::zeros(&[2, 3, 4]).unwrap()).unwrap(), 0.0);
        let tenth = Tensor::filled(&[100], 0.1).unwrap();
        assert!((l2_norm(&tenth).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_tensors_cannot_exist() {
        assert!(matches!(Tensor::from_vec(vec![]), Err(Error::InvalidArgument(_))));
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn project_l2_examples() {
        assert_eq!(project_l2(&t(&[6.0, 8.0]), 5.0).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(project_l2(&t(&[1.0, 0.0]), 5.0).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(project_l2(&t(&[0.0, 0.0]), 1.0).unwrap().data(), &[0.0, 0.0]);
        assert!(project_l2(&t(&[1.0]), 0.0).is_err());
        assert!(project_l2(&t(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn project_linf_examples() {
        assert_eq!(project_linf(&t(&[0.2, -0.5]), 0.3).unwrap().data(), &[0.2, -0.3]);
        assert_eq!(project_linf(&t(&[0.1, -0.2]), 0.3).unwrap().data(), &[0.1, -0.2]);
        assert_eq!(project_linf(&t(&[10.0, -10.0]), 0.1).unwrap().data(), &[0.1, -0.1]);
        assert!(project_linf(&t(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn clamp_unit_examples() {
        assert_eq!(clamp_unit(&t(&[-0.2, 0.5, 1.7])).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(clamp_unit(&t(&[0.0, 0.3, 1.0])).data(), &[0.0, 0.3, 1.0]);
        assert_eq!(clamp_unit(&t(&[-1.0, -0.1])).data(), &[0.0, 0.0]);
    }

    #[test]
    fn apply_patch_examples() {
        let shape = [1, 4, 4];
        let image = PixelImage::new(Tensor::filled(&shape, 0.5).unwrap()).unwrap();
        let delta = Tensor::filled(&shape, 1.0).unwrap();

        let none = Mask::zeros(&shape).unwrap();
        assert_eq!(apply_patch(&image, &delta, &none).unwrap(), image);

        let all = Mask::ones(&shape).unwrap();
        assert_eq!(apply_patch(&image, &delta, &all).unwrap().tensor(), &delta);

        let corner = Mask::bottom_right_square(&shape, 2, (0, 0)).unwrap();
        let out = apply_patch(&image, &delta, &corner).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let expected = if row >= 2 && col >= 2 { 1.0 } else { 0.5 };
                assert_eq!(out.tensor().data()[row * 4 + col], expected);
            }
        }
    }

    #[test]
    fn apply_patch_rejects_bad_inputs() {
        let shape = [1, 2, 2];
        let image = PixelImage::new(Tensor::filled(&shape, 0.5).unwrap()).unwrap();
        let mask = Mask::ones(&shape).unwrap();
        let out_of_range = Tensor::filled(&shape, 1.5).unwrap();
        assert!(apply_patch(&image, &out_of_range, &mask).is_err());
        let wrong = Tensor::filled(&[1, 2, 3], 0.5).unwrap();
        assert!(apply_patch(&image, &wrong, &mask).is_err());
        // Out-of-range values off-mask are irrelevant.
        let off = Mask::zeros(&shape).unwrap();
        assert!(apply_patch(&image, &out_of_range, &off).is_ok());
    }

    #[test]
    fn mask_validation() {
        assert!(Mask::new(Tensor::filled(&[1, 2, 2], 0.5).unwrap()).is_err());
        let mut data = vec![0.0; 8];
        data[0] = 1.0;
        assert!(Mask::new(Tensor::new(vec![2, 2, 2], data).unwrap()).is_err());
        assert_eq!(Mask::side_for_area(32, 32, 0.03), 5);
        let m = Mask::bottom_right_square(&[3, 32, 32], 5, (0, 0)).unwrap();
        assert_eq!(m.active_indices().len(), 75);
        let inset = Mask::bottom_right_square(&[1, 8, 8], 2, (1, 3)).unwrap();
        assert_eq!(inset.active_indices(), &[43, 44, 51, 52]);
        assert!(Mask::bottom_right_square(&[1, 4, 4], 5, (0, 0)).is_err());
    }

    #[test]
    fn pixel_image_range() {
        assert!(PixelImage::new(Tensor::filled(&[1, 2, 2], 1.01).unwrap()).is_err());
        assert!(PixelImage::new(Tensor::filled(&[4], 0.5).unwrap()).is_err());
    }

    #[test]
    fn uapt_layout_is_exact() {
        let tensor = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_uapt(&tensor).unwrap();
        let mut expected = b"UAPT".to_vec();
        expected.extend([1, 2]);
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_uapt(&bytes).unwrap(), tensor);
    }

    #[test]
    fn uapt_rejects_malformed() {
        let tensor = Tensor::filled(&[3, 2], 0.25).unwrap();
        let bytes = encode_uapt(&tensor).unwrap();
        assert!(matches!(decode_uapt(&bytes[..bytes.len() - 1]), Err(Error::Integrity(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_uapt(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 2;
        assert!(decode_uapt(&bad_version).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_uapt(&trailing).is_err());
    }
}
