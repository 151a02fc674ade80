//! Exact decision-boundary geometry for linear classifiers.
//!
//! A classifier with weight rows `w_i` and offsets `b_i` scores `f_i(x) = w_i·x + b_i`.
//! For a point correctly classified as `y`, the boundary against class `i` is the
//! hyperplane `(w_y − w_i)·x + (b_y − b_i) = 0`, and the distance to it is
//! `(f_y(x) − f_i(x)) / ‖w_y − w_i‖`.

use crate::error::{invalid, Error, Result};
use crate::tensor::{dot, norm2, Tensor};

/// Gradient-difference norms below this are treated as undefined boundaries.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    weights: Tensor,
    offsets: Tensor,
}

impl LinearClassifier {
    pub fn new(weights: Tensor, offsets: Tensor) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 2 {
            return invalid(format!("weights must be (C, n), got {shape:?}"));
        }
        let (classes, dim) = (shape[0], shape[1]);
        if classes < 2 {
            return invalid(format!("need at least 2 classes, got {classes}"));
        }
        if offsets.shape() != [classes] {
            return invalid(format!(
                "offsets must have shape ({classes}), got {:?}",
                offsets.shape()
            ));
        }
        for i in 0..classes {
            for j in i + 1..classes {
                if weights.row(i) == weights.row(j) {
                    return invalid(format!("weight rows {i} and {j} are identical"));
                }
            }
        }
        debug_assert!(dim >= 1);
        Ok(Self { weights, offsets })
    }

    /// Classifier with all-zero offsets.
    pub fn without_offsets(weights: Tensor) -> Result<Self> {
        let classes = weights.shape().first().copied().unwrap_or(0);
        let offsets = Tensor::zeros(&[classes.max(1)])?;
        Self::new(weights, offsets)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.weights.row(i)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input_dim() {
            return invalid(format!(
                "input has {} values, classifier expects {}",
                x.len(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    pub fn score(&self, i: usize, x: &[f64]) -> f64 {
        dot(self.row(i), x) + self.offsets.data()[i]
    }

    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok((0..self.num_classes()).map(|i| self.score(i, x.data())).collect())
    }

    fn gradient_gap_norm(&self, y: usize, i: usize) -> f64 {
        self.row(y)
            .iter()
            .zip(self.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn check_correct(&self, x: &[f64], y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return invalid(format!("class {y} out of range"));
        }
        let fy = self.score(y, x);
        for i in (0..self.num_classes()).filter(|&i| i != y) {
            if self.score(i, x) >= fy {
                return Err(Error::PreconditionViolation(format!(
                    "input is not classified as {y}: class {i} scores at least as high"
                )));
            }
        }
        Ok(())
    }

    /// Distances `(f_y − f_i) / ‖w_y − w_i‖` to every boundary `i ≠ y`.
    pub fn boundary_distances(&self, x: &Tensor, y: usize) -> Result<Vec<(usize, f64)>> {
        self.check_input(x)?;
        self.check_correct(x.data(), y)?;
        let fy = self.score(y, x.data());
        Ok((0..self.num_classes())
            .filter(|&i| i != y)
            .map(|i| (i, (fy - self.score(i, x.data())) / self.gradient_gap_norm(y, i)))
            .collect())
    }

    /// The `k` nearest boundaries, nearest first, ties to the smaller index.
    pub fn nearest_boundaries(&self, x: &Tensor, y: usize, k: usize) -> Result<Vec<usize>> {
        let mut d = self.boundary_distances(x, y)?;
        if k == 0 || k > d.len() {
            return invalid(format!("k must be in 1..={}, got {k}", d.len()));
        }
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(d.into_iter().take(k).map(|(i, _)| i).collect())
    }
}

fn check_binary(w: &Tensor, x: &Tensor) -> Result<f64> {
    if w.shape() != x.shape() {
        return invalid(format!("w {:?} and x {:?} differ in shape", w.shape(), x.shape()));
    }
    let n = norm2(w.data());
    if n == 0.0 {
        return invalid("w must be nonzero");
    }
    Ok(n)
}

/// `|w·x + b| / ‖w‖`.
pub fn binary_distance(w: &Tensor, b: f64, x: &Tensor) -> Result<f64> {
    let n = check_binary(w, x)?;
    Ok((dot(w.data(), x.data()) + b).abs() / n)
}

/// `−f(x) w / ‖w‖²`, the shortest step onto the hyperplane `w·x + b = 0`.
pub fn binary_min_perturbation(w: &Tensor, b: f64, x: &Tensor) -> Result<Tensor> {
    let n = check_binary(w, x)?;
    let f = dot(w.data(), x.data()) + b;
    let scale = -f / (n * n);
    w.scale(scale)
}

/// Index of the nearest boundary for a point correctly classified as `y`.
pub fn nearest_boundary(clf: &LinearClassifier, x: &Tensor, y: usize) -> Result<usize> {
    Ok(clf.nearest_boundaries(x, y, 1)?[0])
}

/// Minimal step onto the nearest boundary:
/// `r = (w_l − w_y)(f_y − f_l) / ‖w_y − w_l‖²`.
pub fn multiclass_min_perturbation(clf: &LinearClassifier, x: &Tensor, y: usize) -> Result<Tensor> {
    let l = nearest_boundary(clf, x, y)?;
    Ok(step_onto(clf, x.data(), y, l))
}

fn step_onto(clf: &LinearClassifier, x: &[f64], y: usize, l: usize) -> Tensor {
    let gap = clf.score(y, x) - clf.score(l, x);
    let norm = clf.gradient_gap_norm(y, l);
    let scale = gap / (norm * norm);
    let data = clf
        .row(l)
        .iter()
        .zip(clf.row(y))
        .map(|(wl, wy)| (wl - wy) * scale)
        .collect();
    Tensor::from_parts_unchecked(vec![clf.input_dim()], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingReport {
    /// The returned perturbation, already scaled by `(1 + eta)`.
    pub perturbation: Tensor,
    pub iterations: usize,
    /// The `k` target classes, nearest first.
    pub crossed_indices: Vec<usize>,
    pub converged: bool,
}

pub fn default_max_iters(k: usize) -> usize {
    50 * k
}

/// Pushes `x` across its `k` nearest boundaries at once.
///
/// The targets are frozen at `x`. Each iteration projects `x + r` onto the
/// nearest boundary among those still uncrossed at `x + (1 + eta) r`, with
/// distances measured as `(f_y − f_l) / ‖∇f_y − ∇f_l‖` (positive for uncrossed
/// boundaries). The loop stops once every target outscores `y` at
/// `x + (1 + eta) r`; `(1 + eta)` is applied exactly once to the returned `r`.
pub fn cross_k_boundaries(
    clf: &LinearClassifier,
    x: &Tensor,
    y: usize,
    k: usize,
    eta: f64,
    max_iters: usize,
) -> Result<CrossingReport> {
    if !(eta > 0.0) {
        return invalid(format!("eta must be positive, got {eta}"));
    }
    if max_iters == 0 {
        return invalid("max_iters must be positive");
    }
    let targets = clf.nearest_boundaries(x, y, k)?;
    let dim = clf.input_dim();
    let mut r = vec![0.0; dim];
    let mut iterations = 0;

    let converged = loop {
        let overshoot: Vec<f64> = x.data().iter().zip(&r).map(|(a, b)| a + (1.0 + eta) * b).collect();
        let fy_over = clf.score(y, &overshoot);
        let uncrossed: Vec<usize> = targets
            .iter()
            .copied()
            .filter(|&l| fy_over > clf.score(l, &overshoot))
            .collect();
        if uncrossed.is_empty() {
            break true;
        }
        if iterations == max_iters {
            break false;
        }

        let current: Vec<f64> = x.data().iter().zip(&r).map(|(a, b)| a + b).collect();
        let fy = clf.score(y, &current);
        let mut best: Option<(usize, f64)> = None;
        for &l in &uncrossed {
            let norm = clf.gradient_gap_norm(y, l);
            if norm < DEGENERATE_NORM {
                continue;
            }
            let dist = (fy - clf.score(l, &current)) / norm;
            // Ties keep the first candidate; `uncrossed` is not index-sorted,
            // so compare indices explicitly.
            let better = match best {
                None => true,
                Some((bl, bd)) => dist < bd || (dist == bd && l < bl),
            };
            if better {
                best = Some((l, dist));
            }
        }
        let Some((target, _)) = best else {
            break false;
        };
        let step = step_onto(clf, &current, y, target);
        for (ri, si) in r.iter_mut().zip(step.data()) {
            *ri += si;
        }
        iterations += 1;
    };

    let data = r.iter().map(|v| v * (1.0 + eta)).collect();
    Ok(CrossingReport {
        perturbation: Tensor::new(vec![dim], data)?,
        iterations,
        crossed_indices: targets,
        converged,
    })
}
