//! Image-to-text contrastive loss.
//!
//! With `s_ik = cos(z_i^I, z_k^T) / τ` and positives `P = {(i, j) : y_ij = 1}`,
//!
//! ```text
//! L = −(1/|P|) Σ_{(i,j)∈P} [ s_ij − log Σ_k exp(s_ik) ]
//! ```
//!
//! The softmax for image `i` runs over every text in the batch.

use ndarray::Array2;

use crate::error::{Error, Result};

/// `B × B` positive-pair indicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLabels {
    size: usize,
    positive: Vec<bool>,
}

impl PairLabels {
    pub fn identity(size: usize) -> Self {
        let mut positive = vec![false; size * size];
        for i in 0..size {
            positive[i * size + i] = true;
        }
        PairLabels { size, positive }
    }

    /// Positive wherever the two sentences are string-equal. The diagonal is
    /// always positive.
    pub fn from_shared_sentences<S: AsRef<str>>(sentences: &[S]) -> Self {
        let size = sentences.len();
        let mut positive = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                positive[i * size + j] = sentences[i].as_ref() == sentences[j].as_ref();
            }
        }
        PairLabels { size, positive }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut positive = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                positive.push(f(i, j));
            }
        }
        PairLabels { size, positive }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.size + j]
    }

    pub fn count(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

fn validate(image: &Array2<f64>, text: &Array2<f64>, labels: &PairLabels, temperature: f64) -> Result<()> {
    let batch = image.nrows();
    if batch == 0 {
        return Err(Error::invalid("contrastive loss needs a non-empty batch"));
    }
    if text.nrows() != batch || labels.size() != batch {
        return Err(Error::invalid(format!(
            "batch mismatch: {} images, {} texts, {}x{} labels",
            batch,
            text.nrows(),
            labels.size(),
            labels.size()
        )));
    }
    if image.ncols() != text.ncols() {
        return Err(Error::invalid("image and text embeddings differ in width"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if image.iter().chain(text.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("contrastive loss inputs"));
    }
    if labels.count() == 0 {
        return Err(Error::invalid("contrastive loss needs at least one positive pair"));
    }
    Ok(())
}

/// Row-wise log-softmax of the scaled similarity matrix.
fn log_probs(image: &Array2<f64>, text: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut logits = image.dot(&text.t()) / temperature;
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    logits
}

/// Loss value for unit-norm embedding rows `image` and `text` (`B × d`).
pub fn contrastive_loss(image: &Array2<f64>, text: &Array2<f64>, labels: &PairLabels, temperature: f64) -> Result<f64> {
    validate(image, text, labels, temperature)?;
    let lp = log_probs(image, text, temperature);
    let mut total = 0.0;
    for i in 0..labels.size() {
        for j in 0..labels.size() {
            if labels.get(i, j) {
                total -= lp[[i, j]];
            }
        }
    }
    let loss = total / labels.count() as f64;
    // −log p is non-negative; clamp rounding noise at the degenerate optimum
    Ok(loss.max(0.0))
}

/// Loss and `∂L/∂Z_I`.
pub fn contrastive_loss_with_grad(
    image: &Array2<f64>,
    text: &Array2<f64>,
    labels: &PairLabels,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    validate(image, text, labels, temperature)?;
    let batch = labels.size();
    let positives = labels.count() as f64;
    let lp = log_probs(image, text, temperature);
    let mut total = 0.0;
    // ∂L/∂s_ik = (n_i · p_ik − y_ik) / |P|
    let mut grad_logits = Array2::zeros((batch, batch));
    for i in 0..batch {
        let row_positives = (0..batch).filter(|&j| labels.get(i, j)).count() as f64;
        for k in 0..batch {
            let y = if labels.get(i, k) { 1.0 } else { 0.0 };
            if y > 0.0 {
                total -= lp[[i, k]];
            }
            grad_logits[[i, k]] = (row_positives * lp[[i, k]].exp() - y) / positives;
        }
    }
    let grad_image = grad_logits.dot(text) / temperature;
    Ok(((total / positives).max(0.0), grad_image))
}
