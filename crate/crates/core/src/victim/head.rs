use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Closed answer set of the surrogate's text head.
pub const DEFAULT_ANSWERS: [&str; 8] = [
    "go straight",
    "slow down",
    "stop",
    "turn left",
    "turn right",
    "change lanes to the left",
    "change lanes to the right",
    "keep a safe distance",
];

/// Nearest-prototype answer head over pooled projector features.
///
/// The score of answer k is cos(z, p_k) + w * cos(q(prompt), p_k), where
/// z = (sum_r a_r P_r - center) / scale is the weighted, standardized pool
/// of projector rows and q is a bag-of-words prompt embedding. Decoding is
/// greedy (argmax, ties to the lower index).
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionHead {
    pub answers: Vec<String>,
    pub prototypes: Array2<f64>,
    pub prompt_weight: f64,
    pub prompt_seed: u64,
    /// Pooling weight of each projector row; sums to 1.
    pub row_weights: Array1<f64>,
    pub center: Array1<f64>,
    pub scale: Array1<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn cosine(a: &Array1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

impl CaptionHead {
    /// Uniform pooling, no standardization.
    pub fn new(answers: Vec<String>, prototypes: Array2<f64>, prompt_weight: f64, prompt_seed: u64, rows: usize) -> Self {
        let dim = prototypes.ncols();
        Self {
            answers,
            prototypes,
            prompt_weight,
            prompt_seed,
            row_weights: Array1::from_elem(rows, 1.0 / rows.max(1) as f64),
            center: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn pooled(&self, projector: ArrayView2<f64>) -> Result<Array1<f64>> {
        if projector.ncols() != self.dim() || projector.nrows() != self.row_weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "projector {:?} vs head ({} rows, width {})",
                projector.dim(),
                self.row_weights.len(),
                self.dim()
            )));
        }
        let pooled = self.row_weights.dot(&projector);
        Ok((pooled - &self.center) / &self.scale)
    }

    /// Sets center and scale to the per-channel mean and standard deviation
    /// of the raw pooled features of a calibration set.
    pub fn calibrate(&mut self, projectors: &[Array2<f64>]) -> Result<()> {
        if projectors.len() < 2 {
            return Err(Error::InvalidArgument("calibration needs at least two feature sets".into()));
        }
        let mut pools = Array2::zeros((projectors.len(), self.dim()));
        for (mut row, p) in pools.rows_mut().into_iter().zip(projectors) {
            if p.dim() != (self.row_weights.len(), self.dim()) {
                return Err(Error::ShapeMismatch(format!("calibration projector {:?}", p.dim())));
            }
            row.assign(&self.row_weights.dot(p));
        }
        self.center = pools.mean_axis(Axis(0)).expect("nonempty");
        self.scale = pools.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        Ok(())
    }

    /// Sets each answer's prototype to the mean standardized pool of the
    /// calibration features labeled with it. Answers without examples keep
    /// their prototype.
    pub fn fit_prototypes(&mut self, projectors: &[Array2<f64>], labels: &[usize]) -> Result<()> {
        if projectors.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature sets vs {} labels",
                projectors.len(),
                labels.len()
            )));
        }
        let mut sums = Array2::<f64>::zeros(self.prototypes.dim());
        let mut counts = vec![0usize; self.answers.len()];
        for (p, &k) in projectors.iter().zip(labels) {
            if k >= self.answers.len() {
                return Err(Error::InvalidArgument(format!("label {k} out of range")));
            }
            let z = self.pooled(p.view())?;
            sums.row_mut(k).scaled_add(1.0, &z);
            counts[k] += 1;
        }
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 {
                let row = sums.row(k).mapv(|v| v / n as f64);
                self.prototypes.row_mut(k).assign(&row);
            }
        }
        Ok(())
    }

    pub fn prompt_embedding(&self, prompt: &str) -> Result<Array1<f64>> {
        let lower = prompt.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("prompt must be nonempty".into()));
        }
        let mut q = Array1::<f64>::zeros(self.dim());
        for t in tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(t.as_bytes()) ^ self.prompt_seed);
            for v in q.iter_mut() {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        Ok(q)
    }

    pub fn scores(&self, projector: ArrayView2<f64>, prompt: &str) -> Result<Vec<f64>> {
        if projector.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "projector width {} vs head width {}",
                projector.ncols(),
                self.dim()
            )));
        }
        let pooled = self.pooled(projector)?;
        let q = self.prompt_embedding(prompt)?;
        Ok(self
            .prototypes
            .rows()
            .into_iter()
            .map(|p| cosine(&pooled, p) + self.prompt_weight * cosine(&q, p))
            .collect())
    }

    pub fn answer(&self, projector: ArrayView2<f64>, prompt: &str) -> Result<String> {
        let scores = self.scores(projector, prompt)?;
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = k;
            }
        }
        Ok(self.answers[best].clone())
    }
}
