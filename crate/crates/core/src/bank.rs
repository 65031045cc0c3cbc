//! The non-parametric classifier: one weight row per training instance,
//! maintained by a momentum rule instead of back-propagation.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::tensor::{dot, ensure_finite, l2_normalize, Mat, SeededRng};

/// Bank update direction for one instance row.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedDirection {
    /// Bank row the direction applies to.
    pub index: usize,
    pub direction: Vec<f64>,
}

impl CorrectedDirection {
    /// Baseline rule: move the row toward the current embedding unchanged.
    pub fn naive(index: usize, embedding: &[f64]) -> Self {
        Self {
            index,
            direction: embedding.to_vec(),
        }
    }

    /// Gradient-corrected rule for the instance at batch position `pos`:
    ///
    /// `ẑ = (1 - P[pos,pos]) z_pos - Σ_{j≠pos} P[j,pos] z_j`
    ///
    /// where `P[j, c]` is the probability instance `j` assigns to the class of
    /// in-batch instance `c`. With unit temperature this is the negative
    /// gradient of the summed in-batch cross-entropy with respect to that
    /// class's bank row; at temperature `τ` it is `τ` times that.
    pub fn corrected(index: usize, probs: &Mat, embeddings: &Mat, pos: usize) -> Result<Self> {
        let b = embeddings.rows();
        if probs.rows() != b || probs.cols() != b {
            return Err(Error::Usage(format!(
                "in-batch probability matrix is {}x{}, expected {b}x{b}",
                probs.rows(),
                probs.cols()
            )));
        }
        if pos >= b {
            return Err(Error::Usage(format!(
                "batch position {pos} outside a batch of {b}"
            )));
        }
        let mut direction: Vec<f64> = embeddings
            .row(pos)
            .iter()
            .map(|z| (1.0 - probs[(pos, pos)]) * z)
            .collect();
        for j in (0..b).filter(|&j| j != pos) {
            let weight = probs[(j, pos)];
            for (d, z) in direction.iter_mut().zip(embeddings.row(j)) {
                *d -= weight * z;
            }
        }
        Ok(Self { index, direction })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    weights: Mat,
    /// Momentum coefficient `m`: the share of the old row that is kept.
    pub momentum: f64,
    pub normalize: bool,
    pub temperature: f64,
}

impl MemoryBank {
    /// An all-zero bank; call one of the init methods before use.
    pub fn new(n: usize, dim: usize, momentum: f64, normalize: bool, temperature: f64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Config("bank needs at least one row and column".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("bank momentum {momentum} outside [0, 1]")));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        Ok(Self {
            weights: Mat::zeros(n, dim),
            momentum,
            normalize,
            temperature,
        })
    }

    /// Rebuilds a bank from stored rows.
    pub fn from_weights(weights: Mat, momentum: f64, normalize: bool, temperature: f64) -> Result<Self> {
        let mut bank = Self::new(weights.rows(), weights.cols(), momentum, normalize, temperature)?;
        ensure_finite(weights.as_slice(), "bank rows")?;
        bank.weights = weights;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    /// Direct access for gradient-trained (parametric) classifiers.
    pub fn weights_mut(&mut self) -> &mut Mat {
        &mut self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.weights.row(i)
    }

    /// Feature Calibrate: row `i` becomes the untrained encoder's embedding
    /// of instance `i` (unit-normalized when `normalize` is set).
    pub fn calibrate_init(&mut self, encoder: &Encoder, instances: &Mat) -> Result<()> {
        if instances.rows() != self.len() {
            return Err(Error::Config(format!(
                "bank has {} rows but the dataset has {} instances",
                self.len(),
                instances.rows()
            )));
        }
        if encoder.embedding_dim() != self.dim() {
            return Err(Error::Config(format!(
                "encoder emits {}-d features, bank rows are {}-d",
                encoder.embedding_dim(),
                self.dim()
            )));
        }
        let z = encoder.embed(instances)?;
        self.fill_rows(z)
    }

    /// Seeded gaussian rows, drawn row-major from `rng`.
    pub fn random_init(&mut self, rng: &mut SeededRng) -> Result<()> {
        let mut w = Mat::zeros(self.len(), self.dim());
        for v in w.as_mut_slice() {
            *v = rng.normal();
        }
        self.fill_rows(w)
    }

    fn fill_rows(&mut self, mut rows: Mat) -> Result<()> {
        ensure_finite(rows.as_slice(), "bank initialization")?;
        if self.normalize {
            for i in 0..rows.rows() {
                let unit = l2_normalize(rows.row(i)).map_err(|_| {
                    Error::DegenerateInput(format!("row {i} is zero and cannot be normalized"))
                })?;
                rows.row_mut(i).copy_from_slice(&unit);
            }
        }
        self.weights = rows;
        Ok(())
    }

    /// `w_i ← m·w_i + (1 − m)·ẑ_i`, renormalized when `normalize` is set.
    /// Only row `dir.index` is written.
    pub fn momentum_update(&mut self, dir: &CorrectedDirection) -> Result<()> {
        if dir.index >= self.len() || dir.direction.len() != self.dim() {
            return Err(Error::Usage(format!(
                "direction for row {} with {} entries does not fit a {}x{} bank",
                dir.index,
                dir.direction.len(),
                self.len(),
                self.dim()
            )));
        }
        ensure_finite(&dir.direction, "bank update direction")?;
        let m = self.momentum;
        let mut next: Vec<f64> = self
            .weights
            .row(dir.index)
            .iter()
            .zip(&dir.direction)
            .map(|(w, z)| m * w + (1.0 - m) * z)
            .collect();
        if self.normalize {
            next = l2_normalize(&next).map_err(|_| {
                Error::DegenerateInput(format!("row {} collapsed to zero", dir.index))
            })?;
        }
        self.weights.row_mut(dir.index).copy_from_slice(&next);
        Ok(())
    }

    /// Entry `j` is `w_jᵀ z / τ`.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Config(format!(
                "embedding has {} entries, bank rows have {}",
                z.len(),
                self.dim()
            )));
        }
        let inv_t = 1.0 / self.temperature;
        Ok(self.weights.row_iter().map(|w| dot(w, z) * inv_t).collect())
    }

    /// Index of the highest-scoring row (first one on ties).
    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        let logits = self.logits(z)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, Dense, EncoderConfig, EncoderParams};
    use crate::tensor::stable_softmax;

    fn random_mat(seed: u64, rows: usize, cols: usize) -> Mat {
        let mut rng = SeededRng::new(seed);
        Mat::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn identity_encoder(d: usize) -> Encoder {
        Encoder::from_params(
            EncoderConfig::new(vec![d, d], Activation::Relu, 0),
            EncoderParams {
                layers: vec![Dense {
                    weight: Mat::identity(d),
                    bias: vec![0.0; d],
                }],
                step: 0,
            },
        )
        .unwrap()
    }

    /// Σ_j -log softmax(W z_j / τ)[rows_j] over the batch.
    fn batch_ce(w: &Mat, z: &Mat, rows: &[usize], tau: f64) -> f64 {
        (0..z.rows())
            .map(|j| {
                let logits: Vec<f64> = w.row_iter().map(|r| dot(r, z.row(j)) / tau).collect();
                -stable_softmax(&logits).unwrap()[rows[j]].ln()
            })
            .sum()
    }

    fn in_batch_probs(w: &Mat, z: &Mat, rows: &[usize], tau: f64) -> Mat {
        let b = z.rows();
        let mut p = Mat::zeros(b, b);
        for j in 0..b {
            let logits: Vec<f64> = w.row_iter().map(|r| dot(r, z.row(j)) / tau).collect();
            let full = stable_softmax(&logits).unwrap();
            for c in 0..b {
                p[(j, c)] = full[rows[c]];
            }
        }
        p
    }

    #[test]
    fn calibrate_with_identity_encoder_copies_inputs() {
        let x = random_mat(1, 5, 3);
        let mut bank = MemoryBank::new(5, 3, 0.5, false, 1.0).unwrap();
        bank.calibrate_init(&identity_encoder(3), &x).unwrap();
        assert_eq!(bank.weights(), &x);
    }

    #[test]
    fn calibrate_with_zero_encoder() {
        let mut config = EncoderConfig::new(vec![3, 4, 2], Activation::Relu, 1);
        config.init_scale = 0.0;
        let enc = Encoder::init(config).unwrap();
        let x = random_mat(2, 4, 3);
        let mut off = MemoryBank::new(4, 2, 0.5, false, 1.0).unwrap();
        off.calibrate_init(&enc, &x).unwrap();
        assert!(off.weights().as_slice().iter().all(|&v| v == 0.0));
        let mut on = MemoryBank::new(4, 2, 0.5, true, 1.0).unwrap();
        assert!(matches!(
            on.calibrate_init(&enc, &x),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn calibrate_rejects_mismatched_sizes() {
        let x = random_mat(1, 5, 3);
        let mut bank = MemoryBank::new(4, 3, 0.5, false, 1.0).unwrap();
        assert!(matches!(bank.calibrate_init(&identity_encoder(3), &x), Err(Error::Config(_))));
        let mut bank = MemoryBank::new(5, 2, 0.5, false, 1.0).unwrap();
        assert!(matches!(bank.calibrate_init(&identity_encoder(3), &x), Err(Error::Config(_))));
    }

    #[test]
    fn random_init_follows_recipe() {
        let mut a = MemoryBank::new(4, 3, 0.5, false, 1.0).unwrap();
        a.random_init(&mut SeededRng::new(9)).unwrap();
        let mut b = a.clone();
        b.random_init(&mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut raw = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for &v in a.weights().as_slice() {
            let want: f64 = rand_distr::StandardNormal.sample(&mut raw);
            assert_eq!(v, want);
        }
        let mut n = MemoryBank::new(4, 3, 0.5, true, 1.0).unwrap();
        n.random_init(&mut SeededRng::new(9)).unwrap();
        for r in n.weights().row_iter() {
            assert!((dot(r, r).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corrected_direction_small_cases() {
        let z = Mat::from_rows(&[[1.0, 2.0]]).unwrap();
        let p = Mat::from_rows(&[[0.3]]).unwrap();
        let d = CorrectedDirection::corrected(0, &p, &z, 0).unwrap();
        assert_eq!(d.direction, vec![0.7, 1.4]);

        let z = random_mat(3, 3, 4);
        let mut p = Mat::zeros(3, 3);
        p[(1, 1)] = 1.0;
        p[(0, 0)] = 0.5;
        p[(2, 0)] = 0.2;
        let d = CorrectedDirection::corrected(7, &p, &z, 1).unwrap();
        assert!(d.direction.iter().all(|&v| v == 0.0));
        assert_eq!(d.index, 7);
        assert!(matches!(
            CorrectedDirection::corrected(0, &p, &z, 3),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn corrected_direction_is_negative_batch_gradient() {
        let (n, d) = (9, 4);
        let w = random_mat(60, n, d);
        let z = random_mat(6, 3, d);
        let rows = [2usize, 5, 7];
        for tau in [1.0, 0.5] {
            let p = in_batch_probs(&w, &z, &rows, tau);
            for pos in 0..3 {
                let dir = CorrectedDirection::corrected(rows[pos], &p, &z, pos).unwrap();
                let h = 1e-5;
                for k in 0..d {
                    let mut plus = w.clone();
                    plus[(rows[pos], k)] += h;
                    let mut minus = w.clone();
                    minus[(rows[pos], k)] -= h;
                    let fd = (batch_ce(&plus, &z, &rows, tau) - batch_ce(&minus, &z, &rows, tau))
                        / (2.0 * h);
                    assert!((dir.direction[k] + tau * fd).abs() <= 1e-8, "{} vs {}", dir.direction[k], -fd);
                }
            }
        }
    }

    #[test]
    fn naive_direction_is_the_embedding() {
        let z = vec![0.3, -1.2];
        assert_eq!(CorrectedDirection::naive(1, &z).direction, z);
        assert_eq!(CorrectedDirection::naive(1, &[0.0, 0.0]).direction, vec![0.0, 0.0]);
    }

    #[test]
    fn momentum_update_cases() {
        let w = Mat::from_rows(&[[1.0, 0.0], [0.2, 0.3]]).unwrap();
        let dir = CorrectedDirection { index: 0, direction: vec![0.0, 1.0] };

        let mut keep = MemoryBank::from_weights(w.clone(), 1.0, false, 1.0).unwrap();
        keep.momentum_update(&dir).unwrap();
        assert_eq!(keep.weights(), &w);

        let mut replace = MemoryBank::from_weights(w.clone(), 0.0, false, 1.0).unwrap();
        replace.momentum_update(&dir).unwrap();
        assert_eq!(replace.row(0), &[0.0, 1.0]);

        let mut half = MemoryBank::from_weights(w.clone(), 0.5, false, 1.0).unwrap();
        half.momentum_update(&dir).unwrap();
        assert_eq!(half.row(0), &[0.5, 0.5]);
        assert_eq!(half.row(1), w.row(1));

        let mut unit = MemoryBank::from_weights(w.clone(), 0.5, true, 1.0).unwrap();
        unit.momentum_update(&dir).unwrap();
        let s = 0.5f64.sqrt();
        assert!((unit.row(0)[0] - s).abs() < 1e-15 && (unit.row(0)[1] - s).abs() < 1e-15);

        let bad = CorrectedDirection { index: 0, direction: vec![f64::NAN, 0.0] };
        assert!(matches!(half.momentum_update(&bad), Err(Error::NumericInput(_))));
    }

    #[test]
    fn logits_cases() {
        let w = Mat::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let b1 = MemoryBank::from_weights(w.clone(), 0.5, false, 1.0).unwrap();
        assert_eq!(b1.logits(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let b2 = MemoryBank::from_weights(w, 0.5, false, 2.0).unwrap();
        let z = [3.0, -1.0];
        let l1 = b1.logits(&z).unwrap();
        let l2 = b2.logits(&z).unwrap();
        assert_eq!(l2, l1.iter().map(|v| v / 2.0).collect::<Vec<_>>());
        assert!(b1.logits(&[1.0]).is_err());

        let w = random_mat(7, 6, 4);
        let z = random_mat(70, 1, 4);
        let bank = MemoryBank::from_weights(w.clone(), 0.5, false, 1.0).unwrap();
        let got = bank.logits(z.row(0)).unwrap();
        for j in 0..6 {
            let mut s = 0.0;
            for k in 0..4 {
                s += w[(j, k)] * z[(0, k)];
            }
            assert!((got[j] - s).abs() < 1e-12);
        }
    }
}
