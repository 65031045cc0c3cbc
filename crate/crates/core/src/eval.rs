//! Frozen-feature evaluation: linear probe and cosine kNN.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bank::argmax;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::losses::ProbVector;
use crate::optim::{cosine_lr, Sgd};
use crate::tensor::{dot, l2_norm, Mat, SeededRng};

/// Linear-probe hyper-parameters. The head is trained with the same SGD
/// (momentum 0.9, no weight decay) and cosine schedule as the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of instances held out for scoring.
    pub holdout: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            holdout: 0.2,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("probe epochs, lr and batch_size must be positive".into()));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config(format!("probe holdout {} outside (0, 1)", self.holdout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub top1: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub n_eval: usize,
    /// SHA-256 of the evaluated features.
    pub feature_hash: String,
}

impl EvalReport {
    fn from_predictions(method: String, predicted: &[usize], truth: &[usize], classes: usize, feature_hash: String) -> Self {
        let mut per_class: Vec<ClassAccuracy> = (0..classes)
            .map(|class| ClassAccuracy { class, correct: 0, total: 0 })
            .collect();
        for (&p, &t) in predicted.iter().zip(truth) {
            per_class[t].total += 1;
            if p == t {
                per_class[t].correct += 1;
            }
        }
        let correct: usize = per_class.iter().map(|c| c.correct).sum();
        Self {
            method,
            top1: correct as f64 / truth.len().max(1) as f64,
            per_class,
            n_eval: truth.len(),
            feature_hash,
        }
    }

    /// Text table:
    ///
    /// ```text
    /// eval      linear
    /// top1      0.983333
    /// n_eval    60
    /// features  <sha256>
    /// class  correct  total  acc
    /// 0      20       20     1.000000
    /// ```
    ///
    /// Classes absent from the evaluation split show `-` for accuracy.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "eval      {}\ntop1      {:.6}\nn_eval    {}\nfeatures  {}\nclass  correct  total  acc\n",
            self.method, self.top1, self.n_eval, self.feature_hash
        );
        for c in &self.per_class {
            let acc = if c.total == 0 {
                "-".to_string()
            } else {
                format!("{:.6}", c.correct as f64 / c.total as f64)
            };
            s.push_str(&format!("{:<6} {:<8} {:<6} {}\n", c.class, c.correct, c.total, acc));
        }
        s
    }
}

pub fn feature_hash(features: &Mat) -> String {
    let mut h = Sha256::new();
    h.update((features.rows() as u64).to_le_bytes());
    h.update((features.cols() as u64).to_le_bytes());
    for v in features.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Embeds every row with the frozen encoder; no augmentation.
pub fn extract_features(encoder: &Encoder, data: &Mat) -> Result<Mat> {
    encoder.embed(data)
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

/// Trains a multinomial logistic head on a seeded train split of the
/// frozen features and reports top-1 on the held-out split. Features are
/// standardized with train-split statistics.
/// Seeded `(held_out, train)` index split used by the probe: a shuffle of
/// `0..n`, the first `round(n · holdout)` indices held out (at least one
/// on each side).
pub fn holdout_split(n: usize, config: &ProbeConfig) -> (Vec<usize>, Vec<usize>) {
    let (test, train, _) = split_with_rng(n, config);
    (test, train)
}

/// The probe keeps drawing from the split's stream for its minibatch order.
fn split_with_rng(n: usize, config: &ProbeConfig) -> (Vec<usize>, Vec<usize>, SeededRng) {
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_test = ((n as f64 * config.holdout).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train = order.split_off(n_test);
    (order, train, rng)
}

pub fn linear_probe(features: &Mat, labels: &[usize], config: &ProbeConfig) -> Result<EvalReport> {
    config.validate()?;
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {n} feature rows", labels.len())));
    }
    let classes = class_count(labels);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateInput("linear probe needs at least two classes".into()));
    }
    let (test_idx, train_idx, mut rng) = split_with_rng(n, config);
    let (test_idx, train_idx) = (&test_idx[..], &train_idx[..]);

    let d = features.cols();
    let mut mean = vec![0.0; d];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    let mut scale = vec![0.0; d];
    for &i in train_idx {
        for ((s, v), m) in scale.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut scale {
        let sd = (*s / train_idx.len() as f64).sqrt();
        *s = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
    }
    let standardize = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    };
    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| standardize(i)).collect();
    let train_y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

    let mut weight = Mat::zeros(classes, d);
    let mut bias = vec![0.0; classes];
    let mut opt = Sgd::new(0.9, 0.0, &[classes * d, classes]);
    let batch = config.batch_size.min(train_x.len());
    let per_epoch = train_x.len().div_ceil(batch) as u64;
    let total = per_epoch * config.epochs as u64;
    let mut t = 0u64;
    let mut perm: Vec<usize> = (0..train_x.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut perm);
        for chunk in perm.chunks(batch) {
            let mut gw = Mat::zeros(classes, d);
            let mut gb = vec![0.0; classes];
            for &k in chunk {
                let x = &train_x[k];
                let logits: Vec<f64> = (0..classes).map(|c| dot(weight.row(c), x) + bias[c]).collect();
                let p = ProbVector::from_logits(&logits)?;
                for c in 0..classes {
                    let g = (p.as_slice()[c] - if c == train_y[k] { 1.0 } else { 0.0 }) / chunk.len() as f64;
                    gb[c] += g;
                    for (acc, xv) in gw.row_mut(c).iter_mut().zip(x) {
                        *acc += g * xv;
                    }
                }
            }
            let lr = cosine_lr(t, total, config.lr);
            opt.step(vec![weight.as_mut_slice(), &mut bias], vec![gw.as_slice(), &gb], lr);
            t += 1;
        }
    }

    let predicted: Vec<usize> = test_idx
        .iter()
        .map(|&i| {
            let x = standardize(i);
            let logits: Vec<f64> = (0..classes).map(|c| dot(weight.row(c), &x) + bias[c]).collect();
            argmax(&logits)
        })
        .collect();
    let truth: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    Ok(EvalReport::from_predictions(
        "linear".into(),
        &predicted,
        &truth,
        classes,
        feature_hash(features),
    ))
}

fn unit_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let n = l2_norm(out.row(i));
        if n > 0.0 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Cosine-similarity kNN vote. Neighbours are ranked by similarity, then by
/// training index; the class with most votes wins, ties going to the
/// smaller class index.
pub fn knn_eval(
    train_features: &Mat,
    train_labels: &[usize],
    test_features: &Mat,
    test_labels: &[usize],
    k: usize,
) -> Result<EvalReport> {
    if k == 0 || k > train_features.rows() {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={}",
            train_features.rows()
        )));
    }
    if train_labels.len() != train_features.rows() || test_labels.len() != test_features.rows() {
        return Err(Error::Config("label counts do not match feature rows".into()));
    }
    if train_features.cols() != test_features.cols() {
        return Err(Error::Config("train and test features differ in width".into()));
    }
    let classes = class_count(train_labels).max(class_count(test_labels));
    let train = unit_rows(train_features);
    let test = unit_rows(test_features);
    let predicted: Vec<usize> = (0..test.rows())
        .into_par_iter()
        .map(|q| {
            let query = test.row(q);
            let mut ranked: Vec<(f64, usize)> = train.row_iter().map(|r| dot(r, query)).zip(0..).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, i) in &ranked[..k] {
                votes[train_labels[i]] += 1;
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut h = Sha256::new();
    h.update(feature_hash(train_features));
    h.update(feature_hash(test_features));
    Ok(EvalReport::from_predictions(
        format!("knn k={k}"),
        &predicted,
        test_labels,
        classes,
        hex::encode(h.finalize()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::encoder::{Activation, Dense, EncoderConfig, EncoderParams};

    fn identity_encoder(d: usize) -> Encoder {
        Encoder::from_params(
            EncoderConfig::new(vec![d, d], Activation::Relu, 0),
            EncoderParams {
                layers: vec![Dense { weight: Mat::identity(d), bias: vec![0.0; d] }],
                step: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_encoder_features_equal_inputs() {
        let d = make_blobs(2, 5, 3, 1.0, 4).unwrap();
        let f = extract_features(&identity_encoder(3), d.features()).unwrap();
        assert_eq!(&f, d.features());
        assert_eq!(feature_hash(&f), feature_hash(&extract_features(&identity_encoder(3), d.features()).unwrap()));
    }

    #[test]
    fn separable_classes_probe_perfectly() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = SeededRng::new(3);
        for i in 0..100 {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            rows.push(vec![sign * (1.0 + rng.uniform()), rng.normal()]);
            labels.push(c);
        }
        let f = Mat::from_rows(&rows).unwrap();
        let r = linear_probe(&f, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.top1, 1.0);
    }

    #[test]
    fn random_labels_probe_near_chance() {
        let d = make_blobs(3, 300, 8, 0.5, 5).unwrap();
        let mut labels = d.labels().unwrap().to_vec();
        SeededRng::new(17).shuffle(&mut labels);
        let r = linear_probe(d.features(), &labels, &ProbeConfig::default()).unwrap();
        assert!((r.top1 - 1.0 / 3.0).abs() <= 0.1, "{}", r.top1);
    }

    #[test]
    fn zero_features_predict_the_majority_class() {
        let labels: Vec<usize> = (0..200).map(|i| if i % 5 == 0 { 1 } else { 0 }).collect();
        let f = Mat::zeros(200, 4);
        let config = ProbeConfig::default();
        let r = linear_probe(&f, &labels, &config).unwrap();
        // class 0 is the training majority; score is its share of the held-out split
        let held_out_zero = r.per_class[0].total as f64 / r.n_eval as f64;
        assert_eq!(r.top1, held_out_zero);
        assert_eq!(r.per_class[1].correct, 0);
    }

    #[test]
    fn single_class_is_degenerate() {
        let f = Mat::zeros(10, 2);
        assert!(matches!(
            linear_probe(&f, &[1; 10], &ProbeConfig::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn knn_exact_match_and_ties() {
        let train = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]).unwrap();
        let labels = [0, 1, 0, 1];
        let query = Mat::from_rows(&[[0.0, 2.0]]).unwrap();
        assert_eq!(knn_eval(&train, &labels, &query, &[1], 1).unwrap().top1, 1.0);
        // all four neighbours vote 2-2, tie goes to class 0
        let r = knn_eval(&train, &labels, &query, &[0], 4).unwrap();
        assert_eq!(r.top1, 1.0);
        assert!(knn_eval(&train, &labels, &query, &[0], 5).is_err());
        assert!(knn_eval(&train, &labels, &query, &[0], 0).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let d = make_blobs(3, 20, 5, 1.5, 8).unwrap();
        let labels = d.labels().unwrap();
        let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..60).partition(|i| i % 4 != 0);
        let tr = d.features().select_rows(&train_idx);
        let te = d.features().select_rows(&test_idx);
        let trl: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
        let tel: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
        let report = knn_eval(&tr, &trl, &te, &tel, 5).unwrap();
        let mut correct = 0;
        for q in 0..te.rows() {
            let cos = |a: &[f64], b: &[f64]| dot(a, b) / (l2_norm(a) * l2_norm(b));
            let mut sims: Vec<(f64, usize)> = (0..tr.rows()).map(|i| (cos(tr.row(i), te.row(q)), i)).collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = [0; 3];
            for s in &sims[..5] {
                votes[trl[s.1]] += 1;
            }
            let winner = (0..3).rev().max_by_key(|&c| votes[c]).unwrap();
            if winner == tel[q] {
                correct += 1;
            }
        }
        assert_eq!(report.top1, correct as f64 / te.rows() as f64);
    }

    #[test]
    fn knn_k1_on_training_points_is_perfect() {
        let d = make_blobs(4, 10, 6, 2.0, 2).unwrap();
        let l = d.labels().unwrap();
        let r = knn_eval(d.features(), l, d.features(), l, 1).unwrap();
        assert_eq!(r.top1, 1.0);
    }

    #[test]
    fn table_lists_classes() {
        let r = EvalReport::from_predictions("linear".into(), &[0, 1, 1], &[0, 1, 0], 3, "h".into());
        let t = r.to_table();
        assert!(t.contains("top1      0.666667"));
        assert!(t.lines().last().unwrap().ends_with('-'));
    }
}
