//! End-to-end checks that span several modules.

use instdisc::bank::MemoryBank;
use instdisc::checkpoint::{load_checkpoint, state_hash};
use instdisc::data::{make_blobs, BlobSpec};
use instdisc::encoder::{Activation, Encoder, EncoderConfig};
use instdisc::eval::extract_features;
use instdisc::losses::{ce_loss_and_grads, ProbVector};
use instdisc::tensor::{dot, l2_norm, Mat};
use instdisc::trainer::{
    continue_pretrain, parametric_mode_step, run_pretrain, Augmentation, MetricRecord, Mode, RunOutput, TrainConfig,
    TrainState,
};

/// Straight-line recomputation of `W2 · relu(W1 x + b1) + b2`.
fn two_layer_by_hand(enc: &Encoder, x: &[f64]) -> Vec<f64> {
    let l1 = &enc.params.layers[0];
    let l2 = &enc.params.layers[1];
    let mut hidden = Vec::new();
    for o in 0..l1.weight.rows() {
        let mut s = l1.bias[o];
        for i in 0..x.len() {
            s += l1.weight[(o, i)] * x[i];
        }
        hidden.push(s.max(0.0));
    }
    let mut out = Vec::new();
    for o in 0..l2.weight.rows() {
        let mut s = l2.bias[o];
        for (i, h) in hidden.iter().enumerate() {
            s += l2.weight[(o, i)] * h;
        }
        out.push(s);
    }
    out
}

#[test]
fn calibrated_row_is_the_instance_embedding() {
    let data = make_blobs(3, 10, 5, 0.5, 3).unwrap();
    let enc = Encoder::init(EncoderConfig::new(vec![5, 7, 4], Activation::Relu, 3)).unwrap();
    let expected = two_layer_by_hand(&enc, data.features().row(7));

    let mut raw = MemoryBank::new(30, 4, 0.5, false, 1.0).unwrap();
    raw.calibrate_init(&enc, data.features()).unwrap();
    for (a, b) in raw.row(7).iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    let mut unit = MemoryBank::new(30, 4, 0.5, true, 1.0).unwrap();
    unit.calibrate_init(&enc, data.features()).unwrap();
    let norm = l2_norm(&expected);
    for (a, b) in unit.row(7).iter().zip(&expected) {
        assert!((a - b / norm).abs() <= 1e-12);
    }
}

fn parametric_setup() -> (instdisc::data::Dataset, TrainConfig, TrainState) {
    let data = make_blobs(2, 4, 3, 0.5, 21).unwrap();
    let config = TrainConfig {
        mode: Mode::Parametric,
        lambda: 0.0,
        normalize: false,
        augmentation: Augmentation::None,
        sgd_momentum: 0.0,
        weight_decay: 0.0,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&config, EncoderConfig::new(vec![3, 5, 3], Activation::Tanh, 2), data.instances()).unwrap();
    (data, config, state)
}

#[test]
fn parametric_step_applies_the_cross_entropy_gradient_to_the_bank() {
    let (data, config, mut state) = parametric_setup();
    let i = 5;
    let lr = 0.3;
    let z = state.encoder.embed(&data.features().select_rows(&[i])).unwrap();
    let before = state.bank.weights().clone();
    let p = ProbVector::from_logits(&state.bank.logits(z.row(0)).unwrap()).unwrap();
    let ce = ce_loss_and_grads(&p, i, z.row(0), &before, 1.0).unwrap();

    parametric_mode_step(&mut state, &config, data.instances(), &[i], lr).unwrap();
    for ((after, w), g) in state.bank.weights().as_slice().iter().zip(before.as_slice()).zip(ce.grad_w.as_slice()) {
        assert!((after - (w - lr * g)).abs() <= 1e-14);
    }
}

#[test]
fn parametric_steps_on_one_instance_decrease_the_loss() {
    let (data, config, mut state) = parametric_setup();
    let mut last = f64::INFINITY;
    for _ in 0..60 {
        let loss = parametric_mode_step(&mut state, &config, data.instances(), &[2], 0.2).unwrap();
        assert!(loss < last, "{loss} after {last}");
        last = loss;
    }
    let z = state.encoder.embed(&data.features().select_rows(&[2])).unwrap();
    let p = ProbVector::from_logits(&state.bank.logits(z.row(0)).unwrap()).unwrap();
    assert!(p.as_slice()[2] > 0.9, "{:?}", p.as_slice());
}

#[test]
fn parametric_step_is_refused_in_other_modes() {
    let (data, mut config, mut state) = parametric_setup();
    config.mode = Mode::Ours;
    assert!(parametric_mode_step(&mut state, &config, data.instances(), &[0], 0.1).is_err());
}

fn read_records(path: &std::path::Path) -> Vec<MetricRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| MetricRecord::parse_line(l).unwrap())
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_blobs(3, 12, 6, 0.4, 4).unwrap();
    let enc = EncoderConfig::new(vec![6, 10, 5], Activation::Relu, 1);
    let config = TrainConfig { epochs: 4, batch_size: 8, seed: 6, ..TrainConfig::default() };

    let straight = tmp.path().join("straight");
    let (full, _) = run_pretrain(&config, enc.clone(), data.instances(), Some(RunOutput { dir: &straight })).unwrap();

    let interrupted = tmp.path().join("interrupted");
    let periodic = TrainConfig { checkpoint_every: 2, ..config.clone() };
    run_pretrain(&periodic, enc, data.instances(), Some(RunOutput { dir: &interrupted })).unwrap();
    let mid = load_checkpoint(&interrupted.join("checkpoint-epoch0002.ckpt")).unwrap();
    assert_eq!(mid.state.epoch, 2);

    let resumed_dir = tmp.path().join("resumed");
    std::fs::create_dir_all(&resumed_dir).unwrap();
    let (resumed, _) =
        continue_pretrain(mid.state, &config, data.instances(), Some(RunOutput { dir: &resumed_dir })).unwrap();

    let a = read_records(&straight.join("metrics.log"));
    let mut b = read_records(&interrupted.join("metrics.log"));
    b.truncate(2);
    b.extend(read_records(&resumed_dir.join("metrics.log")));
    assert_eq!(a.len(), 4);
    assert_eq!(b.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.same_metrics(y), "{} vs {}", x.to_line(), y.to_line());
    }
    assert_eq!(state_hash(&full, &config), state_hash(&resumed, &config));
}

#[test]
fn trained_features_group_by_cluster() {
    let data = BlobSpec::default().generate().unwrap();
    let labels = data.labels().unwrap();
    let config = TrainConfig::default();
    let enc = EncoderConfig::new(vec![16, 32, 16], Activation::Relu, 0);
    let (state, _) = run_pretrain(&config, enc, data.instances(), None).unwrap();
    let f: Mat = extract_features(&state.encoder, data.features()).unwrap();
    let (mut within, mut between, mut nw, mut nb) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..f.rows() {
        for j in (i + 1)..f.rows() {
            let cos = dot(f.row(i), f.row(j)) / (l2_norm(f.row(i)) * l2_norm(f.row(j)));
            if labels[i] == labels[j] {
                within += cos;
                nw += 1;
            } else {
                between += cos;
                nb += 1;
            }
        }
    }
    let (within, between) = (within / nw as f64, between / nb as f64);
    assert!(within > between, "within {within} between {between}");
}
