use super::*;
use crate::corpus::{build_vocab, LabelSet};
use crate::encoder::{BoxStatistics, EncoderConfig};
use crate::heads::HeadsConfig;
use crate::model::prepare;
use crate::syngen::{generate, SynSpec};

fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.add("p", Array::scalar(p)).unwrap();
    store.get_mut(id).grad = Array::scalar(g);
    store
}

fn adam_cfg(weight_decay: f64) -> TrainConfig {
    TrainConfig {
        weight_decay,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(10, 100, &cfg).unwrap(), 5e-5);
    assert_eq!(lr_at(100, 100, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(55, 100, &cfg).unwrap(), 2.5e-5);
    assert_eq!(lr_at(0, 100, &cfg).unwrap(), 0.0);
    assert!(lr_at(0, 0, &cfg).is_err());
    assert!(lr_at(101, 100, &cfg).is_err());
    let flat = TrainConfig {
        warmup_fraction: 0.0,
        ..cfg
    };
    assert_eq!(lr_at(0, 40, &flat).unwrap(), 5e-5);
}

#[test]
fn lr_peaks_at_configured_rate() {
    let cfg = TrainConfig::default();
    let peak = (0..=137).map(|s| lr_at(s, 137, &cfg).unwrap()).fold(0.0, f64::max);
    assert!(peak <= cfg.lr && peak > 0.95 * cfg.lr);
}

#[test]
fn adamw_examples() {
    let mut s = scalar_store(1.0, 0.0);
    let mut st = AdamState::new(&s);
    assert!(adamw_step(&mut s, &mut st, 0.1, &adam_cfg(0.0)));
    assert_eq!(s.iter().next().unwrap().value.item(), 1.0);

    let mut s = scalar_store(1.0, 1.0);
    let mut st = AdamState::new(&s);
    adamw_step(&mut s, &mut st, 0.1, &adam_cfg(0.0));
    assert!((s.iter().next().unwrap().value.item() - 0.9).abs() < 1e-6);

    let mut s = scalar_store(1.0, 0.0);
    let mut st = AdamState::new(&s);
    adamw_step(&mut s, &mut st, 0.1, &adam_cfg(0.1));
    assert!((s.iter().next().unwrap().value.item() - 0.99).abs() < 1e-15);
}

#[test]
fn nonfinite_gradient_skips_the_step() {
    let mut s = scalar_store(1.0, f64::NAN);
    let mut st = AdamState::new(&s);
    assert!(!adamw_step(&mut s, &mut st, 0.1, &adam_cfg(0.1)));
    assert_eq!((st.step, st.skipped), (0, 1));
    assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
}

#[test]
fn clipping_caps_the_norm() {
    let mut s = scalar_store(0.0, 3.0);
    let id = s.add("q", Array::scalar(0.0)).unwrap();
    s.get_mut(id).grad = Array::scalar(4.0);
    assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
    assert!((s.grad_norm() - 1.0).abs() < 1e-12);
}

#[test]
fn config_invariants() {
    assert!(TrainConfig::default().check().is_ok());
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() },
    ] {
        assert!(bad.check().is_err());
    }
}

fn tiny_setup(docs: usize, epochs: usize) -> (Session, Vec<Example>) {
    let labels = LabelSet::xfund();
    let mut spec = SynSpec::new(labels.clone());
    spec.num_docs = docs;
    let corpus = generate(&spec).unwrap();
    let vocab = build_vocab(&corpus, 1).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_model: 16,
            heads: 2,
            ffn_mult: 2,
            max_len: 64,
            ..EncoderConfig::default()
        },
        heads: HeadsConfig {
            d_label: 8,
            d_biaff: 16,
            ..HeadsConfig::default()
        },
        ..ModelConfig::default()
    };
    let examples = prepare(&corpus, &vocab, &labels, 64, &BoxStatistics).unwrap();
    let model = JointModel::new(config, vocab).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    };
    (Session::new(model, cfg).unwrap(), examples)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (mut s, ex) = tiny_setup(3, 2);
    s.run(&ex, None, None).unwrap();
    let ckpt = s.checkpoint();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(back, ckpt);
    let (model, opt) = back.restore().unwrap();
    for (a, b) in model.store.iter().zip(s.model.store.iter()) {
        let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.value.data()), bits(b.value.data()), "{}", a.name);
    }
    assert_eq!(opt, s.opt);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
}

#[test]
fn checkpoint_errors() {
    let (s, _) = tiny_setup(1, 1);
    let ckpt = s.checkpoint();
    let bytes = ckpt.to_bytes();

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Checkpoint(_))));

    let mut versioned = ckpt.clone();
    versioned.manifest.format_version = 99;
    let e = Checkpoint::from_bytes(&versioned.to_bytes()).unwrap_err().to_string();
    assert!(e.contains("version"), "{e}");

    let mut reshaped = ckpt.clone();
    let victim = reshaped.manifest.params[5].name.clone();
    reshaped.manifest.params[5].shape.push(2);
    let e = Checkpoint::from_bytes(&reshaped.to_bytes()).unwrap_err().to_string();
    assert!(e.contains(&victim), "{e}");

    let mut transposed = ckpt;
    let p = transposed.manifest.params.iter_mut().find(|p| p.name == "re.biaffine.w").unwrap();
    p.shape.reverse();
    let e = Checkpoint::from_bytes(&transposed.to_bytes())
        .and_then(|c| c.restore().map(|_| ()))
        .unwrap_err()
        .to_string();
    assert!(e.contains("re.biaffine.w"), "{e}");
}

#[test]
fn same_seed_same_log() {
    let (mut a, ex) = tiny_setup(4, 3);
    let (mut b, _) = tiny_setup(4, 3);
    let la = a.run(&ex, Some(&ex[..2]), None).unwrap();
    let lb = b.run(&ex, Some(&ex[..2]), None).unwrap();
    assert_eq!(la.log_lines, lb.log_lines);
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    assert_eq!(la.log_lines.len(), 4);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (mut full, ex) = tiny_setup(4, 3);
    let whole = full.run(&ex, None, None).unwrap();

    let (mut first, _) = tiny_setup(4, 3);
    let head = first.run_until(&ex, None, None, 2).unwrap();
    let ckpt = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
    let mut resumed = Session::from_checkpoint(&ckpt).unwrap();
    let tail = resumed.run(&ex, None, None).unwrap();
    assert_eq!(head.log_lines[..], whole.log_lines[..3]);
    assert_eq!(tail.log_lines, whole.log_lines[3..]);
}

#[test]
fn logged_totals_are_one_addition() {
    let (mut s, ex) = tiny_setup(3, 2);
    let sum = s.run(&ex, None, None).unwrap();
    for st in &sum.steps {
        assert_eq!(st.loss.total as f32, st.loss.loss_ser as f32 + st.loss.loss_re as f32);
    }
    for e in &sum.epochs {
        assert_eq!(e.loss, e.loss_ser + e.loss_re);
        assert_eq!(e.alpha, alpha(e.epoch, &s.cfg.soft_label));
    }
}

#[test]
fn writes_log_and_checkpoints() {
    let (mut s, ex) = tiny_setup(2, 2);
    s.cfg.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    s.run(&ex, Some(&ex), Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let rec: EpochRecord = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(rec.epoch, 2);
    for f in ["last.ckpt", "best.ckpt", "epoch001.ckpt", "epoch002.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn overfit_loss_is_monotone_after_warm_start() {
    let labels = LabelSet::xfund();
    let mut spec = SynSpec::new(labels.clone());
    spec.num_docs = 1;
    let docs = generate(&spec).unwrap();
    let vocab = build_vocab(&docs, 1).unwrap();
    let ex = prepare(&docs, &vocab, &labels, 512, &BoxStatistics).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_model: 16,
            heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            ..EncoderConfig::default()
        },
        heads: HeadsConfig {
            d_label: 8,
            d_biaff: 16,
            dropout: 0.0,
            ..HeadsConfig::default()
        },
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 200,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut s = Session::new(JointModel::new(config, vocab).unwrap(), cfg).unwrap();
    let sum = s.run(&ex, None, None).unwrap();
    for w in sum.epochs.windows(2).filter(|w| w[1].epoch > 5) {
        assert!(w[1].loss <= w[0].loss + 1e-3, "epoch {}: {} -> {}", w[1].epoch, w[0].loss, w[1].loss);
    }
}
