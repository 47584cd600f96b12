//! AdamW with a linear schedule, the seeded epoch loop, and checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, ParamStore, Real};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::heads::{alpha, LossBreakdown, SoftLabelSchedule};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Example, JointModel, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub clip_norm: f64,
    pub seed: u64,
    pub soft_label: SoftLabelSchedule,
    /// Write a numbered checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub re_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_fraction: 0.1,
            batch_size: 8,
            epochs: 100,
            max_steps: None,
            clip_norm: 1.0,
            seed: 0,
            soft_label: SoftLabelSchedule::default(),
            checkpoint_every: 0,
            re_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("weight_decay must be non-negative and clip_norm positive".into());
        }
        if !(0.0..=1.0).contains(&self.re_threshold) {
            return bad(format!("re_threshold {} outside [0, 1]", self.re_threshold));
        }
        self.soft_label.check()
    }

    pub fn steps_per_epoch(&self, docs: usize) -> u64 {
        docs.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, docs: usize) -> u64 {
        let all = self.epochs as u64 * self.steps_per_epoch(docs);
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

/// Linear warmup from 0 to `cfg.lr`, then linear decay to 0.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Precondition("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Precondition(format!("step {step} beyond {total_steps}")));
    }
    let (s, total) = (step as f64, total_steps as f64);
    let warm = cfg.warmup_fraction * total;
    Ok(if s < warm {
        cfg.lr * (s / warm)
    } else {
        cfg.lr * ((total - s) / (total - warm))
    })
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
    pub skipped: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Array::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
            skipped: 0,
        }
    }
}

/// One decoupled-decay update from the gradients held in `store`. Returns
/// false, leaving everything but the skip counter untouched, when any
/// gradient is non-finite.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) -> bool {
    if !store.iter().all(|p| p.grad.all_finite()) {
        state.skipped += 1;
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            let g = g.as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = (mi / c1) / ((vi / c2).sqrt() + cfg.eps) + cfg.weight_decay * w.as_f64();
            *w = T::of(w.as_f64() - lr * update);
        }
    }
    true
}

/// Scales gradients so their global norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max {
        let s = T::of(max / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_ser: f64,
    pub loss_re: f64,
    pub loss: f64,
    pub alpha: f64,
    pub lr: f64,
    pub val_cell_acc: Option<f64>,
    pub val_re_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub applied: bool,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    train_docs: usize,
    total_steps: u64,
}

/// Model, optimizer state and progress: everything a resumed run needs.
pub struct Session {
    pub model: JointModel<f32>,
    pub cfg: TrainConfig,
    pub opt: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_re_f1: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Log lines written by this call, header included on a fresh start.
    pub log_lines: Vec<String>,
    pub best: Option<Checkpoint>,
    pub last_validation: Option<MetricsReport>,
}

impl Session {
    pub fn new(model: JointModel<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.check()?;
        let opt = AdamState::new(&model.store);
        Ok(Session {
            model,
            cfg,
            opt,
            epoch: 0,
            best_val_re_f1: None,
            best_epoch: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, opt) = ckpt.restore()?;
        let m = &ckpt.manifest;
        Ok(Session {
            model,
            cfg: m.train.clone(),
            opt,
            epoch: m.epoch,
            best_val_re_f1: m.best_val_re_f1,
            best_epoch: m.best_epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    fn step_seed(&self) -> u64 {
        self.cfg.seed ^ (self.opt.step + self.opt.skipped + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    /// Trains until `cfg.epochs` (or the step cap). With `out`, writes
    /// `log.jsonl`, `last.ckpt`, `best.ckpt` and periodic checkpoints there.
    pub fn run(&mut self, train: &[Example], val: Option<&[Example]>, out: Option<&Path>) -> Result<TrainSummary> {
        self.run_until(train, val, out, self.cfg.epochs)
    }

    /// Like [`Session::run`] but stops after epoch `stop`, leaving the
    /// schedule of the full run intact.
    pub fn run_until(
        &mut self,
        train: &[Example],
        val: Option<&[Example]>,
        out: Option<&Path>,
        stop: usize,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::Precondition("training set is empty".into()));
        }
        let total = self.cfg.total_steps(train.len());
        let mut summary = TrainSummary {
            epochs: Vec::new(),
            steps: Vec::new(),
            log_lines: Vec::new(),
            best: None,
            last_validation: None,
        };
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(self.epoch > 0)
                    .write(true)
                    .truncate(self.epoch == 0)
                    .open(dir.join("log.jsonl"))?;
                Some(std::io::BufWriter::new(f))
            }
            None => None,
        };
        let mut emit = |line: String, summary: &mut TrainSummary| -> Result<()> {
            if let Some(w) = log.as_mut() {
                writeln!(w, "{line}")?;
                w.flush()?;
            }
            summary.log_lines.push(line);
            Ok(())
        };
        if self.epoch == 0 {
            let header = LogHeader {
                model: &self.model.config,
                train: &self.cfg,
                train_docs: train.len(),
                total_steps: total,
            };
            emit(serde_json::to_string(&header).expect("header serializes"), &mut summary)?;
        }
        let mut nonfinite_run = 0;
        while self.epoch < self.cfg.epochs.min(stop) && self.opt.step + self.opt.skipped < total {
            let ep = self.epoch + 1;
            let a = alpha(ep, &self.cfg.soft_label);
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(ep as u64);
            order.shuffle(&mut rng);
            let (mut sum_ser, mut sum_re, mut n, mut last_lr) = (0.0, 0.0, 0usize, 0.0);
            for chunk in order.chunks(self.cfg.batch_size) {
                let done = self.opt.step + self.opt.skipped;
                if done >= total {
                    break;
                }
                let lr = lr_at(done, total, &self.cfg)?;
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let seed = self.step_seed();
                let (values, grads) = {
                    let mut g = Graph::training(&self.model.store, seed);
                    let (loss, _) = self.model.batch_loss(&mut g, &batch, a)?;
                    let values = loss.values(&g);
                    let grads = g.backward(loss.total);
                    (values, grads)
                };
                self.model.store.zero_grad();
                self.model.store.accumulate(&grads);
                let finite = values.total.is_finite();
                nonfinite_run = if finite { 0 } else { nonfinite_run + 1 };
                if nonfinite_run >= 2 {
                    return Err(Error::Diverged(format!(
                        "non-finite loss on two consecutive steps (epoch {ep}, step {done})"
                    )));
                }
                let grad_norm = clip_grad_norm(&mut self.model.store, self.cfg.clip_norm);
                let applied = adamw_step(&mut self.model.store, &mut self.opt, lr, &self.cfg);
                if finite {
                    sum_ser += values.loss_ser;
                    sum_re += values.loss_re;
                    n += 1;
                }
                last_lr = lr;
                summary.steps.push(StepRecord {
                    step: done,
                    epoch: ep,
                    loss: values,
                    lr,
                    grad_norm,
                    applied,
                });
            }
            self.epoch = ep;
            let (loss_ser, loss_re) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (sum_ser / n as f64, sum_re / n as f64)
            };
            let report = match val {
                Some(v) if !v.is_empty() => Some(self.validate(v)?),
                _ => None,
            };
            let rec = EpochRecord {
                epoch: ep,
                loss_ser,
                loss_re,
                loss: loss_ser + loss_re,
                alpha: a,
                lr: last_lr,
                val_cell_acc: report.as_ref().map(|r| r.ser.cell_accuracy),
                val_re_f1: report.as_ref().map(|r| r.re.f1),
            };
            if let Some(f1) = rec.val_re_f1 {
                if self.best_val_re_f1.is_none_or(|b| f1 > b) {
                    self.best_val_re_f1 = Some(f1);
                    self.best_epoch = Some(ep);
                    let ckpt = self.checkpoint();
                    if let Some(dir) = out {
                        ckpt.save(&dir.join("best.ckpt"))?;
                    }
                    summary.best = Some(ckpt);
                }
            }
            log::info!(
                "epoch {ep}: loss {:.5} (ser {:.5}, re {:.5}) alpha {a:.2} lr {last_lr:.3e}",
                rec.loss,
                rec.loss_ser,
                rec.loss_re
            );
            emit(serde_json::to_string(&rec).expect("record serializes"), &mut summary)?;
            summary.epochs.push(rec);
            summary.last_validation = report;
            if let Some(dir) = out {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("last.ckpt"))?;
                if self.cfg.checkpoint_every > 0 && ep.is_multiple_of(self.cfg.checkpoint_every) {
                    ckpt.save(&dir.join(format!("epoch{ep:03}.ckpt")))?;
                }
            }
        }
        Ok(summary)
    }

    pub fn validate(&self, val: &[Example]) -> Result<MetricsReport> {
        let preds = self.model.predict_all(val, false, self.cfg.re_threshold, 1)?;
        evaluate(val, &preds, &self.model.labels)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XFPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in scalars.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    pub seed: u64,
    pub epoch: usize,
    pub global_step: u64,
    pub skipped_steps: u64,
    pub best_val_re_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub params: Vec<ParamEntry>,
}

/// Manifest plus flat parameter values and both optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Checkpoint {
    fn capture(s: &Session) -> Self {
        let mut params = Vec::new();
        let (mut values, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (k, p) in s.model.store.iter().enumerate() {
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: values.len(),
            });
            values.extend_from_slice(p.value.data());
            m.extend_from_slice(s.opt.m[k].data());
            v.extend_from_slice(s.opt.v[k].data());
        }
        Checkpoint {
            manifest: Manifest {
                format_version: CHECKPOINT_VERSION,
                model: s.model.config.clone(),
                train: s.cfg.clone(),
                vocab: s.model.vocab.tokens().to_vec(),
                seed: s.cfg.seed,
                epoch: s.epoch,
                global_step: s.opt.step,
                skipped_steps: s.opt.skipped,
                best_val_re_f1: s.best_val_re_f1,
                best_epoch: s.best_epoch,
                params,
            },
            values,
            m,
            v,
        }
    }

    /// Rebuilds the model and optimizer state, checking every parameter
    /// against the architecture the manifest describes.
    pub fn restore(&self) -> Result<(JointModel<f32>, AdamState<f32>)> {
        let man = &self.manifest;
        let vocab = Vocab::from_tokens(man.vocab.clone())?;
        let mut model = JointModel::<f32>::new(man.model.clone(), vocab)?;
        if model.store.len() != man.params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, the model has {}",
                man.params.len(),
                model.store.len()
            )));
        }
        let mut opt = AdamState::new(&model.store);
        opt.step = man.global_step;
        opt.skipped = man.skipped_steps;
        let ids: Vec<_> = model.store.ids().collect();
        for (k, (id, entry)) in ids.into_iter().zip(&man.params).enumerate() {
            let p = model.store.get_mut(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: manifest has {} {:?}, model expects {} {:?}",
                    entry.name,
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let range = entry.offset..entry.offset + p.value.len();
            let src = self.values.get(range.clone()).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {}: payload too short", entry.name))
            })?;
            p.value.data_mut().copy_from_slice(src);
            opt.m[k].data_mut().copy_from_slice(&self.m[range.clone()]);
            opt.v[k].data_mut().copy_from_slice(&self.v[range]);
        }
        Ok((model, opt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(24 + manifest.len() + 12 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for block in [&self.values, &self.m, &self.v] {
            for x in block.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        let take = |at: usize, n: usize| {
            bytes
                .get(at..at + n)
                .ok_or_else(|| err(format!("truncated at byte {at}: need {n} more bytes")))
        };
        if take(0, 8)? != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file".into()));
        }
        let mlen = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(take(12, mlen)?)
            .map_err(|e| err(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "format version {} is not the supported {}",
                manifest.format_version, CHECKPOINT_VERSION
            )));
        }
        let mut at = 12 + mlen;
        let count = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
        at += 8;
        // each entry must end where the next one starts
        let ends = manifest.params.iter().skip(1).map(|p| p.offset).chain([count]);
        for (p, end) in manifest.params.iter().zip(ends) {
            let size = p.shape.iter().product::<usize>();
            if p.offset + size != end {
                return Err(err(format!(
                    "parameter {}: shape {:?} holds {size} scalars but its slot is {}",
                    p.name,
                    p.shape,
                    end as i64 - p.offset as i64
                )));
            }
        }
        if manifest.params.first().is_some_and(|p| p.offset != 0) {
            return Err(err("first parameter does not start at offset 0".into()));
        }
        let read = |at: &mut usize| -> Result<Vec<f32>> {
            let raw = take(*at, 4 * count)?;
            *at += 4 * count;
            Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let values = read(&mut at)?;
        let m = read(&mut at)?;
        let v = read(&mut at)?;
        if at != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Checkpoint { manifest, values, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests;
