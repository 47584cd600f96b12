//! Entity labelling and relation scoring on top of the encoder states.
//!
//! SER: `H_ser = tanh(Dense_ser(H))`, token logits `MLP_ser(H_ser)` over BIO
//! tags, cell logits = mean of the cell's token logits folded into label
//! space.
//!
//! RE: `H_re = tanh(Dense_re(H))` is mean-pooled per cell and joined with a
//! label embedding; a Bi-LSTM runs over the cells in reading order; head
//! and tail MLPs feed a biaffine scorer with two classes (no link, link).
//!
//! The label embedding is either a hard row of `LE_weight` or, once the
//! soft-label schedule has started, a blend of that row with the
//! prediction-weighted mixture `softmax(logits)·LE_weight / N`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier_uniform, Array, Graph, ParamId, ParamStore, Real, Var};
use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::layers::{Dense, Lstm, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsConfig {
    pub d_label: usize,
    pub d_biaff: usize,
    /// Run the Bi-LSTM over entity vectors; off scores the entity vectors
    /// directly.
    pub use_decoder: bool,
    /// Divide the soft label embedding by the label count.
    pub scale_soft_by_labels: bool,
    pub dropout: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            d_label: 32,
            d_biaff: 64,
            use_decoder: true,
            scale_soft_by_labels: true,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelSchedule {
    pub ep_start: usize,
    pub ep_warm: usize,
    pub enabled: bool,
}

impl Default for SoftLabelSchedule {
    fn default() -> Self {
        SoftLabelSchedule {
            ep_start: 30,
            ep_warm: 10,
            enabled: true,
        }
    }
}

impl SoftLabelSchedule {
    pub fn check(&self) -> Result<()> {
        if self.ep_warm == 0 {
            return Err(Error::Precondition("ep_warm must be at least 1".into()));
        }
        Ok(())
    }
}

/// `α = clamp(min(1, (ep − ep_start) / ep_warm), 0, 1)`; zero when the
/// schedule is disabled.
pub fn alpha(ep: usize, s: &SoftLabelSchedule) -> f64 {
    if !s.enabled {
        return 0.0;
    }
    let a = (ep as f64 - s.ep_start as f64) / s.ep_warm as f64;
    a.min(1.0).clamp(0.0, 1.0)
}

/// `softmax(logits) · table / N` row by row (`/ N` only when `scale`).
pub fn soft_label_embedding<T: Real>(logits: &Array<T>, table: &Array<T>, scale: bool) -> Result<Array<T>> {
    let n = table.rows();
    if logits.cols() != n {
        return Err(Error::Precondition(format!(
            "{} logits for a table of {n} labels",
            logits.cols()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.constant(logits.clone());
    let t = g.constant(table.clone());
    let v = soft_mix(&mut g, l, t, scale)?;
    Ok(g.value(v).clone())
}

fn soft_mix<T: Real>(g: &mut Graph<'_, T>, logits: Var, table: Var, scale: bool) -> Result<Var> {
    let p = g.softmax(logits);
    let mixed = g.matmul(p, table)?;
    if scale {
        let n = g.shape(table)[0];
        Ok(g.scale(mixed, T::one() / T::of(n as f64)))
    } else {
        Ok(mixed)
    }
}

/// `LE_hl` when `α = 0`, else `α·LE_sl + (1 − α)·LE_hl`.
pub fn blend_label_embedding<T: Real>(hard: &Array<T>, soft: &Array<T>, alpha: f64) -> Result<Array<T>> {
    if hard.shape() != soft.shape() {
        return Err(Error::Precondition(format!(
            "label embeddings shaped {:?} and {:?}",
            hard.shape(),
            soft.shape()
        )));
    }
    if alpha <= 0.0 {
        return Ok(hard.clone());
    }
    let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
    let data = hard.data().iter().zip(soft.data()).map(|(&h, &s)| a * s + b * h).collect();
    Ok(Array::new(hard.shape().to_vec(), data)?)
}

/// Ordered `(i, j)` with `i ≠ j`, label `i` head-capable and label `j`
/// tail-capable; ascending `i`, then `j`.
pub fn candidate_pairs(cell_labels: &[usize], labels: &LabelSet) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &li) in cell_labels.iter().enumerate() {
        if !labels.is_head(li) {
            continue;
        }
        for (j, &lj) in cell_labels.iter().enumerate() {
            if i != j && labels.is_tail(lj) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Scalar losses of one step, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ser: Var,
    pub re: Var,
    pub total: Var,
}

/// Plain values of a [`LossVars`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_ser: f64,
    pub loss_re: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        LossBreakdown {
            loss_ser: g.value(self.ser).item().as_f64(),
            loss_re: g.value(self.re).item().as_f64(),
            total: g.value(self.total).item().as_f64(),
        }
    }
}

/// Mean token cross-entropy plus mean pair cross-entropy. With no pairs
/// the relation term is the constant 0.
pub fn joint_loss<T: Real>(
    g: &mut Graph<'_, T>,
    tag_logits: Var,
    gold_tags: &[usize],
    pair_logits: Option<Var>,
    pair_gold: &[usize],
) -> Result<LossVars> {
    let targets: Vec<Option<usize>> = gold_tags.iter().map(|&t| Some(t)).collect();
    let ser = g.cross_entropy(tag_logits, &targets)?;
    let re = match pair_logits {
        Some(p) if !pair_gold.is_empty() => {
            let targets: Vec<Option<usize>> = pair_gold.iter().map(|&t| Some(t)).collect();
            g.cross_entropy(p, &targets)?
        }
        _ => g.constant(Array::scalar(T::zero())),
    };
    let total = g.add(ser, re)?;
    Ok(LossVars { ser, re, total })
}

/// Parameter handles of both heads.
#[derive(Clone, Debug)]
pub struct Heads {
    pub config: HeadsConfig,
    pub d_model: usize,
    pub num_labels: usize,
    pub num_tags: usize,
    pub dense_ser: Dense,
    pub mlp_ser: Dense,
    pub dense_re: Dense,
    pub label_table: ParamId,
    pub lstm_fwd: Option<Lstm>,
    pub lstm_bwd: Option<Lstm>,
    pub mlp_head: Mlp,
    pub mlp_tail: Mlp,
    /// `[d_biaff, 2, d_biaff]`.
    pub biaff_u: ParamId,
    /// `[2, 2·d_biaff]`.
    pub biaff_w: ParamId,
    pub biaff_b: ParamId,
    // [tags, labels] 0/1 matrix folding BIO channels into labels
    fold: Vec<f64>,
}

/// Entity-level tensors of one document.
#[derive(Clone, Debug)]
pub struct SerVars {
    pub tag_logits: Var,
    /// `[cells, labels]`, rows follow `rows`.
    pub cell_logits: Var,
    /// Document cell index of every row of `cell_logits`.
    pub rows: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl Heads {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d_model: usize,
        labels: &LabelSet,
        config: &HeadsConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !d_model.is_multiple_of(2) && config.use_decoder {
            return Err(Error::Precondition(format!("d_model {d_model} must be even for the Bi-LSTM")));
        }
        if config.d_label == 0 || config.d_biaff == 0 {
            return Err(Error::Precondition("d_label and d_biaff must be positive".into()));
        }
        let tags = labels.tags();
        let (nl, nt, dl, db) = (labels.len(), tags.len(), config.d_label, config.d_biaff);
        let dense_ser = Dense::new(store, "ser.dense", d_model, d_model, rng)?;
        let mlp_ser = Dense::new(store, "ser.mlp", d_model, nt, rng)?;
        let dense_re = Dense::new(store, "re.dense", d_model, d_model, rng)?;
        let label_table = store.add("re.label_embedding", xavier_uniform(&[nl, dl], nl, dl, rng))?;
        let entity = d_model + dl;
        let (lstm_fwd, lstm_bwd, decoded) = if config.use_decoder {
            let h = d_model / 2;
            (
                Some(Lstm::new(store, "re.lstm_fwd", entity, h, rng)?),
                Some(Lstm::new(store, "re.lstm_bwd", entity, h, rng)?),
                d_model,
            )
        } else {
            (None, None, entity)
        };
        let mlp_head = Mlp::new(store, "re.mlp_head", decoded, db, rng)?;
        let mlp_tail = Mlp::new(store, "re.mlp_tail", decoded, db, rng)?;
        let biaff_u = store.add("re.biaffine.u", xavier_uniform(&[db, 2, db], db, db, rng))?;
        let biaff_w = store.add("re.biaffine.w", xavier_uniform(&[2, 2 * db], 2 * db, 2, rng))?;
        let biaff_b = store.add("re.biaffine.b", Array::zeros(&[2]))?;
        let mut fold = vec![0.0; nt * nl];
        for t in 0..nt {
            fold[t * nl + tags.label_of(t)] = 1.0;
        }
        Ok(Heads {
            config: config.clone(),
            d_model,
            num_labels: nl,
            num_tags: nt,
            dense_ser,
            mlp_ser,
            dense_re,
            label_table,
            lstm_fwd,
            lstm_bwd,
            mlp_head,
            mlp_tail,
            biaff_u,
            biaff_w,
            biaff_b,
            fold,
        })
    }

    /// Token logits and per-cell label logits. `cell_index[k]` is the
    /// document cell of token `k`; cells without tokens get no row.
    pub fn ser_forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        h: Var,
        cell_index: &[usize],
        num_cells: usize,
    ) -> Result<SerVars> {
        if g.shape(h)[0] != cell_index.len() {
            return Err(Error::Precondition(format!(
                "{} hidden rows for {} tokens",
                g.shape(h)[0],
                cell_index.len()
            )));
        }
        let x = self.dense_ser.forward(g, h)?;
        let x = g.tanh(x);
        let x = g.dropout(x, self.config.dropout);
        let tag_logits = self.mlp_ser.forward(g, x)?;

        let mut members = vec![Vec::new(); num_cells];
        for (k, &c) in cell_index.iter().enumerate() {
            members[c].push(k);
        }
        let rows: Vec<usize> = (0..num_cells).filter(|&c| !members[c].is_empty()).collect();
        let groups: Vec<Vec<usize>> = rows.iter().map(|&c| std::mem::take(&mut members[c])).collect();
        let cell_logits = if groups.is_empty() {
            g.constant(Array::zeros(&[0, self.num_labels]))
        } else {
            let mean = g.mean_groups(tag_logits, &groups)?;
            let fold = g.constant(Array::from_f64(&[self.num_tags, self.num_labels], &self.fold)?);
            g.matmul(mean, fold)?
        };
        Ok(SerVars {
            tag_logits,
            cell_logits,
            rows,
            groups,
        })
    }

    /// Label embeddings of the entity rows: hard rows of `LE_weight` for
    /// `labels`, blended with the soft mixture of `cell_logits` when
    /// `alpha > 0`.
    pub fn label_embedding<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        labels: &[usize],
        cell_logits: Var,
        alpha: f64,
    ) -> Result<Var> {
        let hard = g.embedding(self.label_table, labels)?;
        if alpha <= 0.0 {
            return Ok(hard);
        }
        let table = g.param(self.label_table);
        let soft = soft_mix(g, cell_logits, table, self.config.scale_soft_by_labels)?;
        let soft = g.scale(soft, T::of(alpha));
        let hard = g.scale(hard, T::of(1.0 - alpha));
        Ok(g.add(soft, hard)?)
    }

    /// `e_i = [mean(H_re over the cell's tokens); LE_i]`.
    pub fn entity_vectors<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        h: Var,
        groups: &[Vec<usize>],
        label_emb: Var,
    ) -> Result<Var> {
        let x = self.dense_re.forward(g, h)?;
        let x = g.tanh(x);
        let pooled = g.mean_groups(x, groups)?;
        Ok(g.concat_cols(&[pooled, label_emb])?)
    }

    /// Bi-LSTM over entity rows in order; `[fwd_i; bwd_i]` per row. Without
    /// the decoder the entity vectors pass through unchanged.
    pub fn bilstm_decode<T: Real>(&self, g: &mut Graph<'_, T>, entities: Var) -> Result<Var> {
        let (Some(fwd), Some(bwd)) = (&self.lstm_fwd, &self.lstm_bwd) else {
            return Ok(entities);
        };
        let n = g.shape(entities)[0];
        if n == 0 {
            return Ok(g.constant(Array::zeros(&[0, fwd.hidden + bwd.hidden])));
        }
        let order: Vec<usize> = (0..n).collect();
        let f = fwd.run(g, entities, &order)?;
        let rev: Vec<usize> = order.iter().rev().copied().collect();
        let mut b = bwd.run(g, entities, &rev)?;
        b.reverse();
        let f = g.stack_rows(&f)?;
        let b = g.stack_rows(&b)?;
        Ok(g.concat_cols(&[f, b])?)
    }

    /// `[P, 2]` logits for `pairs` of decoded rows.
    pub fn pair_scores<T: Real>(&self, g: &mut Graph<'_, T>, decoded: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let x = g.dropout(decoded, self.config.dropout);
        let heads = self.mlp_head.forward(g, x)?;
        let tails = self.mlp_tail.forward(g, x)?;
        let hi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ti: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let hh = g.select_rows(heads, &hi)?;
        let ht = g.select_rows(tails, &ti)?;
        self.biaffine(g, hh, ht)
    }

    /// `h_headᵀ·U·h_tail + W·[h_head; h_tail] + b`, row by row.
    pub fn biaffine<T: Real>(&self, g: &mut Graph<'_, T>, hh: Var, ht: Var) -> Result<Var> {
        let db = self.config.d_biaff;
        let u = g.param(self.biaff_u);
        let u = g.reshape(u, &[db, 2 * db])?;
        let m = g.matmul(hh, u)?;
        let bil = g.bilinear_rows(m, ht, 2)?;
        let w = g.param(self.biaff_w);
        let b = g.param(self.biaff_b);
        let cat = g.concat_cols(&[hh, ht])?;
        let lin = g.affine(cat, w, Some(b))?;
        Ok(g.add(bil, lin)?)
    }
}

/// Cell label from folded logits, ties to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
