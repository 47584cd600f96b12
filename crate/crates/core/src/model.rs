//! The joint model: encoder (or imported states) plus both heads, and the
//! per-document preprocessing it consumes.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, ParamStore, Real, Var};
use crate::corpus::{tokenize, Document, LabelSet, TokenizedDocument, Vocab};
use crate::encoder::{visual_features, Encoder, EncoderConfig, PrecomputedStates, VisualProvider};
use crate::error::{Error, Result};
use crate::heads::{argmax, candidate_pairs, joint_loss, Heads, HeadsConfig, LossVars, SerVars};

/// Where token hidden states come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Toy,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub backbone: Backbone,
    pub label_set: String,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            heads: HeadsConfig::default(),
            backbone: Backbone::Toy,
            label_set: "xfund".into(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn labels(&self) -> Result<LabelSet> {
        LabelSet::by_name(&self.label_set)
            .ok_or_else(|| Error::Precondition(format!("unknown label set {:?}", self.label_set)))
    }
}

/// A document with everything the model reads from it.
#[derive(Clone, Debug)]
pub struct Example {
    pub doc: Document,
    pub tokens: TokenizedDocument,
    pub visual: Array<f64>,
    /// Gold label index of every document cell.
    pub gold_labels: Vec<usize>,
    pub gold_pairs: BTreeSet<(u32, u32)>,
}

impl Example {
    pub fn new(
        doc: &Document,
        vocab: &Vocab,
        labels: &LabelSet,
        max_len: usize,
        visual: &dyn VisualProvider,
    ) -> Result<Self> {
        let tokens = tokenize(doc, vocab, labels, max_len);
        let gold_labels = doc
            .cells
            .iter()
            .map(|c| {
                labels.index(&c.label).ok_or_else(|| Error::Schema {
                    doc: doc.id.clone(),
                    cell: Some(c.id),
                    message: format!("label {:?} not in the {} label set", c.label, labels.name),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Example {
            visual: visual_features(doc, &tokens, visual),
            doc: doc.clone(),
            tokens,
            gold_labels,
            gold_pairs: doc.relations.iter().map(|r| (r.head_id, r.tail_id)).collect(),
        })
    }
}

pub fn prepare(
    docs: &[Document],
    vocab: &Vocab,
    labels: &LabelSet,
    max_len: usize,
    visual: &dyn VisualProvider,
) -> Result<Vec<Example>> {
    docs.iter().map(|d| Example::new(d, vocab, labels, max_len, visual)).collect()
}

/// Labels that feed the relation branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelSource {
    /// Training: gold labels pick candidates and the hard embedding, mixed
    /// with the soft embedding at weight `alpha`.
    Gold { alpha: f64 },
    /// Inference: SER argmax labels, hard embedding only.
    Predicted,
    /// Inference with gold labels for candidates and embeddings.
    GoldCandidates,
}

/// Graph nodes of one document's forward pass.
#[derive(Clone, Debug)]
pub struct DocOutput {
    pub ser: SerVars,
    /// Label used for each entity row.
    pub row_labels: Vec<usize>,
    /// Candidate pairs as entity-row indices.
    pub pairs: Vec<(usize, usize)>,
    pub pair_logits: Option<Var>,
}

impl DocOutput {
    /// `(head id, tail id)` of every candidate pair.
    pub fn pair_ids(&self, doc: &Document) -> Vec<(u32, u32)> {
        self.pairs
            .iter()
            .map(|&(i, j)| (doc.cells[self.ser.rows[i]].id, doc.cells[self.ser.rows[j]].id))
            .collect()
    }
}

/// Counts gathered while building a batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub tokens: usize,
    pub pairs: usize,
    /// Gold links whose endpoints are not both candidates.
    pub unreachable_gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedRelation {
    pub head_id: u32,
    pub tail_id: u32,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocPrediction {
    pub doc_id: String,
    /// Predicted label per document cell; `None` for cells without tokens.
    pub cell_labels: Vec<Option<usize>>,
    pub cell_confidence: Vec<Option<f64>>,
    pub token_tags: Vec<usize>,
    /// Every scored candidate with its link probability.
    pub scored_pairs: Vec<PredictedRelation>,
    /// Candidates above the threshold.
    pub relations: Vec<PredictedRelation>,
}

pub struct JointModel<T: Real> {
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub encoder: Option<Encoder>,
    pub heads: Heads,
    precomputed: Option<Arc<PrecomputedStates>>,
}

impl<T: Real> JointModel<T> {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        let labels = config.labels()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = match config.backbone {
            Backbone::Toy => Some(Encoder::new(&mut store, &config.encoder, vocab.len(), &mut rng)?),
            Backbone::Precomputed => None,
        };
        let heads = Heads::new(&mut store, config.encoder.d_model, &labels, &config.heads, &mut rng)?;
        Ok(JointModel {
            config,
            labels,
            vocab,
            store,
            encoder,
            heads,
            precomputed: None,
        })
    }

    /// Supplies imported hidden states for the precomputed backbone.
    pub fn attach_precomputed(&mut self, states: Arc<PrecomputedStates>) -> Result<()> {
        states.check_dim(self.config.encoder.d_model)?;
        self.precomputed = Some(states);
        Ok(())
    }

    pub fn hidden(&self, g: &mut Graph<'_, T>, ex: &Example) -> Result<Var> {
        match (&self.encoder, &self.precomputed) {
            (Some(enc), _) => enc.encode(g, &ex.tokens, &ex.visual.cast()),
            (None, Some(states)) => {
                let h = states.get(&ex.doc.id).ok_or_else(|| {
                    Error::Precondition(format!("no precomputed states for document {}", ex.doc.id))
                })?;
                if h.rows() != ex.tokens.len() {
                    return Err(Error::Precondition(format!(
                        "document {}: {} state rows for {} tokens",
                        ex.doc.id,
                        h.rows(),
                        ex.tokens.len()
                    )));
                }
                Ok(g.constant(h.cast()))
            }
            (None, None) => Err(Error::Precondition("precomputed backbone without states".into())),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, ex: &Example, source: LabelSource) -> Result<DocOutput> {
        let h = self.hidden(g, ex)?;
        let ser = self
            .heads
            .ser_forward(g, h, &ex.tokens.cell_index, ex.doc.cells.len())?;
        let (row_labels, alpha): (Vec<usize>, f64) = match source {
            LabelSource::Gold { alpha } => (ser.rows.iter().map(|&c| ex.gold_labels[c]).collect(), alpha),
            LabelSource::GoldCandidates => (ser.rows.iter().map(|&c| ex.gold_labels[c]).collect(), 0.0),
            LabelSource::Predicted => {
                let v = g.value(ser.cell_logits);
                ((0..ser.rows.len()).map(|r| argmax(v.row(r))).collect(), 0.0)
            }
        };
        let pairs = candidate_pairs(&row_labels, &self.labels);
        let pair_logits = if pairs.is_empty() {
            None
        } else {
            let le = self.heads.label_embedding(g, &row_labels, ser.cell_logits, alpha)?;
            let e = self.heads.entity_vectors(g, h, &ser.groups, le)?;
            let d = self.heads.bilstm_decode(g, e)?;
            Some(self.heads.pair_scores(g, d, &pairs)?)
        };
        Ok(DocOutput {
            ser,
            row_labels,
            pairs,
            pair_logits,
        })
    }

    /// Joint loss over a batch: token cross-entropy averaged over every
    /// token of the batch, pair cross-entropy over every candidate pair.
    pub fn batch_loss(&self, g: &mut Graph<'_, T>, batch: &[&Example], alpha: f64) -> Result<(LossVars, BatchStats)> {
        let mut stats = BatchStats::default();
        let mut tag_parts = Vec::new();
        let mut tags = Vec::new();
        let mut pair_parts = Vec::new();
        let mut pair_gold = Vec::new();
        for ex in batch {
            if ex.tokens.is_empty() {
                continue;
            }
            let out = self.forward(g, ex, LabelSource::Gold { alpha })?;
            tag_parts.push(out.ser.tag_logits);
            tags.extend_from_slice(&ex.tokens.tags);
            let ids = out.pair_ids(&ex.doc);
            let mut reached = 0;
            for id in &ids {
                let hit = ex.gold_pairs.contains(id);
                reached += hit as usize;
                pair_gold.push(hit as usize);
            }
            stats.unreachable_gold += ex.gold_pairs.len() - reached;
            if let Some(p) = out.pair_logits {
                pair_parts.push(p);
            }
        }
        if tag_parts.is_empty() {
            return Err(Error::Precondition("batch has no tokens".into()));
        }
        stats.tokens = tags.len();
        stats.pairs = pair_gold.len();
        if stats.unreachable_gold > 0 {
            log::warn!("{} gold links are not candidate pairs", stats.unreachable_gold);
        }
        let tag_logits = g.stack_rows(&tag_parts)?;
        let pair_logits = if pair_parts.is_empty() {
            None
        } else {
            Some(g.stack_rows(&pair_parts)?)
        };
        let loss = joint_loss(g, tag_logits, &tags, pair_logits, &pair_gold)?;
        Ok((loss, stats))
    }

    /// Evaluation-mode prediction for one document.
    pub fn predict(&self, ex: &Example, gold_candidates: bool, threshold: f64) -> Result<DocPrediction> {
        let n = ex.doc.cells.len();
        let mut pred = DocPrediction {
            doc_id: ex.doc.id.clone(),
            cell_labels: vec![None; n],
            cell_confidence: vec![None; n],
            token_tags: Vec::new(),
            scored_pairs: Vec::new(),
            relations: Vec::new(),
        };
        if ex.tokens.is_empty() {
            return Ok(pred);
        }
        let mut g = Graph::new(&self.store);
        let source = if gold_candidates {
            LabelSource::GoldCandidates
        } else {
            LabelSource::Predicted
        };
        let out = self.forward(&mut g, ex, source)?;
        let tl = g.value(out.ser.tag_logits);
        pred.token_tags = (0..tl.rows()).map(|r| argmax(tl.row(r))).collect();
        let cl = g.value(out.ser.cell_logits);
        for (r, &c) in out.ser.rows.iter().enumerate() {
            let row: Vec<f64> = cl.row(r).iter().map(|v| v.as_f64()).collect();
            let best = argmax(&row);
            pred.cell_labels[c] = Some(best);
            pred.cell_confidence[c] = Some(softmax(&row)[best]);
        }
        if let Some(p) = out.pair_logits {
            let pv = g.value(p);
            for (k, (h, t)) in out.pair_ids(&ex.doc).into_iter().enumerate() {
                let row: Vec<f64> = pv.row(k).iter().map(|v| v.as_f64()).collect();
                let rel = PredictedRelation {
                    head_id: h,
                    tail_id: t,
                    prob: softmax(&row)[1],
                };
                if rel.prob > threshold {
                    pred.relations.push(rel.clone());
                }
                pred.scored_pairs.push(rel);
            }
        }
        Ok(pred)
    }

    /// Predictions for every example, in input order. More than one thread
    /// fans documents out over a local pool.
    pub fn predict_all(
        &self,
        examples: &[Example],
        gold_candidates: bool,
        threshold: f64,
        threads: usize,
    ) -> Result<Vec<DocPrediction>> {
        if threads <= 1 {
            return examples.iter().map(|e| self.predict(e, gold_candidates, threshold)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
        pool.install(|| {
            examples
                .par_iter()
                .map(|e| self.predict(e, gold_candidates, threshold))
                .collect()
        })
    }
}

/// Inference thread cap from `XFP_THREADS`; 1 when unset or invalid.
pub fn thread_cap() -> usize {
    std::env::var("XFP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
