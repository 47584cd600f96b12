//! Cell accuracy, relation precision/recall/F1 and span-level BIO F1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, TagSet};
use crate::error::{Error, Result};
use crate::model::{DocPrediction, Example};

/// Counts with the derived rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Rates from counts. An empty prediction set has precision 1, an
    /// empty gold set recall 1, and both empty give F1 1.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if tp + fp + fn_ == 0 {
            1.0
        } else if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn merge(&self, other: &Prf) -> Prf {
        Prf::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    pub value: f64,
    pub ccd: usize,
    pub tcc: usize,
    /// No cells were scored; `value` is 1 by convention.
    pub degenerate: bool,
}

/// Correct cells over total cells. `None` predictions (cells the tagger
/// never saw) are wrong.
pub fn cell_accuracy(pred: &[Option<usize>], gold: &[usize]) -> Result<CellAccuracy> {
    if pred.len() != gold.len() {
        return Err(Error::Precondition(format!(
            "{} predicted cells against {} gold cells",
            pred.len(),
            gold.len()
        )));
    }
    let ccd = pred.iter().zip(gold).filter(|(p, g)| **p == Some(**g)).count();
    Ok(accuracy_from(ccd, gold.len()))
}

fn accuracy_from(ccd: usize, tcc: usize) -> CellAccuracy {
    CellAccuracy {
        value: if tcc == 0 { 1.0 } else { ccd as f64 / tcc as f64 },
        ccd,
        tcc,
        degenerate: tcc == 0,
    }
}

/// Set-based relation scoring; pairs carry whatever scoping the caller
/// needs (for corpora, a document key).
pub fn re_prf1<P: Ord>(pred: &BTreeSet<P>, gold: &BTreeSet<P>) -> Prf {
    let tp = pred.intersection(gold).count();
    Prf::from_counts(tp, pred.len() - tp, gold.len() - tp)
}

/// Maximal `B-X (I-X)*` runs as `(start, end, label)` with `end`
/// exclusive. A stray `I-X` opens a new span.
pub fn bio_spans(tags: &[usize], tagset: &TagSet) -> Vec<(usize, usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        let continues = tagset.is_inside(t) && open.is_some_and(|(_, l)| l == tagset.label_of(t));
        if continues {
            continue;
        }
        if let Some((s, l)) = open.take() {
            spans.push((s, i, l));
        }
        if tagset.is_begin(t) {
            open = Some((i, tagset.label_of(t)));
        } else if tagset.is_inside(t) {
            log::debug!("repairing {} without a begin tag at {i}", tagset.name(t));
            open = Some((i, tagset.label_of(t)));
        }
    }
    if let Some((s, l)) = open {
        spans.push((s, tags.len(), l));
    }
    spans
}

/// Micro-averaged exact span matching over aligned tag sequences.
pub fn bio_micro_f1(pred: &[Vec<usize>], gold: &[Vec<usize>], tagset: &TagSet) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::Precondition(format!(
            "{} predicted sequences against {} gold sequences",
            pred.len(),
            gold.len()
        )));
    }
    let mut total = Prf::from_counts(0, 0, 0);
    for (k, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Precondition(format!(
                "sequence {k}: {} predicted tags against {} gold tags",
                p.len(),
                g.len()
            )));
        }
        let ps: BTreeSet<_> = bio_spans(p, tagset).into_iter().collect();
        let gs: BTreeSet<_> = bio_spans(g, tagset).into_iter().collect();
        total = total.merge(&re_prf1(&ps, &gs));
    }
    Ok(total)
}

/// One-vs-rest counts per label over cells.
pub fn per_label_prf(pred: &[Option<usize>], gold: &[usize], labels: &LabelSet) -> BTreeMap<String, Prf> {
    labels
        .names()
        .iter()
        .enumerate()
        .map(|(l, name)| {
            let mut c = (0, 0, 0);
            for (p, &g) in pred.iter().zip(gold) {
                match (*p == Some(l), g == l) {
                    (true, true) => c.0 += 1,
                    (true, false) => c.1 += 1,
                    (false, true) => c.2 += 1,
                    _ => {}
                }
            }
            (name.clone(), Prf::from_counts(c.0, c.1, c.2))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerReport {
    pub cell_accuracy: f64,
    pub ccd: usize,
    pub tcc: usize,
    pub degenerate: bool,
    pub token_accuracy: f64,
    pub bio_micro_f1: Prf,
    pub per_label: BTreeMap<String, Prf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub documents: usize,
    pub ser: SerReport,
    pub re: Prf,
}

impl MetricsReport {
    /// Pretty JSON with a fixed key order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json(&e, s.as_bytes()))
    }
}

/// Scores predictions against the examples they were made from.
pub fn evaluate(examples: &[Example], preds: &[DocPrediction], labels: &LabelSet) -> Result<MetricsReport> {
    if examples.len() != preds.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} documents",
            preds.len(),
            examples.len()
        )));
    }
    let tagset = labels.tags();
    let (mut pred_cells, mut gold_cells) = (Vec::new(), Vec::new());
    let (mut pred_tags, mut gold_tags) = (Vec::new(), Vec::new());
    let (mut pred_rel, mut gold_rel) = (BTreeSet::new(), BTreeSet::new());
    for (k, (ex, p)) in examples.iter().zip(preds).enumerate() {
        if ex.doc.id != p.doc_id {
            return Err(Error::Precondition(format!(
                "prediction {k} is for {}, expected {}",
                p.doc_id, ex.doc.id
            )));
        }
        pred_cells.extend_from_slice(&p.cell_labels);
        gold_cells.extend_from_slice(&ex.gold_labels);
        pred_tags.push(p.token_tags.clone());
        gold_tags.push(ex.tokens.tags.clone());
        pred_rel.extend(p.relations.iter().map(|r| (k, r.head_id, r.tail_id)));
        gold_rel.extend(ex.gold_pairs.iter().map(|&(h, t)| (k, h, t)));
    }
    let ca = cell_accuracy(&pred_cells, &gold_cells)?;
    let bio = bio_micro_f1(&pred_tags, &gold_tags, &tagset)?;
    let (hits, total) = pred_tags.iter().zip(&gold_tags).fold((0, 0), |(h, n), (p, g)| {
        (h + p.iter().zip(g).filter(|(a, b)| a == b).count(), n + g.len())
    });
    Ok(MetricsReport {
        documents: examples.len(),
        ser: SerReport {
            cell_accuracy: ca.value,
            ccd: ca.ccd,
            tcc: ca.tcc,
            degenerate: ca.degenerate,
            token_accuracy: if total == 0 { 1.0 } else { hits as f64 / total as f64 },
            bio_micro_f1: bio,
            per_label: per_label_prf(&pred_cells, &gold_cells, labels),
        },
        re: re_prf1(&pred_rel, &gold_rel),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cell_accuracy_examples() {
        let gold = vec![1usize; 10];
        let all: Vec<_> = gold.iter().map(|&g| Some(g)).collect();
        assert_eq!(cell_accuracy(&all, &gold).unwrap().value, 1.0);
        let mut nine = all.clone();
        nine[3] = Some(2);
        assert_eq!(cell_accuracy(&nine, &gold).unwrap().value, 0.9);
        let mut skipped = all;
        skipped[0] = None;
        assert_eq!(cell_accuracy(&skipped, &gold).unwrap().ccd, 9);
        let empty = cell_accuracy(&[], &[]).unwrap();
        assert!(empty.degenerate && empty.value == 1.0);
        assert!(cell_accuracy(&[None], &[]).is_err());
    }

    #[test]
    fn re_examples() {
        let set = |v: &[(u32, u32)]| v.iter().copied().collect::<BTreeSet<_>>();
        let same = re_prf1(&set(&[(1, 2), (3, 4)]), &set(&[(1, 2), (3, 4)]));
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let r = re_prf1(&set(&[(1, 2), (3, 4), (5, 6)]), &set(&[(1, 2), (3, 4), (7, 8)]));
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 1));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let none = re_prf1(&set(&[]), &set(&[(1, 2)]));
        assert_eq!((none.precision, none.recall, none.f1), (1.0, 0.0, 0.0));
        let both = re_prf1::<(u32, u32)>(&set(&[]), &set(&[]));
        assert_eq!(both.f1, 1.0);
    }

    #[test]
    fn bio_examples() {
        let tags = LabelSet::xfund().tags();
        let bq = tags.index("B-QUESTION").unwrap();
        let iq = tags.index("I-QUESTION").unwrap();
        let gold = vec![vec![bq, iq]];
        assert_eq!(bio_micro_f1(&gold, &gold, &tags).unwrap().f1, 1.0);
        let r = bio_micro_f1(&[vec![bq, 0]], &gold, &tags).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.f1), (0, 1, 1, 0.0));
    }

    #[test]
    fn stray_inside_opens_a_span() {
        let tags = LabelSet::xfund().tags();
        let bq = tags.index("B-QUESTION").unwrap();
        let iq = tags.index("I-QUESTION").unwrap();
        let ia = tags.index("I-ANSWER").unwrap();
        let l = |n: &str| LabelSet::xfund().index(n).unwrap();
        assert_eq!(
            bio_spans(&[iq, iq, 0, bq, ia], &tags),
            vec![(0, 2, l("QUESTION")), (3, 4, l("QUESTION")), (4, 5, l("ANSWER"))]
        );
    }

    #[test]
    fn report_round_trips() {
        let report = MetricsReport {
            documents: 2,
            ser: SerReport {
                cell_accuracy: 0.75,
                ccd: 3,
                tcc: 4,
                degenerate: false,
                token_accuracy: 0.8,
                bio_micro_f1: Prf::from_counts(2, 1, 1),
                per_label: per_label_prf(&[Some(0), Some(1)], &[0, 2], &LabelSet::xfund()),
            },
            re: Prf::from_counts(1, 0, 2),
        };
        let json = report.to_json();
        assert_eq!(MetricsReport::from_json(&json).unwrap(), report);
        assert!(json.find("\"documents\"").unwrap() < json.find("\"ser\"").unwrap());
    }

    fn pairs() -> impl Strategy<Value = BTreeSet<(u32, u32)>> {
        proptest::collection::btree_set((0u32..10, 0u32..10), 0..20)
    }

    fn brute(pred: &BTreeSet<(u32, u32)>, gold: &BTreeSet<(u32, u32)>) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for h in 0..10 {
            for t in 0..10 {
                match (pred.contains(&(h, t)), gold.contains(&(h, t))) {
                    (true, true) => c.0 += 1,
                    (true, false) => c.1 += 1,
                    (false, true) => c.2 += 1,
                    _ => {}
                }
            }
        }
        c
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn re_matches_brute_force(pred in pairs(), gold in pairs()) {
            let r = re_prf1(&pred, &gold);
            prop_assert_eq!((r.tp, r.fp, r.fn_), brute(&pred, &gold));
            prop_assert!((0.0..=1.0).contains(&r.f1));
            if r.tp + r.fp > 0 && r.tp + r.fn_ > 0 && r.precision + r.recall > 0.0 {
                prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
                prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
            }
        }

        #[test]
        fn bio_counts_are_additive(
            a in proptest::collection::vec((0usize..7, 0usize..7), 0..12),
            b in proptest::collection::vec((0usize..7, 0usize..7), 0..12),
        ) {
            let tags = LabelSet::xfund().tags();
            let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
            let (pa, ga) = split(&a);
            let (pb, gb) = split(&b);
            let separate = bio_micro_f1(&[pa.clone(), pb.clone()], &[ga.clone(), gb.clone()], &tags).unwrap();
            let one = bio_micro_f1(&[pa], &[ga], &tags).unwrap();
            let two = bio_micro_f1(&[pb], &[gb], &tags).unwrap();
            prop_assert_eq!(separate, one.merge(&two));
        }
    }
}
