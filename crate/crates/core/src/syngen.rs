//! Synthetic key-value forms.
//!
//! Documents are laid out on a grid of slots read row by row. A row holds
//! one or more question/answer groups: the question sits in a slot and its
//! answers fill the slots directly to its right. Header and standalone
//! cells may also appear. Every label draws its words from its own pool.
//!
//! Randomness comes from ChaCha8 seeded with [`SynSpec::seed`]; document
//! `i` uses stream `i`, so documents can be generated independently and the
//! output never depends on the platform.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{BBox, Cell, Document, LabelSet, PageImage, Relation, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SynSpec {
    pub seed: u64,
    pub num_docs: usize,
    pub rows: RangeInclusive<usize>,
    pub cols: RangeInclusive<usize>,
    /// Target number of cells per document.
    pub cells: RangeInclusive<usize>,
    /// Words per cell.
    pub words: RangeInclusive<usize>,
    /// Probability that a question gets two or more answers.
    pub one_to_many_frac: f64,
    /// Probability that a free slot holds a standalone (non-linked) cell.
    pub standalone_frac: f64,
    /// Probability that a document opens with a header row.
    pub header_frac: f64,
    pub page_width: u32,
    pub page_height: u32,
    pub labels: LabelSet,
    /// Word pool per label name; labels without an entry get generated words.
    pub pools: BTreeMap<String, Vec<String>>,
    pub split: Split,
    pub lang: String,
    pub id_prefix: String,
}

impl SynSpec {
    pub fn new(labels: LabelSet) -> Self {
        let pools = labels
            .names()
            .iter()
            .map(|n| (n.clone(), default_pool(n)))
            .collect();
        SynSpec {
            seed: 7,
            num_docs: 10,
            rows: 5..=7,
            cols: 5..=6,
            cells: 8..=14,
            words: 1..=2,
            one_to_many_frac: 0.05,
            standalone_frac: 0.1,
            header_frac: 0.5,
            page_width: 1000,
            page_height: 1000,
            labels,
            pools,
            split: Split::Train,
            lang: "en".into(),
            id_prefix: "syn".into(),
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.num_docs == 0 {
            return bad("num_docs must be at least 1".into());
        }
        for (name, f) in [
            ("one_to_many_frac", self.one_to_many_frac),
            ("standalone_frac", self.standalone_frac),
            ("header_frac", self.header_frac),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} outside [0, 1]"));
            }
        }
        if self.rows.is_empty() || self.cols.is_empty() || self.cells.is_empty() || self.words.is_empty() {
            return bad("empty range in spec".into());
        }
        if *self.rows.start() == 0 || *self.cols.start() == 0 || *self.words.start() == 0 {
            return bad("rows, cols and words must be at least 1".into());
        }
        if self.page_width == 0 || self.page_height == 0 {
            return bad("page size must be positive".into());
        }
        for name in self.labels.names() {
            if self.pools.get(name).is_some_and(|p| p.is_empty()) {
                return bad(format!("empty word pool for {name}"));
            }
        }
        let heads = (0..self.labels.len()).any(|l| self.labels.is_head(l));
        let tails = (0..self.labels.len()).any(|l| self.labels.is_tail(l));
        if !heads || !tails {
            return bad(format!("label set {} cannot form relations", self.labels.name));
        }
        Ok(())
    }
}

fn default_pool(label: &str) -> Vec<String> {
    let words: &[&str] = match label {
        "QUESTION" => &[
            "name", "date", "phone", "address", "email", "city", "state", "zip", "company", "title", "account",
            "amount", "signature", "department", "fax", "code", "total", "birth", "gender", "country", "age",
            "occupation", "reference", "period", "branch",
        ],
        "ANSWER" => &[
            "smith", "jones", "lee", "garcia", "chen", "acme", "north", "blue", "river", "oak", "maple", "green",
            "hill", "park", "lake", "stone", "gold", "bright", "swift", "hale", "reed", "moss", "vale", "cross",
        ],
        "HEADER" => &[
            "application", "form", "report", "registration", "summary", "invoice", "statement", "request",
        ],
        "OTHER" => &[
            "note", "page", "see", "reverse", "instructions", "office", "use", "only", "rev", "continued",
        ],
        "SINGLE" => &["checked", "approved", "declined", "pending", "void", "copy", "draft"],
        "ANSWERNUM" => &["12", "305", "4410", "87", "1999", "250", "63", "7021", "18", "940"],
        _ => &[],
    };
    if words.is_empty() {
        let stem = label.to_lowercase();
        (0..12).map(|k| format!("{stem}{k}")).collect()
    } else {
        words.iter().map(|w| w.to_string()).collect()
    }
}

struct Layout {
    rows: usize,
    cols: usize,
    slot_w: f64,
    slot_h: f64,
}

impl Layout {
    fn slot_box(&self, row: usize, col: usize, span: usize, words: usize, rng: &mut ChaCha8Rng) -> BBox {
        let x0 = col as f64 * self.slot_w;
        let y0 = row as f64 * self.slot_h;
        let full_w = self.slot_w * span as f64;
        let pad_x = self.slot_w * 0.08;
        let pad_y = self.slot_h * 0.2;
        let want = (0.35 + 0.2 * words as f64 + rng.gen_range(0.0..0.15)) * self.slot_w;
        let w = want.min(full_w - 2.0 * pad_x).max(1.0);
        let jitter_y = rng.gen_range(-0.05..0.05) * self.slot_h;
        let bx0 = (x0 + pad_x).round() as i32;
        let by0 = (y0 + pad_y + jitter_y).round() as i32;
        BBox::new(
            bx0,
            by0,
            (x0 + pad_x + w).round() as i32,
            (y0 + self.slot_h - pad_y + jitter_y).round() as i32,
        )
    }
}

/// Generates `spec.num_docs` documents; each passes `corpus::validate`.
pub fn generate(spec: &SynSpec) -> Result<Vec<Document>> {
    spec.check()?;
    let capacity = spec.rows.start() * spec.cols.start();
    if *spec.cells.end() > capacity {
        return Err(Error::Generation(format!(
            "a {}x{} grid holds {capacity} cells but up to {} were requested",
            spec.rows.start(),
            spec.cols.start(),
            spec.cells.end()
        )));
    }
    (0..spec.num_docs).map(|i| generate_one(spec, i)).collect()
}

struct Roles {
    heads: Vec<usize>,
    tails: Vec<usize>,
    standalone: Vec<usize>,
    header: Option<usize>,
}

fn roles(labels: &LabelSet) -> Roles {
    let mut r = Roles {
        heads: Vec::new(),
        tails: Vec::new(),
        standalone: Vec::new(),
        header: labels.index("HEADER"),
    };
    for l in 0..labels.len() {
        if labels.is_head(l) {
            r.heads.push(l);
        } else if labels.is_tail(l) {
            r.tails.push(l);
        } else if Some(l) != r.header {
            r.standalone.push(l);
        }
    }
    r
}

fn generate_one(spec: &SynSpec, index: usize) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let labels = &spec.labels;
    let roles = roles(labels);

    let rows = rng.gen_range(spec.rows.clone());
    let cols = rng.gen_range(spec.cols.clone());
    let target = rng.gen_range(spec.cells.clone());
    let layout = Layout {
        rows,
        cols,
        slot_w: spec.page_width as f64 / cols as f64,
        slot_h: spec.page_height as f64 / rows as f64,
    };

    let mut cells: Vec<Cell> = Vec::new();
    let mut relations = Vec::new();
    let text_for = |label: usize, rng: &mut ChaCha8Rng| -> (String, usize) {
        let name = labels.name_of(label);
        let generated;
        let pool = match spec.pools.get(name) {
            Some(p) => p,
            None => {
                generated = default_pool(name);
                &generated
            }
        };
        let n = rng.gen_range(spec.words.clone());
        let words: Vec<&str> = (0..n).map(|_| pool.choose(rng).expect("non-empty pool").as_str()).collect();
        (words.join(" "), n)
    };
    let push = |label: usize, row: usize, col: usize, span: usize, rng: &mut ChaCha8Rng, cells: &mut Vec<Cell>| {
        let (text, n) = text_for(label, rng);
        let id = cells.len() as u32;
        cells.push(Cell {
            id,
            text,
            bbox: layout.slot_box(row, col, span, n, rng),
            label: labels.name_of(label).to_string(),
            visual_region: None,
        });
        id
    };

    let mut row = 0;
    if let Some(h) = roles.header {
        if rng.gen_bool(spec.header_frac) && rows > 1 {
            push(h, 0, 0, cols.min(3), &mut rng, &mut cells);
            row = 1;
        }
    }
    let mut pending: Option<usize> = None;
    'rows: while row < layout.rows && cells.len() < target {
        let mut col = 0;
        while col < layout.cols && cells.len() < target {
            let free = layout.cols - col;
            if pending.is_none() && !roles.standalone.is_empty() && rng.gen_bool(spec.standalone_frac) {
                let l = *roles.standalone.choose(&mut rng).expect("non-empty");
                push(l, row, col, 1, &mut rng, &mut cells);
                col += 1;
                continue;
            }
            // A group that does not fit is carried to the next row so the
            // multiplicity mix stays as sampled.
            let answers = match pending.take() {
                Some(a) => a,
                None if rng.gen_bool(spec.one_to_many_frac) => rng.gen_range(2..=3usize),
                None => 1,
            };
            if 1 + answers > layout.cols {
                row += 1;
                continue 'rows;
            }
            if 1 + answers > free {
                pending = Some(answers);
                break;
            }
            let head_label = *roles.heads.choose(&mut rng).expect("checked");
            let head = push(head_label, row, col, 1, &mut rng, &mut cells);
            for k in 0..answers {
                let tail_label = *roles.tails.choose(&mut rng).expect("checked");
                let tail = push(tail_label, row, col + 1 + k, 1, &mut rng, &mut cells);
                relations.push(Relation {
                    head_id: head,
                    tail_id: tail,
                });
            }
            col += 1 + answers;
        }
        row += 1;
    }

    let doc = Document {
        id: format!("{}_{}", spec.id_prefix, index),
        lang: spec.lang.clone(),
        split: spec.split,
        cells,
        relations,
        img: PageImage {
            fname: format!("{}_{}.png", spec.id_prefix, index),
            width: spec.page_width,
            height: spec.page_height,
        },
    };
    let violations = crate::corpus::validate(&doc, labels);
    if let Some(v) = violations.first() {
        return Err(Error::Generation(format!("document {}: {v}", doc.id)));
    }
    Ok(doc)
}

/// Relation counts bucketed by how many answers their question has.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Multiplicity {
    pub one_to_one: usize,
    pub one_to_two: usize,
    pub one_to_three: usize,
    /// More than three answers.
    pub one_to_many: usize,
}

impl Multiplicity {
    pub fn total(&self) -> usize {
        self.one_to_one + self.one_to_two + self.one_to_three + self.one_to_many
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub cells: usize,
    pub label_counts: BTreeMap<String, usize>,
    pub relations: usize,
    /// Relations bucketed by their head's answer count.
    pub multiplicity: Multiplicity,
    /// Number of distinct heads with one, two, three and more answers.
    pub heads_by_answers: Multiplicity,
    /// Share of heads with two or more answers.
    pub one_to_many_frac: f64,
}

pub fn corpus_stats(docs: &[Document]) -> CorpusStats {
    let mut s = CorpusStats {
        documents: docs.len(),
        ..CorpusStats::default()
    };
    for doc in docs {
        s.cells += doc.cells.len();
        for c in &doc.cells {
            *s.label_counts.entry(c.label.clone()).or_default() += 1;
        }
        s.relations += doc.relations.len();
        let mut degree: BTreeMap<u32, usize> = BTreeMap::new();
        for r in &doc.relations {
            *degree.entry(r.head_id).or_default() += 1;
        }
        for &d in degree.values() {
            let (rel_bucket, head_bucket) = match d {
                1 => (&mut s.multiplicity.one_to_one, &mut s.heads_by_answers.one_to_one),
                2 => (&mut s.multiplicity.one_to_two, &mut s.heads_by_answers.one_to_two),
                3 => (&mut s.multiplicity.one_to_three, &mut s.heads_by_answers.one_to_three),
                _ => (&mut s.multiplicity.one_to_many, &mut s.heads_by_answers.one_to_many),
            };
            *rel_bucket += d;
            *head_bucket += 1;
        }
    }
    let heads = s.heads_by_answers.total();
    if heads > 0 {
        s.one_to_many_frac = (heads - s.heads_by_answers.one_to_one) as f64 / heads as f64;
    }
    s
}
