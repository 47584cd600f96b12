use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{BBox, Document, LabelSet};
use crate::error::{Error, Result};

/// Box as `(x, y, w, h)` buckets in `0..=1000`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct NormBox {
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

pub const COORD_SCALE: f64 = 1000.0;

/// Maps a pixel box onto the 0..1000 grid. The flag reports whether any
/// channel had to be clamped into range.
pub fn normalize_bbox(b: BBox, page_w: u32, page_h: u32) -> Result<(NormBox, bool)> {
    if page_w == 0 || page_h == 0 {
        return Err(Error::Precondition(format!("page size {page_w}x{page_h}")));
    }
    let (pw, ph) = (page_w as f64, page_h as f64);
    let raw = [
        COORD_SCALE * b.x0 as f64 / pw,
        COORD_SCALE * b.y0 as f64 / ph,
        COORD_SCALE * (b.x1 - b.x0) as f64 / pw,
        COORD_SCALE * (b.y1 - b.y0) as f64 / ph,
    ];
    let mut clamped = false;
    let mut out = [0u16; 4];
    for (o, v) in out.iter_mut().zip(raw) {
        let r = v.round();
        let c = r.clamp(0.0, COORD_SCALE);
        clamped |= c != r;
        *o = c as u16;
    }
    Ok((
        NormBox {
            x: out[0],
            y: out[1],
            w: out[2],
            h: out[3],
        },
        clamped,
    ))
}

/// Whitespace split; any piece containing non-ASCII text is further split
/// into single characters.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        if piece.is_ascii() {
            out.push(piece.to_string());
        } else {
            out.extend(piece.chars().map(String::from));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;
    pub const SEP: usize = 3;
    pub const SPECIALS: [&'static str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

    /// Rebuilds a vocabulary from its token list (specials first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4].iter().zip(Self::SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Precondition("vocabulary must start with the four special tokens".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect::<HashMap<_, _>>();
        if index.len() != tokens.len() {
            return Err(Error::Precondition("vocabulary has duplicate tokens".into()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Corpus vocabulary: the four specials, then tokens with at least
/// `min_count` occurrences ordered by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab(docs: &[Document], min_count: usize) -> Result<Vocab> {
    if min_count < 1 {
        return Err(Error::Precondition("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        for cell in &doc.cells {
            for t in split_text(&cell.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !Vocab::SPECIALS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = Vocab::SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Model-ready token sequence of one document.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDocument {
    pub doc_id: String,
    pub token_ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Id of the cell each token came from.
    pub cell_ids: Vec<u32>,
    /// Position of that cell in `Document::cells`.
    pub cell_index: Vec<usize>,
    pub tags: Vec<usize>,
    pub boxes: Vec<NormBox>,
    pub positions: Vec<usize>,
    /// Token range of every document cell; `None` for cells with no tokens
    /// or cells dropped by truncation.
    pub cell_spans: Vec<Option<Range<usize>>>,
}

impl TokenizedDocument {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions (in `Document::cells`) of the cells that own tokens.
    pub fn covered_cells(&self) -> Vec<usize> {
        (0..self.cell_spans.len()).filter(|&i| self.cell_spans[i].is_some()).collect()
    }
}

/// Splits every cell into tokens, tags them BIO-style and attaches the
/// cell's normalized box. Cells that would push the sequence past
/// `max_len` are dropped together with every later cell.
pub fn tokenize(doc: &Document, vocab: &Vocab, labels: &LabelSet, max_len: usize) -> TokenizedDocument {
    let tags = labels.tags();
    let mut out = TokenizedDocument {
        doc_id: doc.id.clone(),
        token_ids: Vec::new(),
        tokens: Vec::new(),
        cell_ids: Vec::new(),
        cell_index: Vec::new(),
        tags: Vec::new(),
        boxes: Vec::new(),
        positions: Vec::new(),
        cell_spans: vec![None; doc.cells.len()],
    };
    let mut truncated = false;
    for (ci, cell) in doc.cells.iter().enumerate() {
        let pieces = split_text(&cell.text);
        if pieces.is_empty() {
            continue;
        }
        if truncated || out.len() + pieces.len() > max_len {
            truncated = true;
            continue;
        }
        let label = labels.index(&cell.label).unwrap_or(labels.outside());
        let nb = match normalize_bbox(cell.bbox, doc.img.width, doc.img.height) {
            Ok((nb, clamped)) => {
                if clamped {
                    log::debug!("document {}: cell {} box clamped to page grid", doc.id, cell.id);
                }
                nb
            }
            Err(_) => NormBox::default(),
        };
        let start = out.len();
        for (k, piece) in pieces.into_iter().enumerate() {
            out.positions.push(out.token_ids.len());
            out.token_ids.push(vocab.id(&piece));
            out.tokens.push(piece);
            out.cell_ids.push(cell.id);
            out.cell_index.push(ci);
            out.tags.push(if k == 0 { tags.begin(label) } else { tags.inside(label) });
            out.boxes.push(nb);
        }
        out.cell_spans[ci] = Some(start..out.len());
    }
    if truncated {
        log::warn!("document {}: truncated to {} tokens", doc.id, max_len);
    }
    out
}
