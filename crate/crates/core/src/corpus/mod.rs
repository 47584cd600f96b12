//! Form documents: data model, dataset JSON, validation and tokenization.
//!
//! A dataset file holds `{lang, version, split, documents}`; each document
//! is a list of cells (box, text, label, id, linking) plus page metadata.
//! Relations are stored as `(head, tail)` = `(question id, answer id)`.

mod json;
mod labels;
mod tokenize;
mod validate;

pub use json::{parse_dataset, read_dataset, serialize_dataset, Dataset};
pub use labels::{LabelSet, TagSet};
pub use tokenize::{build_vocab, normalize_bbox, split_text, tokenize, NormBox, TokenizedDocument, Vocab};
pub use validate::{validate, Violation, ViolationKind};

use serde::{Deserialize, Serialize};

/// Pixel box, origin at the page's top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BBox {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 as f64 + self.x1 as f64) / 2.0,
            (self.y0 as f64 + self.y1 as f64) / 2.0,
        )
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Clamps negative coordinates to zero; returns whether anything changed.
    pub fn clamp_non_negative(&mut self) -> bool {
        let before = *self;
        self.x0 = self.x0.max(0);
        self.y0 = self.y0.max(0);
        self.x1 = self.x1.max(0);
        self.y1 = self.y1.max(0);
        before != *self
    }
}

/// One semantic entity of a form.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: u32,
    pub text: String,
    pub bbox: BBox,
    /// Canonical (upper-case) label name.
    pub label: String,
    pub visual_region: Option<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    pub head_id: u32,
    pub tail_id: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageImage {
    pub fname: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub lang: String,
    pub split: Split,
    /// Reading order, ascending id.
    pub cells: Vec<Cell>,
    pub relations: Vec<Relation>,
    pub img: PageImage,
}

impl Document {
    pub fn cell_index(&self, id: u32) -> Option<usize> {
        self.cells.iter().position(|c| c.id == id)
    }

    pub fn cell(&self, id: u32) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }
}
