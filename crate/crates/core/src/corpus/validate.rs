use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{Document, LabelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ViolationKind {
    DuplicateCellId,
    CellsOutOfOrder,
    UnknownLabel,
    InvertedBox,
    NegativeCoordinate,
    EmptyPage,
    SelfLink,
    DanglingId,
    HeadNotCapable,
    TailNotCapable,
}

/// One broken invariant. `cell` and `relation` are positions in the
/// document's lists, not ids.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub cell: Option<usize>,
    pub relation: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(c) = self.cell {
            write!(f, " at cell {c}")?;
        }
        if let Some(r) = self.relation {
            write!(f, " at relation {r}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Checks every document invariant; an empty result means the document is clean.
pub fn validate(doc: &Document, labels: &LabelSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, cell, relation, detail: String| {
        out.push(Violation {
            kind,
            cell,
            relation,
            detail,
        })
    };

    if doc.img.width == 0 || doc.img.height == 0 {
        push(
            ViolationKind::EmptyPage,
            None,
            None,
            format!("page is {}x{}", doc.img.width, doc.img.height),
        );
    }

    let mut seen = HashSet::new();
    for (i, cell) in doc.cells.iter().enumerate() {
        if !seen.insert(cell.id) {
            push(ViolationKind::DuplicateCellId, Some(i), None, format!("id {} repeated", cell.id));
        }
        if i > 0 && doc.cells[i - 1].id >= cell.id {
            push(
                ViolationKind::CellsOutOfOrder,
                Some(i),
                None,
                format!("id {} follows {}", cell.id, doc.cells[i - 1].id),
            );
        }
        if labels.index(&cell.label).is_none() {
            push(
                ViolationKind::UnknownLabel,
                Some(i),
                None,
                format!("label {:?} not in the {} label set", cell.label, labels.name),
            );
        }
        let b = cell.bbox;
        if b.x0 > b.x1 || b.y0 > b.y1 {
            push(ViolationKind::InvertedBox, Some(i), None, format!("box {b:?}"));
        }
        if b.x0 < 0 || b.y0 < 0 || b.x1 < 0 || b.y1 < 0 {
            push(ViolationKind::NegativeCoordinate, Some(i), None, format!("box {b:?}"));
        }
    }

    for (r, rel) in doc.relations.iter().enumerate() {
        if rel.head_id == rel.tail_id {
            push(ViolationKind::SelfLink, None, Some(r), format!("cell {} links to itself", rel.head_id));
            continue;
        }
        let head = doc.cell(rel.head_id);
        let tail = doc.cell(rel.tail_id);
        for (id, cell) in [(rel.head_id, head), (rel.tail_id, tail)] {
            if cell.is_none() {
                push(ViolationKind::DanglingId, None, Some(r), format!("no cell with id {id}"));
            }
        }
        if let Some(l) = head.and_then(|c| labels.index(&c.label)) {
            if !labels.is_head(l) {
                push(
                    ViolationKind::HeadNotCapable,
                    None,
                    Some(r),
                    format!("head {} is labelled {}", rel.head_id, labels.name_of(l)),
                );
            }
        }
        if let Some(l) = tail.and_then(|c| labels.index(&c.label)) {
            if !labels.is_tail(l) {
                push(
                    ViolationKind::TailNotCapable,
                    None,
                    Some(r),
                    format!("tail {} is labelled {}", rel.tail_id, labels.name_of(l)),
                );
            }
        }
    }
    out
}
