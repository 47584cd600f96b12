use serde::{Deserialize, Serialize};

use super::{validate, BBox, Cell, Document, LabelSet, PageImage, Relation, Split, ViolationKind};
use crate::error::{Error, Result};

/// A dataset file: shared metadata plus its documents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub lang: String,
    pub version: String,
    pub split: Split,
    pub documents: Vec<Document>,
}

impl Dataset {
    pub fn new(lang: &str, split: Split, documents: Vec<Document>) -> Self {
        Dataset {
            lang: lang.to_string(),
            version: "0.1".to_string(),
            split,
            documents,
        }
    }
}

fn default_version() -> String {
    "0.1".to_string()
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    #[serde(default)]
    lang: String,
    #[serde(default = "default_version")]
    version: String,
    #[serde(default)]
    split: Split,
    documents: Vec<RawDocument>,
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    id: String,
    #[serde(alias = "document")]
    cells: Vec<RawCell>,
    /// Document-level relation list; accepted on read, never written.
    #[serde(default, skip_serializing)]
    relations: Vec<[u32; 2]>,
    img: PageImage,
}

#[derive(Serialize, Deserialize)]
struct RawCell {
    #[serde(rename = "box")]
    bbox: [i32; 4],
    text: String,
    label: String,
    id: u32,
    #[serde(default)]
    linking: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_region: Option<[i32; 4]>,
}

/// Reads the JSON structure without validating labels or references.
///
/// Linking pairs from cells and from a document-level `relations` list are
/// merged, de-duplicated and sorted by `(head, tail)`.
pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let raw: RawDataset = serde_json::from_slice(bytes).map_err(|e| Error::json(&e, bytes))?;
    let documents = raw
        .documents
        .into_iter()
        .map(|d| {
            let mut relations: Vec<Relation> = d
                .cells
                .iter()
                .flat_map(|c| c.linking.iter())
                .chain(d.relations.iter())
                .map(|&[h, t]| Relation {
                    head_id: h,
                    tail_id: t,
                })
                .collect();
            relations.sort();
            relations.dedup();
            let cells = d
                .cells
                .into_iter()
                .map(|c| Cell {
                    id: c.id,
                    text: c.text,
                    bbox: BBox::new(c.bbox[0], c.bbox[1], c.bbox[2], c.bbox[3]),
                    label: c.label.to_uppercase(),
                    visual_region: c.image_region.map(|b| BBox::new(b[0], b[1], b[2], b[3])),
                })
                .collect();
            Document {
                id: d.id,
                lang: raw.lang.clone(),
                split: raw.split,
                cells,
                relations,
                img: d.img,
            }
        })
        .collect();
    Ok(Dataset {
        lang: raw.lang,
        version: raw.version,
        split: raw.split,
        documents,
    })
}

/// Reads and validates a dataset; negative box coordinates are clamped to 0.
pub fn parse_dataset(bytes: &[u8], labels: &LabelSet) -> Result<Dataset> {
    let mut ds = read_dataset(bytes)?;
    for doc in &mut ds.documents {
        for cell in &mut doc.cells {
            if cell.bbox.clamp_non_negative() {
                log::warn!("document {}: cell {} box clamped to non-negative", doc.id, cell.id);
            }
        }
        let violations = validate(doc, labels);
        if violations.is_empty() {
            continue;
        }
        if let Some(v) = violations.iter().find(|v| v.kind == ViolationKind::UnknownLabel) {
            return Err(Error::Schema {
                doc: doc.id.clone(),
                cell: v.cell.map(|i| doc.cells[i].id),
                message: v.detail.clone(),
            });
        }
        if let Some(v) = violations.iter().find(|v| v.kind == ViolationKind::DanglingId) {
            return Err(Error::Referential {
                doc: doc.id.clone(),
                message: v.detail.clone(),
            });
        }
        return Err(Error::Invalid {
            doc: doc.id.clone(),
            violations,
        });
    }
    Ok(ds)
}

/// Writes the cell-level form: every relation is listed on both endpoint
/// cells, labels in lower case. Output is compact JSON.
pub fn serialize_dataset(ds: &Dataset) -> Vec<u8> {
    let raw = RawDataset {
        lang: ds.lang.clone(),
        version: ds.version.clone(),
        split: ds.split,
        documents: ds
            .documents
            .iter()
            .map(|d| RawDocument {
                id: d.id.clone(),
                cells: d
                    .cells
                    .iter()
                    .map(|c| RawCell {
                        bbox: [c.bbox.x0, c.bbox.y0, c.bbox.x1, c.bbox.y1],
                        text: c.text.clone(),
                        label: c.label.to_lowercase(),
                        id: c.id,
                        linking: d
                            .relations
                            .iter()
                            .filter(|r| r.head_id == c.id || r.tail_id == c.id)
                            .map(|r| [r.head_id, r.tail_id])
                            .collect(),
                        image_region: c.visual_region.map(|b| [b.x0, b.y0, b.x1, b.y1]),
                    })
                    .collect(),
                relations: Vec::new(),
                img: d.img.clone(),
            })
            .collect(),
    };
    serde_json::to_vec(&raw).expect("dataset serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"lang":"zh","version":"0.1","split":"train","documents":[{"id":"zh_train_0","cells":[{"box":[10,20,110,40],"text":"姓名","label":"question","id":0,"linking":[[0,1]]},{"box":[120,20,220,40],"text":"张三","label":"answer","id":1,"linking":[[0,1]]},{"box":[10,60,300,80],"text":"备注 无","label":"other","id":2,"linking":[]}],"img":{"fname":"zh_train_0.jpg","width":1000,"height":1000}}]}"#;

    #[test]
    fn parses_cells_and_links() {
        let ds = parse_dataset(FIXTURE.as_bytes(), &LabelSet::xfund()).unwrap();
        let doc = &ds.documents[0];
        assert_eq!(doc.cells[0].id, 0);
        assert_eq!(doc.cells[0].bbox, BBox::new(10, 20, 110, 40));
        assert_eq!(doc.cells[0].label, "QUESTION");
        assert_eq!(doc.cells[0].text, "姓名");
        assert_eq!(
            doc.relations,
            vec![Relation {
                head_id: 0,
                tail_id: 1
            }]
        );
        assert_eq!(doc.lang, "zh");
    }

    #[test]
    fn empty_documents() {
        let ds = parse_dataset(br#"{"documents":[]}"#, &LabelSet::xfund()).unwrap();
        assert!(ds.documents.is_empty());
    }

    #[test]
    fn fixture_round_trips() {
        let labels = LabelSet::xfund();
        let first = parse_dataset(FIXTURE.as_bytes(), &labels).unwrap();
        let bytes = serialize_dataset(&first);
        assert_eq!(std::str::from_utf8(&bytes).unwrap(), FIXTURE);
        assert_eq!(parse_dataset(&bytes, &labels).unwrap(), first);
    }

    #[test]
    fn accepts_document_level_relations_and_xfund_alias() {
        let src = r#"{"lang":"en","version":"0.1","split":"val","documents":[{"id":"d","document":[{"box":[0,0,1,1],"text":"a","label":"question","id":0},{"box":[2,0,3,1],"text":"b","label":"answer","id":1}],"relations":[[0,1],[0,1]],"img":{"fname":"f","width":10,"height":10}}]}"#;
        let ds = parse_dataset(src.as_bytes(), &LabelSet::xfund()).unwrap();
        assert_eq!(ds.split, Split::Val);
        assert_eq!(ds.documents[0].relations.len(), 1);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let src = b"{\"documents\": [}";
        match parse_dataset(src, &LabelSet::xfund()) {
            Err(Error::Json { offset, .. }) => assert_eq!(offset, 15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_schema_error() {
        let src = FIXTURE.replace("\"other\"", "\"footnote\"");
        match parse_dataset(src.as_bytes(), &LabelSet::xfund()) {
            Err(Error::Schema { doc, cell, .. }) => {
                assert_eq!(doc, "zh_train_0");
                assert_eq!(cell, Some(2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_link_is_referential_error() {
        let src = FIXTURE.replace("[[0,1]]}", "[[0,9]]}");
        assert!(matches!(
            parse_dataset(src.as_bytes(), &LabelSet::xfund()),
            Err(Error::Referential { .. })
        ));
    }

    #[test]
    fn negative_coordinates_are_clamped() {
        let src = FIXTURE.replace("[10,20,110,40]", "[-5,20,110,40]");
        let ds = parse_dataset(src.as_bytes(), &LabelSet::xfund()).unwrap();
        assert_eq!(ds.documents[0].cells[0].bbox.x0, 0);
    }
}
