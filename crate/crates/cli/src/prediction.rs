//! On-disk prediction format.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use formparse::{Dataset, DocPrediction, Document, LabelSet, PredictedRelation};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub schema_version: u32,
    pub label_set: String,
    pub re_threshold: f64,
    pub documents: Vec<DocPredictions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocPredictions {
    pub id: String,
    pub cells: Vec<CellPrediction>,
    pub relations: Vec<PredictedRelation>,
}

/// `label` and `confidence` are null for cells that produced no tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub id: u32,
    pub label: Option<String>,
    pub confidence: Option<f64>,
}

impl PredictionFile {
    pub fn new(labels: &LabelSet, re_threshold: f64, docs: &[Document], preds: &[DocPrediction]) -> Self {
        let documents = docs
            .iter()
            .zip(preds)
            .map(|(d, p)| DocPredictions {
                id: d.id.clone(),
                cells: d
                    .cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| CellPrediction {
                        id: c.id,
                        label: p.cell_labels[i].map(|l| labels.name_of(l).to_string()),
                        confidence: p.cell_confidence[i],
                    })
                    .collect(),
                relations: p.relations.clone(),
            })
            .collect();
        PredictionFile {
            schema_version: SCHEMA_VERSION,
            label_set: labels.name.clone(),
            re_threshold,
            documents,
        }
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        let file: PredictionFile = serde_json::from_slice(bytes).context("parsing prediction file")?;
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "prediction schema version {} is not the supported {SCHEMA_VERSION}",
                file.schema_version
            );
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("predictions serialize");
        s.push('\n');
        s
    }
}

impl DocPredictions {
    /// Checks every id against `doc`; the error names the first one that
    /// does not resolve.
    pub fn check_against(&self, doc: &Document) -> Result<()> {
        for c in &self.cells {
            if doc.cell(c.id).is_none() {
                bail!("document {}: predicted cell {} is not in the dataset", self.id, c.id);
            }
        }
        for r in &self.relations {
            for id in [r.head_id, r.tail_id] {
                if doc.cell(id).is_none() {
                    bail!("document {}: relation endpoint {id} is not in the dataset", self.id);
                }
            }
            if !(0.0..=1.0).contains(&r.prob) {
                bail!("document {}: probability {} outside [0, 1]", self.id, r.prob);
            }
        }
        Ok(())
    }

    pub fn label_of(&self, id: u32) -> Option<&str> {
        self.cells.iter().find(|c| c.id == id).and_then(|c| c.label.as_deref())
    }
}

/// Pairs each predicted document with its dataset document.
pub fn resolve<'a>(file: &'a PredictionFile, data: &'a Dataset) -> Result<Vec<(&'a DocPredictions, &'a Document)>> {
    file.documents
        .iter()
        .map(|p| {
            let doc = data
                .documents
                .iter()
                .find(|d| d.id == p.id)
                .with_context(|| format!("document {} is not in the dataset", p.id))?;
            p.check_against(doc)?;
            Ok((p, doc))
        })
        .collect()
}
