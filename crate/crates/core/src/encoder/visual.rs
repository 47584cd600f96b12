use crate::autodiff::Array;
use crate::corpus::{Cell, Document, TokenizedDocument};

/// Source of per-cell visual features. Tokens inherit their cell's vector.
pub trait VisualProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn cell_features(&self, doc: &Document, cell: &Cell) -> Vec<f64>;
}

/// Geometry of the cell's region on the page, in page-relative units:
/// center x, center y, width, height, aspect (w/h), area, left margin,
/// top margin.
#[derive(Clone, Copy, Debug, Default)]
pub struct BoxStatistics;

impl VisualProvider for BoxStatistics {
    fn dim(&self) -> usize {
        8
    }

    fn cell_features(&self, doc: &Document, cell: &Cell) -> Vec<f64> {
        let b = cell.visual_region.unwrap_or(cell.bbox);
        let (pw, ph) = (doc.img.width.max(1) as f64, doc.img.height.max(1) as f64);
        let w = (b.x1 - b.x0).max(0) as f64;
        let h = (b.y1 - b.y0).max(0) as f64;
        let aspect = if w == 0.0 || h == 0.0 { 0.0 } else { w / h };
        vec![
            (b.x0 as f64 + w / 2.0) / pw,
            (b.y0 as f64 + h / 2.0) / ph,
            w / pw,
            h / ph,
            aspect,
            (w * h) / (pw * ph),
            b.x0 as f64 / pw,
            b.y0 as f64 / ph,
        ]
    }
}

/// Always-zero features of a fixed width; equivalent to having no provider.
#[derive(Clone, Copy, Debug)]
pub struct ZeroVisual(pub usize);

impl VisualProvider for ZeroVisual {
    fn dim(&self) -> usize {
        self.0
    }

    fn cell_features(&self, _doc: &Document, _cell: &Cell) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

/// Token-aligned feature matrix `[tokens, provider.dim()]`.
pub fn visual_features(doc: &Document, tdoc: &TokenizedDocument, provider: &dyn VisualProvider) -> Array<f64> {
    let dim = provider.dim();
    let per_cell: Vec<Vec<f64>> = doc.cells.iter().map(|c| provider.cell_features(doc, c)).collect();
    let mut data = Vec::with_capacity(tdoc.len() * dim);
    for &ci in &tdoc.cell_index {
        data.extend_from_slice(&per_cell[ci]);
    }
    Array::new(vec![tdoc.len(), dim], data).expect("provider returned the declared width")
}
