//! SVG and DOT renderings of one predicted document.

use std::fmt::Write;

use formparse::{Document, LabelSet};

use crate::prediction::DocPredictions;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
const UNLABELED: &str = "#999999";
const LINK: &str = "#d62728";

fn color(labels: &LabelSet, label: Option<&str>) -> &'static str {
    match label.and_then(|l| labels.index(l)) {
        Some(i) if i == labels.outside() => UNLABELED,
        Some(i) => PALETTE[i % PALETTE.len()],
        None => UNLABELED,
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if c.is_control() => {}
            c => out.push(c),
        }
    }
    out
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if c.is_control() => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

fn page_size(doc: &Document) -> (u32, u32) {
    let fit = |page: u32, far: i32| if page > 0 { page } else { far.max(1) as u32 };
    let far_x = doc.cells.iter().map(|c| c.bbox.x1).max().unwrap_or(1);
    let far_y = doc.cells.iter().map(|c| c.bbox.y1).max().unwrap_or(1);
    (fit(doc.img.width, far_x), fit(doc.img.height, far_y))
}

/// One stroked rectangle per cell, one arrow per predicted relation.
pub fn svg(doc: &Document, pred: &DocPredictions, labels: &LabelSet) -> String {
    let (w, h) = page_size(doc);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, "  <title>{}</title>", xml_escape(&doc.id)).unwrap();
    writeln!(
        s,
        r#"  <defs><marker id="arrow" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="6" markerHeight="6" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="{LINK}"/></marker></defs>"#
    )
    .unwrap();
    s.push_str("  <g class=\"cells\" font-family=\"sans-serif\" font-size=\"12\">\n");
    for c in &doc.cells {
        let label = pred.label_of(c.id);
        let b = c.bbox;
        writeln!(
            s,
            r#"    <rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="2"><title>{} {}</title></rect>"#,
            b.x0,
            b.y0,
            b.width().max(0),
            b.height().max(0),
            color(labels, label),
            c.id,
            xml_escape(label.unwrap_or("-"))
        )
        .unwrap();
        writeln!(s, r#"    <text x="{}" y="{}">{}</text>"#, b.x0 + 2, b.y0 + 12, xml_escape(&c.text)).unwrap();
    }
    s.push_str("  </g>\n  <g class=\"relations\">\n");
    for r in &pred.relations {
        let (Some(hc), Some(tc)) = (doc.cell(r.head_id), doc.cell(r.tail_id)) else {
            continue;
        };
        let (x1, y1) = hc.bbox.center();
        let (x2, y2) = tc.bbox.center();
        writeln!(
            s,
            r#"    <line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="{LINK}" stroke-width="1.5" marker-end="url(#arrow)"><title>{} -&gt; {} p={:.3}</title></line>"#,
            r.head_id, r.tail_id, r.prob
        )
        .unwrap();
    }
    s.push_str("  </g>\n</svg>\n");
    s
}

/// A digraph with one node per cell and one edge per predicted relation.
pub fn dot(doc: &Document, pred: &DocPredictions, labels: &LabelSet) -> String {
    let mut s = format!("digraph \"{}\" {{\n  node [shape=box];\n", dot_escape(&doc.id));
    for c in &doc.cells {
        let label = pred.label_of(c.id);
        writeln!(
            s,
            "  c{} [label=\"{}: {}\\n{}\", color=\"{}\"];",
            c.id,
            c.id,
            dot_escape(label.unwrap_or("-")),
            dot_escape(&c.text),
            color(labels, label)
        )
        .unwrap();
    }
    for r in &pred.relations {
        writeln!(s, "  c{} -> c{} [label=\"{:.3}\"];", r.head_id, r.tail_id, r.prob).unwrap();
    }
    s.push_str("}\n");
    s
}
