//! Minimal InkML reader: `trace` elements and the ground-truth annotation.

use log::warn;

use crate::error::{Error, Result};

pub type Point = (f64, f64);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InkDocument {
    /// Polylines in document order, each with at least one point.
    pub traces: Vec<Vec<Point>>,
    pub label: Option<String>,
    pub source: String,
}

impl InkDocument {
    pub fn from_traces(traces: Vec<Vec<Point>>) -> Self {
        Self {
            traces,
            ..Self::default()
        }
    }

    /// (min x, min y, max x, max y) over all points.
    pub fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let mut pts = self.traces.iter().flatten();
        let &(x0, y0) = pts.next()?;
        Some(pts.fold((x0, y0, x0, y0), |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y))))
    }
}

fn parse_error(doc: &roxmltree::Document<'_>, pos: usize, message: impl Into<String>) -> Error {
    let p = doc.text_pos_at(pos);
    Error::Parse {
        line: p.row,
        column: p.col,
        message: message.into(),
    }
}

/// Parses `"x y[ extra...], x y[ extra...], ..."`.
fn parse_points(text: &str) -> std::result::Result<Vec<Point>, String> {
    let mut out = Vec::new();
    for chunk in text.split(',') {
        let mut fields = chunk.split_whitespace();
        // Tolerates a trailing comma.
        let Some(xs) = fields.next() else { continue };
        let ys = fields.next().ok_or_else(|| format!("point {xs:?} has no y coordinate"))?;
        let num = |s: &str| -> std::result::Result<f64, String> {
            let v: f64 = s.parse().map_err(|_| format!("bad coordinate {s:?}"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite coordinate {s:?}"))
            }
        };
        out.push((num(xs)?, num(ys)?));
    }
    Ok(out)
}

pub fn parse_inkml(text: &str) -> Result<InkDocument> {
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let p = e.pos();
        Error::Parse {
            line: p.row,
            column: p.col,
            message: e.to_string(),
        }
    })?;
    let mut out = InkDocument::default();
    for node in doc.descendants().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "trace" => {
                let body = node.text().unwrap_or("");
                let points = parse_points(body).map_err(|m| parse_error(&doc, node.range().start, m))?;
                if points.is_empty() {
                    let p = doc.text_pos_at(node.range().start);
                    warn!("skipping empty trace at line {}", p.row);
                } else {
                    out.traces.push(points);
                }
            }
            "annotation" => {
                let text = node.text().unwrap_or("").trim().to_string();
                match node.attribute("type") {
                    Some("truth") if out.label.is_none() && node.parent().is_some_and(|p| p.tag_name().name() == "ink") => {
                        out.label = Some(text)
                    }
                    Some("UI") if out.source.is_empty() => out.source = text,
                    _ => {}
                }
            }
            _ => {}
        }
    }
    if out.traces.is_empty() {
        return Err(parse_error(&doc, doc.root_element().range().start, "no traces"));
    }
    Ok(out)
}
