//! Binary rendering of stroke documents.

use serde::{Deserialize, Serialize};

use super::inkml::InkDocument;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Images are padded on the right to a multiple of this width.
pub const WIDTH_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    pub target_height: usize,
    pub stroke_width: usize,
    /// Very wide documents are scaled down to fit, leaving blank rows.
    pub max_width: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            target_height: 64,
            stroke_width: 2,
            max_width: 512,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.target_height >= 2, "target_height must be at least 2");
        ensure!(self.stroke_width >= 1, "stroke_width must be at least 1");
        ensure!(
            self.max_width >= WIDTH_MULTIPLE,
            "max_width must be at least {WIDTH_MULTIPLE}, got {}",
            self.max_width
        );
        Ok(())
    }
}

pub fn pad_width(w: usize) -> usize {
    w.div_ceil(WIDTH_MULTIPLE).max(1) * WIDTH_MULTIPLE
}

/// Integer points of the segment from `a` to `b`, both ends included.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    brush: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn stamp(&mut self, x: i64, y: i64) {
        let lo = -((self.brush as i64 - 1) / 2);
        let hi = self.brush as i64 / 2;
        for dy in lo..=hi {
            for dx in lo..=hi {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as usize) < self.w && (py as usize) < self.h {
                    self.data[py as usize * self.w + px as usize] = 1.0;
                }
            }
        }
    }
}

/// Renders a document as a 1×H×W binary image.
///
/// The bounding box is scaled uniformly so its height spans the target height
/// (or its width spans the image when the box is flat), consecutive points are
/// joined with Bresenham segments stamped with a square brush, and the width
/// is padded to a multiple of 16.
pub fn rasterize(doc: &InkDocument, cfg: &RasterConfig) -> Result<Tensor> {
    cfg.validate()?;
    let Some((x0, y0, x1, y1)) = doc.bounds() else {
        crate::error::contract!("cannot rasterize a document without traces");
    };
    let h = cfg.target_height;
    let span = (h - 1) as f64;
    let (ex, ey) = (x1 - x0, y1 - y0);
    let mut canvas = Canvas {
        h,
        w: 0,
        brush: cfg.stroke_width,
        data: Vec::new(),
    };
    if ex == 0.0 && ey == 0.0 {
        canvas.w = pad_width(1);
        canvas.data = vec![0.0; h * canvas.w];
        canvas.stamp(canvas.w as i64 / 2, h as i64 / 2);
        return Tensor::new(&[1, h, canvas.w], canvas.data);
    }
    let mut scale = if ey > 0.0 { span / ey } else { span / ex };
    if ex * scale + 1.0 > cfg.max_width as f64 {
        scale = (cfg.max_width - 1) as f64 / ex;
    }
    let oy = ((span - ey * scale) / 2.0).round();
    canvas.w = pad_width((ex * scale).round() as usize + 1);
    canvas.data = vec![0.0; h * canvas.w];
    let to_px = |&(x, y): &(f64, f64)| (((x - x0) * scale).round() as i64, ((y - y0) * scale + oy).round() as i64);
    for trace in &doc.traces {
        let pts: Vec<(i64, i64)> = trace.iter().map(to_px).collect();
        if let [p] = pts.as_slice() {
            canvas.stamp(p.0, p.1);
        }
        for pair in pts.windows(2) {
            for (x, y) in bresenham(pair[0], pair[1]) {
                canvas.stamp(x, y);
            }
        }
    }
    Tensor::new(&[1, h, canvas.w], canvas.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ink(img: &Tensor) -> Vec<(usize, usize)> {
        let w = img.shape()[2];
        img.data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    #[test]
    fn diagonal_at_native_scale() {
        let doc = InkDocument::from_traces(vec![vec![(0.0, 0.0), (2.0, 2.0)]]);
        let cfg = RasterConfig {
            target_height: 3,
            stroke_width: 1,
            ..RasterConfig::default()
        };
        let img = rasterize(&doc, &cfg).unwrap();
        assert_eq!(img.shape(), &[1, 3, 16]);
        assert_eq!(ink(&img), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn degenerate_box_is_one_dot() {
        let doc = InkDocument::from_traces(vec![vec![(4.0, 4.0), (4.0, 4.0)], vec![(4.0, 4.0)]]);
        let cfg = RasterConfig {
            target_height: 9,
            stroke_width: 1,
            ..RasterConfig::default()
        };
        let img = rasterize(&doc, &cfg).unwrap();
        assert_eq!(ink(&img), vec![(4, 8)]);
    }

    #[test]
    fn bresenham_is_symmetric_in_coverage() {
        let fwd = bresenham((0, 0), (7, 3));
        let mut back = bresenham((7, 3), (0, 0));
        back.reverse();
        assert_eq!(fwd.len(), 8);
        assert_eq!(fwd.first(), Some(&(0, 0)));
        assert_eq!(back.last(), Some(&(7, 3)));
    }

    #[test]
    fn flat_stroke_is_centered_and_spans_the_width() {
        let doc = InkDocument::from_traces(vec![vec![(0.0, 5.0), (10.0, 5.0)]]);
        let cfg = RasterConfig {
            target_height: 11,
            stroke_width: 1,
            max_width: 64,
        };
        let img = rasterize(&doc, &cfg).unwrap();
        assert_eq!(img.shape(), &[1, 11, 16]);
        let px = ink(&img);
        assert_eq!(px.len(), 11);
        assert!(px.iter().all(|&(r, _)| r == 5));
    }

    #[test]
    fn wide_documents_are_capped() {
        let doc = InkDocument::from_traces(vec![vec![(0.0, 0.0), (100.0, 1.0)]]);
        let img = rasterize(&doc, &RasterConfig::default()).unwrap();
        assert_eq!(img.shape(), &[1, 64, 512]);
        assert!(img.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn brush_thickens_strokes() {
        let doc = InkDocument::from_traces(vec![vec![(0.0, 0.0), (0.0, 10.0)]]);
        let thin = rasterize(&doc, &RasterConfig { target_height: 11, stroke_width: 1, max_width: 64 }).unwrap();
        let thick = rasterize(&doc, &RasterConfig { target_height: 11, stroke_width: 3, max_width: 64 }).unwrap();
        assert_eq!(ink(&thin).len(), 11);
        // Column 0 and 1 (column -1 is clipped).
        assert_eq!(ink(&thick).len(), 22);
    }
}
