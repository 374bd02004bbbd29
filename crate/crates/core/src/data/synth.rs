//! Seeded synthetic handwritten expressions.
//!
//! Expressions are drawn from a small grammar, laid out in two dimensions
//! (fractions stack, scripts shrink and shift, radicals enclose their body),
//! drawn with per-symbol stroke templates under random affine jitter and point
//! noise, and rasterized like any other ink document.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inkml::{InkDocument, Point};
use super::raster::{rasterize, RasterConfig};
use super::vocab::Vocabulary;
use super::Sample;
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Nesting depth of fractions, scripts, radicals and parentheses. Depth 0
    /// yields single symbols.
    pub depth: usize,
    /// Token lengths are drawn uniformly from `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 500,
            depth: 2,
            min_len: 1,
            max_len: 35,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.count >= 1, "synthetic count must be at least 1");
        ensure!(
            self.min_len >= 1 && self.min_len <= self.max_len,
            "synthetic lengths need 1 <= min_len <= max_len, got {}..={}",
            self.min_len,
            self.max_len
        );
        Ok(())
    }
}

const DIGITS: &[&str] = &["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const LETTERS: &[&str] = &["a", "b", "c", "x", "y", "z", r"\alpha", r"\pi"];
const OPERATORS: &[&str] = &["+", "-", "=", r"\times"];
/// Largest token budget of a nested row.
const INNER_CAP: usize = 9;

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Sym(&'static str),
    Sup(&'static str, Vec<Node>),
    Sub(&'static str, Vec<Node>),
    Frac(Vec<Node>, Vec<Node>),
    Sqrt(Vec<Node>),
    Sin(&'static str),
    Paren(Vec<Node>),
}

fn emit(row: &[Node], out: &mut Vec<&'static str>) {
    for node in row {
        match node {
            Node::Sym(s) => out.push(s),
            Node::Sup(b, r) | Node::Sub(b, r) => {
                out.push(b);
                out.push(if matches!(node, Node::Sup(..)) { "^" } else { "_" });
                out.push("{");
                emit(r, out);
                out.push("}");
            }
            Node::Frac(a, b) => {
                out.extend([r"\frac", "{"]);
                emit(a, out);
                out.extend(["}", "{"]);
                emit(b, out);
                out.push("}");
            }
            Node::Sqrt(r) => {
                out.extend([r"\sqrt", "{"]);
                emit(r, out);
                out.push("}");
            }
            Node::Sin(a) => out.extend([r"\sin", a]),
            Node::Paren(r) => {
                out.push("(");
                emit(r, out);
                out.push(")");
            }
        }
    }
}

fn atom<R: Rng + ?Sized>(rng: &mut R) -> &'static str {
    if rng.random_bool(0.5) {
        DIGITS[rng.random_range(0..DIGITS.len())]
    } else {
        LETTERS[rng.random_range(0..LETTERS.len())]
    }
}

fn inner_budget<R: Rng + ?Sized>(rng: &mut R, depth: usize, available: usize) -> usize {
    let max = if depth == 0 { 1 } else { available.min(INNER_CAP) };
    rng.random_range(1..=max)
}

/// A row of exactly `budget` tokens.
fn gen_row<R: Rng + ?Sized>(rng: &mut R, budget: usize, depth: usize) -> Vec<Node> {
    if depth == 0 {
        debug_assert_eq!(budget, 1);
        return vec![Node::Sym(atom(rng))];
    }
    let mut row = Vec::new();
    let mut left = budget;
    let mut after_operand = false;
    while left > 0 {
        // (weight, kind) of every construct that fits.
        let mut options: Vec<(u32, u8)> = vec![(4, 0)];
        if after_operand && left >= 2 {
            options.push((4, 1));
        }
        if left >= 2 {
            options.push((1, 2));
        }
        if left >= 3 {
            options.push((1, 3));
        }
        if left >= 4 {
            options.push((2, 4));
        }
        if left >= 5 {
            options.push((3, 5));
        }
        if left >= 7 {
            options.push((3, 6));
        }
        let total: u32 = options.iter().map(|o| o.0).sum();
        let mut pick = rng.random_range(0..total);
        let kind = options
            .iter()
            .find(|o| {
                if pick < o.0 {
                    true
                } else {
                    pick -= o.0;
                    false
                }
            })
            .map_or(0, |o| o.1);
        let d = depth - 1;
        let node = match kind {
            1 => Node::Sym(OPERATORS[rng.random_range(0..OPERATORS.len())]),
            2 => Node::Sin(atom(rng)),
            3 => {
                let n = inner_budget(rng, d, left - 2);
                Node::Paren(gen_row(rng, n, d))
            }
            4 => {
                let n = inner_budget(rng, d, left - 3);
                Node::Sqrt(gen_row(rng, n, d))
            }
            5 => {
                let n = inner_budget(rng, d, left - 4);
                let base = atom(rng);
                if rng.random_bool(0.6) {
                    Node::Sup(base, gen_row(rng, n, d))
                } else {
                    Node::Sub(base, gen_row(rng, n, d))
                }
            }
            6 => {
                let a = inner_budget(rng, d, left - 6);
                let b = inner_budget(rng, d, left - 5 - a);
                Node::Frac(gen_row(rng, a, d), gen_row(rng, b, d))
            }
            _ => Node::Sym(atom(rng)),
        };
        let mut toks = Vec::new();
        emit(std::slice::from_ref(&node), &mut toks);
        left -= toks.len();
        after_operand = kind != 1;
        row.push(node);
    }
    row
}

/// Template strokes with y pointing up and the baseline at 0, plus advance width.
fn template(sym: &str) -> (f64, Vec<Vec<Point>>) {
    let s = |pts: &[(f64, f64)]| pts.to_vec();
    match sym {
        "0" => {
            let ring = (0..=12)
                .map(|i| {
                    let a = i as f64 / 12.0 * std::f64::consts::TAU;
                    (0.3 + 0.28 * a.sin(), 0.5 + 0.5 * a.cos())
                })
                .collect();
            (0.6, vec![ring])
        }
        "1" => (0.4, vec![s(&[(0.1, 0.8), (0.3, 1.0), (0.3, 0.0)])]),
        "2" => (0.6, vec![s(&[(0.0, 0.75), (0.15, 0.95), (0.4, 1.0), (0.55, 0.85), (0.5, 0.6), (0.0, 0.0), (0.6, 0.0)])]),
        "3" => (
            0.6,
            vec![
                s(&[(0.0, 0.9), (0.3, 1.0), (0.55, 0.85), (0.5, 0.6), (0.25, 0.5)]),
                s(&[(0.25, 0.5), (0.55, 0.35), (0.55, 0.1), (0.3, 0.0), (0.0, 0.1)]),
            ],
        ),
        "4" => (0.6, vec![s(&[(0.45, 0.0), (0.45, 1.0), (0.0, 0.3), (0.6, 0.3)])]),
        "5" => (0.6, vec![s(&[(0.55, 1.0), (0.05, 1.0), (0.0, 0.55), (0.3, 0.6), (0.55, 0.4), (0.5, 0.1), (0.25, 0.0), (0.0, 0.1)])]),
        "6" => (
            0.6,
            vec![s(&[(0.5, 0.95), (0.25, 0.9), (0.05, 0.6), (0.0, 0.25), (0.15, 0.0), (0.45, 0.0), (0.55, 0.25), (0.45, 0.45), (0.2, 0.45), (0.02, 0.3)])],
        ),
        "7" => (0.6, vec![s(&[(0.0, 1.0), (0.6, 1.0), (0.2, 0.0)])]),
        "8" => (
            0.6,
            vec![s(&[
                (0.3, 0.5),
                (0.05, 0.7),
                (0.1, 0.95),
                (0.3, 1.0),
                (0.5, 0.95),
                (0.55, 0.7),
                (0.3, 0.5),
                (0.0, 0.25),
                (0.1, 0.03),
                (0.3, 0.0),
                (0.5, 0.03),
                (0.6, 0.25),
                (0.3, 0.5),
            ])],
        ),
        "9" => (0.6, vec![s(&[(0.55, 0.7), (0.45, 0.5), (0.2, 0.5), (0.05, 0.7), (0.15, 0.95), (0.4, 1.0), (0.55, 0.8), (0.55, 0.4), (0.45, 0.0)])]),
        "a" => (
            0.55,
            vec![
                s(&[(0.5, 0.45), (0.35, 0.6), (0.1, 0.55), (0.0, 0.3), (0.1, 0.05), (0.35, 0.0), (0.5, 0.2)]),
                s(&[(0.5, 0.6), (0.5, 0.0)]),
            ],
        ),
        "b" => (
            0.6,
            vec![
                s(&[(0.05, 1.0), (0.05, 0.0)]),
                s(&[(0.05, 0.35), (0.2, 0.58), (0.45, 0.55), (0.55, 0.3), (0.45, 0.05), (0.2, 0.0), (0.05, 0.15)]),
            ],
        ),
        "c" => (0.5, vec![s(&[(0.5, 0.5), (0.3, 0.6), (0.05, 0.45), (0.0, 0.2), (0.2, 0.0), (0.5, 0.1)])]),
        "x" => (0.5, vec![s(&[(0.0, 0.6), (0.5, 0.0)]), s(&[(0.5, 0.6), (0.0, 0.0)])]),
        "y" => (0.5, vec![s(&[(0.0, 0.6), (0.25, 0.15)]), s(&[(0.5, 0.6), (0.2, -0.35), (0.05, -0.3)])]),
        "z" => (0.5, vec![s(&[(0.0, 0.6), (0.5, 0.6), (0.0, 0.0), (0.5, 0.0)])]),
        "s" => (0.42, vec![s(&[(0.4, 0.55), (0.2, 0.6), (0.02, 0.5), (0.1, 0.33), (0.35, 0.27), (0.42, 0.1), (0.25, 0.0), (0.0, 0.05)])]),
        "i" => (0.2, vec![s(&[(0.1, 0.6), (0.1, 0.0)]), s(&[(0.1, 0.85)])]),
        "n" => (0.45, vec![s(&[(0.0, 0.6), (0.0, 0.0)]), s(&[(0.0, 0.4), (0.2, 0.6), (0.4, 0.55), (0.45, 0.4), (0.45, 0.0)])]),
        r"\alpha" => (
            0.6,
            vec![s(&[(0.6, 0.6), (0.45, 0.25), (0.3, 0.02), (0.1, 0.05), (0.0, 0.3), (0.15, 0.58), (0.3, 0.55), (0.45, 0.25), (0.6, 0.0)])],
        ),
        r"\pi" => (0.6, vec![s(&[(0.0, 0.55), (0.6, 0.6)]), s(&[(0.15, 0.58), (0.12, 0.0)]), s(&[(0.45, 0.58), (0.5, 0.0)])]),
        "+" => (0.5, vec![s(&[(0.25, 0.65), (0.25, 0.15)]), s(&[(0.0, 0.4), (0.5, 0.4)])]),
        "-" => (0.5, vec![s(&[(0.0, 0.4), (0.5, 0.4)])]),
        "=" => (0.5, vec![s(&[(0.0, 0.55), (0.5, 0.55)]), s(&[(0.0, 0.25), (0.5, 0.25)])]),
        r"\times" => (0.5, vec![s(&[(0.05, 0.6), (0.45, 0.2)]), s(&[(0.45, 0.6), (0.05, 0.2)])]),
        "(" => (0.3, vec![s(&[(0.3, 1.05), (0.08, 0.75), (0.0, 0.4), (0.08, 0.05), (0.3, -0.25)])]),
        ")" => (0.3, vec![s(&[(0.0, 1.05), (0.22, 0.75), (0.3, 0.4), (0.22, 0.05), (0.0, -0.25)])]),
        _ => unreachable!("no stroke template for {sym:?}"),
    }
}

/// Strokes in layout space: y grows downward, baseline at 0.
#[derive(Clone, Debug, Default)]
struct Layout {
    strokes: Vec<Vec<Point>>,
    width: f64,
}

impl Layout {
    fn map(mut self, f: impl Fn(Point) -> Point) -> Self {
        for p in self.strokes.iter_mut().flatten() {
            *p = f(*p);
        }
        self
    }

    fn shifted(self, dx: f64, dy: f64) -> Self {
        self.map(|(x, y)| (x + dx, y + dy))
    }

    fn scaled(self, k: f64) -> Self {
        let w = self.width * k;
        Self {
            width: w,
            ..self.map(|(x, y)| (x * k, y * k))
        }
    }

    /// (top, bottom); a layout without strokes spans the x-height.
    fn vertical(&self) -> (f64, f64) {
        let mut it = self.strokes.iter().flatten().map(|p| p.1);
        match it.next() {
            Some(y) => it.fold((y, y), |(a, b), y| (a.min(y), b.max(y))),
            None => (-0.6, 0.0),
        }
    }

    fn append(&mut self, other: Layout, gap: f64) {
        let dx = if self.width > 0.0 { self.width + gap } else { 0.0 };
        let o = other.shifted(dx, 0.0);
        self.width = dx + o.width;
        self.strokes.extend(o.strokes);
    }
}

fn glyph<R: Rng + ?Sized>(sym: &str, rng: &mut R) -> Layout {
    let (w, strokes) = template(sym);
    let k = rng.random_range(0.9..1.1);
    let (jx, jy) = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
    Layout {
        strokes: strokes
            .into_iter()
            .map(|s| s.into_iter().map(|(x, y)| (x * k + jx, -y * k + jy)).collect())
            .collect(),
        width: w * k,
    }
}

const GAP: f64 = 0.18;

fn layout_row<R: Rng + ?Sized>(row: &[Node], rng: &mut R) -> Layout {
    let mut out = Layout::default();
    for node in row {
        let item = match node {
            Node::Sym(s) => glyph(s, rng),
            Node::Sup(b, r) | Node::Sub(b, r) => {
                let mut base = glyph(b, rng);
                let dy = if matches!(node, Node::Sup(..)) { -0.55 } else { 0.25 };
                let script = layout_row(r, rng).scaled(0.6).shifted(base.width + 0.06, dy);
                base.width = script.width + base.width + 0.06;
                base.strokes.extend(script.strokes);
                base
            }
            Node::Frac(a, b) => {
                let num = layout_row(a, rng).scaled(0.8);
                let den = layout_row(b, rng).scaled(0.8);
                let w = num.width.max(den.width) + 0.25;
                let axis = -0.35;
                let (_, nb) = num.vertical();
                let (dt, _) = den.vertical();
                let nw = num.width;
                let dw = den.width;
                let mut l = Layout {
                    strokes: vec![vec![(0.0, axis), (w, axis)]],
                    width: w,
                };
                l.strokes.extend(num.shifted((w - nw) / 2.0, axis - 0.15 - nb).strokes);
                l.strokes.extend(den.shifted((w - dw) / 2.0, axis + 0.15 - dt).strokes);
                l
            }
            Node::Sqrt(r) => {
                let body = layout_row(r, rng);
                let (top, bottom) = body.vertical();
                let roof = top - 0.15;
                let end = 0.5 + body.width + 0.05;
                let mut l = Layout {
                    strokes: vec![vec![(0.0, -0.35), (0.12, -0.42), (0.25, bottom.max(0.0)), (0.42, roof), (end, roof)]],
                    width: end,
                };
                l.strokes.extend(body.shifted(0.5, 0.0).strokes);
                l
            }
            Node::Sin(a) => {
                let mut l = Layout::default();
                for g in ["s", "i", "n"] {
                    l.append(glyph(g, rng), 0.06);
                }
                l.append(glyph(a, rng), GAP * 1.5);
                l
            }
            Node::Paren(r) => {
                let body = layout_row(r, rng);
                let (top, bottom) = body.vertical();
                // Stretch the unit parentheses (spanning -1.05..0.25) over the body.
                let span = (bottom - top + 0.3).max(1.3);
                let mid = (top + bottom) / 2.0;
                let fit = move |(x, y): Point| (x, mid + (y + 0.4) * span / 1.3);
                let mut l = glyph("(", rng).map(fit);
                l.append(body, GAP);
                l.append(glyph(")", rng).map(fit), GAP);
                l
            }
        };
        out.append(item, GAP);
    }
    out
}

/// Resamples each segment at `step` and adds uniform point noise.
fn roughen<R: Rng + ?Sized>(strokes: Vec<Vec<Point>>, step: f64, noise: f64, rng: &mut R) -> Vec<Vec<Point>> {
    strokes
        .into_iter()
        .map(|s| {
            let mut out = vec![s[0]];
            for w in s.windows(2) {
                let (a, b) = (w[0], w[1]);
                let n = ((b.0 - a.0).hypot(b.1 - a.1) / step).ceil().max(1.0) as usize;
                out.extend((1..=n).map(|i| {
                    let t = i as f64 / n as f64;
                    (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
                }));
            }
            out.into_iter()
                .map(|(x, y)| (x + rng.random_range(-noise..=noise), y + rng.random_range(-noise..=noise)))
                .collect()
        })
        .collect()
}

/// Random token body of exactly `len` symbols with nesting at most `depth`.
fn expression<R: Rng + ?Sized>(rng: &mut R, len: usize, depth: usize) -> Vec<Node> {
    gen_row(rng, if depth == 0 { 1 } else { len }, depth)
}

/// Deterministic RNG for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Ink document and label of sample `index`.
pub fn synth_document(seed: u64, cfg: &SynthConfig, index: usize) -> InkDocument {
    let mut rng = sample_rng(seed, index);
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let expr = expression(&mut rng, len, cfg.depth);
    let mut toks = Vec::new();
    emit(&expr, &mut toks);
    let layout = layout_row(&expr, &mut rng);
    let shear = rng.random_range(-0.15..0.15);
    let rot: f64 = rng.random_range(-0.05..0.05);
    let stretch = rng.random_range(0.9..1.1);
    let (sin, cos) = rot.sin_cos();
    let layout = layout.map(|(x, y)| {
        let (x, y) = ((x - shear * y) * stretch, y);
        (x * cos - y * sin, x * sin + y * cos)
    });
    InkDocument {
        traces: roughen(layout.strokes, 0.08, 0.012, &mut rng),
        label: Some(toks.join(" ")),
        source: format!("synthetic-{seed}-{index}"),
    }
}

pub fn generate(seed: u64, cfg: &SynthConfig, raster: &RasterConfig, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count)
        .map(|i| {
            let doc = synth_document(seed, cfg, i);
            let label = doc.label.clone().unwrap_or_default();
            Sample::new(rasterize(&doc, raster)?, &label, vocab)
        })
        .collect()
}
