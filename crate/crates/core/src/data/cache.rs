//! Dataset cache: binary PGM images plus a `manifest.tsv` of
//! `filename<TAB>label` lines, and loading of InkML directories.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{inkml, raster, RasterConfig, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Writes an H×W gray image (values 0..=255) as binary PGM.
pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    assert_eq!(pixels.len(), width * height);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)
}

/// Reads a binary PGM with maxval ≤ 255; returns (width, height, pixels).
pub fn read_pgm<R: Read>(r: &mut R) -> io::Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| invalid("non-ASCII PGM header"))?.to_string());
    }
    if fields[0] != "P5" {
        return Err(invalid(format!("not a binary PGM (magic {:?})", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| invalid(format!("bad PGM header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(invalid(format!("unsupported PGM maxval {max}")));
    }
    pos += 1;
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| invalid("truncated PGM pixel data"))?;
    Ok((w, h, body.to_vec()))
}

/// 1×H×W binary image to PGM bytes, ink as 255.
pub fn image_to_pgm(image: &Tensor) -> Vec<u8> {
    image.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect()
}

pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = io::BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}.pgm");
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let mut f = io::BufWriter::new(fs::File::create(dir.join(&name))?);
        write_pgm(&mut f, w, h, &image_to_pgm(&s.image))?;
        f.flush()?;
        writeln!(manifest, "{name}\t{}", s.label)?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let manifest = fs::File::open(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(manifest).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((name, label)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: n as u32 + 1,
                column: 1,
                message: "manifest line has no tab".into(),
            });
        };
        let (w, h, px) = read_pgm(&mut fs::File::open(dir.join(name))?)?;
        let image = Tensor::new(&[1, h, w], px.iter().map(|&p| if p > 127 { 1.0 } else { 0.0 }).collect())?;
        out.push(Sample::new(image, label, vocab)?);
    }
    Ok(out)
}

/// Rasterizes every `*.inkml` file under `dir` (sorted by name). Files without
/// a label are skipped with a warning.
pub fn load_inkml_dir(dir: &Path, raster_cfg: &RasterConfig, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "inkml"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let doc = inkml::parse_inkml(&fs::read_to_string(&p)?)?;
        let Some(label) = doc.label.as_deref() else {
            log::warn!("{}: no truth annotation, skipped", p.display());
            continue;
        };
        let label = label.trim().trim_matches('$');
        out.push(Sample::new(raster::rasterize(&doc, raster_cfg)?, label, vocab)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 3, 2, &[0, 1, 2, 253, 254, 255]).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, px) = read_pgm(&mut buf.as_slice()).unwrap();
        assert_eq!((w, h, px), (3, 2, vec![0, 1, 2, 253, 254, 255]));
        let commented = b"P5 # c\n2 1\n255\n\x07\x08";
        assert_eq!(read_pgm(&mut &commented[..]).unwrap().2, vec![7, 8]);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        assert!(read_pgm(&mut &b"P5\n4 4\n255\n\0\0"[..]).is_err());
        assert!(read_pgm(&mut &b"P2\n1 1\n255\n0"[..]).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::synthetic();
        let img = Tensor::new(&[1, 2, 3], vec![0., 1., 0., 1., 1., 0.]).unwrap();
        let samples = vec![
            Sample::new(img.clone(), "x ^ { 2 }", &vocab).unwrap(),
            Sample::new(img, r"\frac{1}{2}", &vocab).unwrap(),
        ];
        save_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path(), &vocab).unwrap();
        assert_eq!(back, samples);
    }
}
