//! Flat binary checkpoint format.
//!
//! ```text
//! "DBGI" | version u32 | count u32
//! per tensor: name_len u16 | name (UTF-8) | rank u8 | extents u64 × rank | payload f32 × numel
//! ```
//!
//! All integers and floats are little-endian. Values are narrowed to `f32` on
//! save and widened back on load.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DBGI";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(4 * t.numel());
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let [rank] = read_array::<1, _>(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_array(&mut r)?);
            shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; 4 * numel];
        r.read_exact(&mut payload)
            .map_err(|_| Error::Checkpoint(format!("truncated payload for {name}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let entries: Vec<(&str, &Tensor)> = store.iter().map(|(_, p)| (p.name.as_str(), p.value())).collect();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &entries)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Outcome of loading a checkpoint into an existing store.
#[derive(Debug, Default)]
pub struct LoadReport {
    /// Store entries the checkpoint did not provide (left untouched).
    pub missing: Vec<String>,
    /// Checkpoint entries the store has no slot for.
    pub unexpected: Vec<String>,
}

/// Copies matching tensors into `store`. Shapes must agree for every name
/// present on both sides.
pub fn load_into(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        match store.id(&name) {
            Some(id) => {
                store
                    .set_value(id, t)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                seen[id.0] = true;
            }
            None => report.unexpected.push(name),
        }
    }
    for (id, p) in store.iter() {
        if !seen[id.0] {
            report.missing.push(p.name.clone());
        }
    }
    Ok(report)
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<LoadReport> {
    let bytes = fs::read(path)?;
    load_into(store, read_tensors(bytes.as_slice())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab", &t)]).unwrap();
        let mut expected = b"DBGI".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.push(1);
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn narrows_to_f32() {
        let t = Tensor::vector(vec![0.1]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x", &t)]).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back[0].1.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_tensors(&b"NOPE\x01\0\0\0"[..]), Err(Error::Checkpoint(_))));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x", &Tensor::zeros(&[4]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn load_reports_missing_and_unexpected() {
        let mut store = ParamStore::new();
        store.add("a", ParamKind::Weight, Tensor::zeros(&[2])).unwrap();
        store.add("b", ParamKind::Weight, Tensor::zeros(&[2])).unwrap();
        let report = load_into(
            &mut store,
            vec![("a".into(), Tensor::ones(&[2])), ("c".into(), Tensor::ones(&[1]))],
        )
        .unwrap();
        assert_eq!(report.missing, vec!["b"]);
        assert_eq!(report.unexpected, vec!["c"]);
        assert_eq!(store.value(store.id("a").unwrap()).data(), &[1.0, 1.0]);
        let bad = load_into(&mut store, vec![("a".into(), Tensor::ones(&[3]))]);
        assert!(bad.is_err());
    }
}
