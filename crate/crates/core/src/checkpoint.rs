//! Checkpoint container: magic `TSEW`, version, then per-parameter records
//! of name, rank, dims, and little-endian 64-bit values. Networks are stored
//! under distinct name prefixes like `teacher.` / `student.` / `exam.`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSEW";
const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path)?;
    let mut pos = 0usize;
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > buf.len() {
            return Err(Error::data(format!(
                "{}: truncated reading {what} at byte offset {pos}",
                path.display()
            )));
        }
        Ok(())
    };
    need(pos, 8, "header")?;
    if &buf[..4] != MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic at byte offset 0 (expected \"TSEW\")",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    pos = 8;
    let mut entries = Vec::new();
    while pos < buf.len() {
        need(pos, 4, "name length")?;
        let name_len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, name_len, "name")?;
        let name = String::from_utf8(buf[pos..pos + name_len].to_vec())
            .map_err(|_| Error::data(format!("{}: non-utf8 parameter name", path.display())))?;
        pos += name_len;
        need(pos, 4, "rank")?;
        let rank = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, 4 * rank, "dims")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let count: usize = shape.iter().product();
        need(pos, 8 * count, "values")?;
        let data: Vec<f64> = buf[pos..pos + 8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * count;
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

/// Distinct first name segments present in a checkpoint.
pub fn prefixes(entries: &[(String, Tensor)]) -> Vec<String> {
    let set: BTreeSet<String> = entries
        .iter()
        .filter_map(|(n, _)| n.split('.').next().map(str::to_string))
        .collect();
    set.into_iter().collect()
}

/// Extracts the entries under `prefix.`, with the prefix stripped.
pub fn select_prefix(entries: &[(String, Tensor)], prefix: &str) -> Result<Vec<(String, Tensor)>> {
    let want = format!("{prefix}.");
    let selected: Vec<(String, Tensor)> = entries
        .iter()
        .filter(|(n, _)| n.starts_with(&want))
        .map(|(n, t)| (n[want.len()..].to_string(), t.clone()))
        .collect();
    if selected.is_empty() {
        return Err(Error::data(format!(
            "checkpoint has no network named \"{prefix}\"; available: {}",
            prefixes(entries).join(", ")
        )));
    }
    Ok(selected)
}

/// Copies stored values into a parameter list by name, validating shapes.
pub fn restore_params(params: Vec<(String, &mut Tensor)>, stored: &[(String, Tensor)]) -> Result<()> {
    for (name, param) in params {
        let found = stored
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::data(format!("checkpoint is missing parameter {name}")))?;
        if found.1.shape() != param.shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter {name} has shape {:?}, expected {:?}",
                found.1.shape(),
                param.shape()
            )));
        }
        param.data_mut().copy_from_slice(found.1.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_prefix_selection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tsew");
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![-1.0, 0.5, 9.0]).unwrap();
        write_checkpoint(
            &path,
            &[("teacher.w".to_string(), &a), ("exam.b".to_string(), &b)],
        )
        .unwrap();
        let entries = read_checkpoint(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(prefixes(&entries), vec!["exam".to_string(), "teacher".to_string()]);
        let exam = select_prefix(&entries, "exam").unwrap();
        assert_eq!(exam[0].0, "b");
        assert_eq!(exam[0].1.data(), b.data());

        let err = select_prefix(&entries, "student").unwrap_err().to_string();
        assert!(err.contains("available") && err.contains("teacher"), "{err}");
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tsew");
        let a = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        write_checkpoint(&path, &[("x".to_string(), &a)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("byte offset"), "{err}");
    }
}
