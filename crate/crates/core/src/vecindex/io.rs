//! Embedding matrix files: a binary block plus a JSONL row → id sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingMatrix, VecIndexError, EMBEDDINGS_MAGIC};
use crate::util::{expect_magic, read_f32, read_u32, write_f32, write_u32};

#[derive(Serialize, Deserialize)]
struct SidecarRow {
    row: usize,
    id: u64,
}

/// `emb.bin` → `emb.bin.ids.jsonl`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".ids.jsonl");
    PathBuf::from(s)
}

pub fn write_embeddings(m: &EmbeddingMatrix, bin: &Path) -> Result<(), VecIndexError> {
    let mut w = BufWriter::new(File::create(bin)?);
    w.write_all(EMBEDDINGS_MAGIC)?;
    write_u32(&mut w, m.n() as u32)?;
    write_u32(&mut w, m.d() as u32)?;
    for &v in m.data() {
        write_f32(&mut w, v)?;
    }
    w.flush()?;
    let mut s = BufWriter::new(File::create(sidecar_path(bin))?);
    for (row, &id) in m.ids().iter().enumerate() {
        let line = serde_json::to_string(&SidecarRow { row, id }).map_err(std::io::Error::other)?;
        writeln!(s, "{line}")?;
    }
    s.flush()?;
    Ok(())
}

/// Read a matrix; the sidecar may list rows in any order but must cover all.
pub fn read_embeddings(bin: &Path) -> Result<EmbeddingMatrix, VecIndexError> {
    let mut r = BufReader::new(File::open(bin)?);
    expect_magic(&mut r, EMBEDDINGS_MAGIC)?;
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(read_f32(&mut r)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "trailing bytes after embeddings").into());
    }
    let mut ids: Vec<Option<u64>> = vec![None; n];
    let side = BufReader::new(File::open(sidecar_path(bin))?);
    for (i, line) in side.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| VecIndexError::Sidecar { line: i + 1, message };
        let row: SidecarRow = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let slot = ids.get_mut(row.row).ok_or_else(|| err(format!("row {} out of range", row.row)))?;
        *slot = Some(row.id);
    }
    let ids = ids
        .into_iter()
        .enumerate()
        .map(|(row, id)| {
            id.ok_or(VecIndexError::Sidecar {
                line: 0,
                message: format!("row {row} has no id"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingMatrix::new(d, data, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0, -2.5], vec![0.125, 3.0]], vec![42, 7]).unwrap();
        write_embeddings(&m, &p).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), m);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], EMBEDDINGS_MAGIC);
        assert_eq!(bytes.len(), 8 + 8 + 4 * 4);
    }

    #[test]
    fn missing_sidecar_row_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0], vec![2.0]], vec![1, 2]).unwrap();
        write_embeddings(&m, &p).unwrap();
        std::fs::write(sidecar_path(&p), "{\"row\":0,\"id\":1}\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(VecIndexError::Sidecar { .. })));
    }
}
