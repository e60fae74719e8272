//! Binary container for named f64 matrices.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! matrices as little-endian f64 in row-major order. The header records
//! each matrix's shape, byte offset into the payload and SHA-256 digest.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concept_space::{ConceptBasis, Dictionary};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const FORMAT: &str = "taskvec-matrices";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";
pub const LAYOUT: &str = "row-major";
/// Headers larger than this are rejected before allocation.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub layout: String,
    /// Byte offset into the payload.
    pub offset: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// What the matrices describe: `params`, `basis` or `dictionary`.
    pub content: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub matrices: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub matrices: Vec<Array2<f64>>,
}

impl Container {
    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.header
            .matrices
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.matrices[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing matrix `{name}`")))
    }

    fn expect_content(&self, content: &str) -> Result<()> {
        if self.header.content == content {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected `{content}` content, found `{}`",
                self.header.content
            )))
        }
    }
}

fn bytes_of(m: ArrayView2<'_, f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    // iter() walks in logical row-major order whatever the memory layout
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode(content: &str, metadata: serde_json::Value, matrices: &[(&str, ArrayView2<'_, f64>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(matrices.len());
    for (name, m) in matrices {
        let bytes = bytes_of(*m);
        entries.push(MatrixEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            dtype: DTYPE.into(),
            layout: LAYOUT.into(),
            offset: payload.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        content: content.into(),
        metadata,
        matrices: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("file shorter than the length prefix".into()))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_BYTES || header_len as usize > bytes.len() - 8 {
        return Err(Error::Checkpoint(format!("header length {header_len} exceeds the file")));
    }
    let header_end = 8 + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let payload = &bytes[header_end..];
    let mut expected_len = 0usize;
    let mut matrices = Vec::with_capacity(header.matrices.len());
    for m in &header.matrices {
        if m.dtype != DTYPE || m.layout != LAYOUT {
            return Err(Error::Checkpoint(format!(
                "matrix `{}` has dtype `{}` and layout `{}`",
                m.name, m.dtype, m.layout
            )));
        }
        let n = m
            .rows
            .checked_mul(m.cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("matrix `{}` shape overflows", m.name)))?;
        let end = m.offset.checked_add(n).filter(|&e| e <= payload.len()).ok_or_else(|| {
            Error::Checkpoint(format!("matrix `{}` runs past the end of the payload", m.name))
        })?;
        let raw = &payload[m.offset..end];
        if hex::encode(Sha256::digest(raw)) != m.sha256 {
            return Err(Error::Checkpoint(format!("digest mismatch for matrix `{}`", m.name)));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
            .collect();
        let arr = Array2::from_shape_vec((m.rows, m.cols), data)
            .map_err(|e| Error::Checkpoint(format!("matrix `{}`: {e}", m.name)))?;
        matrices.push(arr);
        expected_len = expected_len.max(end);
    }
    if expected_len != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header accounts for {expected_len}",
            payload.len()
        )));
    }
    Ok(Container { header, matrices })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn encode_params(params: &ModelParams) -> Result<Vec<u8>> {
    encode(
        "params",
        serde_json::json!({ "d": params.dim() }),
        &[
            ("w_k", params.w_k.view()),
            ("w_q", params.w_q.view()),
            ("w_v", params.w_v.view()),
        ],
    )
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let c = decode(bytes)?;
    c.expect_content("params")?;
    ModelParams::from_matrices(c.get("w_k")?.clone(), c.get("w_q")?.clone(), c.get("w_v")?.clone())
        .map_err(|e| Error::Checkpoint(format!("inconsistent parameter shapes: {e}")))
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    write_file(path, &encode_params(params)?)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

pub fn save_basis(basis: &ConceptBasis, path: &Path) -> Result<()> {
    let bytes = encode(
        "basis",
        serde_json::json!({ "d": basis.dim(), "num_tasks": basis.num_tasks(), "num_common": basis.num_common() }),
        &[
            ("task", basis.task_vectors()),
            ("label", basis.label_vectors()),
            ("common", basis.common_vectors()),
        ],
    )?;
    write_file(path, &bytes)
}

pub fn load_basis(path: &Path) -> Result<ConceptBasis> {
    let c = read_file(path)?;
    c.expect_content("basis")?;
    ConceptBasis::from_families(c.get("task")?.clone(), c.get("label")?.clone(), c.get("common")?.clone())
}

pub fn save_dictionary(dict: &Dictionary, path: &Path) -> Result<()> {
    let bytes = encode(
        "dictionary",
        serde_json::json!({ "anchor": dict.anchor(), "num_tasks": dict.num_tasks() }),
        &[("tokens", dict.tokens())],
    )?;
    write_file(path, &bytes)
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    let c = read_file(path)?;
    c.expect_content("dictionary")?;
    let meta = &c.header.metadata;
    let anchor = meta["anchor"]
        .as_f64()
        .ok_or_else(|| Error::Checkpoint("dictionary metadata lacks `anchor`".into()))?;
    let num_tasks = meta["num_tasks"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("dictionary metadata lacks `num_tasks`".into()))? as usize;
    Dictionary::from_tokens(c.get("tokens")?.clone(), anchor, num_tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn params_round_trip_is_bit_exact() {
        let mut p = init_params(6, 0.3, 0.7, 4).unwrap();
        p.w_v[[1, 2]] = -0.0;
        p.w_k[[0, 0]] = f64::MIN_POSITIVE / 3.0;
        let back = decode_params(&encode_params(&p).unwrap()).unwrap();
        for (a, b) in [(&p.w_k, &back.w_k), (&p.w_q, &back.w_q), (&p.w_v, &back.w_v)] {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn file_size_is_header_plus_three_square_matrices() {
        let d = 9;
        let bytes = encode_params(&init_params(d, 0.1, 0.1, 0).unwrap()).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + header_len + 3 * d * d * 8);
    }

    #[test]
    fn corrupted_inputs_give_structured_errors() {
        let bytes = encode_params(&init_params(4, 0.1, 0.1, 0).unwrap()).unwrap();
        let mut bad_header = bytes.clone();
        bad_header[10] = b'#';
        assert!(matches!(decode(&bad_header), Err(Error::Checkpoint(_))));
        let mut bad_payload = bytes.clone();
        let last = bad_payload.len() - 1;
        bad_payload[last] ^= 1;
        assert!(matches!(decode(&bad_payload), Err(Error::Checkpoint(m)) if m.contains("digest")));
        assert!(matches!(decode(&bytes[..5]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));
        let mut huge = bytes.clone();
        huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&huge), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_content_is_rejected() {
        let m = Array2::<f64>::zeros((2, 2));
        let bytes = encode("basis", serde_json::Value::Null, &[("task", m.view())]).unwrap();
        assert!(matches!(decode_params(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn transposed_views_are_written_row_major() {
        let m = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = m.t();
        let c = decode(&encode("x", serde_json::Value::Null, &[("t", t)]).unwrap()).unwrap();
        assert_eq!(c.get("t").unwrap(), &t.to_owned());
    }

    #[test]
    fn basis_and_dictionary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let basis = ConceptBasis::build(20, 2, 5, 8).unwrap();
        let dict = Dictionary::build(&basis, 0.1).unwrap();
        save_basis(&basis, &dir.path().join("basis.bin")).unwrap();
        save_dictionary(&dict, &dir.path().join("dict.bin")).unwrap();
        assert_eq!(load_basis(&dir.path().join("basis.bin")).unwrap(), basis);
        assert_eq!(load_dictionary(&dir.path().join("dict.bin")).unwrap(), dict);
    }
}
