//! On-disk formats: IDV1 vector files, the fitted-model container and
//! atomic file helpers.
//!
//! IDV1 layout: `b"IDV1"`, u32 count, u32 dim, `count·dim` f32 values, all
//! little-endian, then optionally a u32 length and that many bytes of JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::numkit::{GaussianModel, RowMatrix};
use crate::pca::{LatentGaussian, PcaModel};

pub const IDV_MAGIC: &[u8; 4] = b"IDV1";
const MODEL_MAGIC: &[u8; 4] = b"IDFM";
const PCA_TAG: &[u8; 4] = b"PCA1";
const LATENT_TAG: &[u8; 4] = b"LGM1";

/// Contents of an IDV1 file. Values are widened from f32.
#[derive(Debug, Clone, PartialEq)]
pub struct IdvFile {
    pub vectors: RowMatrix,
    pub metadata: Option<Value>,
}

/// Serializes rows as IDV1. Values are narrowed to f32.
pub fn encode_idv(vectors: &RowMatrix, metadata: Option<&Value>) -> Result<Vec<u8>> {
    let count = u32::try_from(vectors.nrows()).map_err(|_| Error::Shape("too many rows for IDV1".into()))?;
    let dim = u32::try_from(vectors.ncols()).map_err(|_| Error::Shape("dimension too large for IDV1".into()))?;
    let mut out = Vec::with_capacity(12 + 4 * vectors.as_slice().len());
    out.extend_from_slice(IDV_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &x in vectors.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(meta) = metadata {
        let text = serde_json::to_vec(meta).map_err(|e| Error::Data(format!("metadata: {e}")))?;
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
    }
    Ok(out)
}

pub fn decode_idv(bytes: &[u8], path: &Path) -> Result<IdvFile> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != IDV_MAGIC {
        return Err(bad("missing IDV1 header".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("header size overflow".into()))?;
    let end = 12 + payload;
    if bytes.len() < end {
        return Err(bad(format!("expected {count}x{dim} values, file is truncated")));
    }
    let data: Vec<f64> = bytes[12..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let rest = &bytes[end..];
    let metadata = match rest.len() {
        0 => None,
        1..=3 => return Err(bad("trailing bytes after vector payload".into())),
        _ => {
            let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
            if rest.len() != 4 + len {
                return Err(bad(format!("metadata block declares {len} bytes, found {}", rest.len() - 4)));
            }
            Some(serde_json::from_slice(&rest[4..]).map_err(|e| bad(format!("metadata: {e}")))?)
        }
    };
    Ok(IdvFile {
        vectors: RowMatrix::from_vec(count, dim, data)?,
        metadata,
    })
}

pub fn write_idv(path: &Path, vectors: &RowMatrix, metadata: Option<&Value>) -> Result<()> {
    write_atomic(path, &encode_idv(vectors, metadata)?)
}

pub fn read_idv(path: &Path) -> Result<IdvFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_idv(&bytes, path)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(ctx(), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    f.sync_all().map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

// ---- model container -------------------------------------------------------

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: usize) {
        self.0.extend_from_slice(&(x as u32).to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: "model file is truncated".into(),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            reason: "size overflow".into(),
        })?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serializes a PCA model and optional latent Gaussian at full precision.
pub fn encode_model(pca: &PcaModel, latent: Option<&LatentGaussian>) -> Vec<u8> {
    let mut w = Writer(MODEL_MAGIC.to_vec());
    let mut body = Writer(Vec::new());
    body.u32(pca.dim());
    body.u32(pca.k());
    body.u32(pca.whiten() as usize);
    body.f64s(pca.mean());
    body.f64s(pca.components().as_slice());
    body.f64s(pca.explained_variance());
    w.0.extend_from_slice(PCA_TAG);
    w.u64(body.0.len() as u64);
    w.0.extend_from_slice(&body.0);
    if let Some(l) = latent {
        let mut body = Writer(Vec::new());
        body.u32(l.gaussian.dim());
        body.u64(l.source_count as u64);
        body.f64s(l.gaussian.mean());
        body.f64s(l.gaussian.chol().as_slice());
        w.0.extend_from_slice(LATENT_TAG);
        w.u64(body.0.len() as u64);
        w.0.extend_from_slice(&body.0);
    }
    w.0
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<(PcaModel, Option<LatentGaussian>)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { bytes, path };
    if r.take(4)? != MODEL_MAGIC {
        return Err(bad("not a model file"));
    }
    let mut pca = None;
    let mut latent = None;
    while !r.bytes.is_empty() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u64()? as usize;
        let mut s = Reader { bytes: r.take(len)?, path };
        match &tag {
            PCA_TAG => {
                let d = s.u32()?;
                let k = s.u32()?;
                let whiten = s.u32()? != 0;
                let mean = s.f64s(d)?;
                let comps = RowMatrix::from_vec(k, d, s.f64s(k * d)?)?;
                let var = s.f64s(k)?;
                pca = Some(PcaModel::from_parts(mean, comps, var, whiten)?);
            }
            LATENT_TAG => {
                let k = s.u32()?;
                let source_count = s.u64()? as usize;
                let mean = s.f64s(k)?;
                let chol = RowMatrix::from_vec(k, k, s.f64s(k * k)?)?;
                latent = Some(LatentGaussian {
                    gaussian: GaussianModel::new(mean, chol)?,
                    source_count,
                });
            }
            _ => return Err(bad("unknown section tag")),
        }
        if !s.bytes.is_empty() {
            return Err(bad("section has trailing bytes"));
        }
    }
    let pca = pca.ok_or_else(|| bad("missing PCA section"))?;
    if let Some(l) = &latent {
        if l.gaussian.dim() != pca.k() {
            return Err(bad("latent dimension does not match PCA rank"));
        }
    }
    Ok((pca, latent))
}

pub fn write_model(path: &Path, pca: &PcaModel, latent: Option<&LatentGaussian>) -> Result<()> {
    write_atomic(path, &encode_model(pca, latent))
}

pub fn read_model(path: &Path) -> Result<(PcaModel, Option<LatentGaussian>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_model(&bytes, path)
}
