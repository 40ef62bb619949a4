//! Checkpoint container: a magic line, one JSON header line describing the
//! configuration, vocabulary and tensor shapes, then every tensor's values as
//! little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{ModelConfig, ModelParams, Vocab};

const MAGIC: &str = "MBRDPO-CHECKPOINT v1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    let header = Header {
        config: params.config().clone(),
        vocab: params.vocab().clone(),
        tensors: params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let io = |e| Error::io("<checkpoint>", e);
    writeln!(out, "{MAGIC}").map_err(io)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for t in params.tensors() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<ModelParams> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut line = String::new();
    input.read_line(&mut line).map_err(io)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint("missing magic line".into()));
    }
    line.clear();
    input.read_line(&mut line).map_err(io)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("payload truncated in {}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if input.read(&mut buf).map_err(io)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    ModelParams::from_parts(header.config, header.vocab, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::tiny_model;

    #[test]
    fn bit_exact_round_trip() {
        let mut p = tiny_model(9);
        // Values that a text format would mangle.
        p.tensors_mut()[0].data_mut()[0] = 1.0 / 3.0;
        p.tensors_mut()[0].data_mut()[1] = -0.0;
        p.tensors_mut()[0].data_mut()[2] = f64::MIN_POSITIVE;
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        let bits = |m: &ModelParams| -> Vec<u64> {
            m.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&p), bits(&back));
        assert_eq!(p.config(), back.config());
        assert_eq!(p.vocab(), back.vocab());

        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_or_corrupt_files_fail() {
        let p = tiny_model(2);
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
        assert!(read_checkpoint(&b"not a checkpoint\n"[..]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = tiny_model(3);
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
