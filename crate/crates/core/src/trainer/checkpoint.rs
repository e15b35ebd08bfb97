//! Checkpoint format: text header with a model-spec hash, then binary
//! little-endian f64 tensor payloads in parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::nn::ParameterSet;
use crate::tensor::{Real, Tensor};

const MAGIC: &str = "GT-CHECKPOINT v1";

#[derive(Debug)]
pub struct Checkpoint {
    pub model_hash: String,
    pub version: u64,
    pub step: u64,
    pub entries: Vec<(String, Tensor)>,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    model_hash: &str,
    version: u64,
    step: u64,
    params: &ParameterSet,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "hash={model_hash}")?;
        writeln!(w, "version={version}")?;
        writeln!(w, "step={step}")?;
        writeln!(w, "params={}", params.len())?;
        for p in params.iter() {
            writeln!(w, "{} {} {}", p.name, p.value.rows(), p.value.cols())?;
        }
        writeln!(w, "BINARY")?;
        for p in params.iter() {
            for &v in p.value.data() {
                w.write_all(&(v as f64).to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(io)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let io = |e: std::io::Error| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let bad = |msg: &str| CoreError::Checkpoint(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut contents = Vec::new();
    r.read_to_end(&mut contents).map_err(io)?;

    // Split the text header from the binary payload at the BINARY marker.
    let marker = b"BINARY\n";
    let pos = contents
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing BINARY marker"))?;
    let header = std::str::from_utf8(&contents[..pos]).map_err(|_| bad("header not UTF-8"))?;
    let payload = &contents[pos + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("bad magic"));
    }
    let field = |line: Option<&str>, key: &str| -> Result<String> {
        let line = line.ok_or_else(|| bad("truncated header"))?;
        line.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("expected {key}=")))
    };
    let model_hash = field(lines.next(), "hash")?;
    let version: u64 = field(lines.next(), "version")?
        .parse()
        .map_err(|_| bad("bad version"))?;
    let step: u64 = field(lines.next(), "step")?
        .parse()
        .map_err(|_| bad("bad step"))?;
    let count: usize = field(lines.next(), "params")?
        .parse()
        .map_err(|_| bad("bad params count"))?;

    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated shape list"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad("bad shape line"));
        }
        let rows: usize = fields[1].parse().map_err(|_| bad("bad rows"))?;
        let cols: usize = fields[2].parse().map_err(|_| bad("bad cols"))?;
        shapes.push((fields[0].to_string(), rows, cols));
    }

    let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
    if payload.len() != total * 8 {
        return Err(bad(&format!(
            "payload length {} != expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut entries = Vec::with_capacity(count);
    let mut offset = 0;
    for (name, rows, cols) in shapes {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&payload[offset..offset + 8]);
            data.push(f64::from_le_bytes(buf) as Real);
            offset += 8;
        }
        entries.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint {
        model_hash,
        version,
        step,
        entries,
    })
}

/// Installs checkpoint tensors into a parameter set, validating the model
/// hash and every name/shape.
pub fn load_into(
    checkpoint: &Checkpoint,
    expected_hash: &str,
    params: &mut ParameterSet,
) -> Result<()> {
    if checkpoint.model_hash != expected_hash {
        return Err(CoreError::Checkpoint(format!(
            "model spec hash mismatch: checkpoint {}, expected {}",
            checkpoint.model_hash, expected_hash
        )));
    }
    if checkpoint.entries.len() != params.len() {
        return Err(CoreError::Checkpoint("parameter count mismatch".into()));
    }
    for (id, (name, tensor)) in checkpoint.entries.iter().enumerate() {
        let p = params.get(id);
        if p.name != *name || p.value.shape() != tensor.shape() {
            return Err(CoreError::Checkpoint(format!(
                "parameter {id} mismatch: {name} {:?}",
                tensor.shape()
            )));
        }
        *params.value_mut(id) = tensor.clone();
    }
    Ok(())
}
