//! `<stem>.json` holds architecture, normalization and counters;
//! `<stem>.bin` holds the weights as a u64 count followed by f64 values,
//! all little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Encoder, LossRecord, NetArch, NetError, Normalization, Surrogate};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: NetArch,
    norm: Normalization,
    encoder: Encoder,
    seed: u64,
    iterations: u64,
    n_weights: usize,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the header path.
pub fn save_checkpoint(s: &Surrogate, stem: &Path) -> Result<PathBuf, NetError> {
    let header = Header {
        arch: s.arch.clone(),
        norm: s.norm.clone(),
        encoder: s.encoder.clone(),
        seed: s.seed,
        iterations: s.iterations,
        n_weights: s.weights.len(),
    };
    let json = with_ext(stem, "json");
    fs::write(&json, serde_json::to_vec_pretty(&header).map_err(|e| NetError::Checkpoint(e.to_string()))?)?;
    let mut bytes = Vec::with_capacity(8 + 8 * s.weights.len());
    bytes.extend_from_slice(&(s.weights.len() as u64).to_le_bytes());
    for w in &s.weights {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    fs::File::create(with_ext(stem, "bin"))?.write_all(&bytes)?;
    Ok(json)
}

/// Accepts the stem or either of the two file paths.
pub fn load_checkpoint(path: &Path) -> Result<Surrogate, NetError> {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let text = fs::read_to_string(with_ext(&stem, "json"))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let bytes = fs::read(with_ext(&stem, "bin"))?;
    if bytes.len() < 8 {
        return Err(NetError::Checkpoint("weight file is truncated".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if n != header.n_weights || bytes.len() != 8 + 8 * n {
        return Err(NetError::Checkpoint(format!(
            "weight file holds {} bytes for {n} weights, header expects {}",
            bytes.len(),
            header.n_weights
        )));
    }
    let weights = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Surrogate::from_parts(header.arch, weights, header.norm, header.encoder, header.seed, header.iterations)
}

pub fn write_loss_csv(log: &[LossRecord], path: &Path) -> Result<(), NetError> {
    let mut out = String::from("iteration,loss\n");
    for r in log {
        out.push_str(&format!("{},{:e}\n", r.iteration, r.loss));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = NetArch::uniform(3, 2, 5, 2, 4);
        let mut s = Surrogate::new(arch, Encoder::Direct { dim: 3 }, Normalization::identity(3, 2), 11).unwrap();
        s.iterations = 42;
        let stem = dir.path().join("checkpoint.offline");
        let header = save_checkpoint(&s, &stem).unwrap();
        assert!(header.ends_with("checkpoint.offline.json"));
        for p in [stem.clone(), header.clone(), with_ext(&stem, "bin")] {
            let back = load_checkpoint(&p).unwrap();
            assert_eq!(back.weights, s.weights);
            assert_eq!(back.iterations, 42);
            assert_eq!(back.arch, s.arch);
        }
        let bin = with_ext(&stem, "bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, bytes).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }
}
