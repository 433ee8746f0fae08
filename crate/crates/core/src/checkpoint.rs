//! Binary checkpoints.
//!
//! Layout: four text header lines
//!
//! ```text
//! stimtrain-checkpoint 1
//! spec {"input_dim":...}
//! seed 42
//! values 1234
//! ```
//!
//! followed by `values` little-endian `f64`s (parameters in declaration
//! order, then normalization statistics) and an 8-byte checksum: the first
//! eight bytes of the SHA-256 of everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ResidualNet};

const MAGIC: &str = "stimtrain-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 8;

fn checksum(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    let digest = Sha256::digest(bytes);
    let mut out = [0; CHECKSUM_LEN];
    out.copy_from_slice(&digest[..CHECKSUM_LEN]);
    out
}

/// Serialized checkpoint bytes for `net`.
pub fn encode(net: &ResidualNet) -> Vec<u8> {
    let flat = net.flat_state();
    let spec = serde_json::to_string(net.spec()).expect("spec serializes");
    let mut bytes = format!(
        "{MAGIC} {FORMAT_VERSION}\nspec {spec}\nseed {}\nvalues {}\n",
        net.seed(),
        flat.len()
    )
    .into_bytes();
    bytes.reserve(flat.len() * 8 + CHECKSUM_LEN);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum(&bytes);
    bytes.extend_from_slice(&sum);
    bytes
}

/// Writes `net` to `path` via a temporary file and rename.
pub fn save_checkpoint(net: &ResidualNet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, encode(net)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take_line<'a>(bytes: &mut &'a [u8], path: &Path) -> Result<&'a str> {
    let corrupt = |m: &str| Error::Corruption {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("truncated header"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8"))?;
    *bytes = &bytes[end + 1..];
    Ok(line)
}

/// Parses checkpoint bytes read from `path` (used in error messages).
pub fn decode(bytes: &[u8], path: &Path, expected: Option<&NetworkSpec>) -> Result<ResidualNet> {
    let corrupt = |m: String| Error::Corruption {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < CHECKSUM_LEN {
        return Err(corrupt("file too short".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if checksum(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut rest = body;
    let magic = take_line(&mut rest, path)?;
    if magic != format!("{MAGIC} {FORMAT_VERSION}") {
        return Err(corrupt(format!("unrecognized header {magic:?}")));
    }
    let field = |line: &'_ str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected `{key}` header line")))
    };
    let spec_text = field(take_line(&mut rest, path)?, "spec")?;
    let spec: NetworkSpec =
        serde_json::from_str(&spec_text).map_err(|e| corrupt(format!("bad spec: {e}")))?;
    let seed: u64 = field(take_line(&mut rest, path)?, "seed")?
        .parse()
        .map_err(|e| corrupt(format!("bad seed: {e}")))?;
    let count: usize = field(take_line(&mut rest, path)?, "values")?
        .parse()
        .map_err(|e| corrupt(format!("bad value count: {e}")))?;
    if let Some(exp) = expected {
        if *exp != spec {
            return Err(Error::Incompatible {
                expected: exp.to_string(),
                found: spec.to_string(),
            });
        }
    }
    if rest.len() != count * 8 || count != ResidualNet::flat_state_len(&spec) {
        return Err(corrupt(format!(
            "payload holds {} bytes, header declares {count} values, spec needs {}",
            rest.len(),
            ResidualNet::flat_state_len(&spec)
        )));
    }
    let flat: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ResidualNet::from_flat_state(&spec, seed, &flat).map_err(|e| corrupt(e.to_string()))
}

/// Loads a checkpoint, optionally requiring a particular spec.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkSpec>) -> Result<ResidualNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, expected)
}
