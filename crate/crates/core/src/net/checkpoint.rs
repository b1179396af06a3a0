//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic       8 bytes  "FLOWLABN"
//! version     u32
//! activation  u8       0 = silu, 1 = relu
//! n_sizes     u32
//! sizes       n_sizes x u64
//! n_params    u64
//! params      n_params x f64 (IEEE-754 bits, layer order: weights row-major, then biases)
//! ```

use std::io::{Read, Write};

use super::{Activation, VelocityNet};
use crate::error::{FlowError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLOWLABN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(net: &VelocityNet, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[net.activation().tag()])?;
    let sizes = net.layer_sizes();
    w.write_all(&(sizes.len() as u32).to_le_bytes())?;
    for s in sizes {
        w.write_all(&(s as u64).to_le_bytes())?;
    }
    let params = net.params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| FlowError::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<VelocityNet> {
    let magic: [u8; 8] = read_array(&mut r, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FlowError::Checkpoint("not a flowlab checkpoint".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(FlowError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let [tag] = read_array::<1, _>(&mut r, "activation")?;
    let activation = Activation::from_tag(tag)
        .ok_or_else(|| FlowError::Checkpoint(format!("unknown activation tag {tag}")))?;
    let n_sizes = u32::from_le_bytes(read_array(&mut r, "layer count")?) as usize;
    if !(2..=1024).contains(&n_sizes) {
        return Err(FlowError::Checkpoint(format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes)
        .map(|_| Ok(u64::from_le_bytes(read_array(&mut r, "layer size")?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let n_params = u64::from_le_bytes(read_array(&mut r, "parameter count")?) as usize;
    if n_params != expected {
        return Err(FlowError::Checkpoint(format!(
            "{n_params} parameters stored, layer sizes imply {expected}"
        )));
    }
    let params = (0..n_params)
        .map(|_| Ok(f64::from_le_bytes(read_array(&mut r, "parameters")?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FlowError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    VelocityNet::from_parts(&sizes, activation, &params)
        .map_err(|e| FlowError::Checkpoint(e.to_string()))
}
