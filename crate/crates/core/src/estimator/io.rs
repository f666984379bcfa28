//! Estimator checkpoint file and loss-history CSV.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!   magic "VEDA" | version u32 | n_heads u32 | d_in u32 | d_hidden u32 |
//!   d_latent u32, then per head, in order, the row-major f32 weights of
//!   phi_q.w1, phi_q.b1, phi_q.w2, phi_q.b2, phi_k.w1, phi_k.b1, phi_k.w2,
//!   phi_k.b2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EstimatorError, EstimatorParams, HeadParams, LossPoint, MlpParams, PoolMode};
use crate::mat::Mat;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VEDA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint; weights are stored as f32 regardless of the build's
/// scalar type. The write is atomic (temp file plus rename).
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    params: &EstimatorParams<T>,
) -> Result<(), EstimatorError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        for value in [
            CHECKPOINT_VERSION,
            params.heads.len() as u32,
            params.d_in as u32,
            params.d_hidden as u32,
            params.d_latent as u32,
        ] {
            w.write_all(&value.to_le_bytes())?;
        }
        for head in &params.heads {
            for mlp in [&head.phi_q, &head.phi_k] {
                write_f32s(&mut w, mlp.w1.data())?;
                write_f32s(&mut w, &mlp.b1)?;
                write_f32s(&mut w, mlp.w2.data())?;
                write_f32s(&mut w, &mlp.b2)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`]. The pool mode is not
/// part of the header; callers pick it from the descriptor width.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EstimatorParams<f32>, EstimatorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(EstimatorError::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    let mut next_u32 = |r: &mut BufReader<File>| -> Result<u32, EstimatorError> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(EstimatorError::Format(format!("unsupported version {version}")));
    }
    let n_heads = next_u32(&mut r)? as usize;
    let d_in = next_u32(&mut r)? as usize;
    let d_hidden = next_u32(&mut r)? as usize;
    let d_latent = next_u32(&mut r)? as usize;
    if d_in == 0 || d_hidden == 0 || d_latent == 0 {
        return Err(EstimatorError::Format("zero dimension in header".into()));
    }

    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let mut mlp = || -> Result<MlpParams<f32>, EstimatorError> {
            Ok(MlpParams {
                w1: Mat::from_vec(d_in, d_hidden, read_f32s(&mut r, d_in * d_hidden)?),
                b1: read_f32s(&mut r, d_hidden)?,
                w2: Mat::from_vec(d_hidden, d_latent, read_f32s(&mut r, d_hidden * d_latent)?),
                b2: read_f32s(&mut r, d_latent)?,
            })
        };
        let phi_q = mlp()?;
        let phi_k = mlp()?;
        heads.push(HeadParams { phi_q, phi_k });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(EstimatorError::Format("trailing bytes after weights".into()));
    }
    // Placeholder mode; infer_pool_mode refines it once the head dim is known.
    Ok(EstimatorParams { heads, pool_mode: PoolMode::Triplet, d_in, d_hidden, d_latent })
}

/// Pool mode from descriptor width and head dim.
pub fn infer_pool_mode(d_in: usize, d: usize) -> Option<PoolMode> {
    match d_in {
        w if w == 3 * d => Some(PoolMode::Triplet),
        w if w == 2 * d => Some(PoolMode::MaxMin),
        w if w == d => Some(PoolMode::Avg),
        _ => None,
    }
}

fn write_f32s<T: Scalar, W: Write>(w: &mut W, values: &[T]) -> std::io::Result<()> {
    for &v in values {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>, EstimatorError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| EstimatorError::Format(format!("truncated weights: {e}")))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Loss history as `step,loss` CSV with a header row; atomic write.
pub fn write_loss_history_csv(
    path: impl AsRef<Path>,
    history: &[LossPoint],
) -> Result<(), EstimatorError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "step,loss")?;
        for point in history {
            writeln!(w, "{},{}", point.step, point.loss)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
