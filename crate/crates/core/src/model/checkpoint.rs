//! Checkpoint files: magic `CAVT`, version, then named little-endian f32 tensors in
//! store order.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::binfmt::{len_u32, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{Real, Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: &str = "CAVT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize every tensor of `store` as f32.
pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, len_u32("tensor count", store.len())?);
    for (name, p) in store.iter() {
        put_u32(&mut out, len_u32("name length", name.len())?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.dims() {
            put_u32(&mut out, len_u32("dim", d)?);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_at = r.offset();
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::BadName { offset: name_at })?
            .to_string();
        let rank_at = r.offset();
        let rank = r.u32()?;
        if rank == 0 || rank as usize > MAX_RANK {
            return Err(FormatError::InvalidHeader {
                field: "rank",
                offset: rank_at,
                value: rank.into(),
            });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.positive("dim")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::InvalidHeader {
                field: "dims",
                offset: rank_at,
                value: u64::MAX,
            })?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data).expect("length matches dims");
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

/// Overwrite `store` with checkpoint tensors. Every store tensor must be present
/// with the same shape and no extra tensors may appear.
pub fn restore<T: Real>(store: &mut ParamStore<T>, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
    for (name, _) in &entries {
        if store.get(name).is_none() {
            return Err(FormatError::UnknownTensor(name.clone()).into());
        }
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = entries.into_iter().collect();
    for name in names {
        let t = by_name.remove(&name).ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
        let want = store.get(&name).expect("name from store").dims().to_vec();
        if t.dims() != want.as_slice() {
            return Err(FormatError::ShapeMismatch {
                name,
                stored: t.dims().to_vec(),
                expected: want,
            }
            .into());
        }
        store.set(&name, t.cast())?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(store, decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::<f32>::new(ModelConfig::desk(), 5).unwrap();
        let bytes = encode_checkpoint(m.params()).unwrap();
        let mut fresh = Model::<f32>::new(ModelConfig::desk(), 6).unwrap();
        restore(fresh.params_mut(), decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(fresh.params(), m.params());
        assert_eq!(encode_checkpoint(fresh.params()).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", "g", Tensor::from_f64([2], &[1.0, -2.0]).unwrap()).unwrap();
        let b = encode_checkpoint(&s).unwrap();
        let mut want = b"CAVT".to_vec();
        for v in [1u32, 1, 1] {
            want.extend(v.to_le_bytes());
        }
        want.push(b'w');
        for v in [1u32, 2] {
            want.extend(v.to_le_bytes());
        }
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn distinct_errors() {
        let m = Model::<f32>::new(ModelConfig::desk(), 5).unwrap();
        let bytes = encode_checkpoint(m.params()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(FormatError::BadMagic { expected: "CAVT", .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(FormatError::Version { offset: 4, found: 9, .. })
        ));

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));

        let mut other = ModelConfig::desk();
        other.embed_dim = 32;
        other.cls_projection = crate::model::ClsProjection::LearnedLinear;
        let mut wrong = Model::<f32>::new(other, 1).unwrap();
        let err = restore(wrong.params_mut(), decode_checkpoint(&bytes).unwrap()).unwrap_err();
        match err {
            Error::Format(FormatError::ShapeMismatch { name, .. }) => assert_eq!(name, "patch_embed.weight"),
            e => panic!("unexpected {e}"),
        }

        let mut fewer = ModelConfig::desk();
        fewer.depth = 1;
        let mut small = Model::<f32>::new(fewer, 1).unwrap();
        let err = restore(small.params_mut(), decode_checkpoint(&bytes).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::UnknownTensor(_))));

        let small_bytes = encode_checkpoint(small.params()).unwrap();
        let mut big = Model::<f32>::new(ModelConfig::desk(), 1).unwrap();
        let err = restore(big.params_mut(), decode_checkpoint(&small_bytes).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::MissingTensor(_))));
    }
}
