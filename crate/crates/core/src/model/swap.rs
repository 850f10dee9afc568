//! Class-token-preserving dimension swap between token layout `[B, N+1, C]` and
//! channel layout `[B, C+1, N]`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Mapping applied to the class token when crossing between widths `C` and `N`.
#[derive(Debug, Clone, Copy)]
pub enum ClsMap {
    /// Reuse the vector unchanged; only valid when `C == N`.
    Identity,
    /// `cls · weight + bias`.
    Linear { weight: Var, bias: Var },
}

fn map_cls<T: Real>(tape: &mut Tape<T>, cls: Var, map: &ClsMap, width: usize, op: &'static str) -> Result<Var> {
    match map {
        ClsMap::Identity => {
            let have = tape.dims(cls)[2];
            if have != width {
                return Err(Error::config(format!(
                    "{op}: identity class-token mapping needs C == N, got widths {have} and {width}"
                )));
            }
            Ok(cls)
        }
        ClsMap::Linear { weight, bias } => {
            let y = tape.matmul(cls, *weight)?;
            tape.add(y, *bias)
        }
    }
}

fn check_rank3<T: Real>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 3]> {
    match *tape.dims(x) {
        [b, t, d] if t >= 2 => Ok([b, t, d]),
        _ => Err(Error::Rank {
            op,
            expected: "rank 3 with a class row and at least one other row",
            dims: tape.dims(x).to_vec(),
        }),
    }
}

/// `[B, N+1, C] -> [B, C+1, N]`: spatial rows transposed, class row mapped to width `N`
/// and kept first.
pub fn swap_in<T: Real>(tape: &mut Tape<T>, x: Var, cls_map: &ClsMap) -> Result<Var> {
    let [_, t, _] = check_rank3(tape, x, "swap_in")?;
    let (cls, spatial) = tape.split_axis1(x, 1)?;
    let channels = tape.transpose_last2(spatial)?;
    let cls = map_cls(tape, cls, cls_map, t - 1, "swap_in")?;
    tape.concat_axis1(cls, channels)
}

/// `[B, C+1, N] -> [B, N+1, C]`; inverse layout of [`swap_in`].
pub fn swap_out<T: Real>(tape: &mut Tape<T>, y: Var, cls_map: &ClsMap) -> Result<Var> {
    let [_, t, _] = check_rank3(tape, y, "swap_out")?;
    let (cls, channels) = tape.split_axis1(y, 1)?;
    let spatial = tape.transpose_last2(channels)?;
    let cls = map_cls(tape, cls, cls_map, t - 1, "swap_out")?;
    tape.concat_axis1(cls, spatial)
}
