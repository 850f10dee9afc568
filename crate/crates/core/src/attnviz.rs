//! Head- and query-averaged spatial attention maps exported as PGM and CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Which query rows are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryMode {
    /// Every query token, class token included.
    #[default]
    AllQueries,
    /// Only the class token's row.
    ClsRowOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    /// Row-major `side x side` grid in `[0, 1]`, in patch scan order.
    pub grid: Vec<f64>,
    pub side: usize,
    pub block: usize,
    pub query_mode: QueryMode,
    /// Attention was averaged over all heads.
    pub head_averaged: bool,
}

impl AttnMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.side + col]
    }

    /// One line per grid row, comma separated.
    pub fn to_csv(&self) -> String {
        grid_csv(&self.grid, self.side)
    }

    /// Binary PGM (`P5`, maxval 255), each cell repeated `scale x scale` times.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let scale = scale.max(1);
        let side = self.side * scale;
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            for x in 0..side {
                let v = self.at(y / scale, x / scale);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

fn grid_csv(values: &[f64], cols: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Mean over heads and the selected query rows of `maps: [1, H, T, T]`; returns `T`
/// key weights.
pub fn average_attention<T: Real>(maps: &Tensor<T>, mode: QueryMode) -> Result<Vec<f64>> {
    let &[b, h, t, t2] = maps.dims() else {
        return Err(Error::Rank {
            op: "average_attention",
            expected: "[1, heads, T, T]",
            dims: maps.dims().to_vec(),
        });
    };
    if b != 1 || t != t2 {
        return Err(Error::Rank {
            op: "average_attention",
            expected: "[1, heads, T, T]",
            dims: maps.dims().to_vec(),
        });
    }
    let rows = match mode {
        QueryMode::AllQueries => 0..t,
        QueryMode::ClsRowOnly => 0..1,
    };
    let d = maps.data();
    let mut acc = vec![0.0f64; t];
    for head in 0..h {
        for q in rows.clone() {
            let row = &d[(head * t + q) * t..(head * t + q + 1) * t];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
    }
    let count = (h * rows.len()) as f64;
    Ok(acc.into_iter().map(|v| v / count).collect())
}

/// Min-max normalize to `[0, 1]`; a constant input maps to all 0.5.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn single_image<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = model.config();
    let x = if image.rank() == 3 {
        image.reshape([1, cfg.in_channels, cfg.image_size, cfg.image_size])?
    } else {
        image.clone()
    };
    if x.dims()[0] != 1 {
        return Err(Error::Rank {
            op: "extract_map",
            expected: "a single image",
            dims: x.dims().to_vec(),
        });
    }
    Ok(x)
}

fn check_block<T: Real>(model: &Model<T>, block: usize) -> Result<()> {
    let depth = model.config().depth;
    if block >= depth {
        return Err(Error::Index {
            op: "extract_map",
            index: block,
            extent: depth,
        });
    }
    Ok(())
}

/// Spatial attention map of `block` for one image (`[C, W, W]` or `[1, C, W, W]`):
/// heads and query rows averaged, class column dropped, the `N` patch weights laid
/// out on the patch grid and min-max normalized.
pub fn extract_map<T: Real>(model: &Model<T>, image: &Tensor<T>, block: usize, mode: QueryMode) -> Result<AttnMap> {
    check_block(model, block)?;
    let cfg = model.config();
    if !cfg.variant.has_spatial_attention() {
        return Err(Error::Capability(format!(
            "variant {} has no spatial attention stage",
            cfg.variant
        )));
    }
    let x = single_image(model, image)?;
    let mut tape = Tape::new();
    let fp = model.forward(&mut tape, &x)?;
    let maps = fp.blocks[block].spatial_maps.expect("variant has spatial attention");
    let raw = average_attention(tape.value(maps), mode)?;
    Ok(AttnMap {
        grid: min_max_normalize(&raw[1..]),
        side: cfg.grid_size(),
        block,
        query_mode: mode,
        head_averaged: true,
    })
}

/// Head-averaged channel-stage attention `[T, T]` of `block` (raw, not normalized).
pub fn extract_channel_map<T: Real>(model: &Model<T>, image: &Tensor<T>, block: usize) -> Result<(Vec<f64>, usize)> {
    check_block(model, block)?;
    let cfg = model.config();
    if !cfg.variant.has_channel_attention() {
        return Err(Error::Capability(format!(
            "variant {} has no channel attention stage",
            cfg.variant
        )));
    }
    let x = single_image(model, image)?;
    let mut tape = Tape::new();
    let fp = model.forward(&mut tape, &x)?;
    let maps = tape.value(fp.blocks[block].channel_maps.expect("variant has channel attention"));
    let (h, t) = (maps.dims()[1], maps.dims()[2]);
    let mut acc = vec![0.0f64; t * t];
    for (i, &v) in maps.data().iter().enumerate() {
        acc[i % (t * t)] += v.as_f64() / h as f64;
    }
    Ok((acc, t))
}

pub fn channel_map_csv(values: &[f64], t: usize) -> String {
    grid_csv(values, t)
}

pub fn write_pgm(map: &AttnMap, path: impl AsRef<Path>) -> Result<()> {
    write_pgm_scaled(map, 1, path)
}

/// Nearest-neighbour upscaled PGM; with `scale` equal to the patch size the image
/// matches the input resolution.
pub fn write_pgm_scaled(map: &AttnMap, scale: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map.to_pgm(scale)).map_err(|e| Error::io(path, e))
}

/// Parse a binary PGM header and pixels; returns `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Option<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let body = bytes.get(pos + 1..)?;
    (body.len() == w * h).then_some((w, h, body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn map(grid: Vec<f64>, side: usize) -> AttnMap {
        AttnMap {
            grid,
            side,
            block: 0,
            query_mode: QueryMode::AllQueries,
            head_averaged: true,
        }
    }

    #[test]
    fn pgm_encoding() {
        let m = map(vec![0.0, 1.0, 1.0, 0.0], 2);
        let b = m.to_pgm(1);
        assert_eq!(b, b"P5\n2 2\n255\n\x00\xff\xff\x00".to_vec());
        let (w, h, px) = read_pgm(&b).unwrap();
        assert_eq!((w, h, px), (2, 2, &[0u8, 255, 255, 0][..]));
        let up = m.to_pgm(8);
        let (w, h, px) = read_pgm(&up).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(px[7], 0);
        assert_eq!(px[8], 255);
        assert_eq!(px[16 * 8], 255);
    }

    #[test]
    fn constant_maps_become_half() {
        assert_eq!(min_max_normalize(&[0.2, 0.2, 0.2]), vec![0.5; 3]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn averages_heads_and_rows() {
        // 2 heads, T = 2
        let t = Tensor::from_f64([1, 2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(average_attention::<f64>(&t, QueryMode::AllQueries).unwrap(), vec![0.5, 0.5]);
        assert_eq!(average_attention::<f64>(&t, QueryMode::ClsRowOnly).unwrap(), vec![0.75, 0.25]);
    }

    #[test]
    fn errors() {
        let cfg = ModelConfig::desk();
        let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
        let img = Tensor::zeros([1, 32, 32]).unwrap();
        assert!(matches!(
            extract_map(&m, &img, 2, QueryMode::AllQueries),
            Err(Error::Index { .. })
        ));
        let co = Model::<f32>::new(cfg.with_variant(Variant::ChannelOnly), 0).unwrap();
        assert!(matches!(
            extract_map(&co, &img, 0, QueryMode::AllQueries),
            Err(Error::Capability(_))
        ));
        let map = extract_map(&m, &img, 1, QueryMode::AllQueries).unwrap();
        assert_eq!((map.side, map.grid.len()), (4, 16));
        assert!(map.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        let (ch, t) = extract_channel_map(&m, &img, 0).unwrap();
        assert_eq!(t, 17);
        for row in ch.chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}
