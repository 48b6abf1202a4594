//! Attention values as files: channel weights as CSV, position confidence
//! and spatial feature channels as grayscale PGM.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::AttentionRecord;
use crate::data::codec::encode_pgm;
use crate::error::{Error, Result};
use crate::fsio;
use crate::labels::LabelMap;

/// `channel,value` header then one line per channel.
pub fn alpha_csv(values: &[f64]) -> String {
    let mut out = String::from("channel,value\n");
    for (c, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{},{}", c, v);
    }
    out
}

/// Maps `[0, 1]` to `0..=255`, rounding half up.
pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn gray(height: usize, width: usize, values: impl Iterator<Item = u8>) -> Result<Vec<u8>> {
    encode_pgm(&LabelMap::single(height, width, values.collect())?)
}

/// Min-max normalizes one plane into bytes; a flat plane maps to 0.
fn normalized_plane(plane: &[f64]) -> impl Iterator<Item = u8> + '_ {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    plane.iter().map(move |&v| {
        if span > 0.0 {
            unit_to_byte((v - lo) / span)
        } else {
            0
        }
    })
}

/// Writes sample `index` of `record` into `dir`: `alpha_low.csv`,
/// `alpha_high.csv`, `beta.pgm`, and `spatial_c{k}.pgm` for each requested
/// channel. Returns the written paths.
pub fn export_attention(
    record: &AttentionRecord,
    index: usize,
    dir: &Path,
    channels: &[usize],
) -> Result<Vec<PathBuf>> {
    if index >= record.batch() {
        return Err(Error::contract(format!(
            "sample {} not in a record of {}",
            index,
            record.batch()
        )));
    }
    fsio::create_dir_all(dir)?;
    let d = record.channels();
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fsio::write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    for (name, alpha) in [
        ("alpha_low.csv", &record.alpha_low),
        ("alpha_high.csv", &record.alpha_high),
    ] {
        put(
            name.to_string(),
            alpha_csv(&alpha.data()[index * d..(index + 1) * d]).as_bytes(),
        )?;
    }
    let [_, _, h, w] = record.beta.dims4("export_attention")?;
    let beta = &record.beta.data()[index * h * w..(index + 1) * h * w];
    put(
        "beta.pgm".to_string(),
        &gray(h, w, beta.iter().map(|&v| unit_to_byte(v)))?,
    )?;
    let [_, sd, sh, sw] = record.spatial.dims4("export_attention")?;
    for &c in channels {
        if c >= sd {
            return Err(Error::contract(format!(
                "spatial channel {} out of {}",
                c, sd
            )));
        }
        let start = (index * sd + c) * sh * sw;
        let plane = &record.spatial.data()[start..start + sh * sw];
        put(
            format!("spatial_c{}.pgm", c),
            &gray(sh, sw, normalized_plane(plane))?,
        )?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::codec::decode_pgm;
    use crate::tensor::Tensor;

    fn record(beta: f64) -> AttentionRecord {
        AttentionRecord {
            alpha_low: Tensor::from_fn([1, 5], |i| i as f64 / 10.0),
            alpha_high: Tensor::full([1, 5], 0.25),
            beta: Tensor::full([1, 1, 2, 3], beta),
            spatial: Tensor::from_fn([1, 5, 2, 3], |i| i as f64),
        }
    }

    #[test]
    fn half_maps_to_128_and_one_to_255() {
        assert_eq!(unit_to_byte(0.5), 128);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(0.0), 0);
        let dir = tempfile::tempdir().unwrap();
        export_attention(&record(0.5), 0, dir.path(), &[]).unwrap();
        let beta = decode_pgm(&std::fs::read(dir.path().join("beta.pgm")).unwrap()).unwrap();
        assert!(beta.data().iter().all(|&v| v == 128));
    }

    #[test]
    fn csv_has_one_line_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention(&record(1.0), 0, dir.path(), &[2]).unwrap();
        assert_eq!(files.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("alpha_low.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 5);
        assert_eq!(text.lines().nth(2), Some("1,0.1"));
        let plane = decode_pgm(&std::fs::read(dir.path().join("spatial_c2.pgm")).unwrap()).unwrap();
        assert_eq!(plane.data().first(), Some(&0));
        assert_eq!(plane.data().last(), Some(&255));
    }

    #[test]
    fn bad_channel_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_attention(&record(1.0), 0, dir.path(), &[9]).is_err());
    }
}
