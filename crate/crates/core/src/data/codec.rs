//! Binary netpbm: P6 for RGB images, P5 for label maps.
//!
//! Writers emit the canonical header `P6\n{W} {H}\n255\n`. The reader also
//! accepts arbitrary whitespace and `#` comments between header fields, but
//! only a maxval of 255.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Encodes a `3×H×W` image with values in `[0, 255]`, rounded to bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        other => {
            return Err(Error::shape(
                "encode_ppm",
                format!("expected 3×H×W, got {:?}", other),
            ))
        }
    };
    let plane = h * w;
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    out.reserve(plane * 3);
    let data = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(data[c * plane + i])?);
        }
    }
    Ok(out)
}

fn to_byte(v: f64) -> Result<u8> {
    let r = v.round();
    if !(0.0..=255.0).contains(&r) {
        return Err(Error::contract(format!(
            "pixel value {} is outside 0..=255",
            v
        )));
    }
    Ok(r as u8)
}

/// Decodes a P6 file into a `3×H×W` tensor of byte values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, payload) = parse(bytes, b"P6")?;
    let plane = w * h;
    let need = plane * 3;
    let pixels = bytes.get(payload..payload + need).ok_or_else(|| {
        Error::format(
            bytes.len(),
            format!(
                "payload needs {} bytes, found {}",
                need,
                bytes.len() - payload
            ),
        )
    })?;
    let mut data = vec![0.0; need];
    for (i, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(rgb[c]);
        }
    }
    Tensor::new([3, h, w], data)
}

/// Encodes a single label map, one byte per pixel.
pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    if labels.batch() != 1 {
        return Err(Error::shape(
            "encode_pgm",
            format!("expected one map, got {}", labels.batch()),
        ));
    }
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    Ok(out)
}

/// Encodes class indices stored as wider integers, rejecting values above 255.
pub fn encode_pgm_values(height: usize, width: usize, values: &[u32]) -> Result<Vec<u8>> {
    let bytes = values
        .iter()
        .map(|&v| {
            u8::try_from(v)
                .map_err(|_| Error::contract(format!("label {} does not fit in a byte", v)))
        })
        .collect::<Result<Vec<u8>>>()?;
    encode_pgm(&LabelMap::single(height, width, bytes)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, payload) = parse(bytes, b"P5")?;
    let need = w * h;
    let pixels = bytes.get(payload..payload + need).ok_or_else(|| {
        Error::format(
            bytes.len(),
            format!(
                "payload needs {} bytes, found {}",
                need,
                bytes.len() - payload
            ),
        )
    })?;
    LabelMap::single(h, w, pixels.to_vec())
}

/// Returns width, height and the payload offset.
fn parse(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        let start = skip_separators(bytes, pos);
        if start == pos && start < bytes.len() {
            return Err(Error::format(start, "expected whitespace"));
        }
        let end = start
            + bytes[start..]
                .iter()
                .take_while(|b| b.is_ascii_digit())
                .count();
        if end == start {
            return Err(Error::format(start, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..end])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "number out of range"))?;
        pos = end;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::format(
            pos,
            format!("maxval {} unsupported, expected 255", maxval),
        ));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((w, h, pos + 1)),
        _ => Err(Error::format(
            pos,
            "expected a single whitespace byte before the payload",
        )),
    }
}

fn skip_separators(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => pos += 1,
            _ => break,
        }
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let img = Tensor::full([3, 1, 1], 255.0);
        let mut expected = b"P6\n1 1\n255\n".to_vec();
        expected.extend([0xFF; 3]);
        assert_eq!(encode_ppm(&img).unwrap(), expected);
    }

    #[test]
    fn ppm_round_trip() {
        let img = Tensor::from_fn([3, 5, 7], |i| ((i * 37) % 256) as f64);
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn short_payload_reports_offset() {
        let mut bytes = encode_ppm(&Tensor::zeros([3, 2, 2])).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(
            matches!(decode_ppm(&bytes), Err(Error::Format { offset, .. }) if offset == bytes.len())
        );
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 x\n255\n"),
            Err(Error::Format { offset: 5, .. })
        ));
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn comments_in_header() {
        let t = decode_ppm(b"P6 # made by hand\n1 1 255\n\x01\x02\x03").unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn out_of_range_pixel_rejected() {
        assert!(encode_ppm(&Tensor::full([3, 1, 1], 255.6)).is_err());
        assert!(encode_ppm(&Tensor::full([3, 1, 1], -0.6)).is_err());
    }

    #[test]
    fn zero_labels() {
        let labels = LabelMap::filled(1, 2, 2, 0);
        let mut expected = b"P5\n2 2\n255\n".to_vec();
        expected.extend([0; 4]);
        assert_eq!(encode_pgm(&labels).unwrap(), expected);
    }

    #[test]
    fn pgm_round_trip_keeps_ignore() {
        let labels = LabelMap::single(2, 3, vec![0, 1, 2, 255, 3, 0]).unwrap();
        let back = decode_pgm(&encode_pgm(&labels).unwrap()).unwrap();
        assert_eq!(back, labels);
        assert_eq!(back.get(0, 1, 0), crate::labels::IGNORE_LABEL);
    }

    #[test]
    fn wide_label_rejected() {
        assert!(encode_pgm_values(1, 2, &[3, 256]).is_err());
        assert!(encode_pgm_values(1, 2, &[3, 255]).is_ok());
    }
}
