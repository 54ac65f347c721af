//! Binary PPM (`P6`) images and PGM (`P5`) masks, maxval 255.

use std::path::Path;

use super::LabelMask;
use crate::tensor::Tensor;
use crate::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes a `3×H×W` image, quantized to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Config(format!("PPM needs a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..hw {
        for ch in 0..3 {
            out.push(quantize(d[ch * hw + p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], name: &str) -> Result<Header> {
    let err = |offset: usize, msg: &str| Error::Format { path: name.to_string(), offset, msg: msg.to_string() };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(0, &format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| err(start, "number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected a single whitespace byte after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, &format!("maxval {maxval} unsupported, need 255")));
    }
    Ok(Header { width, height, payload: pos })
}

pub fn decode_ppm(bytes: &[u8], name: &str) -> Result<Tensor> {
    let h = parse_header(bytes, b"P6", name)?;
    let hw = h.width * h.height;
    let need = h.payload + 3 * hw;
    if bytes.len() < need {
        return Err(Error::Format { path: name.into(), offset: bytes.len(), msg: format!("truncated payload, expected {need} bytes") });
    }
    let px = &bytes[h.payload..need];
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = px[3 * p + ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h.height, h.width], data)?)
}

pub fn decode_pgm(bytes: &[u8], name: &str) -> Result<LabelMask> {
    let h = parse_header(bytes, b"P5", name)?;
    let need = h.payload + h.width * h.height;
    if bytes.len() < need {
        return Err(Error::Format { path: name.into(), offset: bytes.len(), msg: format!("truncated payload, expected {need} bytes") });
    }
    Ok(LabelMask::new(h.height, h.width, bytes[h.payload..need].to_vec()).expect("sized above"))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel_bytes() {
        let img = Tensor::full(vec![3, 1, 1], 1.0);
        let mut expected = b"P6\n1 1\n255\n".to_vec();
        expected.extend([0xFF, 0xFF, 0xFF]);
        assert_eq!(encode_ppm(&img).unwrap(), expected);
    }

    #[test]
    fn rejects_other_maxval() {
        let bytes = b"P5\n1 1\n15\n\x03";
        assert!(matches!(decode_pgm(bytes, "m"), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = b"P6\n2 1\n255\n\x01\x02\x03";
        match decode_ppm(bytes, "x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x08";
        let m = decode_pgm(bytes, "m").unwrap();
        assert_eq!(m.labels(), &[7, 8]);
    }

    proptest! {
        #[test]
        fn mask_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let labels: Vec<u8> = (0..h * w).map(|i| (seed.rotate_left(i as u32) % 256) as u8).collect();
            let m = LabelMask::new(h, w, labels).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&m), "m").unwrap(), m);
        }

        #[test]
        fn quantized_image_round_trip(h in 1usize..6, w in 1usize..6, vals in proptest::collection::vec(0u8..=255, 75)) {
            let data: Vec<f64> = (0..3 * h * w).map(|i| vals[i % vals.len()] as f64 / 255.0).collect();
            let img = Tensor::new(vec![3, h, w], data).unwrap();
            let back = decode_ppm(&encode_ppm(&img).unwrap(), "x").unwrap();
            prop_assert_eq!(back.data(), img.data());
        }
    }
}
