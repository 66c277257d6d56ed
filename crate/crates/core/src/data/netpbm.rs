//! Binary PGM (`P5`) and PPM (`P6`) decoding.
//!
//! Header fields (width, height, maxval) are ASCII decimals separated by
//! whitespace; `#` starts a comment that runs to the end of the line. A
//! single whitespace byte separates maxval from the raster. Samples are one
//! byte when maxval < 256 and two bytes big-endian otherwise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Image {
        offset,
        message: message.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    raster_start: usize,
}

fn read_uint(bytes: &[u8], pos: &mut usize) -> Result<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(err(*pos, "truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(err(start, "expected a decimal header field"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map(|v| (v, start))
        .map_err(|_| err(start, "header field out of range"))
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    match bytes.get(..2) {
        Some(m) if m == magic => {}
        Some(m) if m[0] == b'P' => {
            return Err(err(0, format!("unsupported format {}", String::from_utf8_lossy(m))));
        }
        _ => return Err(err(0, "bad magic")),
    }
    let mut pos = 2;
    let (width, _) = read_uint(bytes, &mut pos)?;
    let (height, _) = read_uint(bytes, &mut pos)?;
    let (maxval, maxval_at) = read_uint(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(err(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(maxval_at, format!("maxval {maxval} outside 1-65535")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(err(pos, "expected whitespace after maxval")),
        None => return Err(err(pos, "truncated header")),
    }
    Ok(Header {
        width,
        height,
        maxval: maxval as u32,
        raster_start: pos,
    })
}

fn read_samples(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<f64>> {
    let count = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| err(2, "image dimensions overflow"))?;
    let wide = h.maxval >= 256;
    let need = count * if wide { 2 } else { 1 };
    let raster = &bytes[h.raster_start..];
    if raster.len() < need {
        return Err(err(
            bytes.len(),
            format!("truncated payload: need {need} raster bytes, have {}", raster.len()),
        ));
    }
    let maxval = h.maxval as f64;
    let samples: Vec<u32> = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as u32).collect()
    };
    if let Some(i) = samples.iter().position(|&s| s > h.maxval) {
        let at = h.raster_start + i * if wide { 2 } else { 1 };
        return Err(err(at, format!("sample {} exceeds maxval {}", samples[i], h.maxval)));
    }
    Ok(samples.into_iter().map(|s| s as f64 / maxval).collect())
}

/// Decodes a binary PGM into an `[H, W]` tensor of `sample / maxval`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P5")?;
    let v = read_samples(bytes, &h, 1)?;
    Tensor::from_f64(&[h.height, h.width], &v)
}

/// Decodes a binary PPM into an `[H, W, 3]` tensor of `sample / maxval`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, b"P6")?;
    let v = read_samples(bytes, &h, 3)?;
    Tensor::from_f64(&[h.height, h.width, 3], &v)
}

/// ITU-R 601 luminance `0.299 R + 0.587 G + 0.114 B` of an `[H, W, 3]`
/// image.
pub fn to_grayscale(rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    match rgb.shape() {
        &[h, w, 3] => {
            let gray: Vec<f64> = rgb
                .data()
                .chunks_exact(3)
                .map(|p| {
                    let y = LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64;
                    y.clamp(0.0, 1.0)
                })
                .collect();
            Tensor::from_f64(&[h, w], &gray)
        }
        s => Err(Error::shape("to_grayscale", format!("expected [H, W, 3], got {s:?}"))),
    }
}

/// Decodes either format to an `[H, W]` grayscale tensor.
pub fn decode_grayscale(bytes: &[u8]) -> Result<Tensor<f32>> {
    match bytes.get(..2) {
        Some(b"P5") => parse_pgm(bytes),
        Some(b"P6") => to_grayscale(&parse_ppm(bytes)?),
        Some(m) if m[0] == b'P' => Err(err(0, format!("unsupported format {}", String::from_utf8_lossy(m)))),
        _ => Err(err(0, "not a PGM/PPM image")),
    }
}

/// Encodes 8-bit samples as binary PGM.
pub fn write_pgm(width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

/// Encodes interleaved 8-bit RGB samples as binary PPM.
pub fn write_ppm(width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut v = header.as_bytes().to_vec();
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn pgm_2x2_values() {
        let img = parse_pgm(&pgm("P5\n2 2\n255\n", &[0, 128, 255, 64])).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
        let expect = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, e) in img.data().iter().zip(expect) {
            assert!((*a as f64 - e).abs() < 1e-7);
        }
        assert!((img.data()[1] - 0.501961).abs() < 1e-6);
        assert!((img.data()[3] - 0.250980).abs() < 1e-6);
    }

    #[test]
    fn comments_are_ignored() {
        let plain = parse_pgm(&pgm("P5\n2 2\n255\n", &[0, 128, 255, 64])).unwrap();
        let commented = parse_pgm(&pgm("P5\n# made by hand\n2 # w\n2\n# max\n255\n", &[0, 128, 255, 64])).unwrap();
        assert_eq!(plain, commented);
    }

    #[test]
    fn sixteen_bit_samples_are_big_endian() {
        let img = parse_pgm(&pgm("P5 1 2 1000\n", &[0x01, 0xf4, 0x03, 0xe8])).unwrap();
        assert_eq!(img.data(), &[0.5, 1.0]);
    }

    #[test]
    fn ppm_magic_rejected_by_pgm() {
        let err = parse_pgm(&pgm("P6\n1 1\n255\n", &[1, 2, 3])).unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
    }

    #[test]
    fn malformed_headers_report_byte_offsets() {
        let err = parse_pgm(b"XY\n1 1\n255\n\0").unwrap_err();
        assert!(matches!(err, Error::Image { offset: 0, .. }));
        let err = parse_pgm(&pgm("P5\n2 2\n255\n", &[1, 2, 3])).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(matches!(err, Error::Image { offset: 14, .. }), "{err}");
        let err = parse_pgm(&pgm("P5\n1 1\n0\n", &[0])).unwrap_err();
        assert!(matches!(err, Error::Image { offset: 7, .. }), "{err}");
        assert!(parse_pgm(&pgm("P5\n1 1\n70000\n", &[0, 0])).is_err());
        assert!(parse_pgm(&pgm("P5\n1 1\n100\n", &[200])).is_err());
        assert!(parse_pgm(b"P5\n1").is_err());
    }

    #[test]
    fn grayscale_weights() {
        let white = parse_ppm(&write_ppm(1, 1, &[255, 255, 255])).unwrap();
        assert_eq!(to_grayscale(&white).unwrap().data(), &[1.0]);
        let red = parse_ppm(&write_ppm(1, 1, &[255, 0, 0])).unwrap();
        assert!((to_grayscale(&red).unwrap().data()[0] - 0.299).abs() < 1e-7);
        let gb = parse_ppm(&write_ppm(2, 1, &[0, 255, 0, 0, 0, 255])).unwrap();
        let g = to_grayscale(&gb).unwrap();
        let mean = (g.data()[0] as f64 + g.data()[1] as f64) / 2.0;
        assert!((mean - 0.3505).abs() < 1e-7);
    }

    #[test]
    fn decode_dispatches_on_magic() {
        let g = decode_grayscale(&write_pgm(1, 1, &[51])).unwrap();
        assert!((g.data()[0] - 0.2).abs() < 1e-7);
        let c = decode_grayscale(&write_ppm(1, 1, &[10, 10, 10])).unwrap();
        assert!((c.data()[0] as f64 - 10.0 / 255.0).abs() < 1e-7);
        assert!(decode_grayscale(b"hello").is_err());
        assert!(decode_grayscale(b"P3\n1 1\n255\n0 0 0").is_err());
    }
}
