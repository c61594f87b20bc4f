//! Binary PGM (P5) encoding and decoding.
//!
//! Writers always emit `maxval = 255`. The reader accepts any maxval in
//! `1..=65535` (two-byte big-endian samples above 255) and header comments.

use std::fs;
use std::path::Path;

use crate::{DataError, GrayImage, Result, SegmentationMask};

pub fn encode(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(
        image
            .as_slice()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn encode_mask(mask: &SegmentationMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.as_slice().iter().map(|&v| if v == 1 { 255 } else { 0 }));
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    payload: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(DataError::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return self.err(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().or_else(|_| {
            self.pos = start;
            self.err(format!("{what} out of range"))
        })
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return cur.err("missing P5 magic");
    }
    cur.pos = 2;
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if !(1..=65535).contains(&maxval) {
        return cur.err(format!("maxval {maxval} outside 1..=65535"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.err("expected single whitespace after maxval"),
    }
    Ok(Header {
        width,
        height,
        maxval,
        payload: cur.pos,
    })
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes)?;
    let sample_bytes = if h.maxval > 255 { 2 } else { 1 };
    let need = h.width * h.height * sample_bytes;
    let payload = &bytes[h.payload..];
    if payload.len() < need {
        return Err(DataError::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    let max = h.maxval as f32;
    let data = if sample_bytes == 1 {
        payload[..need].iter().map(|&b| (f32::from(b) / max).min(1.0)).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|c| (f32::from(u16::from_be_bytes([c[0], c[1]])) / max).min(1.0))
            .collect()
    };
    Ok(GrayImage::new(h.height, h.width, data))
}

/// Decodes a mask; any sample at or above half of maxval is positive.
pub fn decode_mask(bytes: &[u8]) -> Result<SegmentationMask> {
    let img = decode(bytes)?;
    let data = img.as_slice().iter().map(|&v| u8::from(v >= 0.5)).collect();
    Ok(SegmentationMask::new(img.height(), img.width(), data).expect("binary by construction"))
}

pub fn save(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, encode(image)).map_err(|e| DataError::io(path, e))
}

pub fn save_mask(path: &Path, mask: &SegmentationMask) -> Result<()> {
    fs::write(path, encode_mask(mask)).map_err(|e| DataError::io(path, e))
}

pub fn load(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_mask(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_fixture() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = decode(bytes).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_eq!(img.as_slice(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn header_comments_and_sixteen_bit_samples() {
        let mut bytes = b"P5 # comment\n1 # w\n 2\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn exact_header_layout() {
        let img = GrayImage::new(1, 3, vec![0.0, 0.5, 1.0]);
        assert_eq!(encode(&img), b"P5\n3 1\n255\n\x00\x80\xff");
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        match decode(b"P2\n1 1\n255\n0") {
            Err(DataError::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_dimension_reports_its_offset() {
        match decode(b"P5\n4 x\n255\n") {
            Err(DataError::Parse { offset, msg }) => {
                assert_eq!(offset, 5);
                assert!(msg.contains("height"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        match decode(b"P5\n2 2\n255\n\x00\x01\x02") {
            Err(DataError::Parse { offset, msg }) => {
                assert_eq!(offset, 14);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let mask = SegmentationMask::from_fn(3, 5, |r, c| (r + c) % 3 == 0);
        assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
    }
}
