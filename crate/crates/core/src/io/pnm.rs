//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format("truncated image header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated image header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header number at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("maxval {} unsupported, expected 255", fields[2])));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        offset: pos + 1,
    })
}

fn body(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<u8>> {
    let n = h.width * h.height * channels;
    let data = &bytes[h.offset..];
    if data.len() < n {
        return Err(Error::Format(format!("expected {n} pixel bytes, found {}", data.len())));
    }
    Ok(data[..n].to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    RgbImage::new(h.width, h.height, body(bytes, &h, 3)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    GrayImage::new(h.width, h.height, body(bytes, &h, 1)?)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_all(path)?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_all(path)?)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_ppm(img))?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_pgm(img))?;
    Ok(())
}
