use super::font::{hamming, CellBitmap, GlyphFont, CELL_H, CELL_W};
use super::render::luminance;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::partition::BoxSpec;

/// Otsu threshold on 8-bit luminance; values strictly above it form the upper class.
pub fn otsu_threshold(values: &[u8]) -> u8 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0u8);
    for t in 0..256 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

fn check_cell_grid(bbox: &BoxSpec, image: &RgbImage) -> Result<()> {
    bbox.check_bounds(0, image.width(), image.height())?;
    if bbox.x % CELL_W != 0 || bbox.y % CELL_H != 0 || bbox.w % CELL_W != 0 || bbox.h != CELL_H {
        return Err(Error::Layout(format!(
            "box ({}, {}, {}, {}) is not on the {CELL_W}x{CELL_H} cell grid",
            bbox.x, bbox.y, bbox.w, bbox.h
        )));
    }
    Ok(())
}

/// Reads the glyph string inside a cell-aligned box.
///
/// The crop is binarized with one Otsu threshold; the class holding most of
/// the spacing pixels is taken as background. Each cell is matched against
/// every glyph and the blank cell by Hamming distance, first match winning.
pub fn decode_glyphs(image: &RgbImage, bbox: &BoxSpec, font: &GlyphFont) -> Result<String> {
    check_cell_grid(bbox, image)?;
    let lum: Vec<u8> = (0..bbox.h)
        .flat_map(|y| (0..bbox.w).map(move |x| (x, y)))
        .map(|(x, y)| luminance(image.get(bbox.x + x, bbox.y + y)).round() as u8)
        .collect();
    let t = otsu_threshold(&lum);
    let upper: Vec<bool> = lum.iter().map(|&v| v > t).collect();
    let spacing = |x: usize, y: usize| x % CELL_W == CELL_W - 1 || y == CELL_H - 1;
    let (mut up, mut down) = (0usize, 0usize);
    for y in 0..bbox.h {
        for x in 0..bbox.w {
            if spacing(x, y) {
                if upper[y * bbox.w + x] {
                    up += 1;
                } else {
                    down += 1;
                }
            }
        }
    }
    let bg_upper = up > down;

    let blank: CellBitmap = [false; CELL_W * CELL_H];
    let mut out = String::new();
    for k in 0..bbox.w / CELL_W {
        let mut cell = blank;
        for y in 0..CELL_H {
            for x in 0..CELL_W {
                cell[y * CELL_W + x] = upper[y * bbox.w + k * CELL_W + x] != bg_upper;
            }
        }
        let mut best = (hamming(&cell, &blank), None);
        for g in 0..font.len() {
            let d = hamming(&cell, font.cell_at(g));
            if d < best.0 {
                best = (d, Some(g));
            }
        }
        if let Some(g) = best.1 {
            out.push(font.glyph_at(g));
        }
    }
    Ok(out)
}
