use crate::error::{Error, Result};

pub const GLYPH_W: usize = 3;
pub const GLYPH_H: usize = 5;
pub const CELL_W: usize = 4;
pub const CELL_H: usize = 6;

const ROWS: [[&str; GLYPH_H]; 16] = [
    [".#.", "#.#", "###", "#.#", "#.#"],
    ["##.", "#.#", "##.", "#.#", "##."],
    [".##", "#..", "#..", "#..", ".##"],
    [".#.", "#.#", "#.#", "#.#", "##."],
    ["###", "#..", "##.", "#..", "###"],
    ["#.#", "#..", "##.", "#..", "#.."],
    ["..#", "#..", "#.#", "#.#", ".##"],
    ["#.#", "..#", "###", "#.#", "#.#"],
    ["###", ".#.", ".#.", ".#.", "###"],
    ["..#", "..#", "..#", "#.#", ".#."],
    ["..#", "#.#", "##.", "#.#", "#.#"],
    ["#..", "#..", "#..", "#..", "###"],
    ["#..", "###", "###", "#.#", "#.#"],
    ["###", "###", "#.#", "#.#", "#.#"],
    ["#.#", "#.#", "#.#", "#.#", "###"],
    [".#.", "#.#", "##.", "#..", "#.."],
];

/// A cell-sized bitmap, row-major `CELL_H × CELL_W`; the last column and row are spacing.
pub type CellBitmap = [bool; CELL_W * CELL_H];

/// 3×5 bitmaps for an ordered 16-glyph alphabet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphFont {
    alphabet: Vec<char>,
    cells: Vec<CellBitmap>,
}

impl Default for GlyphFont {
    fn default() -> Self {
        Self::with_alphabet(crate::encoder::DEFAULT_ALPHABET).expect("16 glyphs")
    }
}

impl GlyphFont {
    /// Assigns the built-in bitmaps to `alphabet` in order.
    pub fn with_alphabet(alphabet: &str) -> Result<Self> {
        let alphabet: Vec<char> = alphabet.chars().collect();
        if alphabet.len() != ROWS.len() {
            return Err(Error::Generation(format!("font needs {} glyphs, got {}", ROWS.len(), alphabet.len())));
        }
        let cells = ROWS
            .iter()
            .map(|rows| {
                let mut cell = [false; CELL_W * CELL_H];
                for (y, row) in rows.iter().enumerate() {
                    for (x, ch) in row.chars().enumerate() {
                        cell[y * CELL_W + x] = ch == '#';
                    }
                }
                cell
            })
            .collect();
        Ok(Self { alphabet, cells })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn len(&self) -> usize {
        self.alphabet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphabet.is_empty()
    }

    pub fn cell(&self, c: char) -> Result<&CellBitmap> {
        self.alphabet
            .iter()
            .position(|&a| a == c)
            .map(|i| &self.cells[i])
            .ok_or(Error::UnknownGlyph(c))
    }

    pub fn cell_at(&self, index: usize) -> &CellBitmap {
        &self.cells[index]
    }

    pub fn glyph_at(&self, index: usize) -> char {
        self.alphabet[index]
    }
}

pub fn hamming(a: &CellBitmap, b: &CellBitmap) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_pairwise_distinct_by_at_least_three() {
        let font = GlyphFont::default();
        let blank = [false; CELL_W * CELL_H];
        for i in 0..font.len() {
            assert!(hamming(font.cell_at(i), &blank) >= 3);
            for j in i + 1..font.len() {
                assert!(hamming(font.cell_at(i), font.cell_at(j)) >= 3, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn spacing_is_blank() {
        let font = GlyphFont::default();
        for i in 0..font.len() {
            let c = font.cell_at(i);
            for y in 0..CELL_H {
                assert!(!c[y * CELL_W + GLYPH_W]);
            }
            for x in 0..CELL_W {
                assert!(!c[GLYPH_H * CELL_W + x]);
            }
        }
    }

    #[test]
    fn unknown_glyph() {
        assert!(matches!(GlyphFont::default().cell('Z'), Err(Error::UnknownGlyph('Z'))));
    }
}
