use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::font::{GlyphFont, CELL_H, CELL_W};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::partition::{patchify_box, BoxSpec};

const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub max_boxes: usize,
    pub max_str_len: usize,
    /// Chance that a sample may contain boxes sharing latent tokens.
    pub p_overlap: f64,
    /// Patch size used to decide token-level overlap.
    pub patch: usize,
    pub alphabet: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            max_boxes: 4,
            max_str_len: 6,
            p_overlap: 0.1,
            patch: 4,
            alphabet: crate::encoder::DEFAULT_ALPHABET.into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.width % CELL_W != 0 || self.height % CELL_H != 0 || self.width == 0 || self.height == 0 {
            return bad(format!("{}x{} is not a whole number of {CELL_W}x{CELL_H} cells", self.width, self.height));
        }
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 {
            return bad(format!("patch {} does not tile {}x{}", self.patch, self.width, self.height));
        }
        if self.max_boxes == 0 {
            return bad("max_boxes must be at least 1".into());
        }
        if self.max_str_len == 0 || self.max_str_len > self.cols() {
            return bad(format!("max_str_len {} does not fit {} cells", self.max_str_len, self.cols()));
        }
        if !(0.0..=1.0).contains(&self.p_overlap) {
            return bad(format!("p_overlap {} outside [0, 1]", self.p_overlap));
        }
        GlyphFont::with_alphabet(&self.alphabet)?;
        Ok(())
    }

    pub fn cols(&self) -> usize {
        self.width / CELL_W
    }

    pub fn rows(&self) -> usize {
        self.height / CELL_H
    }
}

/// A paired (reference, target) image with its edit boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub seed: u64,
    pub reference: RgbImage,
    pub target: RgbImage,
    pub boxes: Vec<BoxSpec>,
}

pub fn luminance(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

/// Fills `bbox` with `fill` and draws `text` left-aligned in `ink`.
pub fn draw_label(img: &mut RgbImage, bbox: &BoxSpec, text: &str, fill: [u8; 3], ink: [u8; 3], font: &GlyphFont) -> Result<()> {
    bbox.check_bounds(0, img.width(), img.height())?;
    if text.chars().count() * CELL_W > bbox.w || bbox.h < CELL_H {
        return Err(Error::Generation(format!("\"{text}\" does not fit a {}x{} box", bbox.w, bbox.h)));
    }
    img.fill_rect(bbox.x, bbox.y, bbox.w, bbox.h, fill);
    for (k, c) in text.chars().enumerate() {
        let cell = font.cell(c)?;
        for y in 0..CELL_H {
            for x in 0..CELL_W {
                if cell[y * CELL_W + x] {
                    img.put(bbox.x + k * CELL_W + x, bbox.y + y, ink);
                }
            }
        }
    }
    Ok(())
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn background(cfg: &SynthConfig, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = RgbImage::filled(w, h, random_color(rng));
    for _ in 0..rng.random_range(2..=5) {
        let color = random_color(rng);
        if rng.random_bool(0.5) {
            let x = rng.random_range(0..w);
            let y = rng.random_range(0..h);
            let rw = rng.random_range(1..=w - x);
            let rh = rng.random_range(1..=h - y);
            img.fill_rect(x, y, rw, rh, color);
        } else {
            let cx = rng.random_range(0..w) as f64;
            let cy = rng.random_range(0..h) as f64;
            let r = rng.random_range(3.0..(w.min(h) as f64 / 2.0));
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        img.put(x, y, color);
                    }
                }
            }
        }
    }
    img
}

fn random_string(alphabet: &[char], max_len: usize, rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

/// Label colors with enough luminance contrast for the decoder.
fn label_colors(rng: &mut impl Rng) -> ([u8; 3], [u8; 3]) {
    let fill = random_color(rng);
    let ink = if luminance(fill) > 127.5 {
        [rng.random_range(0..=60), rng.random_range(0..=60), rng.random_range(0..=60)]
    } else {
        [rng.random_range(195..=255), rng.random_range(195..=255), rng.random_range(195..=255)]
    };
    (fill, ink)
}

fn pixels_overlap(a: &BoxSpec, b: &BoxSpec) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

/// Renders one seeded sample.
pub fn render_sample(seed: u64, cfg: &SynthConfig) -> Result<EditSample> {
    cfg.validate()?;
    let font = GlyphFont::with_alphabet(&cfg.alphabet)?;
    let alphabet = font.alphabet().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(cfg, &mut rng);
    let allow_token_overlap = rng.random_bool(cfg.p_overlap);
    let n = rng.random_range(1..=cfg.max_boxes);
    let (grid_h, grid_w) = (cfg.height / cfg.patch, cfg.width / cfg.patch);

    let mut boxes: Vec<BoxSpec> = Vec::with_capacity(n);
    let mut tokens: Vec<Vec<usize>> = Vec::with_capacity(n);
    for index in 0..n {
        let src = random_string(&alphabet, cfg.max_str_len, &mut rng);
        let mut tgt = random_string(&alphabet, cfg.max_str_len, &mut rng);
        while tgt == src {
            tgt = random_string(&alphabet, cfg.max_str_len, &mut rng);
        }
        let cells = src.len().max(tgt.len());
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let col = rng.random_range(0..=cfg.cols() - cells);
            let row = rng.random_range(0..cfg.rows());
            let b = BoxSpec::new(col * CELL_W, row * CELL_H, cells * CELL_W, CELL_H).with_text(&src, &tgt);
            if boxes.iter().any(|o| pixels_overlap(o, &b)) {
                continue;
            }
            let toks = patchify_box(&b, cfg.patch, grid_h, grid_w)?;
            if !allow_token_overlap && tokens.iter().any(|t| t.iter().any(|p| toks.contains(p))) {
                continue;
            }
            placed = Some((b, toks));
            break;
        }
        let Some((b, toks)) = placed else {
            return Err(Error::Generation(format!("could not place box {index} after {PLACEMENT_TRIES} tries")));
        };
        boxes.push(b);
        tokens.push(toks);
    }
    // Raster order gives prompt order a spatial meaning.
    boxes.sort_by_key(|b| (b.y, b.x));

    let mut reference = bg.clone();
    let mut target = bg;
    for b in &boxes {
        let (fill, ink) = label_colors(&mut rng);
        draw_label(&mut reference, b, &b.src, fill, ink, &font)?;
        draw_label(&mut target, b, &b.tgt, fill, ink, &font)?;
    }
    Ok(EditSample {
        seed,
        reference,
        target,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig::default();
        assert_eq!(render_sample(7, &cfg).unwrap(), render_sample(7, &cfg).unwrap());
        assert_ne!(render_sample(7, &cfg).unwrap(), render_sample(8, &cfg).unwrap());
    }

    #[test]
    fn differences_stay_inside_boxes() {
        let cfg = SynthConfig::default();
        for seed in 0..50 {
            let s = render_sample(seed, &cfg).unwrap();
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    if s.reference.get(x, y) != s.target.get(x, y) {
                        assert!(s.boxes.iter().any(|b| b.contains(x, y)), "seed {seed} pixel ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn boxes_respect_constraints() {
        let cfg = SynthConfig::default();
        for seed in 0..200 {
            let s = render_sample(seed, &cfg).unwrap();
            assert!((1..=cfg.max_boxes).contains(&s.boxes.len()));
            for (i, b) in s.boxes.iter().enumerate() {
                assert_ne!(b.src, b.tgt);
                assert!((1..=6).contains(&b.src.len()) && (1..=6).contains(&b.tgt.len()));
                assert_eq!((b.x % CELL_W, b.y % CELL_H, b.h), (0, 0, CELL_H));
                b.check_bounds(i, cfg.width, cfg.height).unwrap();
                for o in &s.boxes[i + 1..] {
                    assert!(!pixels_overlap(b, o));
                    assert!((b.y, b.x) < (o.y, o.x), "raster order");
                }
            }
        }
    }

    #[test]
    fn single_box_limit() {
        let cfg = SynthConfig {
            max_boxes: 1,
            ..SynthConfig::default()
        };
        for seed in 0..20 {
            assert_eq!(render_sample(seed, &cfg).unwrap().boxes.len(), 1);
        }
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = SynthConfig {
            width: 50,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
