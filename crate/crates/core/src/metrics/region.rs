use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::partition::BoxSpec;

pub const ATTEMPT_THRESHOLD: f64 = 10.0;

const SSIM_WIN: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_L: f64 = 255.0;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "images are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Row-major flags, true outside every box.
pub fn background_mask(width: usize, height: usize, boxes: &[BoxSpec]) -> Vec<bool> {
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| !boxes.iter().any(|b| b.contains(x, y)))
        .collect()
}

/// Mean absolute and squared error over channels of pixels outside the boxes.
pub fn region_mae_mse(reference: &RgbImage, edited: &RgbImage, boxes: &[BoxSpec]) -> Result<(f64, f64)> {
    same_dims(reference, edited)?;
    let mask = background_mask(reference.width(), reference.height(), boxes);
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (p, &bg) in mask.iter().enumerate() {
        if !bg {
            continue;
        }
        for c in 0..3 {
            let d = reference.data()[3 * p + c] as f64 - edited.data()[3 * p + c] as f64;
            abs += d.abs();
            sq += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedScore("boxes cover the whole image".into()));
    }
    Ok((abs / n as f64, sq / n as f64))
}

/// Mean absolute difference inside one box.
pub fn crop_mae(reference: &RgbImage, edited: &RgbImage, bbox: &BoxSpec) -> Result<f64> {
    same_dims(reference, edited)?;
    bbox.check_bounds(0, reference.width(), reference.height())?;
    let mut abs = 0.0;
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            let (a, b) = (reference.get(x, y), edited.get(x, y));
            abs += (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum::<f64>();
        }
    }
    Ok(abs / (3 * bbox.w * bbox.h) as f64)
}

/// Percentage of boxes whose crop MAE is strictly above `threshold`.
pub fn attempt_rate(reference: &RgbImage, edited: &RgbImage, boxes: &[BoxSpec], threshold: f64) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::UndefinedScore("attempt rate of zero boxes".into()));
    }
    let mut attempted = 0usize;
    for b in boxes {
        if crop_mae(reference, edited, b)? > threshold {
            attempted += 1;
        }
    }
    Ok(100.0 * attempted as f64 / boxes.len() as f64)
}

fn gaussian_window() -> [f64; SSIM_WIN * SSIM_WIN] {
    let r = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut w = [0.0; SSIM_WIN * SSIM_WIN];
    for y in 0..SSIM_WIN {
        for x in 0..SSIM_WIN {
            w[y * SSIM_WIN + x] = g[y] * g[x] / total;
        }
    }
    w
}

/// Mean SSIM over every 7×7 window lying entirely in `background`
/// (row-major, one flag per pixel), averaged over channels.
pub fn ssim_region(reference: &RgbImage, edited: &RgbImage, background: &[bool]) -> Result<f64> {
    same_dims(reference, edited)?;
    let (w, h) = (reference.width(), reference.height());
    if background.len() != w * h {
        return Err(Error::Shape(format!("mask has {} flags for {} pixels", background.len(), w * h)));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let (mut total, mut count) = (0.0, 0usize);
    for y0 in 0..(h + 1).saturating_sub(SSIM_WIN) {
        for x0 in 0..(w + 1).saturating_sub(SSIM_WIN) {
            let inside = (0..SSIM_WIN).all(|dy| (0..SSIM_WIN).all(|dx| background[(y0 + dy) * w + x0 + dx]));
            if !inside {
                continue;
            }
            for c in 0..3 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WIN {
                    for dx in 0..SSIM_WIN {
                        let g = win[dy * SSIM_WIN + dx];
                        let a = reference.get(x0 + dx, y0 + dy)[c] as f64;
                        let b = edited.get(x0 + dx, y0 + dy)[c] as f64;
                        mx += g * a;
                        my += g * b;
                        sxx += g * a * a;
                        syy += g * b * b;
                        sxy += g * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedScore("no 7x7 window fits in the background".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(24, 24, (0..24 * 24 * 3).map(|_| rng.random()).collect()).unwrap()
    }

    fn map(img: &RgbImage, f: impl Fn(u8) -> u8) -> RgbImage {
        RgbImage::new(img.width(), img.height(), img.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    #[test]
    fn mae_mse_examples() {
        let a = map(&noisy(1), |v| v.min(250));
        let boxes = [BoxSpec::new(4, 6, 8, 6)];
        assert_eq!(region_mae_mse(&a, &a, &boxes).unwrap(), (0.0, 0.0));
        let mut inside = a.clone();
        inside.fill_rect(4, 6, 8, 6, [0, 255, 0]);
        assert_eq!(region_mae_mse(&a, &inside, &boxes).unwrap(), (0.0, 0.0));
        let plus = map(&a, |v| v + 1);
        assert_eq!(region_mae_mse(&a, &plus, &boxes).unwrap(), (1.0, 1.0));
        assert!(region_mae_mse(&a, &a, &[BoxSpec::new(0, 0, 24, 24)]).is_err());
    }

    #[test]
    fn attempt_rate_examples() {
        let a = noisy(2);
        let boxes = [
            BoxSpec::new(0, 0, 4, 6),
            BoxSpec::new(8, 0, 4, 6),
            BoxSpec::new(0, 12, 8, 6),
            BoxSpec::new(12, 12, 8, 6),
        ];
        assert_eq!(attempt_rate(&a, &a, &boxes, ATTEMPT_THRESHOLD).unwrap(), 0.0);
        let mut inv = a.clone();
        for y in 0..6 {
            for x in 0..4 {
                let p = a.get(x, y);
                inv.put(x, y, [255 - p[0], 255 - p[1], 255 - p[2]]);
            }
        }
        assert_eq!(attempt_rate(&a, &inv, &boxes, ATTEMPT_THRESHOLD).unwrap(), 25.0);
    }

    #[test]
    fn attempt_threshold_is_strict() {
        let a = map(&noisy(3), |v| v.min(200));
        let b = BoxSpec::new(4, 4, 8, 6);
        let mut shifted = a.clone();
        for y in 4..10 {
            for x in 4..12 {
                let p = a.get(x, y);
                shifted.put(x, y, [p[0] + 10, p[1] + 10, p[2] + 10]);
            }
        }
        assert_eq!(crop_mae(&a, &shifted, &b).unwrap(), 10.0);
        assert_eq!(attempt_rate(&a, &shifted, &[b.clone()], ATTEMPT_THRESHOLD).unwrap(), 0.0);
        let mut more = shifted.clone();
        more.put(4, 4, [a.get(4, 4)[0] + 11, a.get(4, 4)[1] + 10, a.get(4, 4)[2] + 10]);
        assert_eq!(attempt_rate(&a, &more, &[b], ATTEMPT_THRESHOLD).unwrap(), 100.0);
    }

    #[test]
    fn attempt_rate_is_monotone_in_magnitude() {
        let a = map(&noisy(4), |v| v / 2);
        let boxes = [BoxSpec::new(0, 0, 8, 6), BoxSpec::new(12, 6, 8, 6), BoxSpec::new(4, 18, 12, 6)];
        let mut last = 0.0;
        for m in 0..=127u8 {
            let mut e = a.clone();
            for (i, b) in boxes.iter().enumerate() {
                let k = m / (i as u8 + 1);
                for y in b.y..b.y + b.h {
                    for x in b.x..b.x + b.w {
                        let p = a.get(x, y);
                        e.put(x, y, [p[0] + k, p[1] + k, p[2] + k]);
                    }
                }
            }
            let ar = attempt_rate(&a, &e, &boxes, ATTEMPT_THRESHOLD).unwrap();
            assert!(ar >= last);
            last = ar;
        }
        assert_eq!(last, 100.0);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = noisy(5);
        let all = vec![true; 24 * 24];
        assert_eq!(ssim_region(&a, &a, &all).unwrap(), 1.0);
        assert!(ssim_region(&a, &map(&a, |v| 255 - v), &all).unwrap() < 1.0);
    }

    #[test]
    fn ssim_of_constant_patches() {
        let (p, q) = (100.0f64, 130.0f64);
        let a = RgbImage::filled(16, 16, [100; 3]);
        let b = RgbImage::filled(16, 16, [130; 3]);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expected = (2.0 * p * q + c1) / (p * p + q * q + c1);
        let got = ssim_region(&a, &b, &vec![true; 256]).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn ssim_ignores_boxes_and_needs_a_window() {
        let a = noisy(6);
        let mut e = a.clone();
        e.fill_rect(0, 0, 24, 8, [0, 0, 0]);
        let mask = background_mask(24, 24, &[BoxSpec::new(0, 0, 24, 8)]);
        assert_eq!(ssim_region(&a, &e, &mask).unwrap(), 1.0);
        let narrow = background_mask(24, 24, &[BoxSpec::new(0, 0, 24, 18)]);
        assert!(matches!(ssim_region(&a, &a, &narrow), Err(Error::UndefinedScore(_))));
    }

    #[test]
    fn window_is_normalised() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w[24] > w[0]);
    }
}
