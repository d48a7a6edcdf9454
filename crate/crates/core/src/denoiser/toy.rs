//! Procedural toy images: random ellipses and rectangles on linear
//! gradient backgrounds. Item `i` of a dataset depends only on `(seed, i)`.

use crate::error::Result;
use crate::field::{Field, Rng};

pub fn toy_image(seed: u64, index: u64, h: usize, w: usize, c: usize) -> Result<Field> {
    let mut rng = Rng::derive(seed, index);
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let lo: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.0, 1.0)).collect();
    let hi: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.0, 1.0)).collect();
    let mut img = Field::zeros(h, w, c)?;
    let (hf, wf) = (h as f64, w as f64);
    for y in 0..h {
        for x in 0..w {
            // projection onto the gradient direction, mapped to [0, 1]
            let u = ((y as f64 + 0.5) / hf - 0.5) * dy + ((x as f64 + 0.5) / wf - 0.5) * dx;
            let s = (u / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            for ch in 0..c {
                img.set(y, x, ch, lo[ch] + s * (hi[ch] - lo[ch]));
            }
        }
    }
    for _ in 0..rng.int_inclusive(1, 3) {
        let ellipse = rng.uniform() < 0.5;
        let cy = rng.uniform_range(0.15, 0.85) * hf;
        let cx = rng.uniform_range(0.15, 0.85) * wf;
        let ry = rng.uniform_range(0.08, 0.3) * hf;
        let rx = rng.uniform_range(0.08, 0.3) * wf;
        let value: Vec<f64> = (0..c).map(|_| rng.uniform()).collect();
        for y in 0..h {
            for x in 0..w {
                let ny = (y as f64 + 0.5 - cy) / ry;
                let nx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    ny * ny + nx * nx <= 1.0
                } else {
                    ny.abs() <= 1.0 && nx.abs() <= 1.0
                };
                if inside {
                    for (ch, &v) in value.iter().enumerate() {
                        img.set(y, x, ch, v);
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn toy_dataset(seed: u64, count: usize, h: usize, w: usize, c: usize) -> Result<Vec<Field>> {
    (0..count as u64).map(|i| toy_image(seed, i, h, w, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_reproducible_and_in_range() {
        let a = toy_dataset(3, 8, 32, 32, 1).unwrap();
        let b = toy_dataset(3, 8, 32, 32, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for img in &a {
            assert!(img.min() >= 0.0 && img.max() <= 1.0);
            assert!(img.variance() > 0.0);
        }
        assert_eq!(toy_image(3, 5, 32, 32, 1).unwrap(), a[5]);
        assert_eq!(toy_image(1, 0, 16, 24, 3).unwrap().shape(), (16, 24, 3));
    }
}
