//! Dense real-valued grids, binary masks, resampling and the seeded RNG.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Deterministic random stream. Every stochastic operation takes one
/// explicitly; there is no global generator.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream for `(seed, stream)`, e.g. one per corpus item.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    /// Splits off a child stream, advancing `self`.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An `height x width x channels` grid stored row-major as `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x{channels} field",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    /// I.i.d. standard normal entries.
    pub fn gaussian(rng: &mut Rng, height: usize, width: usize, channels: usize) -> Result<Self> {
        check_dims(height, width, channels)?;
        let data = (0..height * width * channels).map(|_| rng.normal()).collect();
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Field) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Field {
        Field {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped fields.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.same_shape(other)?;
        Ok(Field {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp01(&self) -> Field {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Channel `c` as a single-channel field.
    pub fn channel(&self, c: usize) -> Field {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Field {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Reorders channels: output channel `i` is input channel `order[i]`.
    pub fn permute_channels(&self, order: &[usize]) -> Result<Field> {
        if order.len() != self.channels || order.iter().any(|&c| c >= self.channels) {
            return Err(Error::Dimension(format!("bad channel order {order:?}")));
        }
        let mut out = self.clone();
        for px in 0..self.height * self.width {
            for (i, &src) in order.iter().enumerate() {
                out.data[px * self.channels + i] = self.data[px * self.channels + src];
            }
        }
        Ok(out)
    }
}

fn check_dims(h: usize, w: usize, c: usize) -> Result<()> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Dimension(format!("zero-sized field {h}x{w}x{c}")));
    }
    Ok(())
}

/// Binary mask: `true` marks a known pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskField {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskField {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(height, width, 1)?;
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, known: bool) -> Result<Self> {
        Self::new(height, width, vec![known; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn known(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, known: bool) {
        self.bits[y * self.width + x] = known;
    }

    pub fn known_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn known_fraction(&self) -> f64 {
        self.known_count() as f64 / self.bits.len() as f64
    }

    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.known_fraction()
    }

    pub fn matches(&self, f: &Field) -> Result<()> {
        if self.height != f.height() || self.width != f.width() {
            return Err(Error::ShapeMismatch {
                expected: (self.height, self.width, f.channels()),
                actual: f.shape(),
            });
        }
        Ok(())
    }

    /// Coarse mask where a pixel is known iff every covered fine pixel is known.
    pub fn downsample(&self, factor: usize) -> Result<MaskField> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "factor {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        MaskField::from_fn(h, w, |cy, cx| {
            (0..factor).all(|dy| (0..factor).all(|dx| self.known(cy * factor + dy, cx * factor + dx)))
        })
    }
}

/// Field of i.i.d. standard normal draws.
pub fn gaussian_field(rng: &mut Rng, h: usize, w: usize, c: usize) -> Result<Field> {
    Field::gaussian(rng, h, w, c)
}

/// `M * known + (1 - M) * unknown` with the mask broadcast over channels.
pub fn composite(known: &Field, unknown: &Field, mask: &MaskField) -> Result<Field> {
    known.same_shape(unknown)?;
    mask.matches(known)?;
    let c = known.channels();
    let data = known
        .data()
        .iter()
        .zip(unknown.data())
        .enumerate()
        .map(|(i, (&k, &u))| if mask.bits[i / c] { k } else { u })
        .collect();
    Field::new(known.height(), known.width(), c, data)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn bilinear_resize(x: &Field, out_h: usize, out_w: usize) -> Result<Field> {
    check_dims(out_h, out_w, 1)?;
    if (out_h, out_w) == (x.height(), x.width()) {
        return Ok(x.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(x.height(), out_h);
    let xs = taps(x.width(), out_w);
    let c = x.channels();
    let mut out = Field::zeros(out_h, out_w, c)?;
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let a = x.get(y0, x0, ch);
                let b = x.get(y0, x1, ch);
                let top = a + fx * (b - a);
                let a = x.get(y1, x0, ch);
                let b = x.get(y1, x1, ch);
                let bottom = a + fx * (b - a);
                out.set(oy, ox, ch, top + fy * (bottom - top));
            }
        }
    }
    Ok(out)
}
