//! The six evaluation mask families.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{MaskField, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Wide,
    Narrow,
    Half,
    Expand,
    #[serde(rename = "altlines")]
    AltLines,
    #[serde(rename = "sr2x")]
    SuperRes2x,
}

impl MaskKind {
    pub const ALL: [MaskKind; 6] = [
        MaskKind::Wide,
        MaskKind::Narrow,
        MaskKind::Half,
        MaskKind::Expand,
        MaskKind::AltLines,
        MaskKind::SuperRes2x,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Wide => "wide",
            MaskKind::Narrow => "narrow",
            MaskKind::Half => "half",
            MaskKind::Expand => "expand",
            MaskKind::AltLines => "altlines",
            MaskKind::SuperRes2x => "sr2x",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, MaskKind::Wide | MaskKind::Narrow)
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask kind {s:?}")))
    }
}

/// Accepted missing-pixel fractions for the free-form kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub wide_missing: (f64, f64),
    pub narrow_missing: (f64, f64),
    pub max_attempts: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            wide_missing: (0.3, 0.6),
            narrow_missing: (0.05, 0.2),
            max_attempts: 10_000,
        }
    }
}

pub fn generate_mask(kind: MaskKind, h: usize, w: usize, rng: &mut Rng) -> Result<MaskField> {
    generate_mask_with(kind, h, w, &MaskParams::default(), rng)
}

pub fn generate_mask_with(
    kind: MaskKind,
    h: usize,
    w: usize,
    params: &MaskParams,
    rng: &mut Rng,
) -> Result<MaskField> {
    if h < 8 || w < 8 {
        return Err(Error::Dimension(format!("masks need at least 8x8, got {h}x{w}")));
    }
    if matches!(kind, MaskKind::AltLines | MaskKind::SuperRes2x) && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::Dimension(format!("{kind} needs even dimensions, got {h}x{w}")));
    }
    match kind {
        MaskKind::Half => MaskField::from_fn(h, w, |_, x| x < w / 2),
        MaskKind::Expand => {
            let (y0, x0) = ((h - h / 2) / 2, (w - w / 2) / 2);
            MaskField::from_fn(h, w, |y, x| {
                (y0..y0 + h / 2).contains(&y) && (x0..x0 + w / 2).contains(&x)
            })
        }
        MaskKind::AltLines => MaskField::from_fn(h, w, |y, _| y % 2 == 0),
        MaskKind::SuperRes2x => MaskField::from_fn(h, w, |y, x| y % 2 == 0 && x % 2 == 0),
        MaskKind::Wide => rejection(h, w, params.wide_missing, params.max_attempts, rng, wide_once),
        MaskKind::Narrow => {
            rejection(h, w, params.narrow_missing, params.max_attempts, rng, narrow_once)
        }
    }
}

fn rejection(
    h: usize,
    w: usize,
    (lo, hi): (f64, f64),
    attempts: usize,
    rng: &mut Rng,
    draw: fn(usize, usize, &mut Rng) -> MaskField,
) -> Result<MaskField> {
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Config(format!("bad missing-fraction range [{lo}, {hi}]")));
    }
    for _ in 0..attempts {
        let m = draw(h, w, rng);
        let missing = m.missing_fraction();
        if (lo..=hi).contains(&missing) {
            return Ok(m);
        }
    }
    Err(Error::Config(format!(
        "no mask with missing fraction in [{lo}, {hi}] after {attempts} attempts"
    )))
}

fn wide_once(h: usize, w: usize, rng: &mut Rng) -> MaskField {
    let mut m = MaskField::filled(h, w, true).expect("dims checked");
    for _ in 0..rng.int_inclusive(1, 4) {
        let rh = rng.uniform_range(h as f64 / 8.0, h as f64 / 2.0) as usize;
        let rw = rng.uniform_range(w as f64 / 8.0, w as f64 / 2.0) as usize;
        let y0 = rng.int_inclusive(0, h - rh.max(1));
        let x0 = rng.int_inclusive(0, w - rw.max(1));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                m.set(y, x, false);
            }
        }
    }
    let (wmin, wmax) = (w as f64 / 8.0, w as f64 / 4.0);
    for _ in 0..rng.int_inclusive(1, 4) {
        let width = rng.uniform_range(wmin, wmax);
        stroke(&mut m, width, rng);
    }
    m
}

fn narrow_once(h: usize, w: usize, rng: &mut Rng) -> MaskField {
    let mut m = MaskField::filled(h, w, true).expect("dims checked");
    let (wmin, wmax) = ((w as f64 / 64.0).max(1.0), (w as f64 / 32.0).max(1.5));
    for _ in 0..rng.int_inclusive(4, 10) {
        let width = rng.uniform_range(wmin, wmax);
        stroke(&mut m, width, rng);
    }
    m
}

/// Random-walk polyline of 1-5 segments with the given brush width.
fn stroke(m: &mut MaskField, width: f64, rng: &mut Rng) {
    let (h, w) = (m.height() as f64, m.width() as f64);
    let mut y = rng.uniform_range(0.0, h);
    let mut x = rng.uniform_range(0.0, w);
    let mut angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    for _ in 0..rng.int_inclusive(1, 5) {
        angle += rng.uniform_range(-1.2, 1.2);
        let len = rng.uniform_range(0.1, 0.4) * h.max(w);
        let ny = (y + len * angle.sin()).clamp(0.0, h);
        let nx = (x + len * angle.cos()).clamp(0.0, w);
        paint_segment(m, (y, x), (ny, nx), (width / 2.0).max(0.75));
        y = ny;
        x = nx;
    }
}

fn paint_segment(m: &mut MaskField, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let ylo = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let yhi = ((a.0.max(b.0) + radius).ceil() as usize).min(m.height());
    let xlo = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let xhi = ((a.1.max(b.1) + radius).ceil() as usize).min(m.width());
    for py in ylo..yhi {
        for px in xlo..xhi {
            let (cy, cx) = (py as f64 + 0.5, px as f64 + 0.5);
            let s = if len2 > 0.0 {
                (((cy - a.0) * dy + (cx - a.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ey, ex) = (a.0 + s * dy - cy, a.1 + s * dx - cx);
            if ey * ey + ex * ex <= radius * radius {
                m.set(py, px, false);
            }
        }
    }
}
