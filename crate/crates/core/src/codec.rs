//! Grayscale JPEG-style lossy compression: 8×8 block DCT with a
//! quality-scaled luminance quantization table. Entropy coding is not
//! modelled; [`compress`] returns the decoded image directly.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const BLOCK: usize = 8;

/// Mean and standard deviation of the open-world quality distribution,
/// clamped to [`AGNOSTIC_MIN`, `AGNOSTIC_MAX`].
pub const AGNOSTIC_MEAN: f64 = 65.0;
pub const AGNOSTIC_SD: f64 = 11.7;
pub const AGNOSTIC_MIN: u8 = 30;
pub const AGNOSTIC_MAX: u8 = 100;

/// ITU T.81 Annex K luminance table, row-major.
pub const BASE_LUMINANCE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QualityFactor(u8);

impl QualityFactor {
    pub fn new(q: u8) -> Result<Self> {
        if (1..=100).contains(&q) {
            Ok(QualityFactor(q))
        } else {
            Err(Error::InvalidArgument(format!(
                "quality factor {q} outside [1, 100]"
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for QualityFactor {
    type Error = Error;

    fn try_from(q: u8) -> Result<Self> {
        Self::new(q)
    }
}

impl From<QualityFactor> for u8 {
    fn from(q: QualityFactor) -> u8 {
        q.0
    }
}

impl std::fmt::Display for QualityFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTable([u16; 64]);

impl QuantTable {
    pub fn new(entries: [u16; 64]) -> Result<Self> {
        if entries.iter().any(|&t| !(1..=255).contains(&t)) {
            return Err(Error::InvalidArgument(
                "quantization entries must lie in [1, 255]".into(),
            ));
        }
        Ok(QuantTable(entries))
    }

    pub fn luminance() -> Self {
        QuantTable(BASE_LUMINANCE)
    }

    pub fn entries(&self) -> &[u16; 64] {
        &self.0
    }
}

/// libjpeg quality scaling: `scale = 5000/q` below 50, `200 − 2q` otherwise,
/// each entry `clamp(⌊(t·scale + 50)/100⌋, 1, 255)`.
pub fn scale_quant_table(base: &QuantTable, q: QualityFactor) -> QuantTable {
    let q = u32::from(q.get());
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &t) in out.iter_mut().zip(base.0.iter()) {
        *o = ((u32::from(t) * scale + 50) / 100).clamp(1, 255) as u16;
    }
    QuantTable(out)
}

/// Orthonormal DCT-II basis, `basis[k][n] = α(k)·cos(π(2n+1)k/16)`.
fn dct_basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; BLOCK];
        for (k, row) in b.iter_mut().enumerate() {
            let alpha = if k == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64
                        / (2 * BLOCK) as f64)
                        .cos();
            }
        }
        b
    })
}

/// 2-D forward DCT of one row-major 8×8 block.
pub fn dct2(block: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    // rows: tmp = X·Cᵀ
    for y in 0..BLOCK {
        for k in 0..BLOCK {
            tmp[y * BLOCK + k] = (0..BLOCK).map(|n| block[y * BLOCK + n] * c[k][n]).sum();
        }
    }
    // columns: out = C·tmp
    let mut out = [0.0; 64];
    for k in 0..BLOCK {
        for x in 0..BLOCK {
            out[k * BLOCK + x] = (0..BLOCK).map(|n| c[k][n] * tmp[n * BLOCK + x]).sum();
        }
    }
    out
}

pub fn idct2(coef: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..BLOCK {
        for n in 0..BLOCK {
            tmp[y * BLOCK + n] = (0..BLOCK).map(|k| coef[y * BLOCK + k] * c[k][n]).sum();
        }
    }
    let mut out = [0.0; 64];
    for n in 0..BLOCK {
        for x in 0..BLOCK {
            out[n * BLOCK + x] = (0..BLOCK).map(|k| c[k][n] * tmp[k * BLOCK + x]).sum();
        }
    }
    out
}

/// Compresses and immediately decodes `image` at quality `q`.
///
/// Both dimensions must be multiples of 8. Output pixels are clamped to
/// `[0, 255]` but not rounded to integers.
pub fn compress(image: &GrayImage, q: QualityFactor) -> Result<GrayImage> {
    let (w, h) = (image.width(), image.height());
    if w % BLOCK != 0 || h % BLOCK != 0 {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            reason: "image dimensions must be multiples of 8".into(),
        });
    }
    let table = scale_quant_table(&QuantTable::luminance(), q);
    let steps: Vec<f64> = table.entries().iter().map(|&t| f64::from(t)).collect();
    let src = image.pixels();
    let mut out = vec![0.0; w * h];
    let mut block = [0.0; 64];
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    block[y * BLOCK + x] = src[(by + y) * w + bx + x] - 128.0;
                }
            }
            let mut coef = dct2(&block);
            for (c, s) in coef.iter_mut().zip(&steps) {
                *c = (*c / s).round() * s;
            }
            let rec = idct2(&coef);
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    out[(by + y) * w + bx + x] = (rec[y * BLOCK + x] + 128.0).clamp(0.0, 255.0);
                }
            }
        }
    }
    GrayImage::new(w, h, out)
}

/// Maps a raw normal draw onto a quality factor: round, then clamp to the
/// open-world range.
pub fn quality_from_draw(draw: f64) -> QualityFactor {
    let q = draw.round().clamp(f64::from(AGNOSTIC_MIN), f64::from(AGNOSTIC_MAX));
    QualityFactor(q as u8)
}

pub fn sample_agnostic_quality<R: Rng + ?Sized>(rng: &mut R) -> QualityFactor {
    let normal = Normal::new(AGNOSTIC_MEAN, AGNOSTIC_SD).expect("positive sd");
    quality_from_draw(normal.sample(rng))
}
