//! Procedural clear backgrounds standing in for real infrared scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{gaussian_blur, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    CloudNoise,
    Structured,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 4] = [
        BackgroundKind::Flat,
        BackgroundKind::Gradient,
        BackgroundKind::CloudNoise,
        BackgroundKind::Structured,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackgroundKind::Flat => "flat",
            BackgroundKind::Gradient => "gradient",
            BackgroundKind::CloudNoise => "cloud-noise",
            BackgroundKind::Structured => "structured",
        }
    }

    fn tag(self) -> u64 {
        match self {
            BackgroundKind::Flat => 0x11,
            BackgroundKind::Gradient => 0x22,
            BackgroundKind::CloudNoise => 0x33,
            BackgroundKind::Structured => 0x44,
        }
    }
}

impl std::str::FromStr for BackgroundKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        BackgroundKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| crate::Error::param(format!("unknown background kind {s:?}")))
    }
}

pub const FLAT_LEVEL: f64 = 0.3;
const SKY_LEVEL: f64 = 0.35;
/// (lattice cell in pixels, amplitude) per octave.
const CLOUD_OCTAVES: [(usize, f64); 4] = [(32, 0.09), (16, 0.06), (8, 0.04), (4, 0.025)];

/// Deterministic background of the given kind. Values stay within `[0, 1]`.
pub fn make_background(kind: BackgroundKind, seed: u64, width: usize, height: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::synthesis::mix_seed(seed, kind.tag()));
    match kind {
        BackgroundKind::Flat => GrayImage::filled(width, height, FLAT_LEVEL),
        BackgroundKind::Gradient => {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let slope = 0.05 + 0.1 * rng.random::<f64>();
            let (c, s) = (theta.cos(), theta.sin());
            let sx = 2.0 / (width.max(2) - 1) as f64;
            let sy = 2.0 / (height.max(2) - 1) as f64;
            GrayImage::from_fn(width, height, |i, j| {
                let x = i as f64 * sx - 1.0;
                let y = j as f64 * sy - 1.0;
                FLAT_LEVEL + slope * (c * x + s * y)
            })
        }
        BackgroundKind::CloudNoise => clouds(&mut rng, width, height),
        BackgroundKind::Structured => {
            let mut img = clouds(&mut rng, width, height);
            add_buildings(&mut rng, &mut img);
            img.map(|v| v.clamp(0.0, 1.0))
        }
    }
}

fn clouds(rng: &mut ChaCha8Rng, width: usize, height: usize) -> GrayImage {
    let mut acc = GrayImage::filled(width, height, SKY_LEVEL);
    for (cell, amp) in CLOUD_OCTAVES {
        add_value_noise(rng, &mut acc, cell, amp);
    }
    let smooth = gaussian_blur(&acc, 1.5).expect("positive sigma");
    smooth.map(|v| v.clamp(0.0, 1.0))
}

/// Adds `amp` times smoothstep-interpolated lattice noise in `[-1, 1]` with the
/// given cell size.
fn add_value_noise(rng: &mut ChaCha8Rng, acc: &mut GrayImage, cell: usize, amp: f64) {
    let (width, height) = acc.dims();
    let gw = width / cell + 3;
    let gh = height / cell + 3;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    // Random sub-cell phase so lattice lines do not align across octaves.
    let ox = rng.random::<f64>() * cell as f64;
    let oy = rng.random::<f64>() * cell as f64;
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    // Lattice cell and blend weight per column and per row.
    let split = |i: usize, offset: f64| {
        let f = (i as f64 + offset) / cell as f64;
        (f.floor() as usize, smooth(f.fract()))
    };
    let cols: Vec<(usize, f64)> = (0..width).map(|i| split(i, ox)).collect();
    for (j, out) in acc.data_mut().chunks_exact_mut(width).enumerate() {
        let (gy, ty) = split(j, oy);
        let upper = &lattice[gy * gw..(gy + 1) * gw];
        let lower = &lattice[(gy + 1) * gw..(gy + 2) * gw];
        for (a, &(gx, tx)) in out.iter_mut().zip(&cols) {
            let top = upper[gx] * (1.0 - tx) + upper[gx + 1] * tx;
            let bottom = lower[gx] * (1.0 - tx) + lower[gx + 1] * tx;
            *a += amp * (top * (1.0 - ty) + bottom * ty);
        }
    }
}

/// Rectangular bottom-anchored blocks with a flat intensity step each.
fn add_buildings(rng: &mut ChaCha8Rng, img: &mut GrayImage) {
    let (w, h) = img.dims();
    let count = rng.random_range(3..=8);
    for _ in 0..count {
        let bw = rng.random_range((w / 20).max(1)..=(w / 6).max(1));
        let bh = rng.random_range((h / 10).max(1)..=(h / 3).max(1));
        let x0 = rng.random_range(0..=w - bw);
        let step = 0.08 + 0.17 * rng.random::<f64>();
        for y in h - bh..h {
            for x in x0..x0 + bw {
                let v = img.get(x, y);
                img.set(x, y, v + step);
            }
        }
    }
}
