//! Procedural image generators used as small-scale stand-ins for natural
//! image benchmarks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{NsaError, Result};
use crate::seeding::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Colored Gaussian blobs; class sets hue and blob scale.
    Blobs,
    /// Oriented stripe textures; class sets orientation and frequency.
    Textures,
    /// Asymmetric glyphs where class `4g + r` is glyph `g` rotated by `r·90°`.
    Rotmix,
}

impl SynthKind {
    fn tag(self) -> u64 {
        match self {
            SynthKind::Blobs => 1,
            SynthKind::Textures => 2,
            SynthKind::Rotmix => 3,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Textures => "textures",
            SynthKind::Rotmix => "rotmix",
        })
    }
}

impl FromStr for SynthKind {
    type Err = NsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "textures" => Ok(SynthKind::Textures),
            "rotmix" => Ok(SynthKind::Rotmix),
            other => Err(NsaError::config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

const CHANNELS: usize = 3;

/// Generates `classes × n_per_class` RGB images of `size × size`.
/// Labels are interleaved: image `i` has class `i % classes`.
pub fn synth_dataset(
    kind: SynthKind,
    classes: u16,
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<ImageDataset> {
    if classes < 2 {
        return Err(NsaError::config("synthetic datasets need at least 2 classes"));
    }
    if size < 8 {
        return Err(NsaError::config("synthetic images must be at least 8x8"));
    }
    let n = classes as usize * n_per_class;
    let mut pixels = Vec::with_capacity(n * CHANNELS * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % classes as usize) as u16;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, kind.tag(), i as u64]));
        let img = match kind {
            SynthKind::Blobs => blob_image(class, classes, size, &mut rng),
            SynthKind::Textures => texture_image(class, classes, size, &mut rng),
            SynthKind::Rotmix => glyph_image(class, size, &mut rng),
        };
        pixels.extend(img.into_iter().map(to_u8));
        labels.push(class);
    }
    ImageDataset::new(
        format!("{kind}-{classes}x{n_per_class}-s{size}-seed{seed}"),
        [CHANNELS, size, size],
        classes,
        pixels,
        labels,
    )
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn hue_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn blob_image(class: u16, classes: u16, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let s = size as f64;
    let base = hue_rgb(class as f64 / classes as f64, 0.8, 0.9);
    let count = rng.random_range(1..=3);
    let sigma_scale = 0.08 + 0.04 * (class % 3) as f64;
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..count)
        .map(|_| {
            let center = [rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s];
            let sigma = sigma_scale * s * rng.random_range(0.8..1.2);
            let color = base.map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
            (center, sigma, color)
        })
        .collect();
    let bg = rng.random_range(0.05..0.25);
    let mut img = vec![0.0; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut px = [bg; 3];
            for (center, sigma, color) in &blobs {
                let d2 = (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..3 {
                    px[ch] += a * color[ch];
                }
            }
            for (ch, v) in px.iter().enumerate() {
                img[(ch * size + y) * size + x] = v + noise.sample(rng);
            }
        }
    }
    img
}

fn texture_image(class: u16, classes: u16, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let theta = PI * class as f64 / classes as f64 + rng.random_range(-0.08..0.08);
    let cycles = 2.5 + 1.5 * (class % 2) as f64;
    let k = 2.0 * PI * cycles / size as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let tint = hue_rgb(rng.random_range(0.0..1.0), 0.5, 1.0);
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = vec![0.0; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let wave = (k * (x as f64 * c + y as f64 * s) + phase).sin();
            for (ch, t) in tint.iter().enumerate() {
                img[(ch * size + y) * size + x] = 0.5 + 0.4 * wave * t + noise.sample(rng);
            }
        }
    }
    img
}

const GLYPHS: [[&str; 6]; 4] = [
    ["######", "#.....", "####..", "#.....", "#.....", "#....."],
    ["#.....", "#.....", "#.###.", "##..#.", "#...#.", "#...##"],
    ["#.....", "#...#.", "#.....", "#.....", "#.....", "######"],
    ["######", ".....#", "...###", "....#.", "...#..", "..#..."],
];

fn glyph_mask(glyph: usize, size: usize, dx: isize, dy: isize) -> Vec<bool> {
    let rows = &GLYPHS[glyph % GLYPHS.len()];
    let cell = (size * 3 / 4) / 6;
    let margin = (size - 6 * cell) / 2;
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let gx = x as isize - margin as isize - dx;
            let gy = y as isize - margin as isize - dy;
            if gx < 0 || gy < 0 {
                continue;
            }
            let (cx, cy) = (gx as usize / cell, gy as usize / cell);
            if cx < 6 && cy < 6 && rows[cy].as_bytes()[cx] == b'#' {
                mask[y * size + x] = true;
            }
        }
    }
    mask
}

fn rotate_mask(mask: &[bool], size: usize, quarter_turns: usize) -> Vec<bool> {
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    rotate90(&bytes, 1, size, quarter_turns)
        .into_iter()
        .map(|b| b != 0)
        .collect()
}

/// Noise-free, centered rendering of a rotmix class as a `size×size` mask.
pub fn rotmix_canonical(class: u16, size: usize) -> Vec<bool> {
    let mask = glyph_mask(class as usize / 4, size, 0, 0);
    rotate_mask(&mask, size, class as usize % 4)
}

fn glyph_image(class: u16, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let jitter = (size / 16).max(1) as i64;
    let dx = rng.random_range(-jitter..=jitter) as isize;
    let dy = rng.random_range(-jitter..=jitter) as isize;
    let mask = rotate_mask(
        &glyph_mask(class as usize / 4, size, dx, dy),
        size,
        class as usize % 4,
    );
    let fg = hue_rgb(rng.random_range(0.0..1.0), 0.6, rng.random_range(0.7..1.0));
    let bg = rng.random_range(0.0..0.3);
    let mut img = vec![0.0; CHANNELS * size * size];
    for (p, &on) in mask.iter().enumerate() {
        for (ch, f) in fg.iter().enumerate() {
            let v = if on { *f } else { bg };
            img[ch * size * size + p] = v + noise.sample(rng);
        }
    }
    img
}

/// Rotates a square `C×S×S` image counter-clockwise by `quarter_turns × 90°`.
pub fn rotate90<T: Copy + Default>(img: &[T], channels: usize, size: usize, quarter_turns: usize) -> Vec<T> {
    assert_eq!(img.len(), channels * size * size, "rotate90 needs a square image");
    let mut cur = img.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut out = vec![T::default(); cur.len()];
        for ch in 0..channels {
            let plane = &cur[ch * size * size..(ch + 1) * size * size];
            let dst = &mut out[ch * size * size..(ch + 1) * size * size];
            for y in 0..size {
                for x in 0..size {
                    dst[y * size + x] = plane[x * size + (size - 1 - y)];
                }
            }
        }
        cur = out;
    }
    cur
}
