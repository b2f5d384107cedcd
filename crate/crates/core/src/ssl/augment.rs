//! Stochastic view generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{rotate90, ImageDataset};
use crate::error::{NsaError, Result};
use crate::seeding::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Fraction of the image area kept by the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range of the crop.
    pub crop_ratio: (f64, f64),
    pub hflip_prob: f64,
    /// Brightness factor is drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor is drawn from `1 ± contrast`.
    pub contrast: f64,
    pub grayscale_prob: f64,
    /// Draw an extra view rotated by a multiple of 90° (negatives for SimCLR-neg).
    pub rotation_shift: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: (0.3, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            hflip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            grayscale_prob: 0.2,
            rotation_shift: false,
        }
    }
}

/// Maps a `u8` pixel to `[-1, 1]`.
pub fn pixel_to_input(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Unaugmented `N×C×H×W` input tensor for the given images.
pub fn images_to_tensor(ds: &ImageDataset, indices: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * ds.image_len());
    for &i in indices {
        data.extend(ds.image(i).iter().map(|&v| pixel_to_input(v)));
    }
    Tensor::new(vec![indices.len(), ds.channels, ds.height, ds.width], data)
        .expect("shape matches by construction")
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NsaError::config(format!("{what} {p} outside [0, 1]")));
    }
    Ok(())
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(NsaError::config(format!("crop scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(NsaError::config(format!("crop ratio {:?} invalid", self.crop_ratio)));
        }
        check_prob(self.hflip_prob, "flip probability")?;
        check_prob(self.grayscale_prob, "grayscale probability")?;
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(NsaError::config("brightness/contrast jitter must lie in [0, 1)"));
        }
        Ok(())
    }

    /// One augmented view of a `C×H×W` `u8` image, in `[-1, 1]`, same size as the input.
    pub fn view(&self, img: &[u8], channels: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f32> {
        let src: Vec<f32> = img.iter().map(|&v| v as f32 / 255.0).collect();
        let (y0, x0, ch, cw) = self.crop_box(h, w, rng);
        let mut out = resize_bilinear(&src, channels, h, w, (y0, x0, ch, cw), h, w);
        if rng.random::<f64>() < self.hflip_prob {
            for c in 0..channels {
                for y in 0..h {
                    out[(c * h + y) * w..(c * h + y + 1) * w].reverse();
                }
            }
        }
        let b = 1.0 + rng.random_range(-self.brightness..=self.brightness) as f32;
        out.iter_mut().for_each(|v| *v *= b);
        let k = 1.0 + rng.random_range(-self.contrast..=self.contrast) as f32;
        let mean = (out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64) as f32;
        out.iter_mut().for_each(|v| *v = (*v - mean) * k + mean);
        if channels == 3 && rng.random::<f64>() < self.grayscale_prob {
            let plane = h * w;
            for p in 0..plane {
                let l = 0.299 * out[p] + 0.587 * out[plane + p] + 0.114 * out[2 * plane + p];
                out[p] = l;
                out[plane + p] = l;
                out[2 * plane + p] = l;
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0) * 2.0 - 1.0);
        out
    }

    fn crop_box(&self, h: usize, w: usize, rng: &mut impl Rng) -> (f64, f64, f64, f64) {
        let area = (h * w) as f64;
        let (lr0, lr1) = (self.crop_ratio.0.ln(), self.crop_ratio.1.ln());
        for _ in 0..10 {
            let target = area * rng.random_range(self.crop_scale.0..=self.crop_scale.1);
            let ratio = rng.random_range(lr0..=lr1).exp();
            let cw = (target * ratio).sqrt();
            let ch = (target / ratio).sqrt();
            if cw <= w as f64 && ch <= h as f64 {
                let y0 = rng.random_range(0.0..=(h as f64 - ch));
                let x0 = rng.random_range(0.0..=(w as f64 - cw));
                return (y0, x0, ch, cw);
            }
        }
        (0.0, 0.0, h as f64, w as f64)
    }
}

/// Bilinear resample of the box `(y0, x0, bh, bw)` to `oh × ow`, sampling at pixel centers.
fn resize_bilinear(
    src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    (y0, x0, bh, bw): (f64, f64, f64, f64),
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; channels * oh * ow];
    let sample = |c: usize, y: f64, x: f64| -> f32 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (yi, xi) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((yi + 1).min(h - 1), (xi + 1).min(w - 1));
        let (fy, fx) = ((y - yi as f64) as f32, (x - xi as f64) as f32);
        let at = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
        let top = at(yi, xi) * (1.0 - fx) + at(yi, x1) * fx;
        let bot = at(y1, xi) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    for c in 0..channels {
        for oy in 0..oh {
            let sy = y0 + (oy as f64 + 0.5) * bh / oh as f64 - 0.5;
            for ox in 0..ow {
                let sx = x0 + (ox as f64 + 0.5) * bw / ow as f64 - 0.5;
                out[(c * oh + oy) * ow + ox] = sample(c, sy, sx);
            }
        }
    }
    out
}

/// Augmented views for one optimization step.
pub struct ViewBatch {
    /// `2B×C×H×W`: first view of every image, then the second view.
    pub views: Tensor,
    /// `B×C×H×W` rotated views when the policy asks for them.
    pub rotated: Option<(Tensor, Vec<u8>)>,
}

/// Builds the views for `indices` at `step`. Every image's randomness is
/// derived from `(seed, step, image index, view)` only.
pub fn make_views(
    policy: &AugmentationPolicy,
    ds: &ImageDataset,
    indices: &[usize],
    seed: u64,
    step: u64,
) -> Result<ViewBatch> {
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let b = indices.len();
    let mut views = vec![Vec::with_capacity(b * ds.image_len()), Vec::with_capacity(b * ds.image_len())];
    let mut rotated = Vec::new();
    let mut rotations = Vec::new();
    for &i in indices {
        for (v, buf) in views.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, step, i as u64, v as u64]));
            buf.extend(policy.view(ds.image(i), c, h, w, &mut rng));
        }
        if policy.rotation_shift {
            if h != w {
                return Err(NsaError::config("rotation shift needs square images"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, step, i as u64, 2]));
            let turns = rng.random_range(0..4u8);
            let base = policy.view(ds.image(i), c, h, w, &mut rng);
            rotated.extend(rotate90(&base, c, h, turns as usize));
            rotations.push(turns);
        }
    }
    let [v1, v2]: [Vec<f32>; 2] = views.try_into().expect("two views");
    let mut all = v1;
    all.extend(v2);
    let views = Tensor::new(vec![2 * b, c, h, w], all)?;
    let rotated = if policy.rotation_shift {
        Some((Tensor::new(vec![b, c, h, w], rotated)?, rotations))
    } else {
        None
    };
    Ok(ViewBatch { views, rotated })
}
