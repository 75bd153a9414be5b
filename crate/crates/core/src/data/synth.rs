//! Cluttered single- and multi-digit scenes with exact object masks.
//!
//! Every sample draws from its own ChaCha stream keyed by
//! `(seed, split, index, attempt)`, so generation order and parallelism never
//! change the output, and train/test backgrounds never share randomness.

use super::idx::Digits;
use super::{Sample, Split};
use crate::error::{invalid, Error, Result};
use crate::masks::ObjectMask;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A failed placement is retried this many times before the whole sample is
/// regenerated from the next stream.
pub const MAX_REJECTIONS: usize = 100;
const MAX_ATTEMPTS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Square frame side in pixels.
    pub frame: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Digit fragments scattered behind the objects.
    pub clutter_count: usize,
    pub clutter_intensity: f64,
    pub clutter_crop_min: usize,
    pub clutter_crop_max: usize,
    /// Peak of the smooth additive noise.
    pub noise_amplitude: f64,
    /// Spacing of the coarse noise grid that is bilinearly upsampled.
    pub noise_cell: usize,
    /// Scaled-digit pixels above this belong to the object mask.
    pub ink_threshold: f64,
    pub k_min: usize,
    pub k_max: usize,
    /// Largest allowed intersection over the smaller ink mask.
    pub overlap_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame: 120,
            scale_min: 1.5,
            scale_max: 3.0,
            clutter_count: 12,
            clutter_intensity: 0.6,
            clutter_crop_min: 8,
            clutter_crop_max: 16,
            noise_amplitude: 0.15,
            noise_cell: 8,
            ink_threshold: 0.25,
            k_min: 2,
            k_max: 3,
            overlap_max: 0.3,
        }
    }
}

impl SynthConfig {
    fn validate(&self, multi: bool) -> Result<()> {
        if self.frame == 0 || !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(invalid!("bad frame or scale range"));
        }
        if ((28.0 * self.scale_max).round() as usize) > self.frame {
            return Err(invalid!("largest digit does not fit in a {} frame", self.frame));
        }
        if self.clutter_crop_min == 0 || self.clutter_crop_min > self.clutter_crop_max || self.noise_cell == 0 {
            return Err(invalid!("bad clutter settings"));
        }
        if multi {
            if !(2 <= self.k_min && self.k_min <= self.k_max && self.k_max <= 4) {
                return Err(invalid!("object count range must lie within [2, 4], got {}..={}", self.k_min, self.k_max));
            }
            if !(0.0..=0.5).contains(&self.overlap_max) {
                return Err(invalid!("overlap_max must be in [0, 0.5], got {}", self.overlap_max));
            }
        }
        Ok(())
    }
}

/// Where and how large one digit was drawn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Index into the digit pool.
    pub digit: usize,
    pub label: usize,
    /// Side of the rescaled square digit.
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

/// Stream id of sample `index`; `attempt` advances on regeneration.
pub fn stream_id(split: Split, index: usize, attempt: u64) -> u64 {
    let s = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    (s << 63) | (attempt << 40) | index as u64
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Bilinear resize of a `rows × cols` digit to `size × size`, zero outside.
pub fn scale_digit(src: &[f64], rows: usize, cols: usize, size: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            src[r as usize * cols + c as usize]
        }
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let sy = (y as f64 + 0.5) * rows as f64 / size as f64 - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        for x in 0..size {
            let sx = (x as f64 + 0.5) * cols as f64 / size as f64 - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let (r, c) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(r, c) + fx * at(r, c + 1))
                + fy * ((1.0 - fx) * at(r + 1, c) + fx * at(r + 1, c + 1));
            out[y * size + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn draw_other_digit(rng: &mut ChaCha8Rng, digits: &Digits, exclude: &[usize]) -> usize {
    loop {
        let j = rng.gen_range(0..digits.len());
        if !exclude.contains(&j) || digits.len() <= exclude.len() {
            return j;
        }
    }
}

/// Clutter of faded digit fragments plus smooth noise, values in `[0, 1]`.
fn background(rng: &mut ChaCha8Rng, digits: &Digits, exclude: &[usize], cfg: &SynthConfig) -> Vec<f64> {
    let n = cfg.frame;
    let mut img = vec![0.0f64; n * n];
    for _ in 0..cfg.clutter_count {
        let j = draw_other_digit(rng, digits, exclude);
        let side = rng.gen_range(cfg.clutter_crop_min..=cfg.clutter_crop_max.min(digits.rows().min(digits.cols())));
        let top = rng.gen_range(0..=digits.rows() - side);
        let left = rng.gen_range(0..=digits.cols() - side);
        let src = digits.image(j);
        let crop: Vec<f64> = (0..side * side)
            .map(|i| src[(top + i / side) * digits.cols() + left + i % side])
            .collect();
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let size = ((side as f64 * scale).round() as usize).max(1);
        let patch = scale_digit(&crop, side, side, size);
        let half = (size / 2) as isize;
        let ty = rng.gen_range(-half..=n as isize - half);
        let tx = rng.gen_range(-half..=n as isize - half);
        for py in 0..size {
            let y = ty + py as isize;
            if y < 0 || y >= n as isize {
                continue;
            }
            for px in 0..size {
                let x = tx + px as isize;
                if x < 0 || x >= n as isize {
                    continue;
                }
                let dst = &mut img[y as usize * n + x as usize];
                *dst = (*dst).max(cfg.clutter_intensity * patch[py * size + px]);
            }
        }
    }
    let g = n / cfg.noise_cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.0..=cfg.noise_amplitude)).collect();
    for y in 0..n {
        let gy = y as f64 / cfg.noise_cell as f64;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        for x in 0..n {
            let gx = x as f64 / cfg.noise_cell as f64;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let v = (1.0 - fy) * ((1.0 - fx) * grid[y0 * g + x0] + fx * grid[y0 * g + x0 + 1])
                + fy * ((1.0 - fx) * grid[(y0 + 1) * g + x0] + fx * grid[(y0 + 1) * g + x0 + 1]);
            let p = &mut img[y * n + x];
            *p = (*p + v).min(1.0);
        }
    }
    img
}

/// A digit rendered at its placement, with its full (unoccluded) ink mask
/// in frame coordinates.
struct Rendered {
    placement: Placement,
    patch: Vec<f64>,
    ink: Vec<bool>,
    ink_count: usize,
}

fn render(digits: &Digits, placement: Placement, cfg: &SynthConfig) -> Rendered {
    let patch = scale_digit(digits.image(placement.digit), digits.rows(), digits.cols(), placement.size);
    let n = cfg.frame;
    let mut ink = vec![false; n * n];
    let mut ink_count = 0;
    for py in 0..placement.size {
        for px in 0..placement.size {
            if patch[py * placement.size + px] > cfg.ink_threshold {
                ink[(placement.top + py) * n + placement.left + px] = true;
                ink_count += 1;
            }
        }
    }
    Rendered {
        placement,
        patch,
        ink,
        ink_count,
    }
}

fn place(rng: &mut ChaCha8Rng, digits: &Digits, digit: usize, cfg: &SynthConfig) -> Rendered {
    let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    let size = (digits.rows() as f64 * scale).round() as usize;
    let top = rng.gen_range(0..=cfg.frame - size);
    let left = rng.gen_range(0..=cfg.frame - size);
    render(
        digits,
        Placement {
            digit,
            label: digits.label(digit),
            size,
            top,
            left,
        },
        cfg,
    )
}

/// Draws each digit over `img` in order: ink pixels replace what is below,
/// sub-threshold fringe pixels combine by maximum.
fn composite(img: &mut [f64], objects: &[Rendered], n: usize) {
    for r in objects {
        let p = &r.placement;
        for py in 0..p.size {
            for px in 0..p.size {
                let idx = (p.top + py) * n + p.left + px;
                let v = r.patch[py * p.size + px];
                img[idx] = if r.ink[idx] { v } else { img[idx].max(v) };
            }
        }
    }
}

/// Visible part of each ink mask: later objects occlude earlier ones.
fn visible_masks(objects: &[Rendered]) -> Vec<Vec<bool>> {
    (0..objects.len())
        .map(|j| {
            objects[j]
                .ink
                .iter()
                .enumerate()
                .map(|(i, &on)| on && !objects[j + 1..].iter().any(|o| o.ink[i]))
                .collect()
        })
        .collect()
}

fn overlap_ratio(a: &Rendered, b: &Rendered) -> f64 {
    let inter = a.ink.iter().zip(&b.ink).filter(|(x, y)| **x && **y).count();
    inter as f64 / a.ink_count.min(b.ink_count) as f64
}

fn build_sample(img: Vec<f64>, objects: Vec<Rendered>, split: Split, stream: u64, n: usize) -> Result<Option<Sample>> {
    let visible = visible_masks(&objects);
    if visible.iter().any(|m| !m.contains(&true)) {
        return Ok(None);
    }
    let masks = visible
        .into_iter()
        .zip(&objects)
        .enumerate()
        .map(|(k, (m, r))| {
            let t = Tensor::new([n, n], m.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())?;
            ObjectMask::new(t, k, r.placement.label)
        })
        .collect::<Result<Vec<_>>>()?;
    let placements = objects.into_iter().map(|r| r.placement).collect();
    Ok(Some(
        Sample::new(Tensor::new([n, n, 1], img)?, masks, split, stream)?.with_placements(placements),
    ))
}

fn generate(digits: &Digits, seed: u64, split: Split, index: usize, cfg: &SynthConfig, multi: bool) -> Result<Sample> {
    for attempt in 0..MAX_ATTEMPTS {
        let stream = stream_id(split, index, attempt);
        let mut rng = sample_rng(seed, stream);
        let k = if multi { rng.gen_range(cfg.k_min..=cfg.k_max) } else { 1 };
        let chosen: Vec<usize> = (0..k).map(|_| rng.gen_range(0..digits.len())).collect();
        let mut img = background(&mut rng, digits, &chosen, cfg);
        let mut placed: Vec<Rendered> = Vec::with_capacity(k);
        let mut failed = false;
        for &d in &chosen {
            let mut ok = None;
            for _ in 0..MAX_REJECTIONS {
                let r = place(&mut rng, digits, d, cfg);
                if r.ink_count > 0 && placed.iter().all(|o| overlap_ratio(o, &r) <= cfg.overlap_max) {
                    ok = Some(r);
                    break;
                }
            }
            match ok {
                Some(r) => placed.push(r),
                None => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            continue;
        }
        composite(&mut img, &placed, cfg.frame);
        if let Some(s) = build_sample(img, placed, split, stream, cfg.frame)? {
            return Ok(s);
        }
    }
    Err(Error::Numerical(format!(
        "could not place objects for sample {index} after {MAX_ATTEMPTS} attempts"
    )))
}

fn check_pool(digits: &Digits, n: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid!("sample count must be at least 1"));
    }
    if digits.len() < 2 {
        return Err(invalid!("digit pool needs at least 2 digits"));
    }
    Ok(())
}

/// `n` scenes with one scaled digit on clutter each.
pub fn synth_single(digits: &Digits, n: usize, seed: u64, split: Split, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate(false)?;
    check_pool(digits, n)?;
    (0..n).map(|i| generate(digits, seed, split, i, cfg, false)).collect()
}

/// `n` scenes with `k_min..=k_max` digits each, overlap bounded by
/// `overlap_max`; masks hold visible pixels only.
pub fn synth_multi(digits: &Digits, n: usize, seed: u64, split: Split, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate(true)?;
    check_pool(digits, n)?;
    (0..n).map(|i| generate(digits, seed, split, i, cfg, true)).collect()
}
