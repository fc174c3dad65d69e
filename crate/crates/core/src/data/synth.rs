//! Desk-scale synthetic change-detection scenes.
//!
//! Each scene is a textured ground plane with rectangular "buildings" that
//! cast short shadows. The second image adds or removes `n_true_changes`
//! buildings (the mask is the union of their footprints) and is then subject
//! to pseudo-changes that never enter the mask: a global brightness shift, a
//! per-channel tint, and a different shadow direction. Layout, distortion
//! and noise draw from separate random streams, so toggling a distortion
//! never moves a building.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoChange {
    pub brightness: bool,
    pub tint: bool,
    pub shadow: bool,
}

impl PseudoChange {
    pub const ALL: Self = Self { brightness: true, tint: true, shadow: true };
    pub const NONE: Self = Self { brightness: false, tint: false, shadow: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub canvas_size: usize,
    pub pairs: usize,
    pub n_true_changes: usize,
    /// Buildings present in the first image.
    pub base_shapes: usize,
    pub min_shape: usize,
    pub max_shape: usize,
    pub pseudo_change: PseudoChange,
    /// Brightness factor drawn from `1 ± brightness_range`.
    pub brightness_range: f64,
    /// Per-channel gain drawn from `1 ± tint_range`.
    pub tint_range: f64,
    pub shadow_length: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            pairs: 200,
            n_true_changes: 2,
            base_shapes: 3,
            min_shape: 12,
            max_shape: 22,
            pseudo_change: PseudoChange::ALL,
            brightness_range: 0.25,
            tint_range: 0.15,
            shadow_length: 3,
            noise_std: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, output_stride: usize) -> Result<()> {
        if self.canvas_size == 0 || !self.canvas_size.is_multiple_of(output_stride) {
            return Err(Error::Config(format!(
                "canvas {} must be a positive multiple of the output stride {output_stride}",
                self.canvas_size
            )));
        }
        if self.min_shape == 0 || self.min_shape > self.max_shape || self.max_shape + 2 > self.canvas_size {
            return Err(Error::Config(format!(
                "shape sizes {}..={} do not fit a {} canvas",
                self.min_shape, self.max_shape, self.canvas_size
            )));
        }
        if !(0.0..1.0).contains(&self.brightness_range) || !(0.0..1.0).contains(&self.tint_range) || self.noise_std < 0.0 {
            return Err(Error::Config("distortion magnitudes out of range".into()));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle `[y, y+h) × [x, x+w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.y && i < self.y + self.h && j >= self.x && j < self.x + self.w
    }

    fn overlaps_with_gap(&self, o: &Rect, gap: usize) -> bool {
        self.y < o.y + o.h + gap && o.y < self.y + self.h + gap && self.x < o.x + o.w + gap && o.x < self.x + self.w + gap
    }
}

/// A generated pair plus the changed footprints that produced its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub record: SampleRecord,
    pub changes: Vec<Rect>,
}

struct Building {
    rect: Rect,
    color: [f64; 3],
}

struct Ground {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, f64, [f64; 3])>,
}

impl Ground {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let base = [rng.gen_range(90.0..140.0), rng.gen_range(100.0..150.0), rng.gen_range(70.0..110.0)];
        let waves = (0..3)
            .map(|_| {
                let fy = rng.gen_range(0.05..0.35);
                let fx = rng.gen_range(0.05..0.35);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(6.0..16.0);
                let mix = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
                (fy, fx, phase, amp, mix)
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.waves.iter().fold(self.base[c], |acc, &(fy, fx, ph, amp, mix)| {
            acc + amp * mix[c] * (fy * i as f64 + fx * j as f64 + ph).sin()
        })
    }
}

fn place<R: Rng>(rng: &mut R, cfg: &SynthConfig, occupied: &[Rect]) -> Option<Rect> {
    for _ in 0..200 {
        let h = rng.gen_range(cfg.min_shape..=cfg.max_shape);
        let w = rng.gen_range(cfg.min_shape..=cfg.max_shape);
        let r = Rect {
            y: rng.gen_range(1..=cfg.canvas_size - h - 1),
            x: rng.gen_range(1..=cfg.canvas_size - w - 1),
            h,
            w,
        };
        if occupied.iter().all(|o| !r.overlaps_with_gap(o, cfg.shadow_length + 1)) {
            return Some(r);
        }
    }
    None
}

fn roof_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    if rng.gen_bool(0.5) {
        let g = rng.gen_range(170.0..235.0);
        [g + rng.gen_range(-15.0..15.0), g + rng.gen_range(-15.0..15.0), g + rng.gen_range(-15.0..15.0)]
    } else {
        [rng.gen_range(120.0..200.0), rng.gen_range(40.0..90.0), rng.gen_range(40.0..90.0)]
    }
}

fn render(size: usize, ground: &Ground, buildings: &[&Building], shadow: (isize, isize)) -> Array3<f64> {
    let mut img = Array3::from_shape_fn((size, size, 3), |(i, j, c)| ground.at(i, j, c));
    for i in 0..size {
        for j in 0..size {
            let (si, sj) = (i as isize - shadow.0, j as isize - shadow.1);
            let shaded = si >= 0
                && sj >= 0
                && buildings.iter().any(|b| b.rect.contains(si as usize, sj as usize));
            if shaded {
                for c in 0..3 {
                    img[[i, j, c]] *= 0.55;
                }
            }
        }
    }
    for b in buildings {
        for i in b.rect.y..b.rect.y + b.rect.h {
            for j in b.rect.x..b.rect.x + b.rect.w {
                for c in 0..3 {
                    img[[i, j, c]] = b.color[c];
                }
            }
        }
    }
    img
}

fn photometric<R: Rng>(img: &mut Array3<f64>, cfg: &SynthConfig, rng: &mut R) {
    let pc = cfg.pseudo_change;
    let gain = if pc.brightness {
        rng.gen_range(1.0 - cfg.brightness_range..=1.0 + cfg.brightness_range)
    } else {
        1.0
    };
    let mut tint = [1.0; 3];
    if pc.tint {
        for t in &mut tint {
            *t = rng.gen_range(1.0 - cfg.tint_range..=1.0 + cfg.tint_range);
        }
    }
    for ((_, _, c), v) in img.indexed_iter_mut() {
        *v *= gain * tint[c];
    }
}

fn quantize<R: Rng>(img: Array3<f64>, noise_std: f64, rng: &mut R) -> Array3<u8> {
    let normal = Normal::new(0.0, noise_std.max(1e-12)).expect("finite std");
    img.mapv(|v| {
        let n = if noise_std > 0.0 { normal.sample(rng) } else { 0.0 };
        (v + n).round().clamp(0.0, 255.0) as u8
    })
}

fn stream(seed: u64, index: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 * 4 + lane);
    rng
}

fn scene(cfg: &SynthConfig, index: usize) -> SynthScene {
    let mut layout = stream(cfg.seed, index, 0);
    let mut distort = stream(cfg.seed, index, 1);
    let mut noise = stream(cfg.seed, index, 2);

    let ground = Ground::sample(&mut layout);
    let mut occupied = Vec::new();
    let mut base = Vec::new();
    for _ in 0..cfg.base_shapes {
        if let Some(rect) = place(&mut layout, cfg, &occupied) {
            occupied.push(rect);
            base.push(Building { rect, color: roof_color(&mut layout) });
        }
    }
    let mut removed = vec![false; base.len()];
    let mut added = Vec::new();
    let mut changes = Vec::new();
    for _ in 0..cfg.n_true_changes {
        let candidates: Vec<usize> = (0..base.len()).filter(|&k| !removed[k]).collect();
        let remove = !candidates.is_empty() && layout.gen_bool(0.5);
        if remove {
            let k = candidates[layout.gen_range(0..candidates.len())];
            removed[k] = true;
            changes.push(base[k].rect);
        } else if let Some(rect) = place(&mut layout, cfg, &occupied) {
            occupied.push(rect);
            changes.push(rect);
            added.push(Building { rect, color: roof_color(&mut layout) });
        }
    }

    let s = cfg.shadow_length as isize;
    let shadow_t1 = (s, s);
    let shadow_t2 = if cfg.pseudo_change.shadow {
        [(s, -s), (-s, s), (s, 0), (0, s)][distort.gen_range(0..4)]
    } else {
        shadow_t1
    };
    let before: Vec<&Building> = base.iter().collect();
    let after: Vec<&Building> = base
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(b, _)| b)
        .chain(added.iter())
        .collect();
    let mut t1 = render(cfg.canvas_size, &ground, &before, shadow_t1);
    let mut t2 = render(cfg.canvas_size, &ground, &after, shadow_t2);
    photometric(&mut t1, cfg, &mut distort);
    photometric(&mut t2, cfg, &mut distort);

    let mask = Array2::from_shape_fn((cfg.canvas_size, cfg.canvas_size), |(i, j)| {
        u8::from(changes.iter().any(|r| r.contains(i, j)))
    });
    let record = SampleRecord {
        id: format!("synth_{:05}", index),
        image_t1: quantize(t1, cfg.noise_std, &mut noise),
        image_t2: quantize(t2, cfg.noise_std, &mut noise),
        mask,
    };
    SynthScene { record, changes }
}

pub fn synth_generate_scenes(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    cfg.validate(1)?;
    Ok((0..cfg.pairs).map(|i| scene(cfg, i)).collect())
}

/// `cfg.pairs` deterministic samples with ids `synth_00000`, `synth_00001`, ...
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    Ok(synth_generate_scenes(cfg)?.into_iter().map(|s| s.record).collect())
}
