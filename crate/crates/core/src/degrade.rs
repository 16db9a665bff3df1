//! Synthetic degradation pipeline: the eight degradation operators,
//! combination sampling with the 1:3:5 single/dual/triple ratio, benchmark
//! combination presets, and procedural clean-image generation.
//!
//! The degradation formulas are fixed closed forms (additive Gaussian
//! noise, streak fields, scalar atmospheric scattering, disk/line blur
//! kernels, 8×8 DCT quantization, box-down/bilinear-up resampling, gamma
//! darkening). Everything is deterministic given the spec seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    bilinear_resize, box_downsample, channel_planes, conv2d_plane, planes_to_image, Image, Plane,
};
use crate::prng::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Noise,
    Rain,
    Haze,
    DefocusBlur,
    MotionBlur,
    LowResolution,
    Jpeg,
    LowLight,
}

pub const ALL_KINDS: [DegradationKind; 8] = [
    DegradationKind::Noise,
    DegradationKind::Rain,
    DegradationKind::Haze,
    DegradationKind::DefocusBlur,
    DegradationKind::MotionBlur,
    DegradationKind::LowResolution,
    DegradationKind::Jpeg,
    DegradationKind::LowLight,
];

impl DegradationKind {
    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Noise => "noise",
            DegradationKind::Rain => "rain",
            DegradationKind::Haze => "haze",
            DegradationKind::DefocusBlur => "defocus_blur",
            DegradationKind::MotionBlur => "motion_blur",
            DegradationKind::LowResolution => "low_resolution",
            DegradationKind::Jpeg => "jpeg",
            DegradationKind::LowLight => "low_light",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ALL_KINDS
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Lookup(format!("degradation kind '{name}'")))
    }
}

/// Per-kind parameter record. Validation bounds are physical; the narrower
/// ranges used by [`DegParams::sample`] are the training defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegParams {
    Noise { sigma: f64 },
    Rain { count: u32, angle_deg: f64, intensity: f64 },
    Haze { t: f64, a: f64 },
    DefocusBlur { radius: f64 },
    MotionBlur { length: u32, angle_deg: f64 },
    LowResolution { factor: u32 },
    Jpeg { quality: u32 },
    LowLight { gamma: f64, gain: f64 },
}

impl DegParams {
    pub fn kind(&self) -> DegradationKind {
        match self {
            DegParams::Noise { .. } => DegradationKind::Noise,
            DegParams::Rain { .. } => DegradationKind::Rain,
            DegParams::Haze { .. } => DegradationKind::Haze,
            DegParams::DefocusBlur { .. } => DegradationKind::DefocusBlur,
            DegParams::MotionBlur { .. } => DegradationKind::MotionBlur,
            DegParams::LowResolution { .. } => DegradationKind::LowResolution,
            DegParams::Jpeg { .. } => DegradationKind::Jpeg,
            DegParams::LowLight { .. } => DegradationKind::LowLight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        match *self {
            DegParams::Noise { sigma } => {
                if !(0.0..=0.5).contains(&sigma) {
                    return bad(format!("noise sigma {sigma} outside [0, 0.5]"));
                }
            }
            DegParams::Rain { count, angle_deg, intensity } => {
                if count == 0 || count > 500 {
                    return bad(format!("rain count {count} outside [1, 500]"));
                }
                if !(0.0..=180.0).contains(&angle_deg) {
                    return bad(format!("rain angle {angle_deg} outside [0, 180]"));
                }
                if !(0.0..=1.0).contains(&intensity) {
                    return bad(format!("rain intensity {intensity} outside [0, 1]"));
                }
            }
            DegParams::Haze { t, a } => {
                if !(0.0..=1.0).contains(&t) {
                    return bad(format!("haze t {t} outside [0, 1]"));
                }
                if !(0.0..=1.0).contains(&a) {
                    return bad(format!("haze A {a} outside [0, 1]"));
                }
            }
            DegParams::DefocusBlur { radius } => {
                if !(1.0..=8.0).contains(&radius) {
                    return bad(format!("defocus radius {radius} outside [1, 8]"));
                }
            }
            DegParams::MotionBlur { length, angle_deg } => {
                if !(2..=31).contains(&length) {
                    return bad(format!("motion length {length} outside [2, 31]"));
                }
                if !(0.0..=180.0).contains(&angle_deg) {
                    return bad(format!("motion angle {angle_deg} outside [0, 180]"));
                }
            }
            DegParams::LowResolution { factor } => {
                if factor != 2 && factor != 4 {
                    return bad(format!("low_resolution factor {factor} must be 2 or 4"));
                }
            }
            DegParams::Jpeg { quality } => {
                if !(1..=50).contains(&quality) {
                    return bad(format!("jpeg quality {quality} outside [1, 50]"));
                }
            }
            DegParams::LowLight { gamma, gain } => {
                if !(1.0..=4.0).contains(&gamma) {
                    return bad(format!("low_light gamma {gamma} outside [1, 4]"));
                }
                if !(0.1..=1.0).contains(&gain) {
                    return bad(format!("low_light gain {gain} outside [0.1, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Mid-range defaults, used by tests and as the fallback synthesis
    /// parameters.
    pub fn default_for(kind: DegradationKind) -> DegParams {
        match kind {
            DegradationKind::Noise => DegParams::Noise { sigma: 25.0 / 255.0 },
            DegradationKind::Rain => DegParams::Rain { count: 80, angle_deg: 90.0, intensity: 0.27 },
            DegradationKind::Haze => DegParams::Haze { t: 0.6, a: 0.9 },
            DegradationKind::DefocusBlur => DegParams::DefocusBlur { radius: 3.0 },
            DegradationKind::MotionBlur => DegParams::MotionBlur { length: 9, angle_deg: 30.0 },
            DegradationKind::LowResolution => DegParams::LowResolution { factor: 2 },
            DegradationKind::Jpeg => DegParams::Jpeg { quality: 25 },
            DegradationKind::LowLight => DegParams::LowLight { gamma: 2.0, gain: 0.7 },
        }
    }

    /// Draw parameters from the default training ranges.
    pub fn sample(kind: DegradationKind, rng: &mut Prng) -> DegParams {
        DegParams::sample_ranged(kind, rng, &DegRanges::default())
    }

    /// Draw parameters from explicit ranges.
    pub fn sample_ranged(kind: DegradationKind, rng: &mut Prng, r: &DegRanges) -> DegParams {
        let int_range = |rng: &mut Prng, lo: u32, hi: u32| lo + rng.below((hi - lo + 1) as u64) as u32;
        match kind {
            DegradationKind::Noise => DegParams::Noise {
                sigma: r.noise_sigmas[rng.below(r.noise_sigmas.len() as u64) as usize] / 255.0,
            },
            DegradationKind::Rain => DegParams::Rain {
                count: int_range(rng, r.rain_count.0, r.rain_count.1),
                angle_deg: rng.range(r.rain_angle_deg.0, r.rain_angle_deg.1),
                intensity: rng.range(r.rain_intensity.0, r.rain_intensity.1),
            },
            DegradationKind::Haze => DegParams::Haze {
                t: rng.range(r.haze_t.0, r.haze_t.1),
                a: rng.range(r.haze_a.0, r.haze_a.1),
            },
            DegradationKind::DefocusBlur => {
                DegParams::DefocusBlur { radius: rng.range(r.defocus_radius.0, r.defocus_radius.1) }
            }
            DegradationKind::MotionBlur => DegParams::MotionBlur {
                length: int_range(rng, r.motion_length.0, r.motion_length.1),
                angle_deg: rng.range(0.0, 180.0),
            },
            DegradationKind::LowResolution => DegParams::LowResolution {
                factor: r.lowres_factors[rng.below(r.lowres_factors.len() as u64) as usize],
            },
            DegradationKind::Jpeg => {
                DegParams::Jpeg { quality: int_range(rng, r.jpeg_quality.0, r.jpeg_quality.1) }
            }
            DegradationKind::LowLight => DegParams::LowLight {
                gamma: rng.range(r.lowlight_gamma.0, r.lowlight_gamma.1),
                gain: rng.range(r.lowlight_gain.0, r.lowlight_gain.1),
            },
        }
    }
}

/// Sampling ranges for random degradation parameters. These are the
/// defaults used when a spec is drawn; the config file can override any of
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegRanges {
    /// Noise standard deviations in 8-bit units (divided by 255 on use).
    pub noise_sigmas: Vec<f64>,
    pub rain_count: (u32, u32),
    pub rain_angle_deg: (f64, f64),
    pub rain_intensity: (f64, f64),
    pub haze_t: (f64, f64),
    pub haze_a: (f64, f64),
    pub defocus_radius: (f64, f64),
    pub motion_length: (u32, u32),
    pub lowres_factors: Vec<u32>,
    pub jpeg_quality: (u32, u32),
    pub lowlight_gamma: (f64, f64),
    pub lowlight_gain: (f64, f64),
}

impl Default for DegRanges {
    fn default() -> Self {
        DegRanges {
            noise_sigmas: vec![15.0, 25.0, 50.0],
            rain_count: (40, 120),
            rain_angle_deg: (70.0, 110.0),
            rain_intensity: (0.15, 0.4),
            haze_t: (0.4, 0.8),
            haze_a: (0.8, 1.0),
            defocus_radius: (2.0, 5.0),
            motion_length: (5, 15),
            lowres_factors: vec![2, 4],
            jpeg_quality: (10, 50),
            lowlight_gamma: (1.5, 2.5),
            lowlight_gain: (0.5, 0.9),
        }
    }
}

impl DegRanges {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigmas.is_empty() || self.lowres_factors.is_empty() {
            return Err(Error::Config("noise_sigmas and lowres_factors must be non-empty".into()));
        }
        for (lo, hi, name) in [
            (self.rain_angle_deg.0, self.rain_angle_deg.1, "rain_angle_deg"),
            (self.rain_intensity.0, self.rain_intensity.1, "rain_intensity"),
            (self.haze_t.0, self.haze_t.1, "haze_t"),
            (self.haze_a.0, self.haze_a.1, "haze_a"),
            (self.defocus_radius.0, self.defocus_radius.1, "defocus_radius"),
            (self.lowlight_gamma.0, self.lowlight_gamma.1, "lowlight_gamma"),
            (self.lowlight_gain.0, self.lowlight_gain.1, "lowlight_gain"),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name}: lower bound exceeds upper")));
            }
        }
        if self.rain_count.0 > self.rain_count.1
            || self.motion_length.0 > self.motion_length.1
            || self.jpeg_quality.0 > self.jpeg_quality.1
        {
            return Err(Error::Config("integer range bounds are inverted".into()));
        }
        Ok(())
    }
}

/// Ordered degradation recipe: 1..3 steps, no kind repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub steps: Vec<DegParams>,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(steps: Vec<DegParams>, seed: u64) -> Result<Self> {
        if steps.is_empty() || steps.len() > 3 {
            return Err(Error::Param(format!("spec must have 1..=3 steps, got {}", steps.len())));
        }
        let mut kinds: Vec<DegradationKind> = steps.iter().map(|s| s.kind()).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != steps.len() {
            return Err(Error::Param("a degradation kind appears twice in one spec".into()));
        }
        for s in &steps {
            s.validate()?;
        }
        Ok(DegradationSpec { steps, seed })
    }

    /// Sample a spec for an ordered kind list with default-range parameters.
    pub fn sample(kinds: &[DegradationKind], seed: u64) -> Result<Self> {
        DegradationSpec::sample_ranged(kinds, seed, &DegRanges::default())
    }

    /// Sample a spec with explicit parameter ranges.
    pub fn sample_ranged(kinds: &[DegradationKind], seed: u64, ranges: &DegRanges) -> Result<Self> {
        ranges.validate()?;
        let mut rng = Prng::new(seed);
        let steps = kinds.iter().map(|&k| DegParams::sample_ranged(k, &mut rng, ranges)).collect();
        DegradationSpec::new(steps, seed)
    }

    pub fn kinds(&self) -> Vec<DegradationKind> {
        self.steps.iter().map(|s| s.kind()).collect()
    }

    /// Ground-truth degradation set (sorted, order-independent).
    pub fn gt_set(&self) -> Vec<DegradationKind> {
        let mut kinds = self.kinds();
        kinds.sort();
        kinds
    }
}

/// Apply one degradation operator. Deterministic given the image, the
/// parameters, and the generator state; output clamped into [0,1].
pub fn apply_degradation(img: &Image, params: &DegParams, rng: &mut Prng) -> Result<Image> {
    params.validate()?;
    Ok(match *params {
        DegParams::Noise { sigma } => {
            let data = img.data().iter().map(|&v| (v + sigma * rng.normal()).clamp(0.0, 1.0)).collect();
            Image::from_clamped(img.height(), img.width(), img.channels(), data)
        }
        DegParams::Rain { count, angle_deg, intensity } => rain_streaks(img, count, angle_deg, intensity, rng),
        DegParams::Haze { t, a } => img.map_clamped(|v| v * t + a * (1.0 - t)),
        DegParams::DefocusBlur { radius } => {
            let (kernel, side) = disk_kernel(radius);
            convolve_image(img, &kernel, side, side)
        }
        DegParams::MotionBlur { length, angle_deg } => {
            let (kernel, side) = line_kernel(length as usize, angle_deg);
            convolve_image(img, &kernel, side, side)
        }
        DegParams::LowResolution { factor } => {
            let planes = channel_planes(img);
            let out: Vec<Plane> = planes
                .iter()
                .map(|p| bilinear_resize(&box_downsample(p, factor as usize), p.height, p.width))
                .collect();
            planes_to_image(&out)
        }
        DegParams::Jpeg { quality } => jpeg_blocks(img, quality),
        DegParams::LowLight { gamma, gain } => img.map_clamped(|v| gain * v.powf(gamma)),
    })
}

/// Apply spec steps in order; returns the low-quality image and the
/// ground-truth degradation set.
pub fn synthesize(clean: &Image, spec: &DegradationSpec) -> Result<(Image, Vec<DegradationKind>)> {
    let mut rng = Prng::derive(spec.seed, 0x5eed);
    let mut img = clean.clone();
    for step in &spec.steps {
        img = apply_degradation(&img, step, &mut rng)?;
    }
    Ok((img, spec.gt_set()))
}

fn convolve_image(img: &Image, kernel: &[f64], kh: usize, kw: usize) -> Image {
    let planes = channel_planes(img);
    let out: Vec<Plane> = planes.iter().map(|p| conv2d_plane(p, kernel, kh, kw)).collect();
    planes_to_image(&out)
}

/// Normalized disk kernel of radius `r` (hard threshold on the circle).
fn disk_kernel(r: f64) -> (Vec<f64>, usize) {
    let ri = r.ceil() as isize;
    let side = (2 * ri + 1) as usize;
    let mut k = vec![0.0; side * side];
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if (dy * dy + dx * dx) as f64 <= r * r {
                k[((dy + ri) as usize) * side + (dx + ri) as usize] = 1.0;
            }
        }
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    (k, side)
}

/// Normalized 1-pixel-wide line kernel of the given length and angle
/// (degrees from the horizontal axis).
fn line_kernel(length: usize, angle_deg: f64) -> (Vec<f64>, usize) {
    let side = if length % 2 == 1 { length } else { length + 1 };
    let r = (side / 2) as f64;
    let mut k = vec![0.0; side * side];
    let theta = angle_deg.to_radians();
    let (dx, dy) = (theta.cos(), -theta.sin());
    let steps = (length * 4).max(8);
    let half = (length as f64 - 1.0) / 2.0;
    for i in 0..=steps {
        let t = -half + (i as f64 / steps as f64) * (length as f64 - 1.0);
        let x = (r + t * dx).round();
        let y = (r + t * dy).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < side && (y as usize) < side {
            k[y as usize * side + x as usize] = 1.0;
        }
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    (k, side)
}

/// Additive rain streak field: `count` bright segments at a shared angle,
/// per-streak position and length drawn from the generator.
fn rain_streaks(img: &Image, count: u32, angle_deg: f64, intensity: f64, rng: &mut Prng) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut overlay = vec![0.0f64; h * w];
    let theta = angle_deg.to_radians();
    let (dx, dy) = (theta.cos(), -theta.sin());
    for _ in 0..count {
        let x0 = rng.uniform() * w as f64;
        let y0 = rng.uniform() * h as f64;
        let len = rng.range(8.0, 24.0);
        let steps = len.ceil() as usize;
        for s in 0..steps {
            let t = s as f64;
            let x = (x0 + t * dx).round() as isize;
            let y = (y0 + t * dy).round() as isize;
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                overlay[y as usize * w + x as usize] = intensity;
            }
        }
    }
    let mut data = img.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            let add = overlay[y * w + x];
            if add > 0.0 {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    data[i] = (data[i] + add).clamp(0.0, 1.0);
                }
            }
        }
    }
    Image::from_clamped(h, w, c, data)
}

/// Standard JPEG luminance quantization table (Annex K).
const JPEG_QTABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// 8×8 DCT-II/quantize/inverse per channel; the image is padded to block
/// multiples by edge replication. Quality q<=50 scales the table by 50/q.
fn jpeg_blocks(img: &Image, quality: u32) -> Image {
    let scale = 50.0 / quality as f64;
    // Precompute the orthonormal DCT basis: b[u][x] = c(u) cos((2x+1)uπ/16).
    let mut basis = [[0.0f64; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, b) in row.iter_mut().enumerate() {
            *b = cu * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }

    let planes = channel_planes(img);
    let (h, w) = (img.height(), img.width());
    let bh = h.div_ceil(8) * 8;
    let bw = w.div_ceil(8) * 8;
    let out: Vec<Plane> = planes
        .iter()
        .map(|p| {
            // Edge-replicated padded copy in the 0..255 shifted domain.
            let mut padded = vec![0.0f64; bh * bw];
            for y in 0..bh {
                for x in 0..bw {
                    let v = p.get(y.min(h - 1), x.min(w - 1));
                    padded[y * bw + x] = v * 255.0 - 128.0;
                }
            }
            for by in (0..bh).step_by(8) {
                for bx in (0..bw).step_by(8) {
                    let mut block = [[0.0f64; 8]; 8];
                    for y in 0..8 {
                        for x in 0..8 {
                            block[y][x] = padded[(by + y) * bw + bx + x];
                        }
                    }
                    // forward DCT
                    let mut coef = [[0.0f64; 8]; 8];
                    for (u, cr) in coef.iter_mut().enumerate() {
                        for (v, cv) in cr.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for (y, br) in block.iter().enumerate() {
                                for (x, &bv) in br.iter().enumerate() {
                                    acc += bv * basis[u][y] * basis[v][x];
                                }
                            }
                            *cv = acc;
                        }
                    }
                    // quantize / dequantize
                    for u in 0..8 {
                        for v in 0..8 {
                            let q = (JPEG_QTABLE[u * 8 + v] * scale).max(1.0);
                            coef[u][v] = (coef[u][v] / q).round() * q;
                        }
                    }
                    // inverse DCT
                    for y in 0..8 {
                        for x in 0..8 {
                            let mut acc = 0.0;
                            for (u, cr) in coef.iter().enumerate() {
                                for (v, &cv) in cr.iter().enumerate() {
                                    acc += cv * basis[u][y] * basis[v][x];
                                }
                            }
                            padded[(by + y) * bw + bx + x] = acc;
                        }
                    }
                }
            }
            let mut outp = Plane::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    outp.data[y * w + x] = (padded[y * bw + x] + 128.0) / 255.0;
                }
            }
            outp
        })
        .collect();
    planes_to_image(&out)
}

/// Combination table: kind-sets grouped by size with tier sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboTable {
    pub singles: Vec<Vec<DegradationKind>>,
    pub duals: Vec<Vec<DegradationKind>>,
    pub triples: Vec<Vec<DegradationKind>>,
    pub weights: (f64, f64, f64),
}

impl ComboTable {
    /// All 1/2/3-subsets of the eight kinds with the default 1:3:5 weights.
    /// Sets are ordered combinations in canonical enumeration order.
    pub fn full() -> ComboTable {
        let mut singles = Vec::new();
        let mut duals = Vec::new();
        let mut triples = Vec::new();
        let n = ALL_KINDS.len();
        for i in 0..n {
            singles.push(vec![ALL_KINDS[i]]);
            for j in i + 1..n {
                duals.push(vec![ALL_KINDS[i], ALL_KINDS[j]]);
                for k in j + 1..n {
                    triples.push(vec![ALL_KINDS[i], ALL_KINDS[j], ALL_KINDS[k]]);
                }
            }
        }
        ComboTable { singles, duals, triples, weights: (1.0, 3.0, 5.0) }
    }

    /// Every combination in listed tier order (singles, duals, triples).
    pub fn all_combos(&self) -> Vec<Vec<DegradationKind>> {
        self.singles
            .iter()
            .chain(self.duals.iter())
            .chain(self.triples.iter())
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (ws, wd, wt) = self.weights;
        if ws < 0.0 || wd < 0.0 || wt < 0.0 || ws + wd + wt <= 0.0 {
            return Err(Error::Config("combo weights must be non-negative and not all zero".into()));
        }
        let checks = [(ws, self.singles.len(), "single"), (wd, self.duals.len(), "dual"), (wt, self.triples.len(), "triple")];
        for (w, len, name) in checks {
            if w > 0.0 && len == 0 {
                return Err(Error::Config(format!("{name} tier has weight {w} but no combinations")));
            }
        }
        for (combo, size) in self
            .singles
            .iter()
            .map(|c| (c, 1))
            .chain(self.duals.iter().map(|c| (c, 2)))
            .chain(self.triples.iter().map(|c| (c, 3)))
        {
            if combo.len() != size {
                return Err(Error::Config(format!("combo {combo:?} in wrong tier")));
            }
            let mut sorted = combo.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != combo.len() {
                return Err(Error::Config(format!("combo {combo:?} repeats a kind")));
            }
        }
        Ok(())
    }
}

/// Draw a kind-set: tier with probability proportional to its weight,
/// uniform within the tier.
pub fn sample_combo(table: &ComboTable, rng: &mut Prng) -> Result<Vec<DegradationKind>> {
    table.validate()?;
    let (ws, wd, wt) = table.weights;
    let total = ws + wd + wt;
    let u = rng.uniform() * total;
    let tier = if u < ws {
        &table.singles
    } else if u < ws + wd {
        &table.duals
    } else {
        &table.triples
    };
    Ok(tier[rng.below(tier.len() as u64) as usize].clone())
}

/// Named benchmark presets.
///
/// `empirical8` is the eight-combination study table (blur mapped to
/// defocus blur); `groupA`/`groupB` are dual-degradation benchmark sets
/// and `groupC` the triple-degradation set.
pub fn preset(name: &str) -> Result<ComboTable> {
    use DegradationKind::*;
    let dual = |a, b| vec![a, b];
    let triple = |a, b, c| vec![a, b, c];
    match name {
        "empirical8" => Ok(ComboTable {
            singles: vec![],
            duals: vec![
                dual(Rain, Noise),
                dual(Rain, Haze),
                dual(Haze, Noise),
                dual(Rain, DefocusBlur),
                dual(Haze, DefocusBlur),
                dual(DefocusBlur, Noise),
            ],
            triples: vec![triple(Rain, Haze, Noise), triple(Rain, Haze, DefocusBlur)],
            weights: (0.0, 3.0, 5.0),
        }),
        "groupA" => Ok(ComboTable {
            singles: vec![],
            duals: vec![
                dual(Rain, Haze),
                dual(MotionBlur, LowResolution),
                dual(LowLight, Noise),
                dual(DefocusBlur, Jpeg),
                dual(Noise, Jpeg),
                dual(Rain, LowResolution),
                dual(MotionBlur, LowLight),
                dual(DefocusBlur, Haze),
            ],
            triples: vec![],
            weights: (0.0, 1.0, 0.0),
        }),
        "groupB" => Ok(ComboTable {
            singles: vec![],
            duals: vec![
                dual(Haze, Noise),
                dual(DefocusBlur, LowResolution),
                dual(MotionBlur, Jpeg),
                dual(Rain, LowLight),
            ],
            triples: vec![],
            weights: (0.0, 1.0, 0.0),
        }),
        "groupC" => Ok(ComboTable {
            singles: vec![],
            duals: vec![],
            triples: vec![
                triple(Haze, MotionBlur, LowResolution),
                triple(Rain, Noise, LowResolution),
                triple(LowLight, DefocusBlur, Jpeg),
                triple(MotionBlur, DefocusBlur, Noise),
            ],
            weights: (0.0, 0.0, 1.0),
        }),
        "full" => Ok(ComboTable::full()),
        other => Err(Error::Lookup(format!(
            "preset '{other}' (expected empirical8, groupA, groupB, groupC, full)"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanKind {
    Gradient,
    Checker,
    ValueNoiseTexture,
    Shapes,
}

pub const ALL_CLEAN_KINDS: [CleanKind; 4] =
    [CleanKind::Gradient, CleanKind::Checker, CleanKind::ValueNoiseTexture, CleanKind::Shapes];

impl CleanKind {
    pub fn name(self) -> &'static str {
        match self {
            CleanKind::Gradient => "gradient",
            CleanKind::Checker => "checker",
            CleanKind::ValueNoiseTexture => "value_noise_texture",
            CleanKind::Shapes => "shapes",
        }
    }
}

/// Procedural clean image: `size`×`size`, 3 channels, deterministic per
/// generator state.
pub fn gen_clean(kind: CleanKind, size: usize, rng: &mut Prng) -> Result<Image> {
    if size < 32 {
        return Err(Error::Param(format!("clean image size {size} below minimum 32")));
    }
    let img = match kind {
        CleanKind::Gradient => {
            let ax: f64 = rng.range(0.3, 0.7) * if rng.below(2) == 0 { 1.0 } else { -1.0 };
            let ay: f64 = rng.range(0.3, 0.7) * if rng.below(2) == 0 { 1.0 } else { -1.0 };
            let phase: Vec<f64> = (0..3).map(|_| rng.range(0.0, 0.25)).collect();
            let mut data = vec![0.0; size * size * 3];
            for y in 0..size {
                for x in 0..size {
                    let g = ax * x as f64 / (size - 1) as f64 + ay * y as f64 / (size - 1) as f64;
                    for c in 0..3 {
                        let v = 0.5 + 0.4 * (g + phase[c] - (ax + ay) / 2.0);
                        data[(y * size + x) * 3 + c] = v.clamp(0.05, 0.95);
                    }
                }
            }
            Image::from_clamped(size, size, 3, data)
        }
        CleanKind::Checker => {
            let mut data = vec![0.0; size * size * 3];
            for y in 0..size {
                for x in 0..size {
                    let on = ((y / 8) + (x / 8)) % 2 == 0;
                    let v = if on { 0.8 } else { 0.2 };
                    for c in 0..3 {
                        data[(y * size + x) * 3 + c] = v;
                    }
                }
            }
            Image::from_clamped(size, size, 3, data)
        }
        CleanKind::ValueNoiseTexture => {
            let mut planes = Vec::with_capacity(3);
            for _ in 0..3 {
                planes.push(value_noise(size, rng));
            }
            planes_to_image(&planes)
        }
        CleanKind::Shapes => {
            let bg = rng.range(0.3, 0.7);
            let mut planes = vec![Plane { height: size, width: size, data: vec![bg; size * size] }; 3];
            let n_shapes = 5 + rng.below(6) as usize;
            for _ in 0..n_shapes {
                let color: Vec<f64> = (0..3).map(|_| rng.range(0.1, 0.9)).collect();
                let cx = rng.uniform() * size as f64;
                let cy = rng.uniform() * size as f64;
                let r = rng.range(size as f64 * 0.05, size as f64 * 0.25);
                let is_disk = rng.below(2) == 0;
                for y in 0..size {
                    for x in 0..size {
                        let inside = if is_disk {
                            let dy = y as f64 - cy;
                            let dx = x as f64 - cx;
                            dy * dy + dx * dx <= r * r
                        } else {
                            (y as f64 - cy).abs() <= r && (x as f64 - cx).abs() <= r
                        };
                        if inside {
                            for (c, p) in planes.iter_mut().enumerate() {
                                p.data[y * size + x] = color[c];
                            }
                        }
                    }
                }
            }
            planes_to_image(&planes)
        }
    };
    Ok(img)
}

/// Multi-octave value noise in [0.15, 0.85].
fn value_noise(size: usize, rng: &mut Prng) -> Plane {
    let mut acc = Plane::zeros(size, size);
    let octaves = [(16usize, 1.0f64), (8, 0.5), (4, 0.25), (2, 0.15)];
    for &(cell, weight) in &octaves {
        let gs = size / cell + 2;
        let grid: Vec<f64> = (0..gs * gs).map(|_| rng.uniform()).collect();
        for y in 0..size {
            for x in 0..size {
                let fy = y as f64 / cell as f64;
                let fx = x as f64 / cell as f64;
                let y0 = fy.floor() as usize;
                let x0 = fx.floor() as usize;
                let wy = fy - y0 as f64;
                let wx = fx - x0 as f64;
                let v = grid[y0 * gs + x0] * (1.0 - wy) * (1.0 - wx)
                    + grid[y0 * gs + x0 + 1] * (1.0 - wy) * wx
                    + grid[(y0 + 1) * gs + x0] * wy * (1.0 - wx)
                    + grid[(y0 + 1) * gs + x0 + 1] * wy * wx;
                acc.data[y * size + x] += weight * v;
            }
        }
    }
    let total: f64 = octaves.iter().map(|&(_, w)| w).sum();
    for v in &mut acc.data {
        *v = 0.15 + 0.7 * (*v / total);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{psnr, ssim};

    fn texture(seed: u64) -> Image {
        let mut rng = Prng::new(seed);
        gen_clean(CleanKind::ValueNoiseTexture, 64, &mut rng).unwrap()
    }

    #[test]
    fn haze_limits() {
        let img = texture(1);
        let mut rng = Prng::new(0);
        let same = apply_degradation(&img, &DegParams::Haze { t: 1.0, a: 0.5 }, &mut rng).unwrap();
        assert_eq!(img.data(), same.data());
        let flat = apply_degradation(&img, &DegParams::Haze { t: 0.0, a: 0.9 }, &mut rng).unwrap();
        assert!(flat.data().iter().all(|&v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn noise_sample_std_near_sigma() {
        let img = Image::constant(128, 128, 1, 0.5).unwrap();
        let sigma = 25.0 / 255.0;
        let mut rng = Prng::new(9);
        let noisy = apply_degradation(&img, &DegParams::Noise { sigma }, &mut rng).unwrap();
        let p = noisy.luma();
        let std = p.std();
        assert!(
            (std - sigma).abs() / sigma < 0.10,
            "sample std {std} vs sigma {sigma}"
        );
    }

    #[test]
    fn out_of_range_params_rejected() {
        let img = texture(2);
        let mut rng = Prng::new(0);
        assert!(apply_degradation(&img, &DegParams::Noise { sigma: 0.9 }, &mut rng).is_err());
        assert!(apply_degradation(&img, &DegParams::Jpeg { quality: 0 }, &mut rng).is_err());
        assert!(apply_degradation(&img, &DegParams::LowResolution { factor: 3 }, &mut rng).is_err());
    }

    #[test]
    fn synthesize_collects_gt_set_and_is_deterministic() {
        let clean = texture(3);
        let spec = DegradationSpec::sample(
            &[DegradationKind::Rain, DegradationKind::Haze],
            42,
        )
        .unwrap();
        let (lq1, gt1) = synthesize(&clean, &spec).unwrap();
        let (lq2, gt2) = synthesize(&clean, &spec).unwrap();
        assert_eq!(lq1.data(), lq2.data());
        assert_eq!(gt1, gt2);
        let mut expect = vec![DegradationKind::Rain, DegradationKind::Haze];
        expect.sort();
        assert_eq!(gt1, expect);
        assert_ne!(lq1.data(), clean.data());
    }

    #[test]
    fn spec_rejects_duplicates_and_bad_lengths() {
        assert!(DegradationSpec::new(vec![], 0).is_err());
        let n = DegParams::default_for(DegradationKind::Noise);
        assert!(DegradationSpec::new(vec![n, n], 0).is_err());
        let r = DegParams::default_for(DegradationKind::Rain);
        let h = DegParams::default_for(DegradationKind::Haze);
        let d = DegParams::default_for(DegradationKind::DefocusBlur);
        assert!(DegradationSpec::new(vec![n, r, h, d], 0).is_err());
    }

    #[test]
    fn order_sensitivity_rain_haze() {
        let clean = texture(4);
        let ab = DegradationSpec::sample(&[DegradationKind::Rain, DegradationKind::Haze], 7).unwrap();
        let ba = DegradationSpec::sample(&[DegradationKind::Haze, DegradationKind::Rain], 7).unwrap();
        let (img_ab, gt_ab) = synthesize(&clean, &ab).unwrap();
        let (img_ba, gt_ba) = synthesize(&clean, &ba).unwrap();
        assert_ne!(img_ab.data(), img_ba.data());
        // the ground-truth set is order-independent
        assert_eq!(gt_ab, gt_ba);
    }

    #[test]
    fn every_degradation_hurts_quality() {
        let clean = texture(5);
        for kind in ALL_KINDS {
            let params = DegParams::default_for(kind);
            let mut rng = Prng::new(11);
            let degraded = apply_degradation(&clean, &params, &mut rng).unwrap();
            let p = psnr(&degraded, &clean).unwrap();
            let s = ssim(&degraded, &clean).unwrap();
            assert!(
                p < 100.0 && (p < 99.0 || s < 1.0 - 1e-9),
                "{} did not reduce quality (psnr {p}, ssim {s})",
                kind.name()
            );
            assert!(p < 45.0, "{} barely changed the image (psnr {p})", kind.name());
        }
    }

    #[test]
    fn combo_ratio_statistics() {
        let table = ComboTable::full();
        let mut rng = Prng::new(123);
        let n = 9000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let combo = sample_combo(&table, &mut rng).unwrap();
            counts[combo.len() - 1] += 1;
        }
        let expect = [1.0 / 9.0, 3.0 / 9.0, 5.0 / 9.0];
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            assert!(
                (freq - expect[i]).abs() < 0.02,
                "tier {i}: freq {freq} expect {}",
                expect[i]
            );
        }
    }

    #[test]
    fn combo_single_only_weights() {
        let mut table = ComboTable::full();
        table.weights = (1.0, 0.0, 0.0);
        let mut rng = Prng::new(5);
        for _ in 0..100 {
            assert_eq!(sample_combo(&table, &mut rng).unwrap().len(), 1);
        }
    }

    #[test]
    fn combo_tier_chi_square() {
        // One combo per tier: tier choice is a pure multinomial over the
        // (1,3,5)/9 weights; chi-square with 2 dof at alpha=0.01 is 9.21.
        let table = ComboTable {
            singles: vec![vec![DegradationKind::Noise]],
            duals: vec![vec![DegradationKind::Rain, DegradationKind::Haze]],
            triples: vec![vec![
                DegradationKind::Rain,
                DegradationKind::Haze,
                DegradationKind::Noise,
            ]],
            weights: (1.0, 3.0, 5.0),
        };
        let mut rng = Prng::new(777);
        let n = 9000usize;
        let mut counts = [0f64; 3];
        for _ in 0..n {
            counts[sample_combo(&table, &mut rng).unwrap().len() - 1] += 1.0;
        }
        let expect = [n as f64 / 9.0, n as f64 * 3.0 / 9.0, n as f64 * 5.0 / 9.0];
        let chi2: f64 = counts
            .iter()
            .zip(&expect)
            .map(|(o, e)| (o - e) * (o - e) / e)
            .sum();
        assert!(chi2 < 9.21, "chi-square {chi2}");
    }

    #[test]
    fn empty_tier_with_weight_is_config_error() {
        let table = ComboTable { singles: vec![], duals: vec![], triples: vec![], weights: (1.0, 0.0, 0.0) };
        let mut rng = Prng::new(0);
        assert!(matches!(sample_combo(&table, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn range_overrides_respected() {
        let mut ranges = DegRanges::default();
        ranges.noise_sigmas = vec![50.0];
        ranges.haze_t = (0.5, 0.5);
        for seed in 0..20 {
            let spec = DegradationSpec::sample_ranged(
                &[DegradationKind::Noise, DegradationKind::Haze],
                seed,
                &ranges,
            )
            .unwrap();
            match spec.steps[0] {
                DegParams::Noise { sigma } => assert!((sigma - 50.0 / 255.0).abs() < 1e-12),
                _ => panic!("expected noise step"),
            }
            match spec.steps[1] {
                DegParams::Haze { t, .. } => assert!((t - 0.5).abs() < 1e-12),
                _ => panic!("expected haze step"),
            }
        }
        let mut bad = DegRanges::default();
        bad.jpeg_quality = (40, 10);
        assert!(DegradationSpec::sample_ranged(&[DegradationKind::Jpeg], 0, &bad).is_err());
    }

    #[test]
    fn preset_shapes() {
        let e8 = preset("empirical8").unwrap();
        assert_eq!(e8.duals.len(), 6);
        assert_eq!(e8.triples.len(), 2);
        assert!(e8.singles.is_empty());

        let a = preset("groupA").unwrap();
        assert_eq!(a.duals.len(), 8);
        let b = preset("groupB").unwrap();
        assert_eq!(b.all_combos().len(), 4);
        let c = preset("groupC").unwrap();
        assert_eq!(c.triples.len(), 4);
        let want = vec![
            DegradationKind::Haze,
            DegradationKind::MotionBlur,
            DegradationKind::LowResolution,
        ];
        assert!(c.triples.contains(&want));
        assert!(preset("groupD").is_err());
    }

    #[test]
    fn checker_pattern_values() {
        let mut rng = Prng::new(1);
        let img = gen_clean(CleanKind::Checker, 64, &mut rng).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.8);
        assert_eq!(img.get(0, 8, 0), 0.2);
        assert_eq!(img.get(8, 0, 0), 0.2);
        assert_eq!(img.get(8, 8, 0), 0.8);
    }

    #[test]
    fn gen_clean_deterministic_and_textured() {
        for kind in ALL_CLEAN_KINDS {
            let a = gen_clean(kind, 64, &mut Prng::new(33)).unwrap();
            let b = gen_clean(kind, 64, &mut Prng::new(33)).unwrap();
            assert_eq!(a.data(), b.data());
            let (sharp, _) = crate::metrics::nr_metrics(&a);
            assert!(sharp > 0.0, "{:?} produced a flat image", kind);
        }
        assert!(gen_clean(CleanKind::Gradient, 16, &mut Prng::new(0)).is_err());
    }

    #[test]
    fn jpeg_introduces_blocking_but_stays_close() {
        let clean = texture(6);
        let mut rng = Prng::new(0);
        let out = apply_degradation(&clean, &DegParams::Jpeg { quality: 10 }, &mut rng).unwrap();
        let p = psnr(&out, &clean).unwrap();
        assert!(p > 15.0 && p < 45.0, "jpeg q10 psnr {p}");
    }
}
