//! Training-data schemes: blur-aware patch mining, appearance adjustment and
//! ground-truth pasting into the noisy short input.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::isp::{simulate_pair, IspConfig, NoiseParams, PairDraw};
use crate::rng::{stream, Rng, Role};
use crate::synth::{Crop, ExposureTuple, Manifest, ManifestEntry};
use crate::tensor::Tensor;

pub const VARIANCE_EPS: f64 = 1e-8;
pub const IA_EPS: f32 = 1e-8;

/// Augmentation and selection settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_ia: f64,
    pub p_ca: f64,
    pub p_cutnoise: f64,
    pub gammas: Vec<f64>,
    pub ca_a: (f64, f64),
    pub ca_b: (f64, f64),
    /// Training crop side.
    pub crop: usize,
    /// CutNoise side for a 256-pixel crop; scaled linearly with `crop`.
    pub cutnoise_side_ref: usize,
    pub varmap_k: usize,
    pub percentile: f64,
    pub samples_per_map: usize,
    pub select_side: usize,
    /// When false the noisy inputs equal the adjusted clean images.
    pub noise: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_ia: 0.3,
            p_ca: 0.5,
            p_cutnoise: 0.3,
            gammas: [0.6, 0.7, 0.75, 0.8, 0.9].iter().map(|d| 1.0 / d).collect(),
            ca_a: (0.3, 0.6),
            ca_b: (0.001, 0.01),
            crop: 64,
            cutnoise_side_ref: 120,
            varmap_k: 8,
            percentile: 5.0,
            samples_per_map: 1000,
            select_side: 64,
            noise: true,
        }
    }
}

pub const CUTNOISE_REF_CROP: usize = 256;

impl AugmentConfig {
    /// Everything off: the sample is the cropped clean tuple.
    pub fn disabled() -> Self {
        Self {
            p_ia: 0.0,
            p_ca: 0.0,
            p_cutnoise: 0.0,
            noise: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_ia", self.p_ia), ("p_ca", self.p_ca), ("p_cutnoise", self.p_cutnoise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} = {p} is not a probability")));
            }
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g > 1.0)) {
            return Err(invalid("illumination gammas must be non-empty and greater than 1"));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.ca_a) || !ordered(self.ca_b) {
            return Err(invalid("colour adjustment ranges must be ordered"));
        }
        if self.crop == 0 || self.varmap_k == 0 || self.select_side == 0 {
            return Err(invalid("crop, varmap_k and select_side must be positive"));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(invalid("percentile must lie in [0, 100]"));
        }
        Ok(())
    }

    pub fn cutnoise_side(&self) -> usize {
        (self.cutnoise_side_ref as f64 * self.crop as f64 / CUTNOISE_REF_CROP as f64).round() as usize
    }
}

fn luminance(x: &Tensor<f32>, n: usize) -> Result<Vec<f64>> {
    let s = x.shape();
    match s.c {
        1 => Ok(x.plane(n, 0).iter().map(|&v| v as f64).collect()),
        3 => {
            let (r, g, b) = (x.plane(n, 0), x.plane(n, 1), x.plane(n, 2));
            Ok((0..s.plane())
                .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
                .collect())
        }
        _ => Err(Error::shape("variance_map", format!("expected 1 or 3 channels, got {s}"))),
    }
}

fn cell_variance(plane: &[f64], w: usize, y0: usize, x0: usize, k: usize) -> f64 {
    let mut sum = 0.0;
    for y in y0..y0 + k {
        sum += plane[y * w + x0..y * w + x0 + k].iter().sum::<f64>();
    }
    let mean = sum / (k * k) as f64;
    let mut acc = 0.0;
    for y in y0..y0 + k {
        acc += plane[y * w + x0..y * w + x0 + k].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    acc / (k * k) as f64
}

/// Per-cell blur score `min(Var(l) / max(Var(l_last), eps), 1)` on luminance,
/// expanded back to full resolution. Smaller means blurrier.
pub fn variance_map(l: &Tensor<f32>, l_last: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let s = l.shape();
    l_last.expect_shape(s, "variance_map")?;
    if k == 0 || s.h % k != 0 || s.w % k != 0 {
        return Err(Error::shape("variance_map", format!("extents of {s} not divisible by window {k}")));
    }
    let mut out = Tensor::zeros(s.with_c(1));
    for n in 0..s.n {
        let (a, b) = (luminance(l, n)?, luminance(l_last, n)?);
        for cy in (0..s.h).step_by(k) {
            for cx in (0..s.w).step_by(k) {
                let ratio = cell_variance(&a, s.w, cy, cx, k) / cell_variance(&b, s.w, cy, cx, k).max(VARIANCE_EPS);
                let v = ratio.min(1.0) as f32;
                for y in cy..cy + k {
                    for x in cx..cx + k {
                        out.set(n, 0, y, x, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One sampled square and its mean map value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Square {
    pub map: usize,
    pub y: usize,
    pub x: usize,
    pub mean: f64,
}

/// Mean of a map over a square, summed row by row in `f64`.
pub fn square_mean(map: &Tensor<f32>, y: usize, x: usize, side: usize) -> f64 {
    let w = map.shape().w;
    let plane = map.plane(0, 0);
    let mut sum = 0.0f64;
    for yy in y..y + side {
        for &v in &plane[yy * w + x..yy * w + x + side] {
            sum += v as f64;
        }
    }
    sum / (side * side) as f64
}

/// Square positions for one map: `count` draws of `(y, x)`, each uniform over
/// the in-bounds range, y first.
pub fn draw_squares(rng: &mut Rng, h: usize, w: usize, side: usize, count: usize) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| (rng.random_range(0..=h - side), rng.random_range(0..=w - side)))
        .collect()
}

/// Linearly interpolated percentile of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut a, rest) = v.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return a;
    }
    let b = rest.iter().copied().fold(f64::INFINITY, f64::min);
    a + frac * (b - a)
}

/// Outcome of blur-aware patch mining.
#[derive(Clone, Debug)]
pub struct Selection {
    pub threshold: f64,
    /// Every pooled mean was equal, so no square can fall below the threshold.
    pub degenerate: bool,
    /// Squares used to set the threshold.
    pub threshold_squares: Vec<Square>,
    /// Freshly drawn candidate squares.
    pub candidates: Vec<Square>,
    /// Candidates whose mean lies strictly below the threshold, in draw order.
    pub selected: Vec<Square>,
}

fn sample_map(map: &Tensor<f32>, index: usize, side: usize, count: usize, rng: &mut Rng) -> Vec<Square> {
    let s = map.shape();
    draw_squares(rng, s.h, s.w, side, count)
        .into_iter()
        .map(|(y, x)| Square {
            map: index,
            y,
            x,
            mean: square_mean(map, y, x, side),
        })
        .collect()
}

/// Samples squares on every map, sets the threshold at the configured
/// percentile of the pooled means, then keeps fresh squares below it.
pub fn select_blurry_patches(maps: &[Tensor<f32>], cfg: &AugmentConfig, seed: u64) -> Result<Selection> {
    cfg.validate()?;
    if maps.is_empty() || cfg.samples_per_map == 0 {
        return Err(invalid("selection needs at least one map and one sample per map"));
    }
    let side = cfg.select_side;
    for (i, m) in maps.iter().enumerate() {
        let s = m.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::shape("select_blurry_patches", format!("map {i} is {s}, expected 1x1xHxW")));
        }
        if side > s.h || side > s.w {
            return Err(invalid(format!("square side {side} exceeds map {i} of size {}x{}", s.h, s.w)));
        }
    }
    let pass = |role: Role| -> Vec<Square> {
        maps.par_iter()
            .enumerate()
            .map(|(i, m)| sample_map(m, i, side, cfg.samples_per_map, &mut stream(seed, i as u64, role)))
            .collect::<Vec<_>>()
            .concat()
    };
    let threshold_squares = pass(Role::SelectThreshold);
    let pooled: Vec<f64> = threshold_squares.iter().map(|s| s.mean).collect();
    let threshold = percentile(&pooled, cfg.percentile);
    let (lo, hi) = pooled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let candidates = pass(Role::SelectDraw);
    let selected = candidates.iter().copied().filter(|s| s.mean < threshold).collect();
    Ok(Selection {
        threshold,
        degenerate: lo == hi,
        threshold_squares,
        candidates,
        selected,
    })
}

/// Variance maps of every manifest entry.
pub fn manifest_variance_maps(manifest: &Manifest, k: usize) -> Result<Vec<Tensor<f32>>> {
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let t = manifest.load_tuple(i)?;
            variance_map(&t.long, &t.l_last, k)
        })
        .collect()
}

/// Appends one cropped entry per selected square.
pub fn append_selection(manifest: &Manifest, sel: &Selection, side: usize) -> Manifest {
    let mut out = manifest.clone();
    for (k, sq) in sel.selected.iter().enumerate() {
        let base = &manifest.entries[sq.map];
        let offset = base.crop.map_or((0, 0), |c| (c.y, c.x));
        out.entries.push(ManifestEntry {
            id: format!("{}_sel{k:05}", base.id),
            crop: Some(Crop {
                y: offset.0 + sq.y,
                x: offset.1 + sq.x,
                side,
            }),
            ..base.clone()
        });
    }
    out
}

/// `max(u, eps)^g`.
pub fn illumination_adjust(x: &Tensor<f32>, g: f64) -> Tensor<f32> {
    x.map(|u| (u.max(IA_EPS) as f64).powf(g) as f32)
}

/// `a * s + b`, unclamped.
pub fn color_adjust(s: &Tensor<f32>, a: f64, b: f64) -> Tensor<f32> {
    s.map(|v| (a * v as f64 + b) as f32)
}

/// Pastes a `side`-square of `gt` into `s_n` at `(y, x)`; returns the result and the mask.
pub fn cut_noise_at(s_n: &Tensor<f32>, gt: &Tensor<f32>, y: usize, x: usize, side: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = s_n.shape();
    gt.expect_shape(s, "cut_noise")?;
    if y + side > s.h || x + side > s.w {
        return Err(invalid(format!("CutNoise square {side} at ({y}, {x}) leaves the {}x{} image", s.h, s.w)));
    }
    let inside = |yy: usize, xx: usize| yy >= y && yy < y + side && xx >= x && xx < x + side;
    let mask = Tensor::from_fn(s.with_c(1), |_, _, yy, xx| if inside(yy, xx) { 1.0 } else { 0.0 });
    let out = Tensor::from_fn(s, |n, c, yy, xx| if inside(yy, xx) { gt.at(n, c, yy, xx) } else { s_n.at(n, c, yy, xx) });
    Ok((out, mask))
}

/// CutNoise at a uniformly random in-bounds position.
pub fn cut_noise(s_n: &Tensor<f32>, gt: &Tensor<f32>, side: usize, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = s_n.shape();
    if side > s.h || side > s.w {
        return Err(invalid(format!("CutNoise side {side} exceeds the {}x{} image", s.h, s.w)));
    }
    let y = rng.random_range(0..=s.h - side);
    let x = rng.random_range(0..=s.w - side);
    cut_noise_at(s_n, gt, y, x, side)
}

/// Which optional steps fired for a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Applied {
    pub crop: (usize, usize),
    pub illumination: Option<f64>,
    pub color: Option<(f64, f64)>,
    pub noise: Option<PairDraw>,
    pub cutnoise: Option<(usize, usize)>,
}

/// Network-ready sample: noisy inputs and the clean target.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub l_n: Tensor<f32>,
    pub s_n: Tensor<f32>,
    pub z: Tensor<f32>,
    pub applied: Applied,
}

/// Crop, illumination adjustment, colour adjustment of the short image,
/// noise simulation and CutNoise, in that order. The target `z = s_first`
/// only receives the crop and the illumination adjustment. Each step draws
/// from its own stream keyed by `(seed, index)`.
pub fn apply_augmentations(
    tuple: &ExposureTuple,
    cfg: &AugmentConfig,
    isp: &IspConfig,
    np: &NoiseParams,
    seed: u64,
    index: u64,
) -> Result<TrainingSample> {
    cfg.validate()?;
    let s = tuple.shape();
    if cfg.crop > s.h || cfg.crop > s.w {
        return Err(invalid(format!("crop {} exceeds tuple size {}x{}", cfg.crop, s.h, s.w)));
    }
    let mut applied = Applied::default();

    let mut rng = stream(seed, index, Role::Crop);
    let (cy, cx) = (rng.random_range(0..=s.h - cfg.crop), rng.random_range(0..=s.w - cfg.crop));
    applied.crop = (cy, cx);
    let mut t = tuple.crop(cy, cx, cfg.crop)?;

    let mut rng = stream(seed, index, Role::Illumination);
    if rng.random_bool(cfg.p_ia) {
        let g = cfg.gammas[rng.random_range(0..cfg.gammas.len())];
        t.long = illumination_adjust(&t.long, g);
        t.short = illumination_adjust(&t.short, g);
        t.s_first = illumination_adjust(&t.s_first, g);
        applied.illumination = Some(g);
    }

    let mut rng = stream(seed, index, Role::Color);
    if rng.random_bool(cfg.p_ca) {
        let a = rng.random_range(cfg.ca_a.0..=cfg.ca_a.1);
        let b = rng.random_range(cfg.ca_b.0..=cfg.ca_b.1);
        t.short = color_adjust(&t.short, a, b);
        applied.color = Some((a, b));
    }

    let (l_n, s_n) = if cfg.noise {
        t.short = t.short.clamp01();
        let (l_n, s_n, draw) = simulate_pair(&t, isp, np, &mut stream(seed, index, Role::Noise))?;
        applied.noise = Some(draw);
        (l_n, s_n)
    } else {
        (t.long.clamp01(), t.short.clamp01())
    };

    let mut rng = stream(seed, index, Role::CutNoise);
    let side = cfg.cutnoise_side();
    let s_n = if side > 0 && rng.random_bool(cfg.p_cutnoise) {
        let sh = s_n.shape();
        if side > sh.h || side > sh.w {
            return Err(invalid(format!("CutNoise side {side} exceeds crop {}", cfg.crop)));
        }
        let (y, x) = (rng.random_range(0..=sh.h - side), rng.random_range(0..=sh.w - side));
        applied.cutnoise = Some((y, x));
        cut_noise_at(&s_n, &t.s_first, y, x, side)?.0
    } else {
        s_n
    };

    Ok(TrainingSample {
        l_n,
        s_n,
        z: t.s_first,
        applied,
    })
}

/// Variance map rendered as a grayscale image for inspection.
pub fn heatmap(map: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = map.shape();
    if s.c != 1 {
        return Err(Error::shape("heatmap", format!("expected one channel, got {s}")));
    }
    Ok(map.sample_tensor(0).clamp01())
}
