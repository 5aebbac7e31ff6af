//! Simulated camera pipeline: sRGB to RGGB RAW and back, with ISO-dependent
//! sensor noise injected in the RAW domain.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::synth::ExposureTuple;
use crate::tensor::{Shape, Tensor};

/// Fixed ISP constants for one image (or one tuple).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IspParams {
    pub gamma: f64,
    pub wr: f64,
    pub wb: f64,
}

impl IspParams {
    pub fn identity_wb(gamma: f64) -> Self {
        Self { gamma, wr: 1.0, wb: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.wr > 0.0 && self.wb > 0.0) {
            return Err(invalid(format!("ISP gamma and gains must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Ranges from which per-tuple [`IspParams`] are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IspConfig {
    pub gamma: f64,
    pub wr_range: (f64, f64),
    pub wb_range: (f64, f64),
}

impl Default for IspConfig {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            wr_range: (1.9, 2.4),
            wb_range: (1.5, 1.9),
        }
    }
}

impl IspConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !(self.gamma > 0.0 && ok(self.wr_range) && ok(self.wb_range)) {
            return Err(invalid(format!("invalid ISP config: {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> IspParams {
        IspParams {
            gamma: self.gamma,
            wr: uniform(rng, self.wr_range),
            wb: uniform(rng, self.wb_range),
        }
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// ISO-indexed noise description. All sigmas are in normalized RAW units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Signal-referred gain per ISO unit; `K = k_iso * iso`.
    pub k_iso: f64,
    pub r0: f64,
    pub r1: f64,
    pub row0: f64,
    pub row1: f64,
    /// Quantization step, `1 / (2^bits - 1)`.
    pub q: f64,
    /// Pedestal as a fraction of full scale; noisy values may dip this far below zero.
    pub black_level: f64,
    pub iso_long: (f64, f64),
    pub iso_short: (f64, f64),
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            k_iso: 1.0e-5,
            r0: 0.002,
            r1: 1.0e-6,
            row0: 0.0,
            row1: 2.0e-7,
            q: 1.0 / 1023.0,
            black_level: 0.0,
            iso_long: (1000.0, 4000.0),
            iso_short: (6400.0, 12800.0),
        }
    }
}

impl NoiseParams {
    /// Every noise source disabled.
    pub fn zero() -> Self {
        Self {
            k_iso: 0.0,
            r0: 0.0,
            r1: 0.0,
            row0: 0.0,
            row1: 0.0,
            q: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.k_iso, self.r0, self.r1, self.row0, self.row1, self.q, self.black_level];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid(format!("noise parameters must be finite and non-negative: {self:?}")));
        }
        for (name, (lo, hi)) in [("long", self.iso_long), ("short", self.iso_short)] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(invalid(format!("{name} ISO range [{lo}, {hi}] is empty")));
            }
        }
        if self.iso_short.0 < self.iso_long.1 {
            return Err(invalid("short-exposure ISO range must lie above the long-exposure range"));
        }
        Ok(())
    }

    pub fn levels(&self, iso: f64) -> Result<NoiseLevels> {
        let in_range = |(lo, hi): (f64, f64)| iso >= lo && iso <= hi;
        if !(in_range(self.iso_long) || in_range(self.iso_short)) {
            return Err(invalid(format!(
                "ISO {iso} outside the configured ranges {:?} and {:?}",
                self.iso_long, self.iso_short
            )));
        }
        Ok(NoiseLevels {
            gain: self.k_iso * iso,
            read_sigma: self.r0 + self.r1 * iso,
            row_sigma: self.row0 + self.row1 * iso,
            q: self.q,
            floor: -self.black_level,
        })
    }

    /// Parses `key = value` lines (`#` comments allowed). Keys: k_iso, r0, r1,
    /// row0, row1, q, black_level, wr_min, wr_max, wb_min, wb_max, gamma,
    /// iso_long_min, iso_long_max, iso_short_min, iso_short_max.
    pub fn parse_profile(text: &str) -> Result<(IspConfig, NoiseParams)> {
        let mut isp = IspConfig::default();
        let mut np = NoiseParams::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("profile line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("profile line {}: {key} is not a number", i + 1)))?;
            match key {
                "k_iso" => np.k_iso = v,
                "r0" => np.r0 = v,
                "r1" => np.r1 = v,
                "row0" => np.row0 = v,
                "row1" => np.row1 = v,
                "q" => np.q = v,
                "black_level" => np.black_level = v,
                "iso_long_min" => np.iso_long.0 = v,
                "iso_long_max" => np.iso_long.1 = v,
                "iso_short_min" => np.iso_short.0 = v,
                "iso_short_max" => np.iso_short.1 = v,
                "gamma" => isp.gamma = v,
                "wr_min" => isp.wr_range.0 = v,
                "wr_max" => isp.wr_range.1 = v,
                "wb_min" => isp.wb_range.0 = v,
                "wb_max" => isp.wb_range.1 = v,
                _ => return Err(Error::Config(format!("profile line {}: unknown key {key:?}", i + 1))),
            }
        }
        isp.validate()?;
        np.validate()?;
        Ok((isp, np))
    }
}

/// Noise magnitudes at one ISO.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevels {
    pub gain: f64,
    pub read_sigma: f64,
    pub row_sigma: f64,
    pub q: f64,
    pub floor: f64,
}

/// Above this mean the Poisson draw switches to a rounded normal.
pub const POISSON_NORMAL_THRESHOLD: f64 = 1000.0;

/// Poisson draw by inverse transform started at the mode, so the expected
/// number of steps grows like `sqrt(lambda)`.
pub fn sample_poisson(lambda: f64, rng: &mut Rng) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda > POISSON_NORMAL_THRESHOLD {
        let z: f64 = StandardNormal.sample(rng);
        return (lambda + lambda.sqrt() * z).round().max(0.0);
    }
    let u: f64 = rng.random();
    let m = lambda.floor();
    let mut p = (m * lambda.ln() - lambda - ln_gamma(m + 1.0)).exp();
    // P(X <= m) = Q(m + 1, lambda).
    let mut cdf = gamma_ur(m + 1.0, lambda);
    let mut k = m;
    if u <= cdf {
        while k > 0.0 && u <= cdf - p {
            cdf -= p;
            p *= k / lambda;
            k -= 1.0;
        }
    } else {
        while u > cdf {
            k += 1.0;
            p *= lambda / k;
            if p == 0.0 {
                break;
            }
            cdf += p;
        }
    }
    k
}

fn check_even(shape: Shape, op: &'static str) -> Result<()> {
    if shape.h % 2 != 0 || shape.w % 2 != 0 {
        return Err(Error::shape(op, format!("RGGB mosaic needs even extents, got {shape}")));
    }
    Ok(())
}

/// Colour channel sampled at mosaic site `(y, x)`: 0 = R, 1 = G, 2 = B.
pub fn bayer_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Inverse gamma, inverse white balance, RGGB mosaic; result in `[0, 1]`.
pub fn unprocess(x: &Tensor<f32>, p: &IspParams) -> Result<Tensor<f32>> {
    p.validate()?;
    let s = x.shape();
    if s.c != 3 {
        return Err(Error::shape("unprocess", format!("expected 3 channels, got {s}")));
    }
    check_even(s, "unprocess")?;
    let gains = [p.wr, 1.0, p.wb];
    Ok(Tensor::from_fn(s.with_c(1), |n, _, y, xx| {
        let c = bayer_channel(y, xx);
        let v = (x.at(n, c, y, xx).clamp(0.0, 1.0) as f64).powf(p.gamma) / gains[c];
        v.clamp(0.0, 1.0) as f32
    }))
}

/// Adds shot, read, row and quantization noise at the given levels.
pub fn add_noise_levels(raw: &Tensor<f32>, lv: &NoiseLevels, rng: &mut Rng) -> Result<Tensor<f32>> {
    let s = raw.shape();
    if s.c != 1 {
        return Err(Error::shape("add_noise", format!("expected a 1-channel RAW plane, got {s}")));
    }
    let read = Normal::new(0.0, lv.read_sigma).map_err(|e| invalid(e.to_string()))?;
    let row = Normal::new(0.0, lv.row_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut out = raw.clone();
    for n in 0..s.n {
        for y in 0..s.h {
            let row_off = if lv.row_sigma > 0.0 { row.sample(rng) } else { 0.0 };
            for xx in 0..s.w {
                let i = out.index(n, 0, y, xx);
                let x = out.data()[i] as f64;
                let mut v = if lv.gain > 0.0 { lv.gain * sample_poisson(x / lv.gain, rng) } else { x };
                if lv.read_sigma > 0.0 {
                    v += read.sample(rng);
                }
                v += row_off;
                if lv.q > 0.0 {
                    v += lv.q * (rng.random::<f64>() - 0.5);
                }
                out.data_mut()[i] = v.clamp(lv.floor, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Noise for a RAW plane shot at `iso`, which must lie in one of the configured ranges.
pub fn add_noise(raw: &Tensor<f32>, iso: f64, np: &NoiseParams, rng: &mut Rng) -> Result<Tensor<f32>> {
    np.validate()?;
    add_noise_levels(raw, &np.levels(iso)?, rng)
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Bilinear demosaic, white balance, gamma `1/g`, clamp to `[0, 1]`.
pub fn process(raw: &Tensor<f32>, p: &IspParams) -> Result<Tensor<f32>> {
    p.validate()?;
    let s = raw.shape();
    if s.c != 1 {
        return Err(Error::shape("process", format!("expected a 1-channel RAW plane, got {s}")));
    }
    check_even(s, "process")?;
    let gains = [p.wr, 1.0, p.wb];
    let inv_g = 1.0 / p.gamma;
    Ok(Tensor::from_fn(s.with_c(3), |n, c, y, x| {
        let plane = raw.plane(n, 0);
        let at = |dy: isize, dx: isize| {
            let yy = reflect101(y as isize + dy, s.h);
            let xx = reflect101(x as isize + dx, s.w);
            plane[yy * s.w + xx] as f64
        };
        let site = bayer_channel(y, x);
        let v = if site == c {
            at(0, 0)
        } else if c == 1 {
            (at(-1, 0) + at(1, 0) + at(0, -1) + at(0, 1)) / 4.0
        } else if site == 1 {
            // Green sites on R rows have R to the left and right, B above and
            // below; on B rows the roles swap.
            let horizontal = if y % 2 == 0 { 0 } else { 2 };
            if c == horizontal {
                (at(0, -1) + at(0, 1)) / 2.0
            } else {
                (at(-1, 0) + at(1, 0)) / 2.0
            }
        } else {
            (at(-1, -1) + at(-1, 1) + at(1, -1) + at(1, 1)) / 4.0
        };
        (v * gains[c]).clamp(0.0, 1.0).powf(inv_g) as f32
    }))
}

/// ISOs and ISP constants drawn for one tuple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDraw {
    pub iso_long: f64,
    pub iso_short: f64,
    pub isp: IspParams,
}

/// Noisy long/short inputs for one tuple. The ISOs and ISP constants are
/// drawn first, then the long and short noise in that order.
pub fn simulate_pair(
    tuple: &ExposureTuple,
    isp: &IspConfig,
    np: &NoiseParams,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<f32>, PairDraw)> {
    isp.validate()?;
    np.validate()?;
    let draw = PairDraw {
        iso_long: uniform(rng, np.iso_long),
        iso_short: uniform(rng, np.iso_short),
        isp: isp.sample(rng),
    };
    let l_n = noisy_image(&tuple.long, draw.iso_long, &draw.isp, np, rng)?;
    let s_n = noisy_image(&tuple.short, draw.iso_short, &draw.isp, np, rng)?;
    Ok((l_n, s_n, draw))
}

/// `process(add_noise(unprocess(x)))`.
pub fn noisy_image(x: &Tensor<f32>, iso: f64, p: &IspParams, np: &NoiseParams, rng: &mut Rng) -> Result<Tensor<f32>> {
    let raw = unprocess(x, p)?;
    let noisy = add_noise(&raw, iso, np, rng)?;
    process(&noisy, p)
}
