//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. Every key, its default and its help text live in [`SCHEMA`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::isp::{IspConfig, NoiseParams};
use crate::model::{Ablation, ModelConfig};
use crate::synth::{SamplingPolicy, SynthConfig};
use crate::tensor::optim::AdamConfig;
use crate::train::TrainSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Real,
    Bool,
    /// Comma-separated reals.
    Reals,
    Text,
}

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(section: &'static str, key: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        kind,
        default,
        help,
    }
}

pub const SECTIONS: [&str; 7] = ["synth", "isp", "noise", "augment", "model", "train", "eval"];

pub const SCHEMA: &[KeySpec] = &[
    k("synth", "interp_factor", Kind::Int, "8", "frames inserted per source interval, plus one"),
    k("synth", "long_frames", Kind::Int, "64", "interpolated frames averaged into the long exposure"),
    k("synth", "gap_frames", Kind::Int, "8", "readout gap between the two exposures"),
    k("synth", "short_frames", Kind::Int, "8", "interpolated frames averaged into the short exposure"),
    k("synth", "stride", Kind::Int, "80", "distance between window starts, in interpolated frames"),
    k("synth", "fps", Kind::Real, "60", "nominal frame rate of input frame directories"),
    k("synth", "seed", Kind::Int, "0", "window placement seed"),
    k("isp", "gamma", Kind::Real, "2.2", "display gamma inverted by unprocessing"),
    k("isp", "wr_min", Kind::Real, "1.9", "red white-balance gain, lower bound"),
    k("isp", "wr_max", Kind::Real, "2.4", "red white-balance gain, upper bound"),
    k("isp", "wb_min", Kind::Real, "1.5", "blue white-balance gain, lower bound"),
    k("isp", "wb_max", Kind::Real, "1.9", "blue white-balance gain, upper bound"),
    k("noise", "k_iso", Kind::Real, "1e-5", "system gain per ISO unit"),
    k("noise", "r0", Kind::Real, "0.002", "read noise sigma at ISO 0"),
    k("noise", "r1", Kind::Real, "1e-6", "read noise sigma per ISO unit"),
    k("noise", "row0", Kind::Real, "0", "row noise sigma at ISO 0"),
    k("noise", "row1", Kind::Real, "2e-7", "row noise sigma per ISO unit"),
    k("noise", "bits", Kind::Int, "10", "quantization depth; step 1/(2^bits - 1), 0 disables"),
    k("noise", "black_level", Kind::Real, "0", "pedestal below which noisy values may not fall"),
    k("noise", "iso_long_min", Kind::Real, "1000", "long-exposure ISO, lower bound"),
    k("noise", "iso_long_max", Kind::Real, "4000", "long-exposure ISO, upper bound"),
    k("noise", "iso_short_min", Kind::Real, "6400", "short-exposure ISO, lower bound"),
    k("noise", "iso_short_max", Kind::Real, "12800", "short-exposure ISO, upper bound"),
    k("augment", "p_ia", Kind::Real, "0.3", "illumination adjustment probability"),
    k("augment", "p_ca", Kind::Real, "0.5", "colour adjustment probability"),
    k("augment", "p_cutnoise", Kind::Real, "0.3", "CutNoise probability"),
    k("augment", "ia_inv_gammas", Kind::Reals, "0.6,0.7,0.75,0.8,0.9", "illumination gammas are 1/v for each v"),
    k("augment", "ca_a_min", Kind::Real, "0.3", "colour scale, lower bound"),
    k("augment", "ca_a_max", Kind::Real, "0.6", "colour scale, upper bound"),
    k("augment", "ca_b_min", Kind::Real, "0.001", "colour offset, lower bound"),
    k("augment", "ca_b_max", Kind::Real, "0.01", "colour offset, upper bound"),
    k("augment", "crop", Kind::Int, "64", "training crop side"),
    k("augment", "cutnoise_side_ref", Kind::Int, "120", "CutNoise side at a 256-pixel crop, scaled with crop"),
    k("augment", "varmap_k", Kind::Int, "8", "variance map cell size"),
    k("augment", "percentile", Kind::Real, "5", "selection threshold percentile"),
    k("augment", "samples_per_map", Kind::Int, "1000", "squares drawn per variance map"),
    k("augment", "select_side", Kind::Int, "64", "side of selected squares, at least the crop"),
    k("augment", "noise", Kind::Bool, "true", "simulate sensor noise"),
    k("model", "deblur_base", Kind::Int, "32", "deblur net base width"),
    k("model", "enhance_base", Kind::Int, "16", "enhancement net base width"),
    k("model", "res_layers", Kind::Int, "4", "residual layers per residual block"),
    k("model", "deblur_blocks", Kind::Int, "2", "residual blocks in the deblur bottleneck and tail"),
    k("model", "resolution", Kind::Int, "256", "fixed deblur resolution at inference"),
    k("model", "alpha", Kind::Real, "0.5", "deblur training downsampling ratio"),
    k("train", "seed", Kind::Int, "0", "initialization, augmentation and batching seed"),
    k("train", "batch", Kind::Int, "2", "samples per step"),
    k("train", "deblur_epochs", Kind::Int, "2", "deblur stage epochs"),
    k("train", "deblur_lr", Kind::Real, "1e-4", "deblur stage initial learning rate"),
    k("train", "enhance_epochs", Kind::Int, "2", "enhancement stage epochs"),
    k("train", "enhance_lr", Kind::Real, "5e-5", "enhancement stage initial learning rate"),
    k("train", "period", Kind::Int, "1", "epochs between learning-rate halvings"),
    k("train", "beta1", Kind::Real, "0.5", "Adam beta1"),
    k("train", "beta2", Kind::Real, "0.999", "Adam beta2"),
    k("train", "eps", Kind::Real, "1e-8", "Adam epsilon"),
    k("train", "ablation", Kind::Text, "full", "ablation flags, comma separated"),
    k("eval", "seed", Kind::Int, "0", "validation noise seed"),
];

fn spec(section: &str, key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.section == section && s.key == key)
}

/// Parses and re-renders one value so equal settings fingerprint equally.
fn canonical(s: &KeySpec, raw: &str) -> Result<String, String> {
    let bad = |what: &str| format!("{}.{} = {raw:?} is not {what}", s.section, s.key);
    let real = |v: &str| -> Result<f64, String> {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| bad("a finite number"))
    };
    Ok(match s.kind {
        Kind::Int => raw.trim().parse::<u64>().map_err(|_| bad("a non-negative integer"))?.to_string(),
        Kind::Real => format!("{:?}", real(raw)?),
        Kind::Bool => match raw.trim() {
            "true" | "1" | "yes" => "true".into(),
            "false" | "0" | "no" => "false".into(),
            _ => return Err(bad("a boolean")),
        },
        Kind::Reals => raw
            .split(',')
            .map(|v| real(v).map(|x| format!("{x:?}")))
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        Kind::Text => raw.trim().to_string(),
    })
}

/// Validated settings, every schema key present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<(&'static str, &'static str), String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = SCHEMA
            .iter()
            .map(|s| ((s.section, s.key), canonical(s, s.default).expect("schema default parses")))
            .collect();
        Self { values }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS
                        .iter()
                        .find(|s| **s == name)
                        .ok_or_else(|| at(format!("unknown section [{name}]")))?,
                );
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| at("expected key = value".into()))?;
            let key = key.trim();
            let sec = section.ok_or_else(|| at(format!("{key} appears before any [section]")))?;
            let s = spec(sec, key).ok_or_else(|| at(format!("unknown key {key:?} in [{sec}]")))?;
            if seen.insert((sec, key.to_string()), i + 1).is_some() {
                return Err(at(format!("duplicate key {sec}.{key}")));
            }
            let v = canonical(s, value).map_err(at)?;
            cfg.values.insert((s.section, s.key), v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides `section.key`.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (sec, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("expected section.key, got {dotted:?}")))?;
        let s = spec(sec, key).ok_or_else(|| Error::Config(format!("unknown key {dotted:?}")))?;
        self.values.insert((s.section, s.key), canonical(s, value).map_err(Error::Config)?);
        Ok(())
    }

    /// Sets every seed in the file.
    pub fn set_seed(&mut self, seed: u64) {
        for sec in ["synth", "train", "eval"] {
            self.values.insert((sec, "seed"), seed.to_string());
        }
    }

    fn raw(&self, sec: &str, key: &str) -> &str {
        let s = spec(sec, key).unwrap_or_else(|| panic!("{sec}.{key} is not in the schema"));
        &self.values[&(s.section, s.key)]
    }

    fn int(&self, sec: &str, key: &str) -> usize {
        self.raw(sec, key).parse().expect("canonical integer")
    }

    fn u64(&self, sec: &str, key: &str) -> u64 {
        self.raw(sec, key).parse().expect("canonical integer")
    }

    fn real(&self, sec: &str, key: &str) -> f64 {
        self.raw(sec, key).parse().expect("canonical real")
    }

    /// One `section.key=value` line per schema key, in schema order.
    pub fn canonical_text(&self) -> String {
        SCHEMA.iter().fold(String::new(), |mut out, s| {
            let _ = writeln!(out, "{}.{}={}", s.section, s.key, self.raw(s.section, s.key));
            out
        })
    }

    /// CRC32 of [`Self::canonical_text`]. The metric domain (floating point
    /// in `[0, 1]`) is part of the hashed text.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(self.canonical_text().as_bytes());
        h.update(b"metrics=float01\n");
        h.finalize()
    }

    /// Renders the file form, every key present.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for sec in SECTIONS {
            let _ = writeln!(out, "[{sec}]");
            for s in SCHEMA.iter().filter(|s| s.section == sec) {
                let _ = writeln!(out, "{} = {}", s.key, self.raw(sec, s.key));
            }
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.isp().validate()?;
        self.noise().validate()?;
        self.augment().validate()?;
        self.model().validate()?;
        self.deblur_schedule().validate()?;
        self.enhance_schedule().validate()?;
        self.ablation()?;
        if self.int("synth", "stride") == 0 || !(self.real("synth", "fps") > 0.0) {
            return Err(Error::Config("synth.stride and synth.fps must be positive".into()));
        }
        if self.int("augment", "select_side") < self.int("augment", "crop") {
            return Err(Error::Config("augment.select_side must be at least augment.crop".into()));
        }
        if self.int("noise", "bits") > 32 {
            return Err(Error::Config("noise.bits must be at most 32".into()));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            interp_factor: self.int("synth", "interp_factor"),
            long_frames: self.int("synth", "long_frames"),
            gap_frames: self.int("synth", "gap_frames"),
            short_frames: self.int("synth", "short_frames"),
        }
    }

    pub fn sampling(&self) -> SamplingPolicy {
        SamplingPolicy {
            stride: self.int("synth", "stride"),
            seed: self.u64("synth", "seed"),
        }
    }

    pub fn fps(&self) -> f64 {
        self.real("synth", "fps")
    }

    pub fn isp(&self) -> IspConfig {
        IspConfig {
            gamma: self.real("isp", "gamma"),
            wr_range: (self.real("isp", "wr_min"), self.real("isp", "wr_max")),
            wb_range: (self.real("isp", "wb_min"), self.real("isp", "wb_max")),
        }
    }

    pub fn noise(&self) -> NoiseParams {
        let bits = self.int("noise", "bits") as i32;
        NoiseParams {
            k_iso: self.real("noise", "k_iso"),
            r0: self.real("noise", "r0"),
            r1: self.real("noise", "r1"),
            row0: self.real("noise", "row0"),
            row1: self.real("noise", "row1"),
            q: if bits == 0 { 0.0 } else { 1.0 / (2f64.powi(bits) - 1.0) },
            black_level: self.real("noise", "black_level"),
            iso_long: (self.real("noise", "iso_long_min"), self.real("noise", "iso_long_max")),
            iso_short: (self.real("noise", "iso_short_min"), self.real("noise", "iso_short_max")),
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            p_ia: self.real("augment", "p_ia"),
            p_ca: self.real("augment", "p_ca"),
            p_cutnoise: self.real("augment", "p_cutnoise"),
            gammas: self
                .raw("augment", "ia_inv_gammas")
                .split(',')
                .map(|v| 1.0 / v.parse::<f64>().expect("canonical real"))
                .collect(),
            ca_a: (self.real("augment", "ca_a_min"), self.real("augment", "ca_a_max")),
            ca_b: (self.real("augment", "ca_b_min"), self.real("augment", "ca_b_max")),
            crop: self.int("augment", "crop"),
            cutnoise_side_ref: self.int("augment", "cutnoise_side_ref"),
            varmap_k: self.int("augment", "varmap_k"),
            percentile: self.real("augment", "percentile"),
            samples_per_map: self.int("augment", "samples_per_map"),
            select_side: self.int("augment", "select_side"),
            noise: self.raw("augment", "noise") == "true",
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            deblur_base: self.int("model", "deblur_base"),
            enhance_base: self.int("model", "enhance_base"),
            res_layers: self.int("model", "res_layers"),
            deblur_blocks: self.int("model", "deblur_blocks"),
            resolution: self.int("model", "resolution"),
            alpha: self.real("model", "alpha"),
        }
    }

    fn schedule(&self, epochs: &str, lr: &str) -> TrainSchedule {
        TrainSchedule {
            epochs: self.int("train", epochs),
            lr0: self.real("train", lr),
            period: self.int("train", "period"),
            batch: self.int("train", "batch"),
            seed: self.u64("train", "seed"),
            adam: AdamConfig {
                beta1: self.real("train", "beta1"),
                beta2: self.real("train", "beta2"),
                eps: self.real("train", "eps"),
            },
        }
    }

    pub fn deblur_schedule(&self) -> TrainSchedule {
        self.schedule("deblur_epochs", "deblur_lr")
    }

    pub fn enhance_schedule(&self) -> TrainSchedule {
        self.schedule("enhance_epochs", "enhance_lr")
    }

    pub fn train_seed(&self) -> u64 {
        self.u64("train", "seed")
    }

    pub fn eval_seed(&self) -> u64 {
        self.u64("eval", "seed")
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::parse(self.raw("train", "ablation"))
    }
}

/// Every key with its default, grouped by section.
pub fn schema_help() -> String {
    let mut out = String::from("Config keys (defaults):\n");
    for sec in SECTIONS {
        let _ = writeln!(out, "  [{sec}]");
        for s in SCHEMA.iter().filter(|s| s.section == sec) {
            let _ = writeln!(out, "    {:<18} = {:<22} {}", s.key, s.default, s.help);
        }
    }
    out
}
