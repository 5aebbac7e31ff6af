//! Validation metrics for trained models and ablation sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::augment::TrainingSample;
use crate::error::{invalid, Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::isp::{simulate_pair, IspConfig, NoiseParams};
use crate::metrics::{psnr, ssim};
use crate::model::{two_phase_infer, Ablation, DeblurNet, EnhanceNet, ModelConfig};
use crate::rng::{stream, Role};
use crate::synth::{ExposureTuple, Manifest};
use crate::tensor::Tensor;
use crate::train::{train_deblur, train_enhance, BatchSource, TrainSchedule};

/// Noisy validation inputs generated once so every model sees the same ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationSet {
    pub ids: Vec<String>,
    pub l_n: Vec<Tensor<f32>>,
    pub s_n: Vec<Tensor<f32>>,
    pub z: Vec<Tensor<f32>>,
    pub manifest_hash: u32,
}

const HASH_KEY: &str = "meta.manifest_hash";

fn u32_entry(v: u32) -> Vec<f32> {
    v.to_le_bytes().map(f32::from).to_vec()
}

impl ValidationSet {
    /// Tuple `i` draws its noise from stream `(seed, i, Validation)`; the
    /// target is `s_first`.
    pub fn simulate(
        ids: Vec<String>,
        tuples: &[ExposureTuple],
        isp: &IspConfig,
        noise: &NoiseParams,
        seed: u64,
        manifest_hash: u32,
    ) -> Result<Self> {
        if ids.len() != tuples.len() {
            return Err(invalid(format!("{} ids for {} tuples", ids.len(), tuples.len())));
        }
        let noisy = tuples
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let (l, s, _) = simulate_pair(t, isp, noise, &mut stream(seed, i as u64, Role::Validation))?;
                Ok((l, s))
            })
            .collect::<Result<Vec<_>>>()?;
        let (l_n, s_n) = noisy.into_iter().unzip();
        Ok(Self {
            ids,
            l_n,
            s_n,
            z: tuples.iter().map(|t| t.s_first.clone()).collect(),
            manifest_hash,
        })
    }

    pub fn from_manifest(manifest: &Manifest, isp: &IspConfig, noise: &NoiseParams, seed: u64) -> Result<Self> {
        if manifest.is_empty() {
            return Err(invalid("validation manifest is empty"));
        }
        let tuples = (0..manifest.len())
            .into_par_iter()
            .map(|i| manifest.load_tuple(i))
            .collect::<Result<Vec<_>>>()?;
        let ids = manifest.entries.iter().map(|e| e.id.clone()).collect();
        Self::simulate(ids, &tuples, isp, noise, seed, manifest.hash())
    }

    /// Uses already-prepared samples as they are.
    pub fn from_samples(ids: Vec<String>, samples: &[TrainingSample], manifest_hash: u32) -> Self {
        Self {
            ids,
            l_n: samples.iter().map(|s| s.l_n.clone()).collect(),
            s_n: samples.iter().map(|s| s.s_n.clone()).collect(),
            z: samples.iter().map(|s| s.z.clone()).collect(),
            manifest_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.insert(HASH_KEY, vec![4], u32_entry(self.manifest_hash))?;
        for (i, id) in self.ids.iter().enumerate() {
            ck.insert_tensor(format!("l_n/{id}"), &self.l_n[i])?;
            ck.insert_tensor(format!("s_n/{id}"), &self.s_n[i])?;
            ck.insert_tensor(format!("z/{id}"), &self.z[i])?;
        }
        save_checkpoint(path, &ck)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let hash = ck
            .get(HASH_KEY)
            .filter(|e| e.data.len() == 4)
            .ok_or_else(|| Error::Format("validation cache lacks a manifest hash".into()))?;
        let bytes: Vec<u8> = hash.data.iter().map(|&v| v as u8).collect();
        let ids: Vec<String> = ck
            .entries()
            .iter()
            .filter_map(|e| e.name.strip_prefix("l_n/").map(str::to_string))
            .collect();
        let get = |kind: &str| {
            ids.iter()
                .map(|id| ck.tensor(&format!("{kind}/{id}")))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            l_n: get("l_n")?,
            s_n: get("s_n")?,
            z: get("z")?,
            ids,
            manifest_hash: u32::from_le_bytes(bytes.try_into().expect("four bytes")),
        })
    }
}

/// Metrics of one validation tuple. Final metrics are absent when the
/// enhancement stage was not run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_input: f64,
    pub psnr_deblur: f64,
    pub ssim_deblur: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub fingerprint: u32,
    pub manifest_hash: u32,
    pub stage2: bool,
    pub rows: Vec<EvalRow>,
    pub warnings: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn mean_psnr_input(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_input))
    }

    pub fn mean_psnr_deblur(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_deblur))
    }

    /// Mean final PSNR and SSIM, falling back to the deblur stage when the
    /// enhancement stage is absent.
    pub fn headline(&self) -> (f64, f64) {
        (
            mean(self.rows.iter().map(|r| r.psnr.unwrap_or(r.psnr_deblur))),
            mean(self.rows.iter().map(|r| r.ssim.unwrap_or(r.ssim_deblur))),
        )
    }

    /// Records a warning when a checkpoint was written under another config.
    pub fn check_checkpoint(&mut self, name: &str, stored: Option<u32>) {
        match stored {
            Some(fp) if fp == self.fingerprint => {}
            Some(fp) => self.warnings.push(format!(
                "{name} checkpoint fingerprint {fp:08x} differs from config {:08x}",
                self.fingerprint
            )),
            None => self.warnings.push(format!("{name} checkpoint carries no config fingerprint")),
        }
    }

    /// Header lines starting with `#`, then one tab-separated row per tuple
    /// and a final `mean` row. Absent values are written as `-`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# label\t{}", self.label);
        let _ = writeln!(out, "# fingerprint\t{:08x}", self.fingerprint);
        let _ = writeln!(out, "# manifest\t{:08x}", self.manifest_hash);
        let _ = writeln!(out, "# stage2\t{}", if self.stage2 { "present" } else { "absent" });
        let _ = writeln!(out, "# metrics\tfloat [0,1], peak 1");
        for w in &self.warnings {
            let _ = writeln!(out, "# warning\t{w}");
        }
        out.push_str("id\tpsnr_input\tpsnr_deblur\tssim_deblur\tpsnr\tssim\n");
        let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map_or("-".to_string(), f);
        let ssim_fmt = |v: f64| format!("{v:.6}");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{}\t{}",
                r.id,
                fmt_db(r.psnr_input),
                fmt_db(r.psnr_deblur),
                r.ssim_deblur,
                opt(r.psnr, &fmt_db),
                opt(r.ssim, &ssim_fmt),
            );
        }
        let final_mean = |f: fn(&EvalRow) -> Option<f64>| -> Option<f64> {
            self.stage2.then(|| mean(self.rows.iter().map(|r| f(r).unwrap_or(f64::NAN))))
        };
        let _ = writeln!(
            out,
            "mean\t{}\t{}\t{:.6}\t{}\t{}",
            fmt_db(self.mean_psnr_input()),
            fmt_db(self.mean_psnr_deblur()),
            mean(self.rows.iter().map(|r| r.ssim_deblur)),
            opt(final_mean(|r| r.psnr), &fmt_db),
            opt(final_mean(|r| r.ssim), &ssim_fmt),
        );
        out
    }

    pub fn summary(&self) -> String {
        let (p, s) = self.headline();
        format!(
            "{}: {} tuples, PSNR {} dB, SSIM {:.4} (noisy short input {} dB){}",
            self.label,
            self.rows.len(),
            fmt_db(p),
            s,
            fmt_db(self.mean_psnr_input()),
            if self.stage2 { "" } else { ", deblur stage only" }
        )
    }
}

/// Runs the two-phase pipeline on every tuple, in parallel, rows in order.
pub fn evaluate(
    val: &ValidationSet,
    deblur: &DeblurNet<f32>,
    enhance: Option<&EnhanceNet<f32>>,
    model: &ModelConfig,
    ab: &Ablation,
    fingerprint: u32,
) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(invalid("validation set is empty"));
    }
    let enhance = if ab.deblur_only { None } else { enhance };
    let rows = (0..val.len())
        .into_par_iter()
        .map(|i| {
            let z = &val.z[i];
            let out = two_phase_infer(deblur, enhance, &val.l_n[i], &val.s_n[i], model, ab)?;
            let t_up = out.t_up.clamp01();
            let (psnr_final, ssim_final) = match enhance {
                Some(_) => (Some(psnr(&out.y, z, 1.0)?), Some(ssim(&out.y, z, 1.0)?)),
                None => (None, None),
            };
            Ok(EvalRow {
                id: val.ids[i].clone(),
                psnr_input: psnr(&val.s_n[i], z, 1.0)?,
                psnr_deblur: psnr(&t_up, z, 1.0)?,
                ssim_deblur: ssim(&t_up, z, 1.0)?,
                psnr: psnr_final,
                ssim: ssim_final,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        label: ab.label(),
        fingerprint,
        manifest_hash: val.manifest_hash,
        stage2: enhance.is_some(),
        rows,
        warnings: Vec::new(),
    })
}

/// Model and schedules shared by every run of an ablation sweep.
#[derive(Clone, Copy, Debug)]
pub struct Experiment {
    pub model: ModelConfig,
    pub deblur: TrainSchedule,
    pub enhance: TrainSchedule,
    pub fingerprint: u32,
}

/// Trained networks of one configuration.
pub struct Trained {
    pub deblur: DeblurNet<f32>,
    pub enhance: Option<EnhanceNet<f32>>,
    pub deblur_losses: Vec<f32>,
    pub enhance_losses: Vec<f32>,
}

/// Both stages from scratch under `ab`. The enhancement stage is skipped for
/// the deblur-only ablation.
pub fn train_both(exp: &Experiment, source: &dyn BatchSource, ab: &Ablation) -> Result<Trained> {
    let mut deblur = DeblurNet::new(&exp.model, exp.deblur.seed);
    let d = train_deblur(&mut deblur, source, &exp.model, &exp.deblur, ab)?;
    let (enhance, enhance_losses) = if ab.deblur_only {
        (None, Vec::new())
    } else {
        let mut net = EnhanceNet::new(&exp.model, ab, exp.enhance.seed);
        let e = train_enhance(&mut net, &deblur, source, &exp.model, &exp.enhance, ab)?;
        (Some(net), e.losses)
    };
    Ok(Trained {
        deblur,
        enhance,
        deblur_losses: d.losses,
        enhance_losses,
    })
}

/// Retrains and evaluates once per flag set. `source_for` builds the
/// training data of each configuration.
pub fn run_ablation(
    exp: &Experiment,
    source_for: &dyn Fn(&Ablation) -> Result<Box<dyn BatchSource>>,
    val: &ValidationSet,
    sets: &[Ablation],
) -> Result<Vec<EvalReport>> {
    sets.iter()
        .map(|ab| {
            let source = source_for(ab)?;
            let trained = train_both(exp, source.as_ref(), ab)?;
            evaluate(val, &trained.deblur, trained.enhance.as_ref(), &exp.model, ab, exp.fingerprint)
        })
        .collect()
}

/// One line per configuration: label, mean PSNR and SSIM, stage 2 presence.
pub fn ablation_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("setting\tpsnr\tssim\tstage2\n");
    for r in reports {
        let (p, s) = r.headline();
        let _ = writeln!(
            out,
            "{}\t{}\t{s:.6}\t{}",
            r.label,
            fmt_db(p),
            if r.stage2 { "present" } else { "absent" }
        );
    }
    out
}
