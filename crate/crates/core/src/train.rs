//! Sequential two-stage training: the deblur net first, then the enhancement
//! net on top of the frozen deblur net.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{apply_augmentations, AugmentConfig, TrainingSample};
use crate::error::{invalid, Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, write_file, Checkpoint};
use crate::isp::{IspConfig, NoiseParams};
use crate::model::{
    deblur_inputs, loss_deblur, loss_enhance, mask_inputs, Ablation, DeblurNet, EnhanceNet, ModelConfig, ParamStore,
};
use crate::rng::{stream, Role};
use crate::synth::{ExposureTuple, Manifest};
use crate::tensor::autodiff::{Tape, Var};
use crate::tensor::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Deblur,
    Enhance,
}

impl Stage {
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Deblur => "deblur",
            Stage::Enhance => "enhance",
        }
    }
}

/// Optimization schedule of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub period: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.period == 0 {
            return Err(invalid("batch and halving period must be positive"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(invalid(format!("learning rate {} must be finite and non-negative", self.lr0)));
        }
        Ok(())
    }

    /// `lr0 * 0.5^floor(epoch / period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.period) as i32)
    }
}

/// Indexed supply of training samples. `epoch` lets augmenting sources
/// draw fresh randomness each pass.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, index: usize, epoch: usize) -> Result<TrainingSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-generated samples reused every epoch.
pub struct FixedSamples(pub Vec<TrainingSample>);

impl BatchSource for FixedSamples {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, index: usize, _epoch: usize) -> Result<TrainingSample> {
        Ok(self.0[index].clone())
    }
}

/// Tuples held in memory and augmented on demand.
pub struct AugmentingLoader {
    pub tuples: Vec<ExposureTuple>,
    pub augment: AugmentConfig,
    pub isp: IspConfig,
    pub noise: NoiseParams,
    pub seed: u64,
}

impl AugmentingLoader {
    /// Loads every manifest tuple. Under `l_last_gt` the long window's last
    /// frame replaces the target; under `no_varmap` the selected crops are
    /// left out.
    pub fn from_manifest(
        manifest: &Manifest,
        augment: AugmentConfig,
        isp: IspConfig,
        noise: NoiseParams,
        seed: u64,
        ab: &Ablation,
    ) -> Result<Self> {
        if manifest.is_empty() {
            return Err(invalid("training manifest is empty"));
        }
        let keep: Vec<usize> = (0..manifest.len())
            .filter(|&i| !(ab.no_varmap && manifest.entries[i].crop.is_some()))
            .collect();
        if keep.is_empty() {
            return Err(invalid("no manifest tuples left after dropping selected crops"));
        }
        let tuples = keep
            .into_par_iter()
            .map(|i| manifest.load_tuple(i).map(|t| with_target(t, ab)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tuples,
            augment: ablate_augment(augment, ab),
            isp,
            noise,
            seed,
        })
    }
}

/// Target choice under an ablation.
pub fn with_target(mut t: ExposureTuple, ab: &Ablation) -> ExposureTuple {
    if ab.l_last_gt {
        t.s_first = t.l_last.clone();
    }
    t
}

/// Augmentation settings with the ablated schemes switched off.
pub fn ablate_augment(mut cfg: AugmentConfig, ab: &Ablation) -> AugmentConfig {
    if ab.no_ia {
        cfg.p_ia = 0.0;
    }
    if ab.no_ca {
        cfg.p_ca = 0.0;
    }
    if ab.no_cutnoise {
        cfg.p_cutnoise = 0.0;
    }
    cfg
}

impl BatchSource for AugmentingLoader {
    fn len(&self) -> usize {
        self.tuples.len()
    }

    fn sample(&self, index: usize, epoch: usize) -> Result<TrainingSample> {
        let key = (epoch * self.tuples.len() + index) as u64;
        apply_augmentations(&self.tuples[index], &self.augment, &self.isp, &self.noise, self.seed, key)
    }
}

/// A stacked batch.
pub struct Batch {
    pub l_n: Tensor<f32>,
    pub s_n: Tensor<f32>,
    pub z: Tensor<f32>,
}

/// Sample order of one epoch: a seeded permutation.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, epoch as u64, Role::Batch));
    order
}

fn load_batch(source: &dyn BatchSource, indices: &[usize], epoch: usize, ab: &Ablation) -> Result<Batch> {
    let samples: Vec<TrainingSample> = indices
        .par_iter()
        .map(|&i| source.sample(i, epoch))
        .collect::<Result<_>>()?;
    let stack = |f: fn(&TrainingSample) -> &Tensor<f32>| Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>());
    let (l_n, s_n) = mask_inputs(&stack(|s| &s.l_n)?, &stack(|s| &s.s_n)?, ab);
    Ok(Batch {
        l_n,
        s_n,
        z: stack(|s| &s.z)?,
    })
}

/// Trained parameters, optimizer state and the per-step loss log.
pub struct TrainOutcome {
    pub state: AdamState<f32>,
    pub losses: Vec<f32>,
}

fn run_loop(
    source: &dyn BatchSource,
    sched: &TrainSchedule,
    ab: &Ablation,
    params: &mut ParamStore<f32>,
    mut step: impl FnMut(&Tape<f32>, &[Var], &Batch) -> Result<Var>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if source.is_empty() {
        return Err(invalid("no training samples"));
    }
    let mut state = AdamState::new(params.tensors());
    let mut losses = Vec::new();
    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let order = epoch_order(source.len(), sched.seed, epoch);
        for chunk in order.chunks(sched.batch) {
            let batch = load_batch(source, chunk, epoch, ab)?;
            let tape = Tape::new();
            let vars = params.bind(&tape, true);
            let loss = step(&tape, &vars, &batch)?;
            losses.push(tape.value(loss).data()[0]);
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
            adam_step(params.tensors_mut(), &grads, &mut state, lr, sched.adam)?;
            if params.tensors().iter().any(|t| !t.all_finite()) {
                return Err(Error::Invariant(format!("parameters became non-finite at step {}", losses.len())));
            }
        }
    }
    Ok(TrainOutcome { state, losses })
}

/// Deblur stage: both inputs and the target pooled by `1 / alpha`.
pub fn train_deblur(
    net: &mut DeblurNet<f32>,
    source: &dyn BatchSource,
    model: &ModelConfig,
    sched: &TrainSchedule,
    ab: &Ablation,
) -> Result<TrainOutcome> {
    let factor = model.pool_factor()?;
    let arch = net.clone();
    run_loop(source, sched, ab, &mut net.params, |tape, p, b| {
        let (l, s) = deblur_inputs(&b.l_n, &b.s_n, factor)?;
        let t = arch.forward(tape, p, tape.constant(l), tape.constant(s))?;
        loss_deblur(tape, t, &b.z, factor)
    })
}

/// Enhancement stage on top of a frozen deblur net.
pub fn train_enhance(
    net: &mut EnhanceNet<f32>,
    deblur: &DeblurNet<f32>,
    source: &dyn BatchSource,
    model: &ModelConfig,
    sched: &TrainSchedule,
    ab: &Ablation,
) -> Result<TrainOutcome> {
    if ab.deblur_only {
        return Err(invalid("the deblur-only ablation has no enhancement stage"));
    }
    let factor = model.pool_factor()?;
    let arch = net.clone();
    run_loop(source, sched, ab, &mut net.params, |tape, p, b| {
        let (l, s) = deblur_inputs(&b.l_n, &b.s_n, factor)?;
        let t = tape.constant(deblur.run(&l, &s)?);
        let shape = b.s_n.shape();
        let t_up = tape.bilinear_resize(t, shape.h, shape.w)?;
        let y = arch.forward(tape, p, tape.constant(b.s_n.clone()), tape.constant(b.l_n.clone()), t_up)?;
        loss_enhance(tape, y, &b.z)
    })
}

/// Mean of the first and of the last `window` losses.
pub fn smoothed_endpoints(losses: &[f32], window: usize) -> Option<(f64, f64)> {
    if window == 0 || losses.len() < window {
        return None;
    }
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

/// One float per line.
pub fn write_loss_log(path: impl AsRef<Path>, losses: &[f32]) -> Result<()> {
    let text: String = losses.iter().map(|l| format!("{l}\n")).collect();
    write_file(path.as_ref(), text.as_bytes())
}

const FINGERPRINT_KEY: &str = "meta.fingerprint";
const ABLATION_KEY: &str = "meta.ablation";

/// Parameters, Adam moments, the config fingerprint and the ablation flags.
pub fn stage_checkpoint(
    stage: Stage,
    params: &ParamStore<f32>,
    state: Option<&AdamState<f32>>,
    fingerprint: u32,
    ab: &Ablation,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    params.write_checkpoint(stage.prefix(), &mut ck)?;
    if let Some(st) = state {
        ck.insert("adam.step", vec![1], vec![st.step as f32])?;
        for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
            ck.insert_tensor(format!("adam.m.{i}"), m)?;
            ck.insert_tensor(format!("adam.v.{i}"), v)?;
        }
    }
    ck.insert(FINGERPRINT_KEY, vec![4], fingerprint.to_le_bytes().map(f32::from).to_vec())?;
    let flags: Vec<f32> = ab.flags().iter().map(|&on| f32::from(u8::from(on))).collect();
    ck.insert(ABLATION_KEY, vec![flags.len()], flags)?;
    Ok(ck)
}

/// Config fingerprint stored in a checkpoint, if any.
pub fn checkpoint_fingerprint(ck: &Checkpoint) -> Option<u32> {
    let e = ck.get(FINGERPRINT_KEY)?;
    if e.data.len() != 4 {
        return None;
    }
    let bytes: Vec<u8> = e.data.iter().map(|&v| v as u8).collect();
    Some(u32::from_le_bytes(bytes.try_into().ok()?))
}

/// Ablation flags stored in a checkpoint.
pub fn checkpoint_ablation(ck: &Checkpoint) -> Result<Ablation> {
    let Some(e) = ck.get(ABLATION_KEY) else {
        return Ok(Ablation::default());
    };
    let names: Vec<&str> = Ablation::FLAGS
        .iter()
        .zip(&e.data)
        .filter(|(_, &v)| v != 0.0)
        .map(|(n, _)| *n)
        .collect();
    Ablation::parse(&names.join(","))
}

pub fn save_deblur(path: impl AsRef<Path>, net: &DeblurNet<f32>, state: Option<&AdamState<f32>>, fingerprint: u32, ab: &Ablation) -> Result<()> {
    save_checkpoint(path, &stage_checkpoint(Stage::Deblur, &net.params, state, fingerprint, ab)?)
}

pub fn save_enhance(path: impl AsRef<Path>, net: &EnhanceNet<f32>, state: Option<&AdamState<f32>>, fingerprint: u32, ab: &Ablation) -> Result<()> {
    save_checkpoint(path, &stage_checkpoint(Stage::Enhance, &net.params, state, fingerprint, ab)?)
}

/// Loaded stage weights plus their recorded fingerprint and ablation.
pub struct Loaded<N> {
    pub net: N,
    pub fingerprint: Option<u32>,
    pub ablation: Ablation,
}

pub fn load_deblur(path: impl AsRef<Path>, model: &ModelConfig) -> Result<Loaded<DeblurNet<f32>>> {
    let ck = load_checkpoint(path)?;
    let mut net = DeblurNet::new(model, 0);
    net.params.read_checkpoint(Stage::Deblur.prefix(), &ck)?;
    Ok(Loaded {
        net,
        fingerprint: checkpoint_fingerprint(&ck),
        ablation: checkpoint_ablation(&ck)?,
    })
}

pub fn load_enhance(path: impl AsRef<Path>, model: &ModelConfig) -> Result<Loaded<EnhanceNet<f32>>> {
    let ck = load_checkpoint(path)?;
    let ablation = checkpoint_ablation(&ck)?;
    let mut net = EnhanceNet::new(model, &ablation, 0);
    net.params.read_checkpoint(Stage::Enhance.prefix(), &ck)?;
    Ok(Loaded {
        net,
        fingerprint: checkpoint_fingerprint(&ck),
        ablation,
    })
}
