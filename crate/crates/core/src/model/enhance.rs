use super::{check_multiple, pipeline::upscale_offsets, Ablation, Conv, ModelConfig, ParamStore, ResBlock};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Role};
use crate::scalar::Scalar;
use crate::tensor::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Kernel taps of every alignment convolution (3×3).
pub const OFFSET_TAPS: usize = 9;
const LEVELS: usize = 5;
const WIDTH_MULT: [usize; LEVELS] = [1, 2, 4, 8, 8];
/// Offset producers end in a conv scaled down by this factor so alignment
/// starts near the identity without cutting gradients to earlier layers.
const OFFSET_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
struct Level {
    extract: [Conv; 2],
    /// Concatenated short/long features (plus coarser offsets) to offsets and mask.
    producer: Option<[Conv; 2]>,
    align: Conv,
    fuse_adapter: Conv,
}

#[derive(Clone, Copy, Debug)]
struct DecoderStage {
    up: Conv,
    skip: Option<Conv>,
}

/// Full-resolution refinement: two feature pyramids, coarse-to-fine
/// deformable alignment of the long branch, fusion, and a decoder with a
/// global skip over the upsampled deblur result.
#[derive(Clone, Debug)]
pub struct EnhanceNet<T: Scalar> {
    pub params: ParamStore<T>,
    short: Vec<[Conv; 2]>,
    levels: Vec<Level>,
    fuse_blocks: Vec<ResBlock>,
    decoder: Vec<DecoderStage>,
    tail: Option<ResBlock>,
    out: Conv,
    widths: [usize; LEVELS],
}

/// Per-level intermediates of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct EnhanceTrace {
    pub offsets: Vec<Var>,
    pub masks: Vec<Var>,
    pub aligned: Vec<Var>,
}

impl<T: Scalar> EnhanceNet<T> {
    pub fn new(cfg: &ModelConfig, ab: &Ablation, seed: u64) -> Self {
        let mut rng = stream(seed, 1, Role::Init);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let widths = WIDTH_MULT.map(|m| m * cfg.enhance_base);
        let k3 = 3 * OFFSET_TAPS;
        let mut short = Vec::new();
        let mut levels = Vec::new();
        let mut fuse_blocks = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let (cin_s, cin_l, stride) = if i == 0 { (6, 3, 1) } else { (widths[i - 1], widths[i - 1], 2) };
            short.push([
                Conv::new(&mut p, rng, &format!("short{i}.0"), cin_s, w, 3, stride, 1.0),
                Conv::new(&mut p, rng, &format!("short{i}.1"), w, w, 3, 1, 1.0),
            ]);
            let extract = [
                Conv::new(&mut p, rng, &format!("long{i}.0"), cin_l, w, 3, stride, 1.0),
                Conv::new(&mut p, rng, &format!("long{i}.1"), w, w, 3, 1, 1.0),
            ];
            let producer = (!ab.dense_alignment).then(|| {
                let cin = 2 * w + if i + 1 < LEVELS { 2 * OFFSET_TAPS } else { 0 };
                [
                    Conv::new(&mut p, rng, &format!("offset{i}.0"), cin, w, 3, 1, 1.0),
                    Conv::new(&mut p, rng, &format!("offset{i}.1"), w, k3, 3, 1, OFFSET_INIT_SCALE),
                ]
            });
            let align = Conv::new(&mut p, rng, &format!("align{i}"), w, w, 3, 1, 1.0);
            let fuse_adapter = Conv::new(&mut p, rng, &format!("fuse{i}.adapter"), 2 * w, w, 1, 1, 1.0);
            fuse_blocks.push(ResBlock::new(&mut p, rng, &format!("fuse{i}.block"), w, cfg.res_layers));
            levels.push(Level {
                extract,
                producer,
                align,
                fuse_adapter,
            });
        }
        let decoder = (0..LEVELS - 1)
            .rev()
            .map(|i| DecoderStage {
                up: Conv::new(&mut p, rng, &format!("dec{i}.up"), widths[i + 1], widths[i], 3, 1, 1.0),
                skip: (!ab.no_skip_fusion)
                    .then(|| Conv::new(&mut p, rng, &format!("dec{i}.skip"), 2 * widths[i], widths[i], 1, 1, 1.0)),
            })
            .collect();
        let tail = (!ab.no_tail_block).then(|| ResBlock::new(&mut p, rng, "tail", widths[0], cfg.res_layers));
        let out = Conv::new(&mut p, rng, "out", widths[0], 3, 3, 1, 1.0);
        Self {
            params: p,
            short,
            levels,
            fuse_blocks,
            decoder,
            tail,
            out,
            widths,
        }
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        self.widths
    }

    /// Parameter indices of the decoder, tail block and output conv.
    pub fn decoder_tail_params(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .decoder
            .iter()
            .flat_map(|d| d.up.param_indices().into_iter().chain(d.skip.into_iter().flat_map(|c| c.param_indices())))
            .collect();
        if let Some(t) = &self.tail {
            idx.extend(t.param_indices());
        }
        idx.extend(self.out.param_indices());
        idx
    }

    /// Parameter indices of the offset producer at `level` (0-based, finest first).
    pub fn producer_params(&self, level: usize) -> Vec<usize> {
        self.levels[level]
            .producer
            .iter()
            .flat_map(|pr| pr.iter().flat_map(|c| c.param_indices()))
            .collect()
    }

    fn extract(&self, tape: &Tape<T>, p: &[Var], convs: &[[Conv; 2]], x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(LEVELS);
        let mut h = x;
        for c in convs {
            h = c[0].forward_act(tape, p, h)?;
            h = c[1].forward_act(tape, p, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Offsets (N×2K×H×W) and sigmoid mask (N×K×H×W) for `level`. The
    /// coarsest level takes no coarser offsets; every other level requires them.
    pub fn compute_offsets(
        &self,
        tape: &Tape<T>,
        p: &[Var],
        level: usize,
        f_s: Var,
        f_l: Var,
        coarser: Option<Var>,
    ) -> Result<(Var, Var)> {
        let producer = self.levels[level]
            .producer
            .ok_or_else(|| invalid("offset producers are absent under dense alignment"))?;
        let coarsest = level + 1 == LEVELS;
        let x = match (coarsest, coarser) {
            (true, None) => tape.concat_channels(&[f_s, f_l])?,
            (false, Some(c)) => {
                let s = tape.shape(f_s);
                let up = upscale_offsets(tape, c, s.h, s.w)?;
                tape.concat_channels(&[f_s, f_l, up])?
            }
            (true, Some(_)) => return Err(invalid("the coarsest level takes no coarser offsets")),
            (false, None) => return Err(invalid(format!("level {} needs coarser offsets", level + 1))),
        };
        let h = producer[0].forward_act(tape, p, x)?;
        let raw = producer[1].forward(tape, p, h)?;
        let offsets = tape.narrow_channels(raw, 0, 2 * OFFSET_TAPS)?;
        let mask = tape.narrow_channels(raw, 2 * OFFSET_TAPS, OFFSET_TAPS)?;
        Ok((offsets, tape.sigmoid(mask)?))
    }

    /// `y = decoder(...) + t_up`, with per-level intermediates.
    pub fn forward_traced(
        &self,
        tape: &Tape<T>,
        p: &[Var],
        s_n: Var,
        l_n: Var,
        t_up: Var,
    ) -> Result<(Var, EnhanceTrace)> {
        let shape = tape.shape(s_n);
        if tape.shape(l_n) != shape || tape.shape(t_up) != shape || shape.c != 3 {
            return Err(Error::shape(
                "enhancenet",
                format!("inputs {}, {}, {}", shape, tape.shape(l_n), tape.shape(t_up)),
            ));
        }
        check_multiple(shape, 1 << (LEVELS - 1), "enhancenet")?;
        let a_in = tape.concat_channels(&[s_n, t_up])?;
        let f_s = self.extract(tape, p, &self.short, a_in)?;
        let long: Vec<[Conv; 2]> = self.levels.iter().map(|l| l.extract).collect();
        let f_l = self.extract(tape, p, &long, l_n)?;

        let mut trace = EnhanceTrace::default();
        let mut fused = vec![None; LEVELS];
        let mut coarser = None;
        for i in (0..LEVELS).rev() {
            let lvl = &self.levels[i];
            let aligned = if lvl.producer.is_some() {
                let (off, mask) = self.compute_offsets(tape, p, i, f_s[i], f_l[i], coarser)?;
                trace.offsets.push(off);
                trace.masks.push(mask);
                coarser = Some(off);
                tape.deform_conv2d(f_l[i], lvl.align.vars(p), off, mask)?
            } else {
                lvl.align.forward(tape, p, f_l[i])?
            };
            let aligned = tape.leaky_relu(aligned, super::LEAKY_SLOPE)?;
            trace.aligned.push(aligned);
            let cat = tape.concat_channels(&[f_s[i], aligned])?;
            let h = lvl.fuse_adapter.forward_act(tape, p, cat)?;
            fused[i] = Some(self.fuse_blocks[i].forward(tape, p, h)?);
        }
        let fused: Vec<Var> = fused.into_iter().map(|f| f.expect("every level fused")).collect();

        let mut h = fused[LEVELS - 1];
        for (stage, i) in self.decoder.iter().zip((0..LEVELS - 1).rev()) {
            let s = tape.shape(fused[i]);
            let up = tape.bilinear_resize(h, s.h, s.w)?;
            h = stage.up.forward_act(tape, p, up)?;
            if let Some(skip) = &stage.skip {
                let cat = tape.concat_channels(&[h, fused[i]])?;
                h = skip.forward_act(tape, p, cat)?;
            }
        }
        if let Some(tail) = &self.tail {
            h = tail.forward(tape, p, h)?;
        }
        let out = self.out.forward(tape, p, h)?;
        Ok((tape.add(out, t_up)?, trace))
    }

    pub fn forward(&self, tape: &Tape<T>, p: &[Var], s_n: Var, l_n: Var, t_up: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, s_n, l_n, t_up)?.0)
    }

    /// Inference on plain tensors.
    pub fn run(&self, s_n: &Tensor<T>, l_n: &Tensor<T>, t_up: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let vars = [s_n, l_n, t_up].map(|t| tape.constant(t.clone()));
        let y = self.forward(&tape, &p, vars[0], vars[1], vars[2])?;
        Ok((*tape.value(y)).clone())
    }
}
