//! Two-phase restoration network: a low-resolution deblurring stage and a
//! full-resolution enhancement stage with deformable feature alignment.

mod deblur;
mod enhance;
mod pipeline;

pub use deblur::DeblurNet;
pub use enhance::{EnhanceNet, OFFSET_TAPS};
pub use pipeline::{
    deblur_inputs, loss_deblur, loss_enhance, pad_replicate, two_phase_infer, upscale_offsets, Inference,
};

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::io::Checkpoint;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::autodiff::{ConvVars, Tape, Var};
use crate::tensor::{ConvGeometry, Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Architecture and inference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub deblur_base: usize,
    pub enhance_base: usize,
    /// Residual layers per residual block.
    pub res_layers: usize,
    /// Residual blocks in the deblur bottleneck and again in its tail.
    pub deblur_blocks: usize,
    /// Fixed deblur resolution at inference.
    pub resolution: usize,
    /// Training-time downsampling ratio of the deblur stage.
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            deblur_base: 32,
            enhance_base: 16,
            res_layers: 4,
            deblur_blocks: 2,
            resolution: 256,
            alpha: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deblur_base == 0 || self.enhance_base == 0 || self.res_layers == 0 {
            return Err(invalid("base widths and res_layers must be positive"));
        }
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return Err(invalid(format!("resolution {} must be a positive multiple of 16", self.resolution)));
        }
        self.pool_factor().map(|_| ())
    }

    /// `1 / alpha` as an integer pooling factor.
    pub fn pool_factor(&self) -> Result<usize> {
        let f = 1.0 / self.alpha;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || (f - f.round()).abs() > 1e-9 {
            return Err(invalid(format!("alpha {} must be 1/k for a positive integer k", self.alpha)));
        }
        Ok(f.round() as usize)
    }
}

/// Ablation switches. Model switches change the architecture or inputs;
/// data switches change how training samples are prepared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub only_long: bool,
    pub only_short: bool,
    pub l_last_gt: bool,
    pub dense_alignment: bool,
    pub no_skip_fusion: bool,
    pub no_tail_block: bool,
    pub deblur_only: bool,
    pub no_varmap: bool,
    pub no_ia: bool,
    pub no_ca: bool,
    pub no_cutnoise: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 11] = [
        "only-long",
        "only-short",
        "l-last-gt",
        "dense-alignment",
        "no-skip-fusion",
        "no-tail-block",
        "deblur-only",
        "no-varmap",
        "no-ia",
        "no-ca",
        "no-cutnoise",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "only-long" => &mut self.only_long,
            "only-short" => &mut self.only_short,
            "l-last-gt" => &mut self.l_last_gt,
            "dense-alignment" => &mut self.dense_alignment,
            "no-skip-fusion" => &mut self.no_skip_fusion,
            "no-tail-block" => &mut self.no_tail_block,
            "deblur-only" => &mut self.deblur_only,
            "no-varmap" => &mut self.no_varmap,
            "no-ia" => &mut self.no_ia,
            "no-ca" => &mut self.no_ca,
            "no-cutnoise" => &mut self.no_cutnoise,
            _ => return None,
        })
    }

    /// Comma- or `+`-separated flag names; `full` or an empty string means none.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut a = Self::default();
        for name in spec.split([',', '+']).map(str::trim).filter(|s| !s.is_empty() && *s != "full") {
            *a.slot(name).ok_or_else(|| {
                Error::Config(format!("unknown ablation flag {name:?}; expected one of {}", Self::FLAGS.join(", ")))
            })? = true;
        }
        if a.only_long && a.only_short {
            return Err(Error::Config("only-long and only-short are mutually exclusive".into()));
        }
        Ok(a)
    }

    /// Flag states in [`Self::FLAGS`] order.
    pub fn flags(&self) -> [bool; 11] {
        let mut copy = *self;
        Self::FLAGS.map(|n| *copy.slot(n).expect("listed flag"))
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = Self::FLAGS
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape, as leaves or as constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    pub fn write_checkpoint(&self, prefix: &str, ck: &mut Checkpoint) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ck.insert_tensor(format!("{prefix}.{n}"), &t.cast())?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `ck`; names and shapes must match.
    pub fn read_checkpoint(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}.{n}");
            let loaded = ck
                .tensor(&key)
                .map_err(|_| Error::Format(format!("checkpoint lacks parameter {key}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {key} is {} in the checkpoint but {} in the model",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded.cast();
        }
        Ok(())
    }
}

/// Convolution whose weight and bias live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub geom: ConvGeometry,
}

impl Conv {
    /// He-uniform weights for the leaky slope, scaled by `init_scale`; bias
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init_scale: f64,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w_bound = init_scale * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let b_bound = 1.0 / fan_in.sqrt();
        let mut draw =
            |shape: Shape, bound: f64| Tensor::from_fn(shape, |_, _, _, _| T::of(rng.random_range(-bound..bound)));
        let w = draw(Shape::new(cout, cin, k, k), w_bound);
        let b = draw(Shape::new(1, cout, 1, 1), b_bound);
        Self {
            weight: store.push(format!("{name}.w"), w),
            bias: store.push(format!("{name}.b"), b),
            geom: ConvGeometry::strided(k, stride),
        }
    }

    pub fn vars(&self, p: &[Var]) -> ConvVars {
        ConvVars {
            weight: p[self.weight],
            bias: Some(p[self.bias]),
            geom: self.geom,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, self.vars(p))
    }

    /// Convolution followed by leaky ReLU.
    pub fn forward_act<T: Scalar>(&self, tape: &Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = self.forward(tape, p, x)?;
        tape.leaky_relu(y, LEAKY_SLOPE)
    }

    pub fn param_indices(&self) -> [usize; 2] {
        [self.weight, self.bias]
    }
}

/// Init scale of the last conv in a residual layer, so deep stacks start
/// close to the identity.
const RES_INIT_SCALE: f64 = 0.5;

/// `x + conv(lrelu(conv(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct ResLayer {
    a: Conv,
    b: Conv,
}

impl ResLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, ch: usize) -> Self {
        Self {
            a: Conv::new(store, rng, &format!("{name}.a"), ch, ch, 3, 1, 1.0),
            b: Conv::new(store, rng, &format!("{name}.b"), ch, ch, 3, 1, RES_INIT_SCALE),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.a.forward_act(tape, p, x)?;
        let h = self.b.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Residual layers applied in sequence.
#[derive(Clone, Debug)]
pub struct ResBlock {
    layers: Vec<ResLayer>,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, ch: usize, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| ResLayer::new(store, rng, &format!("{name}.{i}"), ch))
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &[Var], mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, p, x)?;
        }
        Ok(x)
    }

    pub fn param_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| l.a.param_indices().into_iter().chain(l.b.param_indices()))
            .collect()
    }
}

fn check_multiple(shape: Shape, m: usize, op: &'static str) -> Result<()> {
    if shape.h % m != 0 || shape.w % m != 0 {
        return Err(Error::shape(op, format!("extents of {shape} must be divisible by {m}")));
    }
    Ok(())
}

/// Zeroes the input that an ablation removes.
pub fn mask_inputs<T: Scalar>(l_n: &Tensor<T>, s_n: &Tensor<T>, ab: &Ablation) -> (Tensor<T>, Tensor<T>) {
    let zero = |t: &Tensor<T>| Tensor::zeros(t.shape());
    (
        if ab.only_short { zero(l_n) } else { l_n.clone() },
        if ab.only_long { zero(s_n) } else { s_n.clone() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_round_trip() {
        let a = Ablation::parse("only-long,l-last-gt").unwrap();
        assert!(a.only_long && a.l_last_gt && !a.deblur_only);
        assert_eq!(a.label(), "only-long+l-last-gt");
        assert_eq!(Ablation::parse(&a.label()).unwrap(), a);
        assert_eq!(Ablation::parse("full").unwrap(), Ablation::default());
        assert!(Ablation::parse("no-such").is_err());
        assert!(Ablation::parse("only-long,only-short").is_err());
    }

    #[test]
    fn pool_factor_from_alpha() {
        assert_eq!(ModelConfig::default().pool_factor().unwrap(), 2);
        assert!(ModelConfig { alpha: 0.3, ..ModelConfig::default() }.pool_factor().is_err());
        assert!(ModelConfig { resolution: 40, ..ModelConfig::default() }.validate().is_err());
    }
}
