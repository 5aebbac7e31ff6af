use super::{check_multiple, Conv, ModelConfig, ParamStore, ResBlock};
use crate::error::{Error, Result};
use crate::rng::{stream, Role};
use crate::scalar::Scalar;
use crate::tensor::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Three-level encoder/decoder with Haar downsampling and upsampling.
#[derive(Clone, Debug)]
pub struct DeblurNet<T: Scalar> {
    pub params: ParamStore<T>,
    head: Conv,
    down1: Conv,
    down2: Conv,
    bottleneck: Vec<ResBlock>,
    up1: Conv,
    fuse1: Conv,
    up2: Conv,
    fuse2: Conv,
    tail: Vec<ResBlock>,
    out: Conv,
}

impl<T: Scalar> DeblurNet<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, 0, Role::Init);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let b = cfg.deblur_base;
        let head = Conv::new(&mut p, rng, "head", 6, b, 3, 1, 1.0);
        let down1 = Conv::new(&mut p, rng, "down1", 4 * b, 2 * b, 3, 1, 1.0);
        let down2 = Conv::new(&mut p, rng, "down2", 8 * b, 4 * b, 3, 1, 1.0);
        let bottleneck = (0..cfg.deblur_blocks)
            .map(|i| ResBlock::new(&mut p, rng, &format!("bottleneck{i}"), 4 * b, cfg.res_layers))
            .collect();
        let up1 = Conv::new(&mut p, rng, "up1", 4 * b, 8 * b, 3, 1, 1.0);
        let fuse1 = Conv::new(&mut p, rng, "fuse1", 4 * b, 2 * b, 1, 1, 1.0);
        let up2 = Conv::new(&mut p, rng, "up2", 2 * b, 4 * b, 3, 1, 1.0);
        let fuse2 = Conv::new(&mut p, rng, "fuse2", 2 * b, b, 1, 1, 1.0);
        let tail = (0..cfg.deblur_blocks)
            .map(|i| ResBlock::new(&mut p, rng, &format!("tail{i}"), b, cfg.res_layers))
            .collect();
        let out = Conv::new(&mut p, rng, "out", b, 3, 3, 1, 1.0);
        Self {
            params: p,
            head,
            down1,
            down2,
            bottleneck,
            up1,
            fuse1,
            up2,
            fuse2,
            tail,
            out,
        }
    }

    /// Restored low-resolution image from the (downsampled) noisy pair.
    pub fn forward(&self, tape: &Tape<T>, p: &[Var], l: Var, s: Var) -> Result<Var> {
        let shape = tape.shape(l);
        if tape.shape(s) != shape || shape.c != 3 {
            return Err(Error::shape("deblurnet", format!("inputs {} and {}", shape, tape.shape(s))));
        }
        check_multiple(shape, 4, "deblurnet")?;
        let x = tape.concat_channels(&[l, s])?;
        let e1 = self.head.forward_act(tape, p, x)?;
        let d = tape.dwt2(e1)?;
        let e2 = self.down1.forward_act(tape, p, d)?;
        let d = tape.dwt2(e2)?;
        let mut h = self.down2.forward_act(tape, p, d)?;
        for blk in &self.bottleneck {
            h = blk.forward(tape, p, h)?;
        }
        let u = self.up1.forward_act(tape, p, h)?;
        let u = tape.idwt2(u)?;
        let u = tape.concat_channels(&[u, e2])?;
        let u = self.fuse1.forward_act(tape, p, u)?;
        let u = self.up2.forward_act(tape, p, u)?;
        let u = tape.idwt2(u)?;
        let u = tape.concat_channels(&[u, e1])?;
        let mut h = self.fuse2.forward_act(tape, p, u)?;
        for blk in &self.tail {
            h = blk.forward(tape, p, h)?;
        }
        self.out.forward(tape, p, h)
    }

    /// Inference on plain tensors.
    pub fn run(&self, l: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (lv, sv) = (tape.constant(l.clone()), tape.constant(s.clone()));
        let t = self.forward(&tape, &p, lv, sv)?;
        Ok((*tape.value(t)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn parameter_count_is_stable() {
        let cfg = ModelConfig {
            deblur_base: 4,
            res_layers: 1,
            deblur_blocks: 1,
            ..ModelConfig::default()
        };
        let net = DeblurNet::<f32>::new(&cfg, 0);
        let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
        let b = 4;
        let expected = conv(6, b, 3)
            + conv(4 * b, 2 * b, 3)
            + conv(8 * b, 4 * b, 3)
            + 2 * conv(4 * b, 4 * b, 3)
            + conv(4 * b, 8 * b, 3)
            + conv(4 * b, 2 * b, 1)
            + conv(2 * b, 4 * b, 3)
            + conv(2 * b, b, 1)
            + 2 * conv(b, b, 3)
            + conv(b, 3, 3);
        assert_eq!(net.params.numel(), expected);
        let x = Tensor::full(Shape::new(1, 3, 6, 6), 0.5f32);
        assert!(net.run(&x, &x).is_err());
    }
}
