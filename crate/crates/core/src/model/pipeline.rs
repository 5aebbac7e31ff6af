use super::{mask_inputs, Ablation, DeblurNet, EnhanceNet, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::autodiff::{Tape, Var};
use crate::tensor::{area_resize, avg_pool, Tensor};

/// Coarser offsets brought to a grid twice as fine: bilinear ×2, then ×2 in
/// value since one coarse pixel spans two fine ones.
pub fn upscale_offsets<T: Scalar>(tape: &Tape<T>, offsets: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(offsets);
    if (2 * s.h, 2 * s.w) != (h, w) {
        return Err(Error::shape(
            "upscale_offsets",
            format!("offsets at {}x{} cannot feed a {h}x{w} level", s.h, s.w),
        ));
    }
    let up = tape.bilinear_resize(offsets, h, w)?;
    tape.scale(up, 2.0)
}

/// Deblur-stage inputs at training time: both images average-pooled by `factor`.
pub fn deblur_inputs<T: Scalar>(l_n: &Tensor<T>, s_n: &Tensor<T>, factor: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((avg_pool(l_n, factor)?, avg_pool(s_n, factor)?))
}

/// L1 between the deblur output and the target pooled to its resolution.
pub fn loss_deblur<T: Scalar>(tape: &Tape<T>, t: Var, z: &Tensor<T>, factor: usize) -> Result<Var> {
    tape.l1_loss(t, &avg_pool(z, factor)?)
}

pub fn loss_enhance<T: Scalar>(tape: &Tape<T>, y: Var, z: &Tensor<T>) -> Result<Var> {
    tape.l1_loss(y, z)
}

/// Extends `x` to `h × w` by repeating its last row and column.
pub fn pad_replicate<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h < s.h || w < s.w {
        return Err(invalid(format!("cannot pad {s} down to {h}x{w}")));
    }
    if (h, w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(s.with_hw(h, w), |n, c, y, xx| x.at(n, c, y.min(s.h - 1), xx.min(s.w - 1))))
}

/// Outputs of [`two_phase_infer`].
#[derive(Clone, Debug)]
pub struct Inference<T: Scalar> {
    /// Final restoration, clamped to `[0, 1]`.
    pub y: Tensor<T>,
    /// Deblur result at the fixed resolution.
    pub t: Tensor<T>,
    /// Deblur result upsampled to the input size.
    pub t_up: Tensor<T>,
}

/// Area-resize both inputs to `R × R`, deblur, upsample bilinearly to the
/// input size, then refine. Without an enhancement net the upsampled deblur
/// result is returned.
pub fn two_phase_infer<T: Scalar>(
    deblur: &DeblurNet<T>,
    enhance: Option<&EnhanceNet<T>>,
    l_n: &Tensor<T>,
    s_n: &Tensor<T>,
    cfg: &ModelConfig,
    ab: &Ablation,
) -> Result<Inference<T>> {
    cfg.validate()?;
    let shape = l_n.shape();
    s_n.expect_shape(shape, "two_phase_infer")?;
    let r = cfg.resolution;
    if shape.h < r || shape.w < r {
        return Err(invalid(format!(
            "input {}x{} is smaller than the deblur resolution {r}; lower model.resolution",
            shape.h, shape.w
        )));
    }
    let (l_n, s_n) = mask_inputs(l_n, s_n, ab);
    let t = deblur.run(&area_resize(&l_n, r, r)?, &area_resize(&s_n, r, r)?)?;

    let tape = Tape::new();
    let tv = tape.constant(t.clone());
    let t_up_v = tape.bilinear_resize(tv, shape.h, shape.w)?;
    let t_up = (*tape.value(t_up_v)).clone();

    let y = match enhance {
        None => t_up.clamp01(),
        Some(net) => {
            let (ph, pw) = (shape.h.div_ceil(16) * 16, shape.w.div_ceil(16) * 16);
            let y = net.run(
                &pad_replicate(&s_n, ph, pw)?,
                &pad_replicate(&l_n, ph, pw)?,
                &pad_replicate(&t_up, ph, pw)?,
            )?;
            y.crop(0, 0, shape.h, shape.w)?.clamp01()
        }
    };
    Ok(Inference { y, t, t_up })
}
