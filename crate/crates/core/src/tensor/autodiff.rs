//! Dynamic reverse-mode tape over the tensor operation set.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; [`Tape::backward`] walks it once in reverse. A tape is
//! meant to live for a single forward/backward pass and is not `Sync`.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry};
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

/// Local backward rule: given the output gradient and which parents need a
/// gradient, returns one optional gradient per parent.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Convolution weight and optional bias as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeometry,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf tracked for gradients (a parameter or a checked input).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var { id: nodes.len() - 1 }
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var { id: nodes.len() - 1 })
    }

    /// Reverse sweep seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::ones(nodes[output.id].value.shape()));
        let mut visited = 0;
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited += 1;
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = rule(&g, &need)?;
            for ((&p, pg), needed) in node.parents.iter().zip(parent_grads).zip(&need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                if pg.shape() != nodes[p].value.shape() {
                    return Err(Error::Invariant(format!(
                        "gradient shape {} for node of shape {}",
                        pg.shape(),
                        nodes[p].value.shape()
                    )));
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += *b),
                    None => grads[p] = Some(pg),
                }
            }
            // Leaves keep their gradient; intermediate ones are dropped.
            grads[id] = None;
        }
        Ok(Gradients { grads, visited })
    }

    pub fn conv2d(&self, x: Var, p: ConvVars) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(p.weight);
        let bv = p.bias.map(|b| self.value(b));
        let out = kernels::conv2d_forward(&xv, &wv, bv.as_deref(), p.geom)?;
        let mut parents = vec![x, p.weight];
        parents.extend(p.bias);
        let geom = p.geom;
        self.push(
            "conv2d",
            out,
            &parents,
            Box::new(move |g, need| {
                let want = [need[0], need[1], need.get(2).copied().unwrap_or(false)];
                let gr = kernels::conv2d_backward(&xv, &wv, geom, g, want)?;
                let mut v = vec![gr.input, gr.weight];
                if need.len() > 2 {
                    v.push(gr.bias);
                }
                Ok(v)
            }),
        )
    }

    /// Modulated deformable convolution; `offsets` holds (dy, dx) pairs per
    /// tap and `mask` one modulation scalar per tap, both per output site.
    pub fn deform_conv2d(&self, x: Var, p: ConvVars, offsets: Var, mask: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(p.weight);
        let bv = p.bias.map(|b| self.value(b));
        let ov = self.value(offsets);
        let mv = self.value(mask);
        let out = kernels::deform_conv2d_forward(&xv, &wv, bv.as_deref(), &ov, &mv, p.geom)?;
        let mut parents = vec![x, p.weight, offsets, mask];
        parents.extend(p.bias);
        let geom = p.geom;
        self.push(
            "deform_conv2d",
            out,
            &parents,
            Box::new(move |g, need| {
                let has_bias = need.len() > 4;
                let want = [need[0], need[1], has_bias && need[4], need[2], need[3]];
                let gr = kernels::deform_conv2d_backward(&xv, &wv, &ov, &mv, geom, g, want)?;
                let mut v = vec![gr.conv.input, gr.conv.weight, gr.offsets, gr.mask];
                if has_bias {
                    v.push(gr.conv.bias);
                }
                Ok(v)
            }),
        )
    }

    pub fn dwt2(&self, x: Var) -> Result<Var> {
        let out = kernels::dwt2(&self.value(x))?;
        self.push("dwt2", out, &[x], Box::new(|g, _| Ok(vec![Some(kernels::idwt2(g)?)])))
    }

    pub fn idwt2(&self, x: Var) -> Result<Var> {
        let out = kernels::idwt2(&self.value(x))?;
        self.push("idwt2", out, &[x], Box::new(|g, _| Ok(vec![Some(kernels::dwt2(g)?)])))
    }

    pub fn avg_pool(&self, x: Var, factor: usize) -> Result<Var> {
        let input = self.shape(x);
        let out = kernels::avg_pool(&self.value(x), factor)?;
        self.push(
            "avg_pool",
            out,
            &[x],
            Box::new(move |g, _| Ok(vec![Some(kernels::avg_pool_backward(g, input, factor))])),
        )
    }

    /// Bilinear resize with half-pixel (align-corners-false) sampling.
    pub fn bilinear_resize(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let input = self.shape(x);
        let out = kernels::bilinear_resize_forward(&self.value(x), h, w)?;
        self.push(
            "bilinear_resize",
            out,
            &[x],
            Box::new(move |g, _| Ok(vec![Some(kernels::bilinear_resize_backward(g, input))])),
        )
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        let xv = self.value(x);
        let s = T::of(slope);
        let out = xv.map(|v| if v > T::zero() { v } else { v * s });
        self.push(
            "leaky_relu",
            out,
            &[x],
            Box::new(move |g, _| {
                Ok(vec![Some(xv.zip_map(g, "leaky_relu", |v, gv| {
                    if v > T::zero() {
                        gv
                    } else {
                        gv * s
                    }
                })?)])
            }),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let y = Rc::new(out.clone());
        self.push(
            "sigmoid",
            out,
            &[x],
            Box::new(move |g, _| {
                Ok(vec![Some(y.zip_map(g, "sigmoid", |s, gv| gv * s * (T::one() - s))?)])
            }),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "add", |x, y| x + y)?;
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|g, need| Ok(need.iter().map(|&n| n.then(|| g.clone())).collect())),
        )
    }

    /// Multiplication by a constant factor.
    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let out = self.value(x).map(|v| v * f);
        self.push("scale", out, &[x], Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * f))])))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let values: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
            .shape();
        for v in &values {
            let s = v.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
            }
        }
        let channels: Vec<usize> = values.iter().map(|v| v.shape().c).collect();
        let total: usize = channels.iter().sum();
        let out_shape = first.with_c(total);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for v in &values {
                data.extend_from_slice(v.sample(n));
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        self.push(
            "concat_channels",
            out,
            xs,
            Box::new(move |g, need| {
                let mut start = 0;
                let mut grads = Vec::with_capacity(channels.len());
                for (&c, &needed) in channels.iter().zip(need) {
                    grads.push(if needed { Some(slice_channels(g, start, c)) } else { None });
                    start += c;
                }
                Ok(grads)
            }),
        )
    }

    /// Channels `[start, start + count)`.
    pub fn narrow_channels(&self, x: Var, start: usize, count: usize) -> Result<Var> {
        let input = self.shape(x);
        if count == 0 || start + count > input.c {
            return Err(Error::shape(
                "narrow_channels",
                format!("channels [{start}, {}) of {input}", start + count),
            ));
        }
        let out = slice_channels(&self.value(x), start, count);
        self.push(
            "narrow_channels",
            out,
            &[x],
            Box::new(move |g, _| {
                let mut full = Tensor::zeros(input);
                let plane = input.plane();
                for n in 0..input.n {
                    let dst = (n * input.c + start) * plane;
                    full.data_mut()[dst..dst + count * plane].copy_from_slice(g.sample(n));
                }
                Ok(vec![Some(full)])
            }),
        )
    }

    /// Mean absolute difference against a constant target, as a 1×1×1×1 node.
    pub fn l1_loss(&self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_shape(target.shape(), "l1_loss")?;
        let count = pv.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum();
        let target = target.clone();
        self.push(
            "l1_loss",
            Tensor::scalar(T::of(total / count)),
            &[pred],
            Box::new(move |g, _| {
                let scale = g.data()[0] / T::of(count);
                Ok(vec![Some(pv.zip_map(&target, "l1_loss", |a, b| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        T::zero()
                    }
                })?)])
            }),
        )
    }

    /// `Σ x ⊙ weights` as a 1×1×1×1 node; projects tensor outputs to scalars.
    pub fn weighted_sum(&self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_shape(weights.shape(), "weighted_sum")?;
        let total: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let weights = weights.clone();
        self.push(
            "weighted_sum",
            Tensor::scalar(T::of(total)),
            &[x],
            Box::new(move |g, _| {
                let s = g.data()[0];
                Ok(vec![Some(weights.map(|w| w * s))])
            }),
        )
    }
}

fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, count: usize) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * count * plane);
    for n in 0..s.n {
        let off = (n * s.c + start) * plane;
        data.extend_from_slice(&x.data()[off..off + count * plane]);
    }
    Tensor::from_vec(s.with_c(count), data).expect("channel slice shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn leaf_gradients_survive_the_sweep() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
        let b = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
        let s = tape.add(a, b).unwrap();
        let s2 = tape.add(s, a).unwrap();
        let loss = tape.weighted_sum(s2, &Tensor::ones(Shape::new(1, 1, 2, 2))).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0; 4]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.visited(), 3);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(Shape::new(1, 1, 1, 2)));
        let b = tape.leaf(Tensor::ones(Shape::new(1, 1, 1, 2)));
        let s = tape.add(a, b).unwrap();
        let loss = tape.weighted_sum(s, &Tensor::ones(Shape::new(1, 1, 1, 2))).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 2), &[-2.0, 3.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.4, 3.0]);
    }

    #[test]
    fn l1_loss_values() {
        let tape = Tape::<f64>::new();
        let target = t(Shape::new(1, 1, 1, 3), &[0.0, 1.0, 2.0]);
        let same = tape.leaf(target.clone());
        assert_eq!(tape.value(tape.l1_loss(same, &target).unwrap()).data()[0], 0.0);
        let shifted = tape.leaf(target.map(|v| v + 0.5));
        assert_eq!(tape.value(tape.l1_loss(shifted, &target).unwrap()).data()[0], 0.5);
        let wrong = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        assert!(matches!(tape.l1_loss(wrong, &target), Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_mismatched_add() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(tape.add(a, b).is_err());
        assert!(tape.concat_channels(&[a, tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 2)))]).is_err());
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, x| (n * 8 + c * 4 + y * 2 + x) as f64));
        let b = tape.leaf(Tensor::full(Shape::new(2, 1, 2, 2), -1.0));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), Shape::new(2, 3, 2, 2));
        let back = tape.narrow_channels(cat, 0, 2).unwrap();
        assert_eq!(*tape.value(back), *tape.value(a));
        let tail = tape.narrow_channels(cat, 2, 1).unwrap();
        assert_eq!(*tape.value(tail), *tape.value(b));
        assert!(tape.narrow_channels(cat, 2, 2).is_err());
    }
}
