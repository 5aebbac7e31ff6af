//! Built-in invariant suite: deformable/dense convolution agreement, Haar
//! round trips and finite-difference gradient checks of every tape op.

use std::fmt;

use rand::Rng as _;

use crate::error::Result;
use crate::rng::{stream, Rng, Role};
use crate::tensor::autodiff::{ConvVars, Tape, Var};
use crate::tensor::gradcheck::{gradient_check, DEFAULT_STEP};
use crate::tensor::{ConvGeometry, Shape, Tensor};

pub const DEFORM_CASES: usize = 50;
pub const DEFORM_TOL: f64 = 1e-5;
pub const DWT_CASES: usize = 100;
pub const DWT_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const OFFSET_GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn uniform<T: crate::Scalar>(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.random_range(lo..hi)))
}

/// Zero offsets and a unit mask against the dense convolution, single
/// precision, over random shapes and geometries.
pub fn deform_degeneracy(cases: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let rng = &mut stream(seed, i as u64, Role::SelfTest);
        let (n, c, co) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let (h, w) = (rng.random_range(3..12), rng.random_range(3..12));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let geom = if rng.random_bool(0.5) {
            ConvGeometry::same(k)
        } else {
            ConvGeometry::strided(k, 2)
        };
        let x = uniform::<f32>(Shape::new(n, c, h, w), rng, -1.0, 1.0);
        let wt = uniform::<f32>(Shape::new(co, c, k, k), rng, -1.0, 1.0);
        let b = uniform::<f32>(Shape::new(1, co, 1, 1), rng, -1.0, 1.0);
        let run = || -> Result<f64> {
            let tape = Tape::<f32>::new();
            let xv = tape.constant(x.clone());
            let p = ConvVars {
                weight: tape.constant(wt.clone()),
                bias: Some(tape.constant(b.clone())),
                geom,
            };
            let dense = tape.conv2d(xv, p)?;
            let os = tape.shape(dense);
            let taps = k * k;
            let off = tape.constant(Tensor::zeros(Shape::new(n, 2 * taps, os.h, os.w)));
            let mask = tape.constant(Tensor::ones(Shape::new(n, taps, os.h, os.w)));
            let deform = tape.deform_conv2d(xv, p, off, mask)?;
            Ok(tape.value(dense).max_abs_diff(&tape.value(deform)))
        };
        match run() {
            Ok(d) => worst = worst.max(d),
            Err(e) => {
                return Check {
                    name: "deform-degeneracy".into(),
                    passed: false,
                    detail: format!("case {i}: {e}"),
                }
            }
        }
    }
    Check {
        name: "deform-degeneracy".into(),
        passed: worst < DEFORM_TOL,
        detail: format!("{cases} cases, max abs diff {worst:.3e} (tol {DEFORM_TOL:.0e})"),
    }
}

/// `idwt2(dwt2(x))` against `x` on random even-sized tensors.
pub fn dwt_round_trip(cases: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let rng = &mut stream(seed, (DEFORM_CASES + i) as u64, Role::SelfTest);
        let shape = Shape::new(
            rng.random_range(1..3),
            rng.random_range(1..5),
            2 * rng.random_range(1..17),
            2 * rng.random_range(1..17),
        );
        let x = uniform::<f32>(shape, rng, 0.0, 1.0);
        let tape = Tape::<f32>::new();
        let v = tape.constant(x.clone());
        match tape.dwt2(v).and_then(|d| tape.idwt2(d)) {
            Ok(back) => worst = worst.max(tape.value(back).max_abs_diff(&x)),
            Err(e) => {
                return Check {
                    name: "dwt-round-trip".into(),
                    passed: false,
                    detail: format!("case {i}: {e}"),
                }
            }
        }
    }
    Check {
        name: "dwt-round-trip".into(),
        passed: worst < DWT_TOL,
        detail: format!("{cases} tensors, max abs error {worst:.3e} (tol {DWT_TOL:.0e})"),
    }
}

/// Offsets whose fractional part stays in `[0.2, 0.8]`, so a finite
/// difference step never crosses an integer sampling position.
fn kink_free_offsets(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-2i32..2) as f64 + rng.random_range(0.2..0.8))
}

/// Values at least `gap` away from zero.
fn away_from_zero(shape: Shape, rng: &mut Rng, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

type OpFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

/// Every differentiable op in double precision with central differences.
pub fn gradient_checks(seed: u64) -> Vec<Check> {
    let rng = &mut stream(seed, 10_000, Role::SelfTest);
    let x = uniform::<f64>(Shape::new(2, 4, 6, 8), rng, -1.0, 1.0);
    let y = uniform::<f64>(Shape::new(2, 4, 6, 8), rng, -1.0, 1.0);
    let z = uniform::<f64>(Shape::new(2, 2, 6, 8), rng, -1.0, 1.0);
    let cx = uniform::<f64>(Shape::new(1, 2, 6, 6), rng, -1.0, 1.0);
    let cw = uniform::<f64>(Shape::new(3, 2, 3, 3), rng, -1.0, 1.0);
    let cb = uniform::<f64>(Shape::new(1, 3, 1, 1), rng, -1.0, 1.0);
    let dx = uniform::<f64>(Shape::new(1, 2, 5, 5), rng, -1.0, 1.0);
    let dw = uniform::<f64>(Shape::new(2, 2, 3, 3), rng, -1.0, 1.0);
    let db = uniform::<f64>(Shape::new(1, 2, 1, 1), rng, -1.0, 1.0);
    let doff = kink_free_offsets(Shape::new(1, 18, 5, 5), rng);
    let dmask = uniform::<f64>(Shape::new(1, 9, 5, 5), rng, 0.1, 0.9);
    let target = uniform::<f64>(Shape::new(2, 4, 6, 8), rng, -1.0, 1.0);
    let pred = target.zip_map(&away_from_zero(target.shape(), rng, 0.05), "selftest", |t, d| t + d);
    let weights = uniform::<f64>(Shape::new(2, 4, 6, 8), rng, -1.0, 1.0);
    let pred = match pred {
        Ok(p) => p,
        Err(e) => {
            return vec![Check {
                name: "gradcheck".into(),
                passed: false,
                detail: e.to_string(),
            }]
        }
    };

    let conv = |geom: ConvGeometry| -> OpFn {
        Box::new(move |t, v| {
            t.conv2d(
                v[0],
                ConvVars {
                    weight: v[1],
                    bias: Some(v[2]),
                    geom,
                },
            )
        })
    };
    let cases: Vec<(&str, OpFn, Vec<Tensor<f64>>)> = vec![
        ("conv2d", conv(ConvGeometry::same(3)), vec![cx.clone(), cw.clone(), cb.clone()]),
        ("conv2d-strided", conv(ConvGeometry::strided(3, 2)), vec![cx, cw, cb]),
        (
            "deform_conv2d",
            Box::new(|t, v| {
                t.deform_conv2d(
                    v[0],
                    ConvVars {
                        weight: v[1],
                        bias: Some(v[2]),
                        geom: ConvGeometry::same(3),
                    },
                    v[3],
                    v[4],
                )
            }),
            vec![dx, dw, db, doff, dmask],
        ),
        ("dwt2", Box::new(|t, v| t.dwt2(v[0])), vec![x.clone()]),
        ("idwt2", Box::new(|t, v| t.idwt2(v[0])), vec![x.clone()]),
        ("avg_pool", Box::new(|t, v| t.avg_pool(v[0], 2)), vec![x.clone()]),
        ("bilinear_resize-down", Box::new(|t, v| t.bilinear_resize(v[0], 5, 3)), vec![x.clone()]),
        ("bilinear_resize-up", Box::new(|t, v| t.bilinear_resize(v[0], 12, 16)), vec![x.clone()]),
        (
            "leaky_relu",
            Box::new(|t, v| t.leaky_relu(v[0], 0.2)),
            vec![away_from_zero(x.shape(), rng, 0.05)],
        ),
        ("sigmoid", Box::new(|t, v| t.sigmoid(v[0])), vec![x.clone()]),
        ("add", Box::new(|t, v| t.add(v[0], v[1])), vec![x.clone(), y]),
        ("scale", Box::new(|t, v| t.scale(v[0], -1.5)), vec![x.clone()]),
        (
            "concat_channels",
            Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
            vec![x.clone(), z],
        ),
        ("narrow_channels", Box::new(|t, v| t.narrow_channels(v[0], 1, 2)), vec![x]),
        ("l1_loss", Box::new(move |t, v| t.l1_loss(v[0], &target)), vec![pred.clone()]),
        ("weighted_sum", Box::new(move |t, v| t.weighted_sum(v[0], &weights)), vec![pred]),
    ];

    cases
        .into_iter()
        .map(|(name, f, inputs)| {
            let name = format!("gradcheck {name}");
            match gradient_check(f, &inputs, DEFAULT_STEP) {
                Err(e) => Check {
                    name,
                    passed: false,
                    detail: e.to_string(),
                },
                Ok(report) => {
                    // Input 3 of the deformable case is the offset tensor.
                    let deform = inputs.len() == 5;
                    let tol = |i: usize| if deform && i == 3 { OFFSET_GRAD_TOL } else { GRAD_TOL };
                    let passed = report.kinks() == 0 && report.inputs.iter().all(|r| r.max_rel_error < tol(r.index));
                    Check {
                        name,
                        passed,
                        detail: format!(
                            "max rel error {:.3e}, {} kinks",
                            report.max_rel_error(),
                            report.kinks()
                        ),
                    }
                }
            }
        })
        .collect()
}

/// The full suite in a fixed order.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = vec![deform_degeneracy(DEFORM_CASES, seed), dwt_round_trip(DWT_CASES, seed)];
    out.extend(gradient_checks(seed));
    out
}
