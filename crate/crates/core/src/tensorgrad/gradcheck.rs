//! Central finite-difference checking of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so exact zeros compare sanely.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Report {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F, with_grad: bool) -> Result<(f64, Vec<Option<Tensor<f64>>>)>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
    let loss = f(&vars)?;
    if loss.numel() != 1 {
        return Err(Error::contract("gradcheck closure must return a scalar"));
    }
    if with_grad {
        tape.backward(&loss)?;
    }
    Ok((loss.item(), vars.iter().map(|v| v.grad()).collect()))
}

/// Compare the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h` on every input element.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Report>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let (_, analytic) = eval(inputs, &f, true)?;
    let mut report = Report {
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            probe[ti].data_mut()[j] = x0 + h;
            let (fp, _) = eval(&probe, &f, false)?;
            probe[ti].data_mut()[j] = x0 - h;
            let (fm, _) = eval(&probe, &f, false)?;
            probe[ti].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g.data()[j]);
            let e = rel_error(a, numeric);
            if !report.max_rel_error.is_nan() && (e.is_nan() || e > report.max_rel_error) {
                report.max_rel_error = e;
                report.worst = Some((ti, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// One primitive under test: an input generator and a scalar-valued probe.
pub struct Case {
    pub name: &'static str,
    pub inputs: fn(&mut dyn FnMut() -> f64) -> Vec<Tensor<f64>>,
    pub f: fn(&[Var<f64>]) -> Result<Var<f64>>,
}

/// Contract a tensor to a scalar with fixed, non-uniform weights so that
/// every output element contributes a distinct amount.
pub fn project(y: &Var<f64>) -> Result<Var<f64>> {
    let w = Tensor::from_fn(y.shape().to_vec(), |i| 1.5 + (1.3 * i as f64 + 0.7).sin());
    y.mul(&y.tape().constant(w))?.sum()
}

fn t(shape: &[usize], g: &mut dyn FnMut() -> f64, map: impl Fn(f64) -> f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| map(g()))
}

fn signed(u: f64) -> f64 {
    u * 2.0 - 1.0
}

/// Magnitude in [0.1, 1] with random sign; keeps clear of kinks at zero.
fn off_zero(u: f64) -> f64 {
    let s = signed(u);
    s.signum() * (0.1 + 0.9 * s.abs())
}

fn positive(u: f64) -> f64 {
    0.2 + 1.8 * u
}

/// Every primitive on the tape.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            inputs: |g| vec![t(&[2, 3], g, signed), t(&[2, 3], g, signed)],
            f: |v| project(&v[0].add(&v[1])?),
        },
        Case {
            name: "add(scalar broadcast)",
            inputs: |g| vec![t(&[2, 3], g, signed), t(&[1], g, signed)],
            f: |v| project(&v[0].add(&v[1])?),
        },
        Case {
            name: "sub",
            inputs: |g| vec![t(&[2, 3], g, signed), t(&[2, 3], g, signed)],
            f: |v| project(&v[0].sub(&v[1])?),
        },
        Case {
            name: "mul",
            inputs: |g| vec![t(&[2, 3], g, signed), t(&[2, 3], g, signed)],
            f: |v| project(&v[0].mul(&v[1])?),
        },
        Case {
            name: "div",
            inputs: |g| vec![t(&[2, 3], g, signed), t(&[2, 3], g, off_zero)],
            f: |v| project(&v[0].div(&v[1])?),
        },
        Case {
            name: "pow",
            inputs: |g| vec![t(&[2, 3], g, positive), t(&[2, 3], g, |u| 2.0 * signed(u) + 0.5)],
            f: |v| project(&v[0].pow(&v[1])?),
        },
        Case {
            name: "pow(scalar exponent)",
            inputs: |g| vec![t(&[2, 3], g, positive), t(&[1], g, |u| 0.8 + 2.0 * u)],
            f: |v| project(&v[0].pow(&v[1])?),
        },
        Case {
            name: "powf",
            inputs: |g| vec![t(&[2, 3], g, positive)],
            f: |v| project(&v[0].powf(1.7)?),
        },
        Case {
            name: "neg",
            inputs: |g| vec![t(&[2, 3], g, signed)],
            f: |v| project(&v[0].neg()?),
        },
        Case {
            name: "exp",
            inputs: |g| vec![t(&[2, 3], g, signed)],
            f: |v| project(&v[0].exp()?),
        },
        Case {
            name: "log",
            inputs: |g| vec![t(&[2, 3], g, positive)],
            f: |v| project(&v[0].log()?),
        },
        Case {
            name: "arctan",
            inputs: |g| vec![t(&[2, 3], g, |u| 3.0 * signed(u))],
            f: |v| project(&v[0].atan()?),
        },
        Case {
            name: "sigmoid",
            inputs: |g| vec![t(&[2, 3], g, |u| 4.0 * signed(u))],
            f: |v| project(&v[0].sigmoid()?),
        },
        Case {
            name: "tanh",
            inputs: |g| vec![t(&[2, 3], g, |u| 2.0 * signed(u))],
            f: |v| project(&v[0].tanh()?),
        },
        Case {
            name: "relu_leaky",
            inputs: |g| vec![t(&[2, 3], g, off_zero)],
            f: |v| project(&v[0].leaky_relu(0.2)?),
        },
        Case {
            name: "softplus",
            inputs: |g| vec![t(&[2, 3], g, |u| 4.0 * signed(u))],
            f: |v| project(&v[0].softplus()?),
        },
        Case {
            name: "sqrt",
            inputs: |g| vec![t(&[2, 3], g, positive)],
            f: |v| project(&v[0].sqrt()?),
        },
        Case {
            name: "erf",
            inputs: |g| vec![t(&[2, 3], g, |u| 2.0 * signed(u))],
            f: |v| project(&v[0].erf()?),
        },
        Case {
            name: "abs",
            inputs: |g| vec![t(&[2, 3], g, off_zero)],
            f: |v| project(&v[0].abs()?),
        },
        Case {
            name: "add_scalar",
            inputs: |g| vec![t(&[2, 3], g, signed)],
            f: |v| project(&v[0].add_scalar(0.75)?),
        },
        Case {
            name: "mul_scalar",
            inputs: |g| vec![t(&[2, 3], g, signed)],
            f: |v| project(&v[0].mul_scalar(-1.25)?),
        },
        Case {
            name: "min_scalar",
            inputs: |g| vec![t(&[2, 3], g, |u| 0.3 + off_zero(u))],
            f: |v| project(&v[0].min_scalar(0.3)?),
        },
        Case {
            name: "max_scalar",
            inputs: |g| vec![t(&[2, 3], g, |u| 0.3 + off_zero(u))],
            f: |v| project(&v[0].max_scalar(0.3)?),
        },
        Case {
            name: "sum",
            inputs: |g| vec![t(&[2, 3], g, signed)],
            f: |v| v[0].square()?.sum(),
        },
        Case {
            name: "mean",
            inputs: |g| vec![t(&[2, 3], g, signed)],
            f: |v| v[0].square()?.mean(),
        },
        Case {
            name: "sum_axis",
            inputs: |g| vec![t(&[2, 3, 4], g, signed)],
            f: |v| project(&v[0].sum_axis(1)?.square()?),
        },
        Case {
            name: "broadcast_to",
            inputs: |g| vec![t(&[2, 1, 3], g, signed)],
            f: |v| project(&v[0].broadcast_to(&[2, 4, 3])?),
        },
        Case {
            name: "matmul",
            inputs: |g| vec![t(&[3, 4], g, signed), t(&[4, 2], g, signed)],
            f: |v| project(&v[0].matmul(&v[1])?),
        },
        Case {
            name: "conv2d(replicate, stride 1)",
            inputs: |g| {
                vec![
                    t(&[1, 2, 5, 5], g, signed),
                    t(&[3, 2, 3, 3], g, signed),
                    t(&[3], g, signed),
                ]
            },
            f: |v| project(&v[0].conv2d(&v[1], Some(&v[2]), 1, super::Padding::Replicate(1))?),
        },
        Case {
            name: "conv2d(replicate, stride 2)",
            inputs: |g| vec![t(&[2, 2, 5, 6], g, signed), t(&[2, 2, 3, 3], g, signed)],
            f: |v| project(&v[0].conv2d(&v[1], None, 2, super::Padding::Replicate(1))?),
        },
        Case {
            name: "conv2d(valid)",
            inputs: |g| vec![t(&[1, 1, 6, 5], g, signed), t(&[1, 1, 3, 2], g, signed)],
            f: |v| project(&v[0].conv2d(&v[1], None, 1, super::Padding::Valid)?),
        },
        Case {
            name: "unfold",
            inputs: |g| vec![t(&[1, 2, 4, 4], g, signed)],
            f: |v| project(&v[0].unfold(3, super::Padding::Replicate(1))?),
        },
        Case {
            name: "upsample_nearest2x",
            inputs: |g| vec![t(&[1, 2, 3, 2], g, signed)],
            f: |v| project(&v[0].upsample_nearest2x()?),
        },
        Case {
            name: "concat",
            inputs: |g| vec![t(&[1, 2, 3, 3], g, signed), t(&[1, 1, 3, 3], g, signed)],
            f: |v| project(&Var::concat(&[v[0].clone(), v[1].clone()], 1)?),
        },
        Case {
            name: "slice",
            inputs: |g| vec![t(&[2, 5, 3], g, signed)],
            f: |v| project(&v[0].slice(1, 1, 3)?),
        },
        Case {
            name: "reshape",
            inputs: |g| vec![t(&[2, 6], g, signed)],
            f: |v| project(&v[0].reshape(&[3, 4])?.square()?),
        },
        Case {
            name: "block_sum",
            inputs: |g| vec![t(&[1, 1, 5, 7], g, signed)],
            f: |v| project(&v[0].block_sum(2, 3)?.square()?),
        },
        Case {
            name: "adaptive_avg_pool2d",
            inputs: |g| vec![t(&[1, 2, 7, 5], g, signed)],
            f: |v| project(&v[0].adaptive_avg_pool2d(3, 2)?.square()?),
        },
    ]
}
