//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates the forward graph, so it is
//! independent of every backward rule it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// One-sided differences disagreeing by more than this relative amount
    /// mark a ReLU/abs/max switch inside the stencil. The analytic value may
    /// then match either one-sided difference instead of the central one.
    pub kink_threshold: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            kink_threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub compared: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Comparisons whose stencil straddled a non-differentiable point.
    pub kinks: usize,
}

/// Loss values at `x - h`, `x` and `x + h`.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    minus: f64,
    base: f64,
    plus: f64,
    step: f64,
}

impl CheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, s: Stencil, opts: &CheckOptions) {
        let central = (s.plus - s.minus) / (2.0 * s.step);
        let forward = (s.plus - s.base) / s.step;
        let backward = (s.base - s.minus) / s.step;
        let mut err = relative_error(analytic, central, opts.floor);
        let mut numeric = central;
        if relative_error(forward, backward, opts.floor) > opts.kink_threshold {
            self.kinks += 1;
            for side in [forward, backward] {
                let e = relative_error(analytic, side, opts.floor);
                if e < err {
                    err = e;
                    numeric = side;
                }
            }
        }
        self.compared += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<T, F>(inputs: &[Tensor<T>], build: &F) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn loss_at<T, F>(inputs: &[Tensor<T>], build: &F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(inputs, build)?;
    Ok(tape.value(out).sum().to_f64_lossy())
}

/// Analytic gradients of `build` with respect to each input.
pub fn analytic_gradients<T, F>(inputs: &[Tensor<T>], build: &F) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(inputs, build)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| grads.take(v).expect("param leaf has a gradient"))
        .collect())
}

/// Compares every element of every input's gradient against central
/// differences of the scalar produced by `build`.
pub fn check_elements<T, F>(inputs: &[Tensor<T>], opts: CheckOptions, build: F) -> Result<CheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &build)?;
    let base = loss_at(inputs, &build)?;
    let mut report = CheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let stencil = element_stencil(&mut probe, i, e, base, opts.step, &build)?;
            report.record(i, e, grad.data()[e].to_f64_lossy(), stencil, &opts);
        }
    }
    Ok(report)
}

/// Like [`check_elements`] but only for `per_input` seeded random elements
/// of each input (all elements when the input is smaller).
pub fn check_sampled<T, F>(
    inputs: &[Tensor<T>],
    opts: CheckOptions,
    per_input: usize,
    seed: u64,
    build: F,
) -> Result<CheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &build)?;
    let base = loss_at(inputs, &build)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if grad.len() <= per_input {
            (0..grad.len()).collect()
        } else {
            (0..per_input).map(|_| rng.gen_range(0..grad.len())).collect()
        };
        for e in picks {
            let stencil = element_stencil(&mut probe, i, e, base, opts.step, &build)?;
            report.record(i, e, grad.data()[e].to_f64_lossy(), stencil, &opts);
        }
    }
    Ok(report)
}

/// Checks the directional derivative along a seeded random unit direction,
/// one direction per input. Covers every element of every input at the cost
/// of two forward evaluations per input.
pub fn check_directional<T, F>(
    inputs: &[Tensor<T>],
    opts: CheckOptions,
    seed: u64,
    build: F,
) -> Result<CheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &build)?;
    let base = loss_at(inputs, &build)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        let mut dir: Vec<f64> = (0..grad.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);
        let along: f64 = grad
            .data()
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.to_f64_lossy() * d)
            .sum();
        let shifted = |sign: f64| -> Result<f64> {
            let mut probe = inputs.to_vec();
            for (v, d) in probe[i].data_mut().iter_mut().zip(&dir) {
                *v += T::lit(sign * opts.step * d);
            }
            loss_at(&probe, &build)
        };
        let stencil = Stencil {
            minus: shifted(-1.0)?,
            base,
            plus: shifted(1.0)?,
            step: opts.step,
        };
        report.record(i, 0, along, stencil, &opts);
    }
    Ok(report)
}

fn element_stencil<T, F>(
    probe: &mut [Tensor<T>],
    input: usize,
    elem: usize,
    base: f64,
    step: f64,
    build: &F,
) -> Result<Stencil>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let orig = probe[input].data()[elem];
    let h = T::lit(step);
    probe[input].data_mut()[elem] = orig + h;
    let plus = loss_at(probe, build)?;
    probe[input].data_mut()[elem] = orig - h;
    let minus = loss_at(probe, build)?;
    probe[input].data_mut()[elem] = orig;
    Ok(Stencil {
        minus,
        base,
        plus,
        step,
    })
}
