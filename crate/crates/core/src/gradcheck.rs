//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub coords_checked: usize,
    /// Objective at the unperturbed inputs.
    pub objective: f64,
    pub h: f64,
    /// Every checked coordinate.
    pub checks: Vec<Mismatch>,
}

impl GradCheckReport {
    /// Bound on the rounding error of the stencil estimate. Each evaluation
    /// of the objective is taken to carry at most 32 ulps of `|f|`.
    pub fn rounding_floor(&self) -> f64 {
        32.0 * f64::EPSILON * self.objective.abs().max(1.0) / self.h
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of the scalar `f` over every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, h, None, 0).map(|r| r.max_rel_error)
}

/// Like [`grad_check`], but checks at most `max_coords` randomly chosen
/// coordinates per input tensor (all of them when `None`).
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let objective = g.scalar(out);
    if !objective.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        objective,
        h,
        checks: Vec::new(),
    };
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = inputs[i].data()[c];
            let mut at = |x: f64| {
                work[i].data_mut()[c] = x;
                eval(&f, &work)
            };
            // fourth-order central stencil: truncation O(h^4) lets h stay
            // large enough that rounding in f does not swamp small gradients
            let (f1, f_1) = (at(orig + h)?, at(orig - h)?);
            let (f2, f_2) = (at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
            work[i].data_mut()[c] = orig;
            let numeric = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h);
            let a = grad.data()[c];
            let err = rel_error(a, numeric);
            let m = Mismatch {
                input: i,
                coord: c,
                analytic: a,
                numeric,
            };
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(m.clone());
            }
            report.checks.push(m);
        }
    }
    Ok(report)
}

/// Gradient check of a module forward pass with respect to plain inputs
/// `extra` and the parameters `ids`, which are bound onto the tape in place of
/// their stored values. `f` sees the extra inputs only.
pub fn grad_check_module<F>(
    store: &ParamStore,
    ids: &[ParamId],
    extra: &[Tensor],
    f: F,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let mut inputs = extra.to_vec();
    inputs.extend(ids.iter().map(|&id| store.tensor(id).clone()));
    let k = extra.len();
    grad_check_sampled(
        |g, vars| {
            let mut ctx = Ctx::eval(g, store);
            for (&id, &v) in ids.iter().zip(&vars[k..]) {
                ctx.bind(id, v);
            }
            f(&mut ctx, &vars[..k])
        },
        &inputs,
        h,
        max_coords,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::vector(&[0.3, -1.2, 4.0]);
        let err = grad_check(|g, v| g.sum(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let sq = g.square(v).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);
        let err = grad_check(
            |g, v| {
                let sq = g.square(v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_fails() {
        let x = Tensor::vector(&[-1.0]);
        let r = grad_check(
            |g, v| {
                let l = g.ln(v[0])?;
                g.sum(l)
            },
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
