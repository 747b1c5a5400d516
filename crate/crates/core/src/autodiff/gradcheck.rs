//! Central finite-difference checks for analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// At most this many evenly spaced coordinates per input.
    Strided(usize),
}

impl Probe {
    fn coords(self, len: usize) -> Vec<usize> {
        match self {
            Probe::All => (0..len).collect(),
            Probe::Strided(k) if k >= len => (0..len).collect(),
            Probe::Strided(k) => {
                let mut v: Vec<usize> = (0..k).map(|i| i * len / k + (i * 7919) % (len / k).max(1)).collect();
                v.dedup();
                v
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub probed: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the reverse-mode gradient of scalar `f` against central
/// differences with step `eps`, perturbing one coordinate at a time.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with(f, inputs, probe, |at, analytic| {
        let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
        Ok(relative_error(analytic, numeric))
    })
}

/// Like [`grad_check`], but each coordinate is compared against central
/// differences at every step in `steps` and scored by the closest one.
/// Small steps lose tiny derivatives to round-off and large steps straddle
/// ReLU/max kinks; an incorrect gradient disagrees at all of them.
pub fn grad_check_steps<F>(f: F, inputs: &[Tensor<f64>], steps: &[f64], probe: Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if steps.is_empty() {
        return Err(contract("grad_check_steps needs at least one step"));
    }
    check_with(f, inputs, probe, |at, analytic| {
        let mut best = f64::INFINITY;
        for &eps in steps {
            let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
            best = best.min(relative_error(analytic, numeric));
        }
        Ok(best)
    })
}

fn check_with<F, D>(f: F, inputs: &[Tensor<f64>], probe: Probe, mut score: D) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    D: FnMut(&mut dyn FnMut(f64) -> Result<f64>, f64) -> Result<f64>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(contract(format!("grad_check needs a scalar function, got {:?}", g.shape(out))));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, (v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut worst: f64 = 0.0;
        for i in probe.coords(input.len()) {
            let orig = input.data()[i];
            let mut at = |step: f64| {
                work[k].data_mut()[i] = orig + step;
                let y = eval(&work);
                work[k].data_mut()[i] = orig;
                y
            };
            worst = worst.max(score(&mut at, analytic[i])?);
            report.probed += 1;
        }
        report.per_input.push(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let a = Tensor::from_fn(&[4, 3], |i| 0.1 * i as f64 - 0.4);
        let x = Tensor::from_fn(&[3, 2], |i| 1.0 - 0.3 * i as f64);
        let r = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(g.sum_all(y))
            },
            &[a, x],
            1e-6,
            Probe::All,
        )
        .unwrap();
        assert!(r.max_rel_err() <= 1e-9, "{}", r.max_rel_err());
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_fn(&[10], |i| if i % 2 == 0 { 0.5 + i as f64 } else { -0.2 - i as f64 });
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                let y2 = g.mul(y, y)?;
                Ok(g.sum_all(y2))
            },
            &[x],
            1e-6,
            Probe::All,
        )
        .unwrap();
        assert!(r.max_rel_err() <= 1e-6);
    }

    #[test]
    fn step_set_tolerates_a_nearby_kink() {
        // Kink 3e-5 away: a step of 1e-4 straddles it, 1e-6 does not.
        let x = Tensor::new(&[1], vec![3e-5]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.relu(v[0]);
            Ok(g.sum_all(y))
        };
        let coarse = grad_check(f, &[x.clone()], 1e-4, Probe::All).unwrap();
        assert!(coarse.max_rel_err() > 1e-4);
        let r = grad_check_steps(f, &[x], &[1e-6, 1e-4], Probe::All).unwrap();
        assert!(r.max_rel_err() <= 1e-6, "{}", r.max_rel_err());
        assert!(grad_check_steps(f, &[Tensor::scalar(1.0)], &[], Probe::All).is_err());
    }

    #[test]
    fn strided_probe_is_bounded() {
        let c = Probe::Strided(5).coords(100);
        assert!(c.len() <= 5 && c.iter().all(|&i| i < 100));
        assert_eq!(Probe::Strided(50).coords(3), vec![0, 1, 2]);
    }
}
