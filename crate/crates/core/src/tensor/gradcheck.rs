//! Central finite-difference oracle for graph gradients, run in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub max_entries: Option<usize>,
    /// Seed for choosing the entries when sampling.
    pub seed: u64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    /// Relative error above which one-sided differences are also tried.
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_entries: None,
            seed: 0,
            abs_floor: 1e-8,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter, entry)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Entries that only matched a one-sided difference.
    pub one_sided: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(params: &[Tensor<f64>], build: &F) -> Result<(Graph<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape();
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarOutput(shape.to_vec()));
    }
    Ok((g, out, vars))
}

/// Compares the taped gradient of the scalar built by `build` against
/// central differences, perturbing each parameter entry by `±eps`.
///
/// When the central difference disagrees, the entry may sit within `eps` of
/// a kink (relu at 0, a bilinear cell edge), where the central difference
/// averages two slopes. The entry is then also compared with second-order
/// one-sided differences, each of which stays on one side; the smallest of
/// the three errors is reported and the entry is counted in `one_sided`.
///
/// `build` receives the graph and one [`Var`] per entry of `params`, and
/// must return a single-element output. It is re-run for every perturbation,
/// so anything it computes outside the graph (e.g. a label assignment) must
/// be fixed beforehand.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, out, vars) = evaluate(params, &build)?;
    let f0 = g.value(out).item();
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        one_sided: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, (p, v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*v);
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < p.len() => {
                let mut e = sample(&mut rng, p.len(), k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..p.len()).collect(),
        };
        for e in entries {
            let x0 = p.data()[e];
            let mut at = |k: f64| -> Result<f64> {
                work[pi].data_mut()[e] = x0 + k * opts.eps;
                let (gk, ok, _) = evaluate(&work, &build)?;
                work[pi].data_mut()[e] = x0;
                Ok(gk.value(ok).item())
            };
            let (fp, fm) = (at(1.0)?, at(-1.0)?);
            let a = analytic.map_or(0.0, |t| t.data()[e]);
            let mut numeric = (fp - fm) / (2.0 * opts.eps);
            let mut rel = relative_error(a, numeric, opts.abs_floor);
            if rel > opts.tolerance {
                let forward = (-3.0 * f0 + 4.0 * fp - at(2.0)?) / (2.0 * opts.eps);
                let backward = (3.0 * f0 - 4.0 * fm + at(-2.0)?) / (2.0 * opts.eps);
                for d in [forward, backward] {
                    let r = relative_error(a, d, opts.abs_floor);
                    if r < rel {
                        rel = r;
                        numeric = d;
                    }
                }
                if rel <= opts.tolerance {
                    report.one_sided += 1;
                }
            }
            report.entries_checked += 1;
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = rel;
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
