//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::Var;

/// Below this magnitude gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    // A tracking graph, so training-only ops such as dropout behave the same
    // as in the analytic pass.
    let mut g = Graph::new(store);
    let l = f(&mut g)?;
    Ok(g.value(l).data()[0])
}

/// Compares `backward` of the scalar built by `f` against central
/// differences for the parameters `ids` (all parameters when `None`).
pub fn check<F>(store: &ParamStore, ids: Option<&[ParamId]>, opts: &CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        g.backward(l)?
    };
    let ids: Vec<ParamId> = ids.map_or_else(|| store.ids().collect(), <[ParamId]>::to_vec);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = CheckReport::default();
    for id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let w = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = w + opts.step;
            let up = eval(&work, &f)?;
            work.get_mut(id).data_mut()[i] = w - opts.step;
            let down = eval(&work, &f)?;
            work.get_mut(id).data_mut()[i] = w;
            let numeric = (up - down) / (2.0 * opts.step);
            let e = rel_err(grads.get(id)[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]", store.name(id));
            }
        }
    }
    Ok(report)
}
