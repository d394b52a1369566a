//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

/// Entries whose gradients are both smaller than this are compared on an
/// absolute scale instead of a relative one.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Times a failing entry is re-estimated with a tenfold smaller step.
const KINK_REFINEMENTS: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            step: 1e-5,
            tolerance,
            max_entries: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, max_entries: usize, seed: u64) -> Self {
        self.max_entries = Some(max_entries);
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_relative_error: f64,
    /// Entries where the step straddled a non-differentiable point, so the
    /// estimate was taken with a smaller step.
    pub kinks: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() <= self.tolerance
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_relative_error > self.tolerance)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares backward-pass gradients of the scalar built by `build` against
/// central differences, one parameter entry at a time.
///
/// A mismatching entry is re-estimated with a tenfold smaller step. When the
/// two estimates disagree the function is not smooth across the original step
/// (a ReLU crossing zero, say) and the smaller-step estimate is used instead;
/// when they agree the mismatch stands.
///
/// Gradients of `params` are cleared before and after the check.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], config: GradCheckConfig, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grad(params);
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| {
            let p = store.get(id);
            p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.len()])
        })
        .collect();
    store.zero_grad(params);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut checks = Vec::with_capacity(params.len());
    for (slot, &id) in params.iter().enumerate() {
        let n = store.value(id).len();
        let entries: Vec<usize> = match config.max_entries {
            Some(limit) if limit < n => {
                let mut picked = sample(&mut rng, n, limit).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut kinks = 0;
        for &i in &entries {
            let analytic = analytic[slot][i];
            let mut step = config.step;
            let mut numeric = central_difference(store, id, i, step, &mut build)?;
            for _ in 0..KINK_REFINEMENTS {
                if relative_error(analytic, numeric) <= config.tolerance {
                    break;
                }
                step /= 10.0;
                let finer = central_difference(store, id, i, step, &mut build)?;
                if relative_error(numeric, finer) <= config.tolerance {
                    break;
                }
                kinks += 1;
                numeric = finer;
            }
            worst = worst.max(relative_error(analytic, numeric));
        }
        checks.push(ParamCheck {
            name: store.qualified_name(id),
            entries_checked: entries.len(),
            max_relative_error: worst,
            kinks,
        });
    }
    Ok(GradCheckReport {
        params: checks,
        tolerance: config.tolerance,
    })
}

fn central_difference<F>(store: &mut ParamStore, id: ParamId, i: usize, step: f64, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let original = store.value(id).data()[i];
    store.get_mut(id).value.data_mut()[i] = original + step;
    let plus = evaluate(store, build);
    store.get_mut(id).value.data_mut()[i] = original - step;
    let minus = evaluate(store, build);
    store.get_mut(id).value.data_mut()[i] = original;
    Ok((plus? - minus?) / (2.0 * step))
}

fn evaluate<F>(store: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.value(loss).item()
}
