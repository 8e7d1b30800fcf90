//! Central finite-difference checks of tape gradients against a parameter store.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Step for the central difference.
    pub h: f64,
    /// Entries checked per tensor; tensors smaller than this are checked fully.
    pub per_tensor: usize,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            per_tensor: 12,
            floor: 1e-5,
            seed: 0,
        }
    }
}

/// Add uniform noise in `±scale` to every parameter. Fresh stores have
/// all-zero biases, which put ReLU inputs exactly on the kink; a nudge moves
/// them off it before a finite-difference check.
pub fn jitter_params<T: Scalar>(store: &mut ParamStore<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += T::lit(rng.gen_range(-scale..=scale));
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of `f` against central differences for
/// every parameter that `f` binds. `f` must build a scalar loss.
pub fn check_gradients<T, F>(
    store: &ParamStore<T>,
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic: BTreeMap<String, Vec<T>> = g
        .bound_params()
        .iter()
        .map(|(name, &v)| {
            let len = store.get(name).map_or(0, |t| t.len());
            (
                name.clone(),
                grads
                    .get(v)
                    .map_or_else(|| vec![T::zero(); len], <[T]>::to_vec),
            )
        })
        .collect();
    drop(g);

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item().to_f64_lossy())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in analytic {
        let len = grad.len();
        let picks: Vec<usize> = if len <= opts.per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, opts.per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut entry = GradCheckEntry {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in picks {
            let orig = probe
                .get(&name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
                .data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + T::lit(opts.h);
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - T::lit(opts.h);
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let a = grad[i].to_f64_lossy();
            let err = relative_error(a, numeric, opts.floor);
            if err >= entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.entries.push(entry);
    }
    Ok(report)
}
