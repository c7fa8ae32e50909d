//! Central finite-difference verification of analytic gradients.
//!
//! The evaluation closure receives a detached [`ParamSnapshot`] and must
//! rebuild its forward pass from that plain data, which keeps the numeric
//! route fully independent of the recorded-tape route it is checking and
//! makes the sweep safe to parallelize.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::ParamSnapshot;

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central difference step.
    pub eps: f64,
    /// Relative-error tolerance for the pass/fail verdict.
    pub tol: f64,
    /// Check at most this many scalars per parameter; `None` checks all.
    pub samples_per_group: Option<usize>,
    /// Seed for subsampling scalar indices.
    pub seed: u64,
    /// Worker threads for the sweep; 1 runs sequentially.
    pub workers: usize,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { eps: 1e-5, tol: 1e-4, samples_per_group: None, seed: 0, workers: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: String,
    /// Scalars actually checked in this group.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst scalar, with both gradient estimates.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Relative error with an absolute floor: small-magnitude gradients are
/// compared on an absolute scale, large ones on a relative scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compare analytic gradients against central finite differences of `eval`.
///
/// `analytic` maps parameter name to its gradient buffer (zeros for
/// parameters the loss does not touch). Aborts on a non-finite loss value,
/// naming the offending parameter and index.
pub fn finite_difference_check<F>(
    snapshot: &ParamSnapshot,
    analytic: &BTreeMap<String, Vec<f64>>,
    eval: F,
    opts: &FdOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSnapshot) -> Result<f64> + Sync,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be positive, got {}",
            opts.eps
        )));
    }
    for e in &snapshot.entries {
        let g = analytic.get(&e.name).ok_or_else(|| {
            Error::InvalidArgument(format!("no analytic gradient for parameter {}", e.name))
        })?;
        if g.len() != e.data.len() {
            return Err(Error::InvalidArgument(format!(
                "analytic gradient for {} has {} entries, parameter has {}",
                e.name,
                g.len(),
                e.data.len()
            )));
        }
    }

    // Work items: (group index, flat scalar index).
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut items: Vec<(usize, usize)> = Vec::new();
    for (gi, e) in snapshot.entries.iter().enumerate() {
        let n = e.data.len();
        match opts.samples_per_group {
            Some(s) if s < n => {
                let mut idx: Vec<usize> = sample(&mut rng, n, s).into_iter().collect();
                idx.sort_unstable();
                items.extend(idx.into_iter().map(|i| (gi, i)));
            }
            _ => items.extend((0..n).map(|i| (gi, i))),
        }
    }

    let eps = opts.eps;
    let sweep = |chunk: &[(usize, usize)]| -> Result<Vec<(usize, usize, f64, f64)>> {
        let mut local = snapshot.clone();
        let mut out = Vec::with_capacity(chunk.len());
        for &(gi, i) in chunk {
            let orig = local.entries[gi].data[i];
            local.entries[gi].data[i] = orig + eps;
            let f_plus = eval(&local)?;
            local.entries[gi].data[i] = orig - eps;
            let f_minus = eval(&local)?;
            local.entries[gi].data[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed parameter {}[{}]",
                    local.entries[gi].name, i
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[&local.entries[gi].name][i];
            out.push((gi, i, a, numeric));
        }
        Ok(out)
    };

    let chunk_size = 64.max(items.len() / (opts.workers.max(1) * 8).max(1));
    let results: Vec<(usize, usize, f64, f64)> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        let chunks: Vec<&[(usize, usize)]> = items.chunks(chunk_size).collect();
        let per_chunk: Result<Vec<Vec<_>>> =
            pool.install(|| chunks.par_iter().map(|c| sweep(c)).collect());
        per_chunk?.into_iter().flatten().collect()
    } else {
        let mut all = Vec::with_capacity(items.len());
        for c in items.chunks(chunk_size) {
            all.extend(sweep(c)?);
        }
        all
    };

    let mut groups: Vec<GroupResult> = snapshot
        .entries
        .iter()
        .map(|e| GroupResult {
            name: e.name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            pass: true,
        })
        .collect();
    for (gi, i, a, n) in results {
        let g = &mut groups[gi];
        g.checked += 1;
        let rel = relative_error(a, n);
        if rel >= g.max_rel_err {
            g.max_rel_err = rel;
            g.worst_index = i;
            g.analytic_at_worst = a;
            g.numeric_at_worst = n;
        }
    }
    let mut max_rel_err: f64 = 0.0;
    for g in &mut groups {
        g.pass = g.max_rel_err < opts.tol;
        max_rel_err = max_rel_err.max(g.max_rel_err);
    }
    let pass = groups.iter().all(|g| g.pass);
    Ok(GradCheckReport { groups, max_rel_err, pass })
}
