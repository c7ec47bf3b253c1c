//! Central finite-difference verification of analytic gradients.
//!
//! Runs at f64: rebuild the same graph (same seed, so stochastic masks
//! repeat), nudge one parameter element at a time, and compare the loss slope
//! against what `backward` reported.

use super::graph::{Graph, TensorError, TensorId};
use super::params::{ParamBinding, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Both slopes below this magnitude count as matching zeros.
    pub zero_tol: f64,
    /// Check at most this many elements per parameter (even stride); `None`
    /// checks everything.
    pub per_param_limit: Option<usize>,
    /// Seed for every rebuilt graph, so dropout masks are identical.
    pub seed: u64,
    /// Skip parameters whose name starts with any of these prefixes. Needed
    /// when the loss detaches a path on purpose: there the numeric slope sees
    /// the stopped dependency and the analytic gradient must not.
    pub skip_params: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            zero_tol: 1e-8,
            per_param_limit: None,
            seed: 0,
            skip_params: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub elements_checked: usize,
}

/// `build` must construct the loss the same way on every call; it gets a fresh
/// graph (already holding the store's leaves) each time.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &ParamBinding) -> Result<TensorId, TensorError>,
{
    // Analytic pass.
    {
        let mut graph = Graph::with_seed(opts.seed);
        let binding = store.bind(&mut graph)?;
        let loss = build(&mut graph, &binding)?;
        graph.backward(loss)?;
        store.zero_grads();
        store.absorb_grads(&graph, &binding);
    }

    let eval = |store: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut graph = Graph::with_seed(opts.seed);
        let binding = store.bind(&mut graph)?;
        let loss = build(&mut graph, &binding)?;
        Ok(graph.value(loss)[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        elements_checked: 0,
    };

    let ids: Vec<_> = store.ids().collect();
    for pid in ids {
        if opts
            .skip_params
            .iter()
            .any(|p| store.name(pid).starts_with(p.as_str()))
        {
            continue;
        }
        let n = store.value(pid).len();
        let picks: Vec<usize> = match opts.per_param_limit {
            Some(limit) if limit < n => {
                let stride = (n as f64 / limit as f64).ceil() as usize;
                (0..n).step_by(stride.max(1)).collect()
            }
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = store.value(pid)[i];
            store.value_mut(pid)[i] = orig + opts.eps;
            let up = eval(store)?;
            store.value_mut(pid)[i] = orig - opts.eps;
            let down = eval(store)?;
            store.value_mut(pid)[i] = orig;

            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = store.grad(pid)[i];
            report.elements_checked += 1;

            let denom = analytic.abs().max(numeric.abs());
            if denom < opts.zero_tol {
                continue;
            }
            let rel = (analytic - numeric).abs() / denom.max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(pid).to_string();
                report.worst_index = i;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
