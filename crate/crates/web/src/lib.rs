//! Browser demo: synthetic-manifold reconstructions computed in wasm.
//!
//! Each export returns a JSON string; the page in `www/` plots it.

use gpcs_core::data::make_synthetic_manifold;
use gpcs_core::metrics::{all_pairs, check_linear_convergence, estimate_rec, pair_ratios};
use gpcs_core::sensing::MeasurementOperator;
use gpcs_core::solvers::{projected_gradient_descent, InnerConfig, Projector, SolverConfig, SolverTrace};
use gpcs_core::Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn check_dims(n: usize, k: usize, m: usize) -> Result<()> {
    if !(1..=256).contains(&n) || k == 0 || k > m || m > n {
        return Err(format!("need 1 <= k <= m <= n <= 256, got n={n} k={k} m={m}"));
    }
    Ok(())
}

fn trace_json(t: &SolverTrace) -> Value {
    json!({
        "f": t.mean_f(),
        "mse": t.mean_mse(),
        "ms_per_image": t.total_wall_ms() / t.x_hat.rows() as f64,
    })
}

/// PGD and NPGD on the same measurements of four manifold points.
pub fn solver_traces_value(n: usize, k: usize, m: usize, seed: u64, outer_iters: usize, inner_iters: usize) -> Result<Value> {
    check_dims(n, k, m)?;
    let mut rng = Rng::new(seed);
    let man = make_synthetic_manifold(n, k, &mut rng).map_err(e)?;
    let a = MeasurementOperator::gaussian(m, n, seed).map_err(e)?;
    let (_, x) = man.sample(4, &mut rng).map_err(e)?;
    let y = a.apply(&x).map_err(e)?;
    let cfg = SolverConfig {
        outer_iters,
        inner: InnerConfig {
            iters: inner_iters,
            ..InnerConfig::default()
        },
        seed,
        ..SolverConfig::default()
    };
    let (g, p) = (man.generator_network(), man.pinv_network());
    let pgd = projected_gradient_descent(&Projector::Latent { g: &g }, &a, &y, Some(&x), &cfg, 0).map_err(e)?;
    let npgd = projected_gradient_descent(&Projector::Network { g: &g, pinv: &p }, &a, &y, Some(&x), &cfg, 0).map_err(e)?;
    Ok(json!({ "pgd": trace_json(&pgd), "npgd": trace_json(&npgd) }))
}

/// NPGD with an orthonormal-row operator against the linear-rate bound
/// built from REC constants estimated on manifold pairs.
pub fn convergence_bound_value(n: usize, k: usize, m: usize, seed: u64, outer_iters: usize) -> Result<Value> {
    check_dims(n, k, m)?;
    let mut rng = Rng::new(seed);
    let man = make_synthetic_manifold(n, k, &mut rng).map_err(e)?;
    let a = MeasurementOperator::row_orthogonalized(m, n, &mut rng).map_err(e)?;
    let (_, pts) = man.sample(32, &mut rng).map_err(e)?;
    let (x1, x2) = all_pairs(&pts).map_err(e)?;
    let rec = estimate_rec(&a, &x1, &x2, seed).map_err(e)?;
    let (_, x) = man.sample(4, &mut rng).map_err(e)?;
    let y = a.apply(&x).map_err(e)?;
    let cfg = SolverConfig {
        outer_iters,
        ..SolverConfig::default()
    }
    .with_auto_step(rec.beta)
    .map_err(e)?;
    let (g, p) = (man.generator_network(), man.pinv_network());
    let t = projected_gradient_descent(&Projector::Network { g: &g, pinv: &p }, &a, &y, None, &cfg, 0).map_err(e)?;
    let f = t.mean_f();
    let check = check_linear_convergence(&f, rec.alpha, rec.beta, 0.0, 1e-12);
    Ok(json!({
        "f": f,
        "alpha": rec.alpha,
        "beta": rec.beta,
        "ratio": rec.ratio(),
        "bound": check.as_ref().map(|c| c.bounds.clone()),
        "holds": check.as_ref().map(|c| c.holds),
    }))
}

/// Histogram of `|A d|^2 / |d|^2` over pairs of manifold points.
pub fn rec_histogram_value(n: usize, k: usize, m: usize, seed: u64, points: usize, bins: usize) -> Result<Value> {
    check_dims(n, k, m)?;
    if points < 2 || bins == 0 {
        return Err("need at least 2 points and 1 bin".into());
    }
    let mut rng = Rng::new(seed);
    let man = make_synthetic_manifold(n, k, &mut rng).map_err(e)?;
    let a = MeasurementOperator::gaussian(m, n, seed).map_err(e)?;
    let (_, pts) = man.sample(points.min(200), &mut rng).map_err(e)?;
    let (x1, x2) = all_pairs(&pts).map_err(e)?;
    let (ratios, skipped) = pair_ratios(&a, &x1, &x2).map_err(e)?;
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for r in &ratios {
        counts[(((r - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    Ok(json!({ "edges": edges, "counts": counts, "alpha": lo, "beta": hi, "pairs": ratios.len(), "skipped": skipped }))
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|m| JsError::new(&m))
}

#[wasm_bindgen]
pub fn solver_traces(n: usize, k: usize, m: usize, seed: u32, outer_iters: usize, inner_iters: usize) -> std::result::Result<String, JsError> {
    to_js(solver_traces_value(n, k, m, seed as u64, outer_iters, inner_iters))
}

#[wasm_bindgen]
pub fn convergence_bound(n: usize, k: usize, m: usize, seed: u32, outer_iters: usize) -> std::result::Result<String, JsError> {
    to_js(convergence_bound_value(n, k, m, seed as u64, outer_iters))
}

#[wasm_bindgen]
pub fn rec_histogram(n: usize, k: usize, m: usize, seed: u32, points: usize, bins: usize) -> std::result::Result<String, JsError> {
    to_js(rec_histogram_value(n, k, m, seed as u64, points, bins))
}
