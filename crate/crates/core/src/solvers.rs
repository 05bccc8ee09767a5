//! Reconstruction from `y = A x + e` by projected gradient descent.
//!
//! Every solver alternates the gradient step `w = x + mu A^T (y - A x)` with
//! a projection onto the generator's range. The projection is either an
//! inner gradient loop over the latent code (PGD), one pass through a
//! learned pseudo-inverse (NPGD), or an exact closed form (oracle tests).
//!
//! All functions work on batches: row `i` of `y` is an independent problem.

use web_time::Instant;

use thiserror::Error;

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{AutodiffError, Tape};
use crate::mlp::{ForwardOptions, MlpError, MlpNetwork};
use crate::rng::Rng;
use crate::sensing::{MeasurementOperator, SensingError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite inner loss at outer iteration {outer}, inner iteration {inner}")]
    InnerDiverged { outer: usize, inner: usize },
    #[error("non-finite iterate at outer iteration {outer}")]
    Diverged { outer: usize },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    Zero,
    /// `x0 = A^T y`.
    AdjointY,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerOptimizer {
    GradientDescent,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub iters: usize,
    pub lr: f64,
    pub optimizer: InnerOptimizer,
    /// Start each projection from the previous solution instead of a fresh
    /// `N(0, I)` draw.
    pub warm_start: bool,
    /// Extra random starts per projection; the lowest loss wins.
    pub restarts: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            lr: 0.01,
            optimizer: InnerOptimizer::GradientDescent,
            warm_start: true,
            restarts: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub outer_iters: usize,
    pub step: f64,
    pub init: InitPolicy,
    pub inner: InnerConfig,
    pub seed: u64,
    /// Keep every iterate `x_n` in the trace.
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_iters: 30,
            step: 0.5,
            init: InitPolicy::Zero,
            inner: InnerConfig::default(),
            seed: 0,
            record_iterates: false,
        }
    }
}

impl SolverConfig {
    /// Step `1 / beta` for an estimated upper restricted eigenvalue.
    pub fn with_auto_step(mut self, beta_hat: f64) -> Result<Self> {
        if !(beta_hat > 0.0 && beta_hat.is_finite()) {
            return Err(SolverError::Config(format!("cannot derive a step from beta {beta_hat}")));
        }
        self.step = 1.0 / beta_hat;
        Ok(self)
    }

    fn validate(&self, needs_inner: bool) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(SolverError::Config("outer_iters must be at least 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(SolverError::Config(format!("step must be positive, got {}", self.step)));
        }
        if needs_inner && (self.inner.iters == 0 || !(self.inner.lr > 0.0)) {
            return Err(SolverError::Config("inner loop needs iters >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of a batch solve. Iteration 0 is the initial point,
/// so every per-iteration vector has `outer_iters + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    /// `f[n][i] = |A x_n,i - y_i|^2`.
    pub f: Vec<Vec<f64>>,
    /// `mse[n][i] = |x_n,i - x*_i|^2` when the ground truth is supplied.
    pub mse: Option<Vec<Vec<f64>>>,
    /// Wall-clock milliseconds spent on each outer iteration (0 for n = 0).
    pub wall_ms: Vec<f64>,
    pub x_hat: Tensor,
    /// Final latent codes (PGD and NPGD).
    pub z_hat: Option<Tensor>,
    pub iterates: Option<Vec<Tensor>>,
}

impl SolverTrace {
    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    /// Batch mean of `f` at each iteration.
    pub fn mean_f(&self) -> Vec<f64> {
        self.f.iter().map(|r| mean(r)).collect()
    }

    pub fn mean_mse(&self) -> Option<Vec<f64>> {
        self.mse.as_ref().map(|m| m.iter().map(|r| mean(r)).collect())
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.wall_ms.iter().sum()
    }

    /// `iter,f_xn,mse,wall_ms` with batch means; `mse` empty without ground
    /// truth.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,f_xn,mse,wall_ms\n");
        let mse = self.mean_mse();
        for (n, f) in self.mean_f().iter().enumerate() {
            let m = mse.as_ref().map(|m| format!("{:e}", m[n])).unwrap_or_default();
            out.push_str(&format!("{n},{f:e},{m},{:.6}\n", self.wall_ms[n]));
        }
        out
    }

    /// Joins traces of consecutive row-chunks of one batch.
    pub fn concat(parts: Vec<SolverTrace>) -> Result<SolverTrace> {
        let mut it = parts.into_iter();
        let mut acc = it
            .next()
            .ok_or_else(|| SolverError::Config("no traces to join".into()))?;
        for p in it {
            for (a, b) in acc.f.iter_mut().zip(p.f) {
                a.extend(b);
            }
            if let (Some(a), Some(b)) = (acc.mse.as_mut(), p.mse) {
                for (a, b) in a.iter_mut().zip(b) {
                    a.extend(b);
                }
            }
            for (a, b) in acc.wall_ms.iter_mut().zip(p.wall_ms) {
                *a += b;
            }
            acc.x_hat = Tensor::stack_rows(&[&acc.x_hat, &p.x_hat])?;
            if let (Some(a), Some(b)) = (acc.z_hat.as_ref(), p.z_hat.as_ref()) {
                acc.z_hat = Some(Tensor::stack_rows(&[a, b])?);
            }
            if let (Some(a), Some(b)) = (acc.iterates.as_mut(), p.iterates) {
                for (a, b) in a.iter_mut().zip(b) {
                    *a = Tensor::stack_rows(&[a, &b])?;
                }
            }
        }
        Ok(acc)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `w = x + mu A^T (y - A x)` per row.
pub fn gradient_step(x: &Tensor, a: &MeasurementOperator, y: &Tensor, mu: f64) -> Result<Tensor> {
    let r = y.sub(&a.apply(x)?).map_err(|_| TensorError::ShapeMismatch {
        op: "gradient_step",
        left: y.shape().to_vec(),
        right: vec![x.rows(), a.m()],
    })?;
    let mut w = x.clone().reshape(&[x.rows(), a.n()])?;
    w.axpy(mu, &a.adjoint(&r)?)?;
    Ok(w)
}

/// Result of one latent-space projection.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerProjection {
    pub x: Tensor,
    pub z: Tensor,
    /// Final `|w_i - G(z_i)|^2` per row.
    pub loss: Vec<f64>,
    /// Per-row loss at the start of the last 10% of iterations, used to
    /// judge whether the loop has settled.
    pub loss_tail_start: Vec<f64>,
}

/// Minimises `|w_i - G(z_i | c_i)|^2` over each `z_i`, starting from `z0`.
/// `outer` only labels errors.
pub fn project_inner(
    g: &MlpNetwork,
    w: &Tensor,
    condition: Option<&Tensor>,
    z0: &Tensor,
    cfg: &InnerConfig,
    outer: usize,
) -> Result<InnerProjection> {
    let mut z = z0.clone();
    let mut adam = match cfg.optimizer {
        InnerOptimizer::Adam => Some(AdamState::new(AdamConfig::with_lr(cfg.lr), [&z])),
        InnerOptimizer::GradientDescent => None,
    };
    let tail_at = cfg.iters - cfg.iters.div_ceil(10);
    let mut tail_start = Vec::new();
    for it in 0..cfg.iters {
        let (loss, grad) = inner_loss_and_grad(g, w, condition, &z)?;
        if loss.iter().any(|l| !l.is_finite()) || !grad.all_finite() {
            return Err(SolverError::InnerDiverged { outer, inner: it });
        }
        if it == tail_at {
            tail_start = loss;
        }
        match adam.as_mut() {
            Some(state) => state.step(&mut [&mut z], &[grad])?,
            None => z.axpy(-cfg.lr, &grad)?,
        }
    }
    let x = g.forward(&z, condition)?;
    let loss = x.sub(w)?.row_norms_sq();
    if loss.iter().any(|l| !l.is_finite()) {
        return Err(SolverError::InnerDiverged { outer, inner: cfg.iters });
    }
    if tail_start.is_empty() {
        tail_start = loss.clone();
    }
    Ok(InnerProjection {
        x,
        z,
        loss,
        loss_tail_start: tail_start,
    })
}

/// Per-row `|w - G(z)|^2` and its gradient with respect to `z`.
pub fn inner_loss_and_grad(
    g: &MlpNetwork,
    w: &Tensor,
    condition: Option<&Tensor>,
    z: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let vars = g.register(&mut tape, false);
    let zv = tape.input_ref(z);
    let cv = condition.map(|c| tape.constant_ref(c));
    let out = g.forward_tape(&mut tape, &vars, zv, cv, ForwardOptions::default())?;
    let target = tape.constant_ref(w);
    let diff = tape.sub(out, target)?;
    let loss = tape.value(diff).row_norms_sq();
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let grads = tape.backward(total)?;
    Ok((loss, grads.get_or_zeros(zv, z)))
}

/// How `w_n` is mapped back onto the generator's range.
pub enum Projector<'a> {
    /// Latent-space inner loop.
    Latent { g: &'a MlpNetwork },
    /// `G(G+(w) | y)`.
    Network { g: &'a MlpNetwork, pinv: &'a MlpNetwork },
    /// A closed-form projection.
    Exact(&'a (dyn Fn(&Tensor) -> Result<Tensor> + Sync)),
}

impl Projector<'_> {
    fn generator(&self) -> Option<&MlpNetwork> {
        match self {
            Projector::Latent { g } | Projector::Network { g, .. } => Some(g),
            Projector::Exact(_) => None,
        }
    }
}

/// Generic projected gradient descent; `truth` enables the MSE columns.
/// `first_index` is the global index of row 0, so per-image random streams
/// do not depend on how a batch is split.
pub fn projected_gradient_descent(
    projector: &Projector<'_>,
    a: &MeasurementOperator,
    y: &Tensor,
    truth: Option<&Tensor>,
    cfg: &SolverConfig,
    first_index: usize,
) -> Result<SolverTrace> {
    cfg.validate(matches!(projector, Projector::Latent { .. }))?;
    let (count, m) = y.dims2()?;
    if m != a.m() {
        return Err(TensorError::ShapeMismatch {
            op: "solver measurements",
            left: y.shape().to_vec(),
            right: vec![count, a.m()],
        }
        .into());
    }
    let y = y.clone().reshape(&[count, m])?;
    let condition = match projector.generator() {
        Some(g) if g.condition_dim() > 0 => {
            if g.condition_dim() != m {
                return Err(SolverError::Config(format!(
                    "generator conditions on width {}, measurements have width {m}",
                    g.condition_dim()
                )));
            }
            Some(&y)
        }
        _ => None,
    };
    let mut rngs: Vec<Rng> = (0..count)
        .map(|i| Rng::derive(cfg.seed, (first_index + i) as u64))
        .collect();

    let mut x = match cfg.init {
        InitPolicy::Zero => Tensor::zeros(&[count, a.n()]),
        InitPolicy::AdjointY => a.adjoint(&y)?,
    };
    let record = |x: &Tensor| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let f = a.apply(x)?.sub(&y)?.row_norms_sq();
        let e = match truth {
            Some(t) => Some(x.sub(t)?.row_norms_sq()),
            None => None,
        };
        Ok((f, e))
    };
    let (f0, e0) = record(&x)?;
    let mut trace = SolverTrace {
        f: vec![f0],
        mse: e0.map(|e| vec![e]),
        wall_ms: vec![0.0],
        x_hat: x.clone(),
        z_hat: None,
        iterates: cfg.record_iterates.then(|| vec![x.clone()]),
    };
    let mut z: Option<Tensor> = None;

    for outer in 1..=cfg.outer_iters {
        let start = Instant::now();
        let w = gradient_step(&x, a, &y, cfg.step)?;
        let (next, next_z) = match projector {
            Projector::Exact(p) => (p(&w)?, None),
            Projector::Network { g, pinv } => {
                let code = pinv.forward(&w, None)?;
                (g.forward(&code, condition)?, Some(code))
            }
            Projector::Latent { g } => {
                let k = g.input_dim();
                let start_z = match (&z, cfg.inner.warm_start) {
                    (Some(prev), true) => prev.clone(),
                    _ => fresh_codes(&mut rngs, k)?,
                };
                let mut best = project_inner(g, &w, condition, &start_z, &cfg.inner, outer)?;
                for _ in 0..cfg.inner.restarts {
                    let alt = project_inner(g, &w, condition, &fresh_codes(&mut rngs, k)?, &cfg.inner, outer)?;
                    best = keep_better(best, alt, k)?;
                }
                (best.x, Some(best.z))
            }
        };
        if !next.all_finite() {
            return Err(SolverError::Diverged { outer });
        }
        x = next;
        z = next_z;
        trace.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let (f, e) = record(&x)?;
        trace.f.push(f);
        if let (Some(m), Some(e)) = (trace.mse.as_mut(), e) {
            m.push(e);
        }
        if let Some(it) = trace.iterates.as_mut() {
            it.push(x.clone());
        }
    }
    trace.x_hat = x;
    trace.z_hat = z;
    Ok(trace)
}

fn fresh_codes(rngs: &mut [Rng], k: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rngs.len() * k);
    for rng in rngs.iter_mut() {
        data.extend((0..k).map(|_| rng.normal()));
    }
    Ok(Tensor::new(&[rngs.len(), k], data)?)
}

fn keep_better(a: InnerProjection, b: InnerProjection, k: usize) -> Result<InnerProjection> {
    let n = a.x.cols();
    let mut out = a.clone();
    for i in 0..a.loss.len() {
        if b.loss[i] < a.loss[i] {
            out.x.row_slice_mut(i).copy_from_slice(b.x.row_slice(i));
            out.z.row_slice_mut(i).copy_from_slice(b.z.row_slice(i));
            out.loss[i] = b.loss[i];
            out.loss_tail_start[i] = b.loss_tail_start[i];
        }
    }
    debug_assert_eq!((out.x.cols(), out.z.cols()), (n, k));
    Ok(out)
}

/// PGD with the latent inner loop.
pub fn pgd_reconstruct(
    g: &MlpNetwork,
    a: &MeasurementOperator,
    y: &Tensor,
    truth: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<SolverTrace> {
    projected_gradient_descent(&Projector::Latent { g }, a, y, truth, cfg, 0)
}

/// PGD with the learned projector `G o G+`.
pub fn npgd_reconstruct(
    g: &MlpNetwork,
    pinv: &MlpNetwork,
    a: &MeasurementOperator,
    y: &Tensor,
    truth: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<SolverTrace> {
    if pinv.input_dim() != a.n() || pinv.output_dim() != g.input_dim() {
        return Err(SolverError::Config(format!(
            "pseudo-inverse maps {} -> {}, expected {} -> {}",
            pinv.input_dim(),
            pinv.output_dim(),
            a.n(),
            g.input_dim()
        )));
    }
    projected_gradient_descent(&Projector::Network { g, pinv }, a, y, truth, cfg, 0)
}

/// Splits the batch into `jobs` row chunks solved on scoped threads. The
/// result does not depend on `jobs`.
pub fn solve_parallel(
    projector: &Projector<'_>,
    a: &MeasurementOperator,
    y: &Tensor,
    truth: Option<&Tensor>,
    cfg: &SolverConfig,
    jobs: usize,
) -> Result<SolverTrace> {
    let count = y.rows();
    let jobs = jobs.clamp(1, count.max(1));
    if jobs == 1 {
        return projected_gradient_descent(projector, a, y, truth, cfg, 0);
    }
    let chunk = count.div_ceil(jobs);
    let ranges: Vec<(usize, usize)> = (0..count).step_by(chunk).map(|s| (s, (s + chunk).min(count))).collect();
    let results: Vec<Result<SolverTrace>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(s, e)| {
                scope.spawn(move || {
                    let ys = y.slice_rows(s, e)?;
                    let ts = truth.map(|t| t.slice_rows(s, e)).transpose()?;
                    projected_gradient_descent(projector, a, &ys, ts.as_ref(), cfg, s)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("solver thread panicked"))
            .collect()
    });
    SolverTrace::concat(results.into_iter().collect::<Result<Vec<_>>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_manifold;
    use crate::linalg::orthonormalize_columns;

    fn op(rows: Vec<Vec<f64>>) -> MeasurementOperator {
        MeasurementOperator::from_matrix(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn gradient_step_hand_examples() {
        let a = op(vec![vec![1.0, 0.0]]);
        let w = gradient_step(&Tensor::row(&[0.0, 0.0]), &a, &Tensor::row(&[1.0]), 0.5).unwrap();
        assert_eq!(w.data(), &[0.5, 0.0]);
        let id = MeasurementOperator::from_matrix(Tensor::eye(3)).unwrap();
        let y = Tensor::row(&[1.0, -2.0, 0.5]);
        assert_eq!(gradient_step(&Tensor::zeros(&[1, 3]), &id, &y, 1.0).unwrap(), y);
        let x = Tensor::row(&[0.3, 0.1, 0.2]);
        assert_eq!(gradient_step(&x, &id, &x, 0.7).unwrap(), x);
        assert!(gradient_step(&x, &id, &Tensor::row(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn gradient_step_is_affine() {
        let a = MeasurementOperator::gaussian(5, 8, 2).unwrap();
        let mut rng = Rng::new(3);
        let x1 = rng.gaussian(&[1, 8], 0.0, 1.0).unwrap();
        let x2 = rng.gaussian(&[1, 8], 0.0, 1.0).unwrap();
        let y1 = rng.gaussian(&[1, 5], 0.0, 1.0).unwrap();
        let y2 = rng.gaussian(&[1, 5], 0.0, 1.0).unwrap();
        let t = 0.3;
        let mix = |p: &Tensor, q: &Tensor| {
            let mut o = p.scale(t);
            o.axpy(1.0 - t, q).unwrap();
            o
        };
        let lhs = gradient_step(&mix(&x1, &x2), &a, &mix(&y1, &y2), 0.4).unwrap();
        let rhs = mix(
            &gradient_step(&x1, &a, &y1, 0.4).unwrap(),
            &gradient_step(&x2, &a, &y2, 0.4).unwrap(),
        );
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn inner_projection_at_a_range_point_is_stationary() {
        let mut rng = Rng::new(4);
        let m = make_synthetic_manifold(12, 3, &mut rng).unwrap();
        let g = m.generator_network();
        let (z0, w) = m.sample(2, &mut rng).unwrap();
        let p = project_inner(&g, &w, None, &z0, &InnerConfig::default(), 0).unwrap();
        assert!(p.x.max_abs_diff(&w).unwrap() < 1e-12);
        assert!(p.loss.iter().all(|&l| l < 1e-24));
    }

    #[test]
    fn plain_descent_contracts_at_the_analytic_rate() {
        // With orthonormal W the latent error shrinks by exactly
        // (1 - 2 lr) per step.
        let mut rng = Rng::new(5);
        let m = make_synthetic_manifold(16, 4, &mut rng).unwrap();
        let g = m.generator_network();
        let w = rng.gaussian(&[3, 16], 0.0, 1.0).unwrap();
        let z_star = m.exact_pinv(&w).unwrap();
        let z0 = rng.gaussian(&[3, 4], 0.0, 1.0).unwrap();
        let cfg = InnerConfig::default();
        let p = project_inner(&g, &w, None, &z0, &cfg, 0).unwrap();
        let rate = (1.0f64 - 2.0 * cfg.lr).powi(cfg.iters as i32);
        let expected = z0.sub(&z_star).unwrap().scale(rate);
        assert!(p.z.sub(&z_star).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn long_inner_loop_reaches_the_exact_projection() {
        let mut rng = Rng::new(6);
        let m = make_synthetic_manifold(16, 4, &mut rng).unwrap();
        let g = m.generator_network();
        let w = rng.gaussian(&[4, 16], 0.0, 1.0).unwrap();
        let z0 = rng.gaussian(&[4, 4], 0.0, 1.0).unwrap();
        let cfg = InnerConfig {
            iters: 200,
            lr: 0.25,
            ..InnerConfig::default()
        };
        let p = project_inner(&g, &w, None, &z0, &cfg, 0).unwrap();
        assert!(p.x.max_abs_diff(&m.exact_project(&w).unwrap()).unwrap() < 1e-6);
    }

    #[test]
    fn linear_oracle_npgd_matches_exact_projection() {
        let mut rng = Rng::new(7);
        let m = make_synthetic_manifold(20, 3, &mut rng).unwrap();
        let a = MeasurementOperator::gaussian(10, 20, 8).unwrap();
        let (_, x) = m.sample(3, &mut rng).unwrap();
        let y = a.apply(&x).unwrap();
        let cfg = SolverConfig::default();
        let exact = |w: &Tensor| m.exact_project(w).map_err(|e| SolverError::Config(e.to_string()));
        let t1 = projected_gradient_descent(&Projector::Exact(&exact), &a, &y, Some(&x), &cfg, 0).unwrap();
        let (g, pinv) = (m.generator_network(), m.pinv_network());
        let t2 = npgd_reconstruct(&g, &pinv, &a, &y, Some(&x), &cfg).unwrap();
        assert_eq!(t1.len(), 31);
        for (a, b) in t1.f.iter().zip(&t2.f) {
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-10);
            }
        }
        assert!(t2.x_hat.max_abs_diff(&t1.x_hat).unwrap() < 1e-10);
    }

    #[test]
    fn exact_projection_pgd_is_monotone_with_small_step() {
        let mut rng = Rng::new(9);
        let m = make_synthetic_manifold(24, 4, &mut rng).unwrap();
        let basis = orthonormalize_columns(&m.w).unwrap();
        let a = MeasurementOperator::aligned_orthogonal(12, &basis, &[1.0; 12], &mut rng).unwrap();
        let (_, x) = m.sample(2, &mut rng).unwrap();
        let y = a.apply(&x).unwrap();
        let exact = |w: &Tensor| m.exact_project(w).map_err(|e| SolverError::Config(e.to_string()));
        let cfg = SolverConfig {
            step: 0.9,
            ..SolverConfig::default()
        };
        let t = projected_gradient_descent(&Projector::Exact(&exact), &a, &y, Some(&x), &cfg, 0).unwrap();
        for w in t.mean_f().windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(t.mean_mse().unwrap()[30] < 1e-6);
    }

    #[test]
    fn parallel_split_matches_serial() {
        let mut rng = Rng::new(10);
        let m = make_synthetic_manifold(10, 2, &mut rng).unwrap();
        let a = MeasurementOperator::gaussian(6, 10, 11).unwrap();
        let (_, x) = m.sample(5, &mut rng).unwrap();
        let y = a.apply(&x).unwrap();
        let g = m.generator_network();
        let cfg = SolverConfig {
            outer_iters: 3,
            inner: InnerConfig {
                iters: 10,
                warm_start: false,
                ..InnerConfig::default()
            },
            seed: 12,
            ..SolverConfig::default()
        };
        let p = Projector::Latent { g: &g };
        let serial = solve_parallel(&p, &a, &y, Some(&x), &cfg, 1).unwrap();
        let split = solve_parallel(&p, &a, &y, Some(&x), &cfg, 3).unwrap();
        assert_eq!(serial.x_hat, split.x_hat);
        assert_eq!(serial.f, split.f);
        assert_eq!(serial.z_hat, split.z_hat);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let a = MeasurementOperator::gaussian(2, 4, 0).unwrap();
        let g = MlpNetwork::new(&[2, 4], &[crate::mlp::Activation::Identity], 0).unwrap();
        let y = Tensor::zeros(&[1, 2]);
        let bad = SolverConfig {
            outer_iters: 0,
            ..SolverConfig::default()
        };
        assert!(matches!(pgd_reconstruct(&g, &a, &y, None, &bad), Err(SolverError::Config(_))));
        assert!(SolverConfig::default().with_auto_step(0.0).is_err());
    }
}
