//! Reconstruction metrics and empirical certificates for the convergence
//! conditions of projected gradient descent.

use thiserror::Error;

use crate::mlp::MlpNetwork;
use crate::sensing::{MeasurementOperator, SensingError};
use crate::solvers::{project_inner, InnerConfig, SolverError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty batch")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("window {window} does not fit a {rows}x{cols} image")]
    WindowTooLarge { window: usize, rows: usize, cols: usize },
    #[error("invalid SSIM configuration: {0}")]
    SsimConfig(String),
    #[error("all {0} sample pairs are degenerate (|x1 - x2| < 1e-9)")]
    DegeneratePairs(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn same_batch(x: &Tensor, other: &Tensor, what: &str) -> Result<(usize, usize)> {
    let (c, n) = x.dims2()?;
    if c == 0 {
        return Err(MetricsError::Empty);
    }
    let (c2, n2) = other.dims2()?;
    if (c, n) != (c2, n2) {
        return Err(MetricsError::Shape(format!("{what}: {c}x{n} vs {c2}x{n2}")));
    }
    Ok((c, n))
}

/// `|x_i - x*_i|^2` for every row.
pub fn squared_errors(x: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    same_batch(x, truth, "mse")?;
    Ok(x.sub(truth)?.row_norms_sq())
}

/// Per-image MSE: `(1/C) sum_i |x_i - x*_i|^2`.
pub fn mse(x: &Tensor, truth: &Tensor) -> Result<f64> {
    let e = squared_errors(x, truth)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// MSE divided by the number of pixels.
pub fn mse_per_pixel(x: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(mse(x, truth)? / x.cols() as f64)
}

/// `(1/C) sum_i |A x_i - y_i|^2`.
pub fn residual_error(a: &MeasurementOperator, x: &Tensor, y: &Tensor) -> Result<f64> {
    let ax = a.apply(x)?;
    same_batch(&ax, y, "residual")?;
    let r = ax.sub(y)?.row_norms_sq();
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// `10 log10(|Ax|^2 / |e|^2)`; `+inf` when `e = 0`.
pub fn snr_db(a: &MeasurementOperator, x: &Tensor, noise: &Tensor) -> Result<f64> {
    let ax = a.apply(x)?;
    if ax.len() != noise.len() {
        return Err(MetricsError::Shape(format!(
            "noise has {} entries for {} measurements",
            noise.len(),
            ax.len()
        )));
    }
    let e = noise.norm_sq();
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (ax.norm_sq() / e).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimForm {
    /// Squared means and variances in the denominator.
    Standard,
    /// Unsquared denominator `(mu_x + mu_y + C1)(var_x + var_y + C2)`;
    /// not 1 at identical images.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub stride: usize,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
    /// Subtracted from every pixel before evaluation so values lie in
    /// `[0, dynamic_range]`.
    pub pixel_min: f64,
    pub form: SsimForm,
}

impl Default for SsimConfig {
    /// 7x7 window, stride 1, `L = 2` for `[-1, 1]` pixels.
    fn default() -> Self {
        Self::for_range(-1.0, 1.0)
    }
}

impl SsimConfig {
    pub fn for_range(lo: f64, hi: f64) -> Self {
        let l = hi - lo;
        Self {
            window: 7,
            stride: 1,
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
            dynamic_range: l,
            pixel_min: lo,
            form: SsimForm::Standard,
        }
    }

    fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(MetricsError::SsimConfig("window and stride must be positive".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(MetricsError::SsimConfig("C1 and C2 must be positive".into()));
        }
        if self.window > rows || self.window > cols {
            return Err(MetricsError::WindowTooLarge {
                window: self.window,
                rows,
                cols,
            });
        }
        Ok(())
    }
}

/// SSIM of one window from its moments.
pub fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, cfg: &SsimConfig) -> f64 {
    let num = (2.0 * mx * my + cfg.c1) * (2.0 * cov + cfg.c2);
    let den = match cfg.form {
        SsimForm::Standard => (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2),
        SsimForm::Literal => (mx + my + cfg.c1) * (vx + vy + cfg.c2),
    };
    num / den
}

/// Summed-area table with one row and column of zero padding.
fn integral(values: impl Iterator<Item = f64>, rows: usize, cols: usize) -> Vec<f64> {
    let w = cols + 1;
    let mut t = vec![0.0; (rows + 1) * w];
    let values: Vec<f64> = values.collect();
    for r in 0..rows {
        let mut run = 0.0;
        for c in 0..cols {
            run += values[r * cols + c];
            t[(r + 1) * w + c + 1] = t[r * w + c + 1] + run;
        }
    }
    t
}

fn box_sum(t: &[f64], cols: usize, r: usize, c: usize, k: usize) -> f64 {
    let w = cols + 1;
    t[(r + k) * w + c + k] - t[r * w + c + k] - t[(r + k) * w + c] + t[r * w + c]
}

/// SSIM of every window position (row-major), for two `rows x cols` images
/// given as flat slices.
pub fn ssim_map(x: &[f64], y: &[f64], rows: usize, cols: usize, cfg: &SsimConfig) -> Result<Vec<f64>> {
    if x.len() != rows * cols || y.len() != rows * cols {
        return Err(MetricsError::Shape(format!(
            "images of {} and {} pixels for {rows}x{cols}",
            x.len(),
            y.len()
        )));
    }
    cfg.validate(rows, cols)?;
    let sx: Vec<f64> = x.iter().map(|v| v - cfg.pixel_min).collect();
    let sy: Vec<f64> = y.iter().map(|v| v - cfg.pixel_min).collect();
    let tx = integral(sx.iter().copied(), rows, cols);
    let ty = integral(sy.iter().copied(), rows, cols);
    let txx = integral(sx.iter().map(|v| v * v), rows, cols);
    let tyy = integral(sy.iter().map(|v| v * v), rows, cols);
    let txy = integral(sx.iter().zip(&sy).map(|(a, b)| a * b), rows, cols);
    let k = cfg.window;
    let npx = (k * k) as f64;
    let mut out = Vec::new();
    for r in (0..=rows - k).step_by(cfg.stride) {
        for c in (0..=cols - k).step_by(cfg.stride) {
            let mx = box_sum(&tx, cols, r, c, k) / npx;
            let my = box_sum(&ty, cols, r, c, k) / npx;
            let vx = box_sum(&txx, cols, r, c, k) / npx - mx * mx;
            let vy = box_sum(&tyy, cols, r, c, k) / npx - my * my;
            let cov = box_sum(&txy, cols, r, c, k) / npx - mx * my;
            out.push(ssim_from_moments(mx, my, vx, vy, cov, cfg));
        }
    }
    Ok(out)
}

/// Mean SSIM over all windows.
pub fn mssim(x: &[f64], y: &[f64], rows: usize, cols: usize, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(x, y, rows, cols, cfg)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Batch mean of per-image MSSIM.
pub fn mean_mssim(x: &Tensor, truth: &Tensor, rows: usize, cols: usize, cfg: &SsimConfig) -> Result<f64> {
    let (c, _) = same_batch(x, truth, "mssim")?;
    let mut total = 0.0;
    for i in 0..c {
        total += mssim(x.row_slice(i), truth.row_slice(i), rows, cols, cfg)?;
    }
    Ok(total / c as f64)
}

/// Empirical two-sided restricted eigenvalue bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecEstimate {
    pub alpha: f64,
    pub beta: f64,
    pub pairs: usize,
    pub skipped: usize,
    pub seed: u64,
}

impl RecEstimate {
    /// `sqrt(beta)`, a witness for `|Ax| <= rho |x|` on the sample.
    pub fn rho(&self) -> f64 {
        self.beta.sqrt()
    }

    pub fn ratio(&self) -> f64 {
        self.beta / self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SRecEstimate {
    pub gamma: f64,
    pub pairs: usize,
    pub skipped: usize,
    pub seed: u64,
}

/// `|A d|^2 / |d|^2` for `d = x1_i - x2_i` over rows, skipping near-equal
/// pairs. Returns the ratios and the number skipped.
pub fn pair_ratios(a: &MeasurementOperator, x1: &Tensor, x2: &Tensor) -> Result<(Vec<f64>, usize)> {
    let (c, _) = same_batch(x1, x2, "pairs")?;
    let d = x1.sub(x2)?;
    let dn = d.row_norms_sq();
    let adn = a.apply(&d)?.row_norms_sq();
    let mut out = Vec::with_capacity(c);
    let mut skipped = 0;
    for (num, den) in adn.into_iter().zip(dn) {
        if den.sqrt() < 1e-9 {
            skipped += 1;
        } else {
            out.push(num / den);
        }
    }
    if out.is_empty() {
        return Err(MetricsError::DegeneratePairs(c));
    }
    Ok((out, skipped))
}

/// Min and max ratio over the pairs `(x1_i, x2_i)`.
pub fn estimate_rec(a: &MeasurementOperator, x1: &Tensor, x2: &Tensor, seed: u64) -> Result<RecEstimate> {
    let (r, skipped) = pair_ratios(a, x1, x2)?;
    Ok(RecEstimate {
        alpha: r.iter().copied().fold(f64::INFINITY, f64::min),
        beta: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pairs: r.len(),
        skipped,
        seed,
    })
}

/// The lower bound at `delta = 0`, i.e. the minimum ratio.
pub fn estimate_s_rec(a: &MeasurementOperator, x1: &Tensor, x2: &Tensor, seed: u64) -> Result<SRecEstimate> {
    let (r, skipped) = pair_ratios(a, x1, x2)?;
    Ok(SRecEstimate {
        gamma: r.iter().copied().fold(f64::INFINITY, f64::min).max(0.0),
        pairs: r.len(),
        skipped,
        seed,
    })
}

/// Every unordered pair of rows of `points`, as two aligned batches.
pub fn all_pairs(points: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = points.rows();
    if c < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: c });
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..c {
        for j in i + 1..c {
            left.push(i);
            right.push(j);
        }
    }
    Ok((points.select_rows(&left)?, points.select_rows(&right)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorEstimate {
    pub delta: f64,
    pub samples: usize,
    /// Samples whose oracle loss had not settled.
    pub excluded: usize,
    pub oracle: InnerConfig,
    /// Per-sample excess `|x - G(G+(x))|^2 - min_z |x - G(z)|^2` (kept
    /// samples only).
    pub excess: Vec<f64>,
}

/// Relative change over the last tenth of the oracle run below which a
/// sample counts as settled.
pub const ORACLE_SETTLE_TOL: f64 = 1e-6;

/// Largest excess projection error of `G o G+` over the rows of
/// `samples`, with a high-budget inner loop started at `G+(x)` as the
/// `min_z` oracle.
pub fn estimate_projector_delta(
    g: &MlpNetwork,
    pinv: &MlpNetwork,
    samples: &Tensor,
    condition: Option<&Tensor>,
    oracle: &InnerConfig,
) -> Result<ProjectorEstimate> {
    let c = samples.rows();
    if c == 0 {
        return Err(MetricsError::Empty);
    }
    let code = pinv.forward(samples, None).map_err(SolverError::from)?;
    let net = g.forward(&code, condition).map_err(SolverError::from)?;
    let net_err = net.sub(samples)?.row_norms_sq();
    let best = project_inner(g, samples, condition, &code, oracle, 0)?;
    let mut excess = Vec::with_capacity(c);
    let mut excluded = 0;
    for i in 0..c {
        let (fin, tail) = (best.loss[i], best.loss_tail_start[i]);
        let settled = (tail - fin).abs() <= ORACLE_SETTLE_TOL * tail.abs().max(1e-12);
        if settled {
            excess.push(net_err[i] - fin);
        } else {
            excluded += 1;
        }
    }
    let delta = excess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ProjectorEstimate {
        delta: if excess.is_empty() { f64::NAN } else { delta },
        samples: c,
        excluded,
        oracle: *oracle,
        excess,
    })
}

/// `(beta/alpha - 1)^n f0 + beta delta / (2 - beta/alpha)`, or `None` when
/// `beta/alpha >= 2`. Uses `0^0 = 1`.
pub fn linear_convergence_bound(alpha: f64, beta: f64, delta: f64, f0: f64, n: usize) -> Option<f64> {
    let ratio = beta / alpha;
    if !(ratio < 2.0) {
        return None;
    }
    Some((ratio - 1.0).powi(n as i32) * f0 + beta * delta / (2.0 - ratio))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub holds: bool,
    pub bounds: Vec<f64>,
    /// Smallest `bound - f(x_n)` over the trace.
    pub worst_margin: f64,
    pub first_violation: Option<usize>,
}

/// Checks a loss trace against [`linear_convergence_bound`] at every
/// iteration; `slack` absorbs floating-point noise.
pub fn check_linear_convergence(f: &[f64], alpha: f64, beta: f64, delta: f64, slack: f64) -> Option<BoundCheck> {
    let f0 = *f.first()?;
    let bounds: Vec<f64> = (0..f.len())
        .map(|n| linear_convergence_bound(alpha, beta, delta, f0, n))
        .collect::<Option<_>>()?;
    let mut worst = f64::INFINITY;
    let mut first = None;
    for (n, (&v, &b)) in f.iter().zip(&bounds).enumerate() {
        let margin = b - v;
        worst = worst.min(margin);
        if margin < -slack && first.is_none() {
            first = Some(n);
        }
    }
    Some(BoundCheck {
        holds: first.is_none(),
        bounds,
        worst_margin: worst,
        first_violation: first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_manifold;
    use crate::rng::Rng;
    use crate::sensing::noise_for_snr;

    #[test]
    fn mse_hand_values() {
        let x = Tensor::row(&[3.0, 4.0]);
        assert_eq!(mse(&x, &Tensor::zeros(&[1, 2])).unwrap(), 25.0);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert!(matches!(
            mse(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])),
            Err(MetricsError::Empty)
        ));
        assert_eq!(mse_per_pixel(&x, &Tensor::zeros(&[1, 2])).unwrap(), 12.5);
    }

    #[test]
    fn residual_scales_quadratically() {
        let a = MeasurementOperator::gaussian(3, 5, 1).unwrap();
        let mut rng = Rng::new(2);
        let x = rng.gaussian(&[4, 5], 0.0, 1.0).unwrap();
        let y = a.apply(&x).unwrap();
        assert_eq!(residual_error(&a, &x, &y).unwrap(), 0.0);
        let y2 = rng.gaussian(&[4, 3], 0.0, 1.0).unwrap();
        let r1 = residual_error(&a, &x, &y2).unwrap();
        // doubling every residual vector: y' = Ax - 2(Ax - y)
        let ax = a.apply(&x).unwrap();
        let doubled = ax.sub(&ax.sub(&y2).unwrap().scale(2.0)).unwrap();
        let r2 = residual_error(&a, &x, &doubled).unwrap();
        assert!((r2 - 4.0 * r1).abs() < 1e-12 * r2);
    }

    #[test]
    fn snr_values() {
        let id = MeasurementOperator::from_matrix(Tensor::eye(2)).unwrap();
        let x = Tensor::row(&[3.0, 4.0]);
        assert!(snr_db(&id, &x, &Tensor::row(&[0.0, 5.0])).unwrap().abs() < 1e-12);
        assert!((snr_db(&id, &x, &Tensor::row(&[0.5, 0.0])).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(snr_db(&id, &x, &Tensor::zeros(&[1, 2])).unwrap(), f64::INFINITY);
        let a = MeasurementOperator::gaussian(8, 12, 3).unwrap();
        let xs = Rng::new(4).gaussian(&[1, 12], 0.0, 1.0).unwrap();
        for db in [-20.0, -6.0, 0.0, 13.0, 20.0] {
            let e = noise_for_snr(&a, &xs, db, &mut Rng::new(5)).unwrap();
            assert!((snr_db(&a, &xs, &e).unwrap() - db).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let mut rng = Rng::new(6);
        let cfg = SsimConfig::default();
        let x: Vec<f64> = (0..64).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        assert_eq!(mssim(&x, &x, 8, 8, &cfg).unwrap(), 1.0);
        let a = mssim(&x, &y, 8, 8, &cfg).unwrap();
        let b = mssim(&y, &x, 8, 8, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12 && a < 1.0);
        // constant 0 vs constant L after the shift: only C1 terms survive.
        let lo = vec![-1.0; 64];
        let hi = vec![1.0; 64];
        let v = mssim(&lo, &hi, 8, 8, &cfg).unwrap();
        let expected = cfg.c1 / (4.0 + cfg.c1);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert!(matches!(
            mssim(&x, &y, 4, 16, &cfg),
            Err(MetricsError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn literal_form_is_not_one_at_identical_images() {
        let cfg = SsimConfig {
            form: SsimForm::Literal,
            ..SsimConfig::default()
        };
        let x: Vec<f64> = (0..64).map(|i| (i as f64 / 32.0) - 1.0).collect();
        assert!((mssim(&x, &x, 8, 8, &cfg).unwrap() - 1.0).abs() > 1e-3);
    }

    #[test]
    fn rec_on_identity_and_zero_column() {
        let mut rng = Rng::new(7);
        let x1 = rng.gaussian(&[10, 4], 0.0, 1.0).unwrap();
        let x2 = rng.gaussian(&[10, 4], 0.0, 1.0).unwrap();
        let id = MeasurementOperator::from_matrix(Tensor::eye(4)).unwrap();
        let r = estimate_rec(&id, &x1, &x2, 0).unwrap();
        assert!((r.alpha - 1.0).abs() < 1e-12 && (r.beta - 1.0).abs() < 1e-12);
        let s = estimate_s_rec(&id, &x1, &x2, 0).unwrap();
        assert_eq!(s.gamma, r.alpha);
        let a = MeasurementOperator::from_matrix(
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let p = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let r = estimate_rec(&a, &p, &q, 0).unwrap();
        assert_eq!((r.alpha, r.pairs, r.skipped), (0.0, 1, 1));
        assert!(matches!(
            estimate_rec(&a, &q, &q, 0),
            Err(MetricsError::DegeneratePairs(2))
        ));
    }

    #[test]
    fn aligned_scaled_operator_gives_c_squared() {
        let mut rng = Rng::new(8);
        let m = make_synthetic_manifold(20, 3, &mut rng).unwrap();
        let c = 1.3;
        let a = MeasurementOperator::aligned_orthogonal(6, &m.w, &[c; 6], &mut rng).unwrap();
        let (_, x) = m.sample(12, &mut rng).unwrap();
        let (p, q) = all_pairs(&x).unwrap();
        assert_eq!(p.rows(), 66);
        let r = estimate_rec(&a, &p, &q, 0).unwrap();
        assert!((r.alpha - c * c).abs() < 1e-10 && (r.beta - c * c).abs() < 1e-10);
    }

    #[test]
    fn exact_and_zero_projectors() {
        let mut rng = Rng::new(9);
        let m = make_synthetic_manifold(12, 3, &mut rng).unwrap();
        let g = m.generator_network();
        let samples = rng.gaussian(&[6, 12], 0.0, 1.0).unwrap();
        let oracle = InnerConfig {
            iters: 300,
            lr: 0.25,
            ..InnerConfig::default()
        };
        let est = estimate_projector_delta(&g, &m.pinv_network(), &samples, None, &oracle).unwrap();
        assert!(est.delta <= 1e-8 && est.excluded == 0);

        // G+ = 0 sends every sample to G(0) = b.
        let zero = MlpNetwork::new(&[12, 3], &[crate::mlp::Activation::Identity], 0).unwrap();
        let est = estimate_projector_delta(&g, &zero, &samples, None, &oracle).unwrap();
        let dist_b = samples.add_row_vector(&m.b.scale(-1.0)).unwrap().row_norms_sq();
        let proj = m.exact_project(&samples).unwrap().sub(&samples).unwrap().row_norms_sq();
        let expected = dist_b
            .iter()
            .zip(&proj)
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((est.delta - expected).abs() < 1e-8, "{} vs {expected}", est.delta);
    }

    #[test]
    fn bound_uses_zero_power_one() {
        assert_eq!(linear_convergence_bound(1.0, 1.0, 0.0, 5.0, 0), Some(5.0));
        assert_eq!(linear_convergence_bound(1.0, 1.0, 0.0, 5.0, 3), Some(0.0));
        assert_eq!(linear_convergence_bound(1.0, 2.0, 0.0, 5.0, 1), None);
        let chk = check_linear_convergence(&[4.0, 1.0, 0.2], 1.0, 1.5, 0.0, 0.0).unwrap();
        assert!(chk.holds);
        assert_eq!(chk.bounds, vec![4.0, 2.0, 1.0]);
        let bad = check_linear_convergence(&[4.0, 3.0], 1.0, 1.5, 0.0, 0.0).unwrap();
        assert_eq!(bad.first_violation, Some(1));
    }
}
