//! The linear forward model `y = A x + e`.
//!
//! Signals are handled in batches: a batch is a `[C x n]` tensor with one
//! signal per row, and its measurements are `[C x m]`.

use thiserror::Error;

use crate::linalg::orthonormalize_columns;
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor, TensorError, Transpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensingError {
    #[error("invalid operator dimensions m={m}, n={n} (need 1 <= m <= n)")]
    Dimensions { m: usize, n: usize },
    #[error("signal has zero measurement energy (row {row}); a finite SNR target is undefined")]
    DegenerateSignal { row: usize },
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SensingError>;

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    matrix: Tensor,
    seed: u64,
}

impl MeasurementOperator {
    /// `m x n` operator with i.i.d. `N(0, 1/m)` entries drawn from a stream
    /// seeded by `seed`.
    pub fn gaussian(m: usize, n: usize, seed: u64) -> Result<Self> {
        make_measurement_operator(m, n, &mut Rng::new(seed))
    }

    /// Wraps an explicit matrix (seed recorded as 0).
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        let (m, n) = matrix.dims2()?;
        if m == 0 || m > n {
            return Err(SensingError::Dimensions { m, n });
        }
        Ok(Self { matrix, seed: 0 })
    }

    /// Operator with orthonormal rows (each row scaled by `row_scales[i]`)
    /// whose row space contains the column space of `basis` (`[n x k]`,
    /// `k <= m`). For differences `d` inside that subspace,
    /// `|A d|^2 / |d|^2` then lies between the extreme squared scales.
    pub fn aligned_orthogonal(m: usize, basis: &Tensor, row_scales: &[f64], rng: &mut Rng) -> Result<Self> {
        let (n, k) = basis.dims2()?;
        if m == 0 || m > n || k > m || row_scales.len() != m {
            return Err(SensingError::Dimensions { m, n });
        }
        let seed = rng.seed();
        // Columns: basis first, then random directions; orthonormalise and
        // rotate within the m-dimensional span so rows do not single out
        // the basis.
        let extra = rng.gaussian(&[n, m - k], 0.0, 1.0)?;
        let joined = Tensor::concat_cols(basis, &extra)?;
        let q = orthonormalize_columns(&joined)?; // [n x m]
        let rot = orthonormalize_columns(&rng.gaussian(&[m, m], 0.0, 1.0)?)?; // [m x m]
        let mut rows = gemm(&rot, Transpose::Yes, &q, Transpose::Yes)?; // [m x n]
        for (i, s) in row_scales.iter().enumerate() {
            for v in rows.row_slice_mut(i) {
                *v *= s;
            }
        }
        Ok(Self { matrix: rows, seed })
    }

    /// Operator with orthonormal rows obtained by orthonormalising a
    /// Gaussian draw.
    pub fn row_orthogonalized(m: usize, n: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 || m > n {
            return Err(SensingError::Dimensions { m, n });
        }
        let seed = rng.seed();
        let g = rng.gaussian(&[n, m], 0.0, 1.0)?;
        let q = orthonormalize_columns(&g)?;
        Ok(Self {
            matrix: q.transpose()?,
            seed,
        })
    }

    pub fn m(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n(&self) -> usize {
        self.matrix.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// `A x` for every row of `x` (`[C x n] -> [C x m]`).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let x = as_batch(x, self.n(), "apply")?;
        Ok(gemm(&x, Transpose::No, &self.matrix, Transpose::Yes)?)
    }

    /// `A^T v` for every row of `v` (`[C x m] -> [C x n]`).
    pub fn adjoint(&self, v: &Tensor) -> Result<Tensor> {
        let v = as_batch(v, self.m(), "adjoint")?;
        Ok(gemm(&v, Transpose::No, &self.matrix, Transpose::No)?)
    }
}

fn as_batch(x: &Tensor, width: usize, op: &'static str) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    if c != width {
        return Err(TensorError::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![width],
        }
        .into());
    }
    Ok(x.clone().reshape(&[x.len() / width, width])?)
}

pub fn make_measurement_operator(m: usize, n: usize, rng: &mut Rng) -> Result<MeasurementOperator> {
    if m == 0 || m > n {
        return Err(SensingError::Dimensions { m, n });
    }
    let seed = rng.seed();
    let matrix = rng.gaussian(&[m, n], 0.0, (1.0 / m as f64).sqrt())?;
    Ok(MeasurementOperator { matrix, seed })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    Noiseless,
    /// Realised `10 log10(|Ax|^2 / |e|^2)` equals the target exactly.
    TargetSnrDb(f64),
    /// i.i.d. `N(0, sigma^2)` entries.
    FixedSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            mode: NoiseMode::Noiseless,
            seed: 0,
        }
    }

    pub fn snr_db(db: f64, seed: u64) -> Self {
        Self {
            mode: NoiseMode::TargetSnrDb(db),
            seed,
        }
    }

    pub fn sigma(sigma: f64, seed: u64) -> Self {
        Self {
            mode: NoiseMode::FixedSigma(sigma),
            seed,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        matches!(self.mode, NoiseMode::Noiseless)
    }

    /// Noise for every row of the clean measurements `ax` (`[C x m]`).
    pub fn draw(&self, ax: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        match self.mode {
            NoiseMode::Noiseless => Ok(Tensor::zeros(ax.shape())),
            NoiseMode::FixedSigma(s) => {
                if !(s >= 0.0) {
                    return Err(SensingError::InvalidNoise(format!("negative sigma {s}")));
                }
                Ok(rng.gaussian(ax.shape(), 0.0, s)?)
            }
            NoiseMode::TargetSnrDb(db) => scaled_noise(ax, db, rng),
        }
    }
}

/// Noise whose realised SNR against `A x` equals `snr_db` exactly, one
/// independent draw per row of `x`.
pub fn noise_for_snr(a: &MeasurementOperator, x: &Tensor, snr_db: f64, rng: &mut Rng) -> Result<Tensor> {
    let ax = a.apply(x)?;
    scaled_noise(&ax, snr_db, rng)
}

fn scaled_noise(ax: &Tensor, snr_db: f64, rng: &mut Rng) -> Result<Tensor> {
    if snr_db.is_nan() {
        return Err(SensingError::InvalidNoise("SNR target is NaN".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(Tensor::zeros(ax.shape()));
    }
    let (rows, cols) = ax.dims2()?;
    let mut g = rng.gaussian(&[rows, cols], 0.0, 1.0)?;
    let amp = 10f64.powf(snr_db / 20.0);
    for r in 0..rows {
        let signal = ax.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if signal == 0.0 {
            return Err(SensingError::DegenerateSignal { row: r });
        }
        let row = g.row_slice_mut(r);
        let gn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = signal / (amp * gn);
        for v in row.iter_mut() {
            *v *= s;
        }
    }
    Ok(g.reshape(ax.shape())?)
}

/// `y = A x + e` for a batch.
pub fn measure(a: &MeasurementOperator, x: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let ax = a.apply(x)?;
    let noise = noise.clone().reshape(ax.shape()).map_err(|_| TensorError::ShapeMismatch {
        op: "measure",
        left: ax.shape().to_vec(),
        right: noise.shape().to_vec(),
    })?;
    Ok(ax.add(&noise)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn realised_snr_db(ax: &Tensor, e: &Tensor) -> f64 {
        10.0 * (ax.norm_sq() / e.norm_sq()).log10()
    }

    #[test]
    fn operator_shape_and_entry_variance() {
        let a = MeasurementOperator::gaussian(39, 784, 1).unwrap();
        assert_eq!(a.matrix().shape(), &[39, 784]);
        let d = a.matrix().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(var > 0.8 / 39.0 && var < 1.2 / 39.0, "var {var}");
        // mean within 3 sigma / sqrt(N)
        assert!(mean.abs() < 3.0 * (1.0f64 / 39.0).sqrt() / (d.len() as f64).sqrt());
        assert_eq!(MeasurementOperator::gaussian(15, 784, 2).unwrap().m(), 15);
    }

    #[test]
    fn operator_is_seeded() {
        assert_eq!(
            MeasurementOperator::gaussian(5, 9, 3).unwrap(),
            MeasurementOperator::gaussian(5, 9, 3).unwrap()
        );
    }

    #[test]
    fn invalid_dimensions_are_rejected() {
        assert!(MeasurementOperator::gaussian(10, 5, 0).is_err());
        assert!(MeasurementOperator::gaussian(0, 5, 0).is_err());
    }

    #[test]
    fn snr_targets_are_met_exactly() {
        let a = MeasurementOperator::gaussian(12, 30, 4).unwrap();
        let x = Rng::new(5).gaussian(&[3, 30], 0.0, 1.0).unwrap();
        let ax = a.apply(&x).unwrap();
        let e0 = noise_for_snr(&a, &x, 0.0, &mut Rng::new(6)).unwrap();
        for r in 0..3 {
            let s = Tensor::vector(ax.row_slice(r)).norm_sq();
            let n = Tensor::vector(e0.row_slice(r)).norm_sq();
            assert!((s - n).abs() / s < 1e-12);
        }
        let e20 = noise_for_snr(&a, &x, 20.0, &mut Rng::new(6)).unwrap();
        let s = Tensor::vector(ax.row_slice(0)).norm_sq();
        let n = Tensor::vector(e20.row_slice(0)).norm_sq();
        assert!((n - s / 100.0).abs() / (s / 100.0) < 1e-12);
        for db in [-20.0, -3.5, 7.0, 40.0] {
            let e = noise_for_snr(&a, &x, db, &mut Rng::new(7)).unwrap();
            let single_ax = Tensor::vector(ax.row_slice(1));
            let single_e = Tensor::vector(e.row_slice(1));
            let got = realised_snr_db(&single_ax, &single_e);
            assert!(((got - db) / db).abs() < 1e-12, "{got} vs {db}");
        }
    }

    #[test]
    fn noiseless_gives_zero_noise() {
        let ax = Tensor::row(&[1.0, 2.0]);
        assert_eq!(NoiseSpec::noiseless().draw(&ax, &mut Rng::new(0)).unwrap(), Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn zero_signal_with_finite_target_fails() {
        let a = MeasurementOperator::gaussian(3, 4, 0).unwrap();
        let x = Tensor::zeros(&[1, 4]);
        assert_eq!(
            noise_for_snr(&a, &x, 10.0, &mut Rng::new(0)).unwrap_err(),
            SensingError::DegenerateSignal { row: 0 }
        );
    }

    #[test]
    fn measure_hand_examples() {
        let a = MeasurementOperator::from_matrix(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap()).unwrap();
        let y = measure(&a, &Tensor::row(&[1.0, 1.0]), &Tensor::row(&[0.5, -0.5])).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5]);
        let id = MeasurementOperator::from_matrix(Tensor::eye(3)).unwrap();
        let x = Tensor::row(&[0.1, 0.2, 0.3]);
        assert_eq!(measure(&id, &x, &Tensor::zeros(&[1, 3])).unwrap(), x);
        assert!(measure(&id, &x, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn measurement_is_linear() {
        let a = MeasurementOperator::gaussian(6, 10, 8).unwrap();
        let mut rng = Rng::new(9);
        let x1 = rng.gaussian(&[1, 10], 0.0, 1.0).unwrap();
        let x2 = rng.gaussian(&[1, 10], 0.0, 1.0).unwrap();
        let zero = Tensor::zeros(&[1, 6]);
        let (p, q) = (1.7, -0.3);
        let mut combo = x1.scale(p);
        combo.axpy(q, &x2).unwrap();
        let lhs = measure(&a, &combo, &zero).unwrap();
        let mut rhs = measure(&a, &x1, &zero).unwrap().scale(p);
        rhs.axpy(q, &measure(&a, &x2, &zero).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn aligned_operator_is_isometric_on_the_subspace() {
        let mut rng = Rng::new(10);
        let basis = orthonormalize_columns(&rng.gaussian(&[16, 3], 0.0, 1.0).unwrap()).unwrap();
        let a = MeasurementOperator::aligned_orthogonal(6, &basis, &[1.0; 6], &mut rng).unwrap();
        let u = rng.gaussian(&[3, 1], 0.0, 1.0).unwrap();
        let d = basis.matmul(&u).unwrap().reshape(&[1, 16]).unwrap();
        let ad = a.apply(&d).unwrap();
        assert!((ad.norm_sq() - d.norm_sq()).abs() < 1e-12);
    }
}
