//! Training procedures for the generative priors and the pseudo-inverse.
//!
//! * [`gan`]: minimax GAN with binary cross-entropy, optionally conditioned
//!   on measurements `y = A x + e` fed to both networks.
//! * [`began`]: conditional BEGAN with an auto-encoding discriminator and the
//!   proportional control variable `beta`.
//! * [`pinv`]: fitting `G+` so that `G o G+` approximately projects onto
//!   the range of a frozen generator.

pub mod began;
pub mod gan;
pub mod pinv;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::mlp::MlpError;
use crate::rng::Rng;
use crate::sensing::{MeasurementOperator, NoiseSpec, SensingError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("{stage} training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
        /// Batch losses up to the failure.
        trace: Vec<f64>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean discriminator loss over the epoch's batches.
    pub loss_d: f64,
    pub loss_g: f64,
    /// BEGAN control variable at the end of the epoch.
    pub beta: Option<f64>,
    pub wall_ms: f64,
}

/// `epoch,L_D,L_G[,beta],wall_ms`; the beta column appears when any row
/// carries one. `with_timing = false` leaves the wall-time field empty so
/// logs of identical runs compare equal.
pub fn epoch_log_csv(rows: &[EpochLog], with_timing: bool) -> String {
    let with_beta = rows.iter().any(|r| r.beta.is_some());
    let mut out = String::from(if with_beta {
        "epoch,L_D,L_G,beta,wall_ms\n"
    } else {
        "epoch,L_D,L_G,wall_ms\n"
    });
    for r in rows {
        out.push_str(&format!("{},{:e},{:e}", r.epoch, r.loss_d, r.loss_g));
        if with_beta {
            out.push_str(&format!(",{:e}", r.beta.unwrap_or(f64::NAN)));
        }
        if with_timing {
            out.push_str(&format!(",{:.3}\n", r.wall_ms));
        } else {
            out.push_str(",\n");
        }
    }
    out
}

/// The measurement channel that conditional models see.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub operator: MeasurementOperator,
    pub noise: NoiseSpec,
}

impl Conditioning {
    pub fn noiseless(operator: MeasurementOperator) -> Self {
        Self {
            operator,
            noise: NoiseSpec::noiseless(),
        }
    }

    pub fn dim(&self) -> usize {
        self.operator.m()
    }

    /// `A x + e` for a batch.
    pub fn measure(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let ax = self.operator.apply(x)?;
        let e = self.noise.draw(&ax, rng)?;
        Ok(ax.add(&e)?)
    }
}

pub(crate) fn check_finite(stage: &'static str, epoch: usize, batch: usize, values: &[(&str, f64)], trace: &[f64]) -> Result<()> {
    if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(TrainingError::Divergence {
            stage,
            epoch,
            batch,
            detail: format!("{name} = {v}"),
            trace: trace.to_vec(),
        });
    }
    Ok(())
}

/// Adds `N(0, std^2)` noise to every entry (no-op for `std = 0`).
pub(crate) fn jitter(x: &Tensor, std: f64, rng: &mut Rng) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(x.clone());
    }
    Ok(x.add(&rng.gaussian(x.shape(), 0.0, std)?)?)
}
