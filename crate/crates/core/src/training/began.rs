//! Conditional BEGAN.
//!
//! The discriminator is an auto-encoder `D(x|y)` and `L_B(x, y)` its
//! reconstruction error `|x - D(x|y)|` (unsquared, averaged over the batch).
//! Per step:
//!
//! ```text
//! L_D = L_B(x, y) - beta L_B(G(z|y), y)
//! L_G = L_B(G(z|y), y)
//! beta <- clamp(beta + lambda (gamma L_B(x, y) - L_B(G(z|y), y)), 0, 1)
//! ```

use web_time::Instant;

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{Tape, Var};
use crate::data::epoch_batches;
use crate::mlp::{Activation, ForwardOptions, MlpNetwork, NetVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::gan::{streams, GanArchitecture, StepIndex};
use super::{check_finite, Conditioning, EpochLog, Result, TrainingError};

#[derive(Debug, Clone, PartialEq)]
pub struct BeganConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub adam: AdamConfig,
    pub gamma: f64,
    pub lambda: f64,
    pub conditional: bool,
    /// Auto-encoder code width; defaults to the latent dimension.
    pub bottleneck: Option<usize>,
}

impl Default for BeganConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            latent_dim: 64,
            adam: AdamConfig::default(),
            gamma: 0.5,
            lambda: 0.001,
            conditional: true,
            bottleneck: None,
        }
    }
}

/// Control variable of the generator/discriminator balance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeganState {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl BeganState {
    /// `beta_0 = 0`.
    pub fn new(gamma: f64, lambda: f64) -> Self {
        Self {
            beta: 0.0,
            gamma,
            lambda,
        }
    }

    /// Proportional update, clamped to `[0, 1]`. Returns the new beta.
    pub fn update(&mut self, lb_real: f64, lb_fake: f64) -> f64 {
        let next = self.beta + self.lambda * (self.gamma * lb_real - lb_fake);
        self.beta = next.clamp(0.0, 1.0);
        self.beta
    }
}

/// Auto-encoder `n(+m) -> hidden -> h -> reversed hidden -> n` with leaky
/// hidden layers, a linear code and a tanh output.
pub fn autoencoder(n: usize, condition_dim: usize, hidden: &[usize], bottleneck: usize, rng: &mut Rng) -> Result<MlpNetwork> {
    let mut dims = vec![n];
    dims.extend_from_slice(hidden);
    dims.push(bottleneck);
    dims.extend(hidden.iter().rev());
    dims.push(n);
    let mut acts = Vec::with_capacity(dims.len() - 1);
    acts.extend(std::iter::repeat(Activation::leaky()).take(hidden.len()));
    acts.push(Activation::Identity);
    acts.extend(std::iter::repeat(Activation::leaky()).take(hidden.len()));
    acts.push(Activation::Tanh);
    Ok(MlpNetwork::random(&dims, &acts, condition_dim, rng)?)
}

/// Per-row `|x_i - D(x_i|y_i)|`.
pub fn began_reconstruction_losses(d_ae: &MlpNetwork, x: &Tensor, cond: Option<&Tensor>) -> Result<Vec<f64>> {
    let out = d_ae.forward(x, cond)?;
    if out.shape() != x.shape() {
        return Err(TrainingError::Config(format!(
            "auto-encoder maps to {:?}, input is {:?}",
            out.shape(),
            x.shape()
        )));
    }
    Ok(out.sub(x)?.row_norms_sq().into_iter().map(f64::sqrt).collect())
}

/// Batch mean of [`began_reconstruction_losses`].
pub fn began_reconstruction_loss(d_ae: &MlpNetwork, x: &Tensor, cond: Option<&Tensor>) -> Result<f64> {
    let l = began_reconstruction_losses(d_ae, x, cond)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// `L_B` on a tape.
pub fn began_loss_tape(tape: &mut Tape<'_>, d_ae: &MlpNetwork, vars: &NetVars, x: Var, cond: Option<Var>) -> Result<Var> {
    let out = d_ae.forward_tape(tape, vars, x, cond, ForwardOptions::default())?;
    let diff = tape.sub(out, x)?;
    let norms = tape.row_norm(diff)?;
    Ok(tape.mean(norms))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeganStepLog {
    pub loss_d: f64,
    pub loss_g: f64,
    pub lb_real: f64,
    pub lb_fake: f64,
    /// Beta after the update.
    pub beta: f64,
    /// `L_B(x) / L_B(G(z))`, logged only.
    pub ratio: f64,
}

/// One simultaneous Adam step on `L_D` and `L_G` from the same forward
/// pass, followed by the beta update with the pre-step losses.
#[allow(clippy::too_many_arguments)]
pub fn began_step(
    g: &mut MlpNetwork,
    opt_g: &mut AdamState,
    d_ae: &mut MlpNetwork,
    opt_d: &mut AdamState,
    state: &mut BeganState,
    x: &Tensor,
    z: &Tensor,
    cond: Option<&Tensor>,
    at: StepIndex,
) -> Result<BeganStepLog> {
    if !(0.0..=1.0).contains(&state.beta) {
        return Err(TrainingError::Config(format!("beta {} outside [0, 1]", state.beta)));
    }
    let (lb_real, lb_fake, loss_d, grads_d, grads_g) = {
        let mut tape = Tape::new();
        let gv = g.register(&mut tape, true);
        let dv = d_ae.register(&mut tape, true);
        let zv = tape.constant_ref(z);
        let xv = tape.constant_ref(x);
        let c = cond.map(|c| tape.constant_ref(c));
        let fake = g.forward_tape(&mut tape, &gv, zv, c, ForwardOptions::default())?;
        let lr = began_loss_tape(&mut tape, d_ae, &dv, xv, c)?;
        let lf = began_loss_tape(&mut tape, d_ae, &dv, fake, c)?;
        let weighted = tape.scale(lf, state.beta);
        let ld = tape.sub(lr, weighted)?;
        let (lb_real, lb_fake, loss_d) = (tape.value(lr).data()[0], tape.value(lf).data()[0], tape.value(ld).data()[0]);
        check_finite(
            "began",
            at.epoch,
            at.batch,
            &[("L_D", loss_d), ("L_G", lb_fake), ("L_B(x)", lb_real)],
            &[],
        )?;
        let gd = tape.backward(ld)?;
        let grads_d: Vec<Tensor> = dv.ordered().into_iter().map(|v| gd.get_or_zeros(v, tape.value(v))).collect();
        let gg = tape.backward(lf)?;
        let grads_g: Vec<Tensor> = gv.ordered().into_iter().map(|v| gg.get_or_zeros(v, tape.value(v))).collect();
        (lb_real, lb_fake, loss_d, grads_d, grads_g)
    };
    opt_d.step(&mut d_ae.params_mut(), &grads_d)?;
    opt_g.step(&mut g.params_mut(), &grads_g)?;
    let beta = state.update(lb_real, lb_fake);
    Ok(BeganStepLog {
        loss_d,
        loss_g: lb_fake,
        lb_real,
        lb_fake,
        beta,
        ratio: lb_real / lb_fake,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeganOutcome {
    pub generator: MlpNetwork,
    pub autoencoder: MlpNetwork,
    pub state: BeganState,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<BeganStepLog>,
}

/// Trains a (conditional) BEGAN on the rows of `data`. The generator uses
/// `arch`; the auto-encoder mirrors its hidden widths.
pub fn train_began(
    data: &Tensor,
    cfg: &BeganConfig,
    arch: &GanArchitecture,
    conditioning: Option<&Conditioning>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog, &MlpNetwork, &MlpNetwork) -> Result<()>,
) -> Result<BeganOutcome> {
    if cfg.batch_size == 0 || cfg.latent_dim == 0 {
        return Err(TrainingError::Config("batch_size and latent_dim must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.gamma) || !(cfg.lambda >= 0.0) {
        return Err(TrainingError::Config("gamma in [0, 1] and lambda >= 0 required".into()));
    }
    let conditioning = match (cfg.conditional, conditioning) {
        (true, Some(c)) => Some(c),
        (true, None) => return Err(TrainingError::Config("conditional BEGAN needs a measurement operator".into())),
        (false, _) => None,
    };
    let (count, n) = data.dims2()?;
    if count == 0 {
        return Err(TrainingError::Config("empty training set".into()));
    }
    let cdim = conditioning.map_or(0, Conditioning::dim);
    let mut g = arch.generator(cfg.latent_dim, n, cdim, &mut Rng::derive(seed, streams::INIT_G))?;
    let mut d = autoencoder(
        n,
        cdim,
        &arch.generator_hidden,
        cfg.bottleneck.unwrap_or(cfg.latent_dim),
        &mut Rng::derive(seed, streams::INIT_D),
    )?;
    let mut opt_g = AdamState::new(cfg.adam, g.params());
    let mut opt_d = AdamState::new(cfg.adam, d.params());
    let mut state = BeganState::new(cfg.gamma, cfg.lambda);
    let mut shuffle = Rng::derive(seed, streams::SHUFFLE);
    let mut latent = Rng::derive(seed, streams::LATENT);
    let mut meas = Rng::derive(seed, streams::MEASUREMENT);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut sum_d, mut sum_g) = (0.0, 0.0);
        let batches = epoch_batches(count, cfg.batch_size, &mut shuffle)?;
        for (b, idx) in batches.iter().enumerate() {
            let x = data.select_rows(idx)?;
            let y = conditioning.map(|c| c.measure(&x, &mut meas)).transpose()?;
            let z = latent.gaussian(&[idx.len(), cfg.latent_dim], 0.0, 1.0)?;
            let s = began_step(
                &mut g,
                &mut opt_g,
                &mut d,
                &mut opt_d,
                &mut state,
                &x,
                &z,
                y.as_ref(),
                StepIndex { epoch, batch: b },
            )?;
            sum_d += s.loss_d;
            sum_g += s.loss_g;
            steps.push(s);
        }
        let entry = EpochLog {
            epoch,
            loss_d: sum_d / batches.len() as f64,
            loss_g: sum_g / batches.len() as f64,
            beta: Some(state.beta),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&entry, &g, &d)?;
        epochs.push(entry);
    }
    Ok(BeganOutcome {
        generator: g,
        autoencoder: d,
        state,
        epochs,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::MeasurementOperator;
    use proptest::prelude::{prop_assert, proptest};
    use crate::rng::Rng;

    #[test]
    fn control_law_hand_value_and_fixed_point() {
        let mut s = BeganState::new(0.5, 0.001);
        assert_eq!(s.beta, 0.0);
        let b = s.update(2.0, 0.5);
        assert!((b - 0.0005).abs() < 1e-18);
        let mut fixed = BeganState {
            beta: 0.3,
            ..BeganState::new(0.5, 0.001)
        };
        fixed.update(2.0, 1.0);
        assert_eq!(fixed.beta, 0.3);
    }

    #[test]
    fn reconstruction_loss_oracles() {
        let id = MlpNetwork::from_params(&[3, 3], &[Activation::Identity], 0, vec![Tensor::eye(3)], vec![Tensor::zeros(&[3])]).unwrap();
        let x = Tensor::row(&[1.0, 2.0, 2.0]);
        assert_eq!(began_reconstruction_loss(&id, &x, None).unwrap(), 0.0);
        let zero = MlpNetwork::new(&[3, 3], &[Activation::Identity], 0).unwrap();
        assert_eq!(began_reconstruction_loss(&zero, &x, None).unwrap(), 3.0);

        let mut rng = Rng::new(1);
        let d = autoencoder(6, 2, &[5], 3, &mut rng).unwrap();
        let x = rng.gaussian(&[4, 6], 0.0, 1.0).unwrap();
        let y = rng.gaussian(&[4, 2], 0.0, 1.0).unwrap();
        let out = d.forward(&x, Some(&y)).unwrap();
        let mut manual = 0.0;
        for i in 0..4 {
            let mut s = 0.0f64;
            for j in 0..6 {
                s += (x.row_slice(i)[j] - out.row_slice(i)[j]).powi(2);
            }
            manual += s.sqrt() / 4.0;
        }
        let mut tape = Tape::new();
        let dv = d.register(&mut tape, false);
        let xv = tape.constant_ref(&x);
        let yv = tape.constant_ref(&y);
        let l = began_loss_tape(&mut tape, &d, &dv, xv, Some(yv)).unwrap();
        assert!((tape.value(l).data()[0] - manual).abs() < 1e-12);
        assert!((began_reconstruction_loss(&d, &x, Some(&y)).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn autoencoder_shape_mirrors_generator() {
        let d = autoencoder(784, 39, &[256, 256], 64, &mut Rng::new(0)).unwrap();
        assert_eq!(d.layer_dims(), &[784, 256, 256, 64, 256, 256, 784]);
        assert_eq!(d.weight(0).shape(), &[256, 823]);
    }

    #[test]
    fn short_run_keeps_beta_in_range() {
        let mut rng = Rng::new(2);
        let data = rng.gaussian(&[24, 8], 0.0, 0.4).unwrap().map(f64::tanh);
        let cond = Conditioning::noiseless(MeasurementOperator::gaussian(3, 8, 3).unwrap());
        let cfg = BeganConfig {
            epochs: 3,
            batch_size: 8,
            latent_dim: 4,
            adam: AdamConfig::with_lr(1e-3),
            ..BeganConfig::default()
        };
        let arch = GanArchitecture {
            generator_hidden: vec![6],
            ..GanArchitecture::default()
        };
        let out = train_began(&data, &cfg, &arch, Some(&cond), 4, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(out.steps.len(), 9);
        assert!(out.steps.iter().all(|s| (0.0..=1.0).contains(&s.beta) && s.loss_d.is_finite()));
    }

    proptest! {
        #[test]
        fn beta_stays_clamped(beta in 0.0f64..=1.0, lambda in 0.0f64..10.0, gamma in 0.0f64..=1.0,
                              lr in 0.0f64..1e3, lf in 0.0f64..1e3) {
            let mut s = BeganState { beta, gamma, lambda };
            let b = s.update(lr, lf);
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }
}
