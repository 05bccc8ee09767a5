//! Minimax GAN training with optional measurement conditioning.
//!
//! The discriminator minimises binary cross-entropy and the generator the
//! non-saturating loss `-log D(G(z|y)|y)`. Both losses are evaluated on the
//! discriminator's logits so that saturated outputs stay finite.

use web_time::Instant;

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{log_sigmoid, Tape, Var};
use crate::data::epoch_batches;
use crate::mlp::{Activation, ForwardOptions, MlpNetwork, NetVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{check_finite, jitter, Conditioning, EpochLog, Result, TrainingError};

#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub adam: AdamConfig,
    pub conditional: bool,
    /// Real-label target is `1 - label_smoothing`.
    pub label_smoothing: f64,
    /// Std of Gaussian noise added to every discriminator input.
    pub input_noise_std: f64,
    /// Dropout on the discriminator's hidden layers.
    pub dropout_rate: f64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            latent_dim: 64,
            adam: AdamConfig::default(),
            conditional: false,
            label_smoothing: 0.0,
            input_noise_std: 0.0,
            dropout_rate: 0.0,
        }
    }
}

impl GanTrainConfig {
    /// MNIST settings: real target 0.9, input-noise variance 0.5, dropout
    /// 0.5 on the discriminator.
    pub fn mnist_preset(conditional: bool) -> Self {
        Self {
            conditional,
            label_smoothing: 0.1,
            input_noise_std: 0.5f64.sqrt(),
            dropout_rate: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.latent_dim == 0 {
            return Err(TrainingError::Config("batch_size and latent_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainingError::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(self.input_noise_std >= 0.0) {
            return Err(TrainingError::Config("dropout in [0, 1) and noise std >= 0 required".into()));
        }
        Ok(())
    }

    pub fn real_target(&self) -> f64 {
        1.0 - self.label_smoothing
    }
}

/// Hidden widths and activations of the MLP generator and discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct GanArchitecture {
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub generator_activation: Activation,
    pub generator_output: Activation,
    pub discriminator_activation: Activation,
}

impl Default for GanArchitecture {
    /// `k-256-256-n` relu/tanh generator, `n-256-256-1` leaky discriminator.
    fn default() -> Self {
        Self {
            generator_hidden: vec![256, 256],
            discriminator_hidden: vec![256, 256],
            generator_activation: Activation::Relu,
            generator_output: Activation::Tanh,
            discriminator_activation: Activation::leaky(),
        }
    }
}

fn widths(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
    let mut d = vec![first];
    d.extend_from_slice(hidden);
    d.push(last);
    d
}

impl GanArchitecture {
    pub fn generator(&self, k: usize, n: usize, condition_dim: usize, rng: &mut Rng) -> Result<MlpNetwork> {
        let dims = widths(k, &self.generator_hidden, n);
        let mut acts = vec![self.generator_activation; dims.len() - 2];
        acts.push(self.generator_output);
        Ok(MlpNetwork::random(&dims, &acts, condition_dim, rng)?)
    }

    /// Sigmoid output; the losses read the pre-activation logits.
    pub fn discriminator(&self, n: usize, condition_dim: usize, rng: &mut Rng) -> Result<MlpNetwork> {
        let dims = widths(n, &self.discriminator_hidden, 1);
        let mut acts = vec![self.discriminator_activation; dims.len() - 2];
        acts.push(Activation::Sigmoid);
        Ok(MlpNetwork::random(&dims, &acts, condition_dim, rng)?)
    }
}

/// Where a step sits in training; used to label divergence errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepIndex {
    pub epoch: usize,
    pub batch: usize,
}

fn logits(
    tape: &mut Tape<'_>,
    d: &MlpNetwork,
    vars: &NetVars,
    x: Var,
    cond: Option<Var>,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    Ok(d.forward_tape(
        tape,
        vars,
        x,
        cond,
        ForwardOptions {
            dropout: dropout.filter(|(r, _)| *r > 0.0),
            skip_final_activation: true,
        },
    )?)
}

/// `-(t log D(real) + (1 - t) log(1 - D(real)) + log(1 - D(fake))) / 2`,
/// each term averaged over its batch.
pub fn discriminator_loss_tape(
    tape: &mut Tape<'_>,
    d: &MlpNetwork,
    vars: &NetVars,
    real: Var,
    fake: Var,
    cond: Option<Var>,
    real_target: f64,
    mut dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let lr = logits(tape, d, vars, real, cond, dropout.as_mut().map(|(r, g)| (*r, &mut **g)))?;
    let lf = logits(tape, d, vars, fake, cond, dropout)?;
    let log_d_real = tape.log_sigmoid(lr);
    let neg_lr = tape.scale(lr, -1.0);
    let log_1m_d_real = tape.log_sigmoid(neg_lr);
    let neg_lf = tape.scale(lf, -1.0);
    let log_1m_d_fake = tape.log_sigmoid(neg_lf);
    let a = tape.scale(log_d_real, real_target);
    let b = tape.scale(log_1m_d_real, 1.0 - real_target);
    let real_term = tape.add(a, b)?;
    let real_mean = tape.mean(real_term);
    let fake_mean = tape.mean(log_1m_d_fake);
    let total = tape.add(real_mean, fake_mean)?;
    Ok(tape.scale(total, -0.5))
}

/// `-mean log D(fake)`.
pub fn generator_loss_tape(
    tape: &mut Tape<'_>,
    d: &MlpNetwork,
    vars: &NetVars,
    fake: Var,
    cond: Option<Var>,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let lf = logits(tape, d, vars, fake, cond, dropout)?;
    let l = tape.log_sigmoid(lf);
    let m = tape.mean(l);
    Ok(tape.scale(m, -1.0))
}

/// [`discriminator_loss_tape`] evaluated by a plain forward pass.
pub fn discriminator_loss_value(
    d: &MlpNetwork,
    real: &Tensor,
    fake: &Tensor,
    cond: Option<&Tensor>,
    real_target: f64,
) -> Result<f64> {
    let lr = d.forward_pre_activation(real, cond)?;
    let lf = d.forward_pre_activation(fake, cond)?;
    let real_term = lr
        .data()
        .iter()
        .map(|&l| real_target * log_sigmoid(l) + (1.0 - real_target) * log_sigmoid(-l))
        .sum::<f64>()
        / lr.len() as f64;
    let fake_term = lf.data().iter().map(|&l| log_sigmoid(-l)).sum::<f64>() / lf.len() as f64;
    Ok(-(real_term + fake_term) / 2.0)
}

/// [`generator_loss_tape`] on `fake = G(z|y)`, by plain forward passes.
pub fn generator_loss_value(g: &MlpNetwork, d: &MlpNetwork, z: &Tensor, cond: Option<&Tensor>) -> Result<f64> {
    let fake = g.forward(z, cond)?;
    let lf = d.forward_pre_activation(&fake, cond)?;
    Ok(-lf.data().iter().map(|&l| log_sigmoid(l)).sum::<f64>() / lf.len() as f64)
}

fn apply_update(net: &mut MlpNetwork, opt: &mut AdamState, grads: &[Tensor]) -> Result<()> {
    let mut params = net.params_mut();
    opt.step(&mut params, grads)?;
    Ok(())
}

/// One Adam step of `d` on the cross-entropy between `real` and
/// `fake = G(z|y)`. `hacks_rng` drives input noise and dropout.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    d: &mut MlpNetwork,
    opt_d: &mut AdamState,
    g: &MlpNetwork,
    real: &Tensor,
    z: &Tensor,
    cond: Option<&Tensor>,
    cfg: &GanTrainConfig,
    hacks_rng: &mut Rng,
    at: StepIndex,
) -> Result<f64> {
    let fake = g.forward(z, cond)?;
    let real_in = jitter(real, cfg.input_noise_std, hacks_rng)?;
    let fake_in = jitter(&fake, cfg.input_noise_std, hacks_rng)?;
    let (loss, grads) = {
        let mut tape = Tape::new();
        let vars = d.register(&mut tape, true);
        let r = tape.constant_ref(&real_in);
        let f = tape.constant_ref(&fake_in);
        let c = cond.map(|c| tape.constant_ref(c));
        let out = discriminator_loss_tape(
            &mut tape,
            d,
            &vars,
            r,
            f,
            c,
            cfg.real_target(),
            Some((cfg.dropout_rate, hacks_rng)),
        )?;
        let loss = tape.value(out).data()[0];
        check_finite("gan", at.epoch, at.batch, &[("L_D", loss)], &[])?;
        let grads = tape.backward(out)?;
        let g: Vec<Tensor> = vars
            .ordered()
            .into_iter()
            .map(|v| grads.get_or_zeros(v, tape.value(v)))
            .collect();
        (loss, g)
    };
    apply_update(d, opt_d, &grads)?;
    Ok(loss)
}

/// One Adam step of `g` on `-log D(G(z|y)|y)`; `d` is only read.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    g: &mut MlpNetwork,
    opt_g: &mut AdamState,
    d: &MlpNetwork,
    z: &Tensor,
    cond: Option<&Tensor>,
    cfg: &GanTrainConfig,
    hacks_rng: &mut Rng,
    at: StepIndex,
) -> Result<f64> {
    let noise = if cfg.input_noise_std > 0.0 {
        Some(hacks_rng.gaussian(&[z.rows(), g.output_dim()], 0.0, cfg.input_noise_std)?)
    } else {
        None
    };
    let (loss, grads) = {
        let mut tape = Tape::new();
        let gv = g.register(&mut tape, true);
        let dv = d.register(&mut tape, false);
        let zv = tape.constant_ref(z);
        let c = cond.map(|c| tape.constant_ref(c));
        let mut fake = g.forward_tape(&mut tape, &gv, zv, c, ForwardOptions::default())?;
        if let Some(n) = noise.as_ref() {
            let nv = tape.constant_ref(n);
            fake = tape.add(fake, nv)?;
        }
        let out = generator_loss_tape(&mut tape, d, &dv, fake, c, Some((cfg.dropout_rate, hacks_rng)))?;
        let loss = tape.value(out).data()[0];
        check_finite("gan", at.epoch, at.batch, &[("L_G", loss)], &[])?;
        let grads = tape.backward(out)?;
        let gr: Vec<Tensor> = gv
            .ordered()
            .into_iter()
            .map(|v| grads.get_or_zeros(v, tape.value(v)))
            .collect();
        (loss, gr)
    };
    apply_update(g, opt_g, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanModels {
    pub generator: MlpNetwork,
    pub discriminator: MlpNetwork,
}

/// Random-stream labels under the run seed.
pub(crate) mod streams {
    pub const INIT_G: u64 = 1;
    pub const INIT_D: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const LATENT: u64 = 4;
    pub const MEASUREMENT: u64 = 5;
    pub const HACKS: u64 = 6;
}

/// Trains a generator/discriminator pair on the rows of `data`.
/// `on_epoch` runs after every epoch (logging, checkpoints).
pub fn train_gan(
    data: &Tensor,
    cfg: &GanTrainConfig,
    arch: &GanArchitecture,
    conditioning: Option<&Conditioning>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog, &GanModels) -> Result<()>,
) -> Result<(GanModels, Vec<EpochLog>)> {
    cfg.validate()?;
    let conditioning = match (cfg.conditional, conditioning) {
        (true, Some(c)) => Some(c),
        (true, None) => return Err(TrainingError::Config("conditional GAN needs a measurement operator".into())),
        (false, _) => None,
    };
    let (count, n) = data.dims2()?;
    if count == 0 {
        return Err(TrainingError::Config("empty training set".into()));
    }
    let cdim = conditioning.map_or(0, Conditioning::dim);
    let mut models = GanModels {
        generator: arch.generator(cfg.latent_dim, n, cdim, &mut Rng::derive(seed, streams::INIT_G))?,
        discriminator: arch.discriminator(n, cdim, &mut Rng::derive(seed, streams::INIT_D))?,
    };
    let mut opt_g = AdamState::new(cfg.adam, models.generator.params());
    let mut opt_d = AdamState::new(cfg.adam, models.discriminator.params());
    let mut shuffle = Rng::derive(seed, streams::SHUFFLE);
    let mut latent = Rng::derive(seed, streams::LATENT);
    let mut meas = Rng::derive(seed, streams::MEASUREMENT);
    let mut hacks = Rng::derive(seed, streams::HACKS);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut sum_d, mut sum_g) = (0.0, 0.0);
        let batches = epoch_batches(count, cfg.batch_size, &mut shuffle)?;
        for (b, idx) in batches.iter().enumerate() {
            let at = StepIndex { epoch, batch: b };
            let x = data.select_rows(idx)?;
            let y = conditioning.map(|c| c.measure(&x, &mut meas)).transpose()?;
            let z = latent.gaussian(&[idx.len(), cfg.latent_dim], 0.0, 1.0)?;
            sum_d += discriminator_step(
                &mut models.discriminator,
                &mut opt_d,
                &models.generator,
                &x,
                &z,
                y.as_ref(),
                cfg,
                &mut hacks,
                at,
            )?;
            sum_g += generator_step(
                &mut models.generator,
                &mut opt_g,
                &models.discriminator,
                &z,
                y.as_ref(),
                cfg,
                &mut hacks,
                at,
            )?;
        }
        let entry = EpochLog {
            epoch,
            loss_d: sum_d / batches.len() as f64,
            loss_g: sum_g / batches.len() as f64,
            beta: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&entry, &models)?;
        log.push(entry);
    }
    Ok((models, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::MeasurementOperator;

    fn toy_d(bias: f64) -> MlpNetwork {
        // Constant logit `bias`, independent of the input.
        MlpNetwork::from_params(
            &[2, 1],
            &[Activation::Sigmoid],
            0,
            vec![Tensor::zeros(&[1, 2])],
            vec![Tensor::vector(&[bias])],
        )
        .unwrap()
    }

    #[test]
    fn half_discriminator_costs_ln2() {
        let d = toy_d(0.0);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let v = discriminator_loss_value(&d, &x, &x, None, 1.0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_discriminator_loss_vanishes() {
        // Logit +30 on reals and -30 on fakes via a linear map on the first
        // coordinate.
        let d = MlpNetwork::from_params(
            &[2, 1],
            &[Activation::Sigmoid],
            0,
            vec![Tensor::new(&[1, 2], vec![30.0, 0.0]).unwrap()],
            vec![Tensor::vector(&[0.0])],
        )
        .unwrap();
        let real = Tensor::row(&[1.0, 0.0]);
        let fake = Tensor::row(&[-1.0, 0.0]);
        let v = discriminator_loss_value(&d, &real, &fake, None, 1.0).unwrap();
        assert!(v > 0.0 && v < 1e-12);
    }

    #[test]
    fn tape_and_plain_losses_agree() {
        let mut rng = Rng::new(2);
        let arch = GanArchitecture {
            generator_hidden: vec![5],
            discriminator_hidden: vec![4],
            ..GanArchitecture::default()
        };
        let g = arch.generator(3, 6, 2, &mut rng).unwrap();
        let d = arch.discriminator(6, 2, &mut rng).unwrap();
        let z = rng.gaussian(&[4, 3], 0.0, 1.0).unwrap();
        let y = rng.gaussian(&[4, 2], 0.0, 1.0).unwrap();
        let real = rng.gaussian(&[4, 6], 0.0, 1.0).unwrap();
        let fake = g.forward(&z, Some(&y)).unwrap();
        let mut tape = Tape::new();
        let dv = d.register(&mut tape, true);
        let r = tape.constant_ref(&real);
        let f = tape.constant_ref(&fake);
        let c = tape.constant_ref(&y);
        let out = discriminator_loss_tape(&mut tape, &d, &dv, r, f, Some(c), 0.9, None).unwrap();
        let expect = discriminator_loss_value(&d, &real, &fake, Some(&y), 0.9).unwrap();
        assert!((tape.value(out).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn steps_do_not_touch_the_other_network() {
        let mut rng = Rng::new(3);
        let arch = GanArchitecture {
            generator_hidden: vec![8],
            discriminator_hidden: vec![8],
            ..GanArchitecture::default()
        };
        let mut g = arch.generator(2, 5, 0, &mut rng).unwrap();
        let mut d = arch.discriminator(5, 0, &mut rng).unwrap();
        let mut og = AdamState::new(AdamConfig::default(), g.params());
        let mut od = AdamState::new(AdamConfig::default(), d.params());
        let cfg = GanTrainConfig::mnist_preset(false);
        let x = rng.gaussian(&[3, 5], 0.0, 1.0).unwrap();
        let z = rng.gaussian(&[3, 2], 0.0, 1.0).unwrap();
        let (gc, dc) = (g.checksum(), d.checksum());
        discriminator_step(&mut d, &mut od, &g, &x, &z, None, &cfg, &mut rng, StepIndex::default()).unwrap();
        assert_eq!(g.checksum(), gc);
        assert_ne!(d.checksum(), dc);
        let dc = d.checksum();
        generator_step(&mut g, &mut og, &d, &z, None, &cfg, &mut rng, StepIndex::default()).unwrap();
        assert_eq!(d.checksum(), dc);
        assert_ne!(g.checksum(), gc);
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let mut rng = Rng::new(4);
        let arch = GanArchitecture::default();
        let g = arch.generator(4, 12, 3, &mut rng).unwrap();
        let d = arch.discriminator(12, 3, &mut rng).unwrap();
        let z = rng.gaussian(&[6, 4], 0.0, 1.0).unwrap();
        let y = rng.gaussian(&[6, 3], 0.0, 1.0).unwrap();
        let x = rng.gaussian(&[6, 12], 0.0, 1.0).unwrap();
        let fake = g.forward(&z, Some(&y)).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let sel = |t: &Tensor| t.select_rows(&perm).unwrap();
        let a = discriminator_loss_value(&d, &x, &fake, Some(&y), 1.0).unwrap();
        let b = discriminator_loss_value(&d, &sel(&x), &sel(&fake), Some(&sel(&y)), 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        let a = generator_loss_value(&g, &d, &z, Some(&y)).unwrap();
        let b = generator_loss_value(&g, &d, &sel(&z), Some(&sel(&y))).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn training_is_seeded_and_logs_finite_losses() {
        let mut rng = Rng::new(5);
        let data = rng.gaussian(&[20, 6], 0.0, 0.5).unwrap();
        let a = MeasurementOperator::gaussian(3, 6, 6).unwrap();
        let cond = Conditioning::noiseless(a);
        let cfg = GanTrainConfig {
            epochs: 2,
            batch_size: 8,
            latent_dim: 3,
            ..GanTrainConfig::mnist_preset(true)
        };
        let arch = GanArchitecture {
            generator_hidden: vec![8],
            discriminator_hidden: vec![8],
            ..GanArchitecture::default()
        };
        let run = || train_gan(&data, &cfg, &arch, Some(&cond), 9, &mut |_, _| Ok(())).unwrap();
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1.generator.checksum(), m2.generator.checksum());
        assert_eq!(m1.discriminator.checksum(), m2.discriminator.checksum());
        assert_eq!(l1.len(), 2);
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.loss_d == b.loss_d && a.loss_g.is_finite()));
        assert_eq!(m1.generator.weight(0).shape(), &[8, 6]);
    }

    #[test]
    fn config_validation() {
        let bad = GanTrainConfig {
            label_smoothing: 1.0,
            ..GanTrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let data = Tensor::zeros(&[4, 3]);
        let cfg = GanTrainConfig {
            conditional: true,
            ..GanTrainConfig::default()
        };
        assert!(matches!(
            train_gan(&data, &cfg, &GanArchitecture::default(), None, 0, &mut |_, _| Ok(())),
            Err(TrainingError::Config(_))
        ));
    }
}
