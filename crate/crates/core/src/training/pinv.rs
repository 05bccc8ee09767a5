//! Pseudo-inverse network `G+` for a frozen generator.
//!
//! Loss per sample, with `x = G(z|y)` and `x~ = x + nu`:
//!
//! ```text
//! |G(G+(x~) | y) - x|^2 + lambda |G+(x~) - z|^2
//! ```
//!
//! `nu` is drawn in image space. `G+` is unconditional unless the config
//! asks otherwise.

use web_time::Instant;

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{Tape, Var};
use crate::mlp::{Activation, ForwardOptions, MlpNetwork, NetVars};
use crate::rng::Rng;
use crate::sensing::NoiseSpec;
use crate::tensor::Tensor;

use super::gan::StepIndex;
use super::{check_finite, Conditioning, Result, TrainingError};

#[derive(Debug, Clone, PartialEq)]
pub struct PinvTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_latent: f64,
    /// Variance of the measurement noise when sampling `y = A x + e`.
    pub sigma2_meas: f64,
    /// Variance of the image-space perturbation `nu`.
    pub sigma2_img: f64,
    pub conditional_pinv: bool,
    pub adam: AdamConfig,
    /// Samples per epoch when no dataset drives the epoch length.
    pub samples_per_epoch: usize,
}

impl Default for PinvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lambda_latent: 0.1,
            sigma2_meas: 0.0,
            sigma2_img: 1.0,
            conditional_pinv: false,
            adam: AdamConfig::default(),
            samples_per_epoch: 10_000,
        }
    }
}

impl PinvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainingError::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_latent >= 0.0 && self.sigma2_meas >= 0.0 && self.sigma2_img >= 0.0) {
            return Err(TrainingError::Config("lambda and variances must be non-negative".into()));
        }
        Ok(())
    }
}

/// `n-256-256-k` style network: leaky hidden layers and a linear output.
pub fn pinv_network(n: usize, hidden: &[usize], k: usize, condition_dim: usize, rng: &mut Rng) -> Result<MlpNetwork> {
    let mut dims = vec![n];
    dims.extend_from_slice(hidden);
    dims.push(k);
    let mut acts = vec![Activation::leaky(); hidden.len()];
    acts.push(Activation::Identity);
    Ok(MlpNetwork::random(&dims, &acts, condition_dim, rng)?)
}

/// Loss on a tape; `g` and `pinv` must be registered on it already.
/// The condition feeds `G+` only when it is conditional.
#[allow(clippy::too_many_arguments)]
pub fn pinv_loss_tape(
    tape: &mut Tape<'_>,
    g: &MlpNetwork,
    gv: &NetVars,
    pinv: &MlpNetwork,
    pv: &NetVars,
    z: Var,
    cond: Option<Var>,
    nu: Var,
    lambda: f64,
) -> Result<Var> {
    let target = g.forward_tape(tape, gv, z, cond, ForwardOptions::default())?;
    let noisy = tape.add(target, nu)?;
    let pc = if pinv.condition_dim() > 0 { cond } else { None };
    let code = pinv.forward_tape(tape, pv, noisy, pc, ForwardOptions::default())?;
    let back = g.forward_tape(tape, gv, code, cond, ForwardOptions::default())?;
    let img = tape.sub(back, target)?;
    let img_sq = tape.square(img);
    let img_sum = tape.sum(img_sq);
    let lat = tape.sub(code, z)?;
    let lat_sq = tape.square(lat);
    let lat_sum = tape.sum(lat_sq);
    let lat_w = tape.scale(lat_sum, lambda);
    let total = tape.add(img_sum, lat_w)?;
    let rows = tape.value(z).rows().max(1);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// The same loss by plain forward passes.
pub fn pinv_loss(
    g: &MlpNetwork,
    pinv: &MlpNetwork,
    z: &Tensor,
    cond: Option<&Tensor>,
    nu: &Tensor,
    lambda: f64,
) -> Result<f64> {
    let x = g.forward(z, cond)?;
    let noisy = x.add(nu)?;
    let pc = if pinv.condition_dim() > 0 { cond } else { None };
    let code = pinv.forward(&noisy, pc)?;
    if code.shape() != z.shape() {
        return Err(TrainingError::Config(format!(
            "pseudo-inverse output {:?} does not match latent {:?}",
            code.shape(),
            z.shape()
        )));
    }
    let back = g.forward(&code, cond)?;
    let img = back.sub(&x)?.norm_sq();
    let lat = code.sub(z)?.norm_sq();
    Ok((img + lambda * lat) / z.rows().max(1) as f64)
}

/// One Adam step of `pinv`; `g` is read only.
#[allow(clippy::too_many_arguments)]
pub fn pinv_step(
    pinv: &mut MlpNetwork,
    opt: &mut AdamState,
    g: &MlpNetwork,
    z: &Tensor,
    cond: Option<&Tensor>,
    nu: &Tensor,
    lambda: f64,
    at: StepIndex,
    trace: &[f64],
) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let gv = g.register(&mut tape, false);
        let pv = pinv.register(&mut tape, true);
        let zv = tape.constant_ref(z);
        let c = cond.map(|c| tape.constant_ref(c));
        let nv = tape.constant_ref(nu);
        let out = pinv_loss_tape(&mut tape, g, &gv, pinv, &pv, zv, c, nv, lambda)?;
        let loss = tape.value(out).data()[0];
        check_finite("pinv", at.epoch, at.batch, &[("loss", loss)], trace)?;
        let grads = tape.backward(out)?;
        let gr: Vec<Tensor> = pv.ordered().into_iter().map(|v| grads.get_or_zeros(v, tape.value(v))).collect();
        (loss, gr)
    };
    opt.step(&mut pinv.params_mut(), &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinvEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

pub fn pinv_log_csv(rows: &[PinvEpochLog], with_timing: bool) -> String {
    let mut out = String::from("epoch,loss,wall_ms\n");
    for r in rows {
        let t = if with_timing { format!("{:.3}", r.wall_ms) } else { String::new() };
        out.push_str(&format!("{},{:e},{t}\n", r.epoch, r.loss));
    }
    out
}

mod streams {
    pub const SHUFFLE: u64 = 11;
    pub const LATENT: u64 = 12;
    pub const MEASUREMENT: u64 = 13;
    pub const PERTURB: u64 = 14;
}

/// Fits `pinv` (updated in place from its current parameters) against
/// the frozen `g`. A conditional generator needs `data` and
/// `conditioning` to sample `y = A x + e`, `e ~ N(0, sigma2_meas I)`.
pub fn train_pinv(
    g: &MlpNetwork,
    mut pinv: MlpNetwork,
    data: Option<&Tensor>,
    conditioning: Option<&Conditioning>,
    cfg: &PinvTrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&PinvEpochLog, &MlpNetwork) -> Result<()>,
) -> Result<(MlpNetwork, Vec<PinvEpochLog>)> {
    cfg.validate()?;
    let k = g.input_dim();
    let n = g.output_dim();
    if pinv.input_dim() != n || pinv.output_dim() != k {
        return Err(TrainingError::Config(format!(
            "pseudo-inverse {} -> {} does not invert generator {k} -> {n}",
            pinv.input_dim(),
            pinv.output_dim()
        )));
    }
    let needs_y = g.condition_dim() > 0 || pinv.condition_dim() > 0;
    if pinv.condition_dim() > 0 && !cfg.conditional_pinv {
        return Err(TrainingError::Config("conditional pseudo-inverse given but conditional_pinv is off".into()));
    }
    let source = match (needs_y, data, conditioning) {
        (true, Some(d), Some(c)) => Some((d, c)),
        (true, _, _) => {
            return Err(TrainingError::Config(
                "conditional models need training images and a measurement operator".into(),
            ))
        }
        (false, _, _) => None,
    };
    let count = source.map_or(cfg.samples_per_epoch, |(d, _)| d.rows());
    if count == 0 {
        return Err(TrainingError::Config("empty epoch".into()));
    }
    let noisy_cond = source.map(|(_, c)| Conditioning {
        operator: c.operator.clone(),
        noise: NoiseSpec::sigma(cfg.sigma2_meas.sqrt(), 0),
    });
    let mut opt = AdamState::new(cfg.adam, pinv.params());
    let mut shuffle = Rng::derive(seed, streams::SHUFFLE);
    let mut latent = Rng::derive(seed, streams::LATENT);
    let mut meas = Rng::derive(seed, streams::MEASUREMENT);
    let mut perturb = Rng::derive(seed, streams::PERTURB);
    let nu_std = cfg.sigma2_img.sqrt();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut trace = Vec::new();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = shuffle.permutation(count);
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let y = match (source, noisy_cond.as_ref()) {
                (Some((d, _)), Some(c)) => Some(c.measure(&d.select_rows(idx)?, &mut meas)?),
                _ => None,
            };
            let z = latent.gaussian(&[idx.len(), k], 0.0, 1.0)?;
            let nu = perturb.gaussian(&[idx.len(), n], 0.0, nu_std)?;
            let loss = pinv_step(
                &mut pinv,
                &mut opt,
                g,
                &z,
                y.as_ref(),
                &nu,
                cfg.lambda_latent,
                StepIndex { epoch, batch: b },
                &trace,
            )?;
            trace.push(loss);
            sum += loss;
            batches += 1;
        }
        let entry = PinvEpochLog {
            epoch,
            loss: sum / batches as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&entry, &pinv)?;
        log.push(entry);
    }
    Ok((pinv, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_manifold;

    #[test]
    fn exact_inverse_has_zero_loss() {
        let mut rng = Rng::new(1);
        let m = make_synthetic_manifold(16, 4, &mut rng).unwrap();
        let z = rng.gaussian(&[5, 4], 0.0, 1.0).unwrap();
        let nu = Tensor::zeros(&[5, 16]);
        let l = pinv_loss(&m.generator_network(), &m.pinv_network(), &z, None, &nu, 0.1).unwrap();
        assert!(l < 1e-24);
    }

    #[test]
    fn zero_lambda_keeps_only_the_image_term() {
        let mut rng = Rng::new(2);
        let m = make_synthetic_manifold(10, 3, &mut rng).unwrap();
        let g = m.generator_network();
        let p = pinv_network(10, &[6], 3, 0, &mut rng).unwrap();
        let z = rng.gaussian(&[4, 3], 0.0, 1.0).unwrap();
        let nu = rng.gaussian(&[4, 10], 0.0, 0.3).unwrap();
        let x = g.forward(&z, None).unwrap();
        let back = g.forward(&p.forward(&x.add(&nu).unwrap(), None).unwrap(), None).unwrap();
        let img = back.sub(&x).unwrap().norm_sq() / 4.0;
        assert!((pinv_loss(&g, &p, &z, None, &nu, 0.0).unwrap() - img).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_plain_loss() {
        let mut rng = Rng::new(3);
        let g = MlpNetwork::random(&[3, 7, 9], &[Activation::Relu, Activation::Tanh], 2, &mut rng).unwrap();
        let p = pinv_network(9, &[5], 3, 0, &mut rng).unwrap();
        let z = rng.gaussian(&[4, 3], 0.0, 1.0).unwrap();
        let y = rng.gaussian(&[4, 2], 0.0, 1.0).unwrap();
        let nu = rng.gaussian(&[4, 9], 0.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let gv = g.register(&mut tape, false);
        let pv = p.register(&mut tape, true);
        let zv = tape.constant_ref(&z);
        let yv = tape.constant_ref(&y);
        let nv = tape.constant_ref(&nu);
        let out = pinv_loss_tape(&mut tape, &g, &gv, &p, &pv, zv, Some(yv), nv, 0.1).unwrap();
        let plain = pinv_loss(&g, &p, &z, Some(&y), &nu, 0.1).unwrap();
        assert!((tape.value(out).data()[0] - plain).abs() < 1e-12 * plain.max(1.0));
    }

    #[test]
    fn linear_pinv_learns_the_closed_form() {
        let mut rng = Rng::new(4);
        let m = make_synthetic_manifold(16, 4, &mut rng).unwrap();
        let g = m.generator_network();
        let init = pinv_network(16, &[], 4, 0, &mut rng).unwrap();
        let cfg = PinvTrainConfig {
            epochs: 200,
            batch_size: 32,
            sigma2_img: 0.0,
            adam: AdamConfig::with_lr(0.01),
            samples_per_epoch: 128,
            ..PinvTrainConfig::default()
        };
        let gc = g.checksum();
        let run = || train_pinv(&g, init.clone(), None, None, &cfg, 5, &mut |_, _| Ok(())).unwrap();
        let (p, log) = run();
        assert!(log.last().unwrap().loss < 1e-3, "{:?}", log.last());
        assert_eq!(g.checksum(), gc);
        assert_eq!(run().0.checksum(), p.checksum());
    }
}
