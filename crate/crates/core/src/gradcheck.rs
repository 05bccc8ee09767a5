//! Finite-difference checks of the reverse-mode gradients of every training
//! loss, on randomly drawn architectures.

use crate::autodiff::Tape;
use crate::mlp::{Activation, MlpNetwork};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::began::{began_loss_tape, began_reconstruction_loss};
use crate::training::gan::{discriminator_loss_tape, discriminator_loss_value, generator_loss_tape, generator_loss_value};
use crate::training::pinv::{pinv_loss, pinv_loss_tape};
use crate::training::TrainingError;

pub const STEP: f64 = 1e-5;
/// Inputs are redrawn while any relu-type pre-activation is this close to 0.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 10_000;

type Result<T> = std::result::Result<T, TrainingError>;

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central differences of `f` in every coordinate of every tensor of `at`.
pub fn central_differences(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    at: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut point = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for t in 0..at.len() {
        let mut g = Tensor::zeros(at[t].shape());
        for i in 0..at[t].len() {
            let orig = point[t].data()[i];
            point[t].data_mut()[i] = orig + h;
            let plus = f(&point)?;
            point[t].data_mut()[i] = orig - h;
            let minus = f(&point)?;
            point[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&a, &n)| relative_error(a, n)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Discriminator,
    Generator,
    Reconstruction,
    PseudoInverse,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Discriminator,
        LossKind::Generator,
        LossKind::Reconstruction,
        LossKind::PseudoInverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Discriminator => "bce_d",
            LossKind::Generator => "nonsat_g",
            LossKind::Reconstruction => "began_lb",
            LossKind::PseudoInverse => "pinv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub loss: LossKind,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub redraws: usize,
    /// Layer widths of the network being differentiated.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

fn random_activation(rng: &mut Rng) -> Activation {
    match rng.below(5) {
        0 => Activation::Identity,
        1 => Activation::Relu,
        2 => Activation::LeakyRelu(0.01 + 0.49 * rng.uniform()),
        3 => Activation::Tanh,
        _ => Activation::Sigmoid,
    }
}

/// Random network with 1 to `max_depth` affine layers and hidden widths up
/// to `max_width`.
pub fn random_network(
    input: usize,
    output: usize,
    condition_dim: usize,
    max_depth: usize,
    max_width: usize,
    rng: &mut Rng,
) -> Result<MlpNetwork> {
    let depth = 1 + rng.below(max_depth);
    let mut dims = vec![input];
    for _ in 1..depth {
        dims.push(1 + rng.below(max_width));
    }
    dims.push(output);
    let acts: Vec<Activation> = (0..depth).map(|_| random_activation(rng)).collect();
    Ok(MlpNetwork::random(&dims, &acts, condition_dim, rng)?)
}

fn near_kink(net: &MlpNetwork, input: &Tensor, cond: Option<&Tensor>) -> Result<bool> {
    let pre = net.pre_activations(input, cond)?;
    Ok(net.activations().iter().zip(&pre).any(|(a, p)| {
        matches!(a, Activation::Relu | Activation::LeakyRelu(_)) && p.data().iter().any(|v| v.abs() < KINK_MARGIN)
    }))
}

fn cond_for(dim: usize, rows: usize, rng: &mut Rng) -> Result<Option<Tensor>> {
    Ok(if dim > 0 {
        Some(rng.gaussian(&[rows, dim], 0.0, 1.0)?)
    } else {
        None
    })
}

/// Central differences over every parameter of `net`, perturbed in place.
pub fn network_differences(
    net: &mut MlpNetwork,
    value: &mut dyn FnMut(&MlpNetwork) -> Result<f64>,
    h: f64,
) -> Result<Vec<Tensor>> {
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|t| t.shape().to_vec()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (t, shape) in shapes.iter().enumerate() {
        let mut g = Tensor::zeros(shape);
        for i in 0..g.len() {
            let orig = net.params()[t].data()[i];
            net.params_mut()[t].data_mut()[i] = orig + h;
            let plus = value(net)?;
            net.params_mut()[t].data_mut()[i] = orig - h;
            let minus = value(net)?;
            net.params_mut()[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

fn finish(
    loss: LossKind,
    net: &MlpNetwork,
    analytic: Vec<Tensor>,
    mut value: impl FnMut(&MlpNetwork) -> Result<f64>,
    redraws: usize,
) -> Result<GradCheck> {
    let mut probe = net.clone();
    let numeric = network_differences(&mut probe, &mut value, STEP)?;
    Ok(GradCheck {
        loss,
        max_rel_error: max_relative_error(&analytic, &numeric),
        coordinates: numeric.iter().map(Tensor::len).sum(),
        redraws,
        dims: net.layer_dims().to_vec(),
        activations: net.activations().to_vec(),
    })
}

fn no_kink_draw<T>(
    rng: &mut Rng,
    mut draw: impl FnMut(&mut Rng) -> Result<T>,
    mut kinked: impl FnMut(&T) -> Result<bool>,
) -> Result<(T, usize)> {
    for redraws in 0..MAX_REDRAWS {
        let sample = draw(rng)?;
        if !kinked(&sample)? {
            return Ok((sample, redraws));
        }
    }
    Err(TrainingError::Config("could not draw inputs away from activation kinks".into()))
}

/// Checks one loss on a random architecture derived from `seed`.
pub fn check_loss(loss: LossKind, seed: u64, max_depth: usize, max_width: usize, batch: usize) -> Result<GradCheck> {
    let mut rng = Rng::derive(seed, loss as u64);
    let n = 1 + rng.below(max_width);
    let k = 1 + rng.below(max_width);
    let cdim = rng.below(4);
    match loss {
        LossKind::Discriminator => {
            let d = random_network(n, 1, cdim, max_depth, max_width, &mut rng)?;
            let target = 0.7 + 0.3 * rng.uniform();
            let ((real, fake, cond), redraws) = no_kink_draw(
                &mut rng,
                |r| Ok((r.gaussian(&[batch, n], 0.0, 1.0)?, r.gaussian(&[batch, n], 0.0, 1.0)?, cond_for(cdim, batch, r)?)),
                |(a, b, c)| Ok(near_kink(&d, a, c.as_ref())? || near_kink(&d, b, c.as_ref())?),
            )?;
            let analytic = {
                let mut tape = Tape::new();
                let vars = d.register(&mut tape, true);
                let rv = tape.constant_ref(&real);
                let fv = tape.constant_ref(&fake);
                let cv = cond.as_ref().map(|c| tape.constant_ref(c));
                let out = discriminator_loss_tape(&mut tape, &d, &vars, rv, fv, cv, target, None)?;
                let g = tape.backward(out)?;
                vars.ordered().into_iter().map(|v| g.get_or_zeros(v, tape.value(v))).collect()
            };
            finish(loss, &d, analytic, |net| discriminator_loss_value(net, &real, &fake, cond.as_ref(), target), redraws)
        }
        LossKind::Generator => {
            let g = random_network(k, n, cdim, max_depth, max_width, &mut rng)?;
            let d = random_network(n, 1, cdim, max_depth, max_width, &mut rng)?;
            let ((z, cond), redraws) = no_kink_draw(
                &mut rng,
                |r| Ok((r.gaussian(&[batch, k], 0.0, 1.0)?, cond_for(cdim, batch, r)?)),
                |(z, c)| {
                    let fake = g.forward(z, c.as_ref())?;
                    Ok(near_kink(&g, z, c.as_ref())? || near_kink(&d, &fake, c.as_ref())?)
                },
            )?;
            let analytic = {
                let mut tape = Tape::new();
                let gv = g.register(&mut tape, true);
                let dv = d.register(&mut tape, false);
                let zv = tape.constant_ref(&z);
                let cv = cond.as_ref().map(|c| tape.constant_ref(c));
                let fake = g.forward_tape(&mut tape, &gv, zv, cv, Default::default())?;
                let out = generator_loss_tape(&mut tape, &d, &dv, fake, cv, None)?;
                let grads = tape.backward(out)?;
                gv.ordered().into_iter().map(|v| grads.get_or_zeros(v, tape.value(v))).collect()
            };
            finish(loss, &g, analytic, |net| generator_loss_value(net, &d, &z, cond.as_ref()), redraws)
        }
        LossKind::Reconstruction => {
            let d = random_network(n, n, cdim, max_depth, max_width, &mut rng)?;
            let ((x, cond), redraws) = no_kink_draw(
                &mut rng,
                |r| Ok((r.gaussian(&[batch, n], 0.0, 1.0)?, cond_for(cdim, batch, r)?)),
                |(x, c)| near_kink(&d, x, c.as_ref()),
            )?;
            let analytic = {
                let mut tape = Tape::new();
                let vars = d.register(&mut tape, true);
                let xv = tape.constant_ref(&x);
                let cv = cond.as_ref().map(|c| tape.constant_ref(c));
                let out = began_loss_tape(&mut tape, &d, &vars, xv, cv)?;
                let g = tape.backward(out)?;
                vars.ordered().into_iter().map(|v| g.get_or_zeros(v, tape.value(v))).collect()
            };
            finish(loss, &d, analytic, |net| began_reconstruction_loss(net, &x, cond.as_ref()), redraws)
        }
        LossKind::PseudoInverse => {
            let g = random_network(k, n, cdim, max_depth, max_width, &mut rng)?;
            let p = random_network(n, k, 0, max_depth, max_width, &mut rng)?;
            let lambda = rng.uniform();
            let ((z, nu, cond), redraws) = no_kink_draw(
                &mut rng,
                |r| Ok((r.gaussian(&[batch, k], 0.0, 1.0)?, r.gaussian(&[batch, n], 0.0, 1.0)?, cond_for(cdim, batch, r)?)),
                |(z, nu, c)| {
                    let x = g.forward(z, c.as_ref())?;
                    let noisy = x.add(nu)?;
                    let code = p.forward(&noisy, None)?;
                    Ok(near_kink(&g, z, c.as_ref())? || near_kink(&p, &noisy, None)? || near_kink(&g, &code, c.as_ref())?)
                },
            )?;
            let analytic = {
                let mut tape = Tape::new();
                let gv = g.register(&mut tape, false);
                let pv = p.register(&mut tape, true);
                let zv = tape.constant_ref(&z);
                let nv = tape.constant_ref(&nu);
                let cv = cond.as_ref().map(|c| tape.constant_ref(c));
                let out = pinv_loss_tape(&mut tape, &g, &gv, &p, &pv, zv, cv, nv, lambda)?;
                let grads = tape.backward(out)?;
                pv.ordered().into_iter().map(|v| grads.get_or_zeros(v, tape.value(v))).collect()
            };
            finish(loss, &p, analytic, |net| pinv_loss(&g, net, &z, cond.as_ref(), &nu, lambda), redraws)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_the_scale_at_one() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9);
        assert_eq!(relative_error(200.0, 100.0), 0.5);
    }

    #[test]
    fn central_differences_of_a_cubic() {
        let x = Tensor::row(&[2.0, -1.0]);
        let g = central_differences(&mut |p| Ok(p[0].data().iter().map(|v| v * v * v).sum()), &[x], 1e-4).unwrap();
        assert!((g[0].data()[0] - 12.0).abs() < 1e-7);
        assert!((g[0].data()[1] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn each_loss_passes_on_a_small_case() {
        for loss in LossKind::ALL {
            let r = check_loss(loss, 3, 3, 8, 2).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }
}
