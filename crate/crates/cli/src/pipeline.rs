//! Experiment stages. Every stage reads and writes inside the output
//! directory and records what it wrote in the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gpcs_core::data::{load_idx_images, make_synthetic_manifold, normalize_images, Split, SyntheticManifold};
use gpcs_core::metrics::{
    all_pairs, check_linear_convergence, estimate_projector_delta, estimate_rec, estimate_s_rec, mean_mssim, mse,
    residual_error, SsimConfig,
};
use gpcs_core::mlp::MlpNetwork;
use gpcs_core::sensing::{measure, noise_for_snr, MeasurementOperator};
use gpcs_core::solvers::{solve_parallel, Projector, SolverConfig, SolverTrace};
use gpcs_core::training::began::train_began;
use gpcs_core::training::gan::train_gan;
use gpcs_core::training::pinv::{pinv_log_csv, pinv_network, train_pinv};
use gpcs_core::training::{epoch_log_csv, Conditioning};
use gpcs_core::weights::{deserialize_weights, serialize_weights, NetworkKind};
use gpcs_core::{Rng, Tensor};
use serde_json::json;

use crate::config::{ExperimentConfig, ModelKind, Snr, Step};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::pgm::tensor_grid;
use crate::results::{write_results_csv, ResultRow};

pub const GENERATOR: &str = "generator.gpcs";
pub const DISCRIMINATOR: &str = "discriminator.gpcs";
pub const AUTOENCODER: &str = "autoencoder.gpcs";
pub const PINV: &str = "pinv.gpcs";
pub const RESULTS: &str = "results.csv";
pub const TIMING: &str = "recon/timing.csv";

mod streams {
    pub const SYNTHETIC: u64 = 101;
    pub const CERTIFY: u64 = 102;
    pub const PINV_INIT: u64 = 103;
    pub const PINV_TRAIN: u64 = 104;
    pub const NOISE: u64 = 1000;
}

/// Loaded configuration plus the manifest being accumulated.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub manifest: RunManifest,
}

/// Test images with their side lengths.
pub struct Images {
    pub x: Tensor,
    pub rows: usize,
    pub cols: usize,
}

fn side_lengths(n: usize) -> (usize, usize) {
    let s = (n as f64).sqrt().round() as usize;
    if s * s == n {
        (s, s)
    } else {
        (1, n)
    }
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
        let manifest = RunManifest::load_or_default(&cfg.out)?;
        Ok(Self { cfg, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn finish_stage(&mut self, stage: &str, start: Instant) -> Result<()> {
        let text = self.cfg.to_text();
        let dir = self.cfg.out.clone();
        self.manifest.write(&dir, "config.txt", text.as_bytes())?;
        self.manifest.stages.push((stage.to_string(), start.elapsed().as_secs_f64() * 1e3));
        self.manifest.save(&dir, &self.cfg)
    }

    fn emit(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let dir = self.cfg.out.clone();
        self.manifest.write(&dir, rel, bytes)
    }

    fn save_net(&mut self, rel: &str, net: &MlpNetwork, kind: NetworkKind) -> Result<()> {
        let bytes = serialize_weights(net, kind).map_err(|source| CliError::Weights {
            path: self.path(rel),
            source,
        })?;
        self.emit(rel, &bytes)
    }

    /// Reads a weights file written by an earlier stage.
    pub fn load_net(&self, rel: &str, needed_by: &str) -> Result<MlpNetwork> {
        let path = self.path(rel);
        let bytes = std::fs::read(&path).map_err(|_| {
            CliError::Dependency(format!("{} not found; {needed_by} needs it (run the training stage first)", path.display()))
        })?;
        let (net, _) = deserialize_weights(&bytes).map_err(|source| CliError::Weights { path, source })?;
        Ok(net)
    }

    fn manifold(&self) -> Result<SyntheticManifold> {
        let mut rng = Rng::derive(self.cfg.seed, streams::SYNTHETIC);
        make_synthetic_manifold(self.cfg.synthetic_n, self.cfg.synthetic_k, &mut rng).map_err(CliError::Data)
    }

    pub fn train_images(&self) -> Result<Tensor> {
        if self.cfg.model == ModelKind::Synthetic {
            let mut rng = Rng::derive(self.cfg.seed, streams::SYNTHETIC + 10);
            return Ok(self.manifold()?.sample(self.cfg.train_count, &mut rng)?.1);
        }
        let raw = load_idx_images(&self.cfg.train_images, Split::Train)?;
        let count = self.cfg.train_count.min(raw.len());
        Ok(normalize_images(&raw.take(count)?)?.images)
    }

    pub fn test_images(&self) -> Result<Images> {
        let c = &self.cfg;
        if c.model == ModelKind::Synthetic {
            let mut rng = Rng::derive(c.seed, streams::SYNTHETIC + 20);
            let (rows, cols) = side_lengths(c.synthetic_n);
            return Ok(Images {
                x: self.manifold()?.sample(c.test_count, &mut rng)?.1,
                rows,
                cols,
            });
        }
        let raw = load_idx_images(&c.test_images, Split::Test)?;
        if c.test_offset + c.test_count > raw.len() {
            return Err(CliError::Config(format!(
                "test images {}..{} requested, file has {}",
                c.test_offset,
                c.test_offset + c.test_count,
                raw.len()
            )));
        }
        let norm = normalize_images(&raw)?;
        let idx: Vec<usize> = (c.test_offset..c.test_offset + c.test_count).collect();
        Ok(Images {
            x: norm.images.select_rows(&idx).map_err(gpcs_core::data::DataError::from)?,
            rows: raw.rows,
            cols: raw.cols,
        })
    }

    pub fn operator(&self, n: usize) -> Result<MeasurementOperator> {
        Ok(MeasurementOperator::gaussian(self.cfg.m_for(n)?, n, self.cfg.sensing_seed)?)
    }

    fn conditioning(&self, n: usize) -> Result<Option<Conditioning>> {
        Ok(if self.cfg.model.conditional() {
            Some(Conditioning::noiseless(self.operator(n)?))
        } else {
            None
        })
    }

    pub fn train_gan(&mut self) -> Result<()> {
        let start = Instant::now();
        if !matches!(self.cfg.model, ModelKind::Gan | ModelKind::Cgan) {
            return Err(CliError::Usage(format!("train-gan needs model.kind gan or cgan, not {}", self.cfg.model.name())));
        }
        let data = self.train_images()?;
        let cond = self.conditioning(data.cols())?;
        let every = self.cfg.checkpoint_every;
        let mut checkpoints = Vec::new();
        let (models, log) = train_gan(&data, &self.cfg.gan, &self.cfg.arch, cond.as_ref(), self.cfg.seed, &mut |e, m| {
            eprintln!("epoch {:>4}  L_D {:.5}  L_G {:.5}", e.epoch, e.loss_d, e.loss_g);
            if every > 0 && e.epoch % every == 0 {
                checkpoints.push((e.epoch, m.generator.clone()));
            }
            Ok(())
        })?;
        for (epoch, g) in checkpoints {
            self.save_net(&format!("checkpoints/generator-{epoch:04}.gpcs"), &g, NetworkKind::Generator)?;
        }
        self.save_net(GENERATOR, &models.generator, NetworkKind::Generator)?;
        self.save_net(DISCRIMINATOR, &models.discriminator, NetworkKind::Discriminator)?;
        self.emit("train_log.csv", epoch_log_csv(&log, self.cfg.timing).as_bytes())?;
        self.finish_stage("train-gan", start)
    }

    pub fn train_began(&mut self) -> Result<()> {
        let start = Instant::now();
        if self.cfg.model != ModelKind::BeganC {
            return Err(CliError::Usage(format!("train-began needs model.kind began-c, not {}", self.cfg.model.name())));
        }
        let data = self.train_images()?;
        let cond = self.conditioning(data.cols())?;
        let every = self.cfg.checkpoint_every;
        let mut checkpoints = Vec::new();
        let out = train_began(&data, &self.cfg.began, &self.cfg.arch, cond.as_ref(), self.cfg.seed, &mut |e, g, _| {
            eprintln!(
                "epoch {:>4}  L_D {:.5}  L_G {:.5}  beta {:.5}",
                e.epoch,
                e.loss_d,
                e.loss_g,
                e.beta.unwrap_or(f64::NAN)
            );
            if every > 0 && e.epoch % every == 0 {
                checkpoints.push((e.epoch, g.clone()));
            }
            Ok(())
        })?;
        for (epoch, g) in checkpoints {
            self.save_net(&format!("checkpoints/generator-{epoch:04}.gpcs"), &g, NetworkKind::Generator)?;
        }
        self.save_net(GENERATOR, &out.generator, NetworkKind::Generator)?;
        self.save_net(AUTOENCODER, &out.autoencoder, NetworkKind::Discriminator)?;
        self.emit("train_log.csv", epoch_log_csv(&out.epochs, self.cfg.timing).as_bytes())?;
        let mut steps = String::from("step,L_D,L_G,L_B_real,L_B_fake,beta,ratio\n");
        for (i, s) in out.steps.iter().enumerate() {
            steps.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                i + 1,
                s.loss_d,
                s.loss_g,
                s.lb_real,
                s.lb_fake,
                s.beta,
                s.ratio
            ));
        }
        self.emit("began_steps.csv", steps.as_bytes())?;
        self.finish_stage("train-began", start)
    }

    pub fn train_pinv(&mut self) -> Result<()> {
        let start = Instant::now();
        let g = self.load_net(GENERATOR, "train-pinv")?;
        let n = g.output_dim();
        let needs_data = g.condition_dim() > 0 || self.cfg.pinv.conditional_pinv;
        let data = if needs_data { Some(self.train_images()?) } else { None };
        let cond = if needs_data {
            Some(Conditioning::noiseless(self.operator(n)?))
        } else {
            None
        };
        let pdim = if self.cfg.pinv.conditional_pinv { g.condition_dim() } else { 0 };
        let init = pinv_network(
            n,
            &self.cfg.arch.discriminator_hidden,
            g.input_dim(),
            pdim,
            &mut Rng::derive(self.cfg.seed, streams::PINV_INIT),
        )?;
        let seed = gpcs_core::rng::child_seed(self.cfg.seed, streams::PINV_TRAIN);
        let (p, log) = train_pinv(&g, init, data.as_ref(), cond.as_ref(), &self.cfg.pinv, seed, &mut |e, _| {
            eprintln!("epoch {:>4}  loss {:.5}", e.epoch, e.loss);
            Ok(())
        })?;
        self.save_net(PINV, &p, NetworkKind::PseudoInverse)?;
        self.emit("pinv_log.csv", pinv_log_csv(&log, self.cfg.timing).as_bytes())?;
        self.finish_stage("train-pinv", start)
    }

    /// Measurements of the test batch for one SNR setting. Noise draws
    /// depend only on the seed and the sweep position.
    pub fn measurements(&self, a: &MeasurementOperator, x: &Tensor, snr_index: usize, snr: Snr) -> Result<Tensor> {
        let mut rng = Rng::derive(self.cfg.seed, streams::NOISE + snr_index as u64);
        let e = noise_for_snr(a, x, snr.db(), &mut rng)?;
        Ok(measure(a, x, &e)?)
    }

    fn range_pairs(&self, g: &MlpNetwork, cond: Option<&Tensor>, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let k = g.input_dim();
        match cond {
            // Pairs within the range of each G(.|y_i).
            Some(y) => {
                let c = y.rows();
                let x1 = g.forward(&rng.gaussian(&[c, k], 0.0, 1.0).map_err(data_err)?, Some(y)).map_err(mlp_err)?;
                let x2 = g.forward(&rng.gaussian(&[c, k], 0.0, 1.0).map_err(data_err)?, Some(y)).map_err(mlp_err)?;
                Ok((x1, x2))
            }
            None => {
                let s = self.cfg.certify_samples.max(2);
                let pts = g.forward(&rng.gaussian(&[s, k], 0.0, 1.0).map_err(data_err)?, None).map_err(mlp_err)?;
                Ok(all_pairs(&pts)?)
            }
        }
    }

    fn solver_config(&self, g: &MlpNetwork, a: &MeasurementOperator, cond: Option<&Tensor>) -> Result<SolverConfig> {
        let cfg = self.cfg.solver_cfg;
        match self.cfg.step {
            Step::Fixed(_) => Ok(cfg),
            Step::Auto => {
                let mut rng = Rng::derive(self.cfg.seed, streams::CERTIFY);
                let (x1, x2) = self.range_pairs(g, cond, &mut rng)?;
                let rec = estimate_rec(a, &x1, &x2, self.cfg.seed)?;
                Ok(cfg.with_auto_step(rec.beta)?)
            }
        }
    }

    fn solver_names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.cfg.solver.runs_pgd() {
            v.push("pgd");
        }
        if self.cfg.solver.runs_npgd() {
            v.push("npgd");
        }
        v
    }

    pub fn reconstruct(&mut self) -> Result<()> {
        let start = Instant::now();
        let g = self.load_net(GENERATOR, "reconstruct")?;
        let pinv = if self.cfg.solver.runs_npgd() {
            Some(self.load_net(PINV, "npgd")?)
        } else {
            None
        };
        let test = self.test_images()?;
        if test.x.cols() != g.output_dim() {
            return Err(CliError::Config(format!(
                "generator outputs {} values, test images have {}",
                g.output_dim(),
                test.x.cols()
            )));
        }
        let a = self.operator(test.x.cols())?;
        let truth_grid = tensor_grid(&test.x, test.rows, test.cols, self.cfg.grid_cols)?;
        self.emit("recon/truth.pgm", &truth_grid)?;
        let mut timing = String::from("solver,snr,total_wall_ms,images\n");
        let snrs = self.cfg.snrs.clone();
        for (j, &snr) in snrs.iter().enumerate() {
            let y = self.measurements(&a, &test.x, j, snr)?;
            let cond = (g.condition_dim() > 0).then_some(&y);
            let scfg = self.solver_config(&g, &a, cond)?;
            for solver in self.solver_names() {
                let projector = match (solver, pinv.as_ref()) {
                    ("npgd", Some(p)) => Projector::Network { g: &g, pinv: p },
                    _ => Projector::Latent { g: &g },
                };
                let trace = solve_parallel(&projector, &a, &y, Some(&test.x), &scfg, self.cfg.jobs)?;
                let stem = format!("recon/{solver}_{}", snr.label());
                self.emit(&format!("{stem}.f64"), &tensor_bytes(&trace.x_hat))?;
                self.emit(&format!("{stem}.pgm"), &tensor_grid(&trace.x_hat, test.rows, test.cols, self.cfg.grid_cols)?)?;
                self.emit(&format!("{stem}_trace.csv"), trace_csv(&trace, self.cfg.timing).as_bytes())?;
                timing.push_str(&format!("{solver},{},{},{}\n", snr.label(), trace.total_wall_ms(), test.x.rows()));
                eprintln!(
                    "{solver:>4} {:>10}: f(x_N) {:.4e}  {:.2} ms/image",
                    snr.label(),
                    trace.mean_f().last().copied().unwrap_or(f64::NAN),
                    trace.total_wall_ms() / test.x.rows() as f64
                );
            }
        }
        self.emit(TIMING, timing.as_bytes())?;
        self.finish_stage("reconstruct", start)?;
        self.evaluate().map(|_| ())
    }

    /// Metric rows from saved reconstructions; writes `results.csv`.
    pub fn evaluate(&mut self) -> Result<Vec<ResultRow>> {
        let start = Instant::now();
        let timing_path = self.path(TIMING);
        let timing_text = std::fs::read_to_string(&timing_path)
            .map_err(|_| CliError::Dependency(format!("{} not found; run reconstruct first", timing_path.display())))?;
        let test = self.test_images()?;
        let n = test.x.cols();
        let a = self.operator(n)?;
        let ssim_cfg = SsimConfig {
            window: 7.min(test.rows).min(test.cols),
            ..SsimConfig::default()
        };
        let mut rows = Vec::new();
        let mut wall = std::collections::BTreeMap::new();
        for line in timing_text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if let [solver, snr, total, count] = f[..] {
                let total: f64 = total.parse().map_err(|_| CliError::Invalid(format!("bad timing line {line:?}")))?;
                let count: f64 = count.parse().map_err(|_| CliError::Invalid(format!("bad timing line {line:?}")))?;
                wall.insert((solver.to_string(), snr.to_string()), total / count);
            }
        }
        for (j, &snr) in self.cfg.snrs.iter().enumerate() {
            let y = self.measurements(&a, &test.x, j, snr)?;
            for solver in self.solver_names() {
                let stem = format!("recon/{solver}_{}", snr.label());
                let path = self.path(&format!("{stem}.f64"));
                let bytes = std::fs::read(&path)
                    .map_err(|_| CliError::Dependency(format!("{} not found; run reconstruct first", path.display())))?;
                let x_hat = tensor_from_bytes(&bytes)?;
                rows.push(ResultRow {
                    model: self.cfg.model.name().into(),
                    solver: solver.into(),
                    m: a.m(),
                    ratio: a.m() as f64 / n as f64,
                    snr_db: snr.db(),
                    mse: mse(&x_hat, &test.x)?,
                    residual: residual_error(&a, &x_hat, &y)?,
                    mssim: mean_mssim(&x_hat, &test.x, test.rows, test.cols, &ssim_cfg)?,
                    mean_wall_ms_per_image: if self.cfg.timing {
                        wall.get(&(solver.to_string(), snr.label())).copied()
                    } else {
                        None
                    },
                    seed: self.cfg.seed,
                });
            }
        }
        let bytes = write_results_csv(&self.path(RESULTS), &rows)?;
        self.emit(RESULTS, &bytes)?;
        if let Some(s) = speedup(&rows) {
            eprintln!("speed-up (PGD / NPGD mean wall ms per image): {s:.1}x");
            self.manifest.notes.insert("speedup_pgd_over_npgd".into(), json!(s));
        }
        self.finish_stage("evaluate", start)?;
        Ok(rows)
    }

    /// REC / S-REC on pairs from the generator range and, with a
    /// pseudo-inverse, the projector slack and the linear-rate check.
    pub fn certify(&mut self) -> Result<serde_json::Value> {
        let start = Instant::now();
        let g = self.load_net(GENERATOR, "certify")?;
        let test = self.test_images()?;
        let a = self.operator(test.x.cols())?;
        let y = self.measurements(&a, &test.x, 0, Snr::Noiseless)?;
        let cond = (g.condition_dim() > 0).then_some(&y);
        let mut rng = Rng::derive(self.cfg.seed, streams::CERTIFY);
        let (x1, x2) = self.range_pairs(&g, cond, &mut rng)?;
        let rec = estimate_rec(&a, &x1, &x2, self.cfg.seed)?;
        let srec = estimate_s_rec(&a, &x1, &x2, self.cfg.seed)?;
        let mut report = json!({
            "m": a.m(),
            "n": a.n(),
            "rec": {"alpha": rec.alpha, "beta": rec.beta, "ratio": rec.ratio(), "pairs": rec.pairs, "skipped": rec.skipped},
            "s_rec": {"gamma": srec.gamma, "delta": 0.0, "pairs": srec.pairs},
        });
        if let Ok(p) = self.load_net(PINV, "certify") {
            let est = estimate_projector_delta(&g, &p, &test.x, cond, &self.cfg.certify_oracle)?;
            report["projector"] = json!({
                "delta": est.delta,
                "samples": est.samples,
                "excluded": est.excluded,
                "oracle_iters": est.oracle.iters,
                "oracle_lr": est.oracle.lr,
            });
            if rec.ratio() < 2.0 && est.delta.is_finite() {
                let scfg = self.solver_config(&g, &a, cond)?;
                let trace = solve_parallel(&Projector::Network { g: &g, pinv: &p }, &a, &y, None, &scfg, self.cfg.jobs)?;
                let f: Vec<f64> = trace.mean_f();
                if let Some(chk) = check_linear_convergence(&f, rec.alpha, rec.beta, est.delta.max(0.0), 0.0) {
                    report["linear_rate"] = json!({"holds": chk.holds, "worst_margin": chk.worst_margin, "first_violation": chk.first_violation});
                }
            } else {
                report["linear_rate"] = json!({"applicable": false, "reason": "beta/alpha >= 2 on the sample"});
            }
        }
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))? + "\n";
        self.emit("certify.json", text.as_bytes())?;
        self.finish_stage("certify", start)?;
        Ok(report)
    }

    /// Linear manifold with closed-form networks, then reconstruct and
    /// evaluate.
    pub fn smoke(&mut self) -> Result<Vec<ResultRow>> {
        if self.cfg.model != ModelKind::Synthetic {
            return Err(CliError::Usage("smoke runs on model.kind = synthetic".into()));
        }
        let start = Instant::now();
        let man = self.manifold()?;
        self.save_net(GENERATOR, &man.generator_network(), NetworkKind::Generator)?;
        self.save_net(PINV, &man.pinv_network(), NetworkKind::PseudoInverse)?;
        self.finish_stage("smoke-models", start)?;
        self.reconstruct()?;
        crate::results::parse_results_csv(&std::fs::read(self.path(RESULTS)).map_err(CliError::io(self.path(RESULTS)))?)
    }
}

fn data_err(e: gpcs_core::TensorError) -> CliError {
    CliError::Data(e.into())
}

fn mlp_err(e: gpcs_core::mlp::MlpError) -> CliError {
    CliError::Solver(e.into())
}

/// Mean PGD wall time per image over mean NPGD wall time per image.
pub fn speedup(rows: &[ResultRow]) -> Option<f64> {
    let mean = |s: &str| {
        let v: Vec<f64> = rows.iter().filter(|r| r.solver == s).filter_map(|r| r.mean_wall_ms_per_image).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(mean("pgd")? / mean("npgd")?)
}

fn trace_csv(trace: &SolverTrace, timing: bool) -> String {
    if timing {
        return trace.to_csv();
    }
    let mut out = String::new();
    for (i, line) in trace.to_csv().lines().enumerate() {
        if i == 0 {
            out.push_str(line);
        } else {
            let cut = line.rfind(',').map_or(line.len(), |p| p + 1);
            out.push_str(&line[..cut]);
        }
        out.push('\n');
    }
    out
}

/// `u32 rows, u32 cols` then row-major f64, little-endian.
pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.len());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let bad = || CliError::Invalid("malformed reconstruction file".into());
    if bytes.len() < 8 {
        return Err(bad());
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * rows * cols {
        return Err(bad());
    }
    let data = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&[rows, cols], data).map_err(|_| bad())
}
