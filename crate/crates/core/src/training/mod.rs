//! Training loop, evaluation harness and checkpoints for every method.
//!
//! A trained model is a [`BindingNet`] parameter set plus the method and
//! configuration that produced it. Baseline heads live in the same
//! parameter set under their own prefixes, so one checkpoint format serves
//! all methods.

pub mod metrics;
pub mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, NoiseSchedule, DENOISING_COND_DIM};
use crate::bindingnet::{centralize_complex, BindingNet, ComplexForce, LigandState, LigandTopology, ModelConfig, ProteinStructure};
use crate::data::ComplexRecord;
use crate::dynamics::{
    adjoint_gradients, coordinate_momentum, integrate_ode, integrate_sde, mae_loss_and_grad, rollout_graph, stream_seed,
    FrozenForce, GradientMode, GraphNoise, LangevinConfig, PhaseState, Rollout, SolverConfig, SolverMethod,
};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tensor::{Checkpoint, Graph, Optimizer, OptimizerKind, ParamSet, Tensor};

pub use metrics::{
    loss_trajectory_mae, metric_fps, metric_recovery, metric_stability, timed_rollout, MetricReport, TrajectoryMetrics,
    STABILITY_DELTA,
};
pub use split::{split_multi, split_single, Split, SplitKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    NeuralmdOde,
    NeuralmdSde,
    Verletmd,
    Gnnmd,
    Denoisingld,
    /// Constant-velocity extrapolation; nothing to train.
    Ballistic,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::NeuralmdOde,
        MethodKind::NeuralmdSde,
        MethodKind::Verletmd,
        MethodKind::Gnnmd,
        MethodKind::Denoisingld,
        MethodKind::Ballistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::NeuralmdOde => "neuralmd-ode",
            MethodKind::NeuralmdSde => "neuralmd-sde",
            MethodKind::Verletmd => "verletmd",
            MethodKind::Gnnmd => "gnnmd",
            MethodKind::Denoisingld => "denoisingld",
            MethodKind::Ballistic => "ballistic",
        }
    }

    pub fn is_neuralmd(self) -> bool {
        matches!(self, MethodKind::NeuralmdOde | MethodKind::NeuralmdSde)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Where NeuralMD takes its initial velocity from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocitySource {
    /// Recorded velocities when the data has them, the surrogate otherwise.
    #[default]
    Auto,
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub langevin: LangevinConfig,
    pub schedule: NoiseSchedule,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Snapshots rolled out per NeuralMD training sample.
    pub horizon: usize,
    /// Spacing of NeuralMD rollout starts within a trajectory.
    pub start_stride: usize,
    pub train_fraction: f64,
    pub fractions: [f64; 3],
    pub seed: u64,
    /// Apply Langevin noise inside NeuralMD-SDE training rollouts.
    pub sde_noise_in_training: bool,
    pub velocity_source: VelocitySource,
    /// Stop once this many epochs pass without a new best selection loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            langevin: LangevinConfig::default(),
            schedule: NoiseSchedule::default(),
            epochs: 500,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            horizon: 5,
            start_stride: 5,
            train_fraction: 0.8,
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
            sde_noise_in_training: true,
            velocity_source: VelocitySource::Auto,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.solver.validate()?;
        self.langevin.validate()?;
        self.schedule.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.horizon == 0 || self.start_stride == 0 {
            return Err(Error::Config("horizon and start_stride must be positive".into()));
        }
        Ok(())
    }

    /// Backbone configuration used by `method`.
    pub fn model_for(&self, method: MethodKind) -> ModelConfig {
        let cond_dim = if method == MethodKind::Denoisingld { DENOISING_COND_DIM } else { 0 };
        ModelConfig {
            cond_dim,
            ..self.model.clone()
        }
    }

    fn solver_for(&self, method: MethodKind) -> SolverConfig {
        let method = if method == MethodKind::NeuralmdSde {
            SolverMethod::EulerMaruyama
        } else {
            SolverMethod::Euler
        };
        SolverConfig {
            method,
            ..self.solver.clone()
        }
    }
}

/// A method with its parameters and configuration.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub method: MethodKind,
    pub config: TrainConfig,
    pub net: BindingNet,
}

const META_METHOD: &str = "method";
const META_CONFIG: &str = "train_config";

impl TrainedModel {
    /// Freshly initialized model for `method`.
    pub fn init(method: MethodKind, config: &TrainConfig, needs_surrogate: bool) -> Result<Self> {
        config.validate()?;
        let mut net = BindingNet::new(config.model_for(method), config.seed)?;
        match method {
            MethodKind::Gnnmd => baselines::add_gnnmd_head(&mut net, stream_seed(config.seed, 1))?,
            m if m.is_neuralmd() && needs_surrogate => net.add_surrogate(stream_seed(config.seed, 2))?,
            _ => {}
        }
        Ok(Self {
            method,
            config: config.clone(),
            net,
        })
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut meta = extra.clone();
        meta.insert(META_METHOD.into(), self.method.name().into());
        meta.insert(META_CONFIG.into(), serde_json::to_string(&self.config)?);
        Ok(Checkpoint {
            params: self.net.params().clone(),
            meta,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let method: MethodKind = ckpt
            .meta
            .get(META_METHOD)
            .ok_or_else(|| Error::Config("checkpoint has no method entry".into()))?
            .parse()?;
        let config: TrainConfig = serde_json::from_str(
            ckpt.meta
                .get(META_CONFIG)
                .ok_or_else(|| Error::Config("checkpoint has no training configuration".into()))?,
        )?;
        let net = BindingNet::from_params(config.model_for(method), ckpt.params.clone())?;
        Ok(Self { method, config, net })
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// The split `cfg` prescribes for `dataset`. Single-trajectory splits need
/// every record to have the same number of snapshots.
pub fn make_split(kind: SplitKind, dataset: &[ComplexRecord], cfg: &TrainConfig) -> Result<Split> {
    let first = dataset.first().ok_or(Error::EmptyInput("dataset has no records"))?;
    match kind {
        SplitKind::SingleTrajectory => {
            let len = first.trajectory.len();
            if let Some(r) = dataset.iter().find(|r| r.trajectory.len() != len) {
                return Err(Error::Split(format!(
                    "single-trajectory split needs equal lengths; {} has {} snapshots, {} has {len}",
                    r.id,
                    r.trajectory.len(),
                    first.id
                )));
            }
            split_single(len, cfg.train_fraction)
        }
        SplitKind::MultiTrajectory => split_multi(dataset.len(), cfg.fractions, cfg.seed),
    }
}

/// Per-epoch mean losses. `val` is empty for single-trajectory splits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model at the selected epoch.
    pub model: TrainedModel,
    pub curves: LossCurves,
    pub best_epoch: Option<usize>,
    /// Epoch whose loss went non-finite, if training stopped early.
    pub diverged_at: Option<usize>,
}

/// Epoch with the lowest selection loss: train loss for single-trajectory
/// splits, validation loss for multi-trajectory splits. Ties keep the earliest.
pub fn select_epoch(kind: SplitKind, curves: &LossCurves) -> Option<usize> {
    let curve = match kind {
        SplitKind::SingleTrajectory => &curves.train,
        SplitKind::MultiTrajectory if curves.val.is_empty() => &curves.train,
        SplitKind::MultiTrajectory => &curves.val,
    };
    curve
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (e, &l)| match best {
            Some((_, b)) if b <= l => best,
            _ => Some((e, l)),
        })
        .map(|(e, _)| e)
}

/// One training or validation unit: a trajectory and a start snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Sample {
    record: usize,
    start: usize,
}

/// Snapshots usable by a record under the split: the train prefix for
/// single-trajectory splits, everything otherwise.
fn usable_len(split: &Split, record: &ComplexRecord) -> usize {
    match split.kind {
        SplitKind::SingleTrajectory => split.train.len().min(record.trajectory.len()),
        SplitKind::MultiTrajectory => record.trajectory.len(),
    }
}

fn samples_for(method: MethodKind, cfg: &TrainConfig, records: &[(usize, usize)]) -> Vec<Sample> {
    let mut out = Vec::new();
    for &(record, len) in records {
        match method {
            m if m.is_neuralmd() => {
                let mut t = 0;
                while t + cfg.horizon < len {
                    out.push(Sample { record, start: t });
                    t += cfg.start_stride;
                }
            }
            MethodKind::Verletmd | MethodKind::Gnnmd | MethodKind::Denoisingld => {
                out.extend((1..len.saturating_sub(1)).map(|start| Sample { record, start }));
            }
            _ => {}
        }
    }
    out
}

fn needs_surrogate(cfg: &TrainConfig, dataset: &[ComplexRecord]) -> bool {
    cfg.velocity_source == VelocitySource::Surrogate || dataset.iter().any(|r| !r.has_velocities())
}

/// Trains `method` from its seeded initialization and returns the model at
/// the selected epoch.
pub fn train(method: MethodKind, dataset: &[ComplexRecord], split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = TrainedModel::init(method, cfg, needs_surrogate(cfg, dataset))?;
    train_model(model, dataset, split)
}

/// Continues training `initial` with its own configuration.
pub fn train_model(initial: TrainedModel, dataset: &[ComplexRecord], split: &Split) -> Result<TrainOutcome> {
    let method = initial.method;
    let cfg = &initial.config.clone();
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training needs at least one trajectory"));
    }
    let (train_records, val_records): (Vec<(usize, usize)>, Vec<(usize, usize)>) = match split.kind {
        SplitKind::SingleTrajectory => {
            for r in dataset {
                split.validate(r.trajectory.len())?;
            }
            ((0..dataset.len()).map(|i| (i, usable_len(split, &dataset[i]))).collect(), Vec::new())
        }
        SplitKind::MultiTrajectory => {
            split.validate(dataset.len())?;
            let pick = |ids: &[usize]| ids.iter().map(|&i| (i, dataset[i].trajectory.len())).collect();
            (pick(&split.train), pick(&split.val))
        }
    };
    if method == MethodKind::NeuralmdSde
        && cfg.solver.gradient_mode == GradientMode::Adjoint
        && cfg.sde_noise_in_training
        && cfg.langevin.gamma > 0.0
    {
        return Err(Error::Unsupported("adjoint gradients for stochastic rollouts"));
    }

    let mut model = initial;
    if method.is_neuralmd() && needs_surrogate(cfg, dataset) && !model.net.has_surrogate() {
        model.net.add_surrogate(stream_seed(cfg.seed, 2))?;
    }
    let initial_params = model.net.params().clone();
    let train_samples = samples_for(method, cfg, &train_records);
    let val_samples = samples_for(method, cfg, &val_records);
    if method != MethodKind::Ballistic && train_samples.is_empty() {
        return Err(Error::Split(format!(
            "no {} training samples: trajectories are too short for the split",
            method.name()
        )));
    }

    let mut trainer = Trainer {
        method,
        cfg,
        dataset,
        split,
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut curves = LossCurves::default();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut diverged_at = None;
    let epochs = if method == MethodKind::Ballistic { 0 } else { cfg.epochs };
    for epoch in 0..epochs {
        let mut order = train_samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1000 + epoch as u64)));
        let mut total = 0.0;
        let mut counted = 0usize;
        for (k, s) in order.iter().enumerate() {
            let noise_seed = stream_seed(cfg.seed ^ 0x5DE5, (epoch * order.len() + k) as u64);
            let loss = match trainer.sample_loss(&mut model.net, *s, noise_seed, true) {
                Ok(l) => l,
                Err(Error::Diverged { .. }) | Err(Error::NonFiniteForce { .. }) => f64::NAN,
                Err(Error::NoValidPairs { .. }) => {
                    // ligand atoms left each other's cutoff; no usable graph
                    log::debug!("{}: skipping sample {s:?} in epoch {epoch}", method.name());
                    model.net.params_mut().clear_grads();
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                total = f64::NAN;
                break;
            }
            total += loss;
            counted += 1;
            optimizer.step(model.net.params_mut())?;
        }
        if counted == 0 {
            total = f64::NAN;
        }
        if !total.is_finite() {
            log::warn!("{}: loss became non-finite in epoch {epoch}; keeping the best checkpoint", method.name());
            diverged_at = Some(epoch);
            break;
        }
        model.net.params_mut().clear_grads();
        curves.train.push(total / counted as f64);
        if !val_samples.is_empty() {
            let (mut v, mut n) = (0.0, 0usize);
            for (k, s) in val_samples.iter().enumerate() {
                let noise_seed = stream_seed(cfg.seed ^ 0x7A11, k as u64);
                match trainer.sample_loss(&mut model.net, *s, noise_seed, false) {
                    Ok(l) => {
                        v += l;
                        n += 1;
                    }
                    Err(Error::NoValidPairs { .. }) => {}
                    Err(_) => v = f64::NAN,
                }
            }
            curves.val.push(if n == 0 { f64::NAN } else { v / n as f64 });
        }
        let chosen = select_epoch(split.kind, &curves);
        if chosen == Some(epoch) {
            let l = match split.kind {
                SplitKind::MultiTrajectory if !curves.val.is_empty() => curves.val[epoch],
                _ => curves.train[epoch],
            };
            best = Some((epoch, l, model.net.params().clone()));
        }
        log::info!(
            "{} epoch {epoch}: train {:.6}{}",
            method.name(),
            curves.train[epoch],
            curves.val.get(epoch).map(|v| format!(" val {v:.6}")).unwrap_or_default()
        );
        if let (Some(p), Some((b, _, _))) = (cfg.patience, &best) {
            if epoch - b >= p {
                log::info!("{}: no improvement for {p} epochs; stopping", method.name());
                break;
            }
        }
    }
    let best_epoch = best.as_ref().map(|b| b.0);
    if let Some((_, _, params)) = best {
        *model.net.params_mut() = params;
    } else if diverged_at.is_some() {
        // diverged in the first epoch: fall back to the initialization
        *model.net.params_mut() = initial_params;
    }
    Ok(TrainOutcome {
        model,
        curves,
        best_epoch,
        diverged_at,
    })
}

struct Trainer<'a> {
    method: MethodKind,
    cfg: &'a TrainConfig,
    dataset: &'a [ComplexRecord],
    split: &'a Split,
}

impl Trainer<'_> {
    fn sample_loss(&mut self, net: &mut BindingNet, s: Sample, noise_seed: u64, accumulate: bool) -> Result<f64> {
        let rec = &self.dataset[s.record];
        let len = usable_len(self.split, rec);
        let snaps = &rec.trajectory.positions[..len];
        let (lig, prot, c) = centralize_complex(&rec.ligand_at(s.start)?, &rec.protein);
        let shift = |x: &[Vec3]| -> Vec<Vec3> { x.iter().map(|p| p - c).collect() };
        match self.method {
            MethodKind::NeuralmdOde | MethodKind::NeuralmdSde => {
                let truth: Vec<Vec<Vec3>> = (1..=self.cfg.horizon).map(|k| shift(&snaps[s.start + k])).collect();
                let recorded = match (self.cfg.velocity_source, &rec.trajectory.velocities) {
                    (VelocitySource::Auto, Some(v)) => Some(v[s.start].clone()),
                    _ => None,
                };
                let momentum = match recorded {
                    Some(_) => None,
                    None => Some(coordinate_momentum(snaps, s.start)?),
                };
                self.neuralmd_loss(net, &lig, &prot, recorded, momentum, &truth, noise_seed, accumulate)
            }
            MethodKind::Verletmd => {
                let labels = baselines::finite_difference_forces(
                    &snaps[s.start - 1],
                    &snaps[s.start],
                    &snaps[s.start + 1],
                    &lig.masses,
                );
                baselines::verletmd_accumulate(net, &lig, &prot, &labels, accumulate)
            }
            MethodKind::Gnnmd => {
                let x = &lig.positions;
                let d: Vec<Vec3> = snaps[s.start].iter().zip(&snaps[s.start - 1]).map(|(a, b)| a - b).collect();
                let truth = shift(&snaps[s.start + 1]);
                let topo = LigandTopology::new(&lig)?;
                let mut g = Graph::new();
                let bound = if accumulate { net.params().bind(&mut g) } else { net.params().bind_frozen(&mut g) };
                let enc = net.encode_protein(&mut g, &bound, &prot)?;
                let xv = g.constant(Tensor::from_points(x));
                let dv = g.constant(Tensor::from_points(&d));
                let next = baselines::gnnmd_next(&mut g, &bound, net, &topo, &enc, xv, dv)?;
                let loss = loss_trajectory_mae(&mut g, &[next], &[truth])?;
                let value = g.value(loss).item();
                if accumulate && value.is_finite() {
                    g.backward(loss)?;
                    net.params_mut().accumulate_grads(&g, &bound);
                }
                Ok(value)
            }
            MethodKind::Denoisingld => {
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                let sigmas = &self.cfg.schedule.sigmas;
                let sigma = sigmas[rand::Rng::random_range(&mut rng, 0..sigmas.len())];
                let mu: Vec<Vec3> = (0..lig.len())
                    .map(|i| lig.positions[i] + (snaps[s.start][i] - snaps[s.start - 1][i]))
                    .collect();
                let next = shift(&snaps[s.start + 1]);
                baselines::denoisingld_accumulate(net, &lig, &prot, &mu, &next, sigma, &mut rng, accumulate)
            }
            MethodKind::Ballistic => Ok(0.0),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn neuralmd_loss(
        &self,
        net: &mut BindingNet,
        lig: &LigandState,
        prot: &ProteinStructure,
        recorded: Option<Vec<Vec3>>,
        momentum: Option<Vec<Vec3>>,
        truth: &[Vec<Vec3>],
        noise_seed: u64,
        accumulate: bool,
    ) -> Result<f64> {
        let solver = self.cfg.solver_for(self.method);
        let t_list: Vec<f64> = (1..=truth.len()).map(|k| k as f64).collect();
        let noisy = self.method == MethodKind::NeuralmdSde && self.cfg.sde_noise_in_training;
        let lang = LangevinConfig {
            seed: noise_seed,
            ..self.cfg.langevin.clone()
        };
        if solver.gradient_mode == GradientMode::Adjoint && accumulate && !noisy {
            return self.neuralmd_adjoint(net, lig, prot, recorded, momentum, truth, &t_list);
        }
        let (value, grads) = {
            let field = ComplexForce::new(net, lig, prot)?;
            let mut g = Graph::new();
            let bound = if accumulate { net.params().bind(&mut g) } else { net.params().bind_frozen(&mut g) };
            let enc = net.encode_protein(&mut g, &bound, prot)?;
            let x0 = g.constant(Tensor::from_points(&lig.positions));
            let v0 = match (recorded, momentum) {
                (Some(v), _) => g.constant(Tensor::from_points(&v)),
                (None, Some(m)) => {
                    let mv = g.constant(Tensor::from_points(&m));
                    if net.has_surrogate() {
                        let learned = net.surrogate_vec(&mut g, &bound, &field.topology, &enc, x0)?;
                        g.add(learned, mv)?
                    } else {
                        mv
                    }
                }
                (None, None) => unreachable!("a velocity source is always chosen"),
            };
            let noise = noisy.then(|| GraphNoise {
                config: &lang,
                rng: ChaCha8Rng::seed_from_u64(noise_seed),
            });
            let pred = rollout_graph(&mut g, &bound, &field, &enc, x0, v0, &lig.masses, 0.0, &t_list, &solver, noise)?;
            let loss = loss_trajectory_mae(&mut g, &pred, truth)?;
            let value = g.value(loss).item();
            if accumulate && value.is_finite() {
                g.backward(loss)?;
                (value, Some(bound.grads(&g)))
            } else {
                (value, None)
            }
        };
        if let Some(grads) = grads {
            for (name, grad) in grads {
                net.params_mut().accumulate_grad(&name, &grad);
            }
        }
        Ok(value)
    }

    #[allow(clippy::too_many_arguments)]
    fn neuralmd_adjoint(
        &self,
        net: &mut BindingNet,
        lig: &LigandState,
        prot: &ProteinStructure,
        recorded: Option<Vec<Vec3>>,
        momentum: Option<Vec<Vec3>>,
        truth: &[Vec<Vec3>],
        t_list: &[f64],
    ) -> Result<f64> {
        let solver = self.cfg.solver_for(self.method);
        let (result, surrogate_grads) = {
            let field = ComplexForce::new(net, lig, prot)?;
            let learned = match (&recorded, &momentum) {
                (None, Some(_)) if net.has_surrogate() => {
                    let mut g = Graph::new();
                    let bound = net.params().bind_frozen(&mut g);
                    let enc = net.encode_protein(&mut g, &bound, prot)?;
                    let x0 = g.constant(Tensor::from_points(&lig.positions));
                    let v = net.surrogate_vec(&mut g, &bound, &field.topology, &enc, x0)?;
                    Some(g.value(v).to_points())
                }
                _ => None,
            };
            let v0: Vec<Vec3> = match (recorded, &momentum) {
                (Some(v), _) => v,
                (None, Some(m)) => match &learned {
                    Some(l) => l.iter().zip(m).map(|(a, b)| a + b).collect(),
                    None => m.clone(),
                },
                (None, None) => unreachable!("a velocity source is always chosen"),
            };
            let state0 = PhaseState::new(lig.positions.clone(), v0, 0.0)?;
            let loss = |pred: &[Vec<Vec3>]| mae_loss_and_grad(pred, truth);
            let result = adjoint_gradients(net.params(), &field, &state0, &lig.masses, t_list, &solver, &loss)?;
            // chain the initial-velocity adjoint through the surrogate tower
            let surrogate_grads = if learned.is_some() {
                let mut g = Graph::new();
                let bound = net.params().bind(&mut g);
                let enc = net.encode_protein(&mut g, &bound, prot)?;
                let x0 = g.constant(Tensor::from_points(&lig.positions));
                let v = net.surrogate_vec(&mut g, &bound, &field.topology, &enc, x0)?;
                let w = g.constant(Tensor::from_points(&result.grad_v0));
                let prod = g.mul(v, w)?;
                let s = g.sum(prod);
                g.backward(s)?;
                Some(bound.grads(&g))
            } else {
                None
            };
            (result, surrogate_grads)
        };
        for (name, grad) in result.param_grads.iter().chain(surrogate_grads.iter().flatten()) {
            net.params_mut().accumulate_grad(name, grad);
        }
        Ok(result.loss)
    }
}

/// Initial conditions for a rollout from snapshot `start`, using only
/// snapshots up to and including `start` plus recorded velocities.
struct StartState {
    ligand: LigandState,
    protein: ProteinStructure,
    center: Vec3,
    /// NeuralMD, VerletMD and ballistic initial velocity.
    v0: Vec<Vec3>,
    /// GNN-MD and DenoisingLD previous displacement.
    d0: Vec<Vec3>,
}

fn start_state(model: &TrainedModel, rec: &ComplexRecord, start: usize) -> Result<StartState> {
    let snaps = &rec.trajectory.positions;
    let (ligand, protein, center) = centralize_complex(&rec.ligand_at(start)?, &rec.protein);
    let recorded = match (model.config.velocity_source, &rec.trajectory.velocities) {
        (VelocitySource::Auto, Some(v)) => Some(v[start].clone()),
        _ => None,
    };
    // Backward difference when a previous snapshot exists; at the first
    // snapshot the forward difference is the only option.
    let difference = if start > 0 {
        coordinate_momentum(&snaps[..=start], start)?
    } else {
        coordinate_momentum(snaps, 0)?
    };
    let v0 = match recorded {
        Some(v) => v,
        None if model.method.is_neuralmd() && model.net.has_surrogate() => {
            let window = if start > 0 { &snaps[..=start] } else { &snaps[..2] };
            let centered: Vec<Vec<Vec3>> = window
                .iter()
                .map(|s| s.iter().map(|p| p - center).collect())
                .collect();
            crate::dynamics::surrogate_velocity(&model.net, &ligand, &protein, &centered, start)?
        }
        None => difference.clone(),
    };
    let d0 = if start > 0 { difference } else { v0.clone() };
    Ok(StartState {
        ligand,
        protein,
        center,
        v0,
        d0,
    })
}

/// Rolls `model` out for `steps` snapshots from snapshot `start` of `rec`.
/// Positions are returned in the record's frame; a diverged rollout is
/// padded with its last finite snapshot and flagged.
pub fn predict(model: &TrainedModel, rec: &ComplexRecord, start: usize, steps: usize, stream: u64) -> Result<(Vec<Vec<Vec3>>, bool)> {
    if start >= rec.trajectory.len() {
        return Err(Error::IndexOutOfRange {
            op: "predict",
            index: start,
            len: rec.trajectory.len(),
        });
    }
    if steps == 0 {
        return Ok((Vec::new(), false));
    }
    let st = start_state(model, rec, start)?;
    let x0 = st.ligand.positions.clone();
    let t_list: Vec<f64> = (1..=steps).map(|k| k as f64).collect();
    let cfg = &model.config;
    let net = &model.net;
    let rollout: Rollout = match model.method {
        MethodKind::NeuralmdOde | MethodKind::NeuralmdSde => {
            let field = ComplexForce::new(net, &st.ligand, &st.protein)?;
            let frozen = FrozenForce {
                field: &field,
                params: net.params(),
            };
            let state0 = PhaseState::new(x0.clone(), st.v0.clone(), 0.0)?;
            let solver = cfg.solver_for(model.method);
            let run = if model.method == MethodKind::NeuralmdSde {
                let lang = LangevinConfig {
                    seed: stream_seed(cfg.langevin.seed, stream),
                    ..cfg.langevin.clone()
                };
                integrate_sde(&state0, &t_list, &frozen, &st.ligand.masses, &solver, &lang)
            } else {
                integrate_ode(&state0, &t_list, &frozen, &st.ligand.masses, &solver)
            };
            match run {
                Err(Error::NoValidPairs { .. }) => truncated_rollout(),
                other => other?,
            }
        }
        MethodKind::Verletmd => match baselines::verletmd_rollout(
            net,
            &st.ligand,
            &st.protein,
            &x0,
            &st.v0,
            steps,
            cfg.solver.substeps,
        ) {
            Err(Error::NoValidPairs { .. }) => truncated_rollout(),
            other => other?,
        },
        MethodKind::Gnnmd => baselines::gnnmd_rollout(net, &st.ligand, &st.protein, &x0, &st.d0, steps)?,
        MethodKind::Denoisingld => baselines::denoisingld_rollout(
            net,
            &st.ligand,
            &st.protein,
            &x0,
            &st.d0,
            steps,
            &cfg.schedule,
            stream_seed(cfg.seed ^ 0xD1FF, stream),
        )?,
        MethodKind::Ballistic => baselines::ballistic_rollout(&x0, &st.v0, steps),
    };
    let diverged = !rollout.is_complete();
    let positions = rollout
        .padded_positions(steps, &x0)
        .into_iter()
        .map(|s| s.into_iter().map(|p| p + st.center).collect())
        .collect();
    Ok((positions, diverged))
}

fn truncated_rollout() -> Rollout {
    log::warn!("ligand atoms drifted beyond the cutoff; rollout truncated");
    Rollout {
        times: Vec::new(),
        positions: Vec::new(),
        velocities: Vec::new(),
        diverged_after: Some(0.0),
    }
}

/// Test-window metrics. Single-trajectory splits roll out from the last train
/// snapshot over the test snapshots of every record; multi-trajectory splits
/// roll out each test trajectory from its first snapshot.
pub fn evaluate(model: &TrainedModel, dataset: &[ComplexRecord], split: &Split) -> Result<MetricReport> {
    let mut items = Vec::new();
    let mut elapsed = 0.0;
    let mut emitted = 0usize;
    let jobs: Vec<(usize, usize, Vec<usize>)> = match split.kind {
        SplitKind::SingleTrajectory => {
            let start = *split.train.last().ok_or(Error::EmptyInput("split has no training snapshots"))?;
            (0..dataset.len())
                .map(|i| {
                    split.validate(dataset[i].trajectory.len())?;
                    Ok((i, start, split.test.clone()))
                })
                .collect::<Result<_>>()?
        }
        SplitKind::MultiTrajectory => {
            split.validate(dataset.len())?;
            split
                .test
                .iter()
                .map(|&i| (i, 0, (1..dataset[i].trajectory.len()).collect()))
                .collect()
        }
    };
    if jobs.is_empty() {
        return Err(Error::EmptyInput("no test trajectories to evaluate"));
    }
    for (i, start, targets) in jobs {
        let rec = &dataset[i];
        let steps = targets.last().map_or(0, |&t| t - start);
        let clock = std::time::Instant::now();
        let (pred, diverged) = predict(model, rec, start, steps, i as u64)?;
        elapsed += clock.elapsed().as_secs_f64();
        emitted += steps;
        let pred: Vec<Vec<Vec3>> = targets.iter().map(|&t| pred[t - start - 1].clone()).collect();
        let truth: Vec<Vec<Vec3>> = targets.iter().map(|&t| rec.trajectory.positions[t].clone()).collect();
        items.push((rec.id.clone(), pred, truth, diverged));
    }
    let kind = match split.kind {
        SplitKind::SingleTrajectory => "single",
        SplitKind::MultiTrajectory => "multi",
    };
    MetricReport::from_rollouts(model.method.name(), kind, &items, metric_fps(emitted, elapsed.max(1e-9)))
}
