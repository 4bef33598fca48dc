//! Toy training loop, metric traces and the merged inference path.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PenaltyWeights, TaskKind, Variant};
use super::task::{select_columns, ToyTask};
use crate::adapter::{AdapterLayer, AdapterVars, FilteredUpdate};
use crate::autodiff::{Gradients, Tape, Var};
use crate::coordinator::{coordinate, tape_coordinate, CoordinatorParams, CoordinatorVars};
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::ib::{GateNoise, GateState};
use crate::matrix::Matrix;
use crate::smoothing::{
    cos_adj, laplacian_penalty, tape_cosine_penalty, tape_laplacian_penalty, UpdateStack,
};

const STREAM_DATA: u64 = 0;
const STREAM_ADAPTERS: u64 = 1;
const STREAM_COORDINATOR: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_GATES: u64 = 4;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Task loss plus the running variant's penalty.
///
/// `gates` pairs each gate state with its `mu` node; `update_rows` are the
/// flattened per-layer updates as `1 x F` nodes. Weights belonging to other
/// variants must be zero.
pub fn total_loss(
    tape: &Tape,
    task: Var,
    variant: Variant,
    weights: &PenaltyWeights,
    gates: &[(&GateState, Var)],
    update_rows: &[Var],
) -> Result<Var> {
    let stray = [
        ("lambda_ib", weights.lambda_ib, Variant::Structlora),
        ("lambda_cos", weights.lambda_cos, Variant::LoraCos),
        ("lambda_lap", weights.lambda_lap, Variant::LoraLap),
    ]
    .into_iter()
    .find(|(_, w, owner)| *w != 0.0 && *owner != variant);
    if let Some((name, w, _)) = stray {
        return Err(Error::Config(format!(
            "{name} = {w} is active but the variant is {variant}; only one penalty may be active"
        )));
    }
    match variant {
        Variant::Lora => Ok(task),
        Variant::Structlora => {
            if weights.lambda_ib == 0.0 || gates.is_empty() {
                return Ok(task);
            }
            let mut kl_sum = tape.constant(Matrix::scalar(0.0))?;
            for (state, mu) in gates {
                kl_sum = tape.add(kl_sum, state.tape_kl(tape, *mu)?)?;
            }
            tape.add(task, tape.scale(kl_sum, weights.lambda_ib)?)
        }
        Variant::LoraCos => {
            if weights.lambda_cos == 0.0 {
                return Ok(task);
            }
            let p = tape_cosine_penalty(tape, update_rows)?;
            tape.add(task, tape.scale(p, weights.lambda_cos)?)
        }
        Variant::LoraLap => {
            if weights.lambda_lap == 0.0 {
                return Ok(task);
            }
            let p = tape_laplacian_penalty(tape, update_rows)?;
            tape.add(task, tape.scale(p, weights.lambda_lap)?)
        }
    }
}

/// Forward-pass floating point operations, split by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Network forward and task loss.
    pub base: u64,
    /// Gate sampling and forming `A diag(m) B`.
    pub gating: u64,
    /// Message passing and the output map.
    pub coordination: u64,
    /// KL, cosine or Laplacian penalties (including forming updates for them).
    pub penalty: u64,
}

impl FlopBreakdown {
    pub fn extra(&self) -> u64 {
        self.gating + self.coordination + self.penalty
    }

    fn add(&mut self, o: &FlopBreakdown) {
        self.base += o.base;
        self.gating += o.gating;
        self.coordination += o.coordination;
        self.penalty += o.penalty;
    }
}

/// Everything needed to evaluate the network in training mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub task: TaskKind,
    pub variant: Variant,
    pub layers: Vec<AdapterLayer>,
    /// One gate per layer for gated variants, empty otherwise.
    pub gates: Vec<GateState>,
    pub coordinator: Option<CoordinatorParams>,
    pub graph: LayerGraph,
    pub readout: Option<Matrix>,
}

/// Tape handles created for one evaluation of the network.
pub struct Recorded {
    pub adapters: Vec<AdapterVars>,
    pub mu: Vec<Var>,
    pub coordinator: Option<CoordinatorVars>,
    /// Dense `A diag(m) B` per layer when the variant forms them.
    pub filtered: Vec<Var>,
    /// Updates actually applied to the base weights, when dense.
    pub finals: Vec<Var>,
    pub output: Var,
    pub task: Var,
    pub total: Var,
    pub flops: FlopBreakdown,
}

impl Network {
    pub fn new(cfg: &ExperimentConfig, task: &ToyTask) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = rng_stream(cfg.seed, STREAM_ADAPTERS);
        let layers = task
            .base_weights
            .iter()
            .map(|w0| AdapterLayer::init(w0.clone(), cfg.r, cfg.alpha, &mut init_rng))
            .collect::<Result<Vec<_>>>()?;
        let (gates, coordinator) = if cfg.variant == Variant::Structlora {
            let gates = (0..cfg.layers)
                .map(|_| {
                    GateState::new(
                        cfg.gate_mode,
                        vec![cfg.gate_init; cfg.r],
                        cfg.gate_sigma,
                        cfg.gate_tau,
                        cfg.lambda_ib,
                        cfg.prior_p,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut coord_rng = rng_stream(cfg.seed, STREAM_COORDINATOR);
            let coord = CoordinatorParams::init(
                cfg.d * cfg.k,
                cfg.depth,
                cfg.coordinator_activation,
                &mut coord_rng,
            );
            (gates, Some(coord))
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            task: task.kind,
            variant: cfg.variant,
            layers,
            gates,
            coordinator,
            graph: LayerGraph::chain(cfg.layers)?,
            readout: task.readout.clone(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Gate values with the noise frozen at zero; all ones for ungated variants.
    pub fn deterministic_gates(&self) -> Vec<Vec<f64>> {
        if self.gates.is_empty() {
            self.layers.iter().map(|l| vec![1.0; l.rank()]).collect()
        } else {
            self.gates
                .iter()
                .map(|g| g.gate_from_noise(&g.zero_noise()))
                .collect()
        }
    }

    /// Updates applied to each base weight under deterministic gates.
    pub fn current_updates(&self) -> Result<Vec<FilteredUpdate>> {
        let gates = self.deterministic_gates();
        let filtered = self
            .layers
            .iter()
            .zip(&gates)
            .map(|(l, m)| l.filtered_update(m))
            .collect::<Result<Vec<_>>>()?;
        match &self.coordinator {
            Some(params) => coordinate(&filtered, &self.graph, params, None),
            None => Ok(filtered),
        }
    }

    pub fn update_stack(&self) -> Result<UpdateStack> {
        let ups: Vec<Matrix> = self
            .current_updates()?
            .into_iter()
            .map(|u| u.delta)
            .collect();
        UpdateStack::from_updates(&ups)
    }

    /// Records a training-mode evaluation on `(x, y)`.
    ///
    /// `noise` holds one frozen draw per gated layer; `None` uses zero noise.
    /// `trainable` decides whether parameters become tracked leaves.
    pub fn record(
        &self,
        tape: &Tape,
        weights: &PenaltyWeights,
        x: &Matrix,
        y: &Matrix,
        noise: Option<&[GateNoise]>,
        trainable: bool,
    ) -> Result<Recorded> {
        let mut flops = FlopBreakdown::default();
        let adapters = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    AdapterVars::record(tape, l)
                } else {
                    Ok(AdapterVars {
                        w0: tape.constant(l.w0().clone())?,
                        a: tape.constant(l.a.clone())?,
                        b: tape.constant(l.b.clone())?,
                        alpha: l.alpha(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let mark = tape.flops();
        let mut mu = Vec::new();
        let mut gate_vars = Vec::new();
        if self.gates.is_empty() {
            for l in &self.layers {
                gate_vars.push(tape.constant(Matrix::ones(l.rank(), 1))?);
            }
        } else {
            for (l, state) in self.gates.iter().enumerate() {
                let m = Matrix::column(&state.mu);
                let v = if trainable {
                    tape.leaf(m)?
                } else {
                    tape.constant(m)?
                };
                let zero = state.zero_noise();
                let n = noise.map_or(&zero, |n| &n[l]);
                gate_vars.push(state.tape_gate(tape, v, n)?);
                mu.push(v);
            }
        }

        let dense = self.variant != Variant::Lora;
        let mut filtered = Vec::new();
        if dense {
            for (a, g) in adapters.iter().zip(&gate_vars) {
                filtered.push(a.filtered_update(tape, *g)?);
            }
        }
        let after_gating = tape.flops();
        if self.variant == Variant::Structlora {
            flops.gating += after_gating - mark;
        } else {
            flops.penalty += after_gating - mark;
        }

        let (coord_vars, finals) = match &self.coordinator {
            Some(params) => {
                let cv = if trainable {
                    CoordinatorVars::record(tape, params)?
                } else {
                    CoordinatorVars::constant(tape, params)?
                };
                let start = tape.flops();
                let finals = tape_coordinate(tape, &filtered, &self.graph, &cv, None)?;
                flops.coordination += tape.flops() - start;
                (Some(cv), finals)
            }
            None => (None, filtered.clone()),
        };

        let start = tape.flops();
        let mut h = tape.constant(x.clone())?;
        let last = self.layers.len() - 1;
        for (l, a) in adapters.iter().enumerate() {
            let z = if self.coordinator.is_some() {
                a.forward_dense(tape, finals[l], h)?
            } else {
                a.forward(tape, gate_vars[l], h)?
            };
            h = if l < last || self.task == TaskKind::TwoMoonsClassification {
                tape.tanh(z)?
            } else {
                z
            };
        }
        let (output, task) = task_loss(tape, self.task, self.readout.as_ref(), h, y)?;
        flops.base += tape.flops() - start;

        let start = tape.flops();
        let rows = if self.variant == Variant::LoraCos || self.variant == Variant::LoraLap {
            filtered
                .iter()
                .map(|f| {
                    let (d, k) = tape.shape(*f);
                    tape.reshape(*f, 1, d * k)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let gate_pairs: Vec<(&GateState, Var)> =
            self.gates.iter().zip(mu.iter().copied()).collect();
        let total = total_loss(tape, task, self.variant, weights, &gate_pairs, &rows)?;
        flops.penalty += tape.flops() - start;

        Ok(Recorded {
            adapters,
            mu,
            coordinator: coord_vars,
            filtered,
            finals,
            output,
            task,
            total,
            flops,
        })
    }

    /// Training-mode network output with gates frozen at zero noise.
    pub fn training_forward(&self, x: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let y = match self.task {
            TaskKind::TeacherStudentRegression => Matrix::zeros(self.layers[0].out_dim(), x.cols()),
            TaskKind::TwoMoonsClassification => Matrix::zeros(1, x.cols()),
        };
        let rec = self.record(&tape, &PenaltyWeights::default(), x, &y, None, false)?;
        Ok(tape.value(rec.output))
    }

    /// Folds the current updates into the base weights.
    pub fn merged(&self) -> Result<MergedNetwork> {
        let updates = self.current_updates()?;
        let weights = self
            .layers
            .iter()
            .zip(&updates)
            .map(|(l, u)| l.merge(u))
            .collect::<Result<Vec<_>>>()?;
        Ok(MergedNetwork {
            task: self.task,
            weights,
            readout: self.readout.clone(),
        })
    }

    pub fn trainable_counts(&self) -> ParamCounts {
        ParamCounts {
            adapter: self.layers.iter().map(AdapterLayer::trainable_params).sum(),
            gates: self.gates.iter().map(GateState::rank).sum(),
            coordinator: self
                .coordinator
                .as_ref()
                .map_or(0, CoordinatorParams::trainable_params),
        }
    }

    /// Flat views of every trainable buffer, in a fixed order.
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.a.data_mut());
            out.push(l.b.data_mut());
        }
        for g in &mut self.gates {
            out.push(g.mu.as_mut_slice());
        }
        if let Some(c) = &mut self.coordinator {
            for t in &mut c.theta {
                out.push(t.data_mut());
            }
            out.push(c.w_out.data_mut());
        }
        out
    }
}

fn task_loss(
    tape: &Tape,
    kind: TaskKind,
    readout: Option<&Matrix>,
    h: Var,
    y: &Matrix,
) -> Result<(Var, Var)> {
    let target = tape.constant(y.clone())?;
    match kind {
        TaskKind::TeacherStudentRegression => {
            let diff = tape.sub(h, target)?;
            let sq = tape.mul(diff, diff)?;
            Ok((h, tape.mean(sq)?))
        }
        TaskKind::TwoMoonsClassification => {
            let w =
                readout.ok_or_else(|| Error::Config("classification needs a readout".into()))?;
            let logits = tape.matmul(tape.constant(w.clone())?, h)?;
            // softplus(z) - y z is the logistic loss with logits.
            let sp = tape.softplus(logits)?;
            let yz = tape.mul(target, logits)?;
            Ok((logits, tape.mean(tape.sub(sp, yz)?)?))
        }
    }
}

/// Inference-time network: one dense matrix per layer and nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedNetwork {
    pub task: TaskKind,
    pub weights: Vec<Matrix>,
    pub readout: Option<Matrix>,
}

impl MergedNetwork {
    /// Output (regression predictions or logits) and the flops spent.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, u64)> {
        let mut flops = 0u64;
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, w) in self.weights.iter().enumerate() {
            h = w.matmul(&h)?;
            flops += 2 * (w.rows() * w.cols() * h.cols()) as u64;
            if l < last || self.task == TaskKind::TwoMoonsClassification {
                h = h.map(f64::tanh);
                flops += h.len() as u64;
            }
        }
        if let Some(r) = &self.readout {
            h = r.matmul(&h)?;
            flops += 2 * (r.rows() * r.cols() * h.cols()) as u64;
        }
        Ok((h, flops))
    }

    pub fn task_loss(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        let (out, _) = self.forward(x)?;
        let n = out.len() as f64;
        Ok(match self.task {
            TaskKind::TeacherStudentRegression => {
                out.sub(y)?.data().iter().map(|v| v * v).sum::<f64>() / n
            }
            TaskKind::TwoMoonsClassification => {
                out.data()
                    .iter()
                    .zip(y.data())
                    .map(|(z, t)| crate::autodiff::softplus(*z) - t * z)
                    .sum::<f64>()
                    / n
            }
        })
    }

    /// R^2 for regression, accuracy for classification.
    pub fn task_score(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        let (out, _) = self.forward(x)?;
        Ok(match self.task {
            TaskKind::TeacherStudentRegression => {
                let mut sse = 0.0;
                let mut sst = 0.0;
                for r in 0..y.rows() {
                    let row = y.row(r);
                    let mean = row.iter().sum::<f64>() / row.len() as f64;
                    for (c, t) in row.iter().enumerate() {
                        sse += (out.get(r, c) - t).powi(2);
                        sst += (t - mean).powi(2);
                    }
                }
                1.0 - sse / sst
            }
            TaskKind::TwoMoonsClassification => {
                let hits = out
                    .data()
                    .iter()
                    .zip(y.data())
                    .filter(|(z, t)| (**z > 0.0) == (**t > 0.5))
                    .count();
                hits as f64 / y.len() as f64
            }
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Entries of every `A` and `B`; identical across variants.
    pub adapter: usize,
    pub gates: usize,
    pub coordinator: usize,
}

/// Per-step cost accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// Mean forward flops per training step, by purpose.
    pub per_step: FlopBreakdown,
    /// Extra training flops relative to the base forward, in percent.
    pub extra_cost_pct: f64,
    /// Flops of the merged network on a single input.
    pub inference_flops_per_sample: u64,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub final_task_score: f64,
    pub final_task_loss: f64,
    pub final_energy: f64,
    pub final_cos_adj: Option<f64>,
    /// Step index of each logged row.
    pub steps: Vec<usize>,
    /// Full training-set task loss through the merged network.
    pub task_loss_trace: Vec<f64>,
    pub energy_trace: Vec<f64>,
    /// `None` where every adjacent pair had a zero update.
    pub cos_adj_trace: Vec<Option<f64>>,
    pub params: ParamCounts,
    pub overhead: Overhead,
    pub graph_edges: usize,
    pub warnings: Vec<String>,
    pub wall_time_secs: f64,
}

impl RunResult {
    /// Metric CSV rows: `step,variant,seed,task_loss,energy,cos_adj`.
    pub fn csv_rows(&self) -> Vec<String> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                format!(
                    "{s},{},{},{},{},{}",
                    self.config.variant,
                    self.config.seed,
                    self.task_loss_trace[i],
                    self.energy_trace[i],
                    self.cos_adj_trace[i]
                        .map(|c| c.to_string())
                        .unwrap_or_default()
                )
            })
            .collect()
    }

    /// Everything except wall time, for determinism comparisons.
    pub fn same_traces(&self, other: &RunResult) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let obits = |v: &[Option<f64>]| v.iter().map(|x| x.map(f64::to_bits)).collect::<Vec<_>>();
        self.steps == other.steps
            && bits(&self.task_loss_trace) == bits(&other.task_loss_trace)
            && bits(&self.energy_trace) == bits(&other.energy_trace)
            && obits(&self.cos_adj_trace) == obits(&other.cos_adj_trace)
            && self.final_task_score.to_bits() == other.final_task_score.to_bits()
    }
}

pub const CSV_HEADER: &str = "step,variant,seed,task_loss,energy,cos_adj";

/// Final network state and the result summary.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub network: Network,
    pub task: ToyTask,
    pub result: RunResult,
}

struct Momentum {
    velocity: Vec<Vec<f64>>,
    beta: f64,
    lr: f64,
}

impl Momentum {
    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Matrix]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.beta * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

fn collect_grads(rec: &Recorded, grads: &Gradients) -> Vec<Matrix> {
    let mut vars = Vec::new();
    for a in &rec.adapters {
        vars.push(a.a);
        vars.push(a.b);
    }
    vars.extend(rec.mu.iter().copied());
    if let Some(c) = &rec.coordinator {
        vars.extend(c.theta.iter().copied());
        vars.push(c.w_out);
    }
    vars.iter()
        .map(|v| {
            grads
                .get(*v)
                .cloned()
                .expect("trainable leaf has a gradient")
        })
        .collect()
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            reason: format!("non-finite value from {op}"),
        },
        other => other,
    }
}

/// Trains one configuration from scratch. Deterministic in `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    train(cfg).map(|t| t.result)
}

/// Like [`run_experiment`] but also returns the trained network.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let started = Instant::now();
    let task = ToyTask::generate(cfg, &mut rng_stream(cfg.seed, STREAM_DATA));
    let mut net = Network::new(cfg, &task)?;
    let weights = cfg.active_weights();
    let mut batch_rng = rng_stream(cfg.seed, STREAM_BATCHES);
    let mut gate_rng = rng_stream(cfg.seed, STREAM_GATES);
    let mut opt = Momentum {
        velocity: Vec::new(),
        beta: cfg.momentum,
        lr: cfg.eta_lr,
    };

    let mut steps_logged = Vec::new();
    let mut loss_trace = Vec::new();
    let mut energy_trace = Vec::new();
    let mut cos_trace = Vec::new();
    let mut log = |net: &Network, step: usize| -> Result<()> {
        let merged = net.merged().map_err(diverged(step))?;
        let loss = merged.task_loss(&task.train_x, &task.train_y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "task loss is not finite".into(),
            });
        }
        let stack = net.update_stack().map_err(diverged(step))?;
        steps_logged.push(step);
        loss_trace.push(loss);
        energy_trace.push(laplacian_penalty(&stack));
        cos_trace.push(cos_adj(&stack).ok().map(|m| m.cos_adj));
        Ok(())
    };

    let chain = LayerGraph::chain(cfg.layers)?;
    let rebuild_every = cfg.rebuild_interval();
    let mut last_update_grads: Option<Vec<Vec<f64>>> = None;
    let mut warnings = Vec::new();
    let mut flop_total = FlopBreakdown::default();
    let mut order: Vec<usize> = (0..task.n_train()).collect();
    let mut cursor = order.len();

    log(&net, 0)?;
    for step in 0..cfg.steps {
        if net.coordinator.is_some() && step > 0 && step % rebuild_every == 0 {
            if let Some(grads) = &last_update_grads {
                let g = chain.add_semantic_edges(grads, cfg.cos_threshold)?;
                warnings.extend(g.warnings.iter().map(|w| format!("step {step}: {w}")));
                net.graph = g;
            }
        }

        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += cfg.batch_size;
        let x = select_columns(&task.train_x, idx);
        let y = select_columns(&task.train_y, idx);
        let noise: Vec<GateNoise> = net
            .gates
            .iter()
            .map(|g| g.draw_noise(&mut gate_rng))
            .collect();

        let tape = Tape::new();
        let rec = net
            .record(&tape, &weights, &x, &y, Some(&noise), true)
            .map_err(diverged(step))?;
        let total = tape.scalar(rec.total)?;
        if !total.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "loss is not finite".into(),
            });
        }
        let grads = tape.backward(rec.total)?;
        flop_total.add(&rec.flops);
        if net.coordinator.is_some() {
            last_update_grads = Some(
                rec.filtered
                    .iter()
                    .map(|f| grads.get(*f).map(|g| g.data().to_vec()).unwrap_or_default())
                    .collect(),
            );
        }
        let g = collect_grads(&rec, &grads);
        if g.iter().any(|m| !m.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        opt.step(net.params_mut(), &g);

        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps {
            log(&net, done)?;
        }
    }

    let merged = net.merged()?;
    let final_task_score = merged.task_score(&task.test_x, &task.test_y)?;
    let final_task_loss = merged.task_loss(&task.test_x, &task.test_y)?;
    let (_, inference_flops) = merged.forward(&Matrix::zeros(cfg.k, 1))?;
    let steps_run = cfg.steps.max(1) as u64;
    let per_step = FlopBreakdown {
        base: flop_total.base / steps_run,
        gating: flop_total.gating / steps_run,
        coordination: flop_total.coordination / steps_run,
        penalty: flop_total.penalty / steps_run,
    };
    let extra_cost_pct = if per_step.base > 0 {
        100.0 * per_step.extra() as f64 / per_step.base as f64
    } else {
        0.0
    };

    let result = RunResult {
        config: cfg.clone(),
        final_task_score,
        final_task_loss,
        final_energy: *energy_trace.last().expect("initial row logged"),
        final_cos_adj: *cos_trace.last().expect("initial row logged"),
        steps: steps_logged,
        task_loss_trace: loss_trace,
        energy_trace,
        cos_adj_trace: cos_trace,
        params: net.trainable_counts(),
        overhead: Overhead {
            per_step,
            extra_cost_pct,
            inference_flops_per_sample: inference_flops,
        },
        graph_edges: net.graph.edge_count(),
        warnings,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        network: net,
        task,
        result,
    })
}

/// Evaluates a trained network through merged weights only.
pub fn inference_path(merged: &MergedNetwork, x: &Matrix) -> Result<Matrix> {
    merged.forward(x).map(|(y, _)| y)
}

/// Versioned JSON checkpoint of a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub network: Network,
    /// Deterministic gate values per layer at save time.
    pub gates: Vec<Vec<f64>>,
    /// Updates folded into the base weights for inference.
    pub final_updates: Vec<Matrix>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn capture(cfg: &ExperimentConfig, net: &Network) -> Result<Self> {
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            network: net.clone(),
            gates: net.deterministic_gates(),
            final_updates: net
                .current_updates()?
                .into_iter()
                .map(|u| u.delta)
                .collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}
