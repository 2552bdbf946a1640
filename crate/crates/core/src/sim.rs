//! Federated round engine: client behaviors, stale-upload buffering,
//! weighted aggregation, per-round contribution logging, and the
//! pretraining exit phase.
//!
//! One round broadcasts the current parameters, lets every client that
//! delivers this round take one full-batch step on its penalized objective,
//! and aggregates the per-client upload buffers weighted by data volume.
//! Clients that do not deliver keep their previous buffer, so the server
//! always aggregates one (possibly stale) upload per client.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::eval::{evaluate, FinalEval};
use crate::model::{risk_and_grad, risk_hvp, ModelSpec, Sample};
use crate::params::ParamVec;
use crate::penalty::{self, PenaltyConfig};
use crate::rng::{normal, substream};
use crate::theory;

/// How a client behaves on the wire. Delivery failures are simulated on the
/// server side; the affected client's buffered upload is reused instead.
#[derive(Clone, Debug, PartialEq)]
pub enum Behavior {
    /// Delivers a fresh upload every round.
    Normal,
    /// Delivers only on rounds divisible by `period`.
    SlowCompute { period: usize },
    /// Delivers with probability `success_prob` each round, drawn from the
    /// client's delivery stream.
    LossyLink { success_prob: f64 },
    /// Delivers like `Normal`; the client's data comes from an environment
    /// rotated by this angle. The rotation itself is applied when the
    /// cohort is assembled, not by the engine.
    HeterogeneousEnv { rotation_deg: f64 },
}

#[derive(Clone, Debug)]
pub struct ClientSpec {
    pub id: usize,
    /// Sample count n_i used for aggregation weights.
    pub weight_n: usize,
    pub behavior: Behavior,
}

impl ClientSpec {
    pub fn new(id: usize, weight_n: usize, behavior: Behavior) -> Result<ClientSpec> {
        let spec = ClientSpec {
            id,
            weight_n,
            behavior,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_n == 0 {
            return Err(CoreError::Domain(format!(
                "client {} has weight_n 0; need at least one sample",
                self.id
            )));
        }
        match self.behavior {
            Behavior::SlowCompute { period } if period == 0 => Err(CoreError::Domain(format!(
                "client {}: slow-compute period must be at least 1",
                self.id
            ))),
            Behavior::LossyLink { success_prob } if !(0.0..=1.0).contains(&success_prob) => {
                Err(CoreError::Domain(format!(
                    "client {}: delivery probability {success_prob} outside [0, 1]",
                    self.id
                )))
            }
            Behavior::HeterogeneousEnv { rotation_deg } if !rotation_deg.is_finite() => {
                Err(CoreError::Domain(format!(
                    "client {}: rotation must be finite",
                    self.id
                )))
            }
            _ => Ok(()),
        }
    }
}

/// One client's spec plus its local datasets.
#[derive(Clone, Debug)]
pub struct Client {
    pub spec: ClientSpec,
    pub train: Vec<Sample>,
    pub id_test: Vec<Sample>,
}

/// The full client population plus the held-out OOD test set.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub clients: Vec<Client>,
    pub ood_test: Vec<Sample>,
}

/// Initial parameter choice.
#[derive(Clone, Debug)]
pub enum InitScheme {
    Zeros,
    /// Weights `N(0, (scale / sqrt(fan_in))^2)` per layer, biases zero,
    /// drawn from the `init` stream of the run seed.
    ScaledNormal { scale: f64 },
    Explicit(ParamVec),
}

/// Draws initial parameters for a model under the given scheme.
pub fn init_params(spec: &ModelSpec, scheme: &InitScheme, seed: u64) -> Result<ParamVec> {
    let d = spec.d_model();
    match scheme {
        InitScheme::Zeros => Ok(ParamVec::zeros(d)),
        InitScheme::ScaledNormal { scale } => {
            if !(scale.is_finite() && *scale >= 0.0) {
                return Err(CoreError::Domain(format!(
                    "init scale must be finite and nonnegative, got {scale}"
                )));
            }
            let mut rng = substream(seed, "init");
            let mut out = vec![0.0; d];
            for layer in spec.arch.layers() {
                let sd = scale / (layer.in_dim as f64).sqrt();
                for slot in &mut out[layer.w_off..layer.w_off + layer.in_dim * layer.out_dim] {
                    *slot = sd * normal(&mut rng);
                }
            }
            Ok(ParamVec::new(out)?)
        }
        InitScheme::Explicit(p) => {
            if p.len() != d {
                return Err(CoreError::DimensionMismatch(format!(
                    "explicit init has {} entries, model needs {d}",
                    p.len()
                )));
            }
            Ok(p.clone())
        }
    }
}

/// Pretraining phase: probe rounds and the exit threshold.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub probe_rounds: usize,
    pub epsilon_exit: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            probe_rounds: 10,
            epsilon_exit: 0.0,
        }
    }
}

/// Everything the engine needs besides the cohort.
#[derive(Clone, Debug)]
pub struct FedConfig {
    pub model: ModelSpec,
    pub eta: f64,
    pub penalty: PenaltyConfig,
    /// Number of main training rounds T.
    pub rounds: usize,
    /// Evaluate ID/OOD metrics every this many rounds (plus round 0 and T).
    pub eval_every: usize,
    pub pretrain: Option<PretrainConfig>,
    /// Smoothness constant used in the logged contribution metric.
    pub contribution_l: f64,
    pub init: InitScheme,
    pub seed: u64,
    /// Keep a parameter snapshot every this many rounds.
    pub checkpoint_every: Option<usize>,
    /// Worker threads for per-client computation; results are identical for
    /// any value.
    pub threads: usize,
}

impl FedConfig {
    pub fn new(model: ModelSpec, eta: f64, rounds: usize) -> FedConfig {
        FedConfig {
            model,
            eta,
            penalty: PenaltyConfig::off(),
            rounds,
            eval_every: 10,
            pretrain: None,
            contribution_l: 1.0,
            init: InitScheme::ScaledNormal { scale: 0.1 },
            seed: 0,
            checkpoint_every: None,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(CoreError::Domain(format!(
                "learning rate must be positive and finite, got {}",
                self.eta
            )));
        }
        if self.eval_every == 0 {
            return Err(CoreError::Domain("eval_every must be at least 1".into()));
        }
        if !(self.contribution_l.is_finite() && self.contribution_l >= 0.0) {
            return Err(CoreError::Domain(format!(
                "contribution smoothness constant must be finite and nonnegative, got {}",
                self.contribution_l
            )));
        }
        if let Some(pc) = &self.pretrain {
            if pc.probe_rounds == 0 {
                return Err(CoreError::Domain("probe_rounds must be at least 1".into()));
            }
            if !pc.epsilon_exit.is_finite() {
                return Err(CoreError::Domain("epsilon_exit must be finite".into()));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(CoreError::Domain(
                "checkpoint_every must be at least 1 when set".into(),
            ));
        }
        if self.threads == 0 {
            return Err(CoreError::Domain("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// One client's slice of a round record.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRound {
    pub id: usize,
    pub participated: bool,
    /// Rounds since this client's last delivery, counted at round entry.
    pub staleness: usize,
    /// Empirical contribution; NaN when the global gradient was degenerate.
    pub contribution_hat: f64,
    /// Local risk at the broadcast parameters the round started from.
    pub local_loss: f64,
    /// Invariant penalty at the same broadcast parameters.
    pub local_penalty: f64,
}

/// Everything logged for one round. Global loss and penalty describe the
/// broadcast state the clients stepped from; accuracies are filled on
/// evaluation rounds from the post-aggregation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub t: usize,
    pub global_loss: f64,
    pub global_penalty_mean: f64,
    pub per_client: Vec<ClientRound>,
    pub id_acc: Option<f64>,
    pub ood_acc: Option<f64>,
}

/// One summary line: metrics of the aggregated parameters after round `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub t: usize,
    pub global_loss: f64,
    pub global_penalty_mean: f64,
    /// Pooled accuracy over active clients' ID-test samples; NaN when empty.
    pub id_acc: f64,
    /// Accuracy on the held-out environment; NaN when empty.
    pub ood_acc: f64,
}

/// Result of the pretraining phase.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PretrainOutcome {
    /// Mean probe contribution per client, ascending id.
    pub scores: Vec<(usize, f64)>,
    pub selected: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// Full output of [`Sim::run_experiment`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub pretrain: Option<PretrainOutcome>,
    pub records: Vec<RoundRecord>,
    pub summaries: Vec<SummaryRow>,
    /// Broadcast parameters w^0 ..= w^T of the main phase.
    pub trajectory: Vec<ParamVec>,
    pub final_params: ParamVec,
    pub final_eval: FinalEval,
    pub checkpoints: Vec<(usize, ParamVec)>,
}

/// One gradient step on the penalized local objective:
/// `w - eta * (g + 2 lambda <g, w> (g + H w))`.
///
/// `round` and `client` only label numerical errors.
pub fn local_step(
    params: &ParamVec,
    spec: &ModelSpec,
    data: &[Sample],
    eta: f64,
    penalty_cfg: &PenaltyConfig,
    round: usize,
    client: usize,
) -> Result<ParamVec> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(CoreError::Domain(format!(
            "learning rate must be positive and finite, got {eta}"
        )));
    }
    let grad = penalty::local_objective_grad(params, spec, data, penalty_cfg)?;
    if !grad.is_finite() {
        return Err(CoreError::Numerical {
            round,
            client,
            detail: "non-finite objective gradient".into(),
        });
    }
    let next = params.axpy(-eta, &grad);
    if !next.is_finite() {
        return Err(CoreError::Numerical {
            round,
            client,
            detail: "non-finite parameters after step".into(),
        });
    }
    Ok(next)
}

/// Weighted average of uploads. Weights must be positive and sum to 1
/// within 1e-12; summation runs in the given order, which callers fix to
/// ascending client id.
pub fn aggregate(uploads: &[(ParamVec, f64)]) -> Result<ParamVec> {
    let (first, _) = uploads
        .first()
        .ok_or_else(|| CoreError::Contract("nothing to aggregate".into()))?;
    let d = first.len();
    let mut sum = 0.0;
    for (p, w) in uploads {
        if p.len() != d {
            return Err(CoreError::Contract(format!(
                "aggregation mixes dimensions {d} and {}",
                p.len()
            )));
        }
        if !(w.is_finite() && *w > 0.0) {
            return Err(CoreError::Contract(format!(
                "aggregation weight {w} is not positive"
            )));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(CoreError::Contract(format!(
            "aggregation weights sum to {sum}, not 1"
        )));
    }
    let mut out = vec![0.0; d];
    for (p, w) in uploads {
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    Ok(ParamVec::from_raw(out))
}

/// Per-client upload buffer held by the server.
#[derive(Clone, Debug)]
struct Buffer {
    upload: ParamVec,
    /// Risk gradient at the broadcast the buffered upload was computed
    /// from; pairs with the upload in the contribution metric.
    risk_grad: ParamVec,
    /// Rounds since the buffer was last refreshed, logged at round entry.
    counter: usize,
}

/// Output of one client's round computation.
struct Computed {
    risk: f64,
    grad: ParamVec,
    penalty: f64,
    upload: Option<ParamVec>,
}

fn compute_one(
    client: &Client,
    params: &ParamVec,
    fresh: bool,
    cfg: &FedConfig,
    t: usize,
) -> Result<Computed> {
    let id = client.spec.id;
    let (risk, grad) = risk_and_grad(params, &cfg.model, &client.train)?;
    if !(risk.is_finite() && grad.is_finite()) {
        return Err(CoreError::Numerical {
            round: t,
            client: id,
            detail: "non-finite local risk or gradient".into(),
        });
    }
    let pen = penalty::penalty(params, &grad)?;
    let upload = if fresh {
        let obj_grad = if cfg.penalty.lambda == 0.0 {
            grad.clone()
        } else {
            let hw = risk_hvp(params, &cfg.model, &client.train, params)?;
            penalty::penalized_grad(params, &grad, &hw, cfg.penalty.lambda)
        };
        if !obj_grad.is_finite() {
            return Err(CoreError::Numerical {
                round: t,
                client: id,
                detail: "non-finite objective gradient".into(),
            });
        }
        let next = params.axpy(-cfg.eta, &obj_grad);
        if !next.is_finite() {
            return Err(CoreError::Numerical {
                round: t,
                client: id,
                detail: "non-finite parameters after step".into(),
            });
        }
        Some(next)
    } else {
        None
    };
    Ok(Computed {
        risk,
        grad,
        penalty: pen,
        upload,
    })
}

/// Runs every client's pure round computation, optionally across threads.
/// Clients are chunked contiguously and results are reassembled in id
/// order, so the output is identical for any thread count.
fn compute_clients(
    clients: &[Client],
    params: &ParamVec,
    fresh: &[bool],
    cfg: &FedConfig,
    t: usize,
) -> Result<Vec<Computed>> {
    let workers = cfg.threads.min(clients.len()).max(1);
    if workers == 1 {
        return clients
            .iter()
            .zip(fresh)
            .map(|(c, &f)| compute_one(c, params, f, cfg, t))
            .collect();
    }
    let chunk_len = clients.len().div_ceil(workers);
    let results: Vec<Result<Vec<Computed>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .chunks(chunk_len)
            .zip(fresh.chunks(chunk_len))
            .map(|(cs, fs)| {
                scope.spawn(move || {
                    cs.iter()
                        .zip(fs)
                        .map(|(c, &f)| compute_one(c, params, f, cfg, t))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut out = Vec::with_capacity(clients.len());
    for chunk in results {
        out.extend(chunk?);
    }
    Ok(out)
}

fn exit_selection(scores: &[(usize, f64)], epsilon: f64) -> (Vec<usize>, Vec<usize>) {
    let mut selected = Vec::new();
    let mut excluded = Vec::new();
    for &(id, score) in scores {
        if score > epsilon {
            selected.push(id);
        } else {
            excluded.push(id);
        }
    }
    (selected, excluded)
}

/// The live state of a federated run.
pub struct Sim {
    cfg: FedConfig,
    clients: Vec<Client>,
    excluded: Vec<Client>,
    ood_test: Vec<Sample>,
    n_total: f64,
    weights: Vec<f64>,
    params: ParamVec,
    buffers: Vec<Buffer>,
    delivery: Vec<ChaCha8Rng>,
    t: usize,
}

impl Sim {
    /// Validates the cohort and config, initializes parameters, and builds
    /// every client's initial upload buffer (one step from the initial
    /// parameters, so aggregation always has an upload per client).
    pub fn new(cohort: Cohort, cfg: FedConfig) -> Result<Sim> {
        cfg.validate()?;
        let mut clients = cohort.clients;
        if clients.is_empty() {
            return Err(CoreError::Contract("cohort has no clients".into()));
        }
        clients.sort_by_key(|c| c.spec.id);
        for pair in clients.windows(2) {
            if pair[0].spec.id == pair[1].spec.id {
                return Err(CoreError::Contract(format!(
                    "duplicate client id {}",
                    pair[0].spec.id
                )));
            }
        }
        for c in &clients {
            c.spec.validate()?;
            if c.train.is_empty() {
                return Err(CoreError::EmptyDataset(format!(
                    "client {} has no training samples",
                    c.spec.id
                )));
            }
        }
        let mut sim = Sim {
            cfg,
            clients,
            excluded: Vec::new(),
            ood_test: cohort.ood_test,
            n_total: 0.0,
            weights: Vec::new(),
            params: ParamVec::zeros(0),
            buffers: Vec::new(),
            delivery: Vec::new(),
            t: 0,
        };
        sim.start_phase("delivery")?;
        Ok(sim)
    }

    /// Resets to round 0: fresh initial parameters, fresh delivery streams
    /// under `stream_prefix`, weights renormalized over the current
    /// clients, and initial buffers recomputed.
    fn start_phase(&mut self, stream_prefix: &str) -> Result<()> {
        self.n_total = self.clients.iter().map(|c| c.spec.weight_n as f64).sum();
        self.weights = self
            .clients
            .iter()
            .map(|c| c.spec.weight_n as f64 / self.n_total)
            .collect();
        self.params = init_params(&self.cfg.model, &self.cfg.init, self.cfg.seed)?;
        self.delivery = self
            .clients
            .iter()
            .map(|c| {
                substream(
                    self.cfg.seed,
                    &format!("{stream_prefix}/{}", c.spec.id),
                )
            })
            .collect();
        let all_fresh = vec![true; self.clients.len()];
        let computed = compute_clients(&self.clients, &self.params, &all_fresh, &self.cfg, 0)?;
        self.buffers = computed
            .into_iter()
            .map(|c| Buffer {
                upload: c.upload.expect("fresh computation always yields an upload"),
                risk_grad: c.grad,
                counter: 0,
            })
            .collect();
        self.t = 0;
        Ok(())
    }

    pub fn params(&self) -> &ParamVec {
        &self.params
    }

    pub fn round(&self) -> usize {
        self.t
    }

    pub fn active_ids(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.spec.id).collect()
    }

    /// Advances the simulation one round and returns its record.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.t + 1;
        let rec = self.round_internal(t)?;
        self.t = t;
        Ok(rec)
    }

    fn round_internal(&mut self, t: usize) -> Result<RoundRecord> {
        let m = self.clients.len();
        // Delivery decisions on the coordinator, ascending client id.
        let fresh: Vec<bool> = self
            .clients
            .iter()
            .zip(self.delivery.iter_mut())
            .map(|(c, rng)| match c.spec.behavior {
                Behavior::Normal | Behavior::HeterogeneousEnv { .. } => true,
                Behavior::SlowCompute { period } => t % period == 0,
                Behavior::LossyLink { success_prob } => rng.gen_bool(success_prob),
            })
            .collect();
        let computed = compute_clients(&self.clients, &self.params, &fresh, &self.cfg, t)?;

        // Global risk gradient at the broadcast, weighted by data volume.
        let d = self.params.len();
        let mut gsum = vec![0.0; d];
        for (w, c) in self.weights.iter().zip(&computed) {
            for (g, v) in gsum.iter_mut().zip(c.grad.iter()) {
                *g += w * v;
            }
        }
        let global_grad = ParamVec::from_raw(gsum);

        let mut per_client = Vec::with_capacity(m);
        let mut global_loss = 0.0;
        let mut pen_sum = 0.0;
        for (i, comp) in computed.into_iter().enumerate() {
            let spec = &self.clients[i].spec;
            let staleness = self.buffers[i].counter;
            if fresh[i] {
                self.buffers[i] = Buffer {
                    upload: comp.upload.expect("fresh computation always yields an upload"),
                    risk_grad: comp.grad.clone(),
                    counter: 0,
                };
            } else {
                self.buffers[i].counter += 1;
            }
            let contribution = match theory::contribution(
                &global_grad,
                &self.buffers[i].risk_grad,
                self.cfg.eta,
                spec.weight_n as f64,
                self.n_total,
                self.cfg.contribution_l,
            ) {
                Ok(v) => v,
                Err(CoreError::DegenerateGradient { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            global_loss += self.weights[i] * comp.risk;
            pen_sum += comp.penalty;
            per_client.push(ClientRound {
                id: spec.id,
                participated: fresh[i],
                staleness,
                contribution_hat: contribution,
                local_loss: comp.risk,
                local_penalty: comp.penalty,
            });
        }

        let uploads: Vec<(ParamVec, f64)> = self
            .buffers
            .iter()
            .zip(&self.weights)
            .map(|(b, &w)| (b.upload.clone(), w))
            .collect();
        self.params = aggregate(&uploads)?;

        Ok(RoundRecord {
            t,
            global_loss,
            global_penalty_mean: pen_sum / m as f64,
            per_client,
            id_acc: None,
            ood_acc: None,
        })
    }

    /// Evaluates the current parameters: weighted global loss, mean
    /// penalty, pooled ID-test accuracy, and OOD accuracy.
    pub fn summary_now(&self) -> Result<SummaryRow> {
        let mut global_loss = 0.0;
        let mut pen_sum = 0.0;
        let mut pooled: Vec<Sample> = Vec::new();
        for (c, &w) in self.clients.iter().zip(&self.weights) {
            let (risk, grad) = risk_and_grad(&self.params, &self.cfg.model, &c.train)?;
            global_loss += w * risk;
            pen_sum += penalty::penalty(&self.params, &grad)?;
            pooled.extend(c.id_test.iter().cloned());
        }
        let id_acc = if pooled.is_empty() {
            f64::NAN
        } else {
            evaluate(&self.params, &self.cfg.model, &pooled)?.accuracy
        };
        let ood_acc = if self.ood_test.is_empty() {
            f64::NAN
        } else {
            evaluate(&self.params, &self.cfg.model, &self.ood_test)?.accuracy
        };
        Ok(SummaryRow {
            t: self.t,
            global_loss,
            global_penalty_mean: pen_sum / self.clients.len() as f64,
            id_acc,
            ood_acc,
        })
    }

    /// Runs the probe rounds, drops every client whose mean contribution
    /// is at or below the exit threshold, and resets the engine to a fresh
    /// round 0 for the survivors.
    ///
    /// Probe rounds draw delivery events from separate `probe-delivery`
    /// streams and do not advance the main schedule; the main phase is
    /// bit-identical whether or not pretraining ran. Clients whose probe
    /// contributions were all degenerate score NaN and are excluded.
    pub fn pretrain_and_exit(&mut self) -> Result<PretrainOutcome> {
        if self.t != 0 {
            return Err(CoreError::Contract(
                "pretraining must run before the first main round".into(),
            ));
        }
        let pc = self.cfg.pretrain.clone().ok_or_else(|| {
            CoreError::Contract("pretraining is not configured for this run".into())
        })?;
        self.start_phase("probe-delivery")?;
        let m = self.clients.len();
        let mut sums = vec![0.0; m];
        for k in 1..=pc.probe_rounds {
            let rec = self.round_internal(k)?;
            for (s, cr) in sums.iter_mut().zip(&rec.per_client) {
                *s += cr.contribution_hat;
            }
        }
        let scores: Vec<(usize, f64)> = self
            .clients
            .iter()
            .zip(&sums)
            .map(|(c, s)| (c.spec.id, s / pc.probe_rounds as f64))
            .collect();
        let (selected, excluded) = exit_selection(&scores, pc.epsilon_exit);
        if selected.is_empty() {
            return Err(CoreError::EmptyCohort {
                threshold: pc.epsilon_exit,
            });
        }
        let (kept, dropped): (Vec<Client>, Vec<Client>) = std::mem::take(&mut self.clients)
            .into_iter()
            .partition(|c| selected.contains(&c.spec.id));
        self.clients = kept;
        self.excluded.extend(dropped);
        self.start_phase("delivery")?;
        Ok(PretrainOutcome {
            scores,
            selected,
            excluded,
        })
    }

    fn final_eval(&self) -> Result<FinalEval> {
        let acc_of = |data: &[Sample]| -> Result<f64> {
            if data.is_empty() {
                Ok(f64::NAN)
            } else {
                Ok(evaluate(&self.params, &self.cfg.model, data)?.accuracy)
            }
        };
        let mut per_client_id_acc = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            per_client_id_acc.push(acc_of(&c.id_test)?);
        }
        let mut exited = self.excluded.iter().collect::<Vec<_>>();
        exited.sort_by_key(|c| c.spec.id);
        let mut exited_client_acc = Vec::with_capacity(exited.len());
        for c in exited {
            exited_client_acc.push(acc_of(&c.id_test)?);
        }
        Ok(FinalEval {
            per_client_id_acc,
            ood_acc: acc_of(&self.ood_test)?,
            exited_client_acc,
        })
    }

    /// Executes a full experiment: optional pretraining exit, T main
    /// rounds with periodic evaluation and checkpoints, and the final
    /// evaluation covering exited clients.
    pub fn run_experiment(cohort: Cohort, cfg: FedConfig) -> Result<RunArtifacts> {
        let rounds = cfg.rounds;
        let eval_every = cfg.eval_every;
        let checkpoint_every = cfg.checkpoint_every;
        let with_pretrain = cfg.pretrain.is_some();
        let mut sim = Sim::new(cohort, cfg)?;
        let pretrain = if with_pretrain {
            Some(sim.pretrain_and_exit()?)
        } else {
            None
        };
        let mut records = Vec::with_capacity(rounds);
        let mut summaries = vec![sim.summary_now()?];
        let mut trajectory = vec![sim.params.clone()];
        let mut checkpoints = Vec::new();
        for t in 1..=rounds {
            let mut rec = sim.run_round()?;
            trajectory.push(sim.params.clone());
            if t % eval_every == 0 || t == rounds {
                let row = sim.summary_now()?;
                rec.id_acc = Some(row.id_acc);
                rec.ood_acc = Some(row.ood_acc);
                summaries.push(row);
            }
            if checkpoint_every.is_some_and(|k| t % k == 0) {
                checkpoints.push((t, sim.params.clone()));
            }
            records.push(rec);
        }
        let final_eval = sim.final_eval()?;
        Ok(RunArtifacts {
            pretrain,
            records,
            summaries,
            trajectory,
            final_params: sim.params.clone(),
            final_eval,
            checkpoints,
        })
    }
}
