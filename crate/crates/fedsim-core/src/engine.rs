//! Federation engine: client selection, parallel local updates, ordered
//! aggregation, and per-round metrics.
//!
//! Determinism contract: every random draw comes from a named substream of
//! the run seed, client work is collected in ascending-id order before any
//! reduction, and evaluation is a pure function of (server, client states).
//! A run's outputs are therefore byte-identical across repeats and worker
//! counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FederatedDataset;
use crate::error::{FedError, Result};
use crate::model::{self, init_params};
use crate::param::{weighted_average, ParamVector};
use crate::rng::substream;
use crate::strategies::fairness::adaptive_sampling_probs;
use crate::strategies::{
    AggCtx, BatchSize, ClientCtx, ClientState, EvalCtx, EvalModel, InitCtx, RoundCtx, ServerState,
    Strategy, Uplink,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Local epochs: one count for everyone or one per client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpochSpec {
    Same(usize),
    PerClient(Vec<usize>),
}

impl EpochSpec {
    pub fn for_client(&self, i: usize) -> usize {
        match self {
            EpochSpec::Same(e) => *e,
            EpochSpec::PerClient(v) => v[i],
        }
    }

    fn validate(&self, n_clients: usize) -> Result<()> {
        match self {
            EpochSpec::Same(e) if *e >= 1 => Ok(()),
            EpochSpec::Same(_) => Err(FedError::config("engine.local_epochs: must be at least 1")),
            EpochSpec::PerClient(v) => {
                if v.len() != n_clients {
                    return Err(FedError::config(format!(
                        "engine.local_epochs: expected {n_clients} entries, got {}",
                        v.len()
                    )));
                }
                if v.iter().any(|&e| e == 0) {
                    return Err(FedError::config("engine.local_epochs: entries must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

/// How selection probabilities are formed each round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingScheme {
    Uniform,
    Size,
    /// `softmax(gamma * ||grad F_i(w_t)||^2)`; uniform on the first round.
    GradNorm { gamma: f64 },
    /// `softmax(gamma * F_i(w_t))`; uniform on the first round.
    Loss { gamma: f64 },
}

/// Aggregation weights handed to strategies. `Auto` undoes the sampling
/// bias: data-size weights under uniform selection, equal weights under
/// size-proportional selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Auto,
    Size,
    Equal,
}

#[derive(Debug, Clone)]
pub struct EngineParams {
    pub rounds: usize,
    pub local_epochs: EpochSpec,
    pub batch_size: BatchSize,
    pub lr_local: f64,
    pub lr_server: f64,
    pub sample_fraction: f64,
    pub sampling: SamplingScheme,
    pub weighting: Weighting,
    pub seed: u64,
    /// Explicit initial parameters; `None` draws them from the seed.
    pub init_values: Option<Vec<f64>>,
    /// Stop once the mean test loss reaches this value.
    pub target_loss: Option<f64>,
    /// Worker threads; 0 uses the default pool size.
    pub workers: usize,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            rounds: 1,
            local_epochs: EpochSpec::Same(1),
            batch_size: BatchSize::Full,
            lr_local: 0.1,
            lr_server: 1.0,
            sample_fraction: 1.0,
            sampling: SamplingScheme::Uniform,
            weighting: Weighting::Auto,
            seed: 0,
            init_values: None,
            target_loss: None,
            workers: 0,
        }
    }
}

/// One round of observable outputs. Per-client vectors are indexed by
/// client id and cover every client, participant or not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema_version: u32,
    pub round: usize,
    pub selected: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<Vec<f64>>,
    /// Population variance of the per-client test losses.
    pub loss_variance: f64,
    pub floats_up: u64,
    pub floats_down: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<f64>>,
    /// Wall-clock time; excluded from serialization so that outputs stay
    /// byte-identical across machines and repeats.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub records: Vec<RoundRecord>,
    /// Set when a target loss stopped the run early.
    pub stopped_early: bool,
}

/// Population variance (divides by n, not n - 1).
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Draws `k` distinct clients without replacement from `probs` and returns
/// them in ascending order. Probabilities renormalize after each draw.
pub fn select_clients(probs: &[f64], k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut remaining: Vec<usize> = (0..probs.len()).collect();
    let mut weights: Vec<f64> = probs.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k.min(probs.len()) {
        let total: f64 = weights.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = remaining.len() - 1;
        for (pos, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = pos;
                break;
            }
        }
        picked.push(remaining.remove(chosen));
        weights.remove(chosen);
    }
    picked.sort_unstable();
    picked
}

fn validate(dataset: &FederatedDataset, strategy: &dyn Strategy, params: &EngineParams) -> Result<()> {
    dataset.validate()?;
    let n = dataset.n_clients();
    if params.rounds == 0 {
        return Err(FedError::config("engine.rounds: must be at least 1"));
    }
    if !(params.sample_fraction > 0.0 && params.sample_fraction <= 1.0) {
        return Err(FedError::config("engine.sample_fraction: must lie in (0, 1]"));
    }
    params.local_epochs.validate(n)?;
    if let BatchSize::Size(0) = params.batch_size {
        return Err(FedError::config("engine.batch_size: must be at least 1"));
    }
    if !(params.lr_local > 0.0 && params.lr_local.is_finite()) {
        return Err(FedError::config("engine.lr_local: must be positive"));
    }
    if !(params.lr_server > 0.0 && params.lr_server.is_finite()) {
        return Err(FedError::config("engine.lr_server: must be positive"));
    }
    let k = (params.sample_fraction * n as f64).ceil() as usize;
    if strategy.requires_full_participation() && k < n {
        return Err(FedError::config(format!(
            "engine.sample_fraction: strategy {:?} requires full participation",
            strategy.name()
        )));
    }
    if let Some(init) = &params.init_values {
        let dim = dataset.model.layout().dim();
        if init.len() != dim {
            return Err(FedError::config(format!(
                "engine.init_values: expected {dim} entries, got {}",
                init.len()
            )));
        }
    }
    Ok(())
}

/// Per-client stat vector for adaptive sampling at the current global.
fn sampling_stats(
    dataset: &FederatedDataset,
    server: &ServerState,
    grad_norm: bool,
) -> Result<Vec<Option<f64>>> {
    dataset
        .clients
        .par_iter()
        .map(|c| {
            let idx = c.train.all_indices();
            let stat = if grad_norm {
                let g = model::gradient(&dataset.model, &server.global, &c.train, &idx)?;
                let n = g.norm();
                n * n
            } else {
                model::loss(&dataset.model, &server.global, &c.train, &idx)?
            };
            Ok(Some(stat))
        })
        .collect()
}

struct EvalRow {
    train_loss: f64,
    test_loss: f64,
    train_acc: Option<f64>,
    test_acc: Option<f64>,
}

fn eval_all(
    dataset: &FederatedDataset,
    strategy: &dyn Strategy,
    server: &ServerState,
    states: &[ClientState],
    params: &EngineParams,
) -> Result<Vec<EvalRow>> {
    dataset
        .clients
        .par_iter()
        .map(|c| {
            let ctx = EvalCtx {
                server,
                client_state: &states[c.id],
                client_id: c.id,
                data: c,
                spec: &dataset.model,
                lr_local: params.lr_local,
                seed: params.seed,
            };
            let eval = strategy.eval_model(&ctx)?;
            let members: Vec<&ParamVector> = match &eval {
                EvalModel::Params(p) => vec![p],
                EvalModel::Mixture(ms) => ms.iter().collect(),
            };
            let (train_loss, train_acc) =
                model::evaluate_mixture(&dataset.model, &members, &c.train, &c.train.all_indices())?;
            let (test_loss, test_acc) =
                model::evaluate_mixture(&dataset.model, &members, &c.test, &c.test.all_indices())?;
            Ok(EvalRow { train_loss, test_loss, train_acc, test_acc })
        })
        .collect()
}

/// Runs a federation to completion. The strategy sees clients in ascending
/// id order regardless of how the thread pool schedules their updates.
pub fn run_federation(
    dataset: &FederatedDataset,
    strategy: &dyn Strategy,
    params: &EngineParams,
) -> Result<RunOutput> {
    validate(dataset, strategy, params)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.workers)
        .build()
        .map_err(|e| FedError::config(format!("engine.workers: {e}")))?;
    pool.install(|| run_inner(dataset, strategy, params))
}

fn run_inner(
    dataset: &FederatedDataset,
    strategy: &dyn Strategy,
    params: &EngineParams,
) -> Result<RunOutput> {
    let n = dataset.n_clients();
    let spec = &dataset.model;
    let layout = spec.layout();
    let init = match &params.init_values {
        Some(v) => ParamVector::new(v.clone(), layout)?,
        None => init_params(spec, &mut substream(params.seed, "init", 0, 0)),
    };
    let ictx = InitCtx {
        init,
        dataset,
        spec,
        seed: params.seed,
        lr_local: params.lr_local,
    };
    let mut server = strategy.init_server(&ictx)?;
    let mut states: Vec<ClientState> = (0..n).map(ClientState::new).collect();

    let sizes: Vec<f64> = dataset.train_sizes().iter().map(|&s| s as f64).collect();
    let ones = vec![1.0; n];
    let weights: &[f64] = match params.weighting {
        Weighting::Size => &sizes,
        Weighting::Equal => &ones,
        Weighting::Auto => match params.sampling {
            SamplingScheme::Size => &ones,
            _ => &sizes,
        },
    };

    let k = ((params.sample_fraction * n as f64).ceil() as usize).clamp(1, n);
    let full = k == n;
    let mut records: Vec<RoundRecord> = Vec::with_capacity(params.rounds);
    let mut stopped_early = false;

    for round in 0..params.rounds {
        let start = std::time::Instant::now();
        let mut floats_up = 0u64;

        let selected: Vec<usize> = if full {
            (0..n).collect()
        } else {
            let probs = match params.sampling {
                SamplingScheme::Uniform => vec![1.0 / n as f64; n],
                SamplingScheme::Size => {
                    let total: f64 = sizes.iter().sum();
                    sizes.iter().map(|s| s / total).collect()
                }
                SamplingScheme::GradNorm { gamma } => {
                    let stats = if round == 0 { vec![None; n] } else { sampling_stats(dataset, &server, true)? };
                    adaptive_sampling_probs(&stats, gamma)
                }
                SamplingScheme::Loss { gamma } => {
                    let stats = if round == 0 { vec![None; n] } else { sampling_stats(dataset, &server, false)? };
                    adaptive_sampling_probs(&stats, gamma)
                }
            };
            select_clients(&probs, k, &mut substream(params.seed, "select", round as u64, 0))
        };

        // Reference gradients: every client reports its full-batch gradient
        // at the current global before the payload is built.
        let mean_ref_grad: Option<ParamVector> = if strategy.needs_reference_gradients() {
            let grads: Vec<ParamVector> = dataset
                .clients
                .par_iter()
                .map(|c| model::gradient(spec, &server.global, &c.train, &c.train.all_indices()))
                .collect::<Result<_>>()?;
            floats_up += (n * server.global.dim()) as u64;
            let refs: Vec<&ParamVector> = grads.iter().collect();
            Some(weighted_average(&refs, &ones)?)
        } else {
            None
        };

        let rctx = RoundCtx {
            round,
            total_rounds: params.rounds,
            seed: params.seed,
            n_clients: n,
            mean_ref_grad: mean_ref_grad.as_ref(),
        };
        let payload = strategy.round_payload(&server, &selected, &rctx)?;
        let floats_down: u64 = selected.iter().map(|&i| strategy.downlink_floats(&payload, i)).sum();

        let results: Vec<(Uplink, ClientState)> = selected
            .par_iter()
            .map(|&i| {
                let cctx = ClientCtx {
                    round,
                    client_id: i,
                    n_clients: n,
                    data: &dataset.clients[i],
                    spec,
                    epochs: params.local_epochs.for_client(i),
                    batch: params.batch_size,
                    lr: params.lr_local,
                    seed: params.seed,
                };
                strategy.client_update(&cctx, &payload, &states[i])
            })
            .collect::<Result<_>>()?;

        let mut uplinks: Vec<(usize, Uplink)> = Vec::with_capacity(selected.len());
        for (&i, (up, st)) in selected.iter().zip(results) {
            if !up.is_finite() || !st.is_finite() {
                return Err(FedError::Divergence {
                    round,
                    what: format!("client {i} produced non-finite values"),
                });
            }
            floats_up += up.floats();
            uplinks.push((i, up));
            states[i] = st;
        }

        let actx = AggCtx { round, seed: params.seed, n_clients: n, weights, lr_server: params.lr_server };
        strategy.aggregate(&mut server, &uplinks, &actx)?;
        if !server.is_finite() {
            return Err(FedError::Divergence { round, what: "server state non-finite".to_string() });
        }

        let rows = eval_all(dataset, strategy, &server, &states, params)?;
        let train_loss: Vec<f64> = rows.iter().map(|r| r.train_loss).collect();
        let test_loss: Vec<f64> = rows.iter().map(|r| r.test_loss).collect();
        if test_loss.iter().chain(&train_loss).any(|l| !l.is_finite()) {
            return Err(FedError::Divergence { round, what: "evaluation loss non-finite".to_string() });
        }
        let train_acc: Option<Vec<f64>> = rows.iter().map(|r| r.train_acc).collect();
        let test_acc: Option<Vec<f64>> = rows.iter().map(|r| r.test_acc).collect();
        let residuals: Option<Vec<f64>> = states.iter().map(|s| s.last_residual).collect();
        let loss_variance = population_variance(&test_loss);
        // Finite losses can still overflow the variance; a record that
        // cannot round-trip through JSON counts as divergence.
        if !loss_variance.is_finite() {
            return Err(FedError::Divergence { round, what: "loss variance non-finite".to_string() });
        }
        let mean_test = test_loss.iter().sum::<f64>() / test_loss.len() as f64;

        records.push(RoundRecord {
            schema_version: SCHEMA_VERSION,
            round,
            selected,
            train_loss,
            test_loss,
            train_acc,
            test_acc,
            loss_variance,
            floats_up,
            floats_down,
            residuals,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        if params.target_loss.is_some_and(|t| mean_test <= t) {
            stopped_early = true;
            break;
        }
    }

    Ok(RunOutput { server, clients: states, records, stopped_early })
}
