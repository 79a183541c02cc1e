//! The strategy contract: every federated optimization algorithm is four
//! hooks. `init_server` builds server state, `round_payload` assembles the
//! broadcast, `client_update` is a pure per-client step, and `aggregate`
//! folds uplinks back into server state in ascending client-id order.
//! Unsampled clients keep their state frozen.

pub mod adaptive;
pub mod cluster;
pub mod fairness;
pub mod global;
pub mod meta;
pub mod personal;

use std::collections::BTreeSet;
use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ClientDataset, FederatedDataset};
use crate::error::{FedError, Result};
use crate::model::{self, DataSplit, ModelSpec};
use crate::param::{weighted_average, ParamVector};
use crate::rng::substream;

pub type ClientId = usize;

/// Batch size for local passes. `Full` (or any size covering the split)
/// takes one gradient step per epoch and consumes no randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Full,
    Size(usize),
}

/// Broadcast from server to the selected clients.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Payload {
    pub round: usize,
    /// Current global model; `None` for rounds or strategies that do not
    /// broadcast one.
    pub global: Option<ParamVector>,
    /// Server control variate (SCAFFOLD).
    pub control: Option<ParamVector>,
    /// Mean reference gradient at the broadcast point (DANE).
    pub mean_ref_grad: Option<ParamVector>,
    /// Secondary model sequence (FedAc aggregated iterate).
    pub second: Option<ParamVector>,
    /// Elementwise learning-rate vector (MetaSGD).
    pub meta_lr: Option<ParamVector>,
    /// Model bank for multi-model strategies.
    pub models: Option<Vec<ParamVector>>,
    /// Which bank entry each client receives; absent means the whole bank
    /// is broadcast (model selection happens on the client).
    pub assignment: Option<HashMap<ClientId, usize>>,
    /// Per-client loss scale factors (GIFAIR, AFL).
    pub scales: Option<HashMap<ClientId, f64>>,
    /// Strategy-specific scalar (previous-round loss median and the like).
    pub scalar: Option<f64>,
    /// Strategy-specific coin for this round (FedPD sync, L2GD mixing).
    pub flag: bool,
    /// Deferred mixing step: `(mean model, coefficient)` (L2GD).
    pub pending_mix: Option<(ParamVector, f64)>,
}

impl Payload {
    pub fn new(round: usize) -> Self {
        Payload { round, ..Default::default() }
    }

    pub fn with_global(round: usize, global: ParamVector) -> Self {
        Payload { round, global: Some(global), ..Default::default() }
    }
}

/// Client-to-server message. Every populated field counts toward uplink
/// float accounting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Uplink {
    pub model: Option<ParamVector>,
    pub control: Option<ParamVector>,
    pub grad: Option<ParamVector>,
    pub grad2: Option<ParamVector>,
    pub second: Option<ParamVector>,
    pub loss: Option<f64>,
    pub scalar: Option<f64>,
    pub index: Option<usize>,
}

impl Uplink {
    pub fn floats(&self) -> u64 {
        let vecs = [&self.model, &self.control, &self.grad, &self.grad2, &self.second];
        let v: u64 = vecs.iter().filter_map(|o| o.as_ref()).map(|p| p.dim() as u64).sum();
        let s = u64::from(self.loss.is_some())
            + u64::from(self.scalar.is_some())
            + u64::from(self.index.is_some());
        v + s
    }

    pub fn is_finite(&self) -> bool {
        let vecs = [&self.model, &self.control, &self.grad, &self.grad2, &self.second];
        vecs.iter().filter_map(|o| o.as_ref()).all(|p| p.is_finite())
            && self.loss.is_none_or(f64::is_finite)
            && self.scalar.is_none_or(f64::is_finite)
    }
}

/// Per-client persistent state. The engine owns one per client and swaps
/// in the state returned by `client_update`; absent clients keep theirs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClientState {
    pub id: ClientId,
    /// Personalized model (Ditto, pFedMe, L2GD, FedPer, local training).
    pub personal: Option<ParamVector>,
    /// Client control variate (SCAFFOLD).
    pub control: Option<ParamVector>,
    /// Last gradient surrogate (FedDyn).
    pub grad_surrogate: Option<ParamVector>,
    /// Dual variable (FedPD).
    pub dual: Option<ParamVector>,
    /// Local anchor: FedPD's local consensus copy, FedSplit's z_i.
    pub anchor: Option<ParamVector>,
    /// Last full-batch training loss reported while participating.
    pub last_loss: Option<f64>,
    /// Last squared gradient norm reported while participating.
    pub last_grad_norm_sq: Option<f64>,
    /// Last inner-solve residual (pFedMe diagnostics).
    pub last_residual: Option<f64>,
    /// Identifier of the last mixing event applied (L2GD).
    pub mix_epoch: u64,
}

impl ClientState {
    pub fn new(id: ClientId) -> Self {
        ClientState { id, ..Default::default() }
    }

    pub fn is_finite(&self) -> bool {
        let vecs = [&self.personal, &self.control, &self.grad_surrogate, &self.dual, &self.anchor];
        vecs.iter().filter_map(|o| o.as_ref()).all(|p| p.is_finite())
    }
}

/// Server-side strategy state. `global` is always present; the optional
/// fields belong to individual strategies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerState {
    pub global: ParamVector,
    pub control: Option<ParamVector>,
    /// First moment (server momentum) or a secondary model sequence.
    pub moment1: Option<ParamVector>,
    /// Second moment (server adaptivity).
    pub moment2: Option<ParamVector>,
    /// Elementwise learning rates (MetaSGD).
    pub meta_lr: Option<ParamVector>,
    /// Per-client gradient surrogates, absentees keep last values (FedDyn).
    pub grad_table: Option<Vec<ParamVector>>,
    /// Model bank (clusters, ensemble members).
    pub models: Option<Vec<ParamVector>>,
    /// Cluster membership lists, each sorted ascending (CFL).
    pub members: Option<Vec<Vec<ClientId>>>,
    /// Per-client bank position (ensemble permutation, HypCluster choice).
    pub positions: Option<Vec<usize>>,
    /// Mixture weights over clients on the probability simplex (AFL).
    pub simplex: Option<Vec<f64>>,
    /// Last reported per-client losses, stale entries allowed.
    pub loss_table: Option<Vec<Option<f64>>>,
    /// Deferred mixing broadcast for the next round (L2GD).
    pub pending_mix: Option<(ParamVector, f64)>,
    /// Counter of mixing events (L2GD).
    pub mix_epoch: u64,
    /// Whether the next round must rebroadcast the global (FedPD).
    pub flag: bool,
}

impl ServerState {
    pub fn new(global: ParamVector) -> Self {
        ServerState {
            global,
            control: None,
            moment1: None,
            moment2: None,
            meta_lr: None,
            grad_table: None,
            models: None,
            members: None,
            positions: None,
            simplex: None,
            loss_table: None,
            pending_mix: None,
            mix_epoch: 0,
            flag: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        let singles = [&self.control, &self.moment1, &self.moment2, &self.meta_lr];
        if !self.global.is_finite() {
            return false;
        }
        if !singles.iter().filter_map(|o| o.as_ref()).all(|p| p.is_finite()) {
            return false;
        }
        for bank in [&self.grad_table, &self.models] {
            if let Some(bank) = bank {
                if !bank.iter().all(|p| p.is_finite()) {
                    return false;
                }
            }
        }
        if let Some(p) = &self.simplex {
            if !p.iter().all(|x| x.is_finite()) {
                return false;
            }
        }
        if let Some((m, c)) = &self.pending_mix {
            if !m.is_finite() || !c.is_finite() {
                return false;
            }
        }
        true
    }
}

/// Context handed to `init_server`.
pub struct InitCtx<'a> {
    pub init: ParamVector,
    pub dataset: &'a FederatedDataset,
    pub spec: &'a ModelSpec,
    pub seed: u64,
    pub lr_local: f64,
}

/// Context handed to `round_payload`.
pub struct RoundCtx<'a> {
    pub round: usize,
    pub total_rounds: usize,
    pub seed: u64,
    pub n_clients: usize,
    /// Mean full-batch gradient at the current global over all clients;
    /// present only for strategies that request reference gradients.
    pub mean_ref_grad: Option<&'a ParamVector>,
}

impl RoundCtx<'_> {
    /// Strategy-level randomness for this round (coins and similar).
    pub fn rng(&self) -> ChaCha8Rng {
        substream(self.seed, "strategy", self.round as u64, 0)
    }
}

/// Context handed to `client_update`. All client randomness must come from
/// `rng(tag)` substreams so results do not depend on scheduling.
pub struct ClientCtx<'a> {
    pub round: usize,
    pub client_id: ClientId,
    pub n_clients: usize,
    pub data: &'a ClientDataset,
    pub spec: &'a ModelSpec,
    pub epochs: usize,
    pub batch: BatchSize,
    pub lr: f64,
    pub seed: u64,
}

impl ClientCtx<'_> {
    pub fn rng(&self, tag: &str) -> ChaCha8Rng {
        substream(self.seed, tag, self.round as u64, self.client_id as u64)
    }

    /// The batch-schedule stream shared by every plain local training pass.
    pub fn sgd_rng(&self) -> ChaCha8Rng {
        self.rng("client_sgd")
    }

    pub fn train(&self) -> &DataSplit {
        &self.data.train
    }

    pub fn train_idx(&self) -> Vec<usize> {
        self.data.train.all_indices()
    }
}

/// Context handed to `aggregate`.
pub struct AggCtx<'a> {
    pub round: usize,
    pub seed: u64,
    pub n_clients: usize,
    /// Aggregation weight per client id (sizes or all-ones).
    pub weights: &'a [f64],
    pub lr_server: f64,
}

/// Which parameters to evaluate a client with.
pub enum EvalModel {
    Params(ParamVector),
    /// Ensemble: predictions are averaged across members.
    Mixture(Vec<ParamVector>),
}

/// Context handed to `eval_model`.
pub struct EvalCtx<'a> {
    pub server: &'a ServerState,
    pub client_state: &'a ClientState,
    pub client_id: ClientId,
    pub data: &'a ClientDataset,
    pub spec: &'a ModelSpec,
    pub lr_local: f64,
    pub seed: u64,
}

/// A federated optimization strategy as four hooks plus capability flags.
pub trait Strategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState>;

    fn round_payload(
        &self,
        server: &ServerState,
        selected: &[ClientId],
        ctx: &RoundCtx,
    ) -> Result<Payload>;

    fn client_update(
        &self,
        ctx: &ClientCtx,
        payload: &Payload,
        state: &ClientState,
    ) -> Result<(Uplink, ClientState)>;

    fn aggregate(
        &self,
        server: &mut ServerState,
        uplinks: &[(ClientId, Uplink)],
        ctx: &AggCtx,
    ) -> Result<()>;

    /// Model used to evaluate a client; defaults to the global model.
    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        Ok(EvalModel::Params(ctx.server.global.clone()))
    }

    /// Whether the engine must compute full-batch gradients at the current
    /// global for every client before building the payload (DANE).
    fn needs_reference_gradients(&self) -> bool {
        false
    }

    /// Strategies that only make sense with every client participating.
    fn requires_full_participation(&self) -> bool {
        false
    }

    /// Downlink float count for one client under this payload.
    fn downlink_floats(&self, payload: &Payload, client: ClientId) -> u64 {
        let mut n = 0u64;
        for v in [&payload.global, &payload.control, &payload.mean_ref_grad, &payload.second, &payload.meta_lr] {
            if let Some(p) = v {
                n += p.dim() as u64;
            }
        }
        if let Some(models) = &payload.models {
            match &payload.assignment {
                Some(map) => {
                    if let Some(&k) = map.get(&client) {
                        n += models[k].dim() as u64;
                    }
                }
                None => n += models.iter().map(|m| m.dim() as u64).sum::<u64>(),
            }
        }
        if let Some((m, _)) = &payload.pending_mix {
            n += m.dim() as u64 + 1;
        }
        if payload.scales.as_ref().is_some_and(|s| s.contains_key(&client)) {
            n += 1;
        }
        if payload.scalar.is_some() {
            n += 1;
        }
        n
    }
}

/// One epoch's batch schedule: a full-coverage batch takes a single
/// ordered pass and consumes no randomness; smaller batches reshuffle
/// every epoch and chunk, keeping the trailing partial batch.
pub fn epoch_batches(n: usize, batch: BatchSize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let size = match batch {
        BatchSize::Full => n,
        BatchSize::Size(b) => b.min(n),
    };
    if size >= n {
        return vec![(0..n).collect()];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

/// Runs `epochs` local SGD epochs from `start` on `data`, passing each raw
/// batch gradient through `transform(w, g) -> effective gradient`.
pub fn sgd_epochs(
    spec: &ModelSpec,
    data: &DataSplit,
    start: &ParamVector,
    epochs: usize,
    batch: BatchSize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    transform: &mut dyn FnMut(&ParamVector, ParamVector) -> Result<ParamVector>,
) -> Result<ParamVector> {
    let mut w = start.clone();
    for _ in 0..epochs {
        for batch_idx in epoch_batches(data.n, batch, rng) {
            let g = model::gradient(spec, &w, data, &batch_idx)?;
            let eff = transform(&w, g)?;
            w.axpy(-lr, &eff)?;
        }
    }
    Ok(w)
}

/// Plain local SGD with the shared client stream: the path FedAvg-family
/// strategies take, kept in one place so reductions agree bit for bit.
pub fn plain_local_sgd(ctx: &ClientCtx, start: &ParamVector) -> Result<ParamVector> {
    sgd_epochs(
        ctx.spec,
        ctx.train(),
        start,
        ctx.epochs,
        ctx.batch,
        ctx.lr,
        &mut ctx.sgd_rng(),
        &mut |_, g| Ok(g),
    )
}

/// FedAvg-style server step on `global`: move by `lr_server` times the
/// weighted average of client deltas. Every strategy that aggregates
/// averaged models routes through here so identities hold exactly.
pub fn delta_average_step(
    global: &mut ParamVector,
    models: &[(&ParamVector, f64)],
    lr_server: f64,
) -> Result<()> {
    let deltas: Vec<ParamVector> =
        models.iter().map(|(m, _)| m.sub(global)).collect::<Result<_>>()?;
    let refs: Vec<&ParamVector> = deltas.iter().collect();
    let weights: Vec<f64> = models.iter().map(|(_, w)| *w).collect();
    let mean = weighted_average(&refs, &weights)?;
    global.axpy(lr_server, &mean)
}

/// Typed accessor over a strategy's hyperparameter map that rejects
/// unknown keys with a field path.
pub struct Hypers<'a> {
    map: serde_json::Map<String, Value>,
    path: &'a str,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl<'a> Hypers<'a> {
    pub fn new(params: &Value, path: &'a str) -> Result<Self> {
        let map = match params {
            Value::Null => serde_json::Map::new(),
            Value::Object(m) => m.clone(),
            _ => return Err(FedError::config(format!("{path}: must be an object"))),
        };
        Ok(Hypers { map, path, used: std::cell::RefCell::new(BTreeSet::new()) })
    }

    fn touch(&self, key: &str) {
        self.used.borrow_mut().insert(key.to_string());
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        self.touch(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| FedError::config(format!("{}.{key}: expected a number", self.path))),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        self.touch(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| FedError::config(format!("{}.{key}: expected a nonnegative integer", self.path))),
        }
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        self.touch(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_bool()
                .ok_or_else(|| FedError::config(format!("{}.{key}: expected a boolean", self.path))),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> Result<String> {
        self.touch(key);
        match self.map.get(key) {
            None => Ok(default.to_string()),
            Some(v) => v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| FedError::config(format!("{}.{key}: expected a string", self.path))),
        }
    }

    /// Optional string that may be explicitly `null`.
    pub fn opt_string(&self, key: &str) -> Result<Option<String>> {
        self.touch(key);
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .ok_or_else(|| FedError::config(format!("{}.{key}: expected a string or null", self.path))),
        }
    }

    pub fn opt_vec_f64(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.touch(key);
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| {
                        FedError::config(format!("{}.{key}: expected an array of numbers", self.path))
                    })
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
            Some(_) => Err(FedError::config(format!("{}.{key}: expected an array of numbers", self.path))),
        }
    }

    /// Rejects any key no getter asked about.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for key in self.map.keys() {
            if !used.contains(key) {
                return Err(FedError::config(format!("{}.{key}: unknown hyperparameter", self.path)));
            }
        }
        Ok(())
    }
}

/// Registry description of one strategy.
pub struct StrategyInfo {
    pub name: &'static str,
    pub category: &'static str,
    /// `(key, default, meaning)` triples.
    pub hypers: &'static [(&'static str, &'static str, &'static str)],
}

/// Every registered strategy, in stable listing order.
pub fn registry() -> Vec<StrategyInfo> {
    let mut all = Vec::new();
    all.extend(global::registry());
    all.extend(adaptive::registry());
    all.extend(personal::registry());
    all.extend(meta::registry());
    all.extend(fairness::registry());
    all.extend(cluster::registry());
    all
}

/// Builds a strategy from its registry name and hyperparameter object.
/// Unknown names list the registered alternatives.
pub fn build(name: &str, params: &Value, lr_local: f64) -> Result<Box<dyn Strategy>> {
    let path = "strategy.params".to_string();
    let h = Hypers::new(params, &path)?;
    let built = global::build(name, &h)
        .or_else(|| adaptive::build(name, &h))
        .or_else(|| personal::build(name, &h, lr_local))
        .or_else(|| meta::build(name, &h))
        .or_else(|| fairness::build(name, &h))
        .or_else(|| cluster::build(name, &h));
    match built {
        Some(result) => {
            let s = result?;
            h.finish()?;
            Ok(s)
        }
        None => {
            let names: Vec<&str> = registry().iter().map(|i| i.name).collect();
            Err(FedError::config(format!(
                "strategy.name: unknown strategy {name:?}; registered: {}",
                names.join(", ")
            )))
        }
    }
}
