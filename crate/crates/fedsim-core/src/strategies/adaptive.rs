//! Server-adaptive and schedule-adaptive strategies: FedAdam, FedYogi,
//! FedAvgM, FedAc, LoAdaBoost, and the Fed-ensemble model bank.

use std::collections::HashMap;

use crate::error::{FedError, Result};
use crate::model;
use crate::param::{weighted_average, ParamVector};
use crate::rng::substream;

use super::{
    delta_average_step, epoch_batches, plain_local_sgd, AggCtx, ClientCtx, ClientState, EvalCtx,
    EvalModel, Hypers, InitCtx, Payload, RoundCtx, ServerState, Strategy, StrategyInfo, Uplink,
};

/// Which adaptive server rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveMode {
    Adam,
    Yogi,
    Momentum,
}

pub(crate) fn sign3(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One adaptive server step on `w` given the mean client delta. `moment`
/// is the second-moment estimate v for adam/yogi and the momentum buffer
/// for momentum mode.
pub fn server_adaptive_update(
    w: &mut ParamVector,
    delta: &ParamVector,
    moment: &mut ParamVector,
    mode: AdaptiveMode,
    zeta: f64,
    eps: f64,
    eta: f64,
) -> Result<()> {
    if !w.same_layout(delta) || !w.same_layout(moment) {
        return Err(FedError::domain("server_adaptive_update: layout mismatch"));
    }
    match mode {
        AdaptiveMode::Adam => {
            for (v, d) in moment.values.iter_mut().zip(&delta.values) {
                *v = zeta * *v + (1.0 - zeta) * d * d;
            }
        }
        AdaptiveMode::Yogi => {
            for (v, d) in moment.values.iter_mut().zip(&delta.values) {
                let d2 = d * d;
                *v -= (1.0 - zeta) * d2 * sign3(*v - d2);
            }
        }
        AdaptiveMode::Momentum => {
            for (m, d) in moment.values.iter_mut().zip(&delta.values) {
                *m = zeta * *m + d;
            }
        }
    }
    match mode {
        AdaptiveMode::Adam | AdaptiveMode::Yogi => {
            for ((wi, d), v) in w.values.iter_mut().zip(&delta.values).zip(&moment.values) {
                *wi += eta * d / (v.sqrt() + eps);
            }
        }
        AdaptiveMode::Momentum => {
            for (wi, m) in w.values.iter_mut().zip(&moment.values) {
                *wi += eta * m;
            }
        }
    }
    Ok(())
}

/// FedAvg local work with an adaptive server step. The mean delta uses
/// equal weights over participants.
pub struct ServerAdaptive {
    pub mode: AdaptiveMode,
    pub zeta: f64,
    pub eps: f64,
    name: &'static str,
}

impl Strategy for ServerAdaptive {
    fn name(&self) -> &'static str {
        self.name
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut state = ServerState::new(ctx.init.clone());
        match self.mode {
            AdaptiveMode::Momentum => state.moment1 = Some(ctx.init.zeros_like()),
            _ => state.moment2 = Some(ctx.init.zeros_like()),
        }
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let start = payload.global.as_ref().expect("adaptive strategies broadcast a global");
        let w = plain_local_sgd(ctx, start)?;
        Ok((Uplink { model: Some(w), ..Default::default() }, state.clone()))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let deltas: Vec<ParamVector> = uplinks
            .iter()
            .map(|(_, u)| {
                u.model
                    .as_ref()
                    .expect("adaptive uplink carries the model")
                    .sub(&server.global)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&ParamVector> = deltas.iter().collect();
        let ones = vec![1.0; refs.len()];
        let delta = weighted_average(&refs, &ones)?;
        let moment = match self.mode {
            AdaptiveMode::Momentum => server.moment1.as_mut(),
            _ => server.moment2.as_mut(),
        }
        .expect("adaptive server keeps its moment buffer");
        server_adaptive_update(
            &mut server.global,
            &delta,
            moment,
            self.mode,
            self.zeta,
            self.eps,
            ctx.lr_server,
        )
    }
}

/// FedAc: clients advance three coupled sequences per batch step; the
/// server averages both the primal and the aggregated sequence. The
/// aggregated sequence is the one evaluated and shipped.
pub struct FedAc {
    pub zeta1: f64,
    pub zeta2: f64,
    /// Step for the primal sequence; falls back to the local lr.
    pub eta2: Option<f64>,
}

impl Strategy for FedAc {
    fn name(&self) -> &'static str {
        "fedac"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut state = ServerState::new(ctx.init.clone());
        state.moment1 = Some(ctx.init.clone());
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        // global holds w^ag, moment1 the primal w.
        let mut p = Payload::with_global(ctx.round, server.moment1.clone().expect("fedac keeps the primal sequence"));
        p.second = Some(server.global.clone());
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let mut w = payload.global.clone().expect("fedac broadcasts the primal");
        let mut wag = payload.second.clone().expect("fedac broadcasts the aggregate");
        let eta1 = ctx.lr;
        let eta2 = self.eta2.unwrap_or(ctx.lr);
        let mut rng = ctx.sgd_rng();
        for _ in 0..ctx.epochs {
            for batch in epoch_batches(ctx.train().n, ctx.batch, &mut rng) {
                let mut wmd = w.scale(self.zeta1);
                wmd.axpy(1.0 - self.zeta1, &wag)?;
                let g = model::gradient(ctx.spec, &wmd, ctx.train(), &batch)?;
                wag = wmd.clone();
                wag.axpy(-eta1, &g)?;
                w = w.scale(1.0 - self.zeta2);
                w.axpy(self.zeta2, &wmd)?;
                w.axpy(-eta2, &g)?;
            }
        }
        Ok((
            Uplink { model: Some(w), second: Some(wag), ..Default::default() },
            state.clone(),
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let (mut ws, mut wags) = (Vec::new(), Vec::new());
        let mut weights = Vec::new();
        for (id, u) in uplinks {
            ws.push(u.model.as_ref().expect("fedac uplink carries w"));
            wags.push(u.second.as_ref().expect("fedac uplink carries w^ag"));
            weights.push(ctx.weights[*id]);
        }
        server.moment1 = Some(weighted_average(&ws, &weights)?);
        server.global = weighted_average(&wags, &weights)?;
        Ok(())
    }
}

/// LoAdaBoost: clients start at half the epoch budget and keep training in
/// half-epoch increments while their full-batch loss exceeds the median of
/// the losses reported last round, capped at 3/2 of the budget. Counting
/// is in gradient steps, rounding half-epochs up.
pub struct LoAdaBoost;

/// Median of an unordered, nonempty slice; even lengths average the two
/// central order statistics.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median: non-finite loss"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Strategy for LoAdaBoost {
    fn name(&self) -> &'static str {
        "loadaboost"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut state = ServerState::new(ctx.init.clone());
        state.loss_table = Some(vec![None; ctx.dataset.n_clients()]);
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut p = Payload::with_global(ctx.round, server.global.clone());
        let reported: Vec<f64> = server
            .loss_table
            .as_ref()
            .expect("loadaboost keeps a loss table")
            .iter()
            .filter_map(|o| *o)
            .collect();
        if !reported.is_empty() {
            p.scalar = Some(median(&reported));
        }
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let mut w = payload.global.clone().expect("loadaboost broadcasts a global");
        let n = ctx.train().n;
        let per_epoch = match ctx.batch {
            super::BatchSize::Full => 1,
            super::BatchSize::Size(b) => n.div_ceil(b.min(n).max(1)),
        };
        let budget_steps = ctx.epochs * per_epoch; // E' in steps
        let initial = budget_steps.div_ceil(2);
        let increment = per_epoch.div_ceil(2).max(1);
        let cap = (3 * budget_steps).div_ceil(2);
        let mut rng = ctx.sgd_rng();
        let mut queue: Vec<Vec<usize>> = Vec::new();
        let step = |w: &mut ParamVector, rng: &mut _, queue: &mut Vec<Vec<usize>>| -> Result<()> {
            if queue.is_empty() {
                let mut batches = epoch_batches(n, ctx.batch, rng);
                batches.reverse(); // pop from the back keeps epoch order
                *queue = batches;
            }
            let batch = queue.pop().expect("refilled above");
            let g = model::gradient(ctx.spec, w, ctx.train(), &batch)?;
            w.axpy(-ctx.lr, &g)
        };
        let mut taken = 0usize;
        while taken < initial {
            step(&mut w, &mut rng, &mut queue)?;
            taken += 1;
        }
        let idx = ctx.train_idx();
        let mut last_loss = model::loss(ctx.spec, &w, ctx.train(), &idx)?;
        if let Some(med) = payload.scalar {
            while last_loss > med && taken < cap {
                for _ in 0..increment {
                    if taken >= cap {
                        break;
                    }
                    step(&mut w, &mut rng, &mut queue)?;
                    taken += 1;
                }
                last_loss = model::loss(ctx.spec, &w, ctx.train(), &idx)?;
            }
        }
        let mut new_state = state.clone();
        new_state.last_loss = Some(last_loss);
        Ok((
            Uplink { model: Some(w), loss: Some(last_loss), ..Default::default() },
            new_state,
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(id, u)| (u.model.as_ref().expect("loadaboost uplink carries the model"), ctx.weights[*id]))
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)?;
        // The table holds exactly the losses reported this round.
        let table = server.loss_table.as_mut().expect("loadaboost keeps a loss table");
        table.iter_mut().for_each(|o| *o = None);
        for (id, u) in uplinks {
            table[*id] = u.loss;
        }
        Ok(())
    }
}

/// Fed-ensemble: K models trained by FedAvg in rotation. A fixed seeded
/// permutation assigns each client a starting position; in round t client
/// i trains model (position_i + t) mod K, so any K consecutive rounds
/// cover every (client, model) pair exactly once.
pub struct FedEnsemble {
    pub k: usize,
}

/// Personalization weights over ensemble members for one client:
/// softmax of -gamma times the member losses.
pub fn ensemble_personal_weights(losses: &[f64], gamma: f64) -> Vec<f64> {
    crate::strategies::fairness::softmax(&losses.iter().map(|l| -gamma * l).collect::<Vec<_>>())
}

impl FedEnsemble {
    fn assignment_for(&self, positions: &[usize], round: usize, selected: &[usize]) -> HashMap<usize, usize> {
        selected
            .iter()
            .map(|&i| (i, (positions[i] + round) % self.k))
            .collect()
    }
}

impl Strategy for FedEnsemble {
    fn name(&self) -> &'static str {
        "fed_ensemble"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut state = ServerState::new(ctx.init.clone());
        let mut models = vec![ctx.init.clone()];
        for j in 1..self.k {
            let mut rng = substream(ctx.seed, "ensemble_init", 0, j as u64);
            models.push(model::init_params(ctx.spec, &mut rng));
        }
        state.models = Some(models);
        let n = ctx.dataset.n_clients();
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut substream(ctx.seed, "ensemble_perm", 0, 0));
        state.positions = Some(perm.iter().map(|p| p % self.k).collect());
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, selected: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut p = Payload::new(ctx.round);
        p.models = Some(server.models.clone().expect("ensemble keeps its model bank"));
        let positions = server.positions.as_ref().expect("ensemble keeps positions");
        p.assignment = Some(self.assignment_for(positions, ctx.round, selected));
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let k = *payload
            .assignment
            .as_ref()
            .and_then(|m| m.get(&ctx.client_id))
            .expect("ensemble assigns every selected client");
        let start = &payload.models.as_ref().expect("ensemble broadcasts its bank")[k];
        let w = plain_local_sgd(ctx, start)?;
        Ok((
            Uplink { model: Some(w), index: Some(k), ..Default::default() },
            state.clone(),
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let models = server.models.as_mut().expect("ensemble keeps its model bank");
        for j in 0..self.k {
            let pairs: Vec<(&ParamVector, f64)> = uplinks
                .iter()
                .filter(|(_, u)| u.index == Some(j))
                .map(|(id, u)| (u.model.as_ref().expect("ensemble uplink carries the model"), ctx.weights[*id]))
                .collect();
            if !pairs.is_empty() {
                delta_average_step(&mut models[j], &pairs, ctx.lr_server)?;
            }
        }
        server.global = models[0].clone();
        Ok(())
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        Ok(EvalModel::Mixture(
            ctx.server.models.clone().expect("ensemble keeps its model bank"),
        ))
    }

    /// Each client receives only its assigned member.
    fn downlink_floats(&self, payload: &Payload, client: usize) -> u64 {
        payload
            .assignment
            .as_ref()
            .and_then(|m| m.get(&client))
            .and_then(|&k| payload.models.as_ref().map(|b| b[k].dim() as u64))
            .unwrap_or(0)
    }
}

pub fn registry() -> Vec<StrategyInfo> {
    vec![
        StrategyInfo {
            name: "fedadam",
            category: "adaptive",
            hypers: &[
                ("zeta", "0.9", "second-moment exponential weighting"),
                ("eps", "1e-8", "adaptive denominator floor"),
            ],
        },
        StrategyInfo {
            name: "fedyogi",
            category: "adaptive",
            hypers: &[
                ("zeta", "0.9", "second-moment exponential weighting"),
                ("eps", "1e-8", "adaptive denominator floor"),
            ],
        },
        StrategyInfo {
            name: "fedavgm",
            category: "adaptive",
            hypers: &[("zeta", "0.9", "server momentum decay")],
        },
        StrategyInfo {
            name: "fedac",
            category: "adaptive",
            hypers: &[
                ("zeta1", "0.5", "coupling of the primal and aggregate sequences"),
                ("zeta2", "0.5", "primal averaging weight"),
                ("eta2", "null", "primal step; defaults to the local lr"),
            ],
        },
        StrategyInfo {
            name: "loadaboost",
            category: "adaptive",
            hypers: &[],
        },
        StrategyInfo {
            name: "fed_ensemble",
            category: "adaptive",
            hypers: &[("k", "3", "ensemble size")],
        },
    ]
}

fn unit_interval(h: &Hypers, key: &str, default: f64) -> Result<f64> {
    let v = h.f64(key, default)?;
    if !(0.0..1.0).contains(&v) {
        return Err(FedError::config(format!("strategy.params.{key}: must lie in [0, 1)")));
    }
    Ok(v)
}

pub fn build(name: &str, h: &Hypers) -> Option<Result<Box<dyn Strategy>>> {
    let built: Result<Box<dyn Strategy>> = match name {
        "fedadam" | "fedyogi" => (|| {
            let zeta = unit_interval(h, "zeta", 0.9)?;
            let eps = h.f64("eps", 1e-8)?;
            if eps <= 0.0 {
                return Err(FedError::config("strategy.params.eps: must be positive"));
            }
            let mode = if name == "fedadam" { AdaptiveMode::Adam } else { AdaptiveMode::Yogi };
            let label = if name == "fedadam" { "fedadam" } else { "fedyogi" };
            Ok(Box::new(ServerAdaptive { mode, zeta, eps, name: label }) as Box<dyn Strategy>)
        })(),
        "fedavgm" => (|| {
            let zeta = unit_interval(h, "zeta", 0.9)?;
            Ok(Box::new(ServerAdaptive {
                mode: AdaptiveMode::Momentum,
                zeta,
                eps: 0.0,
                name: "fedavgm",
            }) as Box<dyn Strategy>)
        })(),
        "fedac" => (|| {
            let zeta1 = h.f64("zeta1", 0.5)?;
            let zeta2 = h.f64("zeta2", 0.5)?;
            for (k, v) in [("zeta1", zeta1), ("zeta2", zeta2)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(FedError::config(format!("strategy.params.{k}: must lie in [0, 1]")));
                }
            }
            let eta2 = match h.f64("eta2", f64::NAN)? {
                x if x.is_nan() => None,
                x if x > 0.0 => Some(x),
                _ => return Err(FedError::config("strategy.params.eta2: must be positive")),
            };
            Ok(Box::new(FedAc { zeta1, zeta2, eta2 }) as Box<dyn Strategy>)
        })(),
        "loadaboost" => Ok(Box::new(LoAdaBoost)),
        "fed_ensemble" => (|| {
            let k = h.usize("k", 3)?;
            if k == 0 {
                return Err(FedError::config("strategy.params.k: must be at least 1"));
            }
            Ok(Box::new(FedEnsemble { k }) as Box<dyn Strategy>)
        })(),
        _ => return None,
    };
    Some(built)
}
