//! Fairness-oriented strategies: q-FFL loss reweighting, GIFAIR rank-based
//! gradient scaling, and AFL minimax weights on the probability simplex.

use std::collections::HashMap;

use crate::error::{FedError, Result};
use crate::model;
use crate::param::ParamVector;

use super::adaptive::sign3;
use super::{
    delta_average_step, plain_local_sgd, AggCtx, ClientCtx, ClientState, Hypers, InitCtx,
    Payload, RoundCtx, ServerState, Strategy, StrategyInfo, Uplink,
};

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Selection probabilities `softmax(gamma * stat)`. Missing stats are
/// filled with the mean of the present ones so unseen clients get a
/// neutral weight; if nothing is present the result is uniform.
pub fn adaptive_sampling_probs(stats: &[Option<f64>], gamma: f64) -> Vec<f64> {
    let n = stats.len();
    if n == 0 {
        return Vec::new();
    }
    let present: Vec<f64> = stats.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0 / n as f64; n];
    }
    let fill = present.iter().sum::<f64>() / present.len() as f64;
    let scaled: Vec<f64> = stats.iter().map(|s| gamma * s.unwrap_or(fill)).collect();
    softmax(&scaled)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    if n == 0 {
        return Vec::new();
    }
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("simplex projection needs finite inputs"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let candidate = (1.0 - cumsum) / (j + 1) as f64;
        if uj + candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&vi| (vi + theta).max(0.0)).collect()
}

/// q-FFL: clients report their pre-training loss and the server reweights
/// the usual averaging step by `p_i * F_i^q`, emphasising badly served
/// clients for q > 0. q = 0 reduces to plain federated averaging.
pub struct QFfl {
    pub q: f64,
}

impl Strategy for QFfl {
    fn name(&self) -> &'static str {
        "qffl"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w = payload.global.as_ref().expect("qffl broadcasts a global");
        let idx = ctx.train_idx();
        let loss_pre = model::loss(ctx.spec, w, ctx.train(), &idx)?;
        let trained = plain_local_sgd(ctx, w)?;
        let mut next = state.clone();
        next.last_loss = Some(loss_pre);
        Ok((Uplink { model: Some(trained), loss: Some(loss_pre), ..Default::default() }, next))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(id, u)| {
                let f = u.loss.expect("qffl uplink carries the pre-training loss").max(1e-12);
                (u.model.as_ref().expect("qffl uplink carries a model"), ctx.weights[*id] * f.powf(self.q))
            })
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)
    }
}

/// GIFAIR: scales each client's gradient by `1 + lambda r_i / (p_i |A_g|)`
/// where `r_i` ranks the client's group mean loss against the other
/// groups. Group losses come from the previous rounds' reports, so the
/// first round runs unscaled.
pub struct Gifair {
    pub lambda: f64,
}

impl Strategy for Gifair {
    fn name(&self) -> &'static str {
        "gifair"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let n = ctx.dataset.n_clients();
        let sizes = ctx.dataset.train_sizes();
        let total: usize = sizes.iter().sum();
        let mut state = ServerState::new(ctx.init.clone());
        state.loss_table = Some(vec![None; n]);
        state.positions = Some(ctx.dataset.clients.iter().map(|c| c.group).collect());
        state.simplex = Some(sizes.iter().map(|&s| s as f64 / total as f64).collect());
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, selected: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut payload = Payload::with_global(ctx.round, server.global.clone());
        let groups = server.positions.as_ref().expect("gifair keeps group labels");
        let p = server.simplex.as_ref().expect("gifair keeps data proportions");
        let table = server.loss_table.as_ref().expect("gifair keeps a loss table");
        let d = groups.iter().max().map_or(0, |g| g + 1);
        let mut sums = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for (i, entry) in table.iter().enumerate() {
            if let Some(l) = entry {
                sums[groups[i]] += l;
                counts[groups[i]] += 1;
            }
        }
        let total_count: usize = counts.iter().sum();
        let mut scales = HashMap::new();
        if total_count == 0 {
            for &i in selected {
                scales.insert(i, 1.0);
            }
            payload.scales = Some(scales);
            return Ok(payload);
        }
        let overall = sums.iter().sum::<f64>() / total_count as f64;
        let means: Vec<f64> = (0..d)
            .map(|j| if counts[j] > 0 { sums[j] / counts[j] as f64 } else { overall })
            .collect();
        let mut group_sizes = vec![0usize; d];
        for &g in groups {
            group_sizes[g] += 1;
        }
        for &i in selected {
            let gi = groups[i];
            let mut r = 0.0;
            for j in 0..d {
                if j != gi {
                    r += sign3(means[gi] - means[j]);
                }
            }
            let s = 1.0 + self.lambda * r / (p[i] * group_sizes[gi] as f64);
            scales.insert(i, s.max(1e-6));
        }
        payload.scales = Some(scales);
        Ok(payload)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w = payload.global.as_ref().expect("gifair broadcasts a global");
        let s = payload
            .scales
            .as_ref()
            .and_then(|m| m.get(&ctx.client_id))
            .copied()
            .unwrap_or(1.0);
        let idx = ctx.train_idx();
        let loss_pre = model::loss(ctx.spec, w, ctx.train(), &idx)?;
        let mut rng = ctx.sgd_rng();
        let trained = super::sgd_epochs(
            ctx.spec,
            ctx.train(),
            w,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut rng,
            &mut |_, g| Ok(g.scale(s)),
        )?;
        let mut next = state.clone();
        next.last_loss = Some(loss_pre);
        Ok((Uplink { model: Some(trained), loss: Some(loss_pre), ..Default::default() }, next))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(id, u)| (u.model.as_ref().expect("gifair uplink carries a model"), ctx.weights[*id]))
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)?;
        let table = server.loss_table.as_mut().expect("gifair keeps a loss table");
        for (id, u) in uplinks {
            table[*id] = Some(u.loss.expect("gifair uplink carries the pre-training loss"));
        }
        Ok(())
    }
}

/// AFL: minimax fairness. The server maintains mixture weights `p` on the
/// simplex; clients scale their gradients by `N p_i` and the server takes
/// a projected ascent step on `p` along the reported losses.
pub struct Afl {
    pub eta_p: f64,
}

impl Strategy for Afl {
    fn name(&self) -> &'static str {
        "afl"
    }

    fn requires_full_participation(&self) -> bool {
        true
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let n = ctx.dataset.n_clients();
        let mut state = ServerState::new(ctx.init.clone());
        state.simplex = Some(vec![1.0 / n as f64; n]);
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, selected: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut payload = Payload::with_global(ctx.round, server.global.clone());
        let p = server.simplex.as_ref().expect("afl keeps simplex weights");
        let n = ctx.n_clients as f64;
        payload.scales = Some(selected.iter().map(|&i| (i, n * p[i])).collect());
        Ok(payload)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w = payload.global.as_ref().expect("afl broadcasts a global");
        let s = payload
            .scales
            .as_ref()
            .and_then(|m| m.get(&ctx.client_id))
            .copied()
            .unwrap_or(1.0);
        let idx = ctx.train_idx();
        let loss_pre = model::loss(ctx.spec, w, ctx.train(), &idx)?;
        let mut rng = ctx.sgd_rng();
        let trained = super::sgd_epochs(
            ctx.spec,
            ctx.train(),
            w,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut rng,
            &mut |_, g| Ok(g.scale(s)),
        )?;
        let mut next = state.clone();
        next.last_loss = Some(loss_pre);
        Ok((Uplink { model: Some(trained), loss: Some(loss_pre), ..Default::default() }, next))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        // Equal-weight model step: the p_i emphasis already lives in the
        // locally scaled gradients.
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(_, u)| (u.model.as_ref().expect("afl uplink carries a model"), 1.0))
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)?;
        let p = server.simplex.as_mut().expect("afl keeps simplex weights");
        let mut shifted = p.clone();
        for (id, u) in uplinks {
            shifted[*id] += self.eta_p * u.loss.expect("afl uplink carries the pre-training loss");
        }
        *p = project_to_simplex(&shifted);
        Ok(())
    }
}

pub fn registry() -> Vec<StrategyInfo> {
    vec![
        StrategyInfo {
            name: "qffl",
            category: "fairness",
            hypers: &[("q", "1.0", "loss exponent; 0 recovers plain averaging")],
        },
        StrategyInfo {
            name: "gifair",
            category: "fairness",
            hypers: &[("lambda", "0.1", "strength of the rank-based group scaling")],
        },
        StrategyInfo {
            name: "afl",
            category: "fairness",
            hypers: &[("eta_p", "0.1", "projected ascent step on the mixture weights")],
        },
    ]
}

pub fn build(name: &str, h: &Hypers) -> Option<Result<Box<dyn Strategy>>> {
    let built: Result<Box<dyn Strategy>> = match name {
        "qffl" => (|| {
            let q = h.f64("q", 1.0)?;
            if q < 0.0 {
                return Err(FedError::config("strategy.params.q: must be nonnegative"));
            }
            Ok(Box::new(QFfl { q }) as Box<dyn Strategy>)
        })(),
        "gifair" => (|| {
            let lambda = h.f64("lambda", 0.1)?;
            if lambda < 0.0 {
                return Err(FedError::config("strategy.params.lambda: must be nonnegative"));
            }
            Ok(Box::new(Gifair { lambda }) as Box<dyn Strategy>)
        })(),
        "afl" => (|| {
            let eta_p = h.f64("eta_p", 0.1)?;
            if eta_p <= 0.0 {
                return Err(FedError::config("strategy.params.eta_p: must be positive"));
            }
            Ok(Box::new(Afl { eta_p }) as Box<dyn Strategy>)
        })(),
        _ => return None,
    };
    Some(built)
}
