//! Clustered personalization: HypCluster (clients pick the best of G
//! models by training loss) and CFL (recursive bipartitioning of a
//! cluster by the cosine geometry of its client updates).

use std::collections::HashMap;

use crate::error::{FedError, Result};
use crate::model::{self, init_params};
use crate::param::ParamVector;
use crate::rng::substream;

use super::{
    delta_average_step, plain_local_sgd, AggCtx, ClientCtx, ClientState, EvalCtx, EvalModel,
    Hypers, InitCtx, Payload, RoundCtx, ServerState, Strategy, StrategyInfo, Uplink,
};

/// HypCluster: the server keeps G models, broadcasts all of them, and each
/// client trains whichever currently fits its data best.
pub struct HypCluster {
    pub g: usize,
}

impl Strategy for HypCluster {
    fn name(&self) -> &'static str {
        "hypcluster"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut models = vec![ctx.init.clone()];
        for j in 1..self.g {
            let mut rng = substream(ctx.seed, "cluster_init", 0, j as u64);
            models.push(init_params(ctx.spec, &mut rng));
        }
        let mut state = ServerState::new(ctx.init.clone());
        state.models = Some(models);
        state.positions = Some(vec![0; ctx.dataset.n_clients()]);
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut payload = Payload::new(ctx.round);
        payload.models = Some(server.models.clone().expect("hypcluster keeps a model bank"));
        Ok(payload)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let models = payload.models.as_ref().expect("hypcluster broadcasts its bank");
        let idx = ctx.train_idx();
        let mut best = 0usize;
        let mut best_loss = f64::INFINITY;
        for (j, m) in models.iter().enumerate() {
            let l = model::loss(ctx.spec, m, ctx.train(), &idx)?;
            if l < best_loss {
                best_loss = l;
                best = j;
            }
        }
        let trained = plain_local_sgd(ctx, &models[best])?;
        Ok((
            Uplink { model: Some(trained), index: Some(best), ..Default::default() },
            state.clone(),
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let models = server.models.as_mut().expect("hypcluster keeps a model bank");
        let positions = server.positions.as_mut().expect("hypcluster keeps assignments");
        for (j, m) in models.iter_mut().enumerate() {
            let pairs: Vec<(&ParamVector, f64)> = uplinks
                .iter()
                .filter(|(_, u)| u.index == Some(j))
                .map(|(id, u)| (u.model.as_ref().expect("hypcluster uplink carries a model"), ctx.weights[*id]))
                .collect();
            if !pairs.is_empty() {
                delta_average_step(m, &pairs, ctx.lr_server)?;
            }
        }
        for (id, u) in uplinks {
            positions[*id] = u.index.expect("hypcluster uplink carries its pick");
        }
        server.global = models[0].clone();
        Ok(())
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        let models = ctx.server.models.as_ref().expect("hypcluster keeps a model bank");
        let positions = ctx.server.positions.as_ref().expect("hypcluster keeps assignments");
        Ok(EvalModel::Params(models[positions[ctx.client_id]].clone()))
    }
}

/// Dominant eigenvector of a small symmetric matrix by 100 rounds of power
/// iteration from a fixed, deterministic starting vector.
pub fn leading_eigenvector(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut v: Vec<f64> = (0..n).map(|j| 1.0 / (j + 1) as f64).collect();
    for _ in 0..100 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[i] += m[i][j] * v[j];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return v;
        }
        for x in &mut next {
            *x /= norm;
        }
        v = next;
    }
    v
}

/// Splits indices `0..n` by the sign of the leading eigenvector of the
/// similarity matrix. Either side may come back empty on degenerate input.
pub fn bipartition_by_leading_eigenvector(sim: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>) {
    let v = leading_eigenvector(sim);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, &vi) in v.iter().enumerate() {
        if vi >= 0.0 {
            a.push(i);
        } else {
            b.push(i);
        }
    }
    (a, b)
}

/// Pairwise cosine similarities of client updates. A zero update carries
/// no direction, so its pairs count as aligned (1.0) and never force a
/// split on their own.
pub fn pairwise_cosine(deltas: &[&ParamVector]) -> Result<Vec<Vec<f64>>> {
    let n = deltas.len();
    let norms: Vec<f64> = deltas.iter().map(|d| d.norm()).collect();
    let mut sim = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                1.0
            } else {
                deltas[i].dot(deltas[j])? / (norms[i] * norms[j])
            };
            sim[i][j] = c;
            sim[j][i] = c;
        }
    }
    Ok(sim)
}

/// CFL: per-cluster federated averaging; once a cluster's updates are
/// small (`max ||delta|| < eps1`) but directionally incongruent
/// (`min pairwise cos < eps2`), it splits along the leading eigenvector of
/// the cosine matrix, recursively within the round.
pub struct Cfl {
    /// Stationarity threshold; `None` means `1e-3 * ||cluster model||`.
    pub eps1: Option<f64>,
    /// Similarity threshold below which a stationary cluster splits.
    pub eps2: f64,
}

impl Cfl {
    fn split_rec(
        &self,
        members: Vec<usize>,
        deltas: &HashMap<usize, &ParamVector>,
        eps1: f64,
        out: &mut Vec<Vec<usize>>,
    ) -> Result<()> {
        if members.len() < 2 {
            out.push(members);
            return Ok(());
        }
        let ds: Vec<&ParamVector> = members.iter().map(|id| deltas[id]).collect();
        let max_norm = ds.iter().map(|d| d.norm()).fold(0.0f64, f64::max);
        if max_norm >= eps1 {
            out.push(members);
            return Ok(());
        }
        let sim = pairwise_cosine(&ds)?;
        let mut min_off = f64::INFINITY;
        for i in 0..sim.len() {
            for j in (i + 1)..sim.len() {
                min_off = min_off.min(sim[i][j]);
            }
        }
        if min_off >= self.eps2 {
            out.push(members);
            return Ok(());
        }
        let (a, b) = bipartition_by_leading_eigenvector(&sim);
        if a.is_empty() || b.is_empty() {
            out.push(members);
            return Ok(());
        }
        let map = |part: Vec<usize>| part.into_iter().map(|k| members[k]).collect::<Vec<_>>();
        self.split_rec(map(a), deltas, eps1, out)?;
        self.split_rec(map(b), deltas, eps1, out)
    }
}

impl Strategy for Cfl {
    fn name(&self) -> &'static str {
        "cfl"
    }

    fn requires_full_participation(&self) -> bool {
        true
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let n = ctx.dataset.n_clients();
        let mut state = ServerState::new(ctx.init.clone());
        state.members = Some(vec![(0..n).collect()]);
        state.models = Some(vec![ctx.init.clone()]);
        state.positions = Some(vec![0; n]);
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut payload = Payload::new(ctx.round);
        payload.models = Some(server.models.clone().expect("cfl keeps cluster models"));
        let positions = server.positions.as_ref().expect("cfl keeps assignments");
        payload.assignment = Some(positions.iter().enumerate().map(|(i, &c)| (i, c)).collect());
        Ok(payload)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let models = payload.models.as_ref().expect("cfl broadcasts cluster models");
        let cluster = *payload
            .assignment
            .as_ref()
            .expect("cfl broadcasts assignments")
            .get(&ctx.client_id)
            .expect("every client is assigned a cluster");
        let trained = plain_local_sgd(ctx, &models[cluster])?;
        Ok((
            Uplink { model: Some(trained), index: Some(cluster), ..Default::default() },
            state.clone(),
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let members_old = server.members.take().expect("cfl keeps cluster membership");
        let models_old = server.models.take().expect("cfl keeps cluster models");
        let by_id: HashMap<usize, &ParamVector> = uplinks
            .iter()
            .map(|(id, u)| (*id, u.model.as_ref().expect("cfl uplink carries a model")))
            .collect();
        let mut new_members: Vec<Vec<usize>> = Vec::new();
        let mut new_models: Vec<ParamVector> = Vec::new();
        for (c, mem) in members_old.iter().enumerate() {
            let mut model = models_old[c].clone();
            let mut deltas: HashMap<usize, ParamVector> = HashMap::new();
            for id in mem {
                let w = by_id
                    .get(id)
                    .ok_or_else(|| FedError::domain(format!("cfl: missing uplink for client {id}")))?;
                let mut d = (*w).clone();
                d.axpy(-1.0, &models_old[c])?;
                deltas.insert(*id, d);
            }
            let pairs: Vec<(&ParamVector, f64)> =
                mem.iter().map(|id| (by_id[id], ctx.weights[*id])).collect();
            if !pairs.is_empty() {
                delta_average_step(&mut model, &pairs, ctx.lr_server)?;
            }
            let eps1 = self.eps1.unwrap_or(1e-3 * model.norm());
            let delta_refs: HashMap<usize, &ParamVector> =
                deltas.iter().map(|(k, v)| (*k, v)).collect();
            let mut parts = Vec::new();
            self.split_rec(mem.clone(), &delta_refs, eps1, &mut parts)?;
            for part in parts {
                new_members.push(part);
                new_models.push(model.clone());
            }
        }
        let positions = server.positions.as_mut().expect("cfl keeps assignments");
        for (c, mem) in new_members.iter().enumerate() {
            for id in mem {
                positions[*id] = c;
            }
        }
        server.global = new_models[0].clone();
        server.members = Some(new_members);
        server.models = Some(new_models);
        Ok(())
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        let models = ctx.server.models.as_ref().expect("cfl keeps cluster models");
        let positions = ctx.server.positions.as_ref().expect("cfl keeps assignments");
        Ok(EvalModel::Params(models[positions[ctx.client_id]].clone()))
    }
}

pub fn registry() -> Vec<StrategyInfo> {
    vec![
        StrategyInfo {
            name: "hypcluster",
            category: "cluster",
            hypers: &[("g", "2", "number of hypothesis models")],
        },
        StrategyInfo {
            name: "cfl",
            category: "cluster",
            hypers: &[
                ("eps1", "null", "stationarity threshold; null scales with the model norm"),
                ("eps2", "0.0", "cosine threshold below which a stationary cluster splits"),
            ],
        },
    ]
}

pub fn build(name: &str, h: &Hypers) -> Option<Result<Box<dyn Strategy>>> {
    let built: Result<Box<dyn Strategy>> = match name {
        "hypcluster" => (|| {
            let g = h.usize("g", 2)?;
            if g == 0 {
                return Err(FedError::config("strategy.params.g: must be at least 1"));
            }
            Ok(Box::new(HypCluster { g }) as Box<dyn Strategy>)
        })(),
        "cfl" => (|| {
            let eps1 = h.f64("eps1", f64::NAN)?;
            let eps1 = if eps1.is_nan() {
                None
            } else if eps1 <= 0.0 {
                return Err(FedError::config("strategy.params.eps1: must be positive"));
            } else {
                Some(eps1)
            };
            let eps2 = h.f64("eps2", 0.0)?;
            if !(-1.0..=1.0).contains(&eps2) {
                return Err(FedError::config("strategy.params.eps2: must lie in [-1, 1]"));
            }
            Ok(Box::new(Cfl { eps1, eps2 }) as Box<dyn Strategy>)
        })(),
        _ => return None,
    };
    Some(built)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_quadratic_clients, FederatedDataset};
    use crate::strategies::BatchSize;

    /// Drives a strategy for a few rounds with full participation and
    /// size weights, mirroring the engine's call order.
    fn drive(strategy: &dyn Strategy, ds: &FederatedDataset, rounds: usize, seed: u64) -> ServerState {
        let layout = ds.model.layout();
        let init = ParamVector::new(vec![0.0; layout.dim()], layout.clone()).unwrap();
        let ictx = InitCtx { init, dataset: ds, spec: &ds.model, seed, lr_local: 0.1 };
        let mut server = strategy.init_server(&ictx).unwrap();
        let n = ds.n_clients();
        let selected: Vec<usize> = (0..n).collect();
        let weights: Vec<f64> = ds.train_sizes().iter().map(|&s| s as f64).collect();
        let mut states: Vec<ClientState> = (0..n).map(ClientState::new).collect();
        for round in 0..rounds {
            let rctx = RoundCtx { round, total_rounds: rounds, seed, n_clients: n, mean_ref_grad: None };
            let payload = strategy.round_payload(&server, &selected, &rctx).unwrap();
            let mut uplinks = Vec::new();
            for &i in &selected {
                let cctx = ClientCtx {
                    round,
                    client_id: i,
                    n_clients: n,
                    data: &ds.clients[i],
                    spec: &ds.model,
                    epochs: 1,
                    batch: BatchSize::Full,
                    lr: 0.1,
                    seed,
                };
                let (up, st) = strategy.client_update(&cctx, &payload, &states[i]).unwrap();
                states[i] = st;
                uplinks.push((i, up));
            }
            let actx = AggCtx { round, seed, n_clients: n, weights: &weights, lr_server: 1.0 };
            strategy.aggregate(&mut server, &uplinks, &actx).unwrap();
        }
        server
    }

    #[test]
    fn single_hypothesis_matches_fedavg_bitwise() {
        let ds = gen_quadratic_clients(&[1.0, 2.0], &[0.5, -0.25], 3).unwrap();
        let one = drive(&HypCluster { g: 1 }, &ds, 3, 9);
        let avg = drive(&crate::strategies::global::FedAvg, &ds, 3, 9);
        let models = one.models.unwrap();
        assert_eq!(models[0].values, avg.global.values);
    }

    #[test]
    fn clients_pick_the_closer_hypothesis() {
        let ds = gen_quadratic_clients(&[1.0, 1.0], &[-1.0, 1.0], 2).unwrap();
        let strategy = HypCluster { g: 2 };
        let layout = ds.model.layout();
        let mut server = ServerState::new(ParamVector::new(vec![0.0], layout.clone()).unwrap());
        server.models = Some(vec![
            ParamVector::new(vec![-1.0], layout.clone()).unwrap(),
            ParamVector::new(vec![1.0], layout).unwrap(),
        ]);
        server.positions = Some(vec![0, 0]);
        let rctx = RoundCtx { round: 0, total_rounds: 1, seed: 0, n_clients: 2, mean_ref_grad: None };
        let payload = strategy.round_payload(&server, &[0, 1], &rctx).unwrap();
        for (client, want) in [(0usize, 0usize), (1, 1)] {
            let cctx = ClientCtx {
                round: 0,
                client_id: client,
                n_clients: 2,
                data: &ds.clients[client],
                spec: &ds.model,
                epochs: 1,
                batch: BatchSize::Full,
                lr: 0.1,
                seed: 0,
            };
            let (up, _) = strategy.client_update(&cctx, &payload, &ClientState::new(client)).unwrap();
            assert_eq!(up.index, Some(want));
        }
    }

    #[test]
    fn eigenvector_bipartition_splits_opposed_directions() {
        let sim = vec![
            vec![1.0, 1.0, -1.0, -1.0],
            vec![1.0, 1.0, -1.0, -1.0],
            vec![-1.0, -1.0, 1.0, 1.0],
            vec![-1.0, -1.0, 1.0, 1.0],
        ];
        let (a, b) = bipartition_by_leading_eigenvector(&sim);
        let mut sides = [a, b];
        sides.sort();
        assert_eq!(sides, [vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn cfl_recovers_opposed_groups_in_one_round() {
        let ds = gen_quadratic_clients(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, -1.0, -1.0], 2).unwrap();
        let strategy = Cfl { eps1: Some(1e9), eps2: 0.0 };
        let server = drive(&strategy, &ds, 1, 4);
        let mut members = server.members.unwrap();
        members.sort();
        assert_eq!(members, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn cfl_keeps_aligned_clients_together() {
        let ds = gen_quadratic_clients(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 2).unwrap();
        let strategy = Cfl { eps1: Some(1e9), eps2: 0.0 };
        let server = drive(&strategy, &ds, 2, 4);
        assert_eq!(server.members.unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn cfl_singletons_never_split() {
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 2).unwrap();
        let strategy = Cfl { eps1: Some(1e9), eps2: 0.0 };
        let server = drive(&strategy, &ds, 3, 4);
        assert_eq!(server.members.unwrap(), vec![vec![0]]);
    }

    #[test]
    fn zero_deltas_count_as_aligned() {
        let layout = std::sync::Arc::new(crate::param::LayerLayout::new(&[("layer0", 2)]));
        let z = ParamVector::new(vec![0.0, 0.0], layout.clone()).unwrap();
        let d = ParamVector::new(vec![1.0, 0.0], layout).unwrap();
        let sim = pairwise_cosine(&[&z, &d]).unwrap();
        assert_eq!(sim[0][1], 1.0);
    }
}
