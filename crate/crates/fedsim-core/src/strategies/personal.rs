//! Personalization strategies: per-client models trained alongside (or
//! instead of) the global one, plus the train-then-personalize routines.

use std::sync::Arc;

use crate::error::{FedError, Result};
use crate::model::{self, DataSplit, ModelSpec};
use crate::param::{weighted_average, LayerLayout, ParamVector};

use super::{
    delta_average_step, plain_local_sgd, sgd_epochs, AggCtx, ClientCtx, ClientState, EvalCtx,
    EvalModel, Hypers, InitCtx, Payload, RoundCtx, ServerState, Strategy, StrategyInfo, Uplink,
};

/// Fine-tuning flavors for train-then-personalize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TtpVariant {
    Plain,
    /// Proximal pull toward the global solution with weight mu.
    Prox(f64),
    /// Elastic-weight-consolidation pull, weighted per coordinate by the
    /// empirical Fisher diagonal at the global solution.
    Ewc(f64),
}

/// `steps` full-batch fine-tuning iterations from `w_star` on one client's
/// data. The starting point is returned untouched when `steps == 0`.
pub fn ttp_finetune(
    spec: &ModelSpec,
    w_star: &ParamVector,
    data: &DataSplit,
    steps: usize,
    lr: f64,
    variant: TtpVariant,
) -> Result<ParamVector> {
    let idx = data.all_indices();
    let fisher = match variant {
        TtpVariant::Ewc(_) => Some(model::fisher_diag(spec, w_star, data, &idx)?),
        _ => None,
    };
    let mut beta = w_star.clone();
    for _ in 0..steps {
        let mut g = model::gradient(spec, &beta, data, &idx)?;
        match variant {
            TtpVariant::Plain => {}
            TtpVariant::Prox(mu) => {
                let pull = beta.sub(w_star)?;
                g.axpy(mu, &pull)?;
            }
            TtpVariant::Ewc(mu) => {
                let fisher = fisher.as_ref().expect("computed above");
                for ((gi, fi), (bi, wi)) in g
                    .values
                    .iter_mut()
                    .zip(&fisher.values)
                    .zip(beta.values.iter().zip(&w_star.values))
                {
                    *gi += mu * fi * (bi - wi);
                }
            }
        }
        beta.axpy(-lr, &g)?;
    }
    Ok(beta)
}

/// APFL's personal gradient: the chain rule through the mixed point,
/// `zeta * grad F(zeta beta + (1 - zeta) w_star)` on the given batch.
pub fn apfl_local_gradient(
    spec: &ModelSpec,
    data: &DataSplit,
    idx: &[usize],
    beta: &ParamVector,
    w_star: &ParamVector,
    zeta: f64,
) -> Result<ParamVector> {
    let mut mix = beta.scale(zeta);
    mix.axpy(1.0 - zeta, w_star)?;
    let g = model::gradient(spec, &mix, data, idx)?;
    Ok(g.scale(zeta))
}

/// Local-only baseline: every client trains its own model; nothing is
/// aggregated and the server model stays at the initialization.
pub struct LocalOnly;

impl Strategy for LocalOnly {
    fn name(&self) -> &'static str {
        "local"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let start = state
            .personal
            .clone()
            .unwrap_or_else(|| payload.global.clone().expect("local broadcasts the init"));
        let beta = plain_local_sgd(ctx, &start)?;
        let mut new_state = state.clone();
        new_state.personal = Some(beta);
        Ok((Uplink::default(), new_state))
    }

    fn aggregate(&self, _server: &mut ServerState, _uplinks: &[(usize, Uplink)], _ctx: &AggCtx) -> Result<()> {
        Ok(())
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        Ok(EvalModel::Params(
            ctx.client_state.personal.clone().unwrap_or_else(|| ctx.server.global.clone()),
        ))
    }
}

/// Ditto: a FedAvg global model plus a personal model pulled toward the
/// current global; the personal model is never uplinked.
pub struct Ditto {
    pub mu: f64,
}

impl Strategy for Ditto {
    fn name(&self) -> &'static str {
        "ditto"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w_t = payload.global.as_ref().expect("ditto broadcasts a global");
        let w = plain_local_sgd(ctx, w_t)?;
        let beta_start = state.personal.clone().unwrap_or_else(|| w_t.clone());
        let mu = self.mu;
        // The personal pass replays the same batch schedule as the global
        // pass (fresh copy of the same substream).
        let beta = sgd_epochs(
            ctx.spec,
            ctx.train(),
            &beta_start,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut ctx.sgd_rng(),
            &mut |b, mut g| {
                let pull = b.sub(w_t)?;
                g.axpy(mu, &pull)?;
                Ok(g)
            },
        )?;
        let mut new_state = state.clone();
        new_state.personal = Some(beta);
        Ok((Uplink { model: Some(w), ..Default::default() }, new_state))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(id, u)| (u.model.as_ref().expect("ditto uplink carries the global copy"), ctx.weights[*id]))
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        Ok(EvalModel::Params(
            ctx.client_state.personal.clone().unwrap_or_else(|| ctx.server.global.clone()),
        ))
    }
}

/// pFedMe: the personal model approximately minimizes the Moreau envelope
/// objective F_i(beta) + mu/2 ||w - beta||^2; the client uplinks
/// mu * eta_l * (beta - w) and the server adds eta_g times their sum.
pub struct PFedMe {
    pub mu: f64,
    pub tau: f64,
}

impl Strategy for PFedMe {
    fn name(&self) -> &'static str {
        "pfedme"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w = payload.global.as_ref().expect("pfedme broadcasts a global");
        let idx = ctx.train_idx();
        let mut beta = state.personal.clone().unwrap_or_else(|| w.clone());
        let mut env_norm = f64::INFINITY;
        // Inner solve: full-batch GD on the envelope objective until the
        // envelope gradient norm reaches tau, capped at `epochs` steps.
        for _ in 0..ctx.epochs {
            let mut g = model::gradient(ctx.spec, &beta, ctx.train(), &idx)?;
            let pull = beta.sub(w)?;
            g.axpy(self.mu, &pull)?;
            env_norm = g.norm();
            if env_norm <= self.tau {
                break;
            }
            beta.axpy(-ctx.lr, &g)?;
        }
        if env_norm > self.tau {
            let g = model::gradient(ctx.spec, &beta, ctx.train(), &idx)?;
            let mut env = g.clone();
            env.axpy(self.mu, &beta.sub(w)?)?;
            env_norm = env.norm();
        }
        let mut delta = beta.sub(w)?;
        delta = delta.scale(self.mu * ctx.lr);
        let mut new_state = state.clone();
        new_state.personal = Some(beta);
        new_state.last_residual = Some(env_norm / self.mu);
        Ok((Uplink { grad: Some(delta), ..Default::default() }, new_state))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let mut sum = server.global.zeros_like();
        for (_, u) in uplinks {
            sum.axpy(1.0, u.grad.as_ref().expect("pfedme uplink carries the delta"))?;
        }
        server.global.axpy(ctx.lr_server, &sum)
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        Ok(EvalModel::Params(
            ctx.client_state.personal.clone().unwrap_or_else(|| ctx.server.global.clone()),
        ))
    }
}

/// L2GD: loopless local GD. One shared coin per round decides between a
/// communication-free local GD step and a mixing round where the server
/// averages all personal models and each client moves toward the mean.
/// The mixing step reaches clients with the next broadcast.
pub struct L2Gd {
    pub mu: f64,
    pub alpha: f64,
    pub p: f64,
}

impl L2Gd {
    fn kappa(&self, n: usize) -> f64 {
        self.alpha * self.mu / (n as f64 * self.p)
    }

    fn mixed(beta: &ParamVector, mean: &ParamVector, kappa: f64) -> Result<ParamVector> {
        let mut b = beta.scale(1.0 - kappa);
        b.axpy(kappa, mean)?;
        Ok(b)
    }
}

impl Strategy for L2Gd {
    fn name(&self) -> &'static str {
        "l2gd"
    }

    fn requires_full_participation(&self) -> bool {
        true
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let kappa = self.kappa(ctx.dataset.n_clients());
        if !(0.0..=1.0).contains(&kappa) {
            eprintln!(
                "warning: l2gd mixing coefficient alpha*mu/(N*p) = {kappa} lies outside [0, 1]; \
                 the mixing step is not a convex combination"
            );
        }
        let mut state = ServerState::new(ctx.init.clone());
        state.flag = true; // round 0 must broadcast the initialization
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        use rand::Rng;
        let mut p = Payload::new(ctx.round);
        if server.flag {
            p.global = Some(server.global.clone());
        }
        p.pending_mix = server.pending_mix.clone();
        p.flag = ctx.rng().random::<f64>() < self.p;
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let mut beta = match &state.personal {
            Some(b) => b.clone(),
            None => payload
                .global
                .clone()
                .ok_or_else(|| FedError::domain("l2gd: client has no model and no broadcast"))?,
        };
        if let Some((mean, kappa)) = &payload.pending_mix {
            beta = Self::mixed(&beta, mean, *kappa)?;
        }
        let uplink = if payload.flag {
            // Mixing round: ship the personal model, no local step.
            Uplink { model: Some(beta.clone()), ..Default::default() }
        } else {
            let idx = ctx.train_idx();
            let g = model::gradient(ctx.spec, &beta, ctx.train(), &idx)?;
            let step = ctx.lr / (ctx.n_clients as f64 * (1.0 - self.p));
            beta.axpy(-step, &g)?;
            Uplink::default()
        };
        let mut new_state = state.clone();
        new_state.personal = Some(beta);
        Ok((uplink, new_state))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let models: Vec<&ParamVector> =
            uplinks.iter().filter_map(|(_, u)| u.model.as_ref()).collect();
        if models.is_empty() {
            // Local round: the previously pending mix was applied by the
            // clients this round.
            server.pending_mix = None;
            server.flag = false;
        } else {
            let ones = vec![1.0; models.len()];
            let mean = weighted_average(&models, &ones)?;
            server.global = mean.clone();
            server.pending_mix = Some((mean, self.kappa(ctx.n_clients)));
            server.mix_epoch += 1;
            server.flag = false;
        }
        Ok(())
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        let beta = match &ctx.client_state.personal {
            Some(b) => b.clone(),
            None => ctx.server.global.clone(),
        };
        // A pending mix has been decided but not yet applied client-side;
        // evaluate as if it had been.
        if let Some((mean, kappa)) = &ctx.server.pending_mix {
            return Ok(EvalModel::Params(Self::mixed(&beta, mean, *kappa)?));
        }
        Ok(EvalModel::Params(beta))
    }
}

/// Layer-sharing strategies. `boundary` counts the bottom layers that form
/// the base; FedPer shares the base and keeps the top personal, LG-FedAvg
/// shares the top and keeps the base personal. Clients always train the
/// whole network locally.
pub struct LayerShare {
    /// Number of bottom layers in the base; `None` resolves to the default
    /// for the mode (all but the head for fedper, the first layer for
    /// lgfedavg).
    pub boundary: Option<usize>,
    pub share_top: bool,
    name: &'static str,
}

impl LayerShare {
    fn resolve(&self, layout: &LayerLayout) -> Result<(usize, usize)> {
        let n_layers = layout.spans().len();
        let k = self.boundary.unwrap_or(if self.share_top { 1 } else { n_layers - 1 });
        if k > n_layers {
            return Err(FedError::config(format!(
                "strategy.params.boundary: {k} exceeds the layer count {n_layers}"
            )));
        }
        let cut = if k == 0 {
            0
        } else {
            let span = &layout.spans()[k - 1];
            span.start + span.len
        };
        Ok((k, cut))
    }

    /// The half-open value range this mode shares.
    fn shared_range(&self, layout: &LayerLayout) -> Result<std::ops::Range<usize>> {
        let (_, cut) = self.resolve(layout)?;
        Ok(if self.share_top { cut..layout.dim() } else { 0..cut })
    }

    fn shared_layout(&self, layout: &LayerLayout) -> Result<Arc<LayerLayout>> {
        let (k, _) = self.resolve(layout)?;
        let spans = layout.spans();
        let picked = if self.share_top { &spans[k..] } else { &spans[..k] };
        let parts: Vec<(&str, usize)> = picked.iter().map(|s| (s.name.as_str(), s.len)).collect();
        Ok(Arc::new(LayerLayout::new(&parts)))
    }

    fn extract(&self, full: &ParamVector) -> Result<ParamVector> {
        let range = self.shared_range(full.layout())?;
        ParamVector::new(full.values[range].to_vec(), self.shared_layout(full.layout())?)
    }

    fn merge_into(&self, full: &mut ParamVector, shared: &ParamVector) -> Result<()> {
        let range = self.shared_range(&full.layout().clone())?;
        if shared.dim() != range.len() {
            return Err(FedError::domain("layer share: shared piece has the wrong length"));
        }
        full.values[range].copy_from_slice(&shared.values);
        Ok(())
    }
}

impl Strategy for LayerShare {
    fn name(&self) -> &'static str {
        self.name
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        self.resolve(&ctx.spec.layout())?; // validate the boundary early
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let global = payload.global.as_ref().expect("layer sharing broadcasts the global");
        let mut start = match &state.personal {
            Some(p) => p.clone(),
            None => global.clone(),
        };
        self.merge_into(&mut start, &self.extract(global)?)?;
        let w = plain_local_sgd(ctx, &start)?;
        let shared = self.extract(&w)?;
        let mut new_state = state.clone();
        new_state.personal = Some(w);
        Ok((Uplink { model: Some(shared), ..Default::default() }, new_state))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        if self.shared_range(server.global.layout())?.is_empty() {
            return Ok(());
        }
        let mut shared_global = self.extract(&server.global)?;
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(id, u)| (u.model.as_ref().expect("layer share uplink carries the shared piece"), ctx.weights[*id]))
            .collect();
        delta_average_step(&mut shared_global, &pairs, ctx.lr_server)?;
        self.merge_into(&mut server.global, &shared_global)
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        let mut full = match &ctx.client_state.personal {
            Some(p) => p.clone(),
            None => ctx.server.global.clone(),
        };
        self.merge_into(&mut full, &self.extract(&ctx.server.global)?)?;
        Ok(EvalModel::Params(full))
    }

    fn downlink_floats(&self, payload: &Payload, _client: usize) -> u64 {
        payload
            .global
            .as_ref()
            .and_then(|g| self.shared_range(g.layout()).ok())
            .map(|r| r.len() as u64)
            .unwrap_or(0)
    }
}

/// APFL: a FedAvg global model plus a personal model trained through the
/// mixed point zeta*beta + (1-zeta)*w; evaluation uses the mixed point.
pub struct Apfl {
    pub zeta: f64,
}

impl Strategy for Apfl {
    fn name(&self) -> &'static str {
        "apfl"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w_t = payload.global.as_ref().expect("apfl broadcasts a global");
        let w = plain_local_sgd(ctx, w_t)?;
        let mut beta = state.personal.clone().unwrap_or_else(|| w_t.clone());
        let mut rng = ctx.sgd_rng();
        for _ in 0..ctx.epochs {
            for batch in super::epoch_batches(ctx.train().n, ctx.batch, &mut rng) {
                let g = apfl_local_gradient(ctx.spec, ctx.train(), &batch, &beta, w_t, self.zeta)?;
                beta.axpy(-ctx.lr, &g)?;
            }
        }
        let mut new_state = state.clone();
        new_state.personal = Some(beta);
        Ok((Uplink { model: Some(w), ..Default::default() }, new_state))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(id, u)| (u.model.as_ref().expect("apfl uplink carries the global copy"), ctx.weights[*id]))
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        let beta = match &ctx.client_state.personal {
            Some(b) => b.clone(),
            None => ctx.server.global.clone(),
        };
        let mut mix = beta.scale(self.zeta);
        mix.axpy(1.0 - self.zeta, &ctx.server.global)?;
        Ok(EvalModel::Params(mix))
    }
}

/// Train-then-personalize: FedAvg rounds for the global model; evaluation
/// fine-tunes a per-client copy from the current global.
pub struct TtpStrategy {
    pub steps: usize,
    pub variant: TtpVariant,
}

impl Strategy for TtpStrategy {
    fn name(&self) -> &'static str {
        "ttp_finetune"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let start = payload.global.as_ref().expect("ttp broadcasts a global");
        let w = plain_local_sgd(ctx, start)?;
        Ok((Uplink { model: Some(w), ..Default::default() }, state.clone()))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(id, u)| (u.model.as_ref().expect("ttp uplink carries the model"), ctx.weights[*id]))
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        let beta = ttp_finetune(
            ctx.spec,
            &ctx.server.global,
            &ctx.data.train,
            self.steps,
            ctx.lr_local,
            self.variant,
        )?;
        Ok(EvalModel::Params(beta))
    }
}

pub fn registry() -> Vec<StrategyInfo> {
    vec![
        StrategyInfo { name: "local", category: "personal", hypers: &[] },
        StrategyInfo {
            name: "ditto",
            category: "personal",
            hypers: &[("mu", "0.1", "pull of the personal model toward the global")],
        },
        StrategyInfo {
            name: "pfedme",
            category: "personal",
            hypers: &[
                ("mu", "15.0", "Moreau envelope weight"),
                ("tau", "1e-6", "inner-solve gradient tolerance"),
            ],
        },
        StrategyInfo {
            name: "l2gd",
            category: "personal",
            hypers: &[
                ("mu", "1.0", "penalty tying personal models to their mean"),
                ("alpha", "0.1", "mixing step scale"),
                ("p", "0.5", "probability of a mixing round"),
            ],
        },
        StrategyInfo {
            name: "fedper",
            category: "personal",
            hypers: &[("boundary", "layers-1", "bottom layers shared as the global base")],
        },
        StrategyInfo {
            name: "lgfedavg",
            category: "personal",
            hypers: &[("boundary", "1", "bottom layers kept personal; the rest is shared")],
        },
        StrategyInfo {
            name: "apfl",
            category: "personal",
            hypers: &[("zeta", "0.5", "mixture weight of the personal model")],
        },
        StrategyInfo {
            name: "ttp_finetune",
            category: "personal",
            hypers: &[
                ("steps", "5", "full-batch fine-tune steps at evaluation"),
                ("variant", "\"plain\"", "plain, prox, or ewc"),
                ("mu", "0.1", "prox/ewc pull strength"),
            ],
        },
    ]
}

pub fn build(name: &str, h: &Hypers, _lr_local: f64) -> Option<Result<Box<dyn Strategy>>> {
    let built: Result<Box<dyn Strategy>> = match name {
        "local" => Ok(Box::new(LocalOnly)),
        "ditto" => (|| {
            let mu = h.f64("mu", 0.1)?;
            if mu < 0.0 {
                return Err(FedError::config("strategy.params.mu: must be nonnegative"));
            }
            Ok(Box::new(Ditto { mu }) as Box<dyn Strategy>)
        })(),
        "pfedme" => (|| {
            let mu = h.f64("mu", 15.0)?;
            let tau = h.f64("tau", 1e-6)?;
            if mu <= 0.0 {
                return Err(FedError::config("strategy.params.mu: must be positive"));
            }
            if tau <= 0.0 {
                return Err(FedError::config("strategy.params.tau: must be positive"));
            }
            Ok(Box::new(PFedMe { mu, tau }) as Box<dyn Strategy>)
        })(),
        "l2gd" => (|| {
            let mu = h.f64("mu", 1.0)?;
            let alpha = h.f64("alpha", 0.1)?;
            let p = h.f64("p", 0.5)?;
            if !(p > 0.0 && p < 1.0) {
                return Err(FedError::config(
                    "strategy.params.p: must lie strictly inside (0, 1)",
                ));
            }
            if mu < 0.0 || alpha < 0.0 {
                return Err(FedError::config("strategy.params: mu and alpha must be nonnegative"));
            }
            Ok(Box::new(L2Gd { mu, alpha, p }) as Box<dyn Strategy>)
        })(),
        "fedper" | "lgfedavg" => (|| {
            let boundary = match h.usize("boundary", usize::MAX)? {
                usize::MAX => None,
                k => Some(k),
            };
            let share_top = name == "lgfedavg";
            let label = if share_top { "lgfedavg" } else { "fedper" };
            Ok(Box::new(LayerShare { boundary, share_top, name: label }) as Box<dyn Strategy>)
        })(),
        "apfl" => (|| {
            let zeta = h.f64("zeta", 0.5)?;
            if !(0.0..=1.0).contains(&zeta) {
                return Err(FedError::config("strategy.params.zeta: must lie in [0, 1]"));
            }
            if zeta == 0.0 {
                eprintln!("warning: apfl with zeta = 0 never moves the personal model");
            }
            Ok(Box::new(Apfl { zeta }) as Box<dyn Strategy>)
        })(),
        "ttp_finetune" => (|| {
            let steps = h.usize("steps", 5)?;
            let mu = h.f64("mu", 0.1)?;
            if mu < 0.0 {
                return Err(FedError::config("strategy.params.mu: must be nonnegative"));
            }
            let variant = match h.string("variant", "plain")?.as_str() {
                "plain" => TtpVariant::Plain,
                "prox" => TtpVariant::Prox(mu),
                "ewc" => TtpVariant::Ewc(mu),
                other => {
                    return Err(FedError::config(format!(
                        "strategy.params.variant: unknown variant {other:?}"
                    )))
                }
            };
            Ok(Box::new(TtpStrategy { steps, variant }) as Box<dyn Strategy>)
        })(),
        _ => return None,
    };
    Some(built)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_quadratic_clients;
    use crate::strategies::BatchSize;

    fn quad_ctx(ds: &crate::data::FederatedDataset, client: usize, epochs: usize, lr: f64) -> ClientCtx<'_> {
        ClientCtx {
            round: 0,
            client_id: client,
            n_clients: ds.n_clients(),
            data: &ds.clients[client],
            spec: &ds.model,
            epochs,
            batch: BatchSize::Full,
            lr,
            seed: 0,
        }
    }

    #[test]
    fn ttp_zero_steps_is_identity() {
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let w = ParamVector::new(vec![0.3], ds.model.layout()).unwrap();
        let b = ttp_finetune(&ds.model, &w, &ds.clients[0].train, 0, 0.1, TtpVariant::Plain).unwrap();
        assert_eq!(b.values, w.values);
    }

    #[test]
    fn ttp_prox_fixed_point() {
        // h=1, a=1, mu=1, w*=0: limit (h a + mu w*)/(h + mu) = 0.5.
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let w = ParamVector::new(vec![0.0], ds.model.layout()).unwrap();
        let b = ttp_finetune(&ds.model, &w, &ds.clients[0].train, 4000, 0.1, TtpVariant::Prox(1.0))
            .unwrap();
        assert!((b.values[0] - 0.5).abs() < 1e-10, "got {}", b.values[0]);
    }

    #[test]
    fn ttp_ewc_with_zero_fisher_matches_plain() {
        // At w* = a the quadratic residual is zero, so the empirical Fisher
        // vanishes and the EWC trajectory must match the plain one.
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let w = ParamVector::new(vec![1.0], ds.model.layout()).unwrap();
        let plain = ttp_finetune(&ds.model, &w, &ds.clients[0].train, 7, 0.1, TtpVariant::Plain).unwrap();
        let ewc = ttp_finetune(&ds.model, &w, &ds.clients[0].train, 7, 0.1, TtpVariant::Ewc(5.0)).unwrap();
        assert_eq!(plain.values, ewc.values);
    }

    #[test]
    fn apfl_gradient_chain_rule() {
        // zeta=0.5, w*=0, quadratic h=1, a=1: gradient 0.5*(0.5*beta - 1);
        // stationary beta solves the mixed point equal to a, so beta = 2.
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let layout = ds.model.layout();
        let w_star = ParamVector::new(vec![0.0], layout.clone()).unwrap();
        let beta = ParamVector::new(vec![2.0], layout.clone()).unwrap();
        let g = apfl_local_gradient(&ds.model, &ds.clients[0].train, &[0], &beta, &w_star, 0.5).unwrap();
        assert!(g.values[0].abs() < 1e-12, "expected stationarity, got {}", g.values[0]);
        let beta1 = ParamVector::new(vec![1.0], layout.clone()).unwrap();
        let g1 = apfl_local_gradient(&ds.model, &ds.clients[0].train, &[0], &beta1, &w_star, 1.0).unwrap();
        assert!((g1.values[0] - 0.0).abs() < 1e-12); // zeta=1 at beta=a: plain gradient 0
        let g0 = apfl_local_gradient(&ds.model, &ds.clients[0].train, &[0], &beta1, &w_star, 0.0).unwrap();
        assert_eq!(g0.values[0], 0.0); // zeta=0 collapses the gradient
    }

    #[test]
    fn ditto_personal_fixed_point() {
        // h=1, a=2, mu=1, w fixed at 0: beta* = (h a + mu w)/(h + mu) = 1.
        let ds = gen_quadratic_clients(&[1.0], &[2.0], 1).unwrap();
        let layout = ds.model.layout();
        let payload = Payload::with_global(0, ParamVector::new(vec![0.0], layout).unwrap());
        let strat = Ditto { mu: 1.0 };
        let ctx = quad_ctx(&ds, 0, 4000, 0.1);
        let (_, state) = strat.client_update(&ctx, &payload, &ClientState::new(0)).unwrap();
        let beta = state.personal.unwrap().values[0];
        assert!((beta - 1.0).abs() < 1e-10, "got {beta}");
    }

    #[test]
    fn ditto_mu_zero_matches_local_training() {
        let ds = gen_quadratic_clients(&[1.0, 2.0], &[0.5, -0.5], 1).unwrap();
        let layout = ds.model.layout();
        let payload = Payload::with_global(0, ParamVector::new(vec![0.2], layout).unwrap());
        let ditto = Ditto { mu: 0.0 };
        let local = LocalOnly;
        for client in 0..2 {
            let ctx = quad_ctx(&ds, client, 3, 0.1);
            let (_, ds_state) = ditto.client_update(&ctx, &payload, &ClientState::new(client)).unwrap();
            let (_, lo_state) = local.client_update(&ctx, &payload, &ClientState::new(client)).unwrap();
            assert_eq!(
                ds_state.personal.unwrap().values,
                lo_state.personal.unwrap().values
            );
        }
    }

    #[test]
    fn pfedme_inner_solution_and_residual() {
        // F = (beta - 1)^2/2, mu = 1, w = 0: beta* = (mu w + a)/(mu + 1) = 0.5.
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let layout = ds.model.layout();
        let payload = Payload::with_global(0, ParamVector::new(vec![0.0], layout).unwrap());
        let strat = PFedMe { mu: 1.0, tau: 1e-8 };
        let ctx = quad_ctx(&ds, 0, 10000, 0.1);
        let (uplink, state) = strat.client_update(&ctx, &payload, &ClientState::new(0)).unwrap();
        let beta = state.personal.as_ref().unwrap().values[0];
        assert!((beta - 0.5).abs() < 1e-7, "got {beta}");
        // Fixed-point residual reported by the client stays under 10 tau.
        assert!(state.last_residual.unwrap() < 10.0 * 1e-8);
        // Uplink carries mu * eta_l * (beta - w).
        let expect = 1.0 * 0.1 * (beta - 0.0);
        assert!((uplink.grad.unwrap().values[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn l2gd_mixing_preserves_the_mean() {
        let ds = gen_quadratic_clients(&[1.0, 1.0], &[0.0, 1.0], 1).unwrap();
        let layout = ds.model.layout();
        let strat = L2Gd { mu: 1.0, alpha: 0.4, p: 0.5 };
        let kappa = strat.kappa(2);
        assert!((0.0..=1.0).contains(&kappa));
        let b0 = ParamVector::new(vec![0.0], layout.clone()).unwrap();
        let b1 = ParamVector::new(vec![1.0], layout.clone()).unwrap();
        let mean = ParamVector::new(vec![0.5], layout).unwrap();
        let m0 = L2Gd::mixed(&b0, &mean, kappa).unwrap();
        let m1 = L2Gd::mixed(&b1, &mean, kappa).unwrap();
        let new_mean = 0.5 * (m0.values[0] + m1.values[0]);
        assert!((new_mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_share_boundaries() {
        use crate::model::{Activation, LossKind, ModelFamily, ModelSpec};
        let spec = ModelSpec {
            family: ModelFamily::Mlp,
            input_dim: 2,
            output_dim: 1,
            hidden_dims: vec![3],
            activation: Activation::Tanh,
            loss: LossKind::SquaredError,
            bias: true,
        };
        let layout = spec.layout();
        let full = LayerShare { boundary: Some(2), share_top: false, name: "fedper" };
        assert_eq!(full.shared_range(&layout).unwrap(), 0..13);
        let none = LayerShare { boundary: Some(0), share_top: false, name: "fedper" };
        assert!(none.shared_range(&layout).unwrap().is_empty());
        let base = LayerShare { boundary: None, share_top: false, name: "fedper" };
        assert_eq!(base.shared_range(&layout).unwrap(), 0..9); // hidden W+b
        let top = LayerShare { boundary: None, share_top: true, name: "lgfedavg" };
        assert_eq!(top.shared_range(&layout).unwrap(), 9..13); // head W+b
        let all_top = LayerShare { boundary: Some(0), share_top: true, name: "lgfedavg" };
        assert_eq!(all_top.shared_range(&layout).unwrap(), 0..13);
    }
}
