//! Global-model strategies: the FedAvg family and the client-drift
//! corrected methods that share its uplink shape.

use rand::Rng;

use crate::error::{FedError, Result};
use crate::model;
use crate::param::ParamVector;

use super::{
    delta_average_step, plain_local_sgd, sgd_epochs, AggCtx, BatchSize, ClientCtx, ClientState,
    Hypers, InitCtx, Payload, RoundCtx, ServerState, Strategy, StrategyInfo, Uplink,
};

/// Weighted list of `(model, weight)` pairs from uplinks carrying models.
fn model_pairs<'a>(
    uplinks: &'a [(usize, Uplink)],
    ctx: &AggCtx,
) -> Result<Vec<(&'a ParamVector, f64)>> {
    uplinks
        .iter()
        .map(|(id, u)| {
            u.model
                .as_ref()
                .map(|m| (m, ctx.weights[*id]))
                .ok_or_else(|| FedError::domain("aggregate: uplink missing model"))
        })
        .collect()
}

/// FedSGD: one full-batch gradient step per round regardless of the
/// configured epochs or batch size.
pub struct FedSgd;

impl Strategy for FedSgd {
    fn name(&self) -> &'static str {
        "fedsgd"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let start = payload.global.as_ref().expect("fedsgd broadcasts a global");
        let w = sgd_epochs(
            ctx.spec,
            ctx.train(),
            start,
            1,
            BatchSize::Full,
            ctx.lr,
            &mut ctx.sgd_rng(),
            &mut |_, g| Ok(g),
        )?;
        Ok((Uplink { model: Some(w), ..Default::default() }, state.clone()))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        delta_average_step(&mut server.global, &model_pairs(uplinks, ctx)?, ctx.lr_server)
    }
}

/// FedAvg: E local epochs, then a server step along the weighted mean
/// client delta.
pub struct FedAvg;

impl Strategy for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let start = payload.global.as_ref().expect("fedavg broadcasts a global");
        let w = plain_local_sgd(ctx, start)?;
        Ok((Uplink { model: Some(w), ..Default::default() }, state.clone()))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        delta_average_step(&mut server.global, &model_pairs(uplinks, ctx)?, ctx.lr_server)
    }
}

/// FedProx: FedAvg with the proximal local gradient
/// `grad F_i(w) + mu (w - w_t)`.
pub struct FedProx {
    pub mu: f64,
}

impl Strategy for FedProx {
    fn name(&self) -> &'static str {
        "fedprox"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let anchor = payload.global.as_ref().expect("fedprox broadcasts a global");
        let mu = self.mu;
        let w = sgd_epochs(
            ctx.spec,
            ctx.train(),
            anchor,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut ctx.sgd_rng(),
            &mut |w, mut g| {
                let pull = w.sub(anchor)?;
                g.axpy(mu, &pull)?;
                Ok(g)
            },
        )?;
        Ok((Uplink { model: Some(w), ..Default::default() }, state.clone()))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        delta_average_step(&mut server.global, &model_pairs(uplinks, ctx)?, ctx.lr_server)
    }
}

/// DANE: each round the server gathers full-batch gradients from every
/// client at the current global, then clients approximately minimize
/// `F_i(w) - <grad F_i(w_ref) - mean_grad, w - w_ref> + mu/2 ||w - w_ref||^2`.
pub struct Dane {
    pub mu: f64,
}

impl Strategy for Dane {
    fn name(&self) -> &'static str {
        "dane"
    }

    fn needs_reference_gradients(&self) -> bool {
        true
    }

    fn requires_full_participation(&self) -> bool {
        true
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mean = ctx
            .mean_ref_grad
            .ok_or_else(|| FedError::domain("dane: engine did not supply reference gradients"))?;
        let mut p = Payload::with_global(ctx.round, server.global.clone());
        p.mean_ref_grad = Some(mean.clone());
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w_ref = payload.global.as_ref().expect("dane broadcasts a global");
        let mean_ref = payload.mean_ref_grad.as_ref().expect("dane payload carries the mean gradient");
        let own_ref = model::gradient(ctx.spec, w_ref, ctx.train(), &ctx.train_idx())?;
        // Correction: g - grad F_i(w_ref) + mean_grad, constant across steps.
        let correction = mean_ref.sub(&own_ref)?;
        let mu = self.mu;
        let w = sgd_epochs(
            ctx.spec,
            ctx.train(),
            w_ref,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut ctx.sgd_rng(),
            &mut |w, mut g| {
                g.axpy(1.0, &correction)?;
                let pull = w.sub(w_ref)?;
                g.axpy(mu, &pull)?;
                Ok(g)
            },
        )?;
        Ok((Uplink { model: Some(w), ..Default::default() }, state.clone()))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        delta_average_step(&mut server.global, &model_pairs(uplinks, ctx)?, ctx.lr_server)
    }
}

/// How the SCAFFOLD client refreshes its control variate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlRefresh {
    /// Full-batch gradient at the end iterate (the default).
    GradAtEnd,
    /// Difference quotient `c_i - c + (w_t - w_end) / (K eta)`.
    DifferenceQuotient,
}

/// SCAFFOLD with an optional diagonal rescale applied to the corrected
/// direction; the identity rescale recovers plain SCAFFOLD, a non-identity
/// one is the federated SVRG variant.
pub struct Scaffold {
    pub refresh: ControlRefresh,
    pub rescale: Option<Vec<f64>>,
}

impl Strategy for Scaffold {
    fn name(&self) -> &'static str {
        "scaffold"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        if let Some(s) = &self.rescale {
            if s.len() != ctx.init.dim() {
                return Err(FedError::config(format!(
                    "strategy.params.rescale: length {} does not match model dim {}",
                    s.len(),
                    ctx.init.dim()
                )));
            }
        }
        let mut state = ServerState::new(ctx.init.clone());
        state.control = Some(ctx.init.zeros_like());
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut p = Payload::with_global(ctx.round, server.global.clone());
        p.control = server.control.clone();
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w0 = payload.global.as_ref().expect("scaffold broadcasts a global");
        let c = payload.control.as_ref().expect("scaffold broadcasts the server control");
        let c_i = state.control.clone().unwrap_or_else(|| w0.zeros_like());
        let mut steps = 0usize;
        let rescale = self.rescale.as_deref();
        let w = sgd_epochs(
            ctx.spec,
            ctx.train(),
            w0,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut ctx.sgd_rng(),
            &mut |_, mut g| {
                g.axpy(-1.0, &c_i)?;
                g.axpy(1.0, c)?;
                if let Some(s) = rescale {
                    for (gi, si) in g.values.iter_mut().zip(s) {
                        *gi *= si;
                    }
                }
                steps += 1;
                Ok(g)
            },
        )?;
        let c_new = match self.refresh {
            ControlRefresh::GradAtEnd => model::gradient(ctx.spec, &w, ctx.train(), &ctx.train_idx())?,
            ControlRefresh::DifferenceQuotient => {
                let mut cn = c_i.sub(c)?;
                let mut back = w0.sub(&w)?;
                back = back.scale(1.0 / (steps as f64 * ctx.lr));
                cn.axpy(1.0, &back)?;
                cn
            }
        };
        let mut new_state = state.clone();
        new_state.control = Some(c_new.clone());
        Ok((
            Uplink { model: Some(w), control: Some(c_new), ..Default::default() },
            new_state,
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        // Model step uses equal weights over participants by definition:
        // w <- w + (eta_g / |S|) sum(w_i - w).
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(_, u)| (u.model.as_ref().expect("scaffold uplink carries the model"), 1.0))
            .collect();
        delta_average_step(&mut server.global, &pairs, ctx.lr_server)?;
        // Control step: c <- c + (1/N) sum(c_i_new - c).
        let c = server.control.as_mut().expect("scaffold server keeps a control");
        let mut shift = c.zeros_like();
        for (_, u) in uplinks {
            let cn = u.control.as_ref().expect("scaffold uplink carries the control");
            shift.axpy(1.0, &cn.sub(c)?)?;
        }
        c.axpy(1.0 / ctx.n_clients as f64, &shift)?;
        Ok(())
    }
}

/// FedDyn: clients keep a gradient surrogate and solve a dynamically
/// regularized local objective; the server corrects the averaged model with
/// a running mean of all surrogates, absentees contributing stale values.
pub struct FedDyn {
    pub mu: f64,
}

impl Strategy for FedDyn {
    fn name(&self) -> &'static str {
        "feddyn"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut state = ServerState::new(ctx.init.clone());
        state.grad_table = Some(vec![ctx.init.zeros_like(); ctx.dataset.n_clients()]);
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w0 = payload.global.as_ref().expect("feddyn broadcasts a global");
        // First participation: the surrogate is the gradient at the current
        // global, which keeps a critical point of the global loss fixed.
        let surrogate = match &state.grad_surrogate {
            Some(g) => g.clone(),
            None => model::gradient(ctx.spec, w0, ctx.train(), &ctx.train_idx())?,
        };
        let mu = self.mu;
        let w = sgd_epochs(
            ctx.spec,
            ctx.train(),
            w0,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut ctx.sgd_rng(),
            &mut |w, mut g| {
                g.axpy(-1.0, &surrogate)?;
                let pull = w.sub(w0)?;
                g.axpy(mu, &pull)?;
                Ok(g)
            },
        )?;
        let fresh = model::gradient(ctx.spec, &w, ctx.train(), &ctx.train_idx())?;
        let mut new_state = state.clone();
        new_state.grad_surrogate = Some(fresh.clone());
        Ok((
            Uplink { model: Some(w), grad: Some(fresh), ..Default::default() },
            new_state,
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let table = server.grad_table.as_mut().expect("feddyn server keeps a surrogate table");
        for (id, u) in uplinks {
            table[*id] = u.grad.clone().expect("feddyn uplink carries the surrogate");
        }
        let pairs: Vec<(&ParamVector, f64)> = uplinks
            .iter()
            .map(|(_, u)| (u.model.as_ref().expect("feddyn uplink carries the model"), 1.0))
            .collect();
        let models: Vec<&ParamVector> = pairs.iter().map(|(m, _)| *m).collect();
        let weights: Vec<f64> = vec![1.0; models.len()];
        let mean = crate::param::weighted_average(&models, &weights)?;
        let mut h = server.global.zeros_like();
        let table = server.grad_table.as_ref().expect("just written");
        for g in table {
            h.axpy(1.0 / ctx.n_clients as f64, g)?;
        }
        let mut new_global = mean;
        new_global.axpy(-1.0 / self.mu, &h)?;
        server.global = new_global;
        Ok(())
    }
}

/// FedPD: clients run an augmented-Lagrangian oracle step every round and
/// synchronize their local consensus copies with probability `1 - p`.
/// Requires full participation.
pub struct FedPd {
    pub mu: f64,
    pub p: f64,
}

impl Strategy for FedPd {
    fn name(&self) -> &'static str {
        "fedpd"
    }

    fn requires_full_participation(&self) -> bool {
        true
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut state = ServerState::new(ctx.init.clone());
        // Round 0 must broadcast the initial consensus point.
        state.flag = true;
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut p = Payload::new(ctx.round);
        if server.flag {
            p.global = Some(server.global.clone());
        }
        // One shared coin decides whether this round ends with a sync.
        p.flag = ctx.rng().random::<f64>() >= self.p;
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let anchor = match &payload.global {
            Some(g) => g.clone(),
            None => state.anchor.clone().ok_or_else(|| {
                FedError::domain("fedpd: no broadcast and no local anchor; client never initialized")
            })?,
        };
        let mut lambda = state.dual.clone().unwrap_or_else(|| anchor.zeros_like());
        let mu = self.mu;
        let w = {
            let lambda_ref = &lambda;
            let anchor_ref = &anchor;
            sgd_epochs(
                ctx.spec,
                ctx.train(),
                &anchor,
                ctx.epochs,
                ctx.batch,
                ctx.lr,
                &mut ctx.sgd_rng(),
                &mut |w, mut g| {
                    g.axpy(1.0, lambda_ref)?;
                    let pull = w.sub(anchor_ref)?;
                    g.axpy(mu, &pull)?;
                    Ok(g)
                },
            )?
        };
        let drift = w.sub(&anchor)?;
        lambda.axpy(mu, &drift)?;
        let mut new_anchor = w.clone();
        new_anchor.axpy(1.0 / mu, &lambda)?;
        let mut new_state = state.clone();
        new_state.dual = Some(lambda);
        new_state.anchor = Some(new_anchor.clone());
        new_state.personal = Some(w);
        let uplink = if payload.flag {
            Uplink { model: Some(new_anchor), ..Default::default() }
        } else {
            Uplink::default()
        };
        Ok((uplink, new_state))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], _ctx: &AggCtx) -> Result<()> {
        let synced = uplinks.iter().any(|(_, u)| u.model.is_some());
        if synced {
            let models: Vec<&ParamVector> = uplinks
                .iter()
                .map(|(_, u)| u.model.as_ref().expect("fedpd sync round uplinks all anchors"))
                .collect();
            let weights = vec![1.0; models.len()];
            server.global = crate::param::weighted_average(&models, &weights)?;
            server.flag = true;
        } else {
            server.flag = false;
        }
        Ok(())
    }
}

/// FedSplit: Peaceman-Rachford consensus splitting. Clients keep a local
/// splitting variable z_i, take an approximate prox step at the reflected
/// point `2 w - z_i`, move z_i by twice the prox residual, and the server
/// averages the z variables.
pub struct FedSplit {
    pub mu: f64,
}

impl Strategy for FedSplit {
    fn name(&self) -> &'static str {
        "fedsplit"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        Ok(Payload::with_global(ctx.round, server.global.clone()))
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w_bar = payload.global.as_ref().expect("fedsplit broadcasts a global");
        let z = state.anchor.clone().unwrap_or_else(|| w_bar.clone());
        // Reflected prox center v = 2 w - z.
        let mut v = w_bar.clone();
        v.axpy(1.0, w_bar)?;
        v.axpy(-1.0, &z)?;
        let mu = self.mu;
        // The inexact prox starts at the broadcast global; this keeps the
        // consensus optimum an exact fixed point even with few steps.
        let prox = sgd_epochs(
            ctx.spec,
            ctx.train(),
            w_bar,
            ctx.epochs,
            ctx.batch,
            ctx.lr,
            &mut ctx.sgd_rng(),
            &mut |w, mut g| {
                let pull = w.sub(&v)?;
                g.axpy(mu, &pull)?;
                Ok(g)
            },
        )?;
        let mut z_new = z;
        z_new.axpy(2.0, &prox.sub(w_bar)?)?;
        let mut new_state = state.clone();
        new_state.anchor = Some(z_new.clone());
        Ok((Uplink { model: Some(z_new), ..Default::default() }, new_state))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        delta_average_step(&mut server.global, &model_pairs(uplinks, ctx)?, ctx.lr_server)
    }
}

pub fn registry() -> Vec<StrategyInfo> {
    vec![
        StrategyInfo {
            name: "fedsgd",
            category: "global",
            hypers: &[],
        },
        StrategyInfo {
            name: "fedavg",
            category: "global",
            hypers: &[],
        },
        StrategyInfo {
            name: "fedprox",
            category: "global",
            hypers: &[("mu", "0.1", "proximal pull toward the broadcast model")],
        },
        StrategyInfo {
            name: "dane",
            category: "global",
            hypers: &[("mu", "1.0", "proximal weight in the local surrogate objective")],
        },
        StrategyInfo {
            name: "scaffold",
            category: "global",
            hypers: &[
                ("refresh", "\"grad\"", "control refresh: \"grad\" or \"difference\""),
                ("rescale", "null", "optional diagonal rescale (federated SVRG)"),
            ],
        },
        StrategyInfo {
            name: "fedsvrg",
            category: "global",
            hypers: &[
                ("refresh", "\"grad\"", "control refresh: \"grad\" or \"difference\""),
                ("rescale", "null", "diagonal rescale; identity when omitted"),
            ],
        },
        StrategyInfo {
            name: "feddyn",
            category: "global",
            hypers: &[("mu", "1.0", "dynamic regularization weight")],
        },
        StrategyInfo {
            name: "fedpd",
            category: "global",
            hypers: &[
                ("mu", "1.0", "augmented-Lagrangian weight"),
                ("p", "0.0", "probability of skipping the sync step"),
            ],
        },
        StrategyInfo {
            name: "fedsplit",
            category: "global",
            hypers: &[("mu", "1.0", "prox weight of the splitting step")],
        },
    ]
}

pub fn build(name: &str, h: &Hypers) -> Option<Result<Box<dyn Strategy>>> {
    let built: Result<Box<dyn Strategy>> = match name {
        "fedsgd" => Ok(Box::new(FedSgd)),
        "fedavg" => Ok(Box::new(FedAvg)),
        "fedprox" => (|| {
            let mu = h.f64("mu", 0.1)?;
            if mu < 0.0 {
                return Err(FedError::config("strategy.params.mu: must be nonnegative"));
            }
            Ok(Box::new(FedProx { mu }) as Box<dyn Strategy>)
        })(),
        "dane" => (|| {
            let mu = h.f64("mu", 1.0)?;
            if mu < 0.0 {
                return Err(FedError::config("strategy.params.mu: must be nonnegative"));
            }
            Ok(Box::new(Dane { mu }) as Box<dyn Strategy>)
        })(),
        "scaffold" | "fedsvrg" => (|| {
            let refresh = match h.string("refresh", "grad")?.as_str() {
                "grad" => ControlRefresh::GradAtEnd,
                "difference" => ControlRefresh::DifferenceQuotient,
                other => {
                    return Err(FedError::config(format!(
                        "strategy.params.refresh: unknown variant {other:?}"
                    )))
                }
            };
            let rescale = h.opt_vec_f64("rescale")?;
            Ok(Box::new(Scaffold { refresh, rescale }) as Box<dyn Strategy>)
        })(),
        "feddyn" => (|| {
            let mu = h.f64("mu", 1.0)?;
            if mu <= 0.0 {
                return Err(FedError::config("strategy.params.mu: must be positive"));
            }
            Ok(Box::new(FedDyn { mu }) as Box<dyn Strategy>)
        })(),
        "fedpd" => (|| {
            let mu = h.f64("mu", 1.0)?;
            let p = h.f64("p", 0.0)?;
            if mu <= 0.0 {
                return Err(FedError::config("strategy.params.mu: must be positive"));
            }
            if !(0.0..1.0).contains(&p) {
                return Err(FedError::config("strategy.params.p: must lie in [0, 1)"));
            }
            Ok(Box::new(FedPd { mu, p }) as Box<dyn Strategy>)
        })(),
        "fedsplit" => (|| {
            let mu = h.f64("mu", 1.0)?;
            if mu <= 0.0 {
                return Err(FedError::config("strategy.params.mu: must be positive"));
            }
            Ok(Box::new(FedSplit { mu }) as Box<dyn Strategy>)
        })(),
        _ => return None,
    };
    Some(built)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_quadratic_clients;

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
    fn scaffold_corrected_step_arithmetic() {
        // w=1, grad 2, c_i=0.5, c=0.3, lr=0.1: w' = 1 - 0.1*(2 - 0.5 + 0.3).
        // Quadratic client with h=1, a=-1 has gradient w - a = 2 at w = 1.
        let ds = gen_quadratic_clients(&[1.0], &[-1.0], 1).unwrap();
        let layout = ds.model.layout();
        let w0 = ParamVector::new(vec![1.0], layout.clone()).unwrap();
        let mut payload = Payload::with_global(0, w0.clone());
        payload.control = Some(ParamVector::new(vec![0.3], layout.clone()).unwrap());
        let mut state = ClientState::new(0);
        state.control = Some(ParamVector::new(vec![0.5], layout).unwrap());
        let strat = Scaffold { refresh: ControlRefresh::GradAtEnd, rescale: None };
        let ctx = quad_ctx(&ds, 0, 1, 0.1);
        let (uplink, _) = strat.client_update(&ctx, &payload, &state).unwrap();
        let w1 = uplink.model.unwrap().values[0];
        assert!((w1 - 0.82).abs() < 1e-15, "got {w1}");
    }

    #[test]
    fn scaffold_identity_rescale_matches_plain() {
        let ds = gen_quadratic_clients(&[1.0, 3.0], &[0.0, 1.0], 1).unwrap();
        let layout = ds.model.layout();
        let w0 = ParamVector::new(vec![0.2], layout.clone()).unwrap();
        let mut payload = Payload::with_global(0, w0);
        payload.control = Some(ParamVector::new(vec![0.0], layout).unwrap());
        let plain = Scaffold { refresh: ControlRefresh::GradAtEnd, rescale: None };
        let scaled = Scaffold { refresh: ControlRefresh::GradAtEnd, rescale: Some(vec![1.0]) };
        let state = ClientState::new(0);
        for client in 0..2 {
            let ctx = quad_ctx(&ds, client, 3, 0.1);
            let (a, _) = plain.client_update(&ctx, &payload, &state).unwrap();
            let (b, _) = scaled.client_update(&ctx, &payload, &state).unwrap();
            assert_eq!(a.model.unwrap().values, b.model.unwrap().values);
        }
    }

    #[test]
    fn fedprox_local_fixed_point() {
        // h=1, a=1, mu=1, anchor 0: argmin is (h a + mu w0)/(h + mu) = 0.5.
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let layout = ds.model.layout();
        let payload = Payload::with_global(0, ParamVector::new(vec![0.0], layout).unwrap());
        let strat = FedProx { mu: 1.0 };
        let state = ClientState::new(0);
        let ctx = quad_ctx(&ds, 0, 4000, 0.1);
        let (uplink, _) = strat.client_update(&ctx, &payload, &state).unwrap();
        let w = uplink.model.unwrap().values[0];
        assert!((w - 0.5).abs() < 1e-10, "got {w}");
    }

    #[test]
    fn dane_correction_vanishes_when_homogeneous() {
        // Two identical clients: grad F_i(w_ref) == mean grad, so the DANE
        // pass must match a FedProx pass with the same mu.
        let ds = gen_quadratic_clients(&[2.0, 2.0], &[0.7, 0.7], 1).unwrap();
        let layout = ds.model.layout();
        let w_ref = ParamVector::new(vec![0.1], layout.clone()).unwrap();
        let mean_grad =
            model::gradient(&ds.model, &w_ref, &ds.clients[0].train, &[0]).unwrap();
        let mut payload = Payload::with_global(0, w_ref);
        payload.mean_ref_grad = Some(mean_grad);
        let dane = Dane { mu: 0.5 };
        let prox = FedProx { mu: 0.5 };
        let state = ClientState::new(0);
        let ctx = quad_ctx(&ds, 0, 5, 0.1);
        let (a, _) = dane.client_update(&ctx, &payload, &state).unwrap();
        let (b, _) = prox.client_update(&ctx, &payload, &state).unwrap();
        let (av, bv) = (a.model.unwrap().values, b.model.unwrap().values);
        assert!((av[0] - bv[0]).abs() < 1e-12, "{av:?} vs {bv:?}");
    }

    #[test]
    fn fedpd_exact_local_argmin() {
        // h=1, a=1, mu=1, lambda=0, anchor 0: argmin of the augmented
        // Lagrangian is (h a - lambda + mu w0)/(h + mu) = 0.5.
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let layout = ds.model.layout();
        let mut payload = Payload::with_global(0, ParamVector::new(vec![0.0], layout).unwrap());
        payload.flag = true;
        let strat = FedPd { mu: 1.0, p: 0.0 };
        let state = ClientState::new(0);
        let ctx = quad_ctx(&ds, 0, 4000, 0.1);
        let (_, new_state) = strat.client_update(&ctx, &payload, &state).unwrap();
        let w = new_state.personal.unwrap().values[0];
        assert!((w - 0.5).abs() < 1e-10, "got {w}");
        // lambda <- 0 + mu (w - 0) = 0.5; anchor <- w + lambda/mu = 1.0.
        let lam = new_state.dual.unwrap().values[0];
        let anchor = new_state.anchor.unwrap().values[0];
        assert!((lam - 0.5).abs() < 1e-9);
        assert!((anchor - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fedsplit_prox_closed_form() {
        // h=1, a=1, mu=1, w=0, z=0: reflected point v=0, prox target
        // (h a + mu v)/(h + mu) = 0.5, and z' = z + 2(prox - w) = 1.0.
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let layout = ds.model.layout();
        let payload = Payload::with_global(0, ParamVector::new(vec![0.0], layout).unwrap());
        let strat = FedSplit { mu: 1.0 };
        let state = ClientState::new(0);
        let ctx = quad_ctx(&ds, 0, 4000, 0.1);
        let (uplink, new_state) = strat.client_update(&ctx, &payload, &state).unwrap();
        let z = uplink.model.unwrap().values[0];
        assert!((z - 1.0).abs() < 1e-9, "got {z}");
        assert_eq!(new_state.anchor.unwrap().values[0], z);
    }

    #[test]
    fn feddyn_stays_put_under_huge_mu() {
        let ds = gen_quadratic_clients(&[1.0], &[1.0], 1).unwrap();
        let layout = ds.model.layout();
        let w0 = ParamVector::new(vec![0.3], layout).unwrap();
        let payload = Payload::with_global(0, w0.clone());
        let strat = FedDyn { mu: 1e9 };
        let state = ClientState::new(0);
        let ctx = quad_ctx(&ds, 0, 10, 1e-10);
        let (uplink, _) = strat.client_update(&ctx, &payload, &state).unwrap();
        let w = uplink.model.unwrap().values[0];
        assert!((w - 0.3).abs() < 1e-6, "moved to {w}");
    }
}
