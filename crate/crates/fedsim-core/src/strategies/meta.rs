//! Meta-learning strategies: Per-FedAvg (MAML-style initialization
//! learning) and MetaSGD (jointly learned coordinate-wise inner step).

use crate::error::{FedError, Result};
use crate::model::{self, DataSplit, ModelSpec};
use crate::param::{weighted_average, ParamVector};

use super::personal::ttp_finetune;
use super::personal::TtpVariant;
use super::{
    delta_average_step, plain_local_sgd, AggCtx, ClientCtx, ClientState, EvalCtx, EvalModel,
    Hypers, InitCtx, Payload, RoundCtx, ServerState, Strategy, StrategyInfo, Uplink,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaOrder {
    /// Full meta-gradient with the Hessian correction.
    Second,
    /// Drops the Hessian term: the gradient at the adapted point.
    First,
}

/// The Per-FedAvg meta-gradient on the given examples: unrolls `steps`
/// inner gradient steps of size `eta` and backpropagates through them,
/// i.e. prod_k (I - eta H(w_k)) applied to the gradient at the adapted
/// point. `First` order returns that gradient unmodified.
pub fn perfedavg_meta_gradient(
    spec: &ModelSpec,
    data: &DataSplit,
    idx: &[usize],
    w: &ParamVector,
    eta: f64,
    steps: usize,
    order: MetaOrder,
) -> Result<ParamVector> {
    let mut path = vec![w.clone()];
    for k in 0..steps {
        let g = model::gradient(spec, &path[k], data, idx)?;
        let mut next = path[k].clone();
        next.axpy(-eta, &g)?;
        path.push(next);
    }
    let mut g = model::gradient(spec, &path[steps], data, idx)?;
    if order == MetaOrder::First {
        return Ok(g);
    }
    for k in (0..steps).rev() {
        let h = model::hvp(spec, &path[k], data, idx, &g)?;
        g.axpy(-eta, &h)?;
    }
    Ok(g)
}

/// The scalar meta-loss behind the meta-gradient: the loss at the point
/// reached by `steps` inner gradient steps. Used by finite-difference
/// oracles.
pub fn perfedavg_meta_loss(
    spec: &ModelSpec,
    data: &DataSplit,
    idx: &[usize],
    w: &ParamVector,
    eta: f64,
    steps: usize,
) -> Result<f64> {
    let mut cur = w.clone();
    for _ in 0..steps {
        let g = model::gradient(spec, &cur, data, idx)?;
        cur.axpy(-eta, &g)?;
    }
    model::loss(spec, &cur, data, idx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaSchedule {
    MetaOnly,
    /// Plain FedAvg for the first `fraction` of the rounds, then the
    /// meta-gradient phase.
    FedAvgThenMeta { fraction: f64 },
}

/// Per-FedAvg: clients uplink meta-gradients of the MAML objective and the
/// server takes a gradient step; evaluation adapts the model on the
/// client's training data first.
pub struct PerFedAvg {
    pub order: MetaOrder,
    pub inner_steps: usize,
    pub adapt_steps: usize,
    pub schedule: MetaSchedule,
}

impl PerFedAvg {
    fn fedavg_phase(&self, round: usize, total: usize) -> bool {
        match self.schedule {
            MetaSchedule::MetaOnly => false,
            MetaSchedule::FedAvgThenMeta { fraction } => (round as f64) < fraction * total as f64,
        }
    }
}

impl Strategy for PerFedAvg {
    fn name(&self) -> &'static str {
        "perfedavg"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        Ok(ServerState::new(ctx.init.clone()))
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut p = Payload::with_global(ctx.round, server.global.clone());
        p.flag = self.fedavg_phase(ctx.round, ctx.total_rounds);
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w = payload.global.as_ref().expect("perfedavg broadcasts a global");
        if payload.flag {
            let trained = plain_local_sgd(ctx, w)?;
            return Ok((Uplink { model: Some(trained), ..Default::default() }, state.clone()));
        }
        let idx = ctx.train_idx();
        let g = perfedavg_meta_gradient(ctx.spec, ctx.train(), &idx, w, ctx.lr, self.inner_steps, self.order)?;
        Ok((Uplink { grad: Some(g), ..Default::default() }, state.clone()))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        if uplinks.iter().any(|(_, u)| u.model.is_some()) {
            let pairs: Vec<(&ParamVector, f64)> = uplinks
                .iter()
                .map(|(id, u)| (u.model.as_ref().expect("fedavg-phase uplinks carry models"), ctx.weights[*id]))
                .collect();
            return delta_average_step(&mut server.global, &pairs, ctx.lr_server);
        }
        let grads: Vec<&ParamVector> = uplinks
            .iter()
            .map(|(_, u)| u.grad.as_ref().expect("meta-phase uplinks carry gradients"))
            .collect();
        let ones = vec![1.0; grads.len()];
        let mean = weighted_average(&grads, &ones)?;
        server.global.axpy(-ctx.lr_server, &mean)
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        let adapted = ttp_finetune(
            ctx.spec,
            &ctx.server.global,
            &ctx.data.train,
            self.adapt_steps,
            ctx.lr_local,
            TtpVariant::Plain,
        )?;
        Ok(EvalModel::Params(adapted))
    }
}

/// Splits a client's training examples into meta-train (even positions)
/// and meta-validation (odd positions). A single example lands in both.
pub fn meta_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), (0..n).collect());
    }
    let train = (0..n).step_by(2).collect();
    let val = (1..n).step_by(2).collect();
    (train, val)
}

/// The MetaSGD joint gradient at (w, eta): inner rule
/// `adapted = w - eta o grad_train(w)`, outer objective the validation
/// loss at the adapted point. Returns (d/dw, d/deta).
pub fn metasgd_joint_gradient(
    spec: &ModelSpec,
    data: &DataSplit,
    train_idx: &[usize],
    val_idx: &[usize],
    w: &ParamVector,
    eta: &ParamVector,
) -> Result<(ParamVector, ParamVector)> {
    let g_tr = model::gradient(spec, w, data, train_idx)?;
    let mut adapted = w.clone();
    for ((a, e), g) in adapted.values.iter_mut().zip(&eta.values).zip(&g_tr.values) {
        *a -= e * g;
    }
    let u = model::gradient(spec, &adapted, data, val_idx)?;
    // d/dw: (I - H(w) diag(eta)) u = u - hvp(w, eta o u).
    let mut dir = u.clone();
    for (d, e) in dir.values.iter_mut().zip(&eta.values) {
        *d *= e;
    }
    let h = model::hvp(spec, w, data, train_idx, &dir)?;
    let mut grad_w = u.clone();
    grad_w.axpy(-1.0, &h)?;
    // d/deta: -grad_train(w) o u.
    let mut grad_eta = g_tr;
    for (ge, ui) in grad_eta.values.iter_mut().zip(&u.values) {
        *ge = -*ge * ui;
    }
    Ok((grad_w, grad_eta))
}

/// MetaSGD: learns the initialization and a coordinate-wise inner step
/// jointly. Clients hold out the odd-indexed examples for meta-validation.
pub struct MetaSgd {
    pub freeze_lr: bool,
}

impl Strategy for MetaSgd {
    fn name(&self) -> &'static str {
        "metasgd"
    }

    fn init_server(&self, ctx: &InitCtx) -> Result<ServerState> {
        let mut state = ServerState::new(ctx.init.clone());
        let mut eta = ctx.init.zeros_like();
        eta.values.iter_mut().for_each(|e| *e = ctx.lr_local);
        state.meta_lr = Some(eta);
        Ok(state)
    }

    fn round_payload(&self, server: &ServerState, _sel: &[usize], ctx: &RoundCtx) -> Result<Payload> {
        let mut p = Payload::with_global(ctx.round, server.global.clone());
        p.meta_lr = Some(server.meta_lr.clone().expect("metasgd keeps the step vector"));
        Ok(p)
    }

    fn client_update(&self, ctx: &ClientCtx, payload: &Payload, state: &ClientState) -> Result<(Uplink, ClientState)> {
        let w = payload.global.as_ref().expect("metasgd broadcasts a global");
        let eta = payload.meta_lr.as_ref().expect("metasgd broadcasts the step vector");
        let (train_idx, val_idx) = meta_split(ctx.train().n);
        let (grad_w, grad_eta) = metasgd_joint_gradient(ctx.spec, ctx.train(), &train_idx, &val_idx, w, eta)?;
        Ok((
            Uplink { grad: Some(grad_w), grad2: Some(grad_eta), ..Default::default() },
            state.clone(),
        ))
    }

    fn aggregate(&self, server: &mut ServerState, uplinks: &[(usize, Uplink)], ctx: &AggCtx) -> Result<()> {
        let gw: Vec<&ParamVector> = uplinks
            .iter()
            .map(|(_, u)| u.grad.as_ref().expect("metasgd uplink carries d/dw"))
            .collect();
        let ones = vec![1.0; gw.len()];
        let mean_w = weighted_average(&gw, &ones)?;
        server.global.axpy(-ctx.lr_server, &mean_w)?;
        if !self.freeze_lr {
            let ge: Vec<&ParamVector> = uplinks
                .iter()
                .map(|(_, u)| u.grad2.as_ref().expect("metasgd uplink carries d/deta"))
                .collect();
            let mean_e = weighted_average(&ge, &ones)?;
            let eta = server.meta_lr.as_mut().expect("metasgd keeps the step vector");
            eta.axpy(-ctx.lr_server, &mean_e)?;
        }
        Ok(())
    }

    fn eval_model(&self, ctx: &EvalCtx) -> Result<EvalModel> {
        // Adapt with the learned coordinate-wise step on the client's
        // training data, then evaluate.
        let eta = ctx.server.meta_lr.as_ref().expect("metasgd keeps the step vector");
        let idx = ctx.data.train.all_indices();
        let g = model::gradient(ctx.spec, &ctx.server.global, &ctx.data.train, &idx)?;
        let mut adapted = ctx.server.global.clone();
        for ((a, e), gi) in adapted.values.iter_mut().zip(&eta.values).zip(&g.values) {
            *a -= e * gi;
        }
        Ok(EvalModel::Params(adapted))
    }
}

pub fn registry() -> Vec<StrategyInfo> {
    vec![
        StrategyInfo {
            name: "perfedavg",
            category: "meta",
            hypers: &[
                ("order", "\"second\"", "meta-gradient order: second or first"),
                ("inner_steps", "1", "unrolled adaptation steps in the meta-gradient"),
                ("adapt_steps", "1", "adaptation steps before evaluation"),
                ("schedule", "\"meta_only\"", "meta_only or fedavg_then_meta"),
                ("switch_fraction", "0.5", "FedAvg fraction under fedavg_then_meta"),
            ],
        },
        StrategyInfo {
            name: "metasgd",
            category: "meta",
            hypers: &[("freeze_lr", "false", "keep the step vector at its initialization")],
        },
    ]
}

pub fn build(name: &str, h: &Hypers) -> Option<Result<Box<dyn Strategy>>> {
    let built: Result<Box<dyn Strategy>> = match name {
        "perfedavg" => (|| {
            let order = match h.string("order", "second")?.as_str() {
                "second" => MetaOrder::Second,
                "first" => MetaOrder::First,
                other => {
                    return Err(FedError::config(format!(
                        "strategy.params.order: unknown order {other:?}"
                    )))
                }
            };
            let inner_steps = h.usize("inner_steps", 1)?;
            let adapt_steps = h.usize("adapt_steps", 1)?;
            if inner_steps == 0 {
                return Err(FedError::config("strategy.params.inner_steps: must be at least 1"));
            }
            let schedule = match h.string("schedule", "meta_only")?.as_str() {
                "meta_only" => {
                    h.f64("switch_fraction", 0.5)?; // accepted but unused
                    MetaSchedule::MetaOnly
                }
                "fedavg_then_meta" => {
                    let fraction = h.f64("switch_fraction", 0.5)?;
                    if !(0.0..=1.0).contains(&fraction) {
                        return Err(FedError::config(
                            "strategy.params.switch_fraction: must lie in [0, 1]",
                        ));
                    }
                    MetaSchedule::FedAvgThenMeta { fraction }
                }
                other => {
                    return Err(FedError::config(format!(
                        "strategy.params.schedule: unknown schedule {other:?}"
                    )))
                }
            };
            Ok(Box::new(PerFedAvg { order, inner_steps, adapt_steps, schedule }) as Box<dyn Strategy>)
        })(),
        "metasgd" => (|| {
            let freeze_lr = h.bool("freeze_lr", false)?;
            Ok(Box::new(MetaSgd { freeze_lr }) as Box<dyn Strategy>)
        })(),
        _ => return None,
    };
    Some(built)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_quadratic_clients;
    use crate::model::{Targets};

    #[test]
    fn meta_gradient_quadratic_closed_form() {
        // F = h (w - a)^2 / 2: meta-grad = (1 - eta h)^2 h (w - a).
        // h=1, eta=0.1, w=1, a=0 -> 0.81.
        let ds = gen_quadratic_clients(&[1.0], &[0.0], 1).unwrap();
        let w = ParamVector::new(vec![1.0], ds.model.layout()).unwrap();
        let idx = ds.clients[0].train.all_indices();
        let g = perfedavg_meta_gradient(&ds.model, &ds.clients[0].train, &idx, &w, 0.1, 1, MetaOrder::Second)
            .unwrap();
        assert!((g.values[0] - 0.81).abs() < 1e-9, "got {}", g.values[0]);
        // eta = 0 collapses to the plain gradient.
        let g0 = perfedavg_meta_gradient(&ds.model, &ds.clients[0].train, &idx, &w, 0.0, 1, MetaOrder::Second)
            .unwrap();
        assert!((g0.values[0] - 1.0).abs() < 1e-9);
        // First order drops one (1 - eta h) factor: 0.9.
        let g1 = perfedavg_meta_gradient(&ds.model, &ds.clients[0].train, &idx, &w, 0.1, 1, MetaOrder::First)
            .unwrap();
        assert!((g1.values[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn multi_step_meta_gradient_quadratic() {
        // Each unrolled step contributes (1 - eta h) twice: once in the
        // forward contraction of (w - a), once in the backward Jacobian.
        // Two steps: (1 - eta h)^4 h (w - a) = 0.6561 at the same inputs.
        let ds = gen_quadratic_clients(&[1.0], &[0.0], 1).unwrap();
        let w = ParamVector::new(vec![1.0], ds.model.layout()).unwrap();
        let idx = ds.clients[0].train.all_indices();
        let g = perfedavg_meta_gradient(&ds.model, &ds.clients[0].train, &idx, &w, 0.1, 2, MetaOrder::Second)
            .unwrap();
        assert!((g.values[0] - 0.6561).abs() < 1e-9, "got {}", g.values[0]);
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let ds = gen_quadratic_clients(&[2.0], &[0.5], 1).unwrap();
        let w = ParamVector::new(vec![1.3], ds.model.layout()).unwrap();
        let idx = ds.clients[0].train.all_indices();
        let g = perfedavg_meta_gradient(&ds.model, &ds.clients[0].train, &idx, &w, 0.07, 2, MetaOrder::Second)
            .unwrap();
        let h = 1e-6;
        let mut wp = w.clone();
        wp.values[0] += h;
        let mut wm = w.clone();
        wm.values[0] -= h;
        let fp = perfedavg_meta_loss(&ds.model, &ds.clients[0].train, &idx, &wp, 0.07, 2).unwrap();
        let fm = perfedavg_meta_loss(&ds.model, &ds.clients[0].train, &idx, &wm, 0.07, 2).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        assert!((g.values[0] - fd).abs() / fd.abs().max(1e-12) < 1e-4);
    }

    #[test]
    fn meta_split_even_odd() {
        assert_eq!(meta_split(5), (vec![0, 2, 4], vec![1, 3]));
        assert_eq!(meta_split(1), (vec![0], vec![0]));
    }

    #[test]
    fn metasgd_elementwise_adaptation_shift() {
        // Linear model without bias, x=(1,1), y=-1 at w=(0,0): residual 1,
        // gradient (1,1). With eta=(0.1,-0.2) the adapted shift must be
        // (-0.1, +0.2).
        use crate::model::{Activation, LossKind, ModelFamily, ModelSpec};
        let spec = ModelSpec {
            family: ModelFamily::Linear,
            input_dim: 2,
            output_dim: 1,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            loss: LossKind::SquaredError,
            bias: false,
        };
        let data = DataSplit::new(vec![1.0, 1.0], Targets::Values(vec![-1.0]), 2).unwrap();
        let layout = spec.layout();
        let w = ParamVector::new(vec![0.0, 0.0], layout.clone()).unwrap();
        let eta = ParamVector::new(vec![0.1, -0.2], layout).unwrap();
        let g = model::gradient(&spec, &w, &data, &[0]).unwrap();
        assert_eq!(g.values, vec![1.0, 1.0]);
        let mut adapted = w.clone();
        for ((a, e), gi) in adapted.values.iter_mut().zip(&eta.values).zip(&g.values) {
            *a -= e * gi;
        }
        assert_eq!(adapted.values, vec![-0.1, 0.2]);
    }

    #[test]
    fn frozen_metasgd_matches_second_order_perfedavg() {
        // Duplicate every example so even/odd splits hold identical data;
        // then the frozen-step MetaSGD d/dw equals the Per-FedAvg
        // second-order meta-gradient with a scalar step.
        let ds = gen_quadratic_clients(&[1.5], &[0.4], 1).unwrap();
        let src = &ds.clients[0].train;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let Targets::Values(vals) = &src.targets else { panic!() };
        for i in 0..src.n {
            for _ in 0..2 {
                inputs.extend_from_slice(src.example(i));
                targets.push(vals[i]);
            }
        }
        let dup = DataSplit::new(inputs, Targets::Values(targets), src.input_dim).unwrap();
        let w = ParamVector::new(vec![1.1], ds.model.layout()).unwrap();
        let mut eta = w.zeros_like();
        eta.values[0] = 0.1;
        let (tr, va) = meta_split(dup.n);
        let (grad_w, _) = metasgd_joint_gradient(&ds.model, &dup, &tr, &va, &w, &eta).unwrap();
        let full: Vec<usize> = dup.all_indices();
        let pfa = perfedavg_meta_gradient(&ds.model, &dup, &full, &w, 0.1, 1, MetaOrder::Second).unwrap();
        assert!(
            (grad_w.values[0] - pfa.values[0]).abs() < 1e-8,
            "{} vs {}",
            grad_w.values[0],
            pfa.values[0]
        );
    }

    #[test]
    fn metasgd_joint_gradient_matches_finite_differences() {
        let ds = gen_quadratic_clients(&[2.0], &[1.0], 2).unwrap();
        let data = &ds.clients[0].train;
        let (tr, va) = meta_split(data.n);
        let layout = ds.model.layout();
        let w = ParamVector::new(vec![0.7], layout.clone()).unwrap();
        let eta = ParamVector::new(vec![0.13], layout).unwrap();
        let (gw, ge) = metasgd_joint_gradient(&ds.model, data, &tr, &va, &w, &eta).unwrap();
        let loss_at = |wv: f64, ev: f64| -> f64 {
            let mut wx = w.clone();
            wx.values[0] = wv;
            let g = model::gradient(&ds.model, &wx, data, &tr).unwrap();
            let mut adapted = wx.clone();
            adapted.values[0] -= ev * g.values[0];
            model::loss(&ds.model, &adapted, data, &va).unwrap()
        };
        let h = 1e-6;
        let fd_w = (loss_at(0.7 + h, 0.13) - loss_at(0.7 - h, 0.13)) / (2.0 * h);
        let fd_e = (loss_at(0.7, 0.13 + h) - loss_at(0.7, 0.13 - h)) / (2.0 * h);
        assert!((gw.values[0] - fd_w).abs() / fd_w.abs().max(1e-9) < 1e-4, "{} vs {fd_w}", gw.values[0]);
        assert!((ge.values[0] - fd_e).abs() / fd_e.abs().max(1e-9) < 1e-4, "{} vs {fd_e}", ge.values[0]);
    }
}
