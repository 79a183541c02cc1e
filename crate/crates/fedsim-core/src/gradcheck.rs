//! Finite-difference verification of every analytic derivative the crate
//! exposes: plain gradients, Fisher diagonals, and the unrolled meta
//! gradients. Each op is checked over randomized models, data, and
//! evaluation points; the harness also supports deliberate corruption to
//! prove it can catch a wrong derivative.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FedError, Result};
use crate::model::{self, Activation, DataSplit, LossKind, ModelFamily, ModelSpec, Targets};
use crate::param::ParamVector;
use crate::rng::substream;
use crate::strategies::meta::{
    metasgd_joint_gradient, meta_split, perfedavg_meta_gradient, perfedavg_meta_loss, MetaOrder,
};

/// Verdict for one op on one model family, maximized over all trials.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const FAMILIES: [&str; 3] = ["linear", "logistic", "mlp"];

fn fd_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &DataSplit,
    idx: &[usize],
) -> Result<ParamVector> {
    let mut out = params.zeros_like();
    for j in 0..params.dim() {
        let h = 1e-6 * (1.0 + params.values[j].abs());
        let mut wp = params.clone();
        wp.values[j] += h;
        let mut wm = params.clone();
        wm.values[j] -= h;
        out.values[j] = (model::loss(spec, &wp, data, idx)? - model::loss(spec, &wm, data, idx)?) / (2.0 * h);
    }
    Ok(out)
}

fn rel_err(analytic: &ParamVector, reference: &ParamVector) -> f64 {
    let mut diff = analytic.clone();
    diff.axpy(-1.0, reference).expect("layouts match by construction");
    diff.norm() / reference.norm().max(1e-12)
}

/// A random (spec, data, params) triple for the family.
fn random_trial(family: &str, rng: &mut ChaCha8Rng) -> Result<(ModelSpec, DataSplit)> {
    let n: usize = rng.random_range(2..=6);
    match family {
        "linear" => {
            let input_dim = rng.random_range(1..=3);
            let output_dim = rng.random_range(1..=2);
            let spec = ModelSpec {
                family: ModelFamily::Linear,
                input_dim,
                output_dim,
                hidden_dims: vec![],
                activation: Activation::Tanh,
                loss: LossKind::SquaredError,
                bias: rng.random::<f64>() < 0.5,
            };
            let inputs: Vec<f64> = (0..n * input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let targets: Vec<f64> = (0..n * output_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            Ok((spec, DataSplit::new(inputs, Targets::Values(targets), input_dim)?))
        }
        "logistic" => {
            let input_dim = rng.random_range(2..=3);
            let classes = rng.random_range(2..=4);
            let spec = ModelSpec {
                family: ModelFamily::Logistic,
                input_dim,
                output_dim: classes,
                hidden_dims: vec![],
                activation: Activation::Tanh,
                loss: LossKind::CrossEntropy,
                bias: rng.random::<f64>() < 0.5,
            };
            let inputs: Vec<f64> = (0..n * input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            Ok((spec, DataSplit::new(inputs, Targets::Classes(targets), input_dim)?))
        }
        "mlp" => {
            let input_dim = rng.random_range(1..=2);
            let hidden = rng.random_range(2..=4);
            let spec = ModelSpec {
                family: ModelFamily::Mlp,
                input_dim,
                output_dim: 1,
                hidden_dims: vec![hidden],
                activation: Activation::Tanh,
                loss: LossKind::SquaredError,
                bias: true,
            };
            let inputs: Vec<f64> = (0..n * input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            Ok((spec, DataSplit::new(inputs, Targets::Values(targets), input_dim)?))
        }
        other => Err(FedError::config(format!("gradcheck: unknown family {other:?}"))),
    }
}

struct OpCheck {
    name: &'static str,
    tolerance: f64,
}

const OPS: [OpCheck; 5] = [
    OpCheck { name: "gradient", tolerance: 1e-5 },
    OpCheck { name: "hvp", tolerance: 1e-4 },
    OpCheck { name: "fisher_diag", tolerance: 1e-8 },
    OpCheck { name: "meta_gradient", tolerance: 1e-4 },
    OpCheck { name: "metasgd_joint", tolerance: 1e-4 },
];

fn check_once(
    op: &str,
    spec: &ModelSpec,
    data: &DataSplit,
    params: &ParamVector,
    corrupt: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let idx = data.all_indices();
    match op {
        "gradient" => {
            let mut g = model::gradient(spec, params, data, &idx)?;
            if corrupt {
                g.values[0] += 1e-3;
            }
            let fd = fd_gradient(spec, params, data, &idx)?;
            Ok(rel_err(&g, &fd))
        }
        "hvp" => {
            // Random direction (a patterned one can land in the softmax
            // shift-invariance null space); the oracle is a second-level
            // central difference over the loss-only FD gradient, sharing
            // no code with the analytic gradient.
            let mut v = params.zeros_like();
            for x in v.values.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
            let scale = 1.0 / v.norm().max(1e-12);
            let v = v.scale(scale);
            let hv = model::hvp(spec, params, data, &idx, &v)?;
            let h = 1e-4 * (1.0 + params.norm());
            let mut wp = params.clone();
            wp.axpy(h, &v)?;
            let mut wm = params.clone();
            wm.axpy(-h, &v)?;
            let gp = fd_gradient(spec, &wp, data, &idx)?;
            let gm = fd_gradient(spec, &wm, data, &idx)?;
            let mut oracle = gp;
            oracle.axpy(-1.0, &gm)?;
            let inv = 1.0 / (2.0 * h);
            let oracle = oracle.scale(inv);
            Ok(rel_err(&hv, &oracle))
        }
        "fisher_diag" => {
            // Oracle: the mean of per-example squared gradients, assembled
            // one example at a time.
            let fi = model::fisher_diag(spec, params, data, &idx)?;
            let mut oracle = params.zeros_like();
            for &i in &idx {
                let gi = model::gradient(spec, params, data, &[i])?;
                for (o, g) in oracle.values.iter_mut().zip(&gi.values) {
                    *o += g * g;
                }
            }
            for o in oracle.values.iter_mut() {
                *o /= idx.len() as f64;
            }
            Ok(rel_err(&fi, &oracle))
        }
        "meta_gradient" => {
            let eta = 0.05;
            let steps = 2;
            let g = perfedavg_meta_gradient(spec, data, &idx, params, eta, steps, MetaOrder::Second)?;
            let mut fd = params.zeros_like();
            for j in 0..params.dim() {
                let h = 1e-5 * (1.0 + params.values[j].abs());
                let mut wp = params.clone();
                wp.values[j] += h;
                let mut wm = params.clone();
                wm.values[j] -= h;
                fd.values[j] = (perfedavg_meta_loss(spec, data, &idx, &wp, eta, steps)?
                    - perfedavg_meta_loss(spec, data, &idx, &wm, eta, steps)?)
                    / (2.0 * h);
            }
            Ok(rel_err(&g, &fd))
        }
        "metasgd_joint" => {
            let (train_idx, val_idx) = meta_split(data.n);
            let mut eta = params.zeros_like();
            for (j, e) in eta.values.iter_mut().enumerate() {
                *e = 0.02 + 0.01 * (j % 3) as f64;
            }
            let (gw, ge) = metasgd_joint_gradient(spec, data, &train_idx, &val_idx, params, &eta)?;
            let outer = |w: &ParamVector, e: &ParamVector| -> Result<f64> {
                let g = model::gradient(spec, w, data, &train_idx)?;
                let mut adapted = w.clone();
                for ((a, ei), gi) in adapted.values.iter_mut().zip(&e.values).zip(&g.values) {
                    *a -= ei * gi;
                }
                model::loss(spec, &adapted, data, &val_idx)
            };
            let mut worst = 0.0f64;
            let mut fd_w = params.zeros_like();
            for j in 0..params.dim() {
                let h = 1e-5 * (1.0 + params.values[j].abs());
                let mut wp = params.clone();
                wp.values[j] += h;
                let mut wm = params.clone();
                wm.values[j] -= h;
                fd_w.values[j] = (outer(&wp, &eta)? - outer(&wm, &eta)?) / (2.0 * h);
            }
            worst = worst.max(rel_err(&gw, &fd_w));
            let mut fd_e = eta.zeros_like();
            for j in 0..eta.dim() {
                let h = 1e-5 * (1.0 + eta.values[j].abs());
                let mut ep = eta.clone();
                ep.values[j] += h;
                let mut em = eta.clone();
                em.values[j] -= h;
                fd_e.values[j] = (outer(params, &ep)? - outer(params, &em)?) / (2.0 * h);
            }
            worst = worst.max(rel_err(&ge, &fd_e));
            Ok(worst)
        }
        other => Err(FedError::config(format!("gradcheck: unknown op {other:?}"))),
    }
}

/// Runs every op over `trials` randomized instances per model family.
/// `family` limits the run; `corrupt` injects a deliberate error into the
/// analytic gradient so the harness demonstrably fails.
pub fn run_gradcheck(
    family: Option<&str>,
    trials: usize,
    seed: u64,
    corrupt: bool,
) -> Result<Vec<GradCheckReport>> {
    let families: Vec<&str> = match family {
        None | Some("all") => FAMILIES.to_vec(),
        Some(f) if FAMILIES.contains(&f) => vec![f],
        Some(f) => {
            return Err(FedError::config(format!(
                "gradcheck.family: unknown family {f:?} (linear, logistic, mlp, all)"
            )))
        }
    };
    if trials == 0 {
        return Ok(Vec::new());
    }
    let mut reports = Vec::new();
    for op in &OPS {
        for fam in &families {
            let mut worst = 0.0f64;
            for t in 0..trials {
                let mut rng = substream(seed, "gradcheck", t as u64, reports.len() as u64);
                let (spec, data) = random_trial(fam, &mut rng)?;
                let mut params = model::init_params(&spec, &mut rng);
                for v in params.values.iter_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
                let err = check_once(op.name, &spec, &data, &params, corrupt, &mut rng)?;
                worst = worst.max(err);
            }
            reports.push(GradCheckReport {
                op: format!("{}/{fam}", op.name),
                trials,
                max_rel_err: worst,
                tolerance: op.tolerance,
                pass: worst < op.tolerance,
            });
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ops_pass_on_all_families() {
        let reports = run_gradcheck(None, 5, 42, false).unwrap();
        assert_eq!(reports.len(), 15);
        for r in &reports {
            assert!(r.pass, "{} exceeded tolerance: {} >= {}", r.op, r.max_rel_err, r.tolerance);
        }
    }

    #[test]
    fn corruption_is_caught() {
        let reports = run_gradcheck(Some("linear"), 3, 42, true).unwrap();
        let g = reports.iter().find(|r| r.op == "gradient/linear").unwrap();
        assert!(!g.pass, "corrupted gradient slipped through");
    }

    #[test]
    fn unknown_family_is_rejected() {
        assert!(run_gradcheck(Some("transformer"), 1, 0, false).is_err());
    }
}
