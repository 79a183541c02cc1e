//! Synthetic federated datasets with analytically known structure, plus a
//! CSV loader that partitions rows into clients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::{Activation, DataSplit, LossKind, ModelFamily, ModelSpec, Targets};
use crate::rng::substream;

/// Ground-truth bookkeeping a generator leaves behind for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientTruth {
    Quadratic { h: f64, a: f64 },
    Sine { phase: f64 },
    LabelSkew { proportions: Vec<f64> },
    Cluster { group: usize, params: Vec<f64> },
}

/// One client's local data: a train split, a held-out test split, and a
/// fairness group label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub id: usize,
    pub train: DataSplit,
    pub test: DataSplit,
    pub group: usize,
    pub truth: Option<ClientTruth>,
}

/// A federation-ready dataset: clients plus the model family it targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub name: String,
    pub model: ModelSpec,
    pub clients: Vec<ClientDataset>,
}

impl FederatedDataset {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    /// Number of distinct fairness groups (`max group + 1`).
    pub fn n_groups(&self) -> usize {
        self.clients.iter().map(|c| c.group).max().map_or(0, |g| g + 1)
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.clients.is_empty() {
            return Err(FedError::domain("dataset: no clients"));
        }
        for c in &self.clients {
            if c.train.n == 0 {
                return Err(FedError::domain(format!("dataset: client {} has no training data", c.id)));
            }
            for split in [&c.train, &c.test] {
                if split.input_dim != self.model.input_dim {
                    return Err(FedError::domain(format!(
                        "dataset: client {} input_dim {} != model input_dim {}",
                        c.id, split.input_dim, self.model.input_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Clients whose local loss under the no-bias linear model is exactly
/// `h_i/2 * (w - a_i)^2`, realized by `n_per_client` copies of the point
/// `(x, y) = (sqrt(h_i), sqrt(h_i) * a_i)`.
pub fn gen_quadratic_clients(h: &[f64], a: &[f64], n_per_client: usize) -> Result<FederatedDataset> {
    if h.is_empty() || h.len() != a.len() {
        return Err(FedError::domain("quadratic: h and a must be equal-length and nonempty"));
    }
    if n_per_client == 0 {
        return Err(FedError::domain("quadratic: n_per_client must be positive"));
    }
    if h.iter().any(|&hi| hi <= 0.0 || !hi.is_finite()) {
        return Err(FedError::domain("quadratic: curvatures h must be positive and finite"));
    }
    let model = ModelSpec {
        family: ModelFamily::Linear,
        input_dim: 1,
        output_dim: 1,
        hidden_dims: vec![],
        activation: Activation::Tanh,
        loss: LossKind::SquaredError,
        bias: false,
    };
    let clients = h
        .iter()
        .zip(a)
        .enumerate()
        .map(|(i, (&hi, &ai))| {
            let x = hi.sqrt();
            let y = x * ai;
            let inputs = vec![x; n_per_client];
            let targets = Targets::Values(vec![y; n_per_client]);
            let split = DataSplit::new(inputs, targets, 1).expect("consistent by construction");
            ClientDataset {
                id: i,
                train: split.clone(),
                test: split,
                group: 0,
                truth: Some(ClientTruth::Quadratic { h: hi, a: ai }),
            }
        })
        .collect();
    Ok(FederatedDataset { name: "quadratic".to_string(), model, clients })
}

/// Global optimum of the mean quadratic loss: `sum(h_i a_i) / sum(h_i)`.
pub fn quadratic_global_optimum(h: &[f64], a: &[f64]) -> f64 {
    let num: f64 = h.iter().zip(a).map(|(hi, ai)| hi * ai).sum();
    num / h.iter().sum::<f64>()
}

/// Phase-shifted sine regression: client i draws `x ~ U[0,1)` and observes
/// `y = sin(2 pi (x + phase_i)) + noise`, with `phase_i ~ U[0,1)` unless
/// explicit phases are given. Targets a small tanh MLP.
pub fn gen_sine_clients(
    n_clients: usize,
    n_train: usize,
    n_test: usize,
    noise_sd: f64,
    hidden_dims: &[usize],
    seed: u64,
    phases: Option<&[f64]>,
) -> Result<FederatedDataset> {
    if n_clients == 0 || n_train == 0 || n_test == 0 {
        return Err(FedError::domain("sine: n_clients, n_train and n_test must be positive"));
    }
    if let Some(p) = phases {
        if p.len() != n_clients {
            return Err(FedError::domain("sine: phases length must match n_clients"));
        }
    }
    if noise_sd < 0.0 {
        return Err(FedError::domain("sine: noise_sd must be nonnegative"));
    }
    let model = ModelSpec {
        family: ModelFamily::Mlp,
        input_dim: 1,
        output_dim: 1,
        hidden_dims: hidden_dims.to_vec(),
        activation: Activation::Tanh,
        loss: LossKind::SquaredError,
        bias: true,
    };
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut clients = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let phase = match phases {
            Some(p) => p[i],
            None => substream(seed, "sine_phase", 0, i as u64).random_range(0.0..1.0),
        };
        let mut rx = substream(seed, "sine_x", 0, i as u64);
        let mut rn = substream(seed, "sine_noise", 0, i as u64);
        let mut make = |n: usize| {
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let x: f64 = rx.random_range(0.0..1.0);
                let mut y = (2.0 * std::f64::consts::PI * (x + phase)).sin();
                if noise_sd > 0.0 {
                    y += noise_sd * noise.sample(&mut rn);
                }
                xs.push(x);
                ys.push(y);
            }
            DataSplit::new(xs, Targets::Values(ys), 1).expect("consistent by construction")
        };
        let train = make(n_train);
        let test = make(n_test);
        clients.push(ClientDataset {
            id: i,
            train,
            test,
            group: 0,
            truth: Some(ClientTruth::Sine { phase }),
        });
    }
    Ok(FederatedDataset { name: "sine".to_string(), model, clients })
}

/// Largest-remainder apportionment of `total` into `props.len()` integer
/// counts proportional to `props`. Ties go to the lowest index.
fn apportion(total: usize, props: &[f64]) -> Vec<usize> {
    let sum: f64 = props.iter().sum();
    let shares: Vec<f64> = props.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = shares[i] - shares[i].floor();
        let fj = shares[j] - shares[j].floor();
        fj.partial_cmp(&fi).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    for k in 0..total - assigned {
        counts[order[k % props.len()]] += 1;
    }
    counts
}

/// Label-skew classification: class-conditional Gaussian blobs in the plane
/// with per-client class proportions drawn from `Dirichlet(alpha)`. Small
/// `alpha` concentrates clients on few classes; large `alpha` approaches
/// uniform class mixes. Every client receives at least one example.
pub fn gen_label_skew_classification(
    n_clients: usize,
    n_classes: usize,
    alpha: f64,
    total_train: usize,
    n_test_per_client: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    if n_clients == 0 || n_classes < 2 {
        return Err(FedError::domain("label_skew: need clients and at least 2 classes"));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(FedError::domain("label_skew: alpha must be positive and finite"));
    }
    if total_train < n_clients {
        return Err(FedError::domain(format!(
            "label_skew: infeasible allocation, {total_train} examples over {n_clients} clients needs at least one each"
        )));
    }
    if n_test_per_client == 0 {
        return Err(FedError::domain("label_skew: n_test_per_client must be positive"));
    }
    let model = ModelSpec {
        family: ModelFamily::Logistic,
        input_dim: 2,
        output_dim: n_classes,
        hidden_dims: vec![],
        activation: Activation::Tanh,
        loss: LossKind::CrossEntropy,
        bias: true,
    };
    // Class centers sit on a circle of radius 3; features add unit noise.
    let centers: Vec<(f64, f64)> = (0..n_classes)
        .map(|c| {
            let ang = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
            (3.0 * ang.cos(), 3.0 * ang.sin())
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    // Per-client quotas: as even as possible, remainder to low ids.
    let base = total_train / n_clients;
    let extra = total_train % n_clients;
    // Dirichlet(alpha) via normalized Gamma(alpha, 1) draws, which keeps
    // the class count a runtime value.
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedError::domain(format!("label_skew: {e}")))?;
    let mut clients = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let quota = base + usize::from(i < extra);
        let mut rp = substream(seed, "skew_prop", 0, i as u64);
        let draws: Vec<f64> = (0..n_classes).map(|_| gamma.sample(&mut rp).max(1e-300)).collect();
        let total: f64 = draws.iter().sum();
        let proportions: Vec<f64> = draws.iter().map(|d| d / total).collect();
        let train_counts = apportion(quota, &proportions);
        let test_counts = apportion(n_test_per_client, &proportions);
        let mut rx = substream(seed, "skew_x", 0, i as u64);
        let mut make = |counts: &[usize]| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (class, &count) in counts.iter().enumerate() {
                for _ in 0..count {
                    xs.push(centers[class].0 + unit.sample(&mut rx));
                    xs.push(centers[class].1 + unit.sample(&mut rx));
                    ys.push(class);
                }
            }
            DataSplit::new(xs, Targets::Classes(ys), 2).expect("consistent by construction")
        };
        let train = make(&train_counts);
        let test = make(&test_counts);
        clients.push(ClientDataset {
            id: i,
            train,
            test,
            // Individual fairness: each client is its own group.
            group: i,
            truth: Some(ClientTruth::LabelSkew { proportions }),
        });
    }
    Ok(FederatedDataset { name: "label_skew".to_string(), model, clients })
}

/// Concept-shift linear regression: `n_groups` ground truths, clients
/// assigned round-robin. Group g's truth is the constant vector with value
/// `1 - 2g/(G-1)` (so G=2 yields +1 and -1); G=1 uses +1.
pub fn gen_concept_shift_regression(
    n_clients: usize,
    n_groups: usize,
    n_train: usize,
    n_test: usize,
    input_dim: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    if n_clients == 0 || n_groups == 0 || n_groups > n_clients {
        return Err(FedError::domain("concept_shift: need 1 <= n_groups <= n_clients"));
    }
    if n_train == 0 || n_test == 0 || input_dim == 0 {
        return Err(FedError::domain("concept_shift: sizes must be positive"));
    }
    if noise_sd < 0.0 {
        return Err(FedError::domain("concept_shift: noise_sd must be nonnegative"));
    }
    let model = ModelSpec {
        family: ModelFamily::Linear,
        input_dim,
        output_dim: 1,
        hidden_dims: vec![],
        activation: Activation::Tanh,
        loss: LossKind::SquaredError,
        bias: false,
    };
    let truth_value = |g: usize| -> f64 {
        if n_groups == 1 {
            1.0
        } else {
            1.0 - 2.0 * g as f64 / (n_groups - 1) as f64
        }
    };
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut clients = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let group = i % n_groups;
        let truth = vec![truth_value(group); input_dim];
        let mut rx = substream(seed, "concept_x", 0, i as u64);
        let mut rn = substream(seed, "concept_noise", 0, i as u64);
        let mut make = |n: usize| {
            let mut xs = Vec::with_capacity(n * input_dim);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let x: Vec<f64> = (0..input_dim).map(|_| unit.sample(&mut rx)).collect();
                let mut y: f64 = x.iter().zip(&truth).map(|(xi, ti)| xi * ti).sum();
                if noise_sd > 0.0 {
                    y += noise_sd * unit.sample(&mut rn);
                }
                xs.extend(x);
                ys.push(y);
            }
            DataSplit::new(xs, Targets::Values(ys), input_dim).expect("consistent by construction")
        };
        let train = make(n_train);
        let test = make(n_test);
        clients.push(ClientDataset {
            id: i,
            train,
            test,
            group,
            truth: Some(ClientTruth::Cluster { group, params: truth }),
        });
    }
    Ok(FederatedDataset { name: "concept_shift".to_string(), model, clients })
}

/// Loads a CSV with a header row and partitions rows into one client per
/// distinct value of `partition_column` (clients ordered by sorted value).
/// All columns other than the partition, target, and optional group column
/// are numeric features; each client gets a seeded 80/20 train/test split.
pub fn load_csv_partition(
    path: &Path,
    partition_column: &str,
    target_column: &str,
    group_column: Option<&str>,
    seed: u64,
) -> Result<FederatedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| FedError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| FedError::Csv { row: 1, col: 1, msg: e.to_string() })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FedError::config(format!("csv: column {name:?} not found in header")))
    };
    let part_col = col_of(partition_column)?;
    let target_col = col_of(target_column)?;
    let group_col = group_column.map(col_of).transpose()?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != part_col && c != target_col && Some(c) != group_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(FedError::config("csv: no feature columns left"));
    }

    struct Row {
        features: Vec<f64>,
        target: f64,
        partition: String,
        group: Option<String>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row_no = r + 2; // 1-based, after the header
        let record = record.map_err(|e| FedError::Csv { row: row_no, col: 1, msg: e.to_string() })?;
        let parse = |c: usize| -> Result<f64> {
            record
                .get(c)
                .ok_or(FedError::Csv { row: row_no, col: c + 1, msg: "missing field".into() })?
                .trim()
                .parse::<f64>()
                .map_err(|e| FedError::Csv { row: row_no, col: c + 1, msg: e.to_string() })
        };
        let features = feature_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<f64>>>()?;
        let target = parse(target_col)?;
        let partition = record.get(part_col).unwrap_or("").to_string();
        let group = group_col.map(|c| record.get(c).unwrap_or("").to_string());
        rows.push(Row { features, target, partition, group });
    }
    if rows.is_empty() {
        return Err(FedError::domain("csv: no data rows"));
    }

    let mut partitions: Vec<String> = rows.iter().map(|r| r.partition.clone()).collect();
    partitions.sort();
    partitions.dedup();
    let mut group_values: Vec<String> =
        rows.iter().filter_map(|r| r.group.clone()).collect();
    group_values.sort();
    group_values.dedup();

    let input_dim = feature_cols.len();
    let model = ModelSpec {
        family: ModelFamily::Linear,
        input_dim,
        output_dim: 1,
        hidden_dims: vec![],
        activation: Activation::Tanh,
        loss: LossKind::SquaredError,
        bias: true,
    };
    let mut clients = Vec::with_capacity(partitions.len());
    for (id, part) in partitions.iter().enumerate() {
        let member_rows: Vec<&Row> = rows.iter().filter(|r| &r.partition == part).collect();
        if member_rows.len() < 2 {
            return Err(FedError::domain(format!(
                "csv: partition {part:?} has fewer than 2 rows, cannot split train/test"
            )));
        }
        let mut idx: Vec<usize> = (0..member_rows.len()).collect();
        idx.shuffle(&mut substream(seed, "csv_split", 0, id as u64));
        let n_test = (member_rows.len() / 5).max(1);
        let (test_idx, train_idx) = idx.split_at(n_test);
        let collect = |ids: &[usize]| {
            let mut xs = Vec::with_capacity(ids.len() * input_dim);
            let mut ys = Vec::with_capacity(ids.len());
            let mut sorted: Vec<usize> = ids.to_vec();
            sorted.sort_unstable();
            for &k in &sorted {
                xs.extend_from_slice(&member_rows[k].features);
                ys.push(member_rows[k].target);
            }
            DataSplit::new(xs, Targets::Values(ys), input_dim).expect("consistent by construction")
        };
        let group = match &member_rows[0].group {
            Some(g) => group_values.iter().position(|v| v == g).unwrap_or(0),
            None => 0,
        };
        clients.push(ClientDataset {
            id,
            train: collect(train_idx),
            test: collect(test_idx),
            group,
            truth: None,
        });
    }
    Ok(FederatedDataset { name: "csv".to_string(), model, clients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use crate::param::ParamVector;
    use std::io::Write;

    #[test]
    fn quadratic_realizes_analytic_loss() {
        let ds = gen_quadratic_clients(&[1.0, 3.0], &[0.0, 1.0], 1).unwrap();
        ds.validate().unwrap();
        let layout = ds.model.layout();
        for w in [-1.0, 0.0, 0.3, 2.0] {
            let pv = ParamVector::new(vec![w], layout.clone()).unwrap();
            for c in &ds.clients {
                let Some(ClientTruth::Quadratic { h, a }) = c.truth else { panic!() };
                let got =
                    model::loss(&ds.model, &pv, &c.train, &c.train.all_indices()).unwrap();
                let want = 0.5 * h * (w - a) * (w - a);
                assert!((got - want).abs() < 1e-12, "w={w}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn quadratic_optimum_examples() {
        // Equal curvatures: the optimum is the mean of the targets.
        assert!((quadratic_global_optimum(&[1.0, 1.0], &[0.0, 1.0]) - 0.5).abs() < 1e-15);
        assert!((quadratic_global_optimum(&[1.0, 3.0], &[0.0, 1.0]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn quadratic_rejects_bad_input() {
        assert!(gen_quadratic_clients(&[1.0], &[1.0, 2.0], 1).is_err());
        assert!(gen_quadratic_clients(&[0.0], &[1.0], 1).is_err());
        assert!(gen_quadratic_clients(&[-1.0], &[1.0], 1).is_err());
        assert!(gen_quadratic_clients(&[1.0], &[1.0], 0).is_err());
    }

    #[test]
    fn sine_zero_model_mse_is_quarter() {
        // The zero predictor's half-scaled MSE approaches E[sin^2]/2 = 0.25.
        let ds = gen_sine_clients(50, 40, 20, 0.0, &[8], 7, None).unwrap();
        let zero = ParamVector::zeros(ds.model.layout());
        let mut total = 0.0;
        let mut count = 0;
        for c in &ds.clients {
            let (l, _) = model::evaluate(&ds.model, &zero, &c.test, &c.test.all_indices()).unwrap();
            total += l * c.test.n as f64;
            count += c.test.n;
        }
        let mse = total / count as f64;
        assert!((mse - 0.25).abs() < 0.02, "zero-model mse {mse}");
    }

    #[test]
    fn sine_homogeneous_phases_give_identical_targets_fn() {
        let phases = vec![0.0; 3];
        let ds = gen_sine_clients(3, 10, 5, 0.0, &[4], 11, Some(&phases)).unwrap();
        for c in &ds.clients {
            let Some(ClientTruth::Sine { phase }) = c.truth else { panic!() };
            assert_eq!(phase, 0.0);
            if let Targets::Values(ys) = &c.train.targets {
                for (x, y) in c.train.inputs.iter().zip(ys) {
                    let want = (2.0 * std::f64::consts::PI * x).sin();
                    assert!((y - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sine_same_seed_is_bit_identical() {
        let a = gen_sine_clients(5, 8, 4, 0.1, &[4], 3, None).unwrap();
        let b = gen_sine_clients(5, 8, 4, 0.1, &[4], 3, None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = gen_sine_clients(5, 8, 4, 0.1, &[4], 4, None).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn label_skew_near_uniform_at_large_alpha() {
        let ds = gen_label_skew_classification(10, 4, 1000.0, 4000, 40, 5).unwrap();
        ds.validate().unwrap();
        for c in &ds.clients {
            let Some(ClientTruth::LabelSkew { proportions }) = &c.truth else { panic!() };
            for p in proportions {
                assert!((p - 0.25).abs() < 0.1, "alpha=1000 proportion {p}");
            }
        }
    }

    #[test]
    fn label_skew_concentrates_at_small_alpha() {
        // Over 10 seeds, at least one client should be >80% one class.
        let mut found = false;
        for seed in 0..10 {
            let ds = gen_label_skew_classification(8, 4, 0.1, 800, 20, seed).unwrap();
            for c in &ds.clients {
                let Some(ClientTruth::LabelSkew { proportions }) = &c.truth else { panic!() };
                if proportions.iter().any(|&p| p > 0.8) {
                    found = true;
                }
            }
        }
        assert!(found, "alpha=0.1 never concentrated");
    }

    #[test]
    fn label_skew_every_client_has_data() {
        let ds = gen_label_skew_classification(7, 3, 0.5, 7, 5, 1).unwrap();
        for c in &ds.clients {
            assert!(c.train.n >= 1);
        }
        assert!(gen_label_skew_classification(8, 3, 0.5, 7, 5, 1).is_err());
    }

    #[test]
    fn concept_shift_truths_and_recovery() {
        let ds = gen_concept_shift_regression(10, 2, 30, 10, 1, 0.01, 13).unwrap();
        for c in &ds.clients {
            let Some(ClientTruth::Cluster { group, params }) = &c.truth else { panic!() };
            assert_eq!(*group, c.id % 2);
            let want = if c.id % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(params[0], want);
            // 1-d least squares on the client's own data recovers the sign.
            let (num, den) = c.train.inputs.iter().zip(match &c.train.targets {
                Targets::Values(v) => v.iter(),
                _ => panic!(),
            }).fold((0.0, 0.0), |(n, d), (x, y)| (n + x * y, d + x * x));
            let ls = num / den;
            assert_eq!(ls.signum(), want.signum());
            assert!((ls - want).abs() < 0.05);
        }
        let single = gen_concept_shift_regression(4, 1, 10, 5, 2, 0.0, 1).unwrap();
        for c in &single.clients {
            assert_eq!(c.group, 0);
        }
        // G = N: every client its own concept.
        let all = gen_concept_shift_regression(4, 4, 10, 5, 1, 0.0, 1).unwrap();
        let groups: Vec<usize> = all.clients.iter().map(|c| c.group).collect();
        assert_eq!(groups, vec![0, 1, 2, 3]);
    }

    #[test]
    fn csv_partitions_split_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "site,x1,x2,y,grp").unwrap();
        for i in 0..10 {
            writeln!(f, "a,{},{},{},g0", i as f64 * 0.1, 1.0 - i as f64 * 0.05, i as f64).unwrap();
        }
        for i in 0..5 {
            writeln!(f, "b,{},{},{},g1", i as f64 * 0.2, 0.5, 2.0 * i as f64).unwrap();
        }
        drop(f);
        let ds = load_csv_partition(&path, "site", "y", Some("grp"), 42).unwrap();
        assert_eq!(ds.n_clients(), 2);
        assert_eq!(ds.model.input_dim, 2);
        assert_eq!(ds.clients[0].group, 0);
        assert_eq!(ds.clients[1].group, 1);
        // Conservation: train + test row counts equal the file's data rows.
        let total: usize = ds.clients.iter().map(|c| c.train.n + c.test.n).sum();
        assert_eq!(total, 15);
        for c in &ds.clients {
            assert!(c.test.n >= 1 && c.train.n >= 1);
        }
        // Same seed reproduces the split; different seed may differ.
        let ds2 = load_csv_partition(&path, "site", "y", Some("grp"), 42).unwrap();
        assert_eq!(serde_json::to_string(&ds).unwrap(), serde_json::to_string(&ds2).unwrap());

        assert!(load_csv_partition(&path, "nope", "y", None, 1).is_err());

        let bad = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "site,x,y").unwrap();
        writeln!(f, "a,1.0,2.0").unwrap();
        writeln!(f, "a,oops,3.0").unwrap();
        drop(f);
        let err = load_csv_partition(&bad, "site", "y", None, 1).unwrap_err();
        match err {
            FedError::Csv { row, col, .. } => {
                assert_eq!((row, col), (3, 2));
            }
            other => panic!("want csv error, got {other:?}"),
        }
    }

    #[test]
    fn apportion_conserves_and_orders() {
        assert_eq!(apportion(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(apportion(3, &[0.5, 0.5]), vec![2, 1]);
        let counts = apportion(7, &[0.2, 0.3, 0.5]);
        assert_eq!(counts.iter().sum::<usize>(), 7);
    }
}
