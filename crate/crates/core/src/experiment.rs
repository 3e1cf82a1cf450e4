//! Experiment orchestration: data preparation, the rounds loop for every
//! algorithm, final aggregation with client selection, and the run
//! artifacts (`metrics.csv`, `selection.csv`, `manifest.json`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::baselines::{dfedavg_round, dpsgd_round};
use crate::config::{Algorithm, DatasetConfig, Heterogeneity, RunConfig};
use crate::data::{dirichlet_partition, iid_partition, split_validation, Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_accuracy, evaluate_all, final_average, inter_model_variance, selection_order,
    SelectionCriterion, SelectionOrder, Summary,
};
use crate::nn::{Batch, Mlp, ModelDims, WeightVector};
use crate::protocol::{run_round, ClientState, RoundMessageLog};
use crate::seed::{derive_seed, stream};
use crate::topology::TopologySchedule;

pub const METRICS_HEADER: &str = "round,agg_test_acc,mean_client_acc,std_client_acc,min_client_acc,max_client_acc,variance_V,scalars_sent,bytes_sent";
pub const SELECTION_HEADER: &str = "criterion,prefix_size,test_acc";
pub const SIGN_CONVENTION: &str =
    "f(t) = Y - exp(-(eta*t/N)*H)(Y - f(0)); negative exponent, so f(t) -> Y as t grows";

/// Training and test data after limits and downsampling.
pub fn load_data(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    const CLASSES: usize = 10;
    let load = |images: &Path, labels: &Path, limit: Option<usize>| -> Result<Dataset> {
        let ds = Dataset::load(&cfg.resolve(images), &cfg.resolve(labels), CLASSES)?;
        let ds = match limit {
            Some(n) => ds.truncate(n),
            None => ds,
        };
        ds.downsample(cfg.downsample)
    };
    let train = load(&cfg.train_images, &cfg.train_labels, cfg.train_limit)?;
    let test = load(&cfg.test_images, &cfg.test_labels, cfg.test_limit)?;
    Ok((train, test))
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub agg_test_acc: f64,
    pub client_acc: Summary,
    pub variance_v: f64,
    pub scalars_sent: u64,
    pub bytes_sent: u64,
}

/// `printf("%.9g")`.
pub fn format_g9(x: f64) -> String {
    const PRECISION: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..PRECISION).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        trim(&format!("{:.*}", (PRECISION - 1 - exp) as usize, x))
    }
}

pub fn emit_metrics(records: &[RoundRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            format_g9(r.agg_test_acc),
            format_g9(r.client_acc.mean),
            format_g9(r.client_acc.std),
            format_g9(r.client_acc.min),
            format_g9(r.client_acc.max),
            format_g9(r.variance_v),
            r.scalars_sent,
            r.bytes_sent,
        )
        .expect("writing to a String");
    }
    out
}

pub fn emit_selection(orders: &[SelectionOrder]) -> String {
    let mut out = String::from(SELECTION_HEADER);
    out.push('\n');
    for o in orders {
        for (k, acc) in o.prefix_accuracies.iter().enumerate() {
            writeln!(out, "{},{},{}", o.criterion.name(), k + 1, format_g9(*acc))
                .expect("writing to a String");
        }
    }
    out
}

/// Everything a finished simulation produced.
#[derive(Clone, Debug)]
pub struct SimulationOutcome {
    pub records: Vec<RoundRecord>,
    pub partition: Partition,
    pub final_weights: Vec<WeightVector>,
    pub validation_accuracies: Vec<f64>,
    pub selection: Vec<SelectionOrder>,
    /// Clients in the reported final model, in joining order.
    pub opted_in: Vec<usize>,
    pub final_test_acc: f64,
    /// Edge list per round (round 1 first), when requested.
    pub edge_lists: Vec<String>,
    pub validation_size: usize,
    pub holdout_size: usize,
}

impl SimulationOutcome {
    /// Aggregated holdout accuracy of rounds `1..=K`.
    pub fn accuracy_history(&self) -> Vec<f64> {
        self.records.iter().skip(1).map(|r| r.agg_test_acc).collect()
    }

    pub fn last(&self) -> &RoundRecord {
        self.records.last().expect("round 0 is always recorded")
    }

    pub fn selection_for(&self, criterion: SelectionCriterion) -> &SelectionOrder {
        self.selection
            .iter()
            .find(|o| o.criterion == criterion)
            .expect("every criterion is evaluated")
    }
}

fn record(
    mlp: &Mlp,
    round: usize,
    weights: &[WeightVector],
    sizes: &[usize],
    holdout: &Dataset,
    log: &RoundMessageLog,
) -> Result<RoundRecord> {
    let all: Vec<usize> = (0..weights.len()).collect();
    let aggregate = final_average(weights, sizes, &all)?;
    let client_accs = evaluate_all(mlp, weights, holdout)?;
    let variance_v = if weights.len() < 2 {
        f64::NAN
    } else {
        inter_model_variance(weights)?
    };
    Ok(RoundRecord {
        round,
        agg_test_acc: evaluate_accuracy(mlp, &aggregate, holdout)?,
        client_acc: Summary::of(&client_accs)?,
        variance_v,
        scalars_sent: log.scalars_sent(),
        bytes_sent: log.bytes_sent(),
    })
}

/// Runs one seed of `cfg` on already loaded data, inside the current rayon
/// pool.
pub fn simulate(cfg: &RunConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<SimulationOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let m = cfg.num_clients;
    let (validation, holdout) = split_validation(test, cfg.validation_ratio, derive_seed(seed, stream::VALIDATION))?;
    if validation.is_empty() || holdout.is_empty() {
        return Err(Error::Empty("validation or holdout split"));
    }

    let partition_seed = derive_seed(seed, stream::PARTITION);
    let partition = match cfg.heterogeneity {
        Heterogeneity::Iid {} => iid_partition(&train.labels, train.classes, m, partition_seed)?,
        Heterogeneity::Dirichlet { alpha } => {
            dirichlet_partition(&train.labels, train.classes, m, alpha, partition_seed)?
        }
    };
    let sizes = partition.sizes();
    let data: Vec<Batch> = partition.assignment.iter().map(|idx| train.batch(idx)).collect();

    let mlp = Mlp::new(ModelDims::new(train.input_dim(), cfg.hidden_dim, train.classes)?);
    let init_seed = derive_seed(seed, stream::INIT);
    let mut weights: Vec<WeightVector> = (0..m).map(|i| mlp.init_weights(init_seed, cfg.init, i)).collect();
    let schedule = TopologySchedule::new(cfg.topology, m, cfg.dynamic_topology, derive_seed(seed, stream::TOPOLOGY))?;
    let sgd_seed = derive_seed(seed, stream::SGD);
    let protocol = cfg.protocol();

    let mut records = vec![record(&mlp, 0, &weights, &sizes, &holdout, &RoundMessageLog::new(cfg.bytes_per_scalar))?];
    let mut edge_lists = Vec::new();
    let mut states: Vec<ClientState> = Vec::new();
    if cfg.algorithm == Algorithm::NtkDfl {
        states = weights
            .drain(..)
            .zip(data.iter().cloned())
            .enumerate()
            .map(|(i, (w, d))| ClientState::new(i, w, d))
            .collect();
    }

    for k in 1..=cfg.rounds {
        let topo = schedule.round(k)?;
        if cfg.dump_edges {
            edge_lists.push(topo.to_edge_list());
        }
        let log = match cfg.algorithm {
            Algorithm::NtkDfl => run_round(&mut states, &mlp, &topo, &protocol, k)?,
            Algorithm::Dpsgd => {
                let sgd = cfg.effective_sgd().expect("baseline has sgd settings");
                dpsgd_round(&mlp, &mut weights, &data, &topo, &sgd, sgd_seed, k, cfg.bytes_per_scalar)?
            }
            Algorithm::Dfedavg | Algorithm::Dfedavgm => {
                let sgd = cfg.effective_sgd().expect("baseline has sgd settings");
                let momentum_on = cfg.algorithm == Algorithm::Dfedavgm;
                dfedavg_round(&mlp, &mut weights, &data, &topo, &sgd, momentum_on, sgd_seed, k, cfg.bytes_per_scalar)?
            }
        };
        let current: Vec<WeightVector> = if cfg.algorithm == Algorithm::NtkDfl {
            states.iter().map(|s| s.weights.clone()).collect()
        } else {
            weights.clone()
        };
        records.push(record(&mlp, k, &current, &sizes, &holdout, &log)?);
    }
    let final_weights = if cfg.algorithm == Algorithm::NtkDfl {
        states.into_iter().map(|s| s.weights).collect()
    } else {
        weights
    };

    let validation_accuracies = evaluate_all(&mlp, &final_weights, &validation)?;
    let selection_seed = derive_seed(seed, stream::SELECTION);
    let selection = SelectionCriterion::ALL
        .iter()
        .map(|&c| selection_order(&mlp, &final_weights, &sizes, &validation_accuracies, &holdout, c, selection_seed))
        .collect::<Result<Vec<_>>>()?;
    let chosen = selection
        .iter()
        .find(|o| o.criterion == cfg.selection)
        .expect("configured criterion is evaluated");
    let take = cfg.selection_size.unwrap_or(m);
    let opted_in = chosen.ordering[..take].to_vec();
    let final_test_acc = chosen.prefix_accuracies[take - 1];

    Ok(SimulationOutcome {
        records,
        partition,
        final_weights,
        validation_accuracies,
        selection,
        opted_in,
        final_test_acc,
        edge_lists,
        validation_size: validation.len(),
        holdout_size: holdout.len(),
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    seed: u64,
    sign_convention: &'static str,
    config: &'a RunConfig,
    data: DataSummary,
    partition_sizes: Vec<usize>,
    final_model: FinalModel<'a>,
}

#[derive(Serialize)]
struct DataSummary {
    train: usize,
    validation: usize,
    holdout: usize,
    input_dim: usize,
}

#[derive(Serialize)]
struct FinalModel<'a> {
    criterion: &'static str,
    clients: &'a [usize],
    test_acc: f64,
}

/// Text of every artifact of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub metrics_csv: String,
    pub selection_csv: String,
    pub manifest_json: String,
    pub edge_lists: Vec<String>,
}

pub fn artifacts(cfg: &RunConfig, seed: u64, train: &Dataset, outcome: &SimulationOutcome) -> Artifacts {
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed,
        sign_convention: SIGN_CONVENTION,
        config: cfg,
        data: DataSummary {
            train: train.len(),
            validation: outcome.validation_size,
            holdout: outcome.holdout_size,
            input_dim: train.input_dim(),
        },
        partition_sizes: outcome.partition.sizes(),
        final_model: FinalModel {
            criterion: cfg.selection.name(),
            clients: &outcome.opted_in,
            test_acc: outcome.final_test_acc,
        },
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    Artifacts {
        metrics_csv: emit_metrics(&outcome.records),
        selection_csv: emit_selection(&outcome.selection),
        manifest_json,
        edge_lists: outcome.edge_lists.clone(),
    }
}

/// Runs `f` on a pool with the configured worker count.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// Simulates one seed and renders its artifacts.
pub fn run_seed(cfg: &RunConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<(SimulationOutcome, Artifacts)> {
    let outcome = with_workers(cfg.workers, || simulate(cfg, seed, train, test))??;
    let art = artifacts(cfg, seed, train, &outcome);
    Ok((outcome, art))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_artifacts(dir: &Path, art: &Artifacts) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("metrics.csv"), &art.metrics_csv)?;
    write(&dir.join("selection.csv"), &art.selection_csv)?;
    write(&dir.join("manifest.json"), &art.manifest_json)?;
    if !art.edge_lists.is_empty() {
        let edges = dir.join("edges");
        fs::create_dir_all(&edges).map_err(|e| Error::io(&edges, e))?;
        for (k, list) in art.edge_lists.iter().enumerate() {
            write(&edges.join(format!("round-{:04}.txt", k + 1)), list)?;
        }
    }
    Ok(())
}

/// Directory of one seed's artifacts under the output directory.
pub fn seed_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed-{seed}"))
}

/// Loads the data once and runs every configured seed, returning the seed
/// directories written.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.dataset)?;
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let (_, art) = run_seed(cfg, seed, &train, &test)?;
        let dir = seed_dir(&cfg.output_dir, seed);
        write_artifacts(&dir, &art)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand_distr::{Distribution, Uniform};

    use super::*;
    use crate::config::DatasetName;
    use crate::data::{write_idx, IdxTensor};
    use crate::seed;
    use crate::topology::TopologyKind;

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (0.123456789123, "0.123456789"),
            (123456789.0, "123456789"),
            (1234567891.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (0.9999999999, "1"),
            (1.0 / 3.0, "0.333333333"),
            (f64::NAN, "nan"),
        ];
        for (x, s) in cases {
            assert_eq!(format_g9(x), s, "{x}");
        }
    }

    fn summary(v: f64) -> Summary {
        Summary { mean: v, std: 0.0, min: v, max: v }
    }

    #[test]
    fn metrics_csv_shape() {
        assert_eq!(emit_metrics(&[]), format!("{METRICS_HEADER}\n"));
        let r = RoundRecord {
            round: 1,
            agg_test_acc: 0.5,
            client_acc: summary(0.25),
            variance_v: 0.1,
            scalars_sent: 10,
            bytes_sent: 40,
        };
        let text = emit_metrics(&[r]);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,0.25,0,0.25,0.25,0.1,10,40");
        assert!(text.ends_with('\n') && !text.contains('\r'));
    }

    fn synthetic(n: usize, seed_: u64) -> Dataset {
        let mut rng = seed::rng(seed_);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 10) % 10).collect();
        let images = Array2::from_shape_fn((n, 16), |(r, c)| {
            let signal = if c % 10 == labels[r] { 0.8 } else { 0.0 };
            signal + 0.2 * u.sample(&mut rng)
        });
        let mut ds = Dataset::new(images, labels, 10).unwrap();
        ds.image_shape = Some((4, 4));
        ds
    }

    fn small_config(algorithm: Algorithm) -> RunConfig {
        let mut cfg = RunConfig::with_dataset(DatasetConfig::new(DatasetName::Mnist, "unused"));
        cfg.num_clients = 6;
        cfg.topology = TopologyKind::Regular { kappa: 2 };
        cfg.heterogeneity = Heterogeneity::Dirichlet { alpha: 0.5 };
        cfg.hidden_dim = 8;
        cfg.rounds = 2;
        cfg.t_grid = vec![10, 50];
        cfg.eta = 0.05;
        cfg.algorithm = algorithm;
        cfg.workers = Some(1);
        cfg
    }

    #[test]
    fn zero_rounds_writes_only_the_initial_row() {
        let (train, test) = (synthetic(120, 1), synthetic(40, 2));
        let mut cfg = small_config(Algorithm::NtkDfl);
        cfg.rounds = 0;
        let (outcome, art) = run_seed(&cfg, 3, &train, &test).unwrap();
        assert_eq!(art.metrics_csv.lines().count(), 2);
        assert!(art.metrics_csv.lines().nth(1).unwrap().starts_with("0,"));
        assert_eq!(outcome.records[0].scalars_sent, 0);
    }

    #[test]
    fn every_algorithm_runs_and_is_reproducible() {
        let (train, test) = (synthetic(120, 1), synthetic(40, 2));
        for alg in [Algorithm::NtkDfl, Algorithm::Dpsgd, Algorithm::Dfedavg, Algorithm::Dfedavgm] {
            let cfg = small_config(alg);
            let (a, art_a) = run_seed(&cfg, 3, &train, &test).unwrap();
            let (_, art_b) = run_seed(&cfg, 3, &train, &test).unwrap();
            assert_eq!(art_a, art_b, "{alg:?}");
            assert_eq!(a.records.len(), 3);
            for r in &a.records {
                assert_eq!(r.bytes_sent, 4 * r.scalars_sent);
            }
            assert!(a.records[1].scalars_sent > 0);
            assert_eq!(art_a.selection_csv.lines().count(), 1 + 3 * 6);
        }
    }

    #[test]
    fn worker_count_does_not_change_artifacts() {
        let (train, test) = (synthetic(120, 1), synthetic(40, 2));
        let cfg = small_config(Algorithm::NtkDfl);
        let (_, one) = run_seed(&cfg, 5, &train, &test).unwrap();
        let cfg3 = RunConfig { workers: Some(3), ..cfg.clone() };
        let (_, three) = run_seed(&cfg3, 5, &train, &test).unwrap();
        assert_eq!(one.metrics_csv, three.metrics_csv);
        assert_eq!(one.selection_csv, three.selection_csv);
    }

    #[test]
    fn selection_size_limits_the_final_model() {
        let (train, test) = (synthetic(120, 1), synthetic(40, 2));
        let mut cfg = small_config(Algorithm::NtkDfl);
        cfg.selection_size = Some(2);
        let (outcome, art) = run_seed(&cfg, 3, &train, &test).unwrap();
        assert_eq!(outcome.opted_in.len(), 2);
        assert_eq!(outcome.opted_in, outcome.selection_for(SelectionCriterion::HighToLow).ordering[..2]);
        let manifest: serde_json::Value = serde_json::from_str(&art.manifest_json).unwrap();
        assert_eq!(manifest["final_model"]["clients"].as_array().unwrap().len(), 2);
        assert_eq!(manifest["config"]["eta"], 0.05);
        assert!(manifest["sign_convention"].as_str().unwrap().contains("exp(-"));
    }

    fn write_dataset(dir: &Path, name: &str, ds: &Dataset) {
        let n = ds.len();
        let bytes: Vec<u8> = ds.images.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let images = IdxTensor::new(vec![n, 4, 4], bytes).unwrap();
        let labels = IdxTensor::new(vec![n], ds.labels.iter().map(|&l| l as u8).collect()).unwrap();
        fs::write(dir.join(format!("{name}-images")), write_idx(&images)).unwrap();
        fs::write(dir.join(format!("{name}-labels")), write_idx(&labels)).unwrap();
    }

    #[test]
    fn run_experiment_writes_a_directory_per_seed() {
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(tmp.path(), "train", &synthetic(120, 1));
        write_dataset(tmp.path(), "test", &synthetic(40, 2));
        let mut cfg = small_config(Algorithm::NtkDfl);
        cfg.dataset.root = tmp.path().to_path_buf();
        cfg.dataset.train_images = "train-images".into();
        cfg.dataset.train_labels = "train-labels".into();
        cfg.dataset.test_images = "test-images".into();
        cfg.dataset.test_labels = "test-labels".into();
        cfg.dataset.downsample = 2;
        cfg.seeds = vec![1, 2];
        cfg.dump_edges = true;
        cfg.output_dir = tmp.path().join("out");
        let dirs = run_experiment(&cfg).unwrap();
        assert_eq!(dirs, vec![tmp.path().join("out/seed-1"), tmp.path().join("out/seed-2")]);
        for d in &dirs {
            for f in ["metrics.csv", "selection.csv", "manifest.json", "edges/round-0001.txt"] {
                assert!(d.join(f).is_file(), "{f}");
            }
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dirs[0].join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["data"]["input_dim"], 4);
        assert_eq!(manifest["seed"], 1);
    }

    #[test]
    fn missing_files_are_io_errors() {
        let mut cfg = small_config(Algorithm::NtkDfl);
        cfg.dataset.root = "/nonexistent".into();
        assert!(matches!(run_experiment(&cfg), Err(Error::Io { .. })));
    }
}
