//! Config-driven experiments: fleet preparation, strategies A/B/C, reports and
//! the random model search used to pick an architecture on the public turbine.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::customization::{select_customization, FinetunePlan};
use crate::data::{
    self, fit_norm, generate_synthetic_fleet, ingest_dir, select_scarce_consecutive,
    select_scarce_lowest_wind, split_representative, split_test_suffix, to_batch, CsvSchema,
    Feature, NormStats, Partition, ScadaDataset, SyntheticFleetConfig,
};
use crate::error::{Error, Result};
use crate::federation::{
    evaluate, run_fedavg, run_local_only, ClientData, ClientState, FedAvgOptions, ServerState,
    Strategy, TransportKind,
};
use crate::nn::{
    self, init_weights, Activation, Architecture, HiddenLayer, Matrix, ModelParams, OptimizerState,
};
use crate::transport::{ByteCounters, SessionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    PowerCurve,
    BearingTemp,
}

impl Case {
    pub fn inputs(self) -> &'static [Feature] {
        match self {
            Case::PowerCurve => &[Feature::WindSpeed],
            Case::BearingTemp => &[Feature::RotorSpeed, Feature::Power],
        }
    }

    pub fn target(self) -> Feature {
        match self {
            Case::PowerCurve => Feature::Power,
            Case::BearingTemp => Feature::BearingTemp,
        }
    }

    pub fn default_architecture(self) -> Architecture {
        match self {
            Case::PowerCurve => Architecture::power_curve(),
            Case::BearingTemp => Architecture::bearing_temperature(),
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Case::PowerCurve => 0.013,
            Case::BearingTemp => 0.00035,
        }
    }

    pub fn output_activation(self) -> Activation {
        match self {
            Case::PowerCurve => Activation::Relu,
            Case::BearingTemp => Activation::Linear,
        }
    }

    /// Learning-rate interval of the model search.
    pub fn search_lr_range(self) -> (f64, f64) {
        match self {
            Case::PowerCurve => (0.001, 0.075),
            Case::BearingTemp => (0.000005, 0.001),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticFleetConfig),
    Csv {
        dir: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

/// Where min-max statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Every client uses the ranges of the public turbine's training data, which
    /// the server already holds. All clients share one input scale and no client
    /// statistic leaves its turbine.
    #[default]
    Public,
    /// Each client scales with its own training data. FedAvg then averages models
    /// that read their inputs on different scales.
    Client,
    /// Every client uses the envelope of all clients' training ranges.
    Fleet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: Case,
    pub data: DataSource,
    /// Clients are the first `n_clients` turbines; the next one is the public turbine.
    /// Defaults to all turbines but one.
    pub n_clients: Option<usize>,
    /// Zero-based client indices with scarce training data. Defaults to the first
    /// `n_scarce` of a synthetic fleet, or the first five clients for CSV data.
    pub scarce: Option<Vec<usize>>,
    pub strategies: BTreeSet<Strategy>,
    pub architecture: Option<Architecture>,
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// Per-client shuffling seeds; derived from `seed` when absent.
    pub client_seeds: Option<Vec<u64>>,
    pub patience_a: usize,
    pub patience_b: usize,
    pub patience_c: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub test_fraction: f64,
    /// Safety cap on epochs for A and C.
    pub max_epochs: Option<usize>,
    /// Safety cap on FedAvg rounds.
    pub max_rounds: u32,
    pub norm_scope: NormScope,
    pub transport: TransportKind,
    pub round_timeout_s: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            case: Case::PowerCurve,
            data: DataSource::Synthetic(SyntheticFleetConfig::default()),
            n_clients: None,
            scarce: None,
            strategies: [Strategy::A, Strategy::B, Strategy::C].into(),
            architecture: None,
            learning_rate: None,
            seed: 0,
            client_seeds: None,
            patience_a: 15,
            patience_b: 5,
            patience_c: 5,
            local_epochs: 3,
            batch_size: 32,
            momentum: 0.9,
            test_fraction: 0.3,
            max_epochs: Some(2000),
            max_rounds: 500,
            norm_scope: NormScope::Public,
            transport: TransportKind::InProc,
            round_timeout_s: 300,
        }
    }
}

impl ExperimentConfig {
    pub fn architecture(&self) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| self.case.default_architecture())
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.case.default_learning_rate())
    }

    pub fn session_spec(&self) -> SessionSpec {
        SessionSpec {
            architecture: self.architecture(),
            learning_rate: self.learning_rate(),
            momentum: self.momentum,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.strategies.is_empty() {
            return fail("no strategy selected");
        }
        let arch = self.architecture();
        arch.validate()?;
        if arch.input_dim != self.case.inputs().len() {
            return Err(Error::Config(format!(
                "architecture takes {} inputs, the case provides {}",
                arch.input_dim,
                self.case.inputs().len()
            )));
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return fail("batch size and local epochs must be positive");
        }
        if self.patience_a == 0 || self.patience_b == 0 || self.patience_c == 0 {
            return fail("patience values must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction must lie in (0, 1)");
        }
        if self.max_epochs == Some(0) || self.max_rounds == 0 {
            return fail("epoch and round caps must be positive");
        }
        if self.n_clients == Some(0) {
            return fail("need at least one client");
        }
        if let Some(n) = self.n_clients {
            if let Some(bad) = self.scarce.iter().flatten().find(|&&i| i >= n) {
                return Err(Error::Config(format!(
                    "scarce client {bad} is not a client"
                )));
            }
            if let Some(seeds) = &self.client_seeds {
                if seeds.len() != n {
                    return fail("client_seeds must list one seed per client");
                }
            }
        }
        if let DataSource::Synthetic(cfg) = &self.data {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// Derives one shuffling seed per client from the global seed.
pub fn derive_client_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed);
    (0..n).map(|_| rng.random()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Scarce,
    Representative,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Scarce => "scarce",
            DatasetKind::Representative => "representative",
        }
    }
}

/// A client ready for training, with the statistics used to scale its inputs.
#[derive(Debug, Clone)]
pub struct PreparedClient {
    pub turbine_id: String,
    pub kind: DatasetKind,
    pub stats: NormStats,
    pub state: ClientState,
}

#[derive(Debug, Clone)]
pub struct PreparedFleet {
    pub clients: Vec<PreparedClient>,
    pub public: Option<ScadaDataset>,
    pub spec: SessionSpec,
    pub initial: ModelParams,
}

pub fn load_fleet(source: &DataSource) -> Result<Vec<ScadaDataset>> {
    match source {
        DataSource::Synthetic(cfg) => generate_synthetic_fleet(cfg),
        DataSource::Csv { dir, schema } => {
            let ingested = ingest_dir(dir, schema)?;
            for i in &ingested {
                if i.dropped > 0 {
                    log::info!(
                        "{}: dropped {} invalid rows",
                        i.dataset.turbine_id,
                        i.dropped
                    );
                }
            }
            Ok(ingested.into_iter().map(|i| i.dataset).collect())
        }
    }
}

/// Splits every client's data, fits normalization and builds the client states.
pub fn prepare_fleet(config: &ExperimentConfig, fleet: Vec<ScadaDataset>) -> Result<PreparedFleet> {
    config.validate()?;
    let n_clients = match config.n_clients {
        Some(n) if n > fleet.len() => {
            return Err(Error::Config(format!(
                "{n} clients requested but the fleet has {} turbines",
                fleet.len()
            )))
        }
        Some(n) => n,
        None if fleet.len() >= 2 => fleet.len() - 1,
        None => return Err(Error::Data("need at least two turbines".into())),
    };
    let scarce: BTreeSet<usize> = match (&config.scarce, &config.data) {
        (Some(ids), _) => ids.iter().copied().collect(),
        (None, DataSource::Synthetic(cfg)) => (0..cfg.n_scarce.min(n_clients)).collect(),
        (None, DataSource::Csv { .. }) => (0..5.min(n_clients)).collect(),
    };
    if let Some(bad) = scarce.iter().find(|&&i| i >= n_clients) {
        return Err(Error::Config(format!(
            "scarce client {bad} is not a client"
        )));
    }
    let seeds = config
        .client_seeds
        .clone()
        .unwrap_or_else(|| derive_client_seeds(config.seed, n_clients));
    if seeds.len() != n_clients {
        return Err(Error::Config(
            "client_seeds must list one seed per client".into(),
        ));
    }

    let mut fleet = fleet.into_iter();
    let mut split = Vec::with_capacity(n_clients);
    for (i, mut ds) in fleet.by_ref().take(n_clients).enumerate() {
        split_test_suffix(&mut ds, config.test_fraction)?;
        let kind = if scarce.contains(&i) {
            DatasetKind::Scarce
        } else {
            DatasetKind::Representative
        };
        let pool_split = match (kind, config.case) {
            (DatasetKind::Representative, _) => Ok(split_representative(ds.pool())),
            (DatasetKind::Scarce, Case::PowerCurve) => select_scarce_lowest_wind(ds.pool()),
            (DatasetKind::Scarce, Case::BearingTemp) => {
                select_scarce_consecutive(ds.pool(), seeds[i])
            }
        }
        .map_err(|e| Error::Data(format!("{}: {e}", ds.turbine_id)))?;
        ds.assign(&pool_split)?;
        let stats = fit_norm(&ds.subset(Partition::Train), config.case.inputs())
            .map_err(|e| Error::Data(format!("{}: {e}", ds.turbine_id)))?;
        split.push((ds, kind, stats));
    }
    let public = fleet.next();

    let shared = match config.norm_scope {
        NormScope::Client => None,
        NormScope::Fleet => {
            let all: Vec<NormStats> = split.iter().map(|(_, _, s)| s.clone()).collect();
            Some(NormStats::envelope(&all)?)
        }
        NormScope::Public => {
            let public = public.as_ref().ok_or_else(|| {
                Error::Config(
                    "public normalization needs a public turbine after the clients".into(),
                )
            })?;
            Some(public_norm(public, config.case, config.test_fraction)?)
        }
    };
    if let Some(shared) = shared {
        for (_, _, s) in &mut split {
            *s = shared.clone();
        }
    }

    let spec = config.session_spec();
    let initial = match &public {
        Some(p) => {
            let stats = public_norm(p, config.case, config.test_fraction)?;
            let inputs = to_batch(p.pool(), &stats, config.case.target())?;
            initial_weights(&spec.architecture, config.seed, Some(inputs.inputs()))?
        }
        None => {
            let probe = unit_grid(spec.architecture.input_dim);
            initial_weights(&spec.architecture, config.seed, Some(&probe))?
        }
    };
    let target = config.case.target();
    let clients = split
        .into_iter()
        .enumerate()
        .map(|(i, (ds, kind, stats))| {
            let batch = |p| to_batch(&ds.subset(p), &stats, target);
            let data = ClientData {
                train: batch(Partition::Train)?,
                validation: batch(Partition::Validation)?,
                test: batch(Partition::Test)?,
            };
            let state = ClientState::new(i as u32, data, initial.clone(), &spec, seeds[i])
                .map_err(|e| Error::Data(format!("{}: {e}", ds.turbine_id)))?;
            Ok(PreparedClient {
                turbine_id: ds.turbine_id.clone(),
                kind,
                stats,
                state,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedFleet {
        clients,
        public,
        spec,
        initial,
    })
}

/// Draws the server's initial weights. With a ReLU output and `probe` inputs, draws
/// are repeated until the output unit is active on at least 99 % of the probe rows;
/// a unit that is dead everywhere never receives a gradient. (With zero biases the
/// output is exactly 0 at the all-zero input, so "every row" is unattainable.)
pub fn initial_weights(
    arch: &Architecture,
    seed: u64,
    probe: Option<&Matrix>,
) -> Result<ModelParams> {
    const MAX_DRAWS: u64 = 100;
    let Some(probe) = probe.filter(|_| arch.output_activation == Activation::Relu) else {
        return Ok(init_weights(arch, seed));
    };
    for draw in 0..MAX_DRAWS {
        let params = init_weights(
            arch,
            seed.wrapping_add(draw.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let active = nn::forward(&params, probe)?
            .iter()
            .filter(|&&y| y > 0.0)
            .count();
        if active as f64 >= 0.99 * probe.rows() as f64 {
            if draw > 0 {
                log::debug!("initial weights: accepted draw {draw}");
            }
            return Ok(params);
        }
    }
    Err(Error::Config(format!(
        "no initialization out of {MAX_DRAWS} draws has a live output unit"
    )))
}

/// Regular grid over the normalized input box `[0, 1]^dim`.
pub fn unit_grid(dim: usize) -> Matrix {
    let steps: usize = if dim == 1 { 101 } else { 11 };
    let n = steps.pow(dim as u32);
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mut rest = i;
        for _ in 0..dim {
            data.push((rest % steps) as f64 / (steps - 1) as f64);
            rest /= steps;
        }
    }
    Matrix::new(n, dim, data).expect("grid dimensions agree")
}

/// Min-max statistics of the public turbine's training part (everything but the test suffix).
pub fn public_norm(public: &ScadaDataset, case: Case, test_fraction: f64) -> Result<NormStats> {
    let mut ds = public.clone();
    split_test_suffix(&mut ds, test_fraction)?;
    fit_norm(ds.pool(), case.inputs())
        .map_err(|e| Error::Data(format!("public turbine {}: {e}", ds.turbine_id)))
}

/// Per-client outcome of one strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub test_rmse: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

/// Run metadata that does not belong in the per-client table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub case: Option<Case>,
    pub seed: u64,
    /// Worker threads available to the runner.
    pub parallelism: usize,
    pub transport: Option<TransportKind>,
    pub fedavg_rounds: Option<usize>,
    pub fedavg_best_round: Option<usize>,
    pub fedavg_history: Vec<f64>,
    pub local_epochs_a: Vec<usize>,
    pub traffic: Vec<(u32, ByteCounters)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// 1-based client index.
    pub wt: usize,
    pub turbine: String,
    pub kind: DatasetKind,
    /// One value per entry of [`ReportTable::columns`].
    pub values: Vec<f64>,
}

/// Per-client results with fleet mean and sd rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub meta: ReportMeta,
}

fn is_timing_column(name: &str) -> bool {
    name.starts_with("time_") || name == "finetune_s"
}

/// Numeric column names for a strategy set.
pub fn report_columns(strategies: &BTreeSet<Strategy>) -> Vec<String> {
    let mut cols = Vec::new();
    for prefix in ["rmse", "val_rmse", "time"] {
        cols.extend(strategies.iter().map(|s| format!("{prefix}_{s}")));
    }
    if strategies.contains(&Strategy::C) {
        cols.push("finetune_s".into());
        cols.push("k_C".into());
    }
    cols
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1); NaN for fewer than two values.
fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl ReportTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// A column's per-client values, optionally restricted to one dataset kind.
    pub fn values(&self, name: &str, kind: Option<DatasetKind>) -> Option<Vec<f64>> {
        let j = self.column(name)?;
        Some(
            self.rows
                .iter()
                .filter(|r| kind.is_none_or(|k| r.kind == k))
                .map(|r| r.values[j])
                .collect(),
        )
    }

    pub fn rmse(&self, s: Strategy, kind: Option<DatasetKind>) -> Option<Vec<f64>> {
        self.values(&format!("rmse_{s}"), kind)
    }

    pub fn val_rmse(&self, s: Strategy, kind: Option<DatasetKind>) -> Option<Vec<f64>> {
        self.values(&format!("val_rmse_{s}"), kind)
    }

    pub fn mean_rmse(&self, s: Strategy, kind: Option<DatasetKind>) -> Option<f64> {
        self.rmse(s, kind)
            .filter(|v| !v.is_empty())
            .map(|v| mean(&v))
    }

    /// Fleet mean and sample sd of every column.
    pub fn summary(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.columns.len())
            .map(|j| {
                let col: Vec<f64> = self.rows.iter().map(|r| r.values[j]).collect();
                (mean(&col), sample_sd(&col))
            })
            .unzip()
    }

    /// CSV text: header, one row per client, then `mean` and `sd` rows.
    /// Without `timing`, wall-clock columns are left out.
    pub fn to_csv(&self, timing: bool) -> String {
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&j| timing || !is_timing_column(&self.columns[j]))
            .collect();
        let mut out = String::from("wt,turbine,dataset");
        for &j in &keep {
            let _ = write!(out, ",{}", self.columns[j]);
        }
        out.push('\n');
        let mut line = |label: &str, turbine: &str, kind: &str, vals: &[f64]| {
            let _ = write!(out, "{label},{turbine},{kind}");
            for &j in &keep {
                let _ = write!(out, ",{:.6}", vals[j]);
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.wt.to_string(), &r.turbine, r.kind.as_str(), &r.values);
        }
        let (means, sds) = self.summary();
        line("mean", "", "", &means);
        line("sd", "", "", &sds);
        out
    }

    /// Parses a report written by [`emit_report`]; summary rows are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        if header.len() < 3
            || &header[0] != "wt"
            || &header[1] != "turbine"
            || &header[2] != "dataset"
        {
            return Err(Error::Data("not a report table".into()));
        }
        let columns: Vec<String> = header.iter().skip(3).map(String::from).collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let Ok(wt) = rec[0].parse::<usize>() else {
                continue;
            };
            let kind = match &rec[2] {
                "scarce" => DatasetKind::Scarce,
                "representative" => DatasetKind::Representative,
                other => return Err(Error::Data(format!("unknown dataset kind `{other}`"))),
            };
            let values = rec
                .iter()
                .skip(3)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad number `{v}` in report")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(ReportRow {
                wt,
                turbine: rec[1].to_string(),
                kind,
                values,
            });
        }
        Ok(Self {
            columns,
            rows,
            meta: ReportMeta::default(),
        })
    }
}

/// Writes the CSV table to `path` and its metadata next to it as `<stem>.meta.json`.
pub fn emit_report(table: &ReportTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_csv(true))?;
    let meta = path.with_extension("meta.json");
    std::fs::write(meta, serde_json::to_string_pretty(&table.meta)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ReportTable> {
    ReportTable::from_csv(&std::fs::read_to_string(path)?)
}

/// Loads the configured fleet and runs every requested strategy.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportTable> {
    config.validate()?;
    let fleet = load_fleet(&config.data)?;
    let prepared = prepare_fleet(config, fleet)?;
    run_prepared(config, &prepared)
}

/// Runs the strategies on an already prepared fleet. Every strategy starts from
/// fresh copies of the prepared clients.
pub fn run_prepared(config: &ExperimentConfig, fleet: &PreparedFleet) -> Result<ReportTable> {
    let n = fleet.clients.len();
    let mut results: Vec<Vec<Option<StrategyResult>>> = vec![vec![None; 3]; n];
    let mut finetune = vec![None; n];
    let mut meta = ReportMeta {
        case: Some(config.case),
        seed: config.seed,
        parallelism: rayon::current_num_threads(),
        ..Default::default()
    };

    if config.strategies.contains(&Strategy::A) {
        log::info!("strategy A: local training on {n} clients");
        let runs = fleet
            .clients
            .par_iter()
            .map(|c| {
                let mut state = c.state.clone();
                let (model, report) =
                    run_local_only(&mut state, config.patience_a, config.max_epochs)?;
                let val = evaluate(&model, &state, Partition::Validation)?;
                Ok((report, val))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, (report, val)) in runs.into_iter().enumerate() {
            meta.local_epochs_a.push(report.iterations);
            results[i][0] = Some(StrategyResult {
                test_rmse: report.client_rmse[0].1,
                val_rmse: val,
                seconds: report.seconds,
            });
        }
    }

    if config.strategies.contains(&Strategy::B) || config.strategies.contains(&Strategy::C) {
        log::info!(
            "strategy B: FedAvg over {n} clients ({:?})",
            config.transport
        );
        let mut server = ServerState::new(fleet.initial.clone(), config.patience_b)?;
        let mut states: Vec<ClientState> = fleet.clients.iter().map(|c| c.state.clone()).collect();
        let options = FedAvgOptions {
            max_rounds: config.max_rounds,
            timeout: Duration::from_secs(config.round_timeout_s),
            transport: config.transport.clone(),
        };
        let (global, report) = run_fedavg(&mut server, &mut states, &fleet.spec, &options)?;
        meta.transport = Some(config.transport.clone());
        meta.fedavg_rounds = Some(report.iterations);
        meta.fedavg_best_round = report.best_iteration;
        meta.fedavg_history = report.history.clone();
        meta.traffic = report.traffic.clone();
        let b_seconds = report.seconds;

        for (i, c) in fleet.clients.iter().enumerate() {
            results[i][1] = Some(StrategyResult {
                test_rmse: report.client_rmse[i].1,
                val_rmse: evaluate(&global, &c.state, Partition::Validation)?,
                seconds: b_seconds,
            });
        }

        if config.strategies.contains(&Strategy::C) {
            log::info!("strategy C: finetuning the global model per client");
            let plan = FinetunePlan {
                max_epochs: config.max_epochs,
                ..FinetunePlan::from_spec(&fleet.spec, 1, config.patience_c)
            };
            let tuned = fleet
                .clients
                .par_iter()
                .map(|c| {
                    let r = select_customization(&global, &c.state, &plan)?;
                    let test = evaluate(&r.params, &c.state, Partition::Test)?;
                    Ok((r, test))
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, (r, test)) in tuned.into_iter().enumerate() {
                results[i][2] = Some(StrategyResult {
                    test_rmse: test,
                    val_rmse: r.val_rmse,
                    seconds: b_seconds + r.seconds,
                });
                finetune[i] = Some((r.seconds, r.k));
            }
        }
    }

    let columns = report_columns(&config.strategies);
    let rows = fleet
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let get = |s: Strategy| results[i][s as usize].expect("strategy was run");
            let mut values = Vec::with_capacity(columns.len());
            values.extend(config.strategies.iter().map(|&s| get(s).test_rmse));
            values.extend(config.strategies.iter().map(|&s| get(s).val_rmse));
            values.extend(config.strategies.iter().map(|&s| get(s).seconds));
            if let Some((secs, k)) = finetune[i] {
                values.push(secs);
                values.push(k as f64);
            }
            ReportRow {
                wt: i + 1,
                turbine: c.turbine_id.clone(),
                kind: c.kind,
                values,
            }
        })
        .collect();
    Ok(ReportTable {
        columns,
        rows,
        meta,
    })
}

/// Hidden-layer widths the model search draws from.
pub const SEARCH_UNITS: [usize; 4] = [4, 8, 12, 16];
pub const SEARCH_MAX_DEPTH: usize = 3;

/// Every hidden-layer width sequence of the search space.
pub fn search_space_shapes() -> Vec<Vec<usize>> {
    let mut shapes = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..SEARCH_MAX_DEPTH {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<usize>| {
                SEARCH_UNITS.iter().map(move |&u| {
                    let mut next = s.clone();
                    next.push(u);
                    next
                })
            })
            .collect();
        shapes.extend(frontier.iter().cloned());
    }
    shapes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub trials: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs without improvement of the training loss before a trial stops.
    pub patience: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub test_fraction: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            max_epochs: 150,
            patience: 15,
            batch_size: 32,
            momentum: 0.9,
            test_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub architecture: Architecture,
    pub learning_rate: f64,
    /// Infinite when training diverged.
    pub test_rmse: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl SearchResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Draws one candidate: depth 0-3, widths from [`SEARCH_UNITS`] with ELU, log-uniform rate.
pub fn sample_candidate<R: Rng + ?Sized>(case: Case, rng: &mut R) -> (Architecture, f64) {
    let depth = rng.random_range(0..=SEARCH_MAX_DEPTH);
    let hidden = (0..depth)
        .map(|_| HiddenLayer::elu(SEARCH_UNITS[rng.random_range(0..SEARCH_UNITS.len())]))
        .collect();
    let (lo, hi) = case.search_lr_range();
    let lr = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let arch = Architecture::new(case.inputs().len(), hidden, case.output_activation())
        .expect("search space holds valid architectures");
    (arch, lr)
}

/// Random search on the public turbine: train on the first 70 %, score on the rest.
pub fn random_model_search(
    public: &ScadaDataset,
    case: Case,
    options: &SearchOptions,
) -> Result<SearchResult> {
    if options.trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    if public.is_empty() {
        return Err(Error::Data("public dataset is empty".into()));
    }
    let mut ds = public.clone();
    split_test_suffix(&mut ds, options.test_fraction)?;
    let train_records = ds.pool().to_vec();
    let test_records = ds.subset(Partition::Test);
    if train_records.is_empty() {
        return Err(Error::Data("public training split is empty".into()));
    }
    let stats = fit_norm(&train_records, case.inputs())?;
    let train = to_batch(&train_records, &stats, case.target())?;
    let test = to_batch(&test_records, &stats, case.target())?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let candidates: Vec<(Architecture, f64, u64)> = (0..options.trials)
        .map(|_| {
            let (a, lr) = sample_candidate(case, &mut rng);
            (a, lr, rng.random())
        })
        .collect();

    let trials = candidates
        .into_par_iter()
        .map(|(arch, lr, trial_seed)| {
            let (rmse, epochs) = match train_trial(&arch, lr, trial_seed, &train, &test, options) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => (f64::INFINITY, 0),
                Err(e) => return Err(e),
            };
            Ok(Trial {
                architecture: arch,
                learning_rate: lr,
                test_rmse: rmse,
                epochs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = trials.iter().enumerate().fold(0, |b, (i, t)| {
        if t.test_rmse < trials[b].test_rmse {
            i
        } else {
            b
        }
    });
    Ok(SearchResult { best, trials })
}

fn train_trial(
    arch: &Architecture,
    lr: f64,
    seed: u64,
    train: &nn::Batch,
    test: &nn::Batch,
    options: &SearchOptions,
) -> Result<(f64, usize)> {
    let mut model = init_weights(arch, seed);
    let mut opt = OptimizerState::new(arch, lr, options.momentum, options.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs = 0;
    while epochs < options.max_epochs {
        let loss = nn::train_epoch(&mut model, &mut opt, train, &mut rng, 0)?;
        epochs += 1;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                layer: arch.num_layers() - 1,
            });
        }
        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= options.patience {
                break;
            }
        }
    }
    let preds = nn::forward(&model, test.inputs())?;
    Ok((nn::rmse(&preds, test.targets())?, epochs))
}

/// Selects the public turbine of a configured fleet (the turbine after the clients).
pub fn public_turbine(config: &ExperimentConfig) -> Result<ScadaDataset> {
    let fleet = load_fleet(&config.data)?;
    let idx = config.n_clients.unwrap_or(fleet.len().saturating_sub(1));
    fleet
        .into_iter()
        .nth(idx)
        .ok_or_else(|| Error::Config("fleet has no public turbine after the clients".into()))
}

/// Writes each turbine of a dataset list to `<dir>/<turbine_id>.csv`.
pub fn write_fleet(fleet: &[ScadaDataset], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    fleet
        .iter()
        .map(|ds| {
            let path = dir.join(format!("{}.csv", ds.turbine_id));
            data::write_csv(ds, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(strategies: &[Strategy]) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticFleetConfig {
                n_turbines: 4,
                n_scarce: 2,
                rows_per_turbine: 9 * 7 * 144,
                seed: 3,
                ..Default::default()
            }),
            strategies: strategies.iter().copied().collect(),
            max_epochs: Some(30),
            max_rounds: 10,
            ..Default::default()
        }
    }

    #[test]
    fn search_space_has_85_shapes() {
        let shapes = search_space_shapes();
        assert_eq!(shapes.len(), 85);
        let unique: BTreeSet<_> = shapes.iter().collect();
        assert_eq!(unique.len(), 85);
    }

    #[test]
    fn sampled_candidates_stay_in_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in [Case::PowerCurve, Case::BearingTemp] {
            let (lo, hi) = case.search_lr_range();
            for _ in 0..200 {
                let (a, lr) = sample_candidate(case, &mut rng);
                assert!(a.hidden_layers.len() <= 3);
                assert!(a
                    .hidden_layers
                    .iter()
                    .all(|h| SEARCH_UNITS.contains(&h.units) && h.activation == Activation::Elu));
                assert_eq!(a.output_activation, case.output_activation());
                assert!(lr >= lo && lr <= hi);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.strategies.clear();
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            n_clients: Some(3),
            scarce: Some(vec![3]),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            learning_rate: Some(-1.0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            case: Case::BearingTemp,
            architecture: Some(Architecture::power_curve()),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"case": "bearing_temp"}"#).unwrap();
        assert_eq!(c.learning_rate(), 0.00035);
        assert_eq!(c.architecture().param_count(), 185);
        assert_eq!((c.patience_a, c.patience_b, c.patience_c), (15, 5, 5));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn prepared_fleet_layout() {
        let c = small_config(&[Strategy::A]);
        let fleet = load_fleet(&c.data).unwrap();
        let p = prepare_fleet(&c, fleet).unwrap();
        assert_eq!(p.clients.len(), 3);
        assert!(p.public.is_some());
        let kinds: Vec<_> = p.clients.iter().map(|c| c.kind).collect();
        assert_eq!(
            kinds,
            [
                DatasetKind::Scarce,
                DatasetKind::Scarce,
                DatasetKind::Representative
            ]
        );
        // Scarce power clients train on four weeks.
        assert_eq!(p.clients[0].state.data.train.len(), 4 * 7 * 144);
    }

    #[test]
    fn only_requested_columns() {
        let t = run_experiment(&small_config(&[Strategy::A])).unwrap();
        assert_eq!(t.columns, ["rmse_A", "val_rmse_A", "time_A"]);
        assert_eq!(t.rows.len(), 3);
    }

    #[test]
    fn report_csv_roundtrip_and_summary() {
        let t = run_experiment(&small_config(&[Strategy::A, Strategy::B, Strategy::C])).unwrap();
        let csv = t.to_csv(true);
        assert_eq!(csv.lines().count(), 1 + 3 + 2);
        let back = ReportTable::from_csv(&csv).unwrap();
        assert_eq!(back.columns, t.columns);
        for (a, b) in t.rows.iter().zip(&back.rows) {
            assert_eq!((a.wt, &a.turbine, a.kind), (b.wt, &b.turbine, b.kind));
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(format!("{x:.6}"), format!("{y:.6}"));
            }
        }
        let (means, _) = t.summary();
        let j = t.column("rmse_B").unwrap();
        let manual = t.rows.iter().map(|r| r.values[j]).sum::<f64>() / 3.0;
        assert_eq!(means[j], manual);
        // C time includes B time.
        let tb = t.values("time_B", None).unwrap();
        let tc = t.values("time_C", None).unwrap();
        assert!(tb.iter().zip(&tc).all(|(b, c)| c >= b));
        assert!(!t.to_csv(false).contains("time_"));
    }

    #[test]
    fn sample_sd_by_hand() {
        assert_eq!(sample_sd(&[1.0, 3.0]), 2f64.sqrt());
        assert!(sample_sd(&[1.0]).is_nan());
    }

    #[test]
    fn search_is_deterministic() {
        let cfg = SyntheticFleetConfig {
            n_turbines: 1,
            n_scarce: 0,
            rows_per_turbine: 2000,
            ..Default::default()
        };
        let public = generate_synthetic_fleet(&cfg).unwrap().remove(0);
        let opts = SearchOptions {
            trials: 3,
            max_epochs: 5,
            seed: 9,
            ..Default::default()
        };
        let a = random_model_search(&public, Case::PowerCurve, &opts).unwrap();
        let b = random_model_search(&public, Case::PowerCurve, &opts).unwrap();
        assert_eq!(a, b);
        let min = a
            .trials
            .iter()
            .map(|t| t.test_rmse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_trial().test_rmse, min);
    }
}
