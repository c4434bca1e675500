//! SCADA records, CSV ingestion, min-max normalization, the train/validation/test
//! splitting schemes and a synthetic fleet generator.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};

/// SCADA cadence in seconds.
pub const SAMPLING_INTERVAL_S: i64 = 600;
pub const DAY_S: i64 = 86_400;
pub const WEEK_S: i64 = 7 * DAY_S;

/// Scarce training sets span four weeks.
pub const SCARCE_WEEKS: usize = 4;

/// One 10-minute SCADA average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScadaRecord {
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    /// m/s
    pub wind_speed: f64,
    /// MW
    pub power: f64,
    /// rpm
    pub rotor_speed: f64,
    /// °C
    pub bearing_temp: f64,
}

impl ScadaRecord {
    fn is_valid(&self) -> bool {
        let all_finite = [
            self.wind_speed,
            self.power,
            self.rotor_speed,
            self.bearing_temp,
        ]
        .iter()
        .all(|v| v.is_finite());
        all_finite && self.wind_speed >= 0.0 && self.rotor_speed >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    WindSpeed,
    Power,
    RotorSpeed,
    BearingTemp,
}

impl Feature {
    #[inline]
    pub fn value(self, r: &ScadaRecord) -> f64 {
        match self {
            Feature::WindSpeed => r.wind_speed,
            Feature::Power => r.power,
            Feature::RotorSpeed => r.rotor_speed,
            Feature::BearingTemp => r.bearing_temp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::WindSpeed => "wind_speed",
            Feature::Power => "power",
            Feature::RotorSpeed => "rotor_speed",
            Feature::BearingTemp => "bearing_temp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Validation,
    Test,
    /// Not yet assigned; before any pool split this is the pre-train pool.
    Unused,
}

/// Time-ordered records of one turbine with a partition label per record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScadaDataset {
    pub turbine_id: String,
    records: Vec<ScadaRecord>,
    partition: Vec<Partition>,
}

impl ScadaDataset {
    /// Validates strictly increasing timestamps and finite values. All records start `Unused`.
    pub fn new(turbine_id: impl Into<String>, records: Vec<ScadaRecord>) -> Result<Self> {
        let turbine_id = turbine_id.into();
        if let Some(i) = records.iter().position(|r| !r.is_valid()) {
            return Err(Error::Data(format!("{turbine_id}: record {i} is invalid")));
        }
        if let Some(w) = records
            .windows(2)
            .position(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(Error::Data(format!(
                "{turbine_id}: timestamps not strictly increasing at record {}",
                w + 1
            )));
        }
        let partition = vec![Partition::Unused; records.len()];
        Ok(Self {
            turbine_id,
            records,
            partition,
        })
    }

    pub fn records(&self) -> &[ScadaRecord] {
        &self.records
    }

    pub fn partition(&self) -> &[Partition] {
        &self.partition
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, part: Partition) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.partition[i] == part)
            .collect()
    }

    pub fn subset(&self, part: Partition) -> Vec<ScadaRecord> {
        self.records
            .iter()
            .zip(&self.partition)
            .filter(|(_, p)| **p == part)
            .map(|(r, _)| *r)
            .collect()
    }

    /// Everything before the test suffix.
    pub fn pool(&self) -> &[ScadaRecord] {
        let n_test = self
            .partition
            .iter()
            .filter(|p| **p == Partition::Test)
            .count();
        &self.records[..self.records.len() - n_test]
    }

    /// Labels pool indices according to `split`. Pool indices equal dataset indices
    /// because the test partition is a suffix.
    pub fn assign(&mut self, split: &PoolSplit) -> Result<()> {
        let n_pool = self.pool().len();
        let labelled = split
            .train
            .iter()
            .map(|&i| (i, Partition::Train))
            .chain(split.validation.iter().map(|&i| (i, Partition::Validation)));
        for (i, part) in labelled {
            if i >= n_pool {
                return Err(Error::Data(format!("pool index {i} out of range {n_pool}")));
            }
            self.partition[i] = part;
        }
        Ok(())
    }
}

/// `ceil(fraction * n)`, robust to the representation error of decimal fractions.
fn ceil_fraction(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * (n.max(1) as f64) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Labels the final `ceil(fraction * n)` records as test and everything else as pool.
pub fn split_test_suffix(ds: &mut ScadaDataset, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {fraction} not in (0, 1)"
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: empty dataset", ds.turbine_id)));
    }
    let n = ds.len();
    let n_test = ceil_fraction(n, fraction).min(n);
    for (i, p) in ds.partition.iter_mut().enumerate() {
        *p = if i >= n - n_test {
            Partition::Test
        } else {
            Partition::Unused
        };
    }
    Ok(())
}

/// Train/validation indices into a pool.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PoolSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl PoolSplit {
    fn from_mask(mask: &[bool]) -> Self {
        let mut split = PoolSplit::default();
        for (i, &is_train) in mask.iter().enumerate() {
            if is_train {
                split.train.push(i);
            } else {
                split.validation.push(i);
            }
        }
        split
    }
}

/// A 7-day window anchored at the first pool timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeekWindow {
    pub index: usize,
    pub start: i64,
    pub mean_wind: f64,
    pub n_records: usize,
}

/// Complete, non-empty 7-day windows of `pool`. A window is complete when it ends
/// no later than one sampling interval after the last record.
pub fn week_windows(pool: &[ScadaRecord]) -> Vec<WeekWindow> {
    let (Some(first), Some(last)) = (pool.first(), pool.last()) else {
        return Vec::new();
    };
    let t0 = first.timestamp;
    let end = last.timestamp + SAMPLING_INTERVAL_S;
    let n_complete = ((end - t0) / WEEK_S) as usize;
    let mut sums = vec![(0.0, 0usize); n_complete];
    for r in pool {
        let k = ((r.timestamp - t0) / WEEK_S) as usize;
        if k < n_complete {
            sums[k].0 += r.wind_speed;
            sums[k].1 += 1;
        }
    }
    sums.into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(index, (sum, n))| WeekWindow {
            index,
            start: t0 + index as i64 * WEEK_S,
            mean_wind: sum / n as f64,
            n_records: n,
        })
        .collect()
}

/// The four complete 7-day windows with the lowest mean wind speed form the training
/// set (ties go to the earlier window); every other pool record is validation.
pub fn select_scarce_lowest_wind(pool: &[ScadaRecord]) -> Result<PoolSplit> {
    let mut windows = week_windows(pool);
    if windows.len() < SCARCE_WEEKS {
        return Err(Error::Data(format!(
            "pool has {} complete weeks, need {SCARCE_WEEKS}",
            windows.len()
        )));
    }
    windows.sort_by(|a, b| {
        a.mean_wind
            .total_cmp(&b.mean_wind)
            .then(a.index.cmp(&b.index))
    });
    let chosen: Vec<usize> = windows[..SCARCE_WEEKS].iter().map(|w| w.index).collect();
    let t0 = pool[0].timestamp;
    let mask: Vec<bool> = pool
        .iter()
        .map(|r| chosen.contains(&(((r.timestamp - t0) / WEEK_S) as usize)))
        .collect();
    Ok(PoolSplit::from_mask(&mask))
}

/// One 28-day block starting at a uniformly drawn record is train; the rest is validation.
pub fn select_scarce_consecutive(pool: &[ScadaRecord], seed: u64) -> Result<PoolSplit> {
    let block = SCARCE_WEEKS as i64 * WEEK_S;
    let Some(last) = pool.last() else {
        return Err(Error::Data("empty pool".into()));
    };
    let end = last.timestamp + SAMPLING_INTERVAL_S;
    let n_starts = pool
        .iter()
        .take_while(|r| r.timestamp + block <= end)
        .count();
    if n_starts == 0 {
        return Err(Error::Data(format!(
            "pool spans less than {SCARCE_WEEKS} weeks"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = pool[rng.random_range(0..n_starts)].timestamp;
    let mask: Vec<bool> = pool
        .iter()
        .map(|r| r.timestamp >= start && r.timestamp < start + block)
        .collect();
    Ok(PoolSplit::from_mask(&mask))
}

/// First 70% of the pool is train, the final 30% validation.
pub fn split_representative(pool: &[ScadaRecord]) -> PoolSplit {
    let n_val = ceil_fraction(pool.len(), 0.30);
    let n_train = pool.len() - n_val;
    PoolSplit {
        train: (0..n_train).collect(),
        validation: (n_train..pool.len()).collect(),
    }
}

/// Per-feature min and max of a training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub features: Vec<Feature>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_norm<'a>(
    train: impl IntoIterator<Item = &'a ScadaRecord>,
    features: &[Feature],
) -> Result<NormStats> {
    let mut min = vec![f64::INFINITY; features.len()];
    let mut max = vec![f64::NEG_INFINITY; features.len()];
    let mut n = 0usize;
    for r in train {
        n += 1;
        for (j, f) in features.iter().enumerate() {
            let v = f.value(r);
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    if n == 0 {
        return Err(Error::Data(
            "cannot fit normalization on an empty partition".into(),
        ));
    }
    let stats = NormStats {
        features: features.to_vec(),
        min,
        max,
    };
    stats.check()?;
    Ok(stats)
}

impl NormStats {
    fn check(&self) -> Result<()> {
        for (j, f) in self.features.iter().enumerate() {
            if !(self.max[j] > self.min[j]) {
                return Err(Error::DegenerateFeature(f.name().to_string()));
            }
        }
        Ok(())
    }

    /// `(x - min) / (max - min)` for feature column `j`; no clamping.
    #[inline]
    pub fn apply(&self, j: usize, value: f64) -> f64 {
        (value - self.min[j]) / (self.max[j] - self.min[j])
    }

    pub fn apply_record(&self, r: &ScadaRecord) -> Vec<f64> {
        self.features
            .iter()
            .enumerate()
            .map(|(j, f)| self.apply(j, f.value(r)))
            .collect()
    }

    /// Elementwise envelope of several clients' statistics (fleet-wide scaling).
    pub fn envelope(all: &[NormStats]) -> Result<NormStats> {
        let first = all
            .first()
            .ok_or_else(|| Error::Data("no statistics to combine".into()))?;
        let mut out = first.clone();
        for s in &all[1..] {
            if s.features != out.features {
                return Err(Error::Config(
                    "normalization features differ across clients".into(),
                ));
            }
            for j in 0..out.features.len() {
                out.min[j] = out.min[j].min(s.min[j]);
                out.max[j] = out.max[j].max(s.max[j]);
            }
        }
        Ok(out)
    }
}

/// Normalized inputs of `features` and raw `target` values for `records`.
pub fn to_batch(records: &[ScadaRecord], stats: &NormStats, target: Feature) -> Result<Batch> {
    let cols = stats.features.len();
    let mut inputs = Vec::with_capacity(records.len() * cols);
    for r in records {
        inputs.extend(stats.apply_record(r));
    }
    let targets = records.iter().map(|r| target.value(r)).collect();
    Batch::new(Matrix::new(records.len(), cols, inputs)?, targets)
}

/// Column names of the five SCADA fields in a CSV file.
///
/// Rotor speed and bearing temperature may be unmapped (`null`); those channels are
/// then filled with 0, and using them as a model feature fails as a constant feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub wind_speed: String,
    pub power: String,
    pub rotor_speed: Option<String>,
    pub bearing_temp: Option<String>,
    /// Multiplier taking the power column to MW (e.g. 0.001 for kW).
    pub power_scale: f64,
    /// Lines starting with this character are skipped.
    pub comment: Option<char>,
    /// Raw lines to skip before the header (export preambles).
    pub skip_lines: usize,
    /// After `skip_lines`, also skip lines until one contains the timestamp column name.
    pub find_header: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            wind_speed: "wind_speed".into(),
            power: "power".into(),
            rotor_speed: Some("rotor_speed".into()),
            bearing_temp: Some("bearing_temp".into()),
            power_scale: 1.0,
            comment: Some('#'),
            skip_lines: 0,
            find_header: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: ScadaDataset,
    /// Rows dropped for missing, unparsable or non-finite fields.
    pub dropped: usize,
}

/// Epoch seconds or an ISO-8601 style date-time (assumed UTC when no offset is given).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v.round() as i64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim_end_matches('Z'), f).ok())
        .map(|dt| dt.and_utc().timestamp())
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested> {
    let (records, dropped) = read_records(path, schema)?;
    let turbine_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    finish_ingest(path, turbine_id, records, dropped)
}

/// Reads every `*.csv` in `dir` as one turbine (e.g. an export split into yearly files).
/// The turbine is named after the directory.
pub fn ingest_turbine_dir(dir: &Path, schema: &CsvSchema) -> Result<Ingested> {
    let mut records = Vec::new();
    let mut dropped = 0;
    for path in csv_files(dir)? {
        let (r, d) = read_records(&path, schema)?;
        records.extend(r);
        dropped += d;
    }
    let turbine_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    finish_ingest(dir, turbine_id, records, dropped)
}

fn finish_ingest(
    path: &Path,
    turbine_id: String,
    mut records: Vec<ScadaRecord>,
    dropped: usize,
) -> Result<Ingested> {
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no valid rows", path.display())));
    }
    records.sort_by_key(|r| r.timestamp);
    if let Some(w) = records
        .windows(2)
        .find(|w| w[0].timestamp == w[1].timestamp)
    {
        return Err(Error::Data(format!(
            "{}: duplicate timestamp {}",
            path.display(),
            w[0].timestamp
        )));
    }
    Ok(Ingested {
        dataset: ScadaDataset::new(turbine_id, records)?,
        dropped,
    })
}

fn read_records(path: &Path, schema: &CsvSchema) -> Result<(Vec<ScadaRecord>, usize)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut line = String::new();
    for _ in 0..schema.skip_lines {
        line.clear();
        input.read_line(&mut line)?;
    }
    // The header line is consumed while searching, so hand it back to the CSV reader.
    let mut header = String::new();
    if schema.find_header {
        loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::Config(format!(
                    "{}: no header line with `{}`",
                    path.display(),
                    schema.timestamp
                )));
            }
            if line.contains(schema.timestamp.as_str()) {
                header = std::mem::take(&mut line);
                break;
            }
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(schema.comment.map(|c| c as u8))
        .flexible(true)
        .from_reader(std::io::Cursor::new(header).chain(input));
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("{}: no column named `{name}`", path.display())))
    };
    let optional = |name: &Option<String>| name.as_deref().map(column).transpose();
    let cols = [
        Some(column(&schema.timestamp)?),
        Some(column(&schema.wind_speed)?),
        Some(column(&schema.power)?),
        optional(&schema.rotor_speed)?,
        optional(&schema.bearing_temp)?,
    ];

    let mut records = Vec::new();
    let mut dropped = 0;
    for row in reader.records() {
        let row = row?;
        let field = |k: usize| {
            cols[k]
                .and_then(|c| row.get(c))
                .map(str::trim)
                .filter(|s| !s.is_empty())
        };
        let num = |k: usize| field(k).and_then(|s| s.parse::<f64>().ok());
        let channel = |k: usize| if cols[k].is_some() { num(k) } else { Some(0.0) };
        let parsed = (|| {
            Some(ScadaRecord {
                timestamp: parse_timestamp(field(0)?)?,
                wind_speed: num(1)?,
                power: num(2)? * schema.power_scale,
                rotor_speed: channel(3)?,
                bearing_temp: channel(4)?,
            })
        })();
        match parsed {
            Some(r) if r.is_valid() => records.push(r),
            _ => dropped += 1,
        }
    }
    Ok((records, dropped))
}

fn format_timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// Writes records in the default [`CsvSchema`] layout.
pub fn write_csv(ds: &ScadaDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "timestamp",
        "wind_speed",
        "power",
        "rotor_speed",
        "bearing_temp",
    ])?;
    for r in &ds.records {
        w.write_record([
            format_timestamp(r.timestamp),
            r.wind_speed.to_string(),
            r.power.to_string(),
            r.rotor_speed.to_string(),
            r.bearing_temp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no CSV files in {}", dir.display())));
    }
    Ok(paths)
}

/// Loads one turbine per entry of `dir`, sorted by name: every `*.csv` file is a
/// turbine, and so is every subdirectory (all of its CSV files merged).
pub fn ingest_dir(dir: &Path, schema: &CsvSchema) -> Result<Vec<Ingested>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() || p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!("no CSV files in {}", dir.display())));
    }
    entries
        .iter()
        .map(|p| {
            if p.is_dir() {
                ingest_turbine_dir(p, schema)
            } else {
                ingest_csv(p, schema)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// m/s, per turbine around the shared farm wind
    pub wind_sd: f64,
    /// MW
    pub power_sd: f64,
    /// rpm
    pub rotor_sd: f64,
    /// °C
    pub temp_sd: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            wind_sd: 0.3,
            power_sd: 0.05,
            rotor_sd: 0.2,
            temp_sd: 1.0,
        }
    }
}

/// Stand-in for a private wind farm: turbines share the farm's weather but have
/// individual bearing temperature baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticFleetConfig {
    pub n_turbines: usize,
    /// Number of turbines an experiment treats as data-scarce (the first `n_scarce`).
    pub n_scarce: usize,
    pub rows_per_turbine: usize,
    pub start_timestamp: i64,
    /// MW
    pub rated_power: f64,
    /// Wind speed (m/s) where the power ramp reaches rated power.
    pub rated_wind_speed: f64,
    pub weibull_shape: f64,
    /// m/s
    pub weibull_scale: f64,
    /// Relative amplitude of the annual cycle of the Weibull scale.
    pub seasonal_amplitude: f64,
    /// Correlation time of the weather process.
    pub weather_correlation_hours: f64,
    pub cut_in: f64,
    pub cut_out: f64,
    /// rpm at rated wind speed and above.
    pub rated_rotor_speed: f64,
    /// rpm at cut-in.
    pub min_rotor_speed: f64,
    /// Per-turbine base temperatures are spread over this interval (°C).
    pub temp_base_range: (f64, f64),
    /// °C added at rated power.
    pub temp_power_coeff: f64,
    /// °C added at rated rotor speed.
    pub temp_rotor_coeff: f64,
    /// Nacelle anemometer gains are spread over `1 ± anemometer_spread`, so the
    /// power curve over measured wind differs slightly between turbines.
    pub anemometer_spread: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SyntheticFleetConfig {
    fn default() -> Self {
        Self {
            n_turbines: 10,
            n_scarce: 5,
            // 39 weeks at 10-minute cadence
            rows_per_turbine: 39 * 7 * 144,
            start_timestamp: 1_609_459_200,
            rated_power: 3.3,
            rated_wind_speed: 12.0,
            weibull_shape: 2.0,
            weibull_scale: 7.5,
            seasonal_amplitude: 0.35,
            weather_correlation_hours: 72.0,
            cut_in: 3.0,
            cut_out: 25.0,
            rated_rotor_speed: 14.0,
            min_rotor_speed: 5.0,
            temp_base_range: (40.0, 55.0),
            temp_power_coeff: 15.0,
            temp_rotor_coeff: 8.0,
            anemometer_spread: 0.02,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

impl SyntheticFleetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic fleet: {m}")));
        if self.n_turbines == 0 || self.rows_per_turbine < 2 {
            return fail("need at least one turbine and two rows");
        }
        if self.n_scarce > self.n_turbines {
            return fail("n_scarce exceeds n_turbines");
        }
        if !(self.cut_in >= 0.0
            && self.cut_in < self.rated_wind_speed
            && self.rated_wind_speed < self.cut_out)
        {
            return fail("need 0 <= cut_in < rated_wind_speed < cut_out");
        }
        if !(self.weibull_shape > 0.0 && self.weibull_scale > 0.0) {
            return fail("Weibull parameters must be positive");
        }
        if !(self.temp_base_range.1 > self.temp_base_range.0) {
            return fail("temp_base_range span must be positive");
        }
        if !(self.rated_power > 0.0 && self.weather_correlation_hours > 0.0) {
            return fail("rated_power and weather_correlation_hours must be positive");
        }
        if !(0.0..1.0).contains(&self.anemometer_spread) {
            return fail("anemometer_spread must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.seasonal_amplitude) {
            return fail("seasonal_amplitude must be in [0, 1)");
        }
        if !(self.rated_rotor_speed > self.min_rotor_speed && self.min_rotor_speed >= 0.0) {
            return fail("need 0 <= min_rotor_speed < rated_rotor_speed");
        }
        let n = &self.noise;
        if [n.wind_sd, n.power_sd, n.rotor_sd, n.temp_sd]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return fail("noise standard deviations must be non-negative");
        }
        Ok(())
    }

    /// Fraction of rated power at wind speed `w`: a logistic ramp from cut-in to the
    /// rated wind speed, rescaled to start at 0, and 0 at or above cut-out.
    pub fn power_fraction(&self, w: f64) -> f64 {
        if w < self.cut_in || w >= self.cut_out {
            return 0.0;
        }
        let mid = 0.5 * (self.cut_in + self.rated_wind_speed);
        let k = 2.0 * 49f64.ln() / (self.rated_wind_speed - self.cut_in);
        let logistic = |x: f64| 1.0 / (1.0 + (-k * (x - mid)).exp());
        let floor = logistic(self.cut_in);
        ((logistic(w) - floor) / (1.0 - floor)).clamp(0.0, 1.0)
    }

    /// Saturating rotor speed curve (rpm) without noise.
    pub fn rotor_curve(&self, w: f64) -> f64 {
        if w < self.cut_in || w >= self.cut_out {
            return 0.0;
        }
        let x = ((w - self.cut_in) / (self.rated_wind_speed - self.cut_in)).min(1.0);
        let shaped = 1.0 - (1.0 - x).powi(2);
        self.min_rotor_speed + (self.rated_rotor_speed - self.min_rotor_speed) * shaped
    }
}

/// Turbine ids `wt01`, `wt02`, ...; timestamps every 10 minutes from `start_timestamp`.
pub fn generate_synthetic_fleet(config: &SyntheticFleetConfig) -> Result<Vec<ScadaDataset>> {
    config.validate()?;
    let n = config.rows_per_turbine;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Farm weather: two AR(1) Gaussian components give an Exp(1) energy
    // E = (x² + y²)/2, and scale * E^(1/k) is Weibull(k, scale) marginally.
    let phi = (-(SAMPLING_INTERVAL_S as f64) / (config.weather_correlation_hours * 3600.0)).exp();
    let innov = (1.0 - phi * phi).sqrt();
    let (mut x, mut y): (f64, f64) = (std_normal.sample(&mut rng), std_normal.sample(&mut rng));
    let year_s = 365.25 * DAY_S as f64;
    let mut farm_wind = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            x = phi * x + innov * std_normal.sample(&mut rng);
            y = phi * y + innov * std_normal.sample(&mut rng);
        }
        let energy = 0.5 * (x * x + y * y);
        let t = i as f64 * SAMPLING_INTERVAL_S as f64;
        let scale = config.weibull_scale
            * (1.0 + config.seasonal_amplitude * (2.0 * std::f64::consts::PI * t / year_s).cos());
        farm_wind.push(scale * energy.powf(1.0 / config.weibull_shape));
    }

    // Stratified base temperatures, shuffled across turbines.
    let (lo, hi) = config.temp_base_range;
    let mut bases: Vec<f64> = (0..config.n_turbines)
        .map(|i| lo + (hi - lo) * (i as f64 + rng.random::<f64>()) / config.n_turbines as f64)
        .collect();
    bases.shuffle(&mut rng);
    let spread = config.anemometer_spread;
    let mut gains: Vec<f64> = (0..config.n_turbines)
        .map(|i| {
            1.0 - spread
                + 2.0 * spread * (i as f64 + rng.random::<f64>()) / config.n_turbines as f64
        })
        .collect();
    gains.shuffle(&mut rng);

    let noise = |sd: f64| Normal::new(0.0, sd).expect("non-negative sd");
    let (wind_noise, power_noise) = (noise(config.noise.wind_sd), noise(config.noise.power_sd));
    let (rotor_noise, temp_noise) = (noise(config.noise.rotor_sd), noise(config.noise.temp_sd));

    let mut fleet = Vec::with_capacity(config.n_turbines);
    for (t, (base, gain)) in bases.into_iter().zip(gains).enumerate() {
        let mut trng = ChaCha8Rng::seed_from_u64(config.seed);
        trng.set_stream(t as u64 + 1);
        let records = farm_wind
            .iter()
            .enumerate()
            .map(|(i, &w_farm)| {
                let wind = (w_farm + wind_noise.sample(&mut trng)).max(0.0);
                let power_frac = config.power_fraction(wind);
                let power =
                    (config.rated_power * power_frac + power_noise.sample(&mut trng)).max(0.0);
                let rotor = (config.rotor_curve(wind) + rotor_noise.sample(&mut trng)).max(0.0);
                let bearing_temp = base
                    + config.temp_power_coeff * (power / config.rated_power)
                    + config.temp_rotor_coeff * (rotor / config.rated_rotor_speed)
                    + temp_noise.sample(&mut trng);
                ScadaRecord {
                    timestamp: config.start_timestamp + i as i64 * SAMPLING_INTERVAL_S,
                    wind_speed: gain * wind,
                    power,
                    rotor_speed: rotor,
                    bearing_temp,
                }
            })
            .collect();
        fleet.push(ScadaDataset::new(format!("wt{:02}", t + 1), records)?);
    }
    Ok(fleet)
}

/// Per-turbine mean of `feature`, keyed by turbine id.
pub fn feature_means(fleet: &[ScadaDataset], feature: Feature) -> BTreeMap<String, f64> {
    fleet
        .iter()
        .map(|ds| {
            let sum: f64 = ds.records.iter().map(|r| feature.value(r)).sum();
            (ds.turbine_id.clone(), sum / ds.len().max(1) as f64)
        })
        .collect()
}
