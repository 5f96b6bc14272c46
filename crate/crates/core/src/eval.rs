//! Metrics and the multi-seed experiment harness.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{gen_synthetic, split, FeatureBlocks};
use crate::error::{Error, Result};
use crate::estimator::{predict_cate, train, DpswModel, Hyperparams, Mode, TrainOutput};

/// Offsets that derive split and training seeds from a replication's data seed.
pub const SPLIT_SEED_OFFSET: u64 = 0x9e37_79b9;
pub const TRAIN_SEED_OFFSET: u64 = 0x7f4a_7c15;

/// Root-mean-square error between `tau_hat` and `y1 - y0`.
pub fn pehe(y0: &[f64], y1: &[f64], tau_hat: &[f64]) -> Result<f64> {
    if y0.len() != y1.len() || y0.len() != tau_hat.len() {
        return Err(Error::Shape(format!(
            "pehe inputs have lengths {}, {}, {}",
            y0.len(),
            y1.len(),
            tau_hat.len()
        )));
    }
    if y0.is_empty() {
        return Err(Error::Shape("pehe needs at least one row".into()));
    }
    let sse: f64 = y0
        .iter()
        .zip(y1)
        .zip(tau_hat)
        .map(|((a, b), t)| ((b - a) - t).powi(2))
        .sum();
    Ok((sse / y0.len() as f64).sqrt())
}

/// Relative difference between the mean absolute first-layer weight on the
/// `block` input columns and on the remaining columns.
///
/// `w1` is `out x in`, as stored by [`crate::nnet::Dense`].
pub fn attribution(w1: ArrayView2<f64>, block: Range<usize>) -> Result<f64> {
    let d = w1.ncols();
    if block.is_empty() || block.end > d || block.len() == d {
        return Err(Error::InvalidParameter(format!(
            "block {block:?} must be a nonempty strict subset of 0..{d}"
        )));
    }
    if w1.nrows() == 0 {
        return Err(Error::Shape("weight matrix has no rows".into()));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for row in w1.rows() {
        for (j, v) in row.iter().enumerate() {
            if block.contains(&j) {
                inside += v.abs();
            } else {
                outside += v.abs();
            }
        }
    }
    let rows = w1.nrows() as f64;
    let mean_in = inside / (rows * block.len() as f64);
    let mean_out = outside / (rows * (d - block.len()) as f64);
    if mean_out < 1e-12 {
        return Err(Error::DegenerateDenominator(format!("mean |w| outside block {block:?} is {mean_out}")));
    }
    Ok((mean_in - mean_out) / mean_out)
}

/// Attribution of each encoder against its own block, as `[gamma, delta, upsilon]`.
///
/// The shared encoder of `single_encoder` mode is scored against all three
/// blocks. Missing encoders and degenerate matrices give `None`.
pub fn encoder_attributions(model: &DpswModel, blocks: &FeatureBlocks) -> [Option<f64>; 3] {
    let first = |m: Option<&crate::nnet::Mlp>, block: &Range<usize>| {
        m.and_then(|m| attribution(m.layers[0].weight.view(), block.clone()).ok())
    };
    if model.mode == Mode::SingleEncoder {
        let m = Some(&model.delta);
        return [first(m, &blocks.gamma), first(m, &blocks.delta), first(m, &blocks.upsilon)];
    }
    [
        first(model.gamma.as_ref(), &blocks.gamma),
        first(Some(&model.delta), &blocks.delta),
        first(model.upsilon.as_ref(), &blocks.upsilon),
    ]
}

/// Harness configuration. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modes: Vec<Mode>,
    pub d: Vec<usize>,
    pub n: usize,
    /// Number of replications per dimension.
    pub seeds: usize,
    pub master_seed: u64,
    pub ratios: [f64; 3],
    pub hyperparams: Hyperparams,
    /// Partial hyperparameter overrides; each run keeps the candidate with
    /// the lowest validation objective. Empty means the base set only.
    pub grid: Vec<serde_json::Map<String, serde_json::Value>>,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Dpsw, Mode::DpswNorm, Mode::DrcfrRaw, Mode::SingleEncoder],
            d: vec![18],
            n: 4000,
            seeds: 10,
            master_seed: 0,
            ratios: [0.5, 0.25, 0.25],
            hyperparams: Hyperparams::default(),
            grid: Vec::new(),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.d.is_empty() || self.seeds == 0 || self.n == 0 {
            return Err(Error::Config("modes, d, seeds and n must be nonempty".into()));
        }
        if let Some(bad) = self.d.iter().find(|d| **d == 0 || **d % 3 != 0) {
            return Err(Error::Config(format!("d = {bad} is not a positive multiple of 3")));
        }
        self.hyperparams.validate()?;
        for hp in self.candidates()? {
            hp.validate()?;
        }
        Ok(())
    }

    /// Hyperparameter candidates: the base set patched by each grid entry.
    pub fn candidates(&self) -> Result<Vec<Hyperparams>> {
        if self.grid.is_empty() {
            return Ok(vec![self.hyperparams.clone()]);
        }
        let base = serde_json::to_value(&self.hyperparams)?;
        self.grid
            .iter()
            .map(|patch| {
                let mut v = base.clone();
                let obj = v.as_object_mut().expect("hyperparams serialize to an object");
                for (k, val) in patch {
                    obj.insert(k.clone(), val.clone());
                }
                serde_json::from_value(v).map_err(|e| Error::Config(format!("bad grid entry: {e}")))
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }
}

/// Seeds of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicationSeeds {
    pub data: u64,
    pub split: u64,
    pub train: u64,
}

impl ReplicationSeeds {
    pub fn derive(master_seed: u64, d: usize, replication: usize) -> Self {
        let data = master_seed
            .wrapping_add(replication as u64)
            .wrapping_add((d as u64).wrapping_mul(1_000_003));
        Self {
            data,
            split: data.wrapping_add(SPLIT_SEED_OFFSET),
            train: data.wrapping_add(TRAIN_SEED_OFFSET),
        }
    }
}

/// One (dimension, replication, mode) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub d: usize,
    pub replication: usize,
    pub data_seed: u64,
    pub mode: Mode,
    pub pehe: Option<f64>,
    pub attribution_gamma: Option<f64>,
    pub attribution_delta: Option<f64>,
    pub attribution_upsilon: Option<f64>,
    pub fallbacks: usize,
    pub rounds: usize,
    pub best_round: usize,
    pub val_objective: Option<f64>,
    /// Mean fitted tail shape per training round.
    pub xi_trace: Vec<f64>,
    /// Set when the run aborted.
    pub error: Option<String>,
}

/// Summary over replications for one (dimension, mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub d: usize,
    pub mode: Mode,
    pub runs: usize,
    pub failures: usize,
    pub pehe_mean: Option<f64>,
    pub pehe_std: Option<f64>,
    pub attribution_gamma_mean: Option<f64>,
    pub attribution_gamma_std: Option<f64>,
    pub attribution_delta_mean: Option<f64>,
    pub attribution_delta_std: Option<f64>,
    pub attribution_upsilon_mean: Option<f64>,
    pub attribution_upsilon_std: Option<f64>,
    pub fallbacks_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<SeedRecord>,
    pub aggregates: Vec<AggregateRecord>,
}

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

impl ExperimentResult {
    /// Groups records by (d, mode) in first-appearance order and summarizes.
    pub fn from_records(records: Vec<SeedRecord>) -> Self {
        let mut order: Vec<(usize, Mode)> = Vec::new();
        let mut groups: BTreeMap<(usize, Mode), Vec<&SeedRecord>> = BTreeMap::new();
        for r in &records {
            let key = (r.d, r.mode);
            if !groups.contains_key(&key) {
                order.push(key);
            }
            groups.entry(key).or_default().push(r);
        }
        let aggregates = order
            .into_iter()
            .map(|key| {
                let rs = &groups[&key];
                let collect = |f: fn(&SeedRecord) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
                let (pehe_mean, pehe_std) = mean_std(&collect(|r| r.pehe));
                let (attribution_gamma_mean, attribution_gamma_std) = mean_std(&collect(|r| r.attribution_gamma));
                let (attribution_delta_mean, attribution_delta_std) = mean_std(&collect(|r| r.attribution_delta));
                let (attribution_upsilon_mean, attribution_upsilon_std) =
                    mean_std(&collect(|r| r.attribution_upsilon));
                AggregateRecord {
                    d: key.0,
                    mode: key.1,
                    runs: rs.len(),
                    failures: rs.iter().filter(|r| r.error.is_some()).count(),
                    pehe_mean,
                    pehe_std,
                    attribution_gamma_mean,
                    attribution_gamma_std,
                    attribution_delta_mean,
                    attribution_delta_std,
                    attribution_upsilon_mean,
                    attribution_upsilon_std,
                    fallbacks_mean: rs.iter().map(|r| r.fallbacks as f64).sum::<f64>() / rs.len() as f64,
                }
            })
            .collect();
        Self { records, aggregates }
    }

    pub fn aggregate(&self, d: usize, mode: Mode) -> Option<&AggregateRecord> {
        self.aggregates.iter().find(|a| a.d == d && a.mode == mode)
    }

    /// Writes `per_seed.csv`, `aggregate.csv` and `results.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_seed_csv(&self.records, dir.join(PER_SEED_CSV))?;
        write_aggregate_csv(&self.aggregates, dir.join(AGGREGATE_CSV))?;
        let f = std::io::BufWriter::new(std::fs::File::create(dir.join(RESULTS_JSON))?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }

    /// Copy with every real rounded the way the CSV files store it.
    pub fn rounded(&self) -> Self {
        let r = |v: Option<f64>| v.map(round_sig6);
        Self {
            records: self
                .records
                .iter()
                .map(|s| SeedRecord {
                    pehe: r(s.pehe),
                    attribution_gamma: r(s.attribution_gamma),
                    attribution_delta: r(s.attribution_delta),
                    attribution_upsilon: r(s.attribution_upsilon),
                    val_objective: r(s.val_objective),
                    xi_trace: s.xi_trace.iter().copied().map(round_sig6).collect(),
                    ..s.clone()
                })
                .collect(),
            aggregates: self
                .aggregates
                .iter()
                .map(|a| AggregateRecord {
                    pehe_mean: r(a.pehe_mean),
                    pehe_std: r(a.pehe_std),
                    attribution_gamma_mean: r(a.attribution_gamma_mean),
                    attribution_gamma_std: r(a.attribution_gamma_std),
                    attribution_delta_mean: r(a.attribution_delta_mean),
                    attribution_delta_std: r(a.attribution_delta_std),
                    attribution_upsilon_mean: r(a.attribution_upsilon_mean),
                    attribution_upsilon_std: r(a.attribution_upsilon_std),
                    fallbacks_mean: round_sig6(a.fallbacks_mean),
                    ..a.clone()
                })
                .collect(),
        }
    }

    /// Reads both CSV files back from `dir`.
    pub fn read_csv(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            records: read_seed_csv(dir.join(PER_SEED_CSV))?,
            aggregates: read_aggregate_csv(dir.join(AGGREGATE_CSV))?,
        })
    }
}

pub const PER_SEED_CSV: &str = "per_seed.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const RESULTS_JSON: &str = "results.json";

fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.5e}")
    } else {
        v.to_string()
    }
}

/// `v` rounded to six significant digits.
pub fn round_sig6(v: f64) -> f64 {
    fmt6(v).parse().unwrap_or(v)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_default()
}

const SEED_HEADER: [&str; 14] = [
    "d",
    "replication",
    "data_seed",
    "mode",
    "pehe",
    "attribution_gamma",
    "attribution_delta",
    "attribution_upsilon",
    "fallbacks",
    "rounds",
    "best_round",
    "val_objective",
    "xi_trace",
    "error",
];

const AGG_HEADER: [&str; 13] = [
    "d",
    "mode",
    "runs",
    "failures",
    "pehe_mean",
    "pehe_std",
    "attribution_gamma_mean",
    "attribution_gamma_std",
    "attribution_delta_mean",
    "attribution_delta_std",
    "attribution_upsilon_mean",
    "attribution_upsilon_std",
    "fallbacks_mean",
];

pub fn write_seed_csv(records: &[SeedRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SEED_HEADER)?;
    for r in records {
        let trace = r.xi_trace.iter().map(|v| fmt6(*v)).collect::<Vec<_>>().join(";");
        w.write_record([
            r.d.to_string(),
            r.replication.to_string(),
            r.data_seed.to_string(),
            r.mode.to_string(),
            fmt_opt(r.pehe),
            fmt_opt(r.attribution_gamma),
            fmt_opt(r.attribution_delta),
            fmt_opt(r.attribution_upsilon),
            r.fallbacks.to_string(),
            r.rounds.to_string(),
            r.best_round.to_string(),
            fmt_opt(r.val_objective),
            trace,
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv(aggs: &[AggregateRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGG_HEADER)?;
    for a in aggs {
        w.write_record([
            a.d.to_string(),
            a.mode.to_string(),
            a.runs.to_string(),
            a.failures.to_string(),
            fmt_opt(a.pehe_mean),
            fmt_opt(a.pehe_std),
            fmt_opt(a.attribution_gamma_mean),
            fmt_opt(a.attribution_gamma_std),
            fmt_opt(a.attribution_delta_mean),
            fmt_opt(a.attribution_delta_std),
            fmt_opt(a.attribution_upsilon_mean),
            fmt_opt(a.attribution_upsilon_std),
            fmt6(a.fallbacks_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    line: usize,
    header: &'a [&'a str],
}

impl Row<'_> {
    fn cell(&self, col: usize) -> &str {
        self.rec.get(col).unwrap_or("")
    }

    fn err(&self, col: usize, message: String) -> Error {
        Error::Parse {
            row: self.line,
            column: self.header[col].to_string(),
            message,
        }
    }

    fn parse<T: std::str::FromStr>(&self, col: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.cell(col)
            .parse()
            .map_err(|e: T::Err| self.err(col, format!("'{}': {e}", self.cell(col))))
    }

    fn opt(&self, col: usize) -> Result<Option<f64>> {
        if self.cell(col).is_empty() {
            Ok(None)
        } else {
            self.parse(col).map(Some)
        }
    }
}

fn read_rows<T>(path: &Path, header: &[&str], mut f: impl FnMut(&Row<'_>) -> Result<T>) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Parse {
            row: 1,
            column: String::new(),
            message: format!("unexpected header {found:?}"),
        });
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        out.push(f(&Row {
            rec: &rec,
            line: k + 2,
            header,
        })?);
    }
    Ok(out)
}

pub fn read_seed_csv(path: impl AsRef<Path>) -> Result<Vec<SeedRecord>> {
    read_rows(path.as_ref(), &SEED_HEADER, |r| {
        let trace = r.cell(12);
        let xi_trace = if trace.is_empty() {
            Vec::new()
        } else {
            trace
                .split(';')
                .map(|t| t.parse::<f64>().map_err(|e| r.err(12, format!("'{t}': {e}"))))
                .collect::<Result<_>>()?
        };
        Ok(SeedRecord {
            d: r.parse(0)?,
            replication: r.parse(1)?,
            data_seed: r.parse(2)?,
            mode: r.cell(3).parse().map_err(|e: Error| r.err(3, e.to_string()))?,
            pehe: r.opt(4)?,
            attribution_gamma: r.opt(5)?,
            attribution_delta: r.opt(6)?,
            attribution_upsilon: r.opt(7)?,
            fallbacks: r.parse(8)?,
            rounds: r.parse(9)?,
            best_round: r.parse(10)?,
            val_objective: r.opt(11)?,
            xi_trace,
            error: (!r.cell(13).is_empty()).then(|| r.cell(13).to_string()),
        })
    })
}

pub fn read_aggregate_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateRecord>> {
    read_rows(path.as_ref(), &AGG_HEADER, |r| {
        Ok(AggregateRecord {
            d: r.parse(0)?,
            mode: r.cell(1).parse().map_err(|e: Error| r.err(1, e.to_string()))?,
            runs: r.parse(2)?,
            failures: r.parse(3)?,
            pehe_mean: r.opt(4)?,
            pehe_std: r.opt(5)?,
            attribution_gamma_mean: r.opt(6)?,
            attribution_gamma_std: r.opt(7)?,
            attribution_delta_mean: r.opt(8)?,
            attribution_delta_std: r.opt(9)?,
            attribution_upsilon_mean: r.opt(10)?,
            attribution_upsilon_std: r.opt(11)?,
            fallbacks_mean: r.parse(12)?,
        })
    })
}

/// Trains every candidate and keeps the one with the lowest validation objective.
fn train_best(
    tr: &crate::datagen::Dataset,
    va: &crate::datagen::Dataset,
    candidates: &[Hyperparams],
    mode: Mode,
    seed: u64,
) -> Result<TrainOutput> {
    let mut best: Option<TrainOutput> = None;
    for hp in candidates {
        let hp = Hyperparams { seed, ..hp.clone() };
        let out = train(tr, va, &hp, mode)?;
        if best.as_ref().is_none_or(|b| out.best_val_objective < b.best_val_objective) {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// One (dimension, replication, mode) job. Aborts become records with `error` set.
pub fn run_job(cfg: &ExperimentConfig, candidates: &[Hyperparams], d: usize, replication: usize, mode: Mode) -> SeedRecord {
    let seeds = ReplicationSeeds::derive(cfg.master_seed, d, replication);
    let mut record = SeedRecord {
        d,
        replication,
        data_seed: seeds.data,
        mode,
        pehe: None,
        attribution_gamma: None,
        attribution_delta: None,
        attribution_upsilon: None,
        fallbacks: 0,
        rounds: 0,
        best_round: 0,
        val_objective: None,
        xi_trace: Vec::new(),
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let data = gen_synthetic(d, cfg.n, seeds.data)?;
        let blocks = data.blocks.clone().ok_or_else(|| Error::InvalidInput("no block annotation".into()))?;
        let [tr, va, te] = split(&data, cfg.ratios, seeds.split)?;
        let out = train_best(&tr, &va, candidates, mode, seeds.train)?;
        record.fallbacks = out.total_fallbacks();
        record.rounds = out.log.len();
        record.best_round = out.best_round;
        record.val_objective = Some(out.best_val_objective);
        record.xi_trace = out.xi_trace();
        let tau = predict_cate(&out.model, te.x.view())?;
        let (y0, y1) = (te.y0.as_ref(), te.y1.as_ref());
        record.pehe = Some(pehe(
            y0.ok_or_else(|| Error::InvalidInput("missing y0".into()))?,
            y1.ok_or_else(|| Error::InvalidInput("missing y1".into()))?,
            &tau,
        )?);
        let [g, dl, u] = encoder_attributions(&out.model, &blocks);
        record.attribution_gamma = g;
        record.attribution_delta = dl;
        record.attribution_upsilon = u;
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("d={d} replication {replication} {mode}: {e}");
        record.error = Some(e.to_string());
    } else {
        log::info!("d={d} replication {replication} {mode}: pehe {:?}", record.pehe);
    }
    record
}

/// Runs every (dimension, replication, mode) job and summarizes.
///
/// Jobs run in parallel; records come back in (d, replication, mode) order
/// regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let candidates = cfg.candidates()?;
    let jobs: Vec<(usize, usize, Mode)> = cfg
        .d
        .iter()
        .flat_map(|&d| (0..cfg.seeds).flat_map(move |r| cfg.modes.iter().map(move |&m| (d, r, m))))
        .collect();
    let run = || -> Vec<SeedRecord> {
        jobs.par_iter()
            .map(|&(d, r, m)| run_job(cfg, &candidates, d, r, m))
            .collect()
    };
    let records = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    Ok(ExperimentResult::from_records(records))
}
