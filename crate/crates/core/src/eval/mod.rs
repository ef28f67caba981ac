//! Four-method comparison on the test split: data selection, per-chunk
//! reachability trials, and Table-style reports.

mod labels;
mod scenario;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use labels::LabelTable;
pub use scenario::{resolve_scenario, scenario_report, ScenarioExport, ScenarioReport, ScenarioRow, DEFAULT_SCENARIOS};

use crate::ann::{AnnForest, Assignment};
use crate::cluster::mean_pool;
use crate::data::{Standardizer, TrajectoryChunk, FEATURES};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::reach::{identify_models, reach, state_of, Exclusion, ReachConfig, TrialResult, TrialStatus, POSITION_DIMS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    BaselineAll,
    ExternalLabels,
    ClusterRaw,
    ClusterEncoded,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [MethodKind::BaselineAll, MethodKind::ExternalLabels, MethodKind::ClusterRaw, MethodKind::ClusterEncoded];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::BaselineAll => "baseline_all",
            MethodKind::ExternalLabels => "external_labels",
            MethodKind::ClusterRaw => "cluster_raw",
            MethodKind::ClusterEncoded => "cluster_encoded",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Radius of the location test, meters. Infinite selects everything.
    pub radius: f64,
    /// Heading tolerance of the label method, degrees.
    pub heading_tolerance: f64,
    pub label_file: Option<PathBuf>,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            radius: 1.5,
            heading_tolerance: 45.0,
            label_file: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.heading_tolerance >= 0.0) {
            return Err(Error::Config(format!("{}: radius must be positive", self.kind.as_str())));
        }
        if self.kind == MethodKind::ExternalLabels && self.label_file.is_none() {
            return Err(Error::Config("external_labels needs a label file".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Observed steps before prediction.
    pub k_obs: usize,
    /// Neighbours considered by the cluster assignment.
    pub assign_k: usize,
    pub encode_batch: usize,
    pub reach: ReachConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_obs: 10,
            assign_k: 10,
            encode_batch: 64,
            reach: ReachConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_obs < 2 || self.assign_k == 0 || self.encode_batch == 0 {
            return Err(Error::Config("k_obs must be at least 2; assign_k and encode_batch positive".into()));
        }
        self.reach.validate()
    }
}

/// Standardized feature means over real rows.
pub fn raw_pooled(chunk: &TrajectoryChunk, standardizer: &Standardizer) -> Result<Vec<f32>> {
    let s = standardizer.apply(chunk);
    mean_pool(&s.values, FEATURES, &s.padding)
}

/// Mean-pooled eval-mode embeddings, one per chunk.
pub fn encoded_pooled(encoder: &Encoder<f32>, chunks: &[TrajectoryChunk], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let d = encoder.config.d_model;
    encoder
        .encode_dataset(chunks, batch_size)?
        .into_iter()
        .zip(chunks)
        .map(|((_, h), c)| mean_pool(h.data(), d, &c.padding))
        .collect()
}

/// Everything the methods select from. Forest items are identified by
/// historical chunk id.
pub struct EvalContext<'a> {
    historical: &'a [TrajectoryChunk],
    by_id: HashMap<String, usize>,
    encoder: Option<&'a Encoder<f32>>,
    encoded_index: Option<&'a AnnForest>,
    raw_index: Option<&'a AnnForest>,
    raw_standardizer: Standardizer,
    labels: Option<&'a LabelTable>,
}

impl<'a> EvalContext<'a> {
    pub fn new(historical: &'a [TrajectoryChunk], raw_standardizer: Standardizer) -> Self {
        Self {
            historical,
            by_id: historical.iter().enumerate().map(|(i, c)| (c.id(), i)).collect(),
            encoder: None,
            encoded_index: None,
            raw_index: None,
            raw_standardizer,
            labels: None,
        }
    }

    pub fn with_encoded(mut self, encoder: &'a Encoder<f32>, index: &'a AnnForest) -> Self {
        self.encoder = Some(encoder);
        self.encoded_index = Some(index);
        self
    }

    pub fn with_raw(mut self, index: &'a AnnForest) -> Self {
        self.raw_index = Some(index);
        self
    }

    pub fn with_labels(mut self, labels: &'a LabelTable) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn historical(&self) -> &'a [TrajectoryChunk] {
        self.historical
    }

    fn require(&self, kind: MethodKind) -> Result<()> {
        let missing = match kind {
            MethodKind::BaselineAll => None,
            MethodKind::ExternalLabels => self.labels.is_none().then_some("label table"),
            MethodKind::ClusterRaw => self.raw_index.is_none().then_some("raw-feature index"),
            MethodKind::ClusterEncoded => (self.encoder.is_none() || self.encoded_index.is_none()).then_some("encoder and encoded index"),
        };
        match missing {
            Some(what) => Err(Error::Contract(format!("{} needs a {what}", kind.as_str()))),
            None => Ok(()),
        }
    }

    /// Historical chunks carrying `label` in `index`.
    fn members(&self, index: &AnnForest, label: i32) -> Result<Vec<&'a TrajectoryChunk>> {
        (0..index.len())
            .filter(|&i| index.labels()[i] == label)
            .map(|i| {
                self.by_id
                    .get(index.id(i))
                    .map(|&h| &self.historical[h])
                    .ok_or_else(|| Error::Contract(format!("index item {} is not a historical chunk", index.id(i))))
            })
            .collect()
    }
}

/// The observed part of a test chunk and its precomputed query vectors.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub chunk: &'a TrajectoryChunk,
    pub prefix: TrajectoryChunk,
    pub raw: Vec<f32>,
    pub encoded: Option<Vec<f32>>,
}

fn mean_heading<'r>(rows: impl Iterator<Item = &'r [f32]>) -> Option<f64> {
    let (mut vx, mut vy) = (0.0f64, 0.0f64);
    for r in rows {
        vx += f64::from(r[2]);
        vy += f64::from(r[3]);
    }
    (vx != 0.0 || vy != 0.0).then(|| vy.atan2(vx))
}

fn angle_between(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

fn passes_near(chunk: &TrajectoryChunk, p: (f64, f64), radius: f64) -> bool {
    radius.is_infinite()
        || chunk
            .real_rows()
            .any(|r| (f64::from(r[0]) - p.0).hypot(f64::from(r[1]) - p.1) <= radius)
}

/// Historical data for one query under `method`.
pub fn select_data<'a>(
    method: &MethodSpec,
    query: &Query<'_>,
    ctx: &EvalContext<'a>,
    cfg: &EvalConfig,
) -> Result<std::result::Result<Vec<&'a TrajectoryChunk>, Exclusion>> {
    ctx.require(method.kind)?;
    let last = query.prefix.row(query.prefix.real_len() - 1);
    let here = (f64::from(last[0]), f64::from(last[1]));
    let selected: Vec<&TrajectoryChunk> = match method.kind {
        MethodKind::BaselineAll => ctx.historical.iter().filter(|c| passes_near(c, here, method.radius)).collect(),
        MethodKind::ExternalLabels => {
            let table = ctx.labels.expect("checked");
            let Some(label) = table.label_of(query.chunk) else {
                return Ok(Err(Exclusion::NoData));
            };
            let heading = mean_heading(query.prefix.real_rows());
            let tol = method.heading_tolerance.to_radians();
            ctx.historical
                .iter()
                .filter(|c| table.label_of(c) == Some(label))
                .filter(|c| passes_near(c, here, method.radius))
                .filter(|c| match (heading, mean_heading(c.real_rows())) {
                    (Some(a), Some(b)) => angle_between(a, b) <= tol,
                    _ => true,
                })
                .collect()
        }
        MethodKind::ClusterRaw | MethodKind::ClusterEncoded => {
            let (index, q) = if method.kind == MethodKind::ClusterRaw {
                (ctx.raw_index.expect("checked"), query.raw.as_slice())
            } else {
                let q = query
                    .encoded
                    .as_deref()
                    .ok_or_else(|| Error::Contract("query was not encoded".into()))?;
                (ctx.encoded_index.expect("checked"), q)
            };
            match index.assign_cluster(q, cfg.assign_k)? {
                Assignment::Rejected(r) => return Ok(Err(r.into())),
                Assignment::Cluster { label, .. } => ctx.members(index, label)?,
            }
        }
    };
    if selected.is_empty() {
        return Ok(Err(Exclusion::NoData));
    }
    Ok(Ok(selected))
}

/// Observe `k_obs` rows, select data, identify, and predict the rest of the
/// chunk. Exclusions are returned as the trial status.
pub fn run_trial(method: &MethodSpec, query: &Query<'_>, ctx: &EvalContext<'_>, cfg: &EvalConfig) -> Result<TrialResult> {
    let chunk = query.chunk;
    if chunk.real_len() <= cfg.k_obs {
        return Err(Error::Contract(format!("chunk {} has no steps after the observation window", chunk.id())));
    }
    let id = chunk.id();
    let data = match select_data(method, query, ctx, cfg)? {
        Ok(d) => d,
        Err(e) => return Ok(TrialResult::excluded(id, e)),
    };
    let model = match identify_models(&data, &cfg.reach)? {
        Ok(m) => m,
        Err(e) => return Ok(TrialResult::excluded(id, e)),
    };
    let r0 = cfg.reach.initial_set(&state_of(chunk.row(cfg.k_obs - 1)))?;
    let horizon = cfg.reach.horizon.min(chunk.real_len() - cfg.k_obs);
    let outcome = reach(&model, &r0, &cfg.reach.noise_set(), horizon, cfg.reach.max_order)?;
    let mut areas = Vec::with_capacity(outcome.sets.len());
    let mut inclusion = Vec::with_capacity(outcome.sets.len());
    for (k, set) in outcome.sets.iter().enumerate() {
        let truth = state_of(chunk.row(cfg.k_obs + k));
        areas.push(set.area_2d(POSITION_DIMS)?);
        inclusion.push(if cfg.reach.full_state_inclusion {
            set.contains_point(truth.as_slice(), None)?
        } else {
            set.contains_point(&[truth[0], truth[1]], Some(POSITION_DIMS))?
        });
    }
    Ok(TrialResult {
        chunk_id: id,
        sets: outcome.sets,
        areas,
        inclusion,
        status: TrialStatus::Ok,
        truncated: outcome.truncated,
    })
}

/// Builds queries for the test chunks that have steps left after `k_obs`.
/// Encoding is done in batches when an encoder is available.
pub fn build_queries<'t>(test: &'t [TrajectoryChunk], ctx: &EvalContext<'_>, cfg: &EvalConfig) -> Result<Vec<Query<'t>>> {
    let eligible: Vec<&TrajectoryChunk> = test.iter().filter(|c| c.real_len() > cfg.k_obs).collect();
    let prefixes: Vec<TrajectoryChunk> = eligible.iter().map(|c| c.prefix(cfg.k_obs)).collect();
    let encoded = match ctx.encoder {
        Some(enc) => Some(encoded_pooled(enc, &prefixes, cfg.encode_batch)?),
        None => None,
    };
    eligible
        .into_iter()
        .zip(prefixes)
        .enumerate()
        .map(|(i, (chunk, prefix))| {
            Ok(Query {
                chunk,
                raw: raw_pooled(&prefix, &ctx.raw_standardizer)?,
                encoded: encoded.as_ref().map(|e| e[i].clone()),
                prefix,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub trials: usize,
    pub ok: usize,
    /// Count per exclusion reason, all reasons listed.
    pub excluded: BTreeMap<String, usize>,
    /// Ok trials whose horizon was cut by overflow.
    pub truncated: usize,
    /// Predicted steps over ok trials.
    pub steps: usize,
    /// Mean position-plane area over every predicted step of ok trials, m².
    pub average_area: Option<f64>,
    /// Included steps over predicted steps of ok trials.
    pub accuracy: Option<f64>,
}

impl MethodSummary {
    pub fn from_trials(kind: MethodKind, trials: &[TrialResult]) -> Self {
        let mut excluded: BTreeMap<String, usize> = Exclusion::ALL.iter().map(|e| (e.as_str().to_string(), 0)).collect();
        let (mut ok, mut steps, mut included, mut area, mut truncated) = (0, 0, 0, 0.0, 0);
        for t in trials {
            match t.status {
                TrialStatus::Ok => {
                    ok += 1;
                    steps += t.areas.len();
                    area += t.areas.iter().sum::<f64>();
                    included += t.inclusion.iter().filter(|&&b| b).count();
                    truncated += usize::from(t.truncated);
                }
                TrialStatus::Excluded(e) => *excluded.get_mut(e.as_str()).expect("all reasons listed") += 1,
            }
        }
        Self {
            method: kind.as_str().to_string(),
            trials: trials.len(),
            ok,
            excluded,
            truncated,
            steps,
            average_area: (steps > 0).then(|| area / steps as f64),
            accuracy: (steps > 0).then(|| included as f64 / steps as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_obs: usize,
    pub horizon: usize,
    pub test_chunks: usize,
    /// Test chunks with no steps after the observation window.
    pub ineligible: usize,
    pub methods: Vec<MethodSummary>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn method(&self, kind: MethodKind) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == kind.as_str())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// One row per method: areas and accuracies like the paper's table.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method", "average_area", "accuracy", "trials", "ok"];
        header.extend(Exclusion::ALL.iter().map(|e| e.as_str()));
        w.write_record(&header)?;
        for m in &self.methods {
            let mut row = vec![m.method.clone(), cell(m.average_area), cell(m.accuracy), m.trials.to_string(), m.ok.to_string()];
            row.extend(Exclusion::ALL.iter().map(|e| m.excluded[e.as_str()].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Report plus every trial, keyed by method name.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub trials: BTreeMap<String, Vec<TrialResult>>,
}

/// Runs every method on every eligible test chunk. Trials run in parallel;
/// results are collected in test order, so the report is deterministic.
pub fn evaluate(methods: &[MethodSpec], test: &[TrajectoryChunk], ctx: &EvalContext<'_>, cfg: &EvalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    for m in methods {
        m.validate()?;
        ctx.require(m.kind)?;
    }
    let queries = build_queries(test, ctx, cfg)?;
    let mut summaries = Vec::with_capacity(methods.len());
    let mut trials = BTreeMap::new();
    for m in methods {
        let results: Vec<TrialResult> = queries.par_iter().map(|q| run_trial(m, q, ctx, cfg)).collect::<Result<_>>()?;
        let summary = MethodSummary::from_trials(m.kind, &results);
        info!(
            "{}: {} ok of {} trials, excluded {:?}",
            summary.method, summary.ok, summary.trials, summary.excluded
        );
        summaries.push(summary);
        trials.insert(m.kind.as_str().to_string(), results);
    }
    Ok(Evaluation {
        report: EvalReport {
            k_obs: cfg.k_obs,
            horizon: cfg.reach.horizon,
            test_chunks: test.len(),
            ineligible: test.len() - queries.len(),
            methods: summaries,
        },
        trials,
    })
}
