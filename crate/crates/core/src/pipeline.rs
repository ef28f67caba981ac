//! Stage functions behind the command-line subcommands.
//!
//! Every stage reads and writes fixed file names inside the `out` directory
//! and drops the resolved configuration echo next to its outputs as
//! `config.<stage>.txt`. A missing input artifact is reported with the name of
//! the stage that produces it.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::ann::AnnForest;
use crate::cluster::{pca_fit, ClusterModel};
use crate::config::{RunConfig, Settings};
use crate::data::synth::generate;
use crate::data::{
    chunk_and_pad, filter_stationary, load_tracks, read_chunk_store, split_dataset, write_chunk_store, DatasetSplit,
    Standardizer,
};
use crate::encoder::{train as train_encoder, write_log, Encoder};
use crate::error::{Error, Result};
use crate::eval::{encoded_pooled, evaluate, raw_pooled, scenario_report, EvalContext, EvalReport, LabelTable, MethodKind};
use crate::nn::Checkpoint;

pub const SYNTH_TRACKS: &str = "synth_tracks.csv";
pub const SYNTH_LABELS: &str = "synth_labels.csv";
pub const CHUNKS: &str = "chunks.rpdc";
pub const INGEST_SUMMARY: &str = "ingest_summary.json";
pub const CHECKPOINT: &str = "encoder.rpnn";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CLUSTERS_ENCODED: &str = "clusters_encoded.json";
pub const CLUSTERS_RAW: &str = "clusters_raw.json";
pub const ASSIGNMENTS_ENCODED: &str = "assignments_encoded.csv";
pub const ASSIGNMENTS_RAW: &str = "assignments_raw.csv";
pub const CONDENSED_ENCODED: &str = "condensed_tree_encoded.csv";
pub const PCA_ENCODED: &str = "pca_encoded.csv";
pub const INDEX_ENCODED: &str = "index_encoded.rpan";
pub const INDEX_RAW: &str = "index_raw.rpan";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TRIALS_CSV: &str = "trials.csv";
pub const SCENARIOS_CSV: &str = "scenarios.csv";
pub const SCENARIOS_JSON: &str = "scenarios.json";

const PCA_DIMS: usize = 3;

/// Resolved settings plus the raw config for echoing.
pub struct Run {
    pub config: RunConfig,
    pub settings: Settings,
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        let settings = config.resolve()?;
        Ok(Self { config, settings })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.settings.out_dir.join(name)
    }

    /// Path of an artifact that must already exist.
    fn artifact(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, producer })
        }
    }

    fn begin(&self, stage: &str) -> Result<()> {
        std::fs::create_dir_all(&self.settings.out_dir)?;
        self.config.write_echo(self.path(&format!("config.{stage}.txt")))
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        serde_json::to_writer_pretty(self.create(name)?, value)?;
        Ok(())
    }

    fn dataset(&self) -> Result<DatasetSplit> {
        let chunks = read_chunk_store(self.artifact(CHUNKS, "ingest")?)?;
        DatasetSplit::from_tagged(chunks, self.settings.seed)
    }

    fn encoder(&self) -> Result<Encoder<f32>> {
        let ckpt = Checkpoint::load(self.artifact(CHECKPOINT, "train")?)?;
        Encoder::from_checkpoint(&ckpt, None)
    }

    fn needs(&self, kind: MethodKind) -> bool {
        self.settings.methods.iter().any(|m| m.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub tracks: usize,
    pub tracks_path: PathBuf,
    pub labels_path: PathBuf,
}

pub fn synth(run: &Run) -> Result<SynthSummary> {
    run.begin("synth")?;
    let data = generate(&run.settings.synth)?;
    let (tracks_path, labels_path) = (run.path(SYNTH_TRACKS), run.path(SYNTH_LABELS));
    data.save(&tracks_path, &labels_path)?;
    info!("wrote {} synthetic tracks to {}", data.tracks.len(), tracks_path.display());
    Ok(SynthSummary {
        tracks: data.tracks.len(),
        tracks_path,
        labels_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub tracks: usize,
    pub moving_tracks: usize,
    pub chunks: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub skipped_tracks: usize,
    pub dropped_tails: usize,
}

pub fn ingest(run: &Run) -> Result<IngestSummary> {
    let input = run
        .settings
        .input
        .clone()
        .ok_or_else(|| Error::Config("ingest needs input=<trajectory csv>".into()))?;
    if !input.is_file() {
        return Err(Error::MissingArtifact { path: input, producer: "synth" });
    }
    run.begin("ingest")?;
    let tracks = load_tracks(&input, &run.settings.schema)?;
    let n_tracks = tracks.len();
    let tracks = filter_stationary(tracks);
    let moving = tracks.len();
    let set = chunk_and_pad(&tracks, run.settings.chunk_len)?;
    let split = split_dataset(set.chunks, run.settings.seed)?;
    let all = split.all();
    write_chunk_store(run.path(CHUNKS), &all)?;
    let summary = IngestSummary {
        tracks: n_tracks,
        moving_tracks: moving,
        chunks: all.len(),
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        skipped_tracks: set.skipped_tracks,
        dropped_tails: set.dropped_tails,
    };
    run.write_json(INGEST_SUMMARY, &summary)?;
    info!("ingested {} chunks from {} tracks", summary.chunks, n_tracks);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub first_train_mse: f64,
    pub last_train_mse: f64,
    pub last_val_mse: f64,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

/// Trains on the train split, validates on val. A run that hits a
/// non-finite loss keeps the last finite checkpoint and reports why.
pub fn train(run: &Run) -> Result<TrainSummary> {
    let data = run.dataset()?;
    run.begin("train")?;
    let model = Encoder::new(run.settings.encoder.clone(), run.settings.seed)?;
    let outcome = train_encoder(model, &run.settings.train, &data.train, &data.val, |_| {})?;
    outcome.model.to_checkpoint().save(run.path(CHECKPOINT))?;
    write_log(run.create(TRAIN_LOG)?, &outcome.history)?;
    let h = &outcome.history;
    Ok(TrainSummary {
        epochs: h.len(),
        first_train_mse: h.first().map_or(f64::NAN, |m| m.train_mse),
        last_train_mse: h.last().map_or(f64::NAN, |m| m.train_mse),
        last_val_mse: h.last().map_or(f64::NAN, |m| m.val_mse),
        aborted: outcome.aborted.map(|e| e.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub points: usize,
    pub encoded_clusters: usize,
    pub encoded_noise: usize,
    pub raw_clusters: usize,
    pub raw_noise: usize,
}

fn noise_count(m: &ClusterModel) -> usize {
    m.labels().iter().filter(|&&l| l < 0).count()
}

/// Pooled historical chunks: `(ids, encoded, raw)`. Raw features are
/// standardized with statistics of the train split.
fn pooled(run: &Run, data: &DatasetSplit, encoder: &Encoder<f32>) -> Result<(Vec<String>, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let hist = data.historical();
    let ids = hist.iter().map(|c| c.id()).collect();
    let encoded = encoded_pooled(encoder, &hist, run.settings.eval.encode_batch)?;
    let std = Standardizer::fit(&data.train);
    let raw = hist.iter().map(|c| raw_pooled(c, &std)).collect::<Result<_>>()?;
    Ok((ids, encoded, raw))
}

/// HDBSCAN on the encoded and the raw pooled features of the historical data.
pub fn cluster(run: &Run) -> Result<ClusterSummary> {
    let data = run.dataset()?;
    let encoder = run.encoder()?;
    run.begin("cluster")?;
    let (ids, encoded, raw) = pooled(run, &data, &encoder)?;
    let params = run.settings.cluster;

    let enc = ClusterModel::fit(ids.clone(), encoded, params)?;
    enc.save(run.path(CLUSTERS_ENCODED))?;
    enc.write_assignments(run.create(ASSIGNMENTS_ENCODED)?)?;
    enc.write_condensed_tree(run.create(CONDENSED_ENCODED)?)?;
    match pca_fit(&enc.points, PCA_DIMS) {
        Ok(pca) => enc.write_pca(&pca, run.create(PCA_ENCODED)?)?,
        Err(e) => warn!("skipping PCA export: {e}"),
    }

    let rawm = ClusterModel::fit(ids, raw, params)?;
    rawm.save(run.path(CLUSTERS_RAW))?;
    rawm.write_assignments(run.create(ASSIGNMENTS_RAW)?)?;

    let summary = ClusterSummary {
        points: enc.ids.len(),
        encoded_clusters: enc.n_clusters(),
        encoded_noise: noise_count(&enc),
        raw_clusters: rawm.n_clusters(),
        raw_noise: noise_count(&rawm),
    };
    info!(
        "{} encoded clusters ({} noise), {} raw clusters ({} noise)",
        summary.encoded_clusters, summary.encoded_noise, summary.raw_clusters, summary.raw_noise
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexSummary {
    pub encoded_items: usize,
    pub raw_items: usize,
}

fn build_index(model: &ClusterModel, run: &Run) -> Result<AnnForest> {
    AnnForest::build(
        model.ids.clone(),
        model.points.clone(),
        model.labels().to_vec(),
        model.tau.clone(),
        run.settings.ann,
    )
}

pub fn index(run: &Run) -> Result<IndexSummary> {
    let enc = ClusterModel::load(run.artifact(CLUSTERS_ENCODED, "cluster")?)?;
    let raw = ClusterModel::load(run.artifact(CLUSTERS_RAW, "cluster")?)?;
    run.begin("index")?;
    let fe = build_index(&enc, run)?;
    fe.save(run.path(INDEX_ENCODED))?;
    let fr = build_index(&raw, run)?;
    fr.save(run.path(INDEX_RAW))?;
    Ok(IndexSummary {
        encoded_items: fe.len(),
        raw_items: fr.len(),
    })
}

/// Artifacts loaded for evaluation; only those the method list needs.
struct Loaded {
    data: DatasetSplit,
    historical: Vec<crate::data::TrajectoryChunk>,
    encoder: Option<Encoder<f32>>,
    encoded_index: Option<AnnForest>,
    raw_index: Option<AnnForest>,
    labels: Option<LabelTable>,
}

fn load_for_eval(run: &Run) -> Result<Loaded> {
    let data = run.dataset()?;
    let encoder = if run.needs(MethodKind::ClusterEncoded) {
        Some(run.encoder()?)
    } else {
        None
    };
    let encoded_index = if run.needs(MethodKind::ClusterEncoded) {
        Some(AnnForest::load(run.artifact(INDEX_ENCODED, "index")?)?)
    } else {
        None
    };
    let raw_index = if run.needs(MethodKind::ClusterRaw) {
        Some(AnnForest::load(run.artifact(INDEX_RAW, "index")?)?)
    } else {
        None
    };
    let labels = match (&run.settings.labels, run.needs(MethodKind::ExternalLabels)) {
        (Some(p), true) if !p.is_file() => return Err(Error::MissingArtifact { path: p.clone(), producer: "synth" }),
        (Some(p), true) => Some(LabelTable::load(p)?),
        _ => None,
    };
    Ok(Loaded {
        historical: data.historical(),
        data,
        encoder,
        encoded_index,
        raw_index,
        labels,
    })
}

fn context<'a>(l: &'a Loaded) -> EvalContext<'a> {
    let mut ctx = EvalContext::new(&l.historical, Standardizer::fit(&l.data.train));
    if let (Some(e), Some(i)) = (&l.encoder, &l.encoded_index) {
        ctx = ctx.with_encoded(e, i);
    }
    if let Some(i) = &l.raw_index {
        ctx = ctx.with_raw(i);
    }
    if let Some(t) = &l.labels {
        ctx = ctx.with_labels(t);
    }
    ctx
}

/// Runs every configured method over the test split and writes the report.
pub fn eval(run: &Run) -> Result<EvalReport> {
    let loaded = load_for_eval(run)?;
    run.begin("eval")?;
    let ctx = context(&loaded);
    let ev = evaluate(&run.settings.methods, &loaded.data.test, &ctx, &run.settings.eval)?;
    ev.report.write_json(run.create(REPORT_JSON)?)?;
    ev.report.write_csv(run.create(REPORT_CSV)?)?;

    let mut w = csv::Writer::from_writer(run.create(TRIALS_CSV)?);
    w.write_record(["method", "chunk_id", "status", "truncated", "steps", "mean_area", "included"])?;
    for (method, trials) in &ev.trials {
        for t in trials {
            let mean = (!t.areas.is_empty()).then(|| t.areas.iter().sum::<f64>() / t.areas.len() as f64);
            w.write_record([
                method.clone(),
                t.chunk_id.clone(),
                t.status.as_str().to_string(),
                t.truncated.to_string(),
                t.areas.len().to_string(),
                mean.map_or_else(|| "-".into(), |a| format!("{a:.6}")),
                t.inclusion.iter().filter(|&&b| b).count().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(ev.report)
}

/// Per-scenario areas and zonotope exports for the configured scenario ids.
pub fn scenario(run: &Run) -> Result<crate::eval::ScenarioReport> {
    if run.settings.scenarios.is_empty() {
        return Err(Error::Config("scenario needs at least one scenario.<name>=<track_id>/<frame> key".into()));
    }
    let loaded = load_for_eval(run)?;
    run.begin("scenario")?;
    let ctx = context(&loaded);
    let report = scenario_report(&run.settings.scenarios, &run.settings.methods, &loaded.data.test, &ctx, &run.settings.eval)?;
    for s in &report.skipped {
        warn!("scenario '{s}' did not resolve to an evaluable test chunk");
    }
    report.write_csv(&run.settings.methods, run.create(SCENARIOS_CSV)?)?;
    report.write_json(run.create(SCENARIOS_JSON)?)?;
    Ok(report)
}

/// Synthetic end-to-end run: synth, ingest of the synthetic tracks, train,
/// cluster, index and eval, all inside `out`.
pub fn run_synthetic(config: &RunConfig) -> Result<EvalReport> {
    let mut config = config.clone();
    let out = config.resolve()?.out_dir;
    let input = out.join(SYNTH_TRACKS);
    config.set("input", &path_str(&input)?, crate::config::Source::Flag)?;
    let run = Run::new(config)?;
    synth(&run)?;
    ingest(&run)?;
    train(&run)?;
    cluster(&run)?;
    index(&run)?;
    eval(&run)
}

fn path_str(p: &Path) -> Result<String> {
    p.to_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("path {} is not valid UTF-8", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Source;

    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        let text = format!(
            "out = {}\nsynth_tracks = 30\nsynth_min_len = 60\nsynth_max_len = 80\nd_model = 8\nn_heads = 2\nn_layers = 1\nff_dim = 16\nepochs = 1\nbatch_size = 16\nmin_cluster_size = 3\nmin_samples = 2\nhorizon = 5",
            dir.display()
        );
        c.apply_text(&text, Source::File).unwrap();
        c
    }

    #[test]
    fn stages_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(tiny(dir.path())).unwrap();
        let expect = |r: Result<()>, producer: &str| match r {
            Err(Error::MissingArtifact { producer: p, .. }) => assert_eq!(p, producer),
            other => panic!("expected a missing artifact, got {other:?}"),
        };
        expect(train(&run).map(drop), "ingest");
        expect(index(&run).map(drop), "cluster");
        expect(eval(&run).map(drop), "ingest");
        synth(&run).unwrap();
        let mut c = tiny(dir.path());
        c.set("input", &path_str(&dir.path().join(SYNTH_TRACKS)).unwrap(), Source::Flag).unwrap();
        let run = Run::new(c).unwrap();
        ingest(&run).unwrap();
        expect(cluster(&run).map(drop), "train");
        expect(eval(&run).map(drop), "train");
    }

    #[test]
    fn tiny_pipeline_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_synthetic(&tiny(a.path())).unwrap();
        let rb = run_synthetic(&tiny(b.path())).unwrap();
        assert_eq!(ra, rb);
        for name in [CHUNKS, CHECKPOINT, CLUSTERS_ENCODED, INDEX_RAW, REPORT_JSON, REPORT_CSV, TRIALS_CSV] {
            let fa = std::fs::read(a.path().join(name)).unwrap();
            let fb = std::fs::read(b.path().join(name)).unwrap();
            assert!(fa == fb, "{name} differs between runs");
        }
        assert!(a.path().join("config.eval.txt").is_file());
        assert_eq!(ra.methods.len(), 3);
        assert!(ra.methods[0].ok > 0);
    }
}
