//! Flat `key = value` run configuration.
//!
//! Every known key has a default. A config file and then command-line
//! overrides are layered on top; the last writer wins, so the precedence is
//! flags > file > defaults. [`RunConfig::resolve`] turns the strings into the
//! typed configs of each module, and [`RunConfig::echo`] prints the fully
//! resolved key set, which parses back into an identical configuration.
//!
//! Scenario ids use the open-ended `scenario.<name> = track_id/frame` form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ann::{AnnParams, ProximityRule};
use crate::cluster::ClusterParams;
use crate::data::synth::SynthConfig;
use crate::data::{CsvSchema, DEFAULT_CHUNK_LEN};
use crate::encoder::{EncoderConfig, MaskingSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, MethodKind, MethodSpec};
use crate::reach::STATE_DIM;

pub const SCENARIO_PREFIX: &str = "scenario.";

/// Where a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `(key, default, description)` for every fixed key.
fn defaults() -> Vec<(&'static str, String, &'static str)> {
    let schema = CsvSchema::default();
    let synth = SynthConfig::default();
    let enc = EncoderConfig::default();
    let train = TrainConfig::default();
    let sched = MaskingSchedule::default();
    let cluster = ClusterParams::default();
    let ann = AnnParams::default();
    let eval = EvalConfig::default();
    let method = MethodSpec::new(MethodKind::BaselineAll);
    let proximity = match ann.rule {
        ProximityRule::NearestMember => "nearest_member",
        ProximityRule::Centroid => "centroid",
    };
    vec![
        ("out", "run".into(), "artifact directory shared by all stages"),
        ("input", String::new(), "trajectory CSV read by ingest"),
        ("labels", String::new(), "label CSV for external_labels"),
        ("seed", "0".into(), "seed for splitting, training and index building"),
        ("threads", "0".into(), "worker threads, 0 = all cores"),
        ("col_track_id", schema.track_id, "CSV column names"),
        ("col_frame", schema.frame, ""),
        ("col_x", schema.x, ""),
        ("col_y", schema.y, ""),
        ("col_vx", schema.vx, ""),
        ("col_vy", schema.vy, ""),
        ("col_ax", schema.ax, ""),
        ("col_ay", schema.ay, ""),
        ("frame_period", schema.frame_period.to_string(), "seconds per frame"),
        ("d_c", DEFAULT_CHUNK_LEN.to_string(), "chunk length"),
        ("synth_tracks", synth.n_tracks.to_string(), "synthetic data"),
        ("synth_seed", synth.seed.to_string(), ""),
        ("synth_dt", synth.dt.to_string(), ""),
        ("synth_min_len", synth.min_len.to_string(), ""),
        ("synth_max_len", synth.max_len.to_string(), ""),
        ("synth_extent", synth.extent.to_string(), ""),
        ("synth_speed_min", synth.speed_min.to_string(), ""),
        ("synth_speed_max", synth.speed_max.to_string(), ""),
        ("synth_turn_rate", synth.turn_rate.to_string(), ""),
        ("synth_slow_factor", synth.slow_factor.to_string(), ""),
        ("synth_phase_len", synth.phase_len.to_string(), ""),
        ("synth_noise_std", synth.noise_std.to_string(), ""),
        ("synth_noise_bound", synth.noise_bound.to_string(), ""),
        ("synth_routes", synth.routes.to_string(), "entry routes per mode, 0 = uniform starts"),
        ("synth_route_jitter", synth.route_jitter.to_string(), ""),
        ("d_model", enc.d_model.to_string(), "encoder"),
        ("n_layers", enc.n_layers.to_string(), ""),
        ("n_heads", enc.n_heads.to_string(), ""),
        ("ff_dim", enc.ff_dim.to_string(), ""),
        ("dropout", enc.dropout.to_string(), ""),
        ("learnable_pe", enc.learnable_pe.to_string(), ""),
        ("epochs", train.epochs.to_string(), "training"),
        ("batch_size", train.batch_size.to_string(), ""),
        ("lr", train.lr.to_string(), ""),
        ("l2", train.l2.to_string(), ""),
        ("r_start", sched.r_start.to_string(), ""),
        ("r_end", sched.r_end.to_string(), ""),
        ("l_m_start", sched.l_m_start.to_string(), ""),
        ("l_m_end", sched.l_m_end.to_string(), ""),
        ("epochs_per_increment", sched.epochs_per_increment.to_string(), ""),
        ("log_every", train.log_every.to_string(), ""),
        ("min_cluster_size", cluster.min_cluster_size.to_string(), "clustering"),
        ("min_samples", cluster.min_samples.to_string(), ""),
        ("n_trees", ann.n_trees.to_string(), "nearest-neighbour index"),
        ("leaf_capacity", ann.leaf_capacity.to_string(), ""),
        ("budget_factor", ann.budget_factor.to_string(), ""),
        ("exact_search", ann.exact.to_string(), ""),
        ("proximity", proximity.into(), "nearest_member or centroid"),
        ("assign_k", eval.assign_k.to_string(), ""),
        ("k_obs", eval.k_obs.to_string(), "evaluation"),
        ("encode_batch", eval.encode_batch.to_string(), ""),
        ("horizon", eval.reach.horizon.to_string(), ""),
        ("noise", join(&eval.reach.noise), "noise half-widths, one or four values"),
        ("init_generators", join(&eval.reach.init_generators), "initial-set half-widths, one or four values"),
        ("max_order", eval.reach.max_order.to_string(), ""),
        ("memory_cap", eval.reach.memory_cap.to_string(), ""),
        ("full_state_inclusion", eval.reach.full_state_inclusion.to_string(), ""),
        ("methods", "baseline_all,cluster_raw,cluster_encoded".into(), "comma-separated method list"),
        ("radius", method.radius.to_string(), "location radius, meters"),
        ("heading_tolerance", method.heading_tolerance.to_string(), "degrees"),
    ]
}

/// All settings, typed.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub out_dir: PathBuf,
    pub input: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub schema: CsvSchema,
    pub chunk_len: usize,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub cluster: ClusterParams,
    pub ann: AnnParams,
    pub eval: EvalConfig,
    pub methods: Vec<MethodSpec>,
    /// Scenario name to `track_id/frame`.
    pub scenarios: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, (String, Source)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults()
                .into_iter()
                .map(|(k, v, _)| (k.to_string(), (v, Source::Default)))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Known keys with their defaults and descriptions.
    pub fn known_keys() -> Vec<(&'static str, String, &'static str)> {
        defaults()
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let key = key.trim();
        let known = self.values.contains_key(key)
            || key.strip_prefix(SCENARIO_PREFIX).is_some_and(|n| !n.is_empty());
        if !known {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), (value.trim().to_string(), source));
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn set_pair(&mut self, pair: &str, source: Source) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v, source)
    }

    /// Lines of `key = value`; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, source: Source) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line, source).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path.as_ref())?;
        self.apply_text(&text, Source::File)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    /// Keys whose value no longer comes from the defaults.
    pub fn overridden(&self) -> Vec<(&str, &str, Source)> {
        self.values
            .iter()
            .filter(|(_, (_, s))| *s != Source::Default)
            .map(|(k, (v, s))| (k.as_str(), v.as_str(), *s))
            .collect()
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing config key '{key}'")))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key)?;
        v.parse().map_err(|e| Error::Config(format!("{key} = '{v}': {e}")))
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let v = self.raw(key)?;
        Ok((!v.is_empty()).then(|| PathBuf::from(v)))
    }

    /// One value broadcast to every state dimension, or one per dimension.
    fn per_dim(&self, key: &str) -> Result<[f64; STATE_DIM]> {
        let v = self.raw(key)?;
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("{key} = '{v}': {e}")))?;
        match parts.as_slice() {
            [x] => Ok([*x; STATE_DIM]),
            p if p.len() == STATE_DIM => Ok(std::array::from_fn(|i| p[i])),
            _ => Err(Error::Config(format!("{key} needs 1 or {STATE_DIM} values, got {}", parts.len()))),
        }
    }

    pub fn resolve(&self) -> Result<Settings> {
        let labels = self.path("labels")?;
        let schema = CsvSchema {
            track_id: self.raw("col_track_id")?.into(),
            frame: self.raw("col_frame")?.into(),
            x: self.raw("col_x")?.into(),
            y: self.raw("col_y")?.into(),
            vx: self.raw("col_vx")?.into(),
            vy: self.raw("col_vy")?.into(),
            ax: self.raw("col_ax")?.into(),
            ay: self.raw("col_ay")?.into(),
            frame_period: self.parse("frame_period")?,
        };
        if !(schema.frame_period > 0.0) {
            return Err(Error::Config("frame_period must be positive".into()));
        }
        let chunk_len: usize = self.parse("d_c")?;
        let synth = SynthConfig {
            n_tracks: self.parse("synth_tracks")?,
            seed: self.parse("synth_seed")?,
            dt: self.parse("synth_dt")?,
            min_len: self.parse("synth_min_len")?,
            max_len: self.parse("synth_max_len")?,
            extent: self.parse("synth_extent")?,
            speed_min: self.parse("synth_speed_min")?,
            speed_max: self.parse("synth_speed_max")?,
            turn_rate: self.parse("synth_turn_rate")?,
            slow_factor: self.parse("synth_slow_factor")?,
            phase_len: self.parse("synth_phase_len")?,
            noise_std: self.parse("synth_noise_std")?,
            noise_bound: self.parse("synth_noise_bound")?,
            routes: self.parse("synth_routes")?,
            route_jitter: self.parse("synth_route_jitter")?,
        };
        synth.validate()?;
        let encoder = EncoderConfig {
            d_model: self.parse("d_model")?,
            n_layers: self.parse("n_layers")?,
            n_heads: self.parse("n_heads")?,
            ff_dim: self.parse("ff_dim")?,
            dropout: self.parse("dropout")?,
            d_c: chunk_len,
            learnable_pe: self.parse("learnable_pe")?,
            ..EncoderConfig::default()
        };
        encoder.validate()?;
        let seed: u64 = self.parse("seed")?;
        let train = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            lr: self.parse("lr")?,
            l2: self.parse("l2")?,
            seed,
            schedule: MaskingSchedule {
                r_start: self.parse("r_start")?,
                r_end: self.parse("r_end")?,
                l_m_start: self.parse("l_m_start")?,
                l_m_end: self.parse("l_m_end")?,
                epochs_per_increment: self.parse("epochs_per_increment")?,
            },
            log_every: self.parse("log_every")?,
        };
        train.validate()?;
        let cluster = ClusterParams {
            min_cluster_size: self.parse("min_cluster_size")?,
            min_samples: self.parse("min_samples")?,
        };
        cluster.validate()?;
        let rule = match self.raw("proximity")? {
            "nearest_member" => ProximityRule::NearestMember,
            "centroid" => ProximityRule::Centroid,
            other => return Err(Error::Config(format!("unknown proximity rule '{other}'"))),
        };
        let ann = AnnParams {
            n_trees: self.parse("n_trees")?,
            leaf_capacity: self.parse("leaf_capacity")?,
            seed,
            budget_factor: self.parse("budget_factor")?,
            exact: self.parse("exact_search")?,
            rule,
        };
        ann.validate()?;
        let mut eval = EvalConfig {
            k_obs: self.parse("k_obs")?,
            assign_k: self.parse("assign_k")?,
            encode_batch: self.parse("encode_batch")?,
            ..EvalConfig::default()
        };
        eval.reach.horizon = self.parse("horizon")?;
        eval.reach.noise = self.per_dim("noise")?;
        eval.reach.init_generators = self.per_dim("init_generators")?;
        eval.reach.max_order = self.parse("max_order")?;
        eval.reach.memory_cap = self.parse("memory_cap")?;
        eval.reach.full_state_inclusion = self.parse("full_state_inclusion")?;
        eval.validate()?;

        let radius: f64 = self.parse("radius")?;
        let heading_tolerance: f64 = self.parse("heading_tolerance")?;
        let mut methods = Vec::new();
        for name in self.raw("methods")?.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let kind = MethodKind::parse(name)?;
            if methods.iter().any(|m: &MethodSpec| m.kind == kind) {
                return Err(Error::Config(format!("method '{name}' listed twice")));
            }
            let m = MethodSpec {
                kind,
                radius,
                heading_tolerance,
                label_file: labels.clone(),
            };
            m.validate()?;
            methods.push(m);
        }
        if methods.is_empty() {
            return Err(Error::Config("methods must name at least one method".into()));
        }
        let scenarios = self
            .values
            .iter()
            .filter_map(|(k, (v, _))| k.strip_prefix(SCENARIO_PREFIX).map(|n| (n.to_string(), v.clone())))
            .collect();

        Ok(Settings {
            out_dir: PathBuf::from(self.raw("out")?),
            input: self.path("input")?,
            labels,
            seed,
            threads: self.parse("threads")?,
            schema,
            chunk_len,
            synth,
            encoder,
            train,
            cluster,
            ann,
            eval,
            methods,
            scenarios,
        })
    }

    /// Every key, sorted, preceded by a comment block naming the overrides.
    pub fn echo(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        let over = self.overridden();
        if over.is_empty() {
            s.push_str("# all values are defaults\n");
        }
        for (k, _, src) in &over {
            s.push_str(&format!("# overridden: {k} ({src})\n"));
        }
        for (k, (v, _)) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_echo(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.echo())?;
        Ok(())
    }
}
