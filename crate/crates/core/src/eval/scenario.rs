use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{build_queries, run_trial, EvalConfig, EvalContext, MethodSpec};
use crate::data::TrajectoryChunk;
use crate::error::Result;
use crate::reach::TrialRecord;

pub const DEFAULT_SCENARIOS: [&str; 3] = ["cross_illegal", "cross_now", "not_cross"];

/// Finds the test chunk named by `track_id/frame` (or `track_id#frame`)
/// whose real rows cover that frame.
pub fn resolve_scenario<'t>(spec: &str, test: &'t [TrajectoryChunk]) -> Option<&'t TrajectoryChunk> {
    let (track, frame) = spec.rsplit_once(['/', '#'])?;
    let frame: i64 = frame.trim().parse().ok()?;
    test.iter()
        .find(|c| c.track_id == track.trim() && frame >= c.start_frame && frame < c.start_frame + c.real_len() as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub chunk_id: String,
    /// Mean area per method; `None` when the method was excluded.
    pub areas: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioExport {
    pub scenario: String,
    pub method: String,
    pub trial: TrialRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub rows: Vec<ScenarioRow>,
    /// Scenario names that did not resolve to a usable test chunk.
    pub skipped: Vec<String>,
    pub exports: Vec<ScenarioExport>,
}

/// Runs every method on each named scenario chunk.
pub fn scenario_report(
    scenarios: &BTreeMap<String, String>,
    methods: &[MethodSpec],
    test: &[TrajectoryChunk],
    ctx: &EvalContext<'_>,
    cfg: &EvalConfig,
) -> Result<ScenarioReport> {
    let mut report = ScenarioReport::default();
    for (name, spec) in scenarios {
        let Some(chunk) = resolve_scenario(spec, test).filter(|c| c.real_len() > cfg.k_obs) else {
            report.skipped.push(name.clone());
            continue;
        };
        let query = build_queries(std::slice::from_ref(chunk), ctx, cfg)?.remove(0);
        let mut areas = BTreeMap::new();
        for m in methods {
            let trial = run_trial(m, &query, ctx, cfg)?;
            let mean = (trial.is_ok() && !trial.areas.is_empty()).then(|| trial.areas.iter().sum::<f64>() / trial.areas.len() as f64);
            areas.insert(m.kind.as_str().to_string(), mean);
            report.exports.push(ScenarioExport {
                scenario: name.clone(),
                method: m.kind.as_str().to_string(),
                trial: trial.to_record(),
            });
        }
        report.rows.push(ScenarioRow {
            scenario: name.clone(),
            chunk_id: chunk.id(),
            areas,
        });
    }
    Ok(report)
}

impl ScenarioReport {
    /// `scenario,chunk_id,<method>...`; excluded cells are `-`.
    pub fn write_csv<W: Write>(&self, methods: &[MethodSpec], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["scenario".to_string(), "chunk_id".to_string()];
        header.extend(methods.iter().map(|m| m.kind.as_str().to_string()));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.scenario.clone(), row.chunk_id.clone()];
            for m in methods {
                rec.push(match row.areas.get(m.kind.as_str()).copied().flatten() {
                    Some(a) => format!("{a:.4}"),
                    None => "-".to_string(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}
