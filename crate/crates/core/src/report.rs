//! Aggregation of episode records into the summary tables, per-query detail
//! and stage-vs-scale plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::Stage;
use crate::metrics::{
    aggregate, format_cvq, mean, normalize_to_best, per_query_values, population_std, MetricsError, SuiteMetrics,
};
use crate::runner::EpisodeRecord;
use crate::suite::format_scale_factor;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no records to report")]
    Empty,
    #[error("model {model}: {source}")]
    Metrics {
        model: String,
        #[source]
        source: MetricsError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
    Plotdata,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [
        ReportFormat::Json,
        ReportFormat::Csv,
        ReportFormat::Markdown,
        ReportFormat::Plotdata,
    ];
}

impl std::str::FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "plotdata" => Ok(ReportFormat::Plotdata),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub episodes: usize,
    pub metrics: SuiteMetrics,
    pub e2e_mean: f64,
    pub e2e_std: f64,
    /// Mean seconds per episode in each stage.
    pub stage_seconds: BTreeMap<Stage, f64>,
    /// Stage share of pooled end-to-end time; the five stages sum to 100.
    pub stage_percent: BTreeMap<Stage, f64>,
    /// Mean dollars per episode in each stage.
    pub stage_cost: BTreeMap<Stage, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub model_id: String,
    pub ex: f64,
    pub e2e_mean: f64,
    pub e2e_std: f64,
    pub stage_percent: BTreeMap<Stage, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub model_id: String,
    pub ves_norm: Option<f64>,
    pub ves_star_norm: Option<f64>,
    /// Mean stage time over the fastest model's, per tool stage.
    pub time_variation: BTreeMap<Stage, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model_id: String,
    pub vces_norm: Option<f64>,
    pub cvq: Option<f64>,
    /// Mean stage cost over the cheapest model's, per tool stage.
    pub cost_variation: BTreeMap<Stage, Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        MeanStd {
            mean: mean(values),
            std: population_std(values),
        }
    }

    fn render(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub case_id: String,
    pub model_id: String,
    /// `None` for rows pooled over every scale factor.
    pub scale_factor: Option<f64>,
    pub runs: usize,
    pub ex: MeanStd,
    pub ves: MeanStd,
    pub ves_star: MeanStd,
    pub vces: MeanStd,
    pub cvq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub model_id: String,
    pub scale_factor: f64,
    pub stages: BTreeMap<Stage, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub models: Vec<ModelSummary>,
    /// Sorted by mean end-to-end time, slowest first.
    pub time_table: Vec<TimeRow>,
    /// Sorted by VES*, best first.
    pub efficiency_table: Vec<EfficiencyRow>,
    /// Sorted by VCES, best first.
    pub cost_table: Vec<CostRow>,
    pub queries: Vec<QueryRow>,
    pub stage_time_vs_sf: Vec<PlotRow>,
    pub stage_cost_vs_sf: Vec<PlotRow>,
    pub warnings: Vec<String>,
}

fn group_by<'a, K: Ord>(records: &'a [EpisodeRecord], key: impl Fn(&EpisodeRecord) -> K) -> BTreeMap<K, Vec<&'a EpisodeRecord>> {
    let mut out: BTreeMap<K, Vec<&EpisodeRecord>> = BTreeMap::new();
    for r in records {
        out.entry(key(r)).or_default().push(r);
    }
    out
}

fn suite_metrics(model: &str, rs: &[&EpisodeRecord]) -> Result<SuiteMetrics, ReportError> {
    let metrics: Vec<_> = rs.iter().map(|r| r.metric.clone()).collect();
    let pairs: Vec<_> = rs
        .iter()
        .map(|r| (r.golden_sql.clone(), r.generated_sql.clone().unwrap_or_default()))
        .collect();
    aggregate(&metrics, &pairs).map_err(|source| ReportError::Metrics {
        model: model.to_string(),
        source,
    })
}

fn stage_means(rs: &[&EpisodeRecord], value: impl Fn(&EpisodeRecord, Stage) -> f64) -> BTreeMap<Stage, f64> {
    Stage::ALL
        .iter()
        .map(|&s| (s, mean(&rs.iter().map(|r| value(r, s)).collect::<Vec<_>>())))
        .collect()
}

fn seconds(r: &EpisodeRecord, s: Stage) -> f64 {
    r.stage_seconds.get(&s).copied().unwrap_or(0.0)
}

fn dollars(r: &EpisodeRecord, s: Stage) -> f64 {
    r.stage_cost.get(&s).map(|u| u.as_dollars()).unwrap_or(0.0)
}

fn summarize(model: &str, rs: &[&EpisodeRecord]) -> Result<ModelSummary, ReportError> {
    let metrics = suite_metrics(model, rs)?;
    let e2e: Vec<f64> = rs.iter().map(|r| r.metric.t_e2e).collect();
    let stage_seconds = stage_means(rs, seconds);
    let total: f64 = stage_seconds.values().sum();
    let stage_percent = stage_seconds
        .iter()
        .map(|(s, v)| (*s, if total > 0.0 { 100.0 * v / total } else { 0.0 }))
        .collect();
    Ok(ModelSummary {
        model_id: model.to_string(),
        episodes: rs.len(),
        metrics,
        e2e_mean: mean(&e2e),
        e2e_std: population_std(&e2e),
        stage_seconds,
        stage_percent,
        stage_cost: stage_means(rs, dollars),
    })
}

fn normalized(values: BTreeMap<String, f64>, higher_is_better: bool) -> BTreeMap<String, f64> {
    normalize_to_best(&values, higher_is_better).unwrap_or_default()
}

fn variation(models: &[ModelSummary], value: impl Fn(&ModelSummary, Stage) -> f64) -> BTreeMap<Stage, BTreeMap<String, f64>> {
    Stage::TOOLS
        .iter()
        .map(|&s| {
            let values = models.iter().map(|m| (m.model_id.clone(), value(m, s))).collect();
            (s, normalized(values, false))
        })
        .collect()
}

fn desc_then_id(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn query_row(case_id: &str, model_id: &str, sf: Option<f64>, rs: &[&EpisodeRecord]) -> QueryRow {
    let mut ves = Vec::new();
    let mut ves_star = Vec::new();
    let mut vces = Vec::new();
    for r in rs {
        let (a, b, c) = per_query_values(&r.metric).unwrap_or((0.0, 0.0, 0.0));
        ves.push(a);
        ves_star.push(b);
        vces.push(c);
    }
    let ex: Vec<f64> = rs.iter().map(|r| r.metric.indicator as f64).collect();
    let costs: Vec<f64> = rs.iter().map(|r| r.metric.c_e2e).collect();
    QueryRow {
        case_id: case_id.to_string(),
        model_id: model_id.to_string(),
        scale_factor: sf,
        runs: rs.len(),
        ex: MeanStd::of(&ex),
        ves: MeanStd::of(&ves),
        ves_star: MeanStd::of(&ves_star),
        vces: MeanStd::of(&vces),
        cvq: crate::metrics::cvq(mean(&costs), mean(&ex)).unwrap_or(None),
    }
}

pub fn build_report(records: &[EpisodeRecord]) -> Result<Report, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut warnings = Vec::new();
    for r in records {
        let ledger_sum = r.stage_cost.values().map(|u| u.picos()).sum::<u64>();
        if ledger_sum != r.cost.picos() {
            warnings.push(format!(
                "{} {} r{}: stage costs sum to {} picodollars, total is {}",
                r.model_id,
                r.case_id,
                r.repetition,
                ledger_sum,
                r.cost.picos()
            ));
        }
        for w in &r.warnings {
            warnings.push(format!("{} {} r{}: {w}", r.model_id, r.case_id, r.repetition));
        }
    }

    let by_model = group_by(records, |r| r.model_id.clone());
    let models = by_model
        .iter()
        .map(|(m, rs)| summarize(m, rs))
        .collect::<Result<Vec<_>, _>>()?;

    let mut time_table: Vec<TimeRow> = models
        .iter()
        .map(|m| TimeRow {
            model_id: m.model_id.clone(),
            ex: m.metrics.ex,
            e2e_mean: m.e2e_mean,
            e2e_std: m.e2e_std,
            stage_percent: m.stage_percent.clone(),
        })
        .collect();
    time_table.sort_by(|a, b| desc_then_id((a.e2e_mean, &a.model_id), (b.e2e_mean, &b.model_id)));

    let column = |f: fn(&SuiteMetrics) -> f64| -> BTreeMap<String, f64> {
        models.iter().map(|m| (m.model_id.clone(), f(&m.metrics))).collect()
    };
    let ves = normalized(column(|s| s.ves), true);
    let ves_star = normalized(column(|s| s.ves_star), true);
    let vces = normalized(column(|s| s.vces), true);
    let time_var = variation(&models, |m, s| m.stage_seconds[&s]);
    let cost_var = variation(&models, |m, s| m.stage_cost[&s]);
    let pick = |table: &BTreeMap<Stage, BTreeMap<String, f64>>, id: &str| -> BTreeMap<Stage, Option<f64>> {
        table.iter().map(|(s, col)| (*s, col.get(id).copied())).collect()
    };

    let mut efficiency_table: Vec<EfficiencyRow> = models
        .iter()
        .map(|m| EfficiencyRow {
            model_id: m.model_id.clone(),
            ves_norm: ves.get(&m.model_id).copied(),
            ves_star_norm: ves_star.get(&m.model_id).copied(),
            time_variation: pick(&time_var, &m.model_id),
        })
        .collect();
    efficiency_table.sort_by(|a, b| {
        desc_then_id(
            (a.ves_star_norm.unwrap_or(f64::NEG_INFINITY), &a.model_id),
            (b.ves_star_norm.unwrap_or(f64::NEG_INFINITY), &b.model_id),
        )
    });

    let mut cost_table: Vec<CostRow> = models
        .iter()
        .map(|m| CostRow {
            model_id: m.model_id.clone(),
            vces_norm: vces.get(&m.model_id).copied(),
            cvq: m.metrics.cvq,
            cost_variation: pick(&cost_var, &m.model_id),
        })
        .collect();
    cost_table.sort_by(|a, b| {
        desc_then_id(
            (a.vces_norm.unwrap_or(f64::NEG_INFINITY), &a.model_id),
            (b.vces_norm.unwrap_or(f64::NEG_INFINITY), &b.model_id),
        )
    });

    let mut queries: Vec<QueryRow> = group_by(records, |r| (r.case_id.clone(), r.model_id.clone()))
        .iter()
        .map(|((c, m), rs)| query_row(c, m, None, rs))
        .collect();
    let per_sf = group_by(records, |r| (r.case_id.clone(), r.scale_factor.to_bits(), r.model_id.clone()));
    let scale_factors: std::collections::BTreeSet<u64> = records.iter().map(|r| r.scale_factor.to_bits()).collect();
    if scale_factors.len() > 1 {
        queries.extend(
            per_sf
                .iter()
                .map(|((c, sf, m), rs)| query_row(c, m, Some(f64::from_bits(*sf)), rs)),
        );
    }

    let mut stage_time_vs_sf = Vec::new();
    let mut stage_cost_vs_sf = Vec::new();
    let by_model_sf = group_by(records, |r| (r.model_id.clone(), r.scale_factor.to_bits()));
    for ((m, sf), rs) in &by_model_sf {
        let scale_factor = f64::from_bits(*sf);
        stage_time_vs_sf.push(PlotRow {
            model_id: m.clone(),
            scale_factor,
            stages: stage_means(rs, seconds),
        });
        stage_cost_vs_sf.push(PlotRow {
            model_id: m.clone(),
            scale_factor,
            stages: stage_means(rs, dollars),
        });
    }
    let by_sf = |a: &PlotRow, b: &PlotRow| {
        (&a.model_id, a.scale_factor)
            .partial_cmp(&(&b.model_id, b.scale_factor))
            .unwrap()
    };
    stage_time_vs_sf.sort_by(by_sf);
    stage_cost_vs_sf.sort_by(by_sf);

    Ok(Report {
        models,
        time_table,
        efficiency_table,
        cost_table,
        queries,
        stage_time_vs_sf,
        stage_cost_vs_sf,
        warnings,
    })
}

fn ratio(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "--".into(),
    }
}

fn times(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}x"),
        None => "--".into(),
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn tool_header() -> String {
    Stage::TOOLS.iter().map(|s| s.name()).collect::<Vec<_>>().join(" | ")
}

pub fn render_markdown(report: &Report) -> String {
    let mut out = String::from("# Evaluation report\n\n");
    out.push_str("## Accuracy and end-to-end time\n\n");
    out.push_str("Models in descending order of total execution time.\n\n");
    let _ = writeln!(
        out,
        "| Model | EX | E2E mean (s) | E2E σ | {} | finalize |",
        Stage::TOOLS.iter().map(|s| format!("{} %", s.name())).collect::<Vec<_>>().join(" | ")
    );
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in &report.time_table {
        let pct: Vec<String> = Stage::ALL.iter().map(|s| format!("{:.2}", r.stage_percent[s])).collect();
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {:.2} | {} |",
            r.model_id,
            r.ex,
            r.e2e_mean,
            r.e2e_std,
            pct.join(" | ")
        );
    }

    out.push_str("\n## VES and VES*\n\n");
    out.push_str("Normalized to the best model; descending order of VES*. Time variation is per stage, relative to the fastest model.\n\n");
    let _ = writeln!(out, "| Model | VES (norm) | VES* (norm) | {} |", tool_header());
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in &report.efficiency_table {
        let var: Vec<String> = Stage::TOOLS.iter().map(|s| times(r.time_variation[s])).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.model_id,
            ratio(r.ves_norm),
            ratio(r.ves_star_norm),
            var.join(" | ")
        );
    }

    out.push_str("\n## VCES and CVQ\n\n");
    out.push_str("VCES normalized to the best model; descending order of VCES. Cost variation is per stage, relative to the cheapest model.\n\n");
    let _ = writeln!(out, "| Model | VCES (norm) | CVQ ($) | {} |", tool_header());
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in &report.cost_table {
        let var: Vec<String> = Stage::TOOLS.iter().map(|s| times(r.cost_variation[s])).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.model_id,
            ratio(r.vces_norm),
            format_cvq(r.cvq),
            var.join(" | ")
        );
    }

    out.push_str("\n## Per-query metrics\n\nMean ± std across runs.\n\n");
    out.push_str("| Query | SF | Model | Runs | EX | VES | VES* | VCES | CVQ ($) |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for q in &report.queries {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            q.case_id,
            q.scale_factor.map(format_scale_factor).unwrap_or_else(|| "all".into()),
            q.model_id,
            q.runs,
            q.ex.render(),
            q.ves.render(),
            q.ves_star.render(),
            q.vces.render(),
            format_cvq(q.cvq)
        );
    }
    if !report.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &report.warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}

fn csv_string(header: &[String], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(&r).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

fn names(base: &[&str], stages: &[Stage], suffix: &str) -> Vec<String> {
    base.iter()
        .map(|s| s.to_string())
        .chain(stages.iter().map(|s| format!("{}{suffix}", s.name())))
        .collect()
}

/// One CSV per table, keyed by file name.
pub fn render_csv(report: &Report) -> BTreeMap<&'static str, String> {
    let mut files = BTreeMap::new();
    files.insert(
        "table_time.csv",
        csv_string(
            &names(&["model", "ex", "e2e_mean", "e2e_std"], &Stage::ALL, "_pct"),
            report
                .time_table
                .iter()
                .map(|r| {
                    let mut row = vec![r.model_id.clone(), r.ex.to_string(), r.e2e_mean.to_string(), r.e2e_std.to_string()];
                    row.extend(Stage::ALL.iter().map(|s| r.stage_percent[s].to_string()));
                    row
                })
                .collect(),
        ),
    );
    files.insert(
        "table_efficiency.csv",
        csv_string(
            &names(&["model", "ves_norm", "ves_star_norm"], &Stage::TOOLS, "_time_var"),
            report
                .efficiency_table
                .iter()
                .map(|r| {
                    let mut row = vec![r.model_id.clone(), opt_num(r.ves_norm), opt_num(r.ves_star_norm)];
                    row.extend(Stage::TOOLS.iter().map(|s| opt_num(r.time_variation[s])));
                    row
                })
                .collect(),
        ),
    );
    files.insert(
        "table_cost.csv",
        csv_string(
            &names(&["model", "vces_norm", "cvq"], &Stage::TOOLS, "_cost_var"),
            report
                .cost_table
                .iter()
                .map(|r| {
                    let mut row = vec![r.model_id.clone(), opt_num(r.vces_norm), opt_num(r.cvq)];
                    row.extend(Stage::TOOLS.iter().map(|s| opt_num(r.cost_variation[s])));
                    row
                })
                .collect(),
        ),
    );
    let header: Vec<String> = [
        "case_id", "scale_factor", "model", "runs", "ex_mean", "ex_std", "ves_mean", "ves_std", "ves_star_mean",
        "ves_star_std", "vces_mean", "vces_std", "cvq",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    files.insert(
        "queries.csv",
        csv_string(
            &header,
            report
                .queries
                .iter()
                .map(|q| {
                    let mut row = vec![q.case_id.clone(), opt_num(q.scale_factor), q.model_id.clone(), q.runs.to_string()];
                    for m in [q.ex, q.ves, q.ves_star, q.vces] {
                        row.push(m.mean.to_string());
                        row.push(m.std.to_string());
                    }
                    row.push(opt_num(q.cvq));
                    row
                })
                .collect(),
        ),
    );
    files
}

fn plot_csv(rows: &[PlotRow]) -> String {
    csv_string(
        &names(&["model", "scale_factor"], &Stage::ALL, ""),
        rows.iter()
            .map(|r| {
                let mut row = vec![r.model_id.clone(), r.scale_factor.to_string()];
                row.extend(Stage::ALL.iter().map(|s| r.stages[s].to_string()));
                row
            })
            .collect(),
    )
}

/// Writes the report in `format` under `out_dir` and returns the written
/// paths.
pub fn render_report(report: &Report, format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let files: Vec<(String, String)> = match format {
        ReportFormat::Json => vec![("report.json".into(), serde_json::to_string_pretty(report).unwrap())],
        ReportFormat::Markdown => vec![("report.md".into(), render_markdown(report))],
        ReportFormat::Csv => render_csv(report).into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        ReportFormat::Plotdata => vec![
            ("stage_time_vs_sf.csv".into(), plot_csv(&report.stage_time_vs_sf)),
            ("stage_cost_vs_sf.csv".into(), plot_csv(&report.stage_cost_vs_sf)),
        ],
    };
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
