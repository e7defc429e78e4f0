//! Benchmark suites: BIRD-style manifests, the TPC-H business-question
//! cases, a deterministic TPC-H-shaped data generator and the golden-result
//! cache.
//!
//! The generator preserves TPC-H cardinality ratios and key structure, not
//! its value distributions. It is fit for timing and scaling studies and not
//! for official benchmark claims.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{open_session, time_median, ColumnSpec, EngineAdapter, EngineConfig, TableSchema};
use crate::resultset::{ColumnType, ResultTable};

pub const MIN_SCALE_FACTOR: f64 = 0.001;
pub const MAX_SCALE_FACTOR: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("scale factor {0} outside [{MIN_SCALE_FACTOR}, {MAX_SCALE_FACTOR}]")]
    UnsupportedScaleFactor(f64),
    #[error("table {0} has no key annotations")]
    MissingKeys(String),
    #[error("table {table} references unknown {target}")]
    DanglingReference { table: String, target: String },
    #[error("case {case_id}: golden query unusable: {reason}")]
    GoldenFailed { case_id: String, reason: String },
    #[error("golden cache {path}: {reason}")]
    Cache { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SuiteError + '_ {
    move |source| SuiteError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCase {
    pub case_id: String,
    pub nl_question: String,
    /// Extra domain knowledge shipped alongside the question.
    #[serde(default)]
    pub evidence: Option<String>,
    pub golden_sql: String,
    #[serde(default)]
    pub golden_result: Option<ResultTable>,
    #[serde(default)]
    pub ordered: bool,
    pub database: String,
}

impl QueryCase {
    /// Question text handed to the agent.
    pub fn prompt(&self) -> String {
        match self.evidence.as_deref().map(str::trim) {
            Some(e) if !e.is_empty() => format!("{}\nHint: {e}", self.nl_question),
            _ => self.nl_question.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    #[serde(default)]
    question_id: Option<Value>,
    question: String,
    #[serde(rename = "SQL", alias = "sql")]
    sql: String,
    db_id: String,
    #[serde(default)]
    ordered: Option<bool>,
    #[serde(default)]
    evidence: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Manifest {
    Cases(Vec<ManifestEntry>),
    Wrapped {
        #[serde(default)]
        name: Option<String>,
        cases: Vec<ManifestEntry>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailure {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedSuite {
    pub name: String,
    /// Directory holding the manifest and the per-database data directories.
    pub root: PathBuf,
    pub scale_factor: Option<f64>,
    pub cases: Vec<QueryCase>,
    pub failures: Vec<CaseFailure>,
}

impl LoadedSuite {
    pub fn database_dir(&self, db_id: &str) -> PathBuf {
        database_dir(&self.root, db_id, self.scale_factor)
    }
}

/// Manifest file for a suite path: the path itself, or `suite.json` inside
/// it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("suite.json")
    } else {
        path.to_path_buf()
    }
}

pub fn format_scale_factor(sf: f64) -> String {
    format!("{sf}")
}

/// `<root>/<db>/sf<SF>` when it exists, else `<root>/<db>`.
pub fn database_dir(root: &Path, db_id: &str, scale_factor: Option<f64>) -> PathBuf {
    let base = root.join(db_id);
    if let Some(sf) = scale_factor {
        let scaled = base.join(format!("sf{}", format_scale_factor(sf)));
        if scaled.is_dir() {
            return scaled;
        }
    }
    base
}

fn parse_manifest(path: &Path, text: &str) -> Result<(Option<String>, Vec<ManifestEntry>), SuiteError> {
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| SuiteError::Manifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(match manifest {
        Manifest::Cases(c) => (None, c),
        Manifest::Wrapped { name, cases } => (name, cases),
    })
}

/// Parses a manifest and checks every golden query compiles against its
/// database. Per-case problems land in `failures`; only an unreadable
/// manifest is fatal.
pub fn load_suite(path: &Path, scale_factor: Option<f64>) -> Result<LoadedSuite, SuiteError> {
    let manifest = manifest_path(path);
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let (name, entries) = parse_manifest(&manifest, &text)?;
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = name.unwrap_or_else(|| {
        root.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "suite".into())
    });

    let mut cases = Vec::new();
    let mut failures = Vec::new();
    let mut seen = HashSet::new();
    let mut sessions: BTreeMap<String, Result<Box<dyn EngineAdapter>, String>> = BTreeMap::new();
    for (i, e) in entries.into_iter().enumerate() {
        let case_id = match &e.question_id {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("{}-{}", e.db_id, i + 1),
        };
        if !seen.insert(case_id.clone()) {
            failures.push(CaseFailure {
                case_id,
                reason: "duplicate case id".into(),
            });
            continue;
        }
        let session = sessions.entry(e.db_id.clone()).or_insert_with(|| {
            let dir = database_dir(&root, &e.db_id, scale_factor);
            if !dir.is_dir() {
                return Err(format!("database {} missing at {}", e.db_id, dir.display()));
            }
            open_session(&EngineConfig::embedded(dir))
                .map(|s| Box::new(s) as Box<dyn EngineAdapter>)
                .map_err(|err| format!("database {}: {err}", e.db_id))
        });
        let check = match session {
            Ok(engine) => engine
                .validate_sql(&e.sql)
                .map_err(|err| format!("golden query does not compile: {err}")),
            Err(reason) => Err(reason.clone()),
        };
        match check {
            Ok(()) => cases.push(QueryCase {
                case_id,
                nl_question: e.question,
                evidence: e.evidence,
                golden_sql: e.sql,
                golden_result: None,
                ordered: e.ordered.unwrap_or(false),
                database: e.db_id,
            }),
            Err(reason) => failures.push(CaseFailure { case_id, reason }),
        }
    }
    Ok(LoadedSuite {
        name,
        root,
        scale_factor,
        cases,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub case_id: String,
    #[serde(default)]
    pub scale_factor: Option<f64>,
    /// Median warm runtime in seconds.
    pub t_gold: f64,
    pub result: ResultTable,
}

/// Executes the golden query once untimed, then three times; the median
/// runtime is `t_gold`.
pub fn materialize_golden(case: &QueryCase, engine: &dyn EngineAdapter) -> Result<(ResultTable, f64), SuiteError> {
    time_median(engine, &case.golden_sql, 1, 3).map_err(|e| SuiteError::GoldenFailed {
        case_id: case.case_id.clone(),
        reason: e.to_string(),
    })
}

pub fn golden_cache_path(cache_dir: &Path, case_id: &str, scale_factor: Option<f64>) -> PathBuf {
    let safe: String = case_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    match scale_factor {
        Some(sf) => cache_dir.join(format!("{safe}@sf{}.json", format_scale_factor(sf))),
        None => cache_dir.join(format!("{safe}.json")),
    }
}

pub fn read_golden(path: &Path) -> Result<GoldenEntry, SuiteError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SuiteError::Cache {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Cached golden entry for `case`, materializing and writing it when the
/// cache has none (or `refresh` is set).
pub fn load_or_materialize(
    case: &QueryCase,
    engine: &dyn EngineAdapter,
    cache_dir: &Path,
    scale_factor: Option<f64>,
    refresh: bool,
) -> Result<GoldenEntry, SuiteError> {
    let path = golden_cache_path(cache_dir, &case.case_id, scale_factor);
    if !refresh && path.is_file() {
        let entry = read_golden(&path)?;
        if entry.case_id == case.case_id {
            return Ok(entry);
        }
    }
    let (result, t_gold) = materialize_golden(case, engine)?;
    let entry = GoldenEntry {
        case_id: case.case_id.clone(),
        scale_factor,
        t_gold,
        result,
    };
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    let text = serde_json::to_string_pretty(&entry).expect("golden entry serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(entry)
}

// ---------------------------------------------------------------------------
// Data generation

#[derive(Debug, Clone, PartialEq)]
pub struct ScalableTable {
    pub schema: TableSchema,
    /// Row count at scale factor 1.
    pub base_rows: u64,
    /// Fixed tables keep `base_rows` at every scale factor.
    pub scalable: bool,
}

impl ScalableTable {
    pub fn rows_at(&self, scale_factor: f64) -> u64 {
        if self.scalable {
            ((self.base_rows as f64 * scale_factor).round() as u64).max(1)
        } else {
            self.base_rows
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledDataset {
    pub dir: PathBuf,
    pub scale_factor: f64,
    pub seed: u64,
    pub row_counts: BTreeMap<String, u64>,
}

fn table(name: &str, base_rows: u64, scalable: bool, columns: Vec<ColumnSpec>) -> ScalableTable {
    ScalableTable {
        schema: TableSchema {
            name: name.to_string(),
            columns,
        },
        base_rows,
        scalable,
    }
}

/// The eight TPC-H tables with their SF-1 cardinalities.
pub fn tpch_tables() -> Vec<ScalableTable> {
    use ColumnType::*;
    let c = ColumnSpec::new;
    vec![
        table("region", 5, false, vec![
            c("r_regionkey", Integer).pk(),
            c("r_name", Text),
            c("r_comment", Text),
        ]),
        table("nation", 25, false, vec![
            c("n_nationkey", Integer).pk(),
            c("n_name", Text),
            c("n_regionkey", Integer).refs("region", "r_regionkey"),
            c("n_comment", Text),
        ]),
        table("supplier", 10_000, true, vec![
            c("s_suppkey", Integer).pk(),
            c("s_name", Text),
            c("s_address", Text),
            c("s_nationkey", Integer).refs("nation", "n_nationkey"),
            c("s_phone", Text),
            c("s_acctbal", Float),
            c("s_comment", Text),
        ]),
        table("customer", 150_000, true, vec![
            c("c_custkey", Integer).pk(),
            c("c_name", Text),
            c("c_address", Text),
            c("c_nationkey", Integer).refs("nation", "n_nationkey"),
            c("c_phone", Text),
            c("c_acctbal", Float),
            c("c_mktsegment", Text),
            c("c_comment", Text),
        ]),
        table("part", 200_000, true, vec![
            c("p_partkey", Integer).pk(),
            c("p_name", Text),
            c("p_mfgr", Text),
            c("p_brand", Text),
            c("p_type", Text),
            c("p_size", Integer),
            c("p_container", Text),
            c("p_retailprice", Float),
            c("p_comment", Text),
        ]),
        table("partsupp", 800_000, true, vec![
            c("ps_partkey", Integer).pk().refs("part", "p_partkey"),
            c("ps_suppkey", Integer).pk().refs("supplier", "s_suppkey"),
            c("ps_availqty", Integer),
            c("ps_supplycost", Float),
            c("ps_comment", Text),
        ]),
        table("orders", 1_500_000, true, vec![
            c("o_orderkey", Integer).pk(),
            c("o_custkey", Integer).refs("customer", "c_custkey"),
            c("o_orderstatus", Text),
            c("o_totalprice", Float),
            c("o_orderdate", Date),
            c("o_orderpriority", Text),
            c("o_clerk", Text),
            c("o_shippriority", Integer),
            c("o_comment", Text),
        ]),
        table("lineitem", 6_000_000, true, vec![
            c("l_orderkey", Integer).pk().refs("orders", "o_orderkey"),
            c("l_partkey", Integer).refs("part", "p_partkey"),
            c("l_suppkey", Integer).refs("supplier", "s_suppkey"),
            c("l_linenumber", Integer).pk(),
            c("l_quantity", Float),
            c("l_extendedprice", Float),
            c("l_discount", Float),
            c("l_tax", Float),
            c("l_returnflag", Text),
            c("l_linestatus", Text),
            c("l_shipdate", Date),
            c("l_commitdate", Date),
            c("l_receiptdate", Date),
            c("l_shipinstruct", Text),
            c("l_shipmode", Text),
            c("l_comment", Text),
        ]),
    ]
}

const REGIONS: [&str; 5] = ["AFRICA", "AMERICA", "ASIA", "EUROPE", "MIDDLE EAST"];
const NATIONS: [(&str, i64); 25] = [
    ("ALGERIA", 0), ("ARGENTINA", 1), ("BRAZIL", 1), ("CANADA", 1), ("EGYPT", 4),
    ("ETHIOPIA", 0), ("FRANCE", 3), ("GERMANY", 3), ("INDIA", 2), ("INDONESIA", 2),
    ("IRAN", 4), ("IRAQ", 4), ("JAPAN", 2), ("JORDAN", 4), ("KENYA", 0),
    ("MOROCCO", 0), ("MOZAMBIQUE", 0), ("PERU", 1), ("CHINA", 2), ("ROMANIA", 3),
    ("SAUDI ARABIA", 4), ("VIETNAM", 2), ("RUSSIA", 3), ("UNITED KINGDOM", 3), ("UNITED STATES", 1),
];
const SEGMENTS: [&str; 5] = ["AUTOMOBILE", "BUILDING", "FURNITURE", "HOUSEHOLD", "MACHINERY"];
const PRIORITIES: [&str; 5] = ["1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW"];
const INSTRUCTIONS: [&str; 4] = ["DELIVER IN PERSON", "COLLECT COD", "NONE", "TAKE BACK RETURN"];
const MODES: [&str; 7] = ["REG AIR", "AIR", "RAIL", "SHIP", "TRUCK", "MAIL", "FOB"];
const TYPE_A: [&str; 6] = ["STANDARD", "SMALL", "MEDIUM", "LARGE", "ECONOMY", "PROMO"];
const TYPE_B: [&str; 5] = ["ANODIZED", "BURNISHED", "PLATED", "POLISHED", "BRUSHED"];
const TYPE_C: [&str; 5] = ["TIN", "NICKEL", "BRASS", "STEEL", "COPPER"];
const CONTAINER_A: [&str; 5] = ["SM", "LG", "MED", "JUMBO", "WRAP"];
const CONTAINER_B: [&str; 8] = ["CASE", "BOX", "BAG", "JAR", "PKG", "PACK", "CAN", "DRUM"];
const COLORS: [&str; 16] = [
    "almond", "antique", "aquamarine", "azure", "beige", "bisque", "black", "blanched",
    "blue", "blush", "brown", "burlywood", "burnished", "chartreuse", "chiffon", "chocolate",
];
const WORDS: [&str; 16] = [
    "furiously", "quickly", "carefully", "blithely", "regular", "final", "special", "pending",
    "ironic", "express", "bold", "even", "silent", "unusual", "deposits", "requests",
];

fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1992, 1, 1).unwrap()
}

/// Order dates run from the start date to 151 days before 1998-12-31.
fn last_order_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1998, 8, 2).unwrap()
}

fn current_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(1995, 6, 17).unwrap()
}

fn comment(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..=7);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn phone(rng: &mut ChaCha8Rng, nation: i64) -> String {
    format!(
        "{}-{}-{}-{}",
        nation + 10,
        rng.random_range(100..1000),
        rng.random_range(100..1000),
        rng.random_range(1000..10000)
    )
}

fn money(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> String {
    format!("{:.2}", rng.random_range(lo..=hi) as f64 / 100.0)
}

fn retail_price(partkey: u64) -> f64 {
    (90_000 + ((partkey / 10) % 20_001) + 100 * (partkey % 1000)) as f64 / 100.0
}

fn add_days(d: NaiveDate, n: u64) -> NaiveDate {
    d.checked_add_days(Days::new(n)).unwrap()
}

/// Supplier of the `j`-th partsupp row of `partkey`.
fn partsupp_supplier(partkey: u64, j: u64, suppliers: u64) -> u64 {
    ((partkey - 1) + j * (suppliers / 4 + 1)) % suppliers + 1
}

struct Sink {
    writer: csv::Writer<std::io::BufWriter<fs::File>>,
    path: PathBuf,
    rows: u64,
}

impl Sink {
    fn create(dir: &Path, schema: &TableSchema) -> Result<Sink, SuiteError> {
        let sidecar = dir.join(format!("{}.schema", schema.name));
        fs::write(&sidecar, schema.to_sidecar()).map_err(io_err(&sidecar))?;
        let path = dir.join(format!("{}.csv", schema.name));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let header: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        let mut sink = Sink {
            writer: csv::Writer::from_writer(std::io::BufWriter::new(file)),
            path,
            rows: 0,
        };
        sink.writer.write_record(&header).map_err(|e| sink.err(e))?;
        Ok(sink)
    }

    fn err(&self, e: csv::Error) -> SuiteError {
        SuiteError::Io {
            path: self.path.display().to_string(),
            source: std::io::Error::other(e),
        }
    }

    fn row<I, S>(&mut self, fields: I) -> Result<(), SuiteError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| self.err(e))?;
        self.rows += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<u64, SuiteError> {
        self.writer.flush().map_err(|e| SuiteError::Io {
            path: self.path.display().to_string(),
            source: e,
        })?;
        Ok(self.rows)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes a synthetic dataset for `tables` at `scale_factor` into `out_dir`
/// as CSV files with schema sidecars. The TPC-H tables get TPC-H-shaped
/// values; any other table gets sequential keys, foreign keys drawn from
/// the referenced table and random payload.
pub fn generate_scaled_data(
    tables: &[ScalableTable],
    scale_factor: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<ScaledDataset, SuiteError> {
    if !(MIN_SCALE_FACTOR..=MAX_SCALE_FACTOR).contains(&scale_factor) || !scale_factor.is_finite() {
        return Err(SuiteError::UnsupportedScaleFactor(scale_factor));
    }
    let names: HashSet<&str> = tables.iter().map(|t| t.schema.name.as_str()).collect();
    for t in tables {
        let cols = &t.schema.columns;
        if !cols.iter().any(|c| c.primary_key) {
            return Err(SuiteError::MissingKeys(t.schema.name.clone()));
        }
        for c in cols {
            if let Some((rt, _)) = &c.references {
                if !names.contains(rt.as_str()) {
                    return Err(SuiteError::DanglingReference {
                        table: t.schema.name.clone(),
                        target: rt.clone(),
                    });
                }
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let target: BTreeMap<String, u64> = tables
        .iter()
        .map(|t| (t.schema.name.clone(), t.rows_at(scale_factor)))
        .collect();
    let tpch_names: HashSet<String> = tpch_tables().into_iter().map(|t| t.schema.name).collect();
    let is_tpch = tpch_names.iter().all(|n| names.contains(n.as_str()));
    let mut counts = BTreeMap::new();

    for (stream, t) in tables.iter().enumerate() {
        let name = t.schema.name.as_str();
        if is_tpch && tpch_names.contains(name) {
            if name == "lineitem" {
                continue;
            }
            let mut rng = rng_for(seed, stream as u64);
            let written = generate_tpch_table(&t.schema, &target, &mut rng, out_dir, tables)?;
            counts.extend(written);
        } else {
            let mut rng = rng_for(seed, stream as u64);
            let n = generate_generic(t, &target, &mut rng, out_dir)?;
            counts.insert(name.to_string(), n);
        }
    }
    Ok(ScaledDataset {
        dir: out_dir.to_path_buf(),
        scale_factor,
        seed,
        row_counts: counts,
    })
}

fn schema_of<'a>(tables: &'a [ScalableTable], name: &str) -> &'a TableSchema {
    &tables.iter().find(|t| t.schema.name == name).unwrap().schema
}

fn generate_tpch_table(
    schema: &TableSchema,
    target: &BTreeMap<String, u64>,
    rng: &mut ChaCha8Rng,
    dir: &Path,
    tables: &[ScalableTable],
) -> Result<Vec<(String, u64)>, SuiteError> {
    let n = target[&schema.name];
    let mut sink = Sink::create(dir, schema)?;
    match schema.name.as_str() {
        "region" => {
            for k in 0..n {
                let name = REGIONS.get(k as usize).copied().unwrap_or("REGION");
                sink.row([k.to_string(), name.to_string(), comment(rng)])?;
            }
        }
        "nation" => {
            for k in 0..n {
                let (name, region) = NATIONS[k as usize % NATIONS.len()];
                sink.row([k.to_string(), name.to_string(), region.to_string(), comment(rng)])?;
            }
        }
        "supplier" => {
            for k in 1..=n {
                let nation = rng.random_range(0..25);
                sink.row([
                    k.to_string(),
                    format!("Supplier#{k:09}"),
                    comment(rng),
                    nation.to_string(),
                    phone(rng, nation),
                    money(rng, -99_999, 999_999),
                    comment(rng),
                ])?;
            }
        }
        "customer" => {
            for k in 1..=n {
                let nation = rng.random_range(0..25);
                sink.row([
                    k.to_string(),
                    format!("Customer#{k:09}"),
                    comment(rng),
                    nation.to_string(),
                    phone(rng, nation),
                    money(rng, -99_999, 999_999),
                    SEGMENTS.choose(rng).unwrap().to_string(),
                    comment(rng),
                ])?;
            }
        }
        "part" => {
            for k in 1..=n {
                let m = rng.random_range(1..=5);
                let name: Vec<&str> = COLORS.choose_multiple(rng, 5).copied().collect();
                sink.row([
                    k.to_string(),
                    name.join(" "),
                    format!("Manufacturer#{m}"),
                    format!("Brand#{m}{}", rng.random_range(1..=5)),
                    format!(
                        "{} {} {}",
                        TYPE_A.choose(rng).unwrap(),
                        TYPE_B.choose(rng).unwrap(),
                        TYPE_C.choose(rng).unwrap()
                    ),
                    rng.random_range(1..=50).to_string(),
                    format!("{} {}", CONTAINER_A.choose(rng).unwrap(), CONTAINER_B.choose(rng).unwrap()),
                    format!("{:.2}", retail_price(k)),
                    comment(rng),
                ])?;
            }
        }
        "partsupp" => {
            let parts = target["part"];
            let suppliers = target["supplier"];
            let mut used: HashSet<(u64, u64)> = HashSet::new();
            for k in 0..n {
                let partkey = k % parts + 1;
                let mut j = k / parts;
                let mut supp = partsupp_supplier(partkey, j, suppliers);
                while !used.insert((partkey, supp)) {
                    j += 1;
                    supp = partsupp_supplier(partkey, j, suppliers);
                }
                sink.row([
                    partkey.to_string(),
                    supp.to_string(),
                    rng.random_range(1..=9999).to_string(),
                    money(rng, 100, 100_000),
                    comment(rng),
                ])?;
            }
        }
        "orders" => {
            let lines = generate_orders_and_lines(schema, schema_of(tables, "lineitem"), target, rng, dir, &mut sink)?;
            let orders = sink.finish()?;
            return Ok(vec![("orders".into(), orders), ("lineitem".into(), lines)]);
        }
        other => unreachable!("not a TPC-H table: {other}"),
    }
    Ok(vec![(schema.name.clone(), sink.finish()?)])
}

/// Lines per order are drawn from 1..=7, then nudged so the lineitem total
/// is exactly its scaled target.
fn line_counts(orders: u64, total: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut counts: Vec<u8> = (0..orders).map(|_| rng.random_range(1..=7)).collect();
    let total = total.clamp(orders, 7 * orders);
    let mut sum: u64 = counts.iter().map(|&c| c as u64).sum();
    while sum != total {
        let i = rng.random_range(0..counts.len());
        if sum < total && counts[i] < 7 {
            counts[i] += 1;
            sum += 1;
        } else if sum > total && counts[i] > 1 {
            counts[i] -= 1;
            sum -= 1;
        }
    }
    counts
}

fn generate_orders_and_lines(
    orders_schema: &TableSchema,
    lineitem_schema: &TableSchema,
    target: &BTreeMap<String, u64>,
    rng: &mut ChaCha8Rng,
    dir: &Path,
    orders: &mut Sink,
) -> Result<u64, SuiteError> {
    debug_assert_eq!(orders_schema.name, "orders");
    let mut lines = Sink::create(dir, lineitem_schema)?;
    let n_orders = target["orders"];
    let customers = target["customer"];
    let parts = target["part"];
    let suppliers = target["supplier"];
    let counts = line_counts(n_orders, target["lineitem"], rng);
    let span = (last_order_date() - start_date()).num_days() as u64;
    let today = current_date();

    for (i, &count) in counts.iter().enumerate() {
        let orderkey = i as u64 + 1;
        let orderdate = add_days(start_date(), rng.random_range(0..=span));
        let mut total = 0.0;
        let (mut any_open, mut any_filled) = (false, false);
        let mut rendered = Vec::with_capacity(count as usize);
        for line in 1..=count as u64 {
            let partkey = rng.random_range(1..=parts);
            let suppkey = partsupp_supplier(partkey, rng.random_range(0..4), suppliers);
            let quantity = rng.random_range(1..=50) as f64;
            let price = ((quantity * retail_price(partkey)) * 100.0).round() / 100.0;
            let discount = rng.random_range(0..=10) as f64 / 100.0;
            let tax = rng.random_range(0..=8) as f64 / 100.0;
            let ship = add_days(orderdate, rng.random_range(1..=121));
            let commit = add_days(orderdate, rng.random_range(30..=90));
            let receipt = add_days(ship, rng.random_range(1..=30));
            let returnflag = if receipt <= today {
                if rng.random_bool(0.5) { "R" } else { "A" }
            } else {
                "N"
            };
            let linestatus = if ship > today { "O" } else { "F" };
            any_open |= linestatus == "O";
            any_filled |= linestatus == "F";
            total += price * (1.0 + tax) * (1.0 - discount);
            rendered.push([
                orderkey.to_string(),
                partkey.to_string(),
                suppkey.to_string(),
                line.to_string(),
                format!("{quantity:.2}"),
                format!("{price:.2}"),
                format!("{discount:.2}"),
                format!("{tax:.2}"),
                returnflag.to_string(),
                linestatus.to_string(),
                ship.to_string(),
                commit.to_string(),
                receipt.to_string(),
                INSTRUCTIONS.choose(rng).unwrap().to_string(),
                MODES.choose(rng).unwrap().to_string(),
                comment(rng),
            ]);
        }
        let status = match (any_open, any_filled) {
            (true, false) => "O",
            (false, true) => "F",
            _ => "P",
        };
        orders.row([
            orderkey.to_string(),
            rng.random_range(1..=customers).to_string(),
            status.to_string(),
            format!("{total:.2}"),
            orderdate.to_string(),
            PRIORITIES.choose(rng).unwrap().to_string(),
            format!("Clerk#{:09}", rng.random_range(1..=1000u64.max(customers / 150))),
            "0".to_string(),
            comment(rng),
        ])?;
        for r in rendered {
            lines.row(r)?;
        }
    }
    lines.finish()
}

fn generate_generic(
    t: &ScalableTable,
    target: &BTreeMap<String, u64>,
    rng: &mut ChaCha8Rng,
    dir: &Path,
) -> Result<u64, SuiteError> {
    let schema = &t.schema;
    let pk: Vec<&ColumnSpec> = schema.columns.iter().filter(|c| c.primary_key).collect();
    let sequential = pk.iter().filter(|c| c.references.is_none()).count();
    if sequential != 1 || pk.iter().any(|c| c.references.is_none() && c.ty != ColumnType::Integer) {
        return Err(SuiteError::MissingKeys(format!(
            "{} (needs exactly one integer key column that is not a reference)",
            schema.name
        )));
    }
    let n = target[&schema.name];
    let mut sink = Sink::create(dir, schema)?;
    let epoch = start_date();
    for k in 1..=n {
        let row: Vec<String> = schema
            .columns
            .iter()
            .map(|c| {
                if c.primary_key && c.references.is_none() {
                    return k.to_string();
                }
                if let Some((rt, _)) = &c.references {
                    return rng.random_range(1..=target[rt]).to_string();
                }
                match c.ty {
                    ColumnType::Integer => rng.random_range(0..1000).to_string(),
                    ColumnType::Float => money(rng, 0, 100_000),
                    ColumnType::Text => comment(rng),
                    ColumnType::Bool => rng.random_bool(0.5).to_string(),
                    ColumnType::Date => add_days(epoch, rng.random_range(0..2557)).to_string(),
                    ColumnType::Null => String::new(),
                }
            })
            .collect();
        sink.row(row)?;
    }
    sink.finish()
}

/// The TPC-H manifest: four business questions with their SQL, adapted to
/// the embedded engine's dialect.
pub fn tpch_manifest() -> Value {
    serde_json::json!({
        "name": "tpch",
        "cases": [
            {
                "question_id": "tpch-q1",
                "db_id": "tpch",
                "question": "The Pricing Summary Report Query provides a summary pricing report for all lineitems shipped as of a given date. The date is within 60 - 120 days of the greatest ship date contained in the database. The query lists totals for extended price, discounted extended price, discounted extended price plus tax, average quantity, average extended price, and average discount. These aggregates are grouped by RETURNFLAG and LINESTATUS, and listed in ascending order of RETURNFLAG and LINESTATUS. A count of the number of lineitems in each group is included.",
                "evidence": "DELTA = 90 days before 1998-12-01.",
                "SQL": TPCH_Q1,
                "ordered": true
            },
            {
                "question_id": "tpch-q17",
                "db_id": "tpch",
                "question": "The Small-Quantity-Order Revenue Query considers parts of a given brand and with a given container type and determines the average lineitem quantity of such parts ordered for all orders (past and pending) in the 7-year database. What would be the average yearly gross (undiscounted) loss in revenue if orders for these parts with a quantity of less than 20% of this average were no longer taken?",
                "evidence": "BRAND = Brand#23; CONTAINER = MED BOX.",
                "SQL": TPCH_Q17
            },
            {
                "question_id": "tpch-q18",
                "db_id": "tpch",
                "question": "The Large Volume Customer Query ranks customers based on their having placed a large quantity order. Large quantity orders are defined as those orders whose total quantity is above a certain level. The Large Volume Customer Query finds a list of the top 100 customers who have ever placed large quantity orders. The query lists the customer name, customer key, the order key, date and total price and the quantity for the order.",
                "evidence": "QUANTITY = 300.",
                "SQL": TPCH_Q18
            },
            {
                "question_id": "tpch-q21",
                "db_id": "tpch",
                "question": "The Suppliers Who Kept Orders Waiting query identifies suppliers, for a given nation, whose product was part of a multi-supplier order (with current status of 'F') where they were the only supplier who failed to meet the committed delivery date.",
                "evidence": "NATION = SAUDI ARABIA.",
                "SQL": TPCH_Q21
            }
        ]
    })
}

pub const TPCH_Q1: &str = "SELECT l_returnflag, l_linestatus, SUM(l_quantity) AS sum_qty, SUM(l_extendedprice) AS sum_base_price, SUM(l_extendedprice * (1 - l_discount)) AS sum_disc_price, SUM(l_extendedprice * (1 - l_discount) * (1 + l_tax)) AS sum_charge, AVG(l_quantity) AS avg_qty, AVG(l_extendedprice) AS avg_price, AVG(l_discount) AS avg_disc, COUNT(*) AS count_order FROM lineitem WHERE l_shipdate <= date('1998-12-01', '-90 days') GROUP BY l_returnflag, l_linestatus ORDER BY l_returnflag, l_linestatus";

pub const TPCH_Q17: &str = "SELECT SUM(l_extendedprice) / 7.0 AS avg_yearly FROM lineitem, part WHERE p_partkey = l_partkey AND p_brand = 'Brand#23' AND p_container = 'MED BOX' AND l_quantity < (SELECT 0.2 * AVG(l_quantity) FROM lineitem WHERE l_partkey = p_partkey)";

pub const TPCH_Q18: &str = "SELECT c_name, c_custkey, o_orderkey, o_orderdate, o_totalprice, SUM(l_quantity) FROM customer, orders, lineitem WHERE o_orderkey IN (SELECT l_orderkey FROM lineitem GROUP BY l_orderkey HAVING SUM(l_quantity) > 300) AND c_custkey = o_custkey AND o_orderkey = l_orderkey GROUP BY c_name, c_custkey, o_orderkey, o_orderdate, o_totalprice ORDER BY o_totalprice DESC, o_orderdate LIMIT 100";

pub const TPCH_Q21: &str = "SELECT s_name, COUNT(*) AS numwait FROM supplier, lineitem l1, orders, nation WHERE s_suppkey = l1.l_suppkey AND o_orderkey = l1.l_orderkey AND o_orderstatus = 'F' AND l1.l_receiptdate > l1.l_commitdate AND EXISTS (SELECT * FROM lineitem l2 WHERE l2.l_orderkey = l1.l_orderkey AND l2.l_suppkey <> l1.l_suppkey) AND NOT EXISTS (SELECT * FROM lineitem l3 WHERE l3.l_orderkey = l1.l_orderkey AND l3.l_suppkey <> l1.l_suppkey AND l3.l_receiptdate > l3.l_commitdate) AND s_nationkey = n_nationkey AND n_name = 'SAUDI ARABIA' GROUP BY s_name ORDER BY numwait DESC, s_name LIMIT 100";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resultset::{tables_equal_exact, CompareOptions};

    fn write_shop(root: &Path) {
        let db = root.join("shop");
        fs::create_dir_all(&db).unwrap();
        fs::write(db.join("items.schema"), "id integer pk\nprice float\n").unwrap();
        fs::write(db.join("items.csv"), "id,price\n1,2.5\n2,4.0\n").unwrap();
    }

    #[test]
    fn partial_failures_are_per_case() {
        let dir = tempfile::tempdir().unwrap();
        write_shop(dir.path());
        let manifest = r#"[
            {"question": "How many items?", "SQL": "SELECT COUNT(*) FROM items", "db_id": "shop"},
            {"question": "Lost", "SQL": "SELECT 1", "db_id": "missing"},
            {"question_id": 7, "question": "Broken", "SQL": "SELECT nope FROM items", "db_id": "shop"}
        ]"#;
        fs::write(dir.path().join("suite.json"), manifest).unwrap();
        let suite = load_suite(dir.path(), None).unwrap();
        assert_eq!(suite.cases.len(), 1);
        assert_eq!(suite.cases[0].case_id, "shop-1");
        assert_eq!(suite.failures.len(), 2);
        assert!(suite.failures[0].reason.contains("missing"));
        assert_eq!(suite.failures[1].case_id, "7");
    }

    #[test]
    fn unreadable_manifest_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("suite.json"), "{not json").unwrap();
        assert!(matches!(load_suite(dir.path(), None), Err(SuiteError::Manifest { .. })));
        assert!(matches!(load_suite(&dir.path().join("nope.json"), None), Err(SuiteError::Io { .. })));
    }

    #[test]
    fn prompt_carries_evidence() {
        let case = QueryCase {
            case_id: "c".into(),
            nl_question: "Q?".into(),
            evidence: Some("x = 1".into()),
            golden_sql: "SELECT 1".into(),
            golden_result: None,
            ordered: false,
            database: "d".into(),
        };
        assert_eq!(case.prompt(), "Q?\nHint: x = 1");
    }

    #[test]
    fn scale_factor_bounds() {
        let dir = tempfile::tempdir().unwrap();
        for sf in [0.0, 0.0005, 1.5, f64::NAN] {
            assert!(matches!(
                generate_scaled_data(&tpch_tables(), sf, 1, dir.path()),
                Err(SuiteError::UnsupportedScaleFactor(_))
            ));
        }
    }

    #[test]
    fn keys_are_required() {
        let dir = tempfile::tempdir().unwrap();
        let t = table("loose", 10, true, vec![ColumnSpec::new("a", ColumnType::Integer)]);
        assert!(matches!(
            generate_scaled_data(&[t], 0.01, 1, dir.path()),
            Err(SuiteError::MissingKeys(_))
        ));
    }

    #[test]
    fn generic_tables_resolve_references() {
        let dir = tempfile::tempdir().unwrap();
        let tables = vec![
            table("dim", 50, false, vec![ColumnSpec::new("d_id", ColumnType::Integer).pk()]),
            table("fact", 100_000, true, vec![
                ColumnSpec::new("f_id", ColumnType::Integer).pk(),
                ColumnSpec::new("f_dim", ColumnType::Integer).refs("dim", "d_id"),
                ColumnSpec::new("f_at", ColumnType::Date),
                ColumnSpec::new("f_ok", ColumnType::Bool),
            ]),
        ];
        let ds = generate_scaled_data(&tables, 0.01, 3, dir.path()).unwrap();
        assert_eq!(ds.row_counts["fact"], 1000);
        assert_eq!(ds.row_counts["dim"], 50);
        let engine = open_session(&EngineConfig::embedded(dir.path())).unwrap();
        let orphans = engine
            .execute_timed("SELECT COUNT(*) FROM fact WHERE f_dim NOT IN (SELECT d_id FROM dim)")
            .unwrap();
        assert_eq!(orphans.table.rows()[0][0], crate::resultset::CellValue::Integer(0));
    }

    #[test]
    fn tpch_generation_is_deterministic_and_consistent() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate_scaled_data(&tpch_tables(), 0.001, 42, a.path()).unwrap();
        generate_scaled_data(&tpch_tables(), 0.001, 42, b.path()).unwrap();
        for t in tpch_tables() {
            let name = format!("{}.csv", t.schema.name);
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
            assert_eq!(ds.row_counts[&t.schema.name], t.rows_at(0.001));
        }
        assert_eq!(ds.row_counts["lineitem"], 6000);
        assert_eq!(ds.row_counts["region"], 5);

        let engine = open_session(&EngineConfig::embedded(a.path())).unwrap();
        let count = |sql: &str| match &engine.execute_timed(sql).unwrap().table.rows()[0][0] {
            crate::resultset::CellValue::Integer(n) => *n,
            other => panic!("{other:?}"),
        };
        assert_eq!(count("SELECT COUNT(*) FROM lineitem WHERE l_orderkey NOT IN (SELECT o_orderkey FROM orders)"), 0);
        assert_eq!(
            count("SELECT COUNT(*) FROM lineitem l LEFT JOIN partsupp ps ON ps.ps_partkey = l.l_partkey AND ps.ps_suppkey = l.l_suppkey WHERE ps.ps_partkey IS NULL"),
            0
        );
        assert_eq!(count("SELECT COUNT(*) FROM orders WHERE o_orderdate < '1992-01-01' OR o_orderdate > '1998-08-02'"), 0);
        assert_eq!(count("SELECT COUNT(*) FROM nation WHERE n_regionkey NOT IN (SELECT r_regionkey FROM region)"), 0);

        let q1 = engine.execute_timed(TPCH_Q1).unwrap().table;
        assert_eq!(q1.num_rows(), 4);
    }

    #[test]
    fn golden_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_shop(dir.path());
        let engine = open_session(&EngineConfig::embedded(dir.path().join("shop"))).unwrap();
        let case = QueryCase {
            case_id: "shop/1".into(),
            nl_question: "total".into(),
            evidence: None,
            golden_sql: "SELECT SUM(price) AS total FROM items".into(),
            golden_result: None,
            ordered: false,
            database: "shop".into(),
        };
        let cache = dir.path().join("cache");
        let first = load_or_materialize(&case, &engine, &cache, Some(0.01), false).unwrap();
        assert!(golden_cache_path(&cache, "shop/1", Some(0.01)).ends_with("shop_1@sf0.01.json"));
        let again = load_or_materialize(&case, &engine, &cache, Some(0.01), false).unwrap();
        assert_eq!(first, again);
        let fresh = materialize_golden(&case, &engine).unwrap().0;
        assert!(tables_equal_exact(&again.result, &fresh, &CompareOptions::default()));

        let broken = QueryCase {
            golden_sql: "SELECT missing FROM items".into(),
            ..case
        };
        assert!(matches!(materialize_golden(&broken, &engine), Err(SuiteError::GoldenFailed { .. })));
    }

    #[test]
    fn tpch_manifest_has_four_cases() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("suite.json"), serde_json::to_string_pretty(&tpch_manifest()).unwrap()).unwrap();
        generate_scaled_data(&tpch_tables(), 0.001, 7, &root.join("tpch").join("sf0.001")).unwrap();
        let suite = load_suite(root, Some(0.001)).unwrap();
        assert!(suite.failures.is_empty(), "{:?}", suite.failures);
        let ids: Vec<&str> = suite.cases.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids, ["tpch-q1", "tpch-q17", "tpch-q18", "tpch-q21"]);
        assert_eq!(suite.name, "tpch");
    }

    #[test]
    fn line_counts_hit_target() {
        let mut rng = rng_for(1, 0);
        for (orders, total) in [(15u64, 60u64), (1500, 6000), (10, 70), (10, 10)] {
            let c = line_counts(orders, total, &mut rng);
            assert_eq!(c.iter().map(|&x| x as u64).sum::<u64>(), total);
            assert!(c.iter().all(|&x| (1..=7).contains(&x)));
        }
    }
}
