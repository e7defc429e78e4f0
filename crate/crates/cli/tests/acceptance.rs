//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the verdict lines always reach the console; exits non-zero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use bigsql_core::agent::{replay_from_trace, Stage};
use bigsql_core::costmodel::{compose_ledger, EnginePricing, PricingConfig, PricingEntry, Usd};
use bigsql_core::engine::{open_session, EngineConfig};
use bigsql_core::llmclient::{parse_recording, ChatResponse, RecordedExchange, ReplayBackend, TokenUsage};
use bigsql_core::metrics::{
    aggregate, cvq, ves_per_query, ves_star_per_query, MetricRecord,
};
use bigsql_core::report::Report;
use bigsql_core::resultset::{
    column_precision, containment_indicator, tables_equal_exact, CellValue, Column, ColumnType, CompareOptions,
    ResultTable, Row,
};
use bigsql_core::runner::{read_records, RunSummary};
use bigsql_core::suite::{generate_scaled_data, tpch_tables, TPCH_Q1};
use bigsql_core::{run_agent, stage_breakdown, Action, AgentConfig, AgentTrace, EngineAdapter, Outcome, ToolId};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini")
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1 and 3: randomized metric records against straight transcriptions
// ---------------------------------------------------------------------------

const KEYWORDS: [&str; 8] = ["select", "from", "where", "group by", "order by", "and", "as", "limit"];

/// A golden query plus a generated one whose equivalence under whitespace
/// and keyword-case changes is known by construction.
fn sql_pair(rng: &mut ChaCha8Rng) -> (String, String, bool) {
    let n = rng.random_range(1..100);
    let golden = format!("SELECT a, b AS total FROM t{n} WHERE a > {n} GROUP BY a ORDER BY a LIMIT 5");
    let mutated: String = golden
        .split(' ')
        .map(|tok| {
            let spaced = if rng.random_bool(0.3) { format!("  \n{tok}") } else { tok.to_string() };
            if KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(tok)) && rng.random_bool(0.5) {
                spaced.to_ascii_lowercase()
            } else {
                spaced
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    if rng.random_bool(0.5) {
        (golden, mutated, true)
    } else {
        (golden, mutated.replace(&format!("t{n}"), &format!("t{}", n + 1)), false)
    }
}

fn random_records(n: usize, seed: u64) -> (Vec<MetricRecord>, Vec<(String, String)>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut same = Vec::with_capacity(n);
    for i in 0..n {
        let indicator = rng.random_bool(0.7) as u8;
        let exact = if indicator == 1 { rng.random_bool(0.6) as u8 } else { 0 };
        let gen_cols = rng.random_range(1..=6u32);
        let shared = if indicator == 1 { rng.random_range(1..=gen_cols) } else { rng.random_range(0..=gen_cols) };
        let t_gen = rng.random_range(1e-4..30.0);
        let t_e2e = t_gen + rng.random_range(0.0..120.0);
        records.push(MetricRecord {
            case_id: format!("q{}", i % 37),
            run_id: (i / 37) as u32,
            indicator,
            exact_indicator: exact,
            precision: shared as f64 / gen_cols as f64,
            t_gold: rng.random_range(1e-4..30.0),
            t_gen,
            t_e2e,
            c_e2e: rng.random_range(1e-5..0.5),
            valid: indicator == 1,
        });
        let (g, q, eq) = sql_pair(&mut rng);
        pairs.push((g, q));
        same.push(eq);
    }
    (records, pairs, same)
}

fn criterion_1() -> Verdict {
    let (records, pairs, same) = random_records(1000, 11);
    let n = records.len() as f64;
    let ind = |r: &MetricRecord| r.indicator as f64;
    let em = same.iter().filter(|s| **s).count() as f64 / n;
    let ea = records.iter().map(|r| r.exact_indicator as f64).sum::<f64>() / n;
    let ex = records.iter().map(ind).sum::<f64>() / n;
    let ves = records.iter().map(|r| ind(r) * r.t_gold / r.t_gen).sum::<f64>() / n;
    let ves_star = records
        .iter()
        .map(|r| ind(r) * r.precision * r.t_gold / r.t_e2e)
        .sum::<f64>()
        / n;
    let vces = records
        .iter()
        .map(|r| ind(r) * r.precision * (r.t_gold / r.t_e2e) / r.c_e2e)
        .sum::<f64>()
        / n;
    let mean_c = records.iter().map(|r| r.c_e2e).sum::<f64>() / n;
    let cvq_ref = mean_c / ex;

    let got = aggregate(&records, &pairs).map_err(|e| e.to_string())?;
    let checks = [
        ("EM", got.em, em),
        ("EA", got.ea, ea),
        ("EX", got.ex, ex),
        ("VES", got.ves, ves),
        ("VES*", got.ves_star, ves_star),
        ("VCES", got.vces, vces),
        ("CVQ", got.cvq.unwrap_or(f64::NAN), cvq_ref),
    ];
    for (name, a, b) in checks {
        ensure(rel_close(a, b, 1e-12), || format!("{name}: library {a} vs reference {b}"))?;
    }
    for r in &records {
        let v = ves_per_query(r).map_err(|e| e.to_string())?;
        ensure(rel_close(v, ind(r) * r.t_gold / r.t_gen, 1e-12), || format!("per-record VES {}", r.case_id))?;
    }
    Ok(format!("7 suite metrics and 1000 per-record VES agree at 1e-12 (EM {em:.3}, EX {ex:.3})"))
}

fn criterion_3() -> Verdict {
    let (records, _, _) = random_records(1000, 11);
    let mut violations = 0;
    for r in &records {
        if r.t_e2e >= r.t_gen {
            let a = ves_star_per_query(r).map_err(|e| e.to_string())?;
            let b = ves_per_query(r).map_err(|e| e.to_string())?;
            if a > b {
                violations += 1;
            }
        }
    }
    ensure(violations == 0, || format!("{violations} records with VES* > VES"))?;
    Ok(format!("{} records, 0 violations", records.len()))
}

// ---------------------------------------------------------------------------
// 2: outcome taxonomy on generated table pairs
// ---------------------------------------------------------------------------

fn random_cell(rng: &mut ChaCha8Rng, ty: ColumnType) -> CellValue {
    match ty {
        ColumnType::Integer => CellValue::Integer(rng.random_range(-5..20)),
        ColumnType::Float => CellValue::Float(rng.random_range(-100.0..100.0)),
        _ => CellValue::Text(format!("v{}", rng.random_range(0..6))),
    }
}

fn random_truth(rng: &mut ChaCha8Rng) -> ResultTable {
    let types = [ColumnType::Integer, ColumnType::Float, ColumnType::Text];
    let k = rng.random_range(1..=4);
    let cols: Vec<Column> = (0..k)
        .map(|i| Column::new(&format!("c{i}"), *types.choose(rng).unwrap()).unwrap())
        .collect();
    let n = rng.random_range(0..=8);
    let rows: Vec<Row> = (0..n).map(|_| cols.iter().map(|c| random_cell(rng, c.ty)).collect()).collect();
    ResultTable::new(cols, rows).unwrap()
}

fn rebuild(cols: Vec<Column>, rows: Vec<Row>) -> ResultTable {
    ResultTable::new(cols, rows).unwrap()
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let opts = CompareOptions::default();
    let mut violations = Vec::new();
    let mut counts = [0usize; 3];
    for i in 0..500 {
        let truth = random_truth(&mut rng);
        let k = truth.columns().len();
        let mut rows: Vec<Row> = truth.rows().to_vec();
        rows.shuffle(&mut rng);
        match i % 3 {
            // extra generated column
            0 => {
                let mut cols = truth.columns().to_vec();
                let at = rng.random_range(0..=k);
                cols.insert(at, Column::new("extra_col", ColumnType::Integer).unwrap());
                for r in &mut rows {
                    r.insert(at, CellValue::Integer(rng.random_range(0..9)));
                }
                let generated = rebuild(cols, rows);
                let base = column_precision(&truth, &truth).unwrap();
                let p = column_precision(&truth, &generated).unwrap();
                if containment_indicator(&truth, &generated, &opts) != 1 || p >= base {
                    violations.push(format!("pair {i}: extra column, P {p} vs {base}"));
                }
                counts[0] += 1;
            }
            // a truth column is missing
            1 => {
                let drop = rng.random_range(0..k);
                let mut cols = truth.columns().to_vec();
                cols.remove(drop);
                for r in &mut rows {
                    r.remove(drop);
                }
                if cols.is_empty() {
                    cols.push(Column::new("other", ColumnType::Integer).unwrap());
                    for r in &mut rows {
                        r.push(CellValue::Integer(0));
                    }
                }
                let generated = rebuild(cols, rows);
                if containment_indicator(&truth, &generated, &opts) != 0 {
                    violations.push(format!("pair {i}: missing column still contained"));
                }
                counts[1] += 1;
            }
            // row count differs on the truth columns
            _ => {
                if !rows.is_empty() && rng.random_bool(0.5) {
                    let at = rng.random_range(0..rows.len());
                    if rng.random_bool(0.5) {
                        rows.remove(at);
                    } else {
                        let dup = rows[at].clone();
                        rows.push(dup);
                    }
                } else {
                    let extra: Row = truth.columns().iter().map(|c| random_cell(&mut rng, c.ty)).collect();
                    rows.push(extra);
                }
                let generated = rebuild(truth.columns().to_vec(), rows);
                if containment_indicator(&truth, &generated, &opts) != 0 {
                    violations.push(format!("pair {i}: row count mismatch still contained"));
                }
                counts[2] += 1;
            }
        }
    }
    ensure(violations.is_empty(), || violations.join("; "))?;
    Ok(format!(
        "500 pairs ({} extra-column, {} missing-column, {} row-count), 0 violations",
        counts[0], counts[1], counts[2]
    ))
}

// ---------------------------------------------------------------------------
// 4: CVQ against a retry-until-success simulation
// ---------------------------------------------------------------------------

fn criterion_4() -> Verdict {
    let cost = 0.0044;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut parts = Vec::new();
    for p in [0.2, 0.5, 1.0] {
        let trials = 100_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut attempts = 1u64;
            while !rng.random_bool(p) {
                attempts += 1;
            }
            total += attempts as f64 * cost;
        }
        let simulated = total / trials as f64;
        let model = cvq(cost, p).map_err(|e| e.to_string())?.ok_or("cvq undefined")?;
        let err = (simulated - model).abs() / model;
        ensure(err <= 0.02, || format!("p={p}: simulated {simulated} vs C/p {model}"))?;
        parts.push(format!("p={p} err {:.2}%", 100.0 * err));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------------------
// 5 and 6: the scripted episode against the mini database
// ---------------------------------------------------------------------------

fn script_path() -> PathBuf {
    fixtures().join("scripts/alpha/shop-3.jsonl")
}

fn scripted_episode() -> Result<AgentTrace, String> {
    let suite = bigsql_core::suite::load_suite(&fixtures(), None).map_err(|e| e.to_string())?;
    let case = suite.cases.iter().find(|c| c.case_id == "shop-3").ok_or("shop-3 missing")?;
    let engine = open_session(&EngineConfig::embedded(fixtures().join("shop"))).map_err(|e| e.to_string())?;
    let replay = ReplayBackend::load("alpha", &script_path()).map_err(|e| e.to_string())?.without_latency();
    Ok(run_agent(&case.prompt(), &AgentConfig::default(), &replay, &engine))
}

fn criterion_5() -> Verdict {
    let first = scripted_episode()?;
    let again = scripted_episode()?;
    ensure(first.outcome == Outcome::Completed, || format!("outcome {} ({:?})", first.outcome, first.error))?;
    for tool in ToolId::ALL {
        ensure(first.count_actions(Action::Tool(tool)) >= 1, || format!("{} never called", tool.name()))?;
    }
    let runs = first.count_actions(Action::Tool(ToolId::RunQuery));
    ensure(runs == 1, || format!("{runs} run_query calls"))?;
    let total: f64 = stage_breakdown(&first).stages.iter().map(|s| s.percent).sum();
    ensure((total - 100.0).abs() <= 0.1, || format!("stage percentages sum to {total}"))?;
    ensure(first.canonical_jsonl() == again.canonical_jsonl(), || "re-run differs".into())?;
    // replaying the episode's own log reproduces it as well
    let engine = open_session(&EngineConfig::embedded(fixtures().join("shop"))).map_err(|e| e.to_string())?;
    let third = run_agent(&first.question, &AgentConfig::default(), &replay_from_trace(&first).without_latency(), &engine);
    ensure(first.canonical_jsonl() == third.canonical_jsonl(), || "replay of episode log differs".into())?;
    Ok(format!(
        "{} iterations, 1 run_query, stage shares sum to {total:.3}%, re-runs byte-identical",
        first.iterations.len()
    ))
}

fn criterion_6() -> Verdict {
    let trace = scripted_episode()?;
    let pricing = PricingEntry::new("alpha", 2.5, 10.0).map_err(|e| e.to_string())?;
    let ledger = compose_ledger(&trace, &pricing, &EnginePricing::free()).map_err(|e| e.to_string())?;

    // spreadsheet: tokens from the script times the per-token rate in picodollars
    let text = std::fs::read_to_string(script_path()).map_err(|e| e.to_string())?;
    let script = parse_recording(&text).map_err(|e| e.to_string())?;
    let line = |e: &RecordedExchange| e.usage.input_tokens * 2_500_000 + e.usage.output_tokens * 10_000_000;
    let by_stage: BTreeMap<Stage, u64> = [
        (Stage::List, line(&script[0])),
        (Stage::Schema, line(&script[1])),
        (Stage::Check, line(&script[2]) + line(&script[3])),
        (Stage::Run, line(&script[4])),
        (Stage::Finalize, 0),
    ]
    .into_iter()
    .collect();
    let hand_total: u64 = by_stage.values().sum();
    ensure(ledger.total.picos() == hand_total, || {
        format!("ledger {} vs hand {}", ledger.total.picos(), hand_total)
    })?;
    let stage_sum: u64 = ledger.stages.iter().map(|s| s.total().picos()).sum();
    ensure(stage_sum == ledger.total.picos(), || format!("stage sum {stage_sum} vs total"))?;
    for s in &ledger.stages {
        ensure(s.total().picos() == by_stage[&s.stage], || format!("stage {} differs", s.stage.name()))?;
    }

    let mtok = 1_000_000;
    let rates = [("cheap", 0.5, 3.0), ("fast", 2.5, 10.0)];
    for (id, input, output) in rates {
        let e = PricingEntry::new(id, input, output).map_err(|e| e.to_string())?;
        ensure(e.llm_cost(mtok, 0) == Usd::from_dollars(input), || format!("{id} input"))?;
        ensure(e.llm_cost(0, mtok) == Usd::from_dollars(output), || format!("{id} output"))?;
        ensure(e.llm_cost(mtok, 0).as_dollars() == input && e.llm_cost(0, mtok).as_dollars() == output, || {
            format!("{id} dollars")
        })?;
        ensure(
            e.llm_cost(mtok, mtok).picos() == ((input + output) * 1e12) as u64,
            || format!("{id} combined"),
        )?;
    }
    Ok(format!(
        "ledger {} = hand sum {} picodollars = stage sum; $0.5/$3.0 and $2.5/$10.0 per Mtok exact",
        ledger.total.picos(),
        hand_total
    ))
}

// ---------------------------------------------------------------------------
// 7 and 8: synthetic TPC-H data
// ---------------------------------------------------------------------------

fn csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    reader.records().collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())
}

/// Q1 computed directly from the raw lineitem rows.
fn q1_oracle(dir: &Path) -> Result<ResultTable, String> {
    let mut reader = csv::Reader::from_path(dir.join("lineitem.csv")).map_err(|e| e.to_string())?;
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (qty, price, disc, tax, flag, status, ship) = (
        col("l_quantity"),
        col("l_extendedprice"),
        col("l_discount"),
        col("l_tax"),
        col("l_returnflag"),
        col("l_linestatus"),
        col("l_shipdate"),
    );
    #[derive(Default)]
    struct Acc {
        qty: f64,
        base: f64,
        disc_price: f64,
        charge: f64,
        disc: f64,
        n: i64,
    }
    let mut groups: BTreeMap<(String, String), Acc> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if &rec[ship] > "1998-09-02" {
            continue;
        }
        let f = |i: usize| rec[i].parse::<f64>().unwrap();
        let a = groups.entry((rec[flag].to_string(), rec[status].to_string())).or_default();
        a.qty += f(qty);
        a.base += f(price);
        a.disc_price += f(price) * (1.0 - f(disc));
        a.charge += f(price) * (1.0 - f(disc)) * (1.0 + f(tax));
        a.disc += f(disc);
        a.n += 1;
    }
    let names = [
        ("l_returnflag", ColumnType::Text),
        ("l_linestatus", ColumnType::Text),
        ("sum_qty", ColumnType::Float),
        ("sum_base_price", ColumnType::Float),
        ("sum_disc_price", ColumnType::Float),
        ("sum_charge", ColumnType::Float),
        ("avg_qty", ColumnType::Float),
        ("avg_price", ColumnType::Float),
        ("avg_disc", ColumnType::Float),
        ("count_order", ColumnType::Integer),
    ];
    let cols = names.iter().map(|(n, t)| Column::new(n, *t).unwrap()).collect();
    let rows = groups
        .into_iter()
        .map(|((fl, st), a)| {
            let n = a.n as f64;
            vec![
                CellValue::Text(fl),
                CellValue::Text(st),
                CellValue::Float(a.qty),
                CellValue::Float(a.base),
                CellValue::Float(a.disc_price),
                CellValue::Float(a.charge),
                CellValue::Float(a.qty / n),
                CellValue::Float(a.base / n),
                CellValue::Float(a.disc / n),
                CellValue::Integer(a.n),
            ]
        })
        .collect();
    ResultTable::new(cols, rows).map_err(|e| e.to_string())
}

fn criterion_7(scratch: &Path) -> Verdict {
    let base: BTreeMap<&str, u64> = [
        ("supplier", 10_000),
        ("customer", 150_000),
        ("part", 200_000),
        ("partsupp", 800_000),
        ("orders", 1_500_000),
        ("lineitem", 6_000_000),
    ]
    .into_iter()
    .collect();
    let mut notes = Vec::new();
    for sf in [0.001, 0.01] {
        let dir = scratch.join(format!("tpch-{sf}"));
        generate_scaled_data(&tpch_tables(), sf, 7, &dir).map_err(|e| e.to_string())?;
        let count = |t: &str| csv_rows(&dir.join(format!("{t}.csv"))).map(|r| r.len() as i64);
        ensure(count("region")? == 5, || format!("sf {sf}: region rows"))?;
        ensure(count("nation")? == 25, || format!("sf {sf}: nation rows"))?;
        for (t, b) in &base {
            let expected = (*b as f64 * sf).round() as i64;
            let got = count(t)?;
            ensure((got - expected).abs() <= 1, || format!("sf {sf}: {t} has {got} rows, expected {expected}"))?;
        }
        let engine = open_session(&EngineConfig::embedded(dir.clone())).map_err(|e| e.to_string())?;
        let golden = engine.execute_timed(TPCH_Q1).map_err(|e| e.to_string())?.table;
        let oracle = q1_oracle(&dir)?;
        let opts = CompareOptions::default().ordered(true);
        ensure(tables_equal_exact(&oracle, &golden, &opts), || {
            format!("sf {sf}: Q1 differs from the brute-force group-by\n{}\n{}", golden.render_grid(10), oracle.render_grid(10))
        })?;
        notes.push(format!("sf {sf}: lineitem {} rows, Q1 {} groups", count("lineitem")?, golden.num_rows()));
    }
    Ok(notes.join("; "))
}

fn q1_script() -> Vec<RecordedExchange> {
    let reply = |text: String, i: u64, o: u64| RecordedExchange {
        fingerprint: None,
        response: ChatResponse { text, tool_call: None },
        usage: TokenUsage::new(i, o),
        latency_ms: Some(25),
    };
    vec![
        reply("Action: list_tables\nAction Input: ".into(), 500, 20),
        reply("Action: get_schema\nAction Input: lineitem".into(), 700, 30),
        reply(format!("Action: check_query\nAction Input: {TPCH_Q1}"), 1500, 200),
        reply("query OK".into(), 400, 3),
        reply(format!("Action: run_query\nAction Input: {TPCH_Q1}"), 1800, 200),
    ]
}

fn criterion_8(scratch: &Path) -> Verdict {
    let pricing = PricingEntry::new("fixed", 2.5, 10.0).map_err(|e| e.to_string())?;
    let engine_pricing = EnginePricing::per_second(0.5);
    let p = 0.5;
    let mut shares = Vec::new();
    let mut cvqs = Vec::new();
    for sf in [0.001, 0.01] {
        let dir = scratch.join(format!("tpch-{sf}"));
        if !dir.join("lineitem.csv").is_file() {
            generate_scaled_data(&tpch_tables(), sf, 7, &dir).map_err(|e| e.to_string())?;
        }
        let engine = open_session(&EngineConfig::embedded(dir)).map_err(|e| e.to_string())?;
        let llm = ReplayBackend::new("fixed", q1_script()).lenient();
        let trace = run_agent("pricing summary report", &AgentConfig::default(), &llm, &engine);
        ensure(trace.outcome == Outcome::Completed, || format!("sf {sf}: {:?}", trace.error))?;
        shares.push(stage_breakdown(&trace).share(Stage::Run).percent);
        let ledger = compose_ledger(&trace, &pricing, &engine_pricing).map_err(|e| e.to_string())?;
        cvqs.push(cvq(ledger.total.as_dollars(), p).map_err(|e| e.to_string())?.unwrap());
    }
    ensure(shares[1] > shares[0], || format!("run share {:.2}% at 0.01 vs {:.2}% at 0.001", shares[1], shares[0]))?;
    ensure(cvqs[1] > cvqs[0], || format!("CVQ {} at 0.01 vs {} at 0.001", cvqs[1], cvqs[0]))?;
    Ok(format!(
        "run share {:.2}% -> {:.2}%, CVQ ${:.6} -> ${:.6} (p = {p})",
        shares[0], shares[1], cvqs[0], cvqs[1]
    ))
}

// ---------------------------------------------------------------------------
// 9: end-to-end CLI run and report
// ---------------------------------------------------------------------------

fn bigsql(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_bigsql"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())
}

fn exactly_one_best(values: &[Option<f64>]) -> bool {
    values.iter().filter(|v| **v == Some(1.0)).count() == 1
}

fn criterion_9(scratch: &Path) -> Verdict {
    let start = Instant::now();
    let out = scratch.join("mini-run");
    let plan = fixtures().join("plan.json");
    let run = bigsql(&["run", plan.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])?;
    ensure(run.status.code() == Some(0), || {
        format!("run exited {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr))
    })?;
    let report = bigsql(&["report", out.to_str().unwrap()])?;
    ensure(report.status.success(), || String::from_utf8_lossy(&report.stderr).into())?;

    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(out.join("run_summary.json")).unwrap())
        .map_err(|e| e.to_string())?;
    ensure(summary.records == 20 && summary.skipped.is_empty(), || format!("{summary:?}"))?;
    let records = read_records(&out.join("records.jsonl")).map_err(|e| e.to_string())?;
    for r in &records {
        let stages: u64 = r.stage_cost.values().map(|u| u.picos()).sum();
        ensure(stages == r.cost.picos() && r.metric.c_e2e == r.cost.as_dollars(), || {
            format!("{} {}: cost identity", r.model_id, r.case_id)
        })?;
    }

    let report: Report = serde_json::from_str(&std::fs::read_to_string(out.join("report/report.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let t1: Vec<f64> = report.time_table.iter().map(|r| r.e2e_mean).collect();
    ensure(t1.windows(2).all(|w| w[0] >= w[1]), || format!("table 1 not descending by e2e: {t1:?}"))?;
    for row in &report.time_table {
        let total: f64 = row.stage_percent.values().sum();
        ensure((total - 100.0).abs() <= 0.1, || format!("{}: stage shares sum to {total}", row.model_id))?;
    }
    let t2 = &report.efficiency_table;
    ensure(t2.windows(2).all(|w| w[0].ves_star_norm >= w[1].ves_star_norm), || "table 2 not descending by VES*".into())?;
    ensure(t2[0].ves_star_norm == Some(1.0), || "top VES* is not 1.00".into())?;
    ensure(exactly_one_best(&t2.iter().map(|r| r.ves_norm).collect::<Vec<_>>()), || "VES column has no 1.00".into())?;
    for s in Stage::TOOLS {
        let col: Vec<Option<f64>> = t2.iter().map(|r| r.time_variation[&s]).collect();
        ensure(exactly_one_best(&col), || format!("time variation {} has no 1.00x", s.name()))?;
        let col: Vec<Option<f64>> = report.cost_table.iter().map(|r| r.cost_variation[&s]).collect();
        ensure(exactly_one_best(&col), || format!("cost variation {} has no 1.00x", s.name()))?;
    }
    let t3 = &report.cost_table;
    ensure(t3.windows(2).all(|w| w[0].vces_norm >= w[1].vces_norm), || "table 3 not descending by VCES".into())?;
    ensure(t3[0].vces_norm == Some(1.0), || "top VCES is not 1.00".into())?;
    let md = std::fs::read_to_string(out.join("report/report.md")).unwrap();
    let top = md
        .lines()
        .find(|l| l.starts_with(&format!("| {} |", t2[0].model_id)) && l.contains("x |"))
        .unwrap_or("");
    let cells: Vec<&str> = top.split('|').map(str::trim).collect();
    ensure(cells.get(3) == Some(&"1.00") && md.contains("1.00x"), || {
        format!("markdown lacks normalized cells: {top:?}")
    })?;
    for f in ["stage_time_vs_sf.csv", "stage_cost_vs_sf.csv", "table_time.csv", "table_efficiency.csv", "table_cost.csv"] {
        ensure(out.join("report").join(f).is_file(), || format!("{f} missing"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "20 episodes, exit 0; VES* order {}; VCES order {}; {secs:.2}s",
        t2.iter().map(|r| r.model_id.as_str()).collect::<Vec<_>>().join(" > "),
        t3.iter().map(|r| r.model_id.as_str()).collect::<Vec<_>>().join(" > ")
    ))
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let scratch = tempfile::tempdir().expect("scratch dir");
    let pricing_file = fixtures().join("pricing.json");
    assert!(PricingConfig::load(&pricing_file).is_ok(), "fixture pricing loads");

    // (name, check, runtime limit in seconds)
    type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;
    let criteria: Vec<(&str, Check, Option<f64>)> = vec![
        ("metric formulas match brute-force reference", Box::new(criterion_1), Some(5.0)),
        ("outcome taxonomy on 500 table pairs", Box::new(criterion_2), Some(5.0)),
        ("VES* <= VES per record", Box::new(criterion_3), None),
        ("CVQ matches geometric retry simulation", Box::new(criterion_4), Some(10.0)),
        ("deterministic four-tool episode", Box::new(criterion_5), None),
        ("cost accounting identity and footnote rates", Box::new(criterion_6), None),
        ("TPC-H structure at SF 0.001 and 0.01", Box::new(|| criterion_7(scratch.path())), None),
        ("run share and CVQ grow with scale", Box::new(|| criterion_8(scratch.path())), None),
        ("end-to-end offline run and report", Box::new(|| criterion_9(scratch.path())), Some(60.0)),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        let verdict = match (verdict, limit) {
            (Ok(_), Some(l)) if secs > *l => Err(format!("exceeded the {l}s limit")),
            (v, _) => v,
        };
        match verdict {
            Ok(detail) => println!("criterion {} PASS [{secs:.2}s] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL [{secs:.2}s] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
