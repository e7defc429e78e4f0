//! Regenerates the replay scripts under `fixtures/mini/scripts`.
//!
//! Each script is written by hand below, played once against the mini shop
//! database, and saved with request fingerprints so later replays fail loudly
//! if prompts or observations drift. Run after changing prompts:
//!
//!     cargo run -p bigsql-core --example refresh_fixtures

use std::fs;
use std::path::{Path, PathBuf};

use bigsql_core::engine::{open_session, EngineConfig};
use bigsql_core::llmclient::{record_session, ChatResponse, RecordedExchange, ReplayBackend, TokenUsage, ToolCall};
use bigsql_core::resultset::{containment_indicator, CompareOptions};
use bigsql_core::suite::{load_suite, materialize_golden};
use bigsql_core::{run_agent, AgentConfig, Outcome};
use serde_json::json;

struct Plan {
    tables: &'static [&'static str],
    sql: &'static str,
}

fn alpha(case: &str) -> Plan {
    match case {
        "shop-1" => Plan {
            tables: &["customers"],
            sql: "SELECT COUNT(*) AS customers FROM customers WHERE city = 'Lisbon'",
        },
        "shop-2" => Plan {
            tables: &["products"],
            sql: "SELECT name, price FROM products WHERE category = 'Books'",
        },
        "shop-3" => Plan {
            tables: &["products", "order_items"],
            sql: "SELECT p.category, SUM(oi.quantity * oi.unit_price) AS revenue, COUNT(*) AS items \
                  FROM order_items oi JOIN products p ON p.product_id = oi.product_id GROUP BY p.category",
        },
        // counts delivered orders only, so it misses one customer
        "shop-4" => Plan {
            tables: &["customers", "orders"],
            sql: "SELECT c.name FROM customers c JOIN orders o ON o.customer_id = c.customer_id \
                  WHERE o.status = 'delivered' GROUP BY c.customer_id HAVING COUNT(*) > 2",
        },
        "shop-5" => Plan {
            tables: &["orders"],
            sql: "SELECT order_id, order_date FROM orders WHERE status = 'delivered' ORDER BY order_date DESC LIMIT 5",
        },
        other => panic!("no script for {other}"),
    }
}

fn beta(case: &str) -> Plan {
    match case {
        "shop-1" => Plan {
            tables: &["customers"],
            sql: "SELECT COUNT(customer_id) AS lisbon_customers FROM customers WHERE city = 'Lisbon'",
        },
        "shop-2" => Plan {
            tables: &["products"],
            sql: "SELECT name FROM products WHERE category = 'Books'",
        },
        "shop-3" => Plan {
            tables: &["order_items", "products"],
            sql: "SELECT p.category, SUM(oi.quantity * oi.unit_price) AS revenue FROM order_items oi \
                  JOIN products p ON oi.product_id = p.product_id GROUP BY p.category",
        },
        "shop-4" => Plan {
            tables: &["customers", "orders"],
            sql: "SELECT c.name FROM customers c WHERE (SELECT COUNT(*) FROM orders o WHERE o.customer_id = c.customer_id) > 2",
        },
        "shop-5" => Plan {
            tables: &["orders"],
            sql: "SELECT order_id, order_date FROM orders WHERE status = 'delivered' ORDER BY order_date DESC, order_id DESC LIMIT 5",
        },
        other => panic!("no script for {other}"),
    }
}

fn exchange(text: &str, tool_call: Option<ToolCall>, input: u64, output: u64, latency_ms: u64) -> RecordedExchange {
    RecordedExchange {
        fingerprint: None,
        response: ChatResponse {
            text: text.to_string(),
            tool_call,
        },
        usage: TokenUsage::new(input, output),
        latency_ms: Some(latency_ms),
    }
}

/// ReAct text replies, fast and terse.
fn alpha_script(plan: &Plan) -> Vec<RecordedExchange> {
    let base = 40 * plan.sql.len() as u64 / 10;
    vec![
        exchange("Thought: I need to see which tables exist.\nAction: list_tables\nAction Input: ", None, 512, 21, 6),
        exchange(
            &format!(
                "Thought: The relevant tables look like {}.\nAction: get_schema\nAction Input: {}",
                plan.tables.join(" and "),
                plan.tables.join(", ")
            ),
            None,
            598,
            34,
            7,
        ),
        exchange(
            &format!("Thought: I can write the query now and check it first.\nAction: check_query\nAction Input: {}", plan.sql),
            None,
            940 + base,
            60 + plan.sql.len() as u64 / 4,
            9,
        ),
        exchange("query OK", None, 330 + plan.sql.len() as u64 / 4, 3, 5),
        exchange(
            &format!("Thought: The checker accepted it.\nAction: run_query\nAction Input: {}", plan.sql),
            None,
            1010 + base,
            48 + plan.sql.len() as u64 / 4,
            8,
        ),
    ]
}

fn call(id: &str, name: &str, arguments: serde_json::Value) -> Option<ToolCall> {
    Some(ToolCall {
        id: id.to_string(),
        name: name.to_string(),
        arguments,
    })
}

/// Structured tool calls, slower and more verbose.
fn beta_script(plan: &Plan) -> Vec<RecordedExchange> {
    let q = plan.sql.len() as u64;
    vec![
        exchange("Let me start by listing the tables.", call("c1", "list_tables", json!({})), 545, 64, 15),
        exchange(
            "I will inspect the schema of the tables that matter.",
            call("c2", "get_schema", json!({ "tables": plan.tables })),
            660,
            88,
            17,
        ),
        exchange(
            "Before running, I will have the query checked.",
            call("c3", "check_query", json!({ "query": plan.sql })),
            1120 + 4 * q,
            120 + q / 3,
            21,
        ),
        exchange(&format!("query OK\n\n{}", plan.sql), None, 340 + q / 4, 12 + q / 4, 12),
        exchange(
            "The query is correct, running it.",
            call("c4", "run_query", json!({ "query": plan.sql })),
            1240 + 4 * q,
            96 + q / 3,
            18,
        ),
    ]
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini");
    let suite = load_suite(&root, None).expect("mini suite loads");
    assert!(suite.failures.is_empty(), "{:?}", suite.failures);
    let engine = open_session(&EngineConfig::embedded(root.join("shop"))).unwrap();
    let config = AgentConfig::default();

    type Scripter = fn(&Plan) -> Vec<RecordedExchange>;
    let models: [(&str, fn(&str) -> Plan, Scripter); 2] = [("alpha", alpha, alpha_script), ("beta", beta, beta_script)];
    for (model, plans, scripter) in models {
        let dir = root.join("scripts").join(model);
        fs::create_dir_all(&dir).unwrap();
        for case in &suite.cases {
            let script = scripter(&plans(&case.case_id));
            let path = dir.join(format!("{}.jsonl", case.case_id));
            let replay = ReplayBackend::new(model, script).without_latency();
            let recorder = record_session(replay, Box::new(fs::File::create(&path).unwrap()));
            let trace = run_agent(&case.prompt(), &config, &recorder, &engine);
            assert_eq!(trace.outcome, Outcome::Completed, "{model} {}: {:?}", case.case_id, trace.error);
            assert_eq!(recorder.into_inner().remaining(), 0, "{model} {}: unused replies", case.case_id);
            report(&path, model, case, &trace, &engine);
        }
    }
}

fn report(
    path: &Path,
    model: &str,
    case: &bigsql_core::suite::QueryCase,
    trace: &bigsql_core::AgentTrace,
    engine: &bigsql_core::SqliteEngine,
) {
    let (golden, _) = materialize_golden(case, engine).unwrap();
    let generated = trace.final_result.as_ref().expect("query ran");
    let ok = containment_indicator(&golden, generated, &CompareOptions::default().ordered(case.ordered));
    println!("{model} {} -> {} (EX {ok})", case.case_id, path.display());
}
