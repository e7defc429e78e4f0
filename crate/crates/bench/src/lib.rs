//! Deterministic inputs shared by the benchmarks.

use bigsql_core::metrics::MetricRecord;
use bigsql_core::resultset::{CellValue, Column, ColumnType, ResultTable};

/// A `rows`-row table with an integer key, a float measure and a text label.
pub fn table(rows: usize) -> ResultTable {
    let columns = vec![
        Column::new("id", ColumnType::Integer).unwrap(),
        Column::new("amount", ColumnType::Float).unwrap(),
        Column::new("label", ColumnType::Text).unwrap(),
    ];
    let data = (0..rows)
        .map(|i| {
            vec![
                CellValue::Integer(i as i64),
                CellValue::Float((i * 7919 % 10_007) as f64 / 3.0),
                CellValue::Text(format!("l{}", i % 97)),
            ]
        })
        .collect();
    ResultTable::new(columns, data).unwrap()
}

/// `table(rows)` with its rows reversed and an extra column in front.
pub fn shuffled_superset(rows: usize) -> ResultTable {
    let base = table(rows);
    let mut columns = vec![Column::new("extra", ColumnType::Integer).unwrap()];
    columns.extend(base.columns().iter().cloned());
    let data = base
        .rows()
        .iter()
        .rev()
        .map(|r| {
            let mut row = vec![CellValue::Integer(0)];
            row.extend(r.iter().cloned());
            row
        })
        .collect();
    ResultTable::new(columns, data).unwrap()
}

pub fn records(n: usize) -> Vec<MetricRecord> {
    (0..n)
        .map(|i| {
            let valid = i % 4 != 0;
            let t_gen = 0.5 + (i % 13) as f64 * 0.1;
            MetricRecord {
                case_id: format!("q{}", i % 50),
                run_id: (i / 50) as u32,
                indicator: valid as u8,
                exact_indicator: (valid && i % 3 == 0) as u8,
                precision: if i % 5 == 0 { 0.5 } else { 1.0 },
                t_gold: 0.4 + (i % 7) as f64 * 0.1,
                t_gen,
                t_e2e: t_gen + 5.0 + (i % 11) as f64,
                c_e2e: 0.002 + (i % 17) as f64 * 1e-4,
                valid,
            }
        })
        .collect()
}

pub fn sql_pairs(n: usize) -> Vec<(String, String)> {
    (0..n)
        .map(|i| {
            let golden = format!("SELECT a, SUM(b) AS total FROM t{} WHERE c = 'x y' GROUP BY a", i % 9);
            let generated = golden.to_lowercase().replace(' ', "  ");
            (golden, generated)
        })
        .collect()
}
