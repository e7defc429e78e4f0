//! Scalar metrics: EM, EA, EX, VES, VES*, VCES and CVQ, plus their
//! aggregation over a suite.
//!
//! Failed queries contribute zero to VES-family means rather than being
//! excluded, so every mean is over all `N` records.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("degenerate timing for valid record {case_id}: {field} is zero")]
    DegenerateTiming { case_id: String, field: &'static str },
    #[error("degenerate cost for valid record {case_id}: c_e2e is zero")]
    DegenerateCost { case_id: String },
    #[error("validity rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error("cannot aggregate an empty suite")]
    EmptySuite,
    #[error("cannot normalize: best value is zero")]
    NormalizationDegenerate,
    #[error("cannot normalize an empty value set")]
    NothingToNormalize,
    #[error("invalid metric record {case_id}: {reason}")]
    InvalidRecord { case_id: String, reason: String },
}

/// Per-(case, run) measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub case_id: String,
    pub run_id: u32,
    /// Containment indicator, 0 or 1.
    pub indicator: u8,
    /// Strict result-equality indicator used by EA, 0 or 1.
    pub exact_indicator: u8,
    pub precision: f64,
    pub t_gold: f64,
    pub t_gen: f64,
    pub t_e2e: f64,
    /// End-to-end cost in USD.
    pub c_e2e: f64,
    pub valid: bool,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |reason: &str| {
            Err(MetricsError::InvalidRecord {
                case_id: self.case_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.indicator > 1 || self.exact_indicator > 1 {
            return bad("indicators must be 0 or 1");
        }
        if self.valid != (self.indicator == 1) {
            return bad("valid must equal indicator == 1");
        }
        if !(0.0..=1.0).contains(&self.precision) {
            return bad("precision outside [0, 1]");
        }
        if !(self.t_gold > 0.0) {
            return bad("t_gold must be positive");
        }
        if !(self.t_gen >= 0.0 && self.t_e2e >= self.t_gen) {
            return bad("timings must satisfy t_e2e >= t_gen >= 0");
        }
        if !(self.c_e2e >= 0.0) {
            return bad("c_e2e must be non-negative");
        }
        Ok(())
    }
}

/// `𝟙 · T_gold / T_gen`
pub fn ves_per_query(r: &MetricRecord) -> Result<f64, MetricsError> {
    if r.indicator == 0 {
        return Ok(0.0);
    }
    if r.t_gen == 0.0 {
        return Err(MetricsError::DegenerateTiming {
            case_id: r.case_id.clone(),
            field: "t_gen",
        });
    }
    Ok(r.t_gold / r.t_gen)
}

/// `𝟙 · P · T_gold / T_e2e`
pub fn ves_star_per_query(r: &MetricRecord) -> Result<f64, MetricsError> {
    if r.indicator == 0 {
        return Ok(0.0);
    }
    if r.t_e2e == 0.0 {
        return Err(MetricsError::DegenerateTiming {
            case_id: r.case_id.clone(),
            field: "t_e2e",
        });
    }
    Ok(r.precision * r.t_gold / r.t_e2e)
}

/// VES* term divided by the end-to-end cost.
pub fn vces_per_query(r: &MetricRecord) -> Result<f64, MetricsError> {
    if r.indicator == 0 {
        return Ok(0.0);
    }
    if r.c_e2e == 0.0 {
        return Err(MetricsError::DegenerateCost {
            case_id: r.case_id.clone(),
        });
    }
    Ok(ves_star_per_query(r)? / r.c_e2e)
}

/// Expected cost per valid query under retry-until-success. `None` when no
/// attempt is ever valid.
pub fn cvq(mean_c_e2e: f64, p_hat: f64) -> Result<Option<f64>, MetricsError> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(MetricsError::InvalidRate(p_hat));
    }
    if p_hat == 0.0 {
        return Ok(None);
    }
    Ok(Some(mean_c_e2e / p_hat))
}

/// Renders an optional CVQ the way the report tables do.
pub fn format_cvq(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "--".to_string(),
    }
}

fn sql_keywords() -> &'static HashSet<&'static str> {
    static KEYWORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    KEYWORDS.get_or_init(|| {
        [
            "ALL", "AND", "ANY", "AS", "ASC", "BETWEEN", "BY", "CASE", "CAST", "CROSS", "DATE",
            "DESC", "DISTINCT", "ELSE", "END", "EXCEPT", "EXISTS", "EXTRACT", "FALSE", "FETCH",
            "FIRST", "FROM", "FULL", "GROUP", "HAVING", "IN", "INNER", "INTERSECT", "INTERVAL",
            "IS", "JOIN", "LEFT", "LIKE", "LIMIT", "NATURAL", "NOT", "NULL", "NULLS", "OFFSET",
            "ON", "OR", "ORDER", "OUTER", "OVER", "PARTITION", "RIGHT", "ROWS", "SELECT", "SOME",
            "SUBSTRING", "THEN", "TOP", "TRUE", "UNION", "USING", "VALUES", "WHEN", "WHERE",
            "WITH", "YEAR", "MONTH", "DAY",
        ]
        .into_iter()
        .collect()
    })
}

/// Collapses whitespace runs, trims, and upper-cases SQL keywords. String
/// literals and quoted identifiers are left untouched.
pub fn canonicalize_sql(sql: &str) -> String {
    let mut out = String::with_capacity(sql.len());
    let mut chars = sql.trim().chars().peekable();
    let mut pending_space = false;
    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        match c {
            '\'' | '"' | '`' => {
                out.push(c);
                while let Some(d) = chars.next() {
                    out.push(d);
                    if d == c {
                        // doubled quote is an escape, keep scanning
                        if chars.peek() == Some(&c) {
                            out.push(chars.next().unwrap());
                            continue;
                        }
                        break;
                    }
                }
            }
            c if c.is_alphanumeric() || c == '_' => {
                let mut word = String::from(c);
                while let Some(&d) = chars.peek() {
                    if d.is_alphanumeric() || d == '_' {
                        word.push(d);
                        chars.next();
                    } else {
                        break;
                    }
                }
                let upper = word.to_ascii_uppercase();
                if sql_keywords().contains(upper.as_str()) {
                    out.push_str(&upper);
                } else {
                    out.push_str(&word);
                }
            }
            c => out.push(c),
        }
    }
    out
}

/// 1 iff the two queries are identical after [`canonicalize_sql`].
pub fn exact_match(golden_sql: &str, generated_sql: &str) -> u8 {
    if golden_sql.trim().is_empty() || generated_sql.trim().is_empty() {
        return 0;
    }
    (canonicalize_sql(golden_sql) == canonicalize_sql(generated_sql)) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetrics {
    pub n: usize,
    pub em: f64,
    pub ea: f64,
    /// Mean containment indicator; identical to `p_hat`, kept under its
    /// table name.
    pub ex: f64,
    pub ves: f64,
    pub ves_star: f64,
    pub vces: f64,
    pub cvq: Option<f64>,
    pub p_hat: f64,
    pub mean_c_e2e: f64,
    pub mean_t_e2e: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Per-record VES, VES* and VCES values.
pub fn per_query_values(r: &MetricRecord) -> Result<(f64, f64, f64), MetricsError> {
    Ok((ves_per_query(r)?, ves_star_per_query(r)?, vces_per_query(r)?))
}

pub fn aggregate(
    records: &[MetricRecord],
    sql_pairs: &[(String, String)],
) -> Result<SuiteMetrics, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptySuite);
    }
    let n = records.len();
    let mut ves = Vec::with_capacity(n);
    let mut ves_star = Vec::with_capacity(n);
    let mut vces = Vec::with_capacity(n);
    for r in records {
        let (a, b, c) = per_query_values(r)?;
        ves.push(a);
        ves_star.push(b);
        vces.push(c);
    }
    let indicators: Vec<f64> = records.iter().map(|r| r.indicator as f64).collect();
    let exact: Vec<f64> = records.iter().map(|r| r.exact_indicator as f64).collect();
    let costs: Vec<f64> = records.iter().map(|r| r.c_e2e).collect();
    let times: Vec<f64> = records.iter().map(|r| r.t_e2e).collect();
    let em: Vec<f64> = sql_pairs
        .iter()
        .map(|(g, q)| exact_match(g, q) as f64)
        .collect();
    let p_hat = mean(&indicators);
    let mean_c_e2e = mean(&costs);
    Ok(SuiteMetrics {
        n,
        em: mean(&em),
        ea: mean(&exact),
        ex: p_hat,
        ves: mean(&ves),
        ves_star: mean(&ves_star),
        vces: mean(&vces),
        cvq: cvq(mean_c_e2e, p_hat)?,
        p_hat,
        mean_c_e2e,
        mean_t_e2e: mean(&times),
    })
}

/// Divides every value by the best one: the maximum when higher is better,
/// otherwise the minimum. The best entry maps to exactly 1.0.
pub fn normalize_to_best(
    values: &BTreeMap<String, f64>,
    higher_is_better: bool,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let best = values
        .values()
        .copied()
        .reduce(|a, b| {
            if higher_is_better {
                a.max(b)
            } else {
                a.min(b)
            }
        })
        .ok_or(MetricsError::NothingToNormalize)?;
    if best == 0.0 || !best.is_finite() {
        return Err(MetricsError::NormalizationDegenerate);
    }
    Ok(values
        .iter()
        .map(|(k, v)| {
            let norm = if *v == best { 1.0 } else { v / best };
            (k.clone(), norm)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(indicator: u8, precision: f64, t_gold: f64, t_gen: f64, t_e2e: f64, c: f64) -> MetricRecord {
        MetricRecord {
            case_id: "q".into(),
            run_id: 0,
            indicator,
            exact_indicator: indicator,
            precision,
            t_gold,
            t_gen,
            t_e2e,
            c_e2e: c,
            valid: indicator == 1,
        }
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("SELECT a FROM t", "SELECT a FROM t"), 1);
        assert_eq!(exact_match("SELECT a FROM t", "select  a from t"), 1);
        assert_eq!(exact_match("SELECT a FROM t", "SELECT b FROM t"), 0);
        // identifiers and literals keep their case
        assert_eq!(exact_match("SELECT A FROM t", "SELECT a FROM t"), 0);
        assert_eq!(exact_match("SELECT 'x  y' FROM t", "SELECT 'x y' FROM t"), 0);
        assert_eq!(exact_match("SELECT a FROM t", ""), 0);
    }

    #[test]
    fn canonical_form() {
        assert_eq!(
            canonicalize_sql("  select\n count(*)  from\tT where x = 'It''s  ok' "),
            "SELECT count(*) FROM T WHERE x = 'It''s  ok'"
        );
    }

    #[test]
    fn ves_examples() {
        assert_eq!(ves_per_query(&rec(1, 1.0, 2.0, 4.0, 4.0, 1.0)).unwrap(), 0.5);
        assert_eq!(ves_per_query(&rec(0, 1.0, 2.0, 0.0, 4.0, 1.0)).unwrap(), 0.0);
        assert_eq!(ves_per_query(&rec(1, 1.0, 3.0, 3.0, 3.0, 1.0)).unwrap(), 1.0);
        assert!(matches!(
            ves_per_query(&rec(1, 1.0, 2.0, 0.0, 4.0, 1.0)),
            Err(MetricsError::DegenerateTiming { field: "t_gen", .. })
        ));
    }

    #[test]
    fn ves_star_examples() {
        let v = ves_star_per_query(&rec(1, 2.0 / 3.0, 2.0, 1.0, 6.0, 1.0)).unwrap();
        assert!((v - 2.0 / 9.0).abs() < 1e-15);
        assert_eq!(ves_star_per_query(&rec(0, 1.0, 2.0, 1.0, 6.0, 1.0)).unwrap(), 0.0);
        assert_eq!(ves_star_per_query(&rec(1, 1.0, 2.0, 1.0, 2.0, 1.0)).unwrap(), 1.0);
        assert!(ves_star_per_query(&rec(1, 1.0, 2.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn vces_examples() {
        // T_gold/T_e2e = 0.5, C = $0.01 -> 50 per dollar
        let v = vces_per_query(&rec(1, 1.0, 1.0, 0.5, 2.0, 0.01)).unwrap();
        assert!((v - 50.0).abs() < 1e-12);
        assert_eq!(vces_per_query(&rec(0, 1.0, 1.0, 0.5, 2.0, 0.0)).unwrap(), 0.0);
        let doubled = vces_per_query(&rec(1, 1.0, 1.0, 0.5, 2.0, 0.02)).unwrap();
        assert!((doubled - v / 2.0).abs() < 1e-12);
        assert_eq!(
            vces_per_query(&rec(1, 1.0, 1.0, 0.5, 2.0, 0.0)),
            Err(MetricsError::DegenerateCost { case_id: "q".into() })
        );
    }

    #[test]
    fn cvq_examples() {
        assert!((cvq(0.01, 0.5).unwrap().unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(cvq(0.0044, 1.0).unwrap(), Some(0.0044));
        assert_eq!(cvq(0.0044, 0.0).unwrap(), None);
        assert_eq!(format_cvq(None), "--");
        assert_eq!(format_cvq(Some(0.0044)), "0.0044");
        assert_eq!(cvq(1.0, 1.5), Err(MetricsError::InvalidRate(1.5)));
        assert!(cvq(1.0, -0.1).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = rec(1, 1.0, 2.0, 1.0, 2.0, 0.01);
        let b = rec(0, 0.0, 2.0, 0.0, 3.0, 0.01);
        let m = aggregate(&[a.clone(), b], &[]).unwrap();
        assert_eq!(m.ves_star, 0.5);
        assert_eq!(m.p_hat, 0.5);
        assert!((m.cvq.unwrap() - 0.02).abs() < 1e-15);

        let runs: Vec<MetricRecord> = (0..10)
            .map(|i| rec(u8::from(i < 6), 1.0, 1.0, 1.0, 2.0, 0.01))
            .collect();
        assert!((aggregate(&runs, &[]).unwrap().p_hat - 0.6).abs() < 1e-15);

        let single = aggregate(std::slice::from_ref(&a), &[("SELECT 1".into(), "select 1".into())]).unwrap();
        assert_eq!(single.ves, ves_per_query(&a).unwrap());
        assert_eq!(single.ves_star, ves_star_per_query(&a).unwrap());
        assert_eq!(single.vces, vces_per_query(&a).unwrap());
        assert_eq!(single.em, 1.0);
        assert_eq!(aggregate(&[], &[]), Err(MetricsError::EmptySuite));
    }

    #[test]
    fn normalization_examples() {
        let values: BTreeMap<String, f64> = [("A".to_string(), 2.0), ("B".to_string(), 1.0)].into();
        let n = normalize_to_best(&values, true).unwrap();
        assert_eq!(n["A"], 1.0);
        assert_eq!(n["B"], 0.5);
        let e2e: BTreeMap<String, f64> = [("A".to_string(), 6.55), ("B".to_string(), 12.60)].into();
        let n = normalize_to_best(&e2e, false).unwrap();
        assert_eq!(n["A"], 1.0);
        assert_eq!(format!("{:.2}", n["B"]), "1.92");
        let one: BTreeMap<String, f64> = [("X".to_string(), 0.37)].into();
        assert_eq!(normalize_to_best(&one, true).unwrap()["X"], 1.0);
        let zero: BTreeMap<String, f64> = [("X".to_string(), 0.0)].into();
        assert_eq!(
            normalize_to_best(&zero, true),
            Err(MetricsError::NormalizationDegenerate)
        );
    }

    #[test]
    fn record_validation() {
        assert!(rec(1, 1.0, 1.0, 1.0, 2.0, 0.0).validate().is_ok());
        assert!(rec(1, 1.0, 0.0, 1.0, 2.0, 0.0).validate().is_err());
        assert!(rec(1, 1.0, 1.0, 3.0, 2.0, 0.0).validate().is_err());
        assert!(rec(1, 1.5, 1.0, 1.0, 2.0, 0.0).validate().is_err());
    }

    fn arb_record() -> impl Strategy<Value = MetricRecord> {
        (0u8..2, 0.01f64..1.0, 0.001f64..10.0, 0.001f64..10.0, 0.0f64..30.0, 0.0001f64..1.0)
            .prop_map(|(ind, p, tg, tgen, extra, c)| rec(ind, p, tg, tgen, tgen + extra, c))
    }

    proptest! {
        #[test]
        fn ves_star_bounded_by_ves(r in arb_record()) {
            prop_assert!(ves_star_per_query(&r).unwrap() <= ves_per_query(&r).unwrap());
        }

        #[test]
        fn cost_scaling(r in arb_record(), k in 0.1f64..10.0) {
            let mut scaled = r.clone();
            scaled.c_e2e *= k;
            let v = vces_per_query(&r).unwrap();
            let vs = vces_per_query(&scaled).unwrap();
            prop_assert!((vs - v / k).abs() <= 1e-9 * v.abs().max(1.0));
            prop_assert_eq!(ves_star_per_query(&scaled).unwrap(), ves_star_per_query(&r).unwrap());
            let c = cvq(r.c_e2e, 0.5).unwrap().unwrap();
            let cs = cvq(scaled.c_e2e, 0.5).unwrap().unwrap();
            prop_assert!((cs - c * k).abs() <= 1e-12 * cs.max(1.0));
        }

        #[test]
        fn time_scaling(r in arb_record(), k in 0.1f64..10.0) {
            let mut s = r.clone();
            s.t_gold *= k;
            s.t_gen *= k;
            s.t_e2e *= k;
            let tol = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
            prop_assert!(tol(ves_per_query(&s).unwrap(), ves_per_query(&r).unwrap()));
            prop_assert!(tol(ves_star_per_query(&s).unwrap(), ves_star_per_query(&r).unwrap()));
        }

        #[test]
        fn cvq_times_p_recovers_cost(c in 0.0f64..10.0, p in 0.01f64..1.0) {
            let v = cvq(c, p).unwrap().unwrap();
            prop_assert!((v * p - c).abs() <= 1e-12 * c.max(1e-12));
        }
    }
}
