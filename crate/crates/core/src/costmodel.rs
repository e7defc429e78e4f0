//! Composes the end-to-end episode cost from token usage and engine runtime.
//!
//! Amounts are kept as integer picodollars so that ledger totals are exact
//! sums of their stage entries.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentTrace, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("no pricing entry for model {0:?}")]
    MissingPricing(String),
    #[error("invalid price for {what}: {value}")]
    InvalidPrice { what: String, value: f64 },
    #[error("accounting mismatch: trace used {used} tokens, ledger billed {billed}")]
    AccountingMismatch { used: u64, billed: u64 },
    #[error("failed to read pricing config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed pricing config: {0}")]
    Parse(String),
}

const PICOS_PER_DOLLAR: f64 = 1e12;

/// US dollars, stored as picodollars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Usd(u64);

impl Usd {
    pub const ZERO: Usd = Usd(0);

    pub fn from_picos(picos: u64) -> Usd {
        Usd(picos)
    }

    pub fn from_dollars(dollars: f64) -> Usd {
        Usd((dollars.max(0.0) * PICOS_PER_DOLLAR).round() as u64)
    }

    pub fn picos(self) -> u64 {
        self.0
    }

    pub fn as_dollars(self) -> f64 {
        self.0 as f64 / PICOS_PER_DOLLAR
    }
}

impl Add for Usd {
    type Output = Usd;
    fn add(self, rhs: Usd) -> Usd {
        Usd(self.0 + rhs.0)
    }
}

impl AddAssign for Usd {
    fn add_assign(&mut self, rhs: Usd) {
        self.0 += rhs.0;
    }
}

impl Sum for Usd {
    fn sum<I: Iterator<Item = Usd>>(iter: I) -> Usd {
        iter.fold(Usd::ZERO, Add::add)
    }
}

impl fmt::Display for Usd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${:.6}", self.as_dollars())
    }
}

fn check_price(what: &str, value: f64) -> Result<(), CostError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(CostError::InvalidPrice {
            what: what.to_string(),
            value,
        })
    }
}

/// Per-million-token prices for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingEntry {
    #[serde(rename = "id")]
    pub model_id: String,
    #[serde(rename = "input_per_mtok")]
    pub input_price: f64,
    #[serde(rename = "output_per_mtok")]
    pub output_price: f64,
}

impl PricingEntry {
    pub fn new(model_id: &str, input_price: f64, output_price: f64) -> Result<Self, CostError> {
        let entry = PricingEntry {
            model_id: model_id.to_string(),
            input_price,
            output_price,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        check_price(&format!("{} input", self.model_id), self.input_price)?;
        check_price(&format!("{} output", self.model_id), self.output_price)
    }

    /// Picodollars per token: $1 per Mtok is 10^6 picodollars per token.
    fn per_token(price_per_mtok: f64) -> u64 {
        (price_per_mtok * 1e6).round() as u64
    }

    pub fn llm_cost(&self, input_tokens: u64, output_tokens: u64) -> Usd {
        Usd(input_tokens * Self::per_token(self.input_price)
            + output_tokens * Self::per_token(self.output_price))
    }
}

/// `input_tokens·input_price/1e6 + output_tokens·output_price/1e6`
pub fn llm_cost(entry: &PricingEntry, input_tokens: u64, output_tokens: u64) -> Usd {
    entry.llm_cost(input_tokens, output_tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineBillingMode {
    PerSecond,
    PerByteScanned,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnginePricing {
    pub mode: EngineBillingMode,
    #[serde(default)]
    pub rate: f64,
    /// Per-second rate used in per-byte mode when the engine does not report
    /// bytes scanned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_per_second: Option<f64>,
}

impl Default for EnginePricing {
    fn default() -> Self {
        EnginePricing::free()
    }
}

impl EnginePricing {
    pub fn free() -> Self {
        EnginePricing {
            mode: EngineBillingMode::Free,
            rate: 0.0,
            fallback_per_second: None,
        }
    }

    pub fn per_second(rate: f64) -> Self {
        EnginePricing {
            mode: EngineBillingMode::PerSecond,
            rate,
            fallback_per_second: None,
        }
    }

    pub fn per_byte(rate: f64) -> Self {
        EnginePricing {
            mode: EngineBillingMode::PerByteScanned,
            rate,
            fallback_per_second: None,
        }
    }

    pub fn validate(&mut self) -> Result<(), CostError> {
        check_price("engine rate", self.rate)?;
        if let Some(f) = self.fallback_per_second {
            check_price("engine fallback rate", f)?;
        }
        if self.mode == EngineBillingMode::Free {
            self.rate = 0.0;
            self.fallback_per_second = None;
        }
        Ok(())
    }
}

pub fn engine_cost(pricing: &EnginePricing, runtime_seconds: f64, bytes_scanned: Option<u64>) -> Usd {
    let seconds = runtime_seconds.max(0.0);
    match pricing.mode {
        EngineBillingMode::Free => Usd::ZERO,
        EngineBillingMode::PerSecond => Usd::from_dollars(pricing.rate * seconds),
        EngineBillingMode::PerByteScanned => match bytes_scanned {
            Some(bytes) => Usd::from_dollars(pricing.rate * bytes as f64),
            None => Usd::from_dollars(pricing.fallback_per_second.unwrap_or(0.0) * seconds),
        },
    }
}

/// Pricing config file: `{"models":[...],"engine":{...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingConfig {
    pub models: Vec<PricingEntry>,
    #[serde(default)]
    pub engine: EnginePricing,
}

impl PricingConfig {
    pub fn from_json_str(s: &str) -> Result<Self, CostError> {
        let mut config: PricingConfig =
            serde_json::from_str(s).map_err(|e| CostError::Parse(e.to_string()))?;
        for m in &config.models {
            m.validate()?;
        }
        config.engine.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path).map_err(|source| CostError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn lookup(&self, model_id: &str) -> Result<&PricingEntry, CostError> {
        self.models
            .iter()
            .find(|m| m.model_id == model_id)
            .ok_or_else(|| CostError::MissingPricing(model_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: Stage,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub llm_cost: Usd,
    pub engine_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_bytes: Option<u64>,
    pub engine_cost: Usd,
}

impl StageCost {
    fn empty(stage: Stage) -> Self {
        StageCost {
            stage,
            input_tokens: 0,
            output_tokens: 0,
            llm_cost: Usd::ZERO,
            engine_seconds: 0.0,
            engine_bytes: None,
            engine_cost: Usd::ZERO,
        }
    }

    pub fn total(&self) -> Usd {
        self.llm_cost + self.engine_cost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    /// One entry per stage, in [`Stage::ALL`] order.
    pub stages: Vec<StageCost>,
    pub total: Usd,
}

impl CostLedger {
    pub fn stage(&self, stage: Stage) -> &StageCost {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .expect("ledger carries every stage")
    }
}

/// Bills every iteration's token usage (controller and checker) to the stage
/// of the tool it invoked, and the generated query's engine time to the run
/// stage.
pub fn compose_ledger(
    trace: &AgentTrace,
    pricing: &PricingEntry,
    engine: &EnginePricing,
) -> Result<CostLedger, CostError> {
    let mut stages: Vec<StageCost> = Stage::ALL.iter().map(|s| StageCost::empty(*s)).collect();
    let slot = |stage: Stage| Stage::ALL.iter().position(|s| *s == stage).unwrap();

    for it in &trace.iterations {
        let entry = &mut stages[slot(it.action.stage())];
        entry.input_tokens += it.usage.input_tokens;
        entry.output_tokens += it.usage.output_tokens;
        if let Some(checker) = &it.checker_usage {
            entry.input_tokens += checker.input_tokens;
            entry.output_tokens += checker.output_tokens;
        }
        if let Some(secs) = it.engine_seconds {
            entry.engine_seconds += secs;
            entry.engine_cost += engine_cost(engine, secs, it.bytes_scanned);
            if let Some(b) = it.bytes_scanned {
                *entry.engine_bytes.get_or_insert(0) += b;
            }
        }
    }
    let tail = &mut stages[slot(Stage::Finalize)];
    tail.input_tokens += trace.tail_usage.input_tokens;
    tail.output_tokens += trace.tail_usage.output_tokens;

    for s in &mut stages {
        s.llm_cost = pricing.llm_cost(s.input_tokens, s.output_tokens);
    }

    let billed: u64 = stages.iter().map(|s| s.input_tokens + s.output_tokens).sum();
    let used = trace.usage_total.input_tokens + trace.usage_total.output_tokens;
    if billed != used {
        return Err(CostError::AccountingMismatch { used, billed });
    }
    let total = stages.iter().map(StageCost::total).sum();
    Ok(CostLedger { stages, total })
}
