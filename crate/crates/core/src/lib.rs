//! Offline evaluation harness for text-to-SQL agents over large analytical
//! databases: a ReAct agent, per-stage time and cost instrumentation, and
//! correctness/efficiency/cost metrics.

pub mod agent;
pub mod costmodel;
pub mod engine;
pub mod llmclient;
pub mod metrics;
pub mod report;
pub mod resultset;
pub mod runner;
pub mod suite;

pub use agent::{run_agent, stage_breakdown, Action, AgentConfig, AgentTrace, Outcome, Stage, ToolId};
pub use costmodel::{compose_ledger, CostLedger, EnginePricing, PricingConfig, PricingEntry, Usd};
pub use engine::{open_session, EngineAdapter, EngineConfig, SqliteEngine};
pub use llmclient::{LlmBackend, ReplayBackend, TokenUsage};
pub use metrics::{aggregate, MetricRecord, SuiteMetrics};
pub use resultset::{CellValue, Column, ColumnType, CompareOptions, ResultTable};
