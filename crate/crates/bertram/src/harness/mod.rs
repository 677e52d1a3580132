//! Evaluation harness: cloze probing with MRR, embedding injection, and
//! downstream accuracy over rarified test sets.

pub mod downstream;
pub mod inject;
pub mod probe;
pub mod report;

pub use downstream::{eval_downstream, EvalConfig, InjectionStrategy};
pub use inject::{adjust_position, inject_replace, inject_slash, Injection, Span};
pub use probe::{load_probes, mrr, run_probe, save_probes, ClozeProbe, ProbeOutcome, ProbeRunConfig};
pub use report::{write_csv, write_json, EvalReport, SliceScore};
