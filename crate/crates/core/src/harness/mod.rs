//! Experiment plumbing on top of the trainer: ablation grids, accuracy
//! curves and planted-clue recovery.

pub mod ablation;
pub mod curves;
pub mod recovery;

pub use crate::model::AblationMode;
pub use ablation::{full_grid, parse_modes, run_ablation, AblationReport, AblationRow, WiringCheck};
pub use curves::{emit_curves, CurvesSummary};
pub use recovery::{clue_recovery, recovery_from_selections, RecoveryReport};
