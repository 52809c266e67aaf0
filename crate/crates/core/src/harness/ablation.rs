//! Train-and-evaluate over a list of [`AblationMode`]s with shared seed and
//! data order, plus the structural wiring checks for every variant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention_core::AttentionMode;
use crate::clue_aggregator::{ElementFusion, LefTerm};
use crate::error::{McdError, Result};
use crate::feature_store::{Dataset, Split};
use crate::json::write_json_pretty;
use crate::layers::{Forward, Mode};
use crate::model::{AblationMode, Fusion, LossTerm, Mcd};
use crate::trainer::eval::eval_batches;
use crate::trainer::{evaluate, fit, make_batch, EvalReport, RunConfig, TRACE_FILE};

use super::curves::{emit_curves, CurvesSummary};

pub const ABLATION_REPORT: &str = "ablation_report.json";

/// Default, every attention mode, the late-fusion variants, add-only element
/// fusion, each single loss drop and each single element-fusion drop.
/// Duplicates of the default are removed.
pub fn full_grid() -> Vec<AblationMode> {
    let mut grid = vec![AblationMode::default()];
    let mut push = |m: AblationMode| {
        if !grid.contains(&m) {
            grid.push(m);
        }
    };
    for attention in AttentionMode::ALL {
        push(AblationMode {
            attention,
            ..Default::default()
        });
    }
    for fusion in Fusion::ALL {
        push(AblationMode {
            fusion,
            ..Default::default()
        });
    }
    for element_fusion in ElementFusion::ALL {
        push(AblationMode {
            element_fusion,
            ..Default::default()
        });
    }
    for term in LossTerm::ALL {
        push(AblationMode {
            loss_drop: [term].into(),
            ..Default::default()
        });
    }
    for term in LefTerm::ALL {
        push(AblationMode {
            lef_drop: [term].into(),
            ..Default::default()
        });
    }
    grid
}

/// Parses every label before anything runs, so a typo fails fast.
pub fn parse_modes<S: AsRef<str>>(labels: &[S]) -> Result<Vec<AblationMode>> {
    labels
        .iter()
        .map(|s| {
            let m: AblationMode = s.as_ref().parse()?;
            m.validate()?;
            Ok(m)
        })
        .collect()
}

/// File-system friendly form of a mode label.
pub fn mode_slug(mode: &AblationMode) -> String {
    mode.label()
        .chars()
        .map(|c| match c {
            '=' => '-',
            ',' => '_',
            '+' => '.',
            c => c,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WiringCheck {
    pub head_input_width: usize,
    pub expected_head_input_width: usize,
    pub fusion_input_width: usize,
    pub expected_fusion_input_width: usize,
    pub stack_bypassed: bool,
    /// For `attention=off`: whether the stack output equals its input.
    pub bypass_identity: Option<bool>,
    pub passed: bool,
}

/// Structural audit of `model` against what its mode promises.
pub fn check_wiring(model: &Mcd, ds: &Dataset) -> Result<WiringCheck> {
    let d = model.shape.dim;
    let w = model.wiring();
    let mode = &model.config.ablation;
    let expected_fusion = if mode.fusion == Fusion::Concat { 3 * d } else { d };
    let off = mode.attention == AttentionMode::Off;
    let bypass_identity = if off {
        let idx = [Split::Test, Split::Val, Split::Train]
            .into_iter()
            .find_map(|s| eval_batches(ds, s, 8).into_iter().next())
            .ok_or(McdError::EmptySplit { split: "any".into() })?;
        let batch = make_batch(ds, &idx)?;
        let mut fw = Forward::new(&model.store, Mode::Eval, 0);
        let out = model.forward(&mut fw, &batch)?;
        let g = &fw.g;
        Some(
            g.value(out.stack_visual).max_abs_diff(g.value(out.input_visual)) == 0.0
                && g.value(out.stack_audio).max_abs_diff(g.value(out.input_audio)) == 0.0,
        )
    } else {
        None
    };
    let passed = w.head_input_width == d
        && w.fusion_input_width == expected_fusion
        && w.stack_bypassed == off
        && bypass_identity != Some(false);
    Ok(WiringCheck {
        head_input_width: w.head_input_width,
        expected_head_input_width: d,
        fusion_input_width: w.fusion_input_width,
        expected_fusion_input_width: expected_fusion,
        stack_bypassed: w.stack_bypassed,
        bypass_identity,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub ablation: AblationMode,
    pub wiring: WiringCheck,
    pub best_val_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    /// Test report of the last-epoch model.
    pub test: EvalReport,
    pub trace_file: Option<PathBuf>,
}

/// Test accuracy of each late-fusion variant minus the fusion-free default.
/// Informational: a negative delta means late fusion hurt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateFusionComparison {
    pub none: f64,
    pub concat_delta: Option<f64>,
    pub add_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_config_fingerprint: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub wiring_passed: bool,
    pub late_fusion: Option<LateFusionComparison>,
    pub curves: Option<CurvesSummary>,
}

impl AblationReport {
    pub fn row(&self, mode: &AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| &r.ablation == mode)
    }

    fn late_fusion(rows: &[AblationRow]) -> Option<LateFusionComparison> {
        let acc = |fusion| {
            let m = AblationMode {
                fusion,
                ..Default::default()
            };
            rows.iter().find(|r| r.ablation == m).map(|r| r.test.overall)
        };
        let none = acc(Fusion::None)?;
        Some(LateFusionComparison {
            none,
            concat_delta: acc(Fusion::Concat).map(|a| a - none),
            add_delta: acc(Fusion::Add).map(|a| a - none),
        })
    }
}

/// One `fit` per mode on `base` with only the ablation swapped. With
/// `out_dir`, each mode's artifacts go to `out_dir/<slug>/`, curves to
/// `out_dir/curves*` and the report to [`ABLATION_REPORT`].
pub fn run_ablation(ds: &Dataset, base: &RunConfig, modes: &[AblationMode], out_dir: Option<&Path>) -> Result<AblationReport> {
    if modes.is_empty() {
        return Err(McdError::Config("no ablation modes requested".into()));
    }
    let configs = modes
        .iter()
        .map(|m| {
            let mut cfg = base.clone();
            cfg.model.ablation = m.clone();
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(modes.len());
    for cfg in &configs {
        let mode = &cfg.model.ablation;
        log::info!("ablation mode {}", mode.label());
        let dir = out_dir.map(|d| d.join(mode_slug(mode)));
        let outcome = fit(ds, cfg, dir.as_deref())?;
        let best = outcome.trace.epochs.get(outcome.best_epoch);
        rows.push(AblationRow {
            mode: mode.label(),
            ablation: mode.clone(),
            wiring: check_wiring(&outcome.last, ds)?,
            best_val_epoch: outcome.best_epoch,
            best_val_accuracy: best.and_then(|e| e.val_accuracy),
            test: evaluate(&outcome.last, ds, Split::Test, cfg)?,
            trace_file: dir.map(|d| d.join(TRACE_FILE)),
        });
    }
    let curves = match out_dir {
        Some(d) => {
            let traces: Vec<PathBuf> = rows.iter().filter_map(|r| r.trace_file.clone()).collect();
            Some(emit_curves(&traces, d)?)
        }
        None => None,
    };
    let report = AblationReport {
        base_config_fingerprint: base.fingerprint(),
        seed: base.train.seed,
        wiring_passed: rows.iter().all(|r| r.wiring.passed),
        late_fusion: AblationReport::late_fusion(&rows),
        rows,
        curves,
    };
    if let Some(d) = out_dir {
        write_json_pretty(&d.join(ABLATION_REPORT), &report)?;
    }
    Ok(report)
}
