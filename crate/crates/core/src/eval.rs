//! Model evaluation and run-output serialization: accuracy/loss metrics,
//! the CSV and JSON artifacts of a run, and atomic file writes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{empirical_risk, logits, ModelSpec, Sample, Target};
use crate::params::{checkpoint_path, save_checkpoint, ParamVec};
use crate::sim::{RoundRecord, RunArtifacts, SummaryRow};
use crate::theory::TheoryReport;

/// Metrics of one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Fraction of correct predictions.
    pub accuracy: f64,
    /// Mean loss, computed exactly like the training risk.
    pub mean_loss: f64,
    pub n_eval: usize,
}

/// Evaluates parameters on a dataset. Classification predicts the argmax
/// output, breaking ties toward the lowest class index; regression counts
/// a sample as correct when the output is within 0.5 of the target.
pub fn evaluate(params: &ParamVec, spec: &ModelSpec, data: &[Sample]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(CoreError::EmptyDataset("evaluation set".into()));
    }
    let mean_loss = empirical_risk(params, spec, data)?;
    let mut correct = 0usize;
    for s in data {
        let out = logits(params, spec, &s.x)?;
        let hit = match s.y {
            Target::Class(c) => {
                let mut best = 0usize;
                for (j, v) in out.iter().enumerate().skip(1) {
                    if *v > out[best] {
                        best = j;
                    }
                }
                best == c
            }
            Target::Value(v) => (out[0] - v).abs() <= 0.5,
        };
        if hit {
            correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss,
        n_eval: data.len(),
    })
}

/// Final-evaluation document of a run. Accuracies are NaN when the
/// corresponding test set is empty; NaN serializes to JSON `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    /// ID-test accuracy per active client, ascending id.
    pub per_client_id_acc: Vec<f64>,
    pub ood_acc: f64,
    /// ID-test accuracy of clients removed by the pretraining exit,
    /// ascending id.
    pub exited_client_acc: Vec<f64>,
}

/// Writes `bytes` to `path` through a temp file in the same directory,
/// renamed into place so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| CoreError::format(path, "path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

/// The per-round log as CSV, one row per client per round. Floats use the
/// shortest round-trip decimal form; degenerate contributions print as
/// `NaN`.
pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from("t,client_id,participated,staleness,contribution_hat,local_loss,local_penalty\n");
    for rec in records {
        for cr in &rec.per_client {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                rec.t, cr.id, cr.participated, cr.staleness, cr.contribution_hat, cr.local_loss, cr.local_penalty
            )
            .expect("string write cannot fail");
        }
    }
    out
}

/// The evaluation schedule as CSV, one row per summary point.
pub fn summary_csv(summaries: &[SummaryRow]) -> String {
    let mut out = String::from("t,global_loss,global_penalty_mean,id_acc,ood_acc\n");
    for row in summaries {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.t, row.global_loss, row.global_penalty_mean, row.id_acc, row.ood_acc
        )
        .expect("string write cannot fail");
    }
    out
}

/// Writes every artifact of a finished run into `dir`:
///
/// - `rounds.csv`, `summary.csv`
/// - `final_eval.json`
/// - `params_final.txt` plus `params_t{k}.txt` interval checkpoints
/// - `theory.json` when a report is supplied
///
/// All files go through [`write_atomic`]; rewriting the same run produces
/// byte-identical files.
pub fn write_outputs(
    dir: &Path,
    artifacts: &RunArtifacts,
    spec: &ModelSpec,
    theory: Option<&TheoryReport>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write_atomic(&dir.join("rounds.csv"), rounds_csv(&artifacts.records).as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(&artifacts.summaries).as_bytes())?;
    let final_eval = serde_json::to_string_pretty(&artifacts.final_eval)
        .map_err(|e| CoreError::Contract(format!("final evaluation failed to serialize: {e}")))?;
    write_atomic(&dir.join("final_eval.json"), final_eval.as_bytes())?;
    save_checkpoint(&checkpoint_path(dir, "final"), &spec.arch, &artifacts.final_params)?;
    for (t, params) in &artifacts.checkpoints {
        save_checkpoint(&checkpoint_path(dir, &format!("t{t}")), &spec.arch, params)?;
    }
    if let Some(report) = theory {
        let text = serde_json::to_string_pretty(report)
            .map_err(|e| CoreError::Contract(format!("theory report failed to serialize: {e}")))?;
        write_atomic(&dir.join("theory.json"), text.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Loss};
    use crate::sim::ClientRound;

    fn spec_logistic(d: usize, k: usize) -> ModelSpec {
        ModelSpec::new(
            Arch::Logistic {
                input_dim: d,
                num_classes: k,
            },
            Loss::CrossEntropy,
        )
        .unwrap()
    }

    #[test]
    fn classification_accuracy_counts_argmax() {
        let spec = spec_logistic(2, 2);
        // Weights that push class 1 when x0 > 0: W = [[0,0],[1,0]], b = 0.
        let params = ParamVec::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let data = vec![
            Sample::class(vec![1.0, 0.0], 1),
            Sample::class(vec![2.0, 0.0], 1),
            Sample::class(vec![1.0, 0.0], 0),
        ];
        let r = evaluate(&params, &spec, &data).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.n_eval, 3);
        let direct = empirical_risk(&params, &spec, &data).unwrap();
        assert_eq!(r.mean_loss.to_bits(), direct.to_bits());
    }

    #[test]
    fn argmax_ties_break_low() {
        let spec = spec_logistic(1, 3);
        // All-zero weights give identical logits; prediction must be class 0.
        let params = ParamVec::zeros(spec.d_model());
        let data = vec![
            Sample::class(vec![1.0], 0),
            Sample::class(vec![1.0], 1),
            Sample::class(vec![1.0], 2),
        ];
        let r = evaluate(&params, &spec, &data).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn regression_tolerance_is_half() {
        let spec = ModelSpec::new(Arch::Linear { input_dim: 1 }, Loss::SquaredError).unwrap();
        let params = ParamVec::new(vec![1.0]).unwrap();
        let data = vec![
            Sample::value(vec![1.0], 1.2),
            Sample::value(vec![1.0], 1.5),
            Sample::value(vec![1.0], 1.6),
        ];
        let r = evaluate(&params, &spec, &data).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let spec = spec_logistic(1, 2);
        let params = ParamVec::zeros(spec.d_model());
        assert!(matches!(
            evaluate(&params, &spec, &[]),
            Err(CoreError::EmptyDataset(_))
        ));
    }

    #[test]
    fn csv_headers_and_rows() {
        assert_eq!(
            rounds_csv(&[]),
            "t,client_id,participated,staleness,contribution_hat,local_loss,local_penalty\n"
        );
        assert_eq!(summary_csv(&[]), "t,global_loss,global_penalty_mean,id_acc,ood_acc\n");

        let rec = RoundRecord {
            t: 1,
            global_loss: 0.5,
            global_penalty_mean: 0.25,
            per_client: vec![
                ClientRound {
                    id: 0,
                    participated: true,
                    staleness: 0,
                    contribution_hat: 0.125,
                    local_loss: 0.5,
                    local_penalty: 0.0,
                },
                ClientRound {
                    id: 1,
                    participated: false,
                    staleness: 2,
                    contribution_hat: f64::NAN,
                    local_loss: 1.5,
                    local_penalty: 0.25,
                },
            ],
            id_acc: None,
            ood_acc: None,
        };
        let text = rounds_csv(&[rec]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "1,0,true,0,0.125,0.5,0");
        assert_eq!(lines[2], "1,1,false,2,NaN,1.5,0.25");

        let row = SummaryRow {
            t: 10,
            global_loss: 0.0625,
            global_penalty_mean: 0.001,
            id_acc: 0.9,
            ood_acc: f64::NAN,
        };
        let text = summary_csv(&[row]);
        assert_eq!(text.lines().nth(1).unwrap(), "10,0.0625,0.001,0.9,NaN");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn final_eval_round_trips_json() {
        let fe = FinalEval {
            per_client_id_acc: vec![0.5, 1.0],
            ood_acc: 0.75,
            exited_client_acc: vec![],
        };
        let text = serde_json::to_string_pretty(&fe).unwrap();
        let back: FinalEval = serde_json::from_str(&text).unwrap();
        assert_eq!(back, fe);
        assert!(text.contains("\"per_client_id_acc\""));
    }
}
