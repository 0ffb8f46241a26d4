//! The four-variant ablation grid over both tasks.

use std::path::{Path, PathBuf};

use crate::harness::{
    evaluate, grid_csv, io_err, load_dataset, train, EvalReport, HarnessError, TrainConfig,
};
use crate::policy::{load_checkpoint, PolicyVariant};
use crate::sim::{task_by_name, SimConfig};

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub variant: PolicyVariant,
    pub task: &'static str,
    pub seed: u64,
}

/// Grid layout: all four variants x both tasks x the given seeds.
pub fn ablation_grid(seeds: &[u64]) -> Vec<RunSpec> {
    let mut runs = Vec::with_capacity(4 * 2 * seeds.len());
    for variant in PolicyVariant::all() {
        for task in ["handover", "bar_lift"] {
            for &seed in seeds {
                runs.push(RunSpec { variant, task, seed });
            }
        }
    }
    runs
}

/// Mean overall success with the coordination encoder enabled vs disabled on
/// one task, averaged over decoders and seeds.
pub fn ablation_direction(reports: &[EvalReport], task: &str) -> (f64, f64) {
    let mean = |want_iace: bool| {
        let rates: Vec<f64> = reports
            .iter()
            .filter(|r| {
                r.task == task
                    && PolicyVariant::parse(&r.variant)
                        .map(|v| v.iace == want_iace)
                        .unwrap_or(false)
            })
            .map(|r| r.success_rate())
            .collect();
        rates.iter().sum::<f64>() / rates.len().max(1) as f64
    };
    (mean(true), mean(false))
}

/// Train and evaluate the full grid. `manifests` maps task name to its
/// dataset manifest; each dataset is loaded once and shared across runs.
/// Emits per-run reports, per-run checkpoints, and the grid CSV in `out_dir`.
pub fn run_ablation(
    base: &TrainConfig,
    manifests: &[(String, PathBuf)],
    seeds: &[u64],
    out_dir: &Path,
    mut progress: impl FnMut(&RunSpec, &EvalReport),
) -> Result<Vec<EvalReport>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let runs = ablation_grid(seeds);
    let mut reports = Vec::with_capacity(runs.len());
    let sim = SimConfig::default();
    for (task_name, manifest) in manifests {
        let data = load_dataset(manifest)?;
        let task = task_by_name(task_name)?;
        for run in runs.iter().filter(|r| r.task == task_name.as_str()) {
            let mut cfg = base.clone();
            cfg.variant = run.variant;
            cfg.seed = run.seed;
            let tag = format!("{}_{}_s{}", run.task, run.variant.label(), run.seed);
            let ckpt = out_dir.join(format!("{tag}.ckpt"));
            let log = out_dir.join(format!("{tag}.log"));
            train(&cfg, &data, &ckpt, Some(&log), |_| {})?;
            let model = load_checkpoint(&ckpt)?;
            let report = evaluate(&model, &task, cfg.eval_episodes, run.seed, &cfg, &sim)?;
            report.save(&out_dir.join(format!("{tag}.report")))?;
            progress(run, &report);
            reports.push(report);
        }
    }
    let csv = grid_csv(&reports);
    std::fs::write(out_dir.join("grid.csv"), csv).map_err(io_err(&out_dir.join("grid.csv")))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SubScores;
    use crate::harness::EpisodeOutcome;

    #[test]
    fn grid_covers_exactly_four_variants_by_two_tasks() {
        let runs = ablation_grid(&[0, 1, 2]);
        assert_eq!(runs.len(), 4 * 2 * 3);
        for variant in PolicyVariant::all() {
            for task in ["handover", "bar_lift"] {
                let n = runs
                    .iter()
                    .filter(|r| r.variant == variant && r.task == task)
                    .count();
                assert_eq!(n, 3);
            }
        }
    }

    fn fake_report(task: &str, variant: PolicyVariant, wins: usize, n: usize) -> EvalReport {
        EvalReport {
            task: task.into(),
            variant: variant.label().into(),
            seed: 0,
            episodes: n,
            success_count: wins,
            subscore_counts: vec![],
            mean_latency_s: 0.01,
            outcomes: (0..n)
                .map(|i| EpisodeOutcome {
                    index: i,
                    subscores: SubScores { entries: vec![] },
                    success: i < wins,
                })
                .collect(),
        }
    }

    #[test]
    fn direction_means_split_by_iace() {
        let reports = vec![
            fake_report("bar_lift", PolicyVariant::SINGLE_IACE, 20, 25),
            fake_report("bar_lift", PolicyVariant::SPLIT_IACE, 15, 25),
            fake_report("bar_lift", PolicyVariant::SINGLE_PLAIN, 10, 25),
            fake_report("bar_lift", PolicyVariant::SPLIT_PLAIN, 5, 25),
            fake_report("handover", PolicyVariant::SINGLE_IACE, 0, 25),
        ];
        let (with, without) = ablation_direction(&reports, "bar_lift");
        assert!((with - 70.0).abs() < 1e-9);
        assert!((without - 30.0).abs() < 1e-9);
    }
}
