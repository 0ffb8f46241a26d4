//! Closed-loop evaluation: temporal-ensembled policy rollouts in the
//! simulator, scored by the task's success predicate.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::SubScores;
use crate::ensemble::EnsembleBuffer;
use crate::harness::{io_err, HarnessError, TrainConfig, TRAIN_RATE_HZ};
use crate::policy::PolicyModel;
use crate::sim::{
    init_world, mix_seed, observe, step, streams, success, SimConfig, TaskSpec, JOINTS_PER_ARM,
};

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub index: usize,
    pub subscores: SubScores,
    pub success: bool,
}

/// Per-task, per-variant success tallies plus inference latency.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub task: String,
    pub variant: String,
    pub seed: u64,
    pub episodes: usize,
    pub success_count: usize,
    pub subscore_counts: Vec<(String, usize)>,
    /// Mean wall-clock seconds per control action (forward + ensemble).
    pub mean_latency_s: f64,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        100.0 * self.success_count as f64 / self.episodes.max(1) as f64
    }

    pub fn subscore_rate(&self, name: &str) -> Option<f64> {
        self.subscore_counts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| 100.0 * *c as f64 / self.episodes.max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut text = String::new();
        text.push_str(&format!("task:{}\n", self.task));
        text.push_str(&format!("variant:{}\n", self.variant));
        text.push_str(&format!("seed:{}\n", self.seed));
        text.push_str(&format!("episodes:{}\n", self.episodes));
        text.push_str(&format!("success_count:{}\n", self.success_count));
        text.push_str(&format!("mean_latency_s:{}\n", self.mean_latency_s));
        for (name, count) in &self.subscore_counts {
            text.push_str(&format!("subscore:{name}:{count}\n"));
        }
        for o in &self.outcomes {
            let subs: Vec<String> = o
                .subscores
                .entries
                .iter()
                .map(|(n, v)| format!("{n}={}", u8::from(*v)))
                .collect();
            text.push_str(&format!(
                "outcome:{}:{}:{}\n",
                o.index,
                u8::from(o.success),
                subs.join(",")
            ));
        }
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<EvalReport, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut report = EvalReport {
            task: String::new(),
            variant: String::new(),
            seed: 0,
            episodes: 0,
            success_count: 0,
            subscore_counts: Vec::new(),
            mean_latency_s: 0.0,
            outcomes: Vec::new(),
        };
        for line in text.lines() {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| HarnessError::Config(format!("bad report line: {line}")))?;
            let bad = || HarnessError::Config(format!("bad report line: {line}"));
            match key {
                "task" => report.task = value.to_string(),
                "variant" => report.variant = value.to_string(),
                "seed" => report.seed = value.parse().map_err(|_| bad())?,
                "episodes" => report.episodes = value.parse().map_err(|_| bad())?,
                "success_count" => report.success_count = value.parse().map_err(|_| bad())?,
                "mean_latency_s" => report.mean_latency_s = value.parse().map_err(|_| bad())?,
                "subscore" => {
                    let (name, count) = value.split_once(':').ok_or_else(bad)?;
                    report
                        .subscore_counts
                        .push((name.to_string(), count.parse().map_err(|_| bad())?));
                }
                "outcome" => {
                    let mut parts = value.splitn(3, ':');
                    let index: usize =
                        parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                    let succ = parts.next().ok_or_else(bad)? == "1";
                    let subs = parts.next().ok_or_else(bad)?;
                    let entries = subs
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.split_once('=')
                                .map(|(n, v)| (n.to_string(), v == "1"))
                                .ok_or_else(bad)
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    report.outcomes.push(EpisodeOutcome {
                        index,
                        subscores: SubScores { entries },
                        success: succ,
                    });
                }
                _ => return Err(HarnessError::Config(format!("unknown report key: {key}"))),
            }
        }
        Ok(report)
    }
}

/// Roll out `episodes` seeded evaluation episodes. Initial states come from
/// the evaluation stream, disjoint from demonstration seeds. Each control
/// tick runs at the training rate; every action is held for the matching
/// number of simulator steps.
pub fn evaluate(
    model: &PolicyModel,
    task: &TaskSpec,
    episodes: usize,
    seed: u64,
    cfg: &TrainConfig,
    sim: &SimConfig,
) -> Result<EvalReport, HarnessError> {
    if model.config.joints_per_arm != JOINTS_PER_ARM
        || model.config.img_height != sim.img_height
        || model.config.img_width != sim.img_width
        || model.config.img_channels != sim.img_channels
    {
        return Err(HarnessError::Config(format!(
            "checkpoint/task mismatch: model is J={} {}x{}x{}, simulator provides J={} {}x{}x{}",
            model.config.joints_per_arm,
            model.config.img_height,
            model.config.img_width,
            model.config.img_channels,
            JOINTS_PER_ARM,
            sim.img_height,
            sim.img_width,
            sim.img_channels
        )));
    }
    let factor = (sim.sim_hz / TRAIN_RATE_HZ).max(1) as usize;
    let ticks = task.episode_len / factor;
    let results: Vec<Result<(EpisodeOutcome, f64), HarnessError>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut world = init_world(task, sim, mix_seed(seed, streams::EVAL, i as u64));
            let mut buffer = EnsembleBuffer::new(cfg.chunk_len, cfg.ensemble_decay);
            let mut trajectory = Vec::with_capacity(task.episode_len + 1);
            trajectory.push(world.clone());
            let mut latency = 0.0;
            let mut actions_taken = 0usize;
            for tick in 0..ticks {
                let obs = observe(&world, sim);
                let t0 = Instant::now();
                if tick % cfg.ensemble_stride == 0 {
                    let chunk = model.infer(&obs)?;
                    buffer
                        .push_chunk(tick as i64, chunk)
                        .map_err(|e| HarnessError::Config(e.to_string()))?;
                }
                let action = buffer
                    .ensemble_action(tick as i64)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                latency += t0.elapsed().as_secs_f64();
                actions_taken += 1;
                let j = JOINTS_PER_ARM;
                for _ in 0..factor {
                    world = step(&world, &action[..j], &action[j..], sim)?;
                    trajectory.push(world.clone());
                }
            }
            let subscores = success(&trajectory, task, sim);
            Ok((
                EpisodeOutcome {
                    index: i,
                    success: subscores.overall(),
                    subscores,
                },
                latency / actions_taken.max(1) as f64,
            ))
        })
        .collect();

    let mut outcomes = Vec::with_capacity(episodes);
    let mut latency_sum = 0.0;
    for r in results {
        let (o, lat) = r?;
        latency_sum += lat;
        outcomes.push(o);
    }
    let success_count = outcomes.iter().filter(|o| o.success).count();
    let mut subscore_counts: Vec<(String, usize)> = Vec::new();
    for o in &outcomes {
        for (name, v) in &o.subscores.entries {
            match subscore_counts.iter_mut().find(|(n, _)| n == name) {
                Some((_, c)) => *c += usize::from(*v),
                None => subscore_counts.push((name.clone(), usize::from(*v))),
            }
        }
    }
    Ok(EvalReport {
        task: task.name.to_string(),
        variant: model.config.variant.label().to_string(),
        seed,
        episodes,
        success_count,
        subscore_counts,
        mean_latency_s: latency_sum / episodes.max(1) as f64,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormStats;
    use crate::policy::{PolicyConfig, PolicyVariant};
    use crate::sim::task_by_name;

    #[test]
    fn untrained_policy_scores_near_zero() {
        let sim = SimConfig::default();
        let task = task_by_name("handover").unwrap();
        let pcfg = PolicyConfig {
            chunk_len: 20,
            ..PolicyConfig::smallest(PolicyVariant::SINGLE_IACE)
        };
        let model = PolicyModel::new(pcfg, NormStats::identity(8), 3).unwrap();
        let cfg = TrainConfig {
            chunk_len: 20,
            ..TrainConfig::default()
        };
        let report = evaluate(&model, &task, 4, 99, &cfg, &sim).unwrap();
        assert_eq!(report.episodes, 4);
        assert!(report.success_rate() < 26.0, "random policy succeeded?");
        assert!(report.mean_latency_s > 0.0);
    }

    #[test]
    fn report_roundtrips_through_disk() {
        let report = EvalReport {
            task: "bar_lift".into(),
            variant: "split-iace".into(),
            seed: 7,
            episodes: 2,
            success_count: 1,
            subscore_counts: vec![("grasp_both".into(), 2), ("place".into(), 1)],
            mean_latency_s: 0.0123,
            outcomes: vec![
                EpisodeOutcome {
                    index: 0,
                    subscores: SubScores {
                        entries: vec![("grasp_both".into(), true), ("place".into(), true)],
                    },
                    success: true,
                },
                EpisodeOutcome {
                    index: 1,
                    subscores: SubScores {
                        entries: vec![("grasp_both".into(), true), ("place".into(), false)],
                    },
                    success: false,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        report.save(&path).unwrap();
        let back = EvalReport::load(&path).unwrap();
        assert_eq!(back.task, report.task);
        assert_eq!(back.success_count, 1);
        assert_eq!(back.outcomes.len(), 2);
        assert_eq!(back.subscore_counts, report.subscore_counts);
        assert_eq!(back.mean_latency_s, report.mean_latency_s);
    }

    #[test]
    fn mismatched_model_rejected() {
        let sim = SimConfig::default();
        let task = task_by_name("handover").unwrap();
        let mut pcfg = PolicyConfig::smallest(PolicyVariant::SINGLE_IACE);
        pcfg.joints_per_arm = 3;
        let model = PolicyModel::new(pcfg, NormStats::identity(6), 3).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            evaluate(&model, &task, 1, 0, &cfg, &sim),
            Err(HarnessError::Config(_))
        ));
    }
}
