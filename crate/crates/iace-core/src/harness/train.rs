//! The training loop: deterministic sampling, batch-parallel gradients with
//! a fixed accumulation order, and AdamW updates.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{GradStore, Tape};
use crate::dataset::{load_episodes, read_manifest, EpisodeRecord, NormStats};
use crate::harness::{io_err, HarnessError, TrainConfig, TRAIN_RATE_HZ};
use crate::optim::AdamW;
use crate::policy::{
    standard_normal_vec, ActionChunk, ArmScope, Image, ObservationFrame, PolicyModel,
};
use crate::sim::mix_seed;

/// A manifest's episodes resident in memory, plus the shared statistics.
pub struct LoadedDataset {
    pub episodes: Vec<EpisodeRecord>,
    pub stats: NormStats,
    pub joints_per_arm: usize,
    pub img: (usize, usize, usize),
}

pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset, HarnessError> {
    let manifest = read_manifest(manifest_path)?;
    let episodes = load_episodes(&manifest)?;
    let first = episodes
        .first()
        .ok_or_else(|| HarnessError::Config("manifest lists no episodes".into()))?;
    if first.rate_hz != TRAIN_RATE_HZ {
        return Err(HarnessError::Config(format!(
            "episodes are at {} Hz, training expects {TRAIN_RATE_HZ} Hz",
            first.rate_hz
        )));
    }
    Ok(LoadedDataset {
        joints_per_arm: first.joints_per_arm,
        img: (first.img_height, first.img_width, first.img_channels),
        stats: manifest.stats,
        episodes,
    })
}

/// Build the observation of one stored frame.
pub fn frame_observation(ep: &EpisodeRecord, t: usize) -> Result<ObservationFrame, HarnessError> {
    let j = ep.joints_per_arm;
    let joints = ep.joints_at(t);
    let image = |cam: usize| {
        Image::new(
            ep.img_height,
            ep.img_width,
            ep.img_channels,
            ep.image_at(t, cam).to_vec(),
        )
    };
    Ok(ObservationFrame {
        joints_left: joints[..j].iter().map(|v| *v as f64).collect(),
        joints_right: joints[j..].iter().map(|v| *v as f64).collect(),
        wrist_left: image(0)?,
        wrist_right: image(1)?,
        top: image(2)?,
        front: image(3)?,
    })
}

/// The next `k` actions from frame `t`, last-action padded past the episode
/// tail.
pub fn target_chunk(ep: &EpisodeRecord, t: usize, k: usize) -> Result<ActionChunk, HarnessError> {
    let dims = ep.dims_per_frame();
    let mut data = Vec::with_capacity(k * dims);
    for row in 0..k {
        let src = (t + row).min(ep.frames - 1);
        data.extend(ep.actions_at(src).iter().map(|v| *v as f64));
    }
    Ok(ActionChunk::new(k, dims, ArmScope::Both, data)?)
}

#[derive(Clone, Debug)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_l1: f64,
    pub mean_kl: f64,
}

pub struct TrainOutcome {
    pub log: Vec<TrainLogEntry>,
    pub checkpoint: PathBuf,
}

struct SampleSpec {
    episode: usize,
    timestep: usize,
    noise: Vec<f64>,
}

/// Train a fresh model on the dataset. Deterministic under (config, data):
/// sampling and latent noise come from one seeded stream, and per-sample
/// gradients are reduced in sample order regardless of worker scheduling.
pub fn train(
    cfg: &TrainConfig,
    data: &LoadedDataset,
    out_checkpoint: &Path,
    log_path: Option<&Path>,
    mut progress: impl FnMut(&TrainLogEntry),
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let policy_cfg = cfg.to_policy_config(data.joints_per_arm, data.img);
    let mut model = PolicyModel::new(policy_cfg, data.stats.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 4, 0));
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut sum_loss = 0.0;
        let mut sum_l1 = 0.0;
        let mut sum_kl = 0.0;
        for step in 0..cfg.steps_per_epoch {
            // sampling and noise are drawn sequentially before the parallel
            // section so the stream is independent of worker scheduling
            let specs: Vec<SampleSpec> = (0..cfg.batch_size)
                .map(|_| {
                    let episode = rng.gen_range(0..data.episodes.len());
                    let timestep = rng.gen_range(0..data.episodes[episode].frames);
                    SampleSpec {
                        episode,
                        timestep,
                        noise: standard_normal_vec(cfg.z_dim, &mut rng),
                    }
                })
                .collect();

            let results: Vec<Result<(GradStore, f64, f64, f64), HarnessError>> = specs
                .par_iter()
                .map(|spec| {
                    let ep = &data.episodes[spec.episode];
                    let obs = frame_observation(ep, spec.timestep)?;
                    let target = target_chunk(ep, spec.timestep, cfg.chunk_len)?;
                    let mut tape = Tape::new();
                    let (total, l1, kl) = model.train_loss_nodes(
                        &mut tape,
                        &obs,
                        &target,
                        &spec.noise,
                        cfg.kl_weight,
                    )?;
                    let mut grads = GradStore::zeros_like(&model.params);
                    tape.backward(total, &mut grads);
                    Ok((
                        grads,
                        tape.value(total).data[0],
                        tape.value(l1).data[0],
                        tape.value(kl).data[0],
                    ))
                })
                .collect();

            let mut batch_grads: Option<GradStore> = None;
            let mut batch_loss = 0.0;
            for res in results {
                let (grads, loss, l1, kl) = res?;
                batch_loss += loss;
                sum_l1 += l1;
                sum_kl += kl;
                match &mut batch_grads {
                    Some(acc) => acc.accumulate(&grads),
                    slot => *slot = Some(grads),
                }
            }
            if !batch_loss.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    epoch,
                    step,
                    value: batch_loss,
                });
            }
            let mut grads = batch_grads.expect("non-empty batch");
            grads.scale(1.0 / cfg.batch_size as f64);
            opt.step(&mut model.params, &grads);
            sum_loss += batch_loss / cfg.batch_size as f64;
        }
        let samples = (cfg.steps_per_epoch * cfg.batch_size) as f64;
        let entry = TrainLogEntry {
            epoch,
            mean_loss: sum_loss / cfg.steps_per_epoch as f64,
            mean_l1: sum_l1 / samples,
            mean_kl: sum_kl / samples,
        };
        progress(&entry);
        log.push(entry);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            crate::policy::save_checkpoint(&model, out_checkpoint)?;
        }
    }

    crate::policy::save_checkpoint(&model, out_checkpoint)?;
    if let Some(path) = log_path {
        let mut text = String::from("epoch\tloss\tl1\tkl\n");
        for e in &log {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.epoch, e.mean_loss, e.mean_l1, e.mean_kl
            ));
        }
        std::fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(TrainOutcome {
        log,
        checkpoint: out_checkpoint.to_path_buf(),
    })
}
