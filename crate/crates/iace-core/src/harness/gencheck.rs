//! Gradient verification of every architecture variant at the smallest
//! configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GradStore, ParamId, ParamStore, Tape};
use crate::dataset::NormStats;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::harness::HarnessError;
use crate::policy::{
    standard_normal_vec, ActionChunk, ArmScope, Image, ObservationFrame, PolicyConfig,
    PolicyModel, PolicyVariant,
};

/// KL weight used by the checker. Kept small so the scalar loss stays below
/// 1/2: the tolerance implies ~1e-12 absolute agreement for tiny gradients,
/// which requires the loss value's own f64 quantum to stay below that noise
/// budget.
pub const GRADCHECK_KL_WEIGHT: f64 = 0.5;

/// Deterministic synthetic observation for a model configuration.
pub fn synthetic_observation(cfg: &PolicyConfig, seed: u64) -> ObservationFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = || {
        let px = (0..cfg.img_height * cfg.img_width * cfg.img_channels)
            .map(|_| rng.gen::<f32>())
            .collect();
        Image::new(cfg.img_height, cfg.img_width, cfg.img_channels, px)
            .expect("synthetic image dims")
    };
    let wrist_left = img();
    let wrist_right = img();
    let top = img();
    let front = img();
    let mut joints = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    };
    ObservationFrame {
        joints_left: joints(cfg.joints_per_arm),
        joints_right: joints(cfg.joints_per_arm),
        wrist_left,
        wrist_right,
        top,
        front,
    }
}

/// Target placed a fixed offset away from the model's own prediction, so no
/// L1 term sits at its non-differentiable kink within the finite-difference
/// window.
fn offset_target(model: &PolicyModel, obs: &ObservationFrame) -> Result<ActionChunk, HarnessError> {
    let pred = model.infer(obs)?;
    let data: Vec<f64> = pred
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % 2 == 0 { 0.2 } else { -0.2 })
        .collect();
    Ok(ActionChunk::new(
        pred.horizon(),
        pred.dims(),
        ArmScope::Both,
        data,
    )?)
}

pub struct VariantGradCheck {
    pub variant: PolicyVariant,
    pub report: GradCheckReport,
}

/// Run the finite-difference check for all four variants at the smallest
/// configuration. `inject_fault` corrupts one analytic gradient first and is
/// the harness self-test: the run must then fail.
pub fn gradcheck_all(
    epsilon: f64,
    tolerance: f64,
    inject_fault: bool,
) -> Result<Vec<VariantGradCheck>, HarnessError> {
    let mut out = Vec::with_capacity(4);
    for variant in PolicyVariant::all() {
        let cfg = PolicyConfig::smallest(variant);
        let mut model = PolicyModel::new(cfg.clone(), NormStats::identity(2 * cfg.joints_per_arm), 71)?;
        let obs = synthetic_observation(&cfg, 73);
        let target = offset_target(&model, &obs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let noise = standard_normal_vec(cfg.z_dim, &mut rng);

        let mut tape = Tape::new();
        let (total, _, _) =
            model.train_loss_nodes(&mut tape, &obs, &target, &noise, GRADCHECK_KL_WEIGHT)?;
        let mut grads = GradStore::zeros_like(&model.params);
        tape.backward(total, &mut grads);
        if inject_fault {
            // corrupt a tensor small enough to be checked exhaustively
            let victim = (0..model.params.len())
                .map(ParamId)
                .find(|id| model.params.get(*id).len() <= crate::gradcheck::COORDS_PER_TENSOR)
                .expect("some small tensor exists");
            grads.get_mut(victim).data[0] += 0.25;
        }

        let stats = model.stats.clone();
        let cfg2 = cfg.clone();
        let obs2 = obs.clone();
        let target2 = target.clone();
        let noise2 = noise.clone();
        let mut loss_fn = move |ps: &ParamStore| {
            let mut m = PolicyModel::new(cfg2.clone(), stats.clone(), 71).expect("rebuild");
            m.params = ps.clone();
            let mut t = Tape::new();
            let (l, _, _) = m
                .train_loss_nodes(&mut t, &obs2, &target2, &noise2, GRADCHECK_KL_WEIGHT)
                .expect("loss eval");
            t.value(l).data[0]
        };
        let report = grad_check(&mut model.params, &mut loss_fn, &grads, epsilon, tolerance, 91)
            .map_err(|e| HarnessError::GradCheck(e.to_string()))?;
        out.push(VariantGradCheck { variant, report });
    }
    Ok(out)
}
