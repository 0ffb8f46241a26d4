//! Segment-structured bimanual action-chunking policies.
//!
//! An observation is tokenized into three segments — left arm, right arm, and
//! a global scene segment — each headed by its own CLS token. Per-arm local
//! encoders see only their own arm's joint token and wrist camera; the
//! inter-arm coordination encoder (IACE) sees both joint tokens plus the
//! whole-scene cameras. Decoding is either a single decoder over everything
//! or one unshared decoder per arm, giving four architecture variants.

mod checkpoint;
pub(crate) mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{PolicyConfig, PolicyModel, SegmentedTokens};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which decoder emits the action chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    /// One decoder attends over everything and emits both arms' chunk.
    Single,
    /// Two unshared decoders, one per arm, concatenated left-then-right.
    Split,
}

/// One of the four architecture variants: single/split decoder crossed with
/// the coordination encoder enabled or disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PolicyVariant {
    pub decoder: DecoderMode,
    pub iace: bool,
}

impl PolicyVariant {
    pub const SINGLE_IACE: PolicyVariant = PolicyVariant {
        decoder: DecoderMode::Single,
        iace: true,
    };
    pub const SPLIT_IACE: PolicyVariant = PolicyVariant {
        decoder: DecoderMode::Split,
        iace: true,
    };
    pub const SINGLE_PLAIN: PolicyVariant = PolicyVariant {
        decoder: DecoderMode::Single,
        iace: false,
    };
    pub const SPLIT_PLAIN: PolicyVariant = PolicyVariant {
        decoder: DecoderMode::Split,
        iace: false,
    };

    /// All four variants, coordination-enabled pair first.
    pub fn all() -> [PolicyVariant; 4] {
        [
            Self::SINGLE_IACE,
            Self::SPLIT_IACE,
            Self::SINGLE_PLAIN,
            Self::SPLIT_PLAIN,
        ]
    }

    pub fn label(&self) -> &'static str {
        match (self.decoder, self.iace) {
            (DecoderMode::Single, true) => "single-iace",
            (DecoderMode::Split, true) => "split-iace",
            (DecoderMode::Single, false) => "single-plain",
            (DecoderMode::Split, false) => "split-plain",
        }
    }

    pub fn parse(s: &str) -> Result<PolicyVariant, PolicyError> {
        match s {
            "single-iace" => Ok(Self::SINGLE_IACE),
            "split-iace" => Ok(Self::SPLIT_IACE),
            "single-plain" => Ok(Self::SINGLE_PLAIN),
            "split-plain" => Ok(Self::SPLIT_PLAIN),
            _ => Err(PolicyError::Input(format!(
                "unknown variant '{s}' (expected one of single-iace, split-iace, single-plain, split-plain)"
            ))),
        }
    }
}

impl std::fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A rendered camera image, row-major with channel-minor pixels in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self, PolicyError> {
        if pixels.len() != height * width * channels {
            return Err(PolicyError::Input(format!(
                "image payload holds {} values, expected {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }
}

/// Per-arm joint vectors plus four rendered camera images at one timestep.
/// The last entry of each joint vector is the gripper aperture in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame {
    pub joints_left: Vec<f64>,
    pub joints_right: Vec<f64>,
    pub wrist_left: Image,
    pub wrist_right: Image,
    pub top: Image,
    pub front: Image,
}

impl ObservationFrame {
    /// Check arm dimensionality, camera dimensions, finiteness, and pixel range.
    pub fn validate(&self, joints_per_arm: usize, h: usize, w: usize, c: usize) -> Result<(), PolicyError> {
        if joints_per_arm < 2 {
            return Err(PolicyError::Input("joints_per_arm must be at least 2".into()));
        }
        if self.joints_left.len() != joints_per_arm || self.joints_right.len() != joints_per_arm {
            return Err(PolicyError::Input(format!(
                "joint vectors must have {joints_per_arm} entries, got {}/{}",
                self.joints_left.len(),
                self.joints_right.len()
            )));
        }
        if !self.joints_left.iter().chain(self.joints_right.iter()).all(|v| v.is_finite()) {
            return Err(PolicyError::Input("non-finite joint value".into()));
        }
        for (name, img) in [
            ("wrist_left", &self.wrist_left),
            ("wrist_right", &self.wrist_right),
            ("top", &self.top),
            ("front", &self.front),
        ] {
            if img.height != h || img.width != w || img.channels != c {
                return Err(PolicyError::Input(format!(
                    "camera {name} is {}x{}x{}, expected {h}x{w}x{c}",
                    img.height, img.width, img.channels
                )));
            }
            if !img.pixels.iter().all(|p| (0.0..=1.0).contains(p)) {
                return Err(PolicyError::Input(format!(
                    "camera {name} has pixel values outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Which arm(s) an action chunk covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmScope {
    Both,
    Left,
    Right,
}

/// k rows of future joint targets. Columns are radians except each arm's
/// final gripper column, which lives in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dims: usize,
    scope: ArmScope,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dims: usize, scope: ArmScope, data: Vec<f64>) -> Result<Self, PolicyError> {
        if horizon < 1 {
            return Err(PolicyError::Input("chunk horizon must be at least 1".into()));
        }
        if data.len() != horizon * dims {
            return Err(PolicyError::Input(format!(
                "chunk payload holds {} values, expected {horizon}x{dims}",
                data.len()
            )));
        }
        Ok(ActionChunk {
            horizon,
            dims,
            scope,
            data,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn scope(&self) -> ArmScope {
        self.scope
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column-wise concatenation of per-arm chunks into a both-arms chunk.
    pub fn stack_left_right(left: &ActionChunk, right: &ActionChunk) -> Result<ActionChunk, PolicyError> {
        if left.horizon != right.horizon {
            return Err(PolicyError::Input("chunk horizons differ".into()));
        }
        if left.scope != ArmScope::Left || right.scope != ArmScope::Right {
            return Err(PolicyError::Input("stack expects (left, right) scoped chunks".into()));
        }
        let dims = left.dims + right.dims;
        let mut data = Vec::with_capacity(left.horizon * dims);
        for r in 0..left.horizon {
            data.extend_from_slice(left.row(r));
            data.extend_from_slice(right.row(r));
        }
        ActionChunk::new(left.horizon, dims, ArmScope::Both, data)
    }
}

/// CVAE style variable: posterior mean and log-variance, plus the sampled z.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStyle {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentStyle {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

/// Sampling mode for the style variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// Reparameterized draw from the posterior.
    Train,
    /// Deterministic zero vector.
    Infer,
}

/// Reparameterized sampling: train mode draws z = mu + exp(logvar/2) * eps
/// with standard-normal eps; infer mode returns the zero vector.
pub fn sample_latent(style: &LatentStyle, mode: LatentMode, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    match mode {
        LatentMode::Infer => vec![0.0; style.dims()],
        LatentMode::Train => {
            let eps = standard_normal_vec(style.dims(), rng);
            style
                .mean
                .iter()
                .zip(style.logvar.iter().zip(eps.iter()))
                .map(|(m, (lv, e))| m + (lv / 2.0).exp() * e)
                .collect()
        }
    }
}

/// Box-Muller standard normals from the deterministic stream.
pub fn standard_normal_vec(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < n {
            out.push(r * theta.sin());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_labels_roundtrip() {
        for v in PolicyVariant::all() {
            assert_eq!(PolicyVariant::parse(v.label()).unwrap(), v);
        }
        assert!(PolicyVariant::parse("both-arms").is_err());
    }

    #[test]
    fn chunk_stacking_reproduces_joint_layout() {
        let k = 20;
        let j = 4;
        let left = ActionChunk::new(k, j, ArmScope::Left, (0..k * j).map(|i| i as f64).collect()).unwrap();
        let right =
            ActionChunk::new(k, j, ArmScope::Right, (0..k * j).map(|i| -(i as f64)).collect()).unwrap();
        let both = ActionChunk::stack_left_right(&left, &right).unwrap();
        assert_eq!(both.horizon(), 20);
        assert_eq!(both.dims(), 8);
        for r in 0..k {
            assert_eq!(&both.row(r)[..j], left.row(r));
            assert_eq!(&both.row(r)[j..], right.row(r));
        }
    }

    #[test]
    fn infer_mode_returns_zero_vector() {
        let style = LatentStyle {
            mean: vec![1.0, -2.0, 3.0],
            logvar: vec![0.5, 0.1, -0.4],
            z: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            assert_eq!(sample_latent(&style, LatentMode::Infer, &mut rng), vec![0.0; 3]);
        }
    }

    #[test]
    fn collapsed_variance_returns_mean() {
        let style = LatentStyle {
            mean: vec![0.7, -1.3],
            logvar: vec![-40.0, -40.0],
            z: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_latent(&style, LatentMode::Train, &mut rng);
        for (zi, mi) in z.iter().zip(style.mean.iter()) {
            assert!((zi - mi).abs() < 1e-8);
        }
    }

    #[test]
    fn sample_mean_concentrates_on_mu() {
        // Monte-Carlo oracle: mean over n draws lies within 4*sigma/sqrt(n)
        let style = LatentStyle {
            mean: vec![0.25, -0.75],
            logvar: vec![0.0, 1.0],
            z: vec![],
        };
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sums = vec![0.0; 2];
        for _ in 0..n {
            let z = sample_latent(&style, LatentMode::Train, &mut rng);
            sums[0] += z[0];
            sums[1] += z[1];
        }
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let sigma = (style.logvar[i] / 2.0f64).exp();
            let bound = 4.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean - style.mean[i]).abs() < bound,
                "dim {i}: {mean} vs {} (bound {bound})",
                style.mean[i]
            );
        }
    }

    #[test]
    fn observation_validation_catches_bad_cameras() {
        let obs = ObservationFrame {
            joints_left: vec![0.0; 4],
            joints_right: vec![0.0; 4],
            wrist_left: Image::zeros(8, 8, 3),
            wrist_right: Image::zeros(8, 8, 3),
            top: Image::zeros(8, 8, 3),
            front: Image::zeros(4, 8, 3), // wrong height
        };
        assert!(obs.validate(4, 8, 8, 3).is_err());
        let mut ok = obs.clone();
        ok.front = Image::zeros(8, 8, 3);
        assert!(ok.validate(4, 8, 8, 3).is_ok());
        ok.wrist_left.pixels[0] = 1.5;
        assert!(ok.validate(4, 8, 8, 3).is_err());
    }
}
