//! Bit-exact episode storage, rate decimation, and normalization statistics.
//!
//! On-disk episode layout: a text header of `key:value` lines terminated by a
//! blank line, followed by flat little-endian IEEE-754 f32 arrays in declared
//! order — joints (T x 2J), actions (T x 2J), then images (T x 4 cameras x
//! H x W x C, row-major, channel-minor). A SHA-256 of the payload in the
//! header makes single-byte corruption detectable on re-read.

use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const CAMERA_COUNT: usize = 4;
/// Camera order inside each frame's image block.
pub const CAMERA_ORDER: [&str; CAMERA_COUNT] = ["wrist_left", "wrist_right", "top", "front"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format version mismatch: file has {got}, expected {expected}")]
    Version { got: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("header/payload size disagreement: header implies {expected} payload bytes, file has {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("payload checksum mismatch in {0}: file is corrupted")]
    Corrupted(PathBuf),
    #[error("truncated file: {0}")]
    Truncated(PathBuf),
    #[error("invalid episode: {0}")]
    Invalid(String),
    #[error("manifest references missing file {0}")]
    Dangling(PathBuf),
}

/// Success subscores recorded with an episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubScores {
    pub entries: Vec<(String, bool)>,
}

impl SubScores {
    pub fn overall(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|(_, v)| *v)
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// A fixed-rate trajectory of observation/action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub rate_hz: u32,
    /// Frame count T.
    pub frames: usize,
    /// Joints per arm, last entry of each arm block is the gripper aperture.
    pub joints_per_arm: usize,
    pub img_height: usize,
    pub img_width: usize,
    pub img_channels: usize,
    pub task: String,
    pub seed: u64,
    pub subscores: SubScores,
    /// T x 2J observed joint values.
    pub joints: Vec<f32>,
    /// T x 2J commanded joint targets.
    pub actions: Vec<f32>,
    /// T x 4 x H x W x C pixels in [0,1].
    pub images: Vec<f32>,
}

impl EpisodeRecord {
    pub fn dims_per_frame(&self) -> usize {
        2 * self.joints_per_arm
    }

    pub fn pixels_per_frame(&self) -> usize {
        CAMERA_COUNT * self.img_height * self.img_width * self.img_channels
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.rate_hz != 50 && self.rate_hz != 25 {
            return Err(DatasetError::Invalid(format!(
                "rate_hz {} not in {{50, 25}}",
                self.rate_hz
            )));
        }
        let d = self.frames * self.dims_per_frame();
        if self.joints.len() != d || self.actions.len() != d {
            return Err(DatasetError::Invalid(format!(
                "joint/action arrays must hold {} values, got {}/{}",
                d,
                self.joints.len(),
                self.actions.len()
            )));
        }
        if self.images.len() != self.frames * self.pixels_per_frame() {
            return Err(DatasetError::Invalid(format!(
                "image array must hold {} values, got {}",
                self.frames * self.pixels_per_frame(),
                self.images.len()
            )));
        }
        Ok(())
    }

    /// Joint values of frame `t` (2J values).
    pub fn joints_at(&self, t: usize) -> &[f32] {
        let d = self.dims_per_frame();
        &self.joints[t * d..(t + 1) * d]
    }

    pub fn actions_at(&self, t: usize) -> &[f32] {
        let d = self.dims_per_frame();
        &self.actions[t * d..(t + 1) * d]
    }

    /// Pixels of camera `cam` (index into [`CAMERA_ORDER`]) at frame `t`.
    pub fn image_at(&self, t: usize, cam: usize) -> &[f32] {
        let per_cam = self.img_height * self.img_width * self.img_channels;
        let base = t * self.pixels_per_frame() + cam * per_cam;
        &self.images[base..base + per_cam]
    }

    /// Expected on-disk payload size in bytes.
    pub fn payload_bytes(&self) -> usize {
        4 * self.frames * (2 * self.dims_per_frame() + self.pixels_per_frame())
    }
}

fn payload_sha256(record: &EpisodeRecord) -> String {
    let mut hasher = Sha256::new();
    for v in &record.joints {
        hasher.update(v.to_le_bytes());
    }
    for v in &record.actions {
        hasher.update(v.to_le_bytes());
    }
    for v in &record.images {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write an episode; `read_episode(write_episode(x)) == x` bitwise.
pub fn write_episode(record: &EpisodeRecord, path: &Path) -> Result<(), DatasetError> {
    record.validate()?;
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut header = String::new();
    header.push_str(&format!("version:{FORMAT_VERSION}\n"));
    header.push_str(&format!("rate_hz:{}\n", record.rate_hz));
    header.push_str(&format!("frames:{}\n", record.frames));
    header.push_str(&format!("joints_per_arm:{}\n", record.joints_per_arm));
    header.push_str(&format!(
        "image_dims:{}x{}x{}\n",
        record.img_height, record.img_width, record.img_channels
    ));
    header.push_str(&format!("cameras:{}\n", CAMERA_ORDER.join(",")));
    header.push_str(&format!("task:{}\n", record.task));
    header.push_str(&format!("seed:{}\n", record.seed));
    for (name, v) in &record.subscores.entries {
        header.push_str(&format!("subscore_{name}:{}\n", u8::from(*v)));
    }
    header.push_str(&format!("payload_sha256:{}\n", payload_sha256(record)));
    header.push('\n');

    let mut bytes = Vec::with_capacity(header.len() + record.payload_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in &record.joints {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &record.actions {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &record.images {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<EpisodeRecord, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    // header ends at the first blank line
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| DatasetError::Truncated(path.to_path_buf()))?
        + 2;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| DatasetError::Header("header is not UTF-8".into()))?;

    let mut version = None;
    let mut rate_hz = None;
    let mut frames = None;
    let mut joints_per_arm = None;
    let mut image_dims = None;
    let mut task = None;
    let mut seed = None;
    let mut checksum = None;
    let mut subscores = SubScores::default();
    for line in header.lines() {
        if line.is_empty() {
            break;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| DatasetError::Header(format!("bad line: {line}")))?;
        let parse_err = |k: &str| DatasetError::Header(format!("bad value for {k}: {value}"));
        match key {
            "version" => version = Some(value.parse::<u32>().map_err(|_| parse_err(key))?),
            "rate_hz" => rate_hz = Some(value.parse::<u32>().map_err(|_| parse_err(key))?),
            "frames" => frames = Some(value.parse::<usize>().map_err(|_| parse_err(key))?),
            "joints_per_arm" => {
                joints_per_arm = Some(value.parse::<usize>().map_err(|_| parse_err(key))?)
            }
            "image_dims" => {
                let parts: Vec<usize> = value
                    .split('x')
                    .map(|p| p.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err(key))?;
                if parts.len() != 3 {
                    return Err(parse_err(key));
                }
                image_dims = Some((parts[0], parts[1], parts[2]));
            }
            "cameras" => {
                if value != CAMERA_ORDER.join(",") {
                    return Err(DatasetError::Header(format!("unexpected camera set: {value}")));
                }
            }
            "task" => task = Some(value.to_string()),
            "seed" => seed = Some(value.parse::<u64>().map_err(|_| parse_err(key))?),
            "payload_sha256" => checksum = Some(value.to_string()),
            _ if key.starts_with("subscore_") => {
                let name = key.trim_start_matches("subscore_").to_string();
                subscores.entries.push((name, value == "1"));
            }
            _ => return Err(DatasetError::Header(format!("unknown key: {key}"))),
        }
    }
    let version = version.ok_or_else(|| DatasetError::Header("missing version".into()))?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            got: version,
            expected: FORMAT_VERSION,
        });
    }
    let missing = |k: &str| DatasetError::Header(format!("missing {k}"));
    let rate_hz = rate_hz.ok_or_else(|| missing("rate_hz"))?;
    let frames = frames.ok_or_else(|| missing("frames"))?;
    let joints_per_arm = joints_per_arm.ok_or_else(|| missing("joints_per_arm"))?;
    let (img_height, img_width, img_channels) = image_dims.ok_or_else(|| missing("image_dims"))?;
    let task = task.ok_or_else(|| missing("task"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;
    let checksum = checksum.ok_or_else(|| missing("payload_sha256"))?;

    let mut record = EpisodeRecord {
        rate_hz,
        frames,
        joints_per_arm,
        img_height,
        img_width,
        img_channels,
        task,
        seed,
        subscores,
        joints: Vec::new(),
        actions: Vec::new(),
        images: Vec::new(),
    };
    let expected = record.payload_bytes();
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(DatasetError::SizeMismatch {
            expected,
            got: payload.len(),
        });
    }
    let dims = record.frames * record.dims_per_frame();
    let read_f32s = |range: std::ops::Range<usize>| -> Vec<f32> {
        payload[range]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    record.joints = read_f32s(0..dims * 4);
    record.actions = read_f32s(dims * 4..2 * dims * 4);
    record.images = read_f32s(2 * dims * 4..expected);
    record.validate()?;
    if payload_sha256(&record) != checksum {
        return Err(DatasetError::Corrupted(path.to_path_buf()));
    }
    Ok(record)
}

/// Keep frames 0, factor, 2*factor, ...; the new frame count is ceil(T/factor)
/// and the rate divides by `factor`.
pub fn downsample(record: &EpisodeRecord, factor: usize) -> Result<EpisodeRecord, DatasetError> {
    if factor < 1 {
        return Err(DatasetError::Invalid("downsample factor must be >= 1".into()));
    }
    if record.rate_hz as usize % factor != 0 {
        return Err(DatasetError::Invalid(format!(
            "factor {factor} does not divide rate {}",
            record.rate_hz
        )));
    }
    if factor == 1 {
        return Ok(record.clone());
    }
    let mut out = EpisodeRecord {
        rate_hz: record.rate_hz / factor as u32,
        frames: record.frames.div_ceil(factor),
        joints_per_arm: record.joints_per_arm,
        img_height: record.img_height,
        img_width: record.img_width,
        img_channels: record.img_channels,
        task: record.task.clone(),
        seed: record.seed,
        subscores: record.subscores.clone(),
        joints: Vec::new(),
        actions: Vec::new(),
        images: Vec::new(),
    };
    let d = record.dims_per_frame();
    let p = record.pixels_per_frame();
    for t in (0..record.frames).step_by(factor) {
        out.joints.extend_from_slice(&record.joints[t * d..(t + 1) * d]);
        out.actions.extend_from_slice(&record.actions[t * d..(t + 1) * d]);
        out.images.extend_from_slice(&record.images[t * p..(t + 1) * p]);
    }
    out.validate()?;
    Ok(out)
}

/// Standard-deviation floor applied when a dimension is constant.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension mean and standard deviation of joints and actions.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub joint_mean: Vec<f64>,
    pub joint_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl NormStats {
    /// Identity statistics (mean 0, std 1) for `dims` dimensions.
    pub fn identity(dims: usize) -> Self {
        NormStats {
            joint_mean: vec![0.0; dims],
            joint_std: vec![1.0; dims],
            action_mean: vec![0.0; dims],
            action_std: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.joint_mean.len()
    }
}

fn two_pass_stats(columns: usize, rows: impl Fn(&mut dyn FnMut(&[f32]))) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; columns];
    let mut count = 0usize;
    rows(&mut |row| {
        for (s, &v) in sum.iter_mut().zip(row.iter()) {
            *s += v as f64;
        }
        count += 1;
    });
    let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
    let mut sq = vec![0.0f64; columns];
    rows(&mut |row| {
        for (i, &v) in row.iter().enumerate() {
            let d = v as f64 - mean[i];
            sq[i] += d * d;
        }
    });
    let std: Vec<f64> = sq
        .iter()
        .map(|s| (s / count.max(1) as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Two-pass z-scoring statistics over every frame of every episode.
pub fn compute_norm_stats(episodes: &[EpisodeRecord]) -> Result<NormStats, DatasetError> {
    let first = episodes
        .first()
        .ok_or_else(|| DatasetError::Invalid("cannot compute stats over zero episodes".into()))?;
    let dims = first.dims_per_frame();
    let joint_rows = |f: &mut dyn FnMut(&[f32])| {
        for ep in episodes {
            for t in 0..ep.frames {
                f(ep.joints_at(t));
            }
        }
    };
    let action_rows = |f: &mut dyn FnMut(&[f32])| {
        for ep in episodes {
            for t in 0..ep.frames {
                f(ep.actions_at(t));
            }
        }
    };
    let (joint_mean, joint_std) = two_pass_stats(dims, joint_rows);
    let (action_mean, action_std) = two_pass_stats(dims, action_rows);
    Ok(NormStats {
        joint_mean,
        joint_std,
        action_mean,
        action_std,
    })
}

pub fn normalize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean.iter().zip(std.iter()))
        .map(|(v, (m, s))| (v - m) / s)
        .collect()
}

pub fn denormalize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean.iter().zip(std.iter()))
        .map(|(v, (m, s))| v * s + m)
        .collect()
}

/// Index of a stored dataset: episode files plus global statistics.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub version: u32,
    pub stats: NormStats,
    pub episodes: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub frames: usize,
    pub task: String,
    pub success: bool,
}

fn floats_line(name: &str, vals: &[f64]) -> String {
    let joined: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
    format!("{name}:{}\n", joined.join(","))
}

fn parse_floats(value: &str) -> Result<Vec<f64>, DatasetError> {
    value
        .split(',')
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| DatasetError::Header(format!("bad float list entry: {p}")))
        })
        .collect()
}

/// Manifest paths are stored relative to the manifest's own directory.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = String::new();
    out.push_str(&format!("version:{}\n", manifest.version));
    out.push_str(&floats_line("joint_mean", &manifest.stats.joint_mean));
    out.push_str(&floats_line("joint_std", &manifest.stats.joint_std));
    out.push_str(&floats_line("action_mean", &manifest.stats.action_mean));
    out.push_str(&floats_line("action_std", &manifest.stats.action_std));
    for e in &manifest.episodes {
        let rel = e.path.strip_prefix(dir).unwrap_or(&e.path);
        out.push_str(&format!(
            "episode:{}\t{}\t{}\t{}\n",
            rel.display(),
            e.frames,
            e.task,
            u8::from(e.success)
        ));
    }
    fs::write(path, out).map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let text = fs::read_to_string(path).map_err(io)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut version = None;
    let mut joint_mean = None;
    let mut joint_std = None;
    let mut action_mean = None;
    let mut action_std = None;
    let mut episodes = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| DatasetError::Header(format!("bad manifest line: {line}")))?;
        match key {
            "version" => {
                version = Some(value.parse::<u32>().map_err(|_| {
                    DatasetError::Header(format!("bad manifest version: {value}"))
                })?)
            }
            "joint_mean" => joint_mean = Some(parse_floats(value)?),
            "joint_std" => joint_std = Some(parse_floats(value)?),
            "action_mean" => action_mean = Some(parse_floats(value)?),
            "action_std" => action_std = Some(parse_floats(value)?),
            "episode" => {
                let parts: Vec<&str> = value.split('\t').collect();
                if parts.len() != 4 {
                    return Err(DatasetError::Header(format!("bad episode line: {line}")));
                }
                episodes.push(ManifestEntry {
                    path: dir.join(parts[0]),
                    frames: parts[1]
                        .parse()
                        .map_err(|_| DatasetError::Header(format!("bad frame count: {}", parts[1])))?,
                    task: parts[2].to_string(),
                    success: parts[3] == "1",
                });
            }
            _ => return Err(DatasetError::Header(format!("unknown manifest key: {key}"))),
        }
    }
    let missing = |k: &str| DatasetError::Header(format!("manifest missing {k}"));
    let manifest = DatasetManifest {
        version: version.ok_or_else(|| missing("version"))?,
        stats: NormStats {
            joint_mean: joint_mean.ok_or_else(|| missing("joint_mean"))?,
            joint_std: joint_std.ok_or_else(|| missing("joint_std"))?,
            action_mean: action_mean.ok_or_else(|| missing("action_mean"))?,
            action_std: action_std.ok_or_else(|| missing("action_std"))?,
        },
        episodes,
    };
    for e in &manifest.episodes {
        if !e.path.exists() {
            return Err(DatasetError::Dangling(e.path.clone()));
        }
    }
    Ok(manifest)
}

/// Load every episode listed in a manifest, verifying checksums.
pub fn load_episodes(manifest: &DatasetManifest) -> Result<Vec<EpisodeRecord>, DatasetError> {
    manifest.episodes.iter().map(|e| read_episode(&e.path)).collect()
}
