//! Named-tensor checkpoint container.
//!
//! Layout: a text manifest (`key:value` lines, then one `tensor:` line per
//! tensor naming shape, dtype, and byte offset into the blob) terminated by a
//! blank line, followed by the raw little-endian IEEE-754 f64 blob. Loading a
//! checkpoint reproduces inference bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::NormStats;
use crate::math::Matrix;
use crate::policy::{PolicyConfig, PolicyError, PolicyModel, PolicyVariant};

const MAGIC: &str = "iace-checkpoint";
const VERSION: u32 = 1;

/// Reserved tensor names carrying the normalization statistics.
const STAT_NAMES: [&str; 4] = [
    "__stats/joint_mean",
    "__stats/joint_std",
    "__stats/action_mean",
    "__stats/action_std",
];

pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<(), PolicyError> {
    let c = &model.config;
    let mut header = String::new();
    header.push_str(&format!("{MAGIC}:{VERSION}\n"));
    header.push_str(&format!("variant:{}\n", c.variant.label()));
    header.push_str(&format!("d_model:{}\n", c.d_model));
    header.push_str(&format!("heads:{}\n", c.heads));
    header.push_str(&format!("ffn_dim:{}\n", c.ffn_dim));
    header.push_str(&format!("enc_depth:{}\n", c.enc_depth));
    header.push_str(&format!("iace_depth:{}\n", c.iace_depth));
    header.push_str(&format!("dec_depth:{}\n", c.dec_depth));
    header.push_str(&format!("cvae_depth:{}\n", c.cvae_depth));
    header.push_str(&format!("chunk_len:{}\n", c.chunk_len));
    header.push_str(&format!("z_dim:{}\n", c.z_dim));
    header.push_str(&format!("joints_per_arm:{}\n", c.joints_per_arm));
    header.push_str(&format!("img_height:{}\n", c.img_height));
    header.push_str(&format!("img_width:{}\n", c.img_width));
    header.push_str(&format!("img_channels:{}\n", c.img_channels));
    header.push_str(&format!("learned_pos:{}\n", u8::from(c.learned_pos)));

    let stats = [
        (STAT_NAMES[0], &model.stats.joint_mean),
        (STAT_NAMES[1], &model.stats.joint_std),
        (STAT_NAMES[2], &model.stats.action_mean),
        (STAT_NAMES[3], &model.stats.action_std),
    ];
    let tensor_count = model.params.len() + stats.len();
    header.push_str(&format!("tensors:{tensor_count}\n"));

    let mut blob: Vec<u8> = Vec::new();
    let mut tensor_lines = String::new();
    let mut push_tensor = |name: &str, rows: usize, cols: usize, data: &[f64], blob: &mut Vec<u8>| {
        tensor_lines.push_str(&format!(
            "tensor:{name}\t{rows}\t{cols}\tf64\t{}\n",
            blob.len()
        ));
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, name, tensor) in model.params.iter() {
        push_tensor(name, tensor.rows, tensor.cols, &tensor.data, &mut blob);
    }
    for (name, vals) in stats {
        push_tensor(name, 1, vals.len(), vals, &mut blob);
    }

    let mut out = Vec::with_capacity(header.len() + tensor_lines.len() + blob.len() + 32);
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(tensor_lines.as_bytes());
    out.extend_from_slice(format!("blob_bytes:{}\n\n", blob.len()).as_bytes());
    out.extend_from_slice(&blob);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyModel, PolicyError> {
    let bytes = fs::read(path)?;
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| PolicyError::Checkpoint("truncated checkpoint (no header end)".into()))?
        + 2;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| PolicyError::Checkpoint("checkpoint header is not UTF-8".into()))?;
    let blob = &bytes[header_end..];

    let mut fields = std::collections::HashMap::new();
    let mut tensors: Vec<TensorEntry> = Vec::new();
    let mut blob_bytes = None;
    for line in header.lines() {
        if line.is_empty() {
            break;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| PolicyError::Checkpoint(format!("bad header line: {line}")))?;
        match key {
            MAGIC => {
                let v: u32 = value
                    .parse()
                    .map_err(|_| PolicyError::Checkpoint("bad version".into()))?;
                if v != VERSION {
                    return Err(PolicyError::Checkpoint(format!(
                        "checkpoint version {v}, expected {VERSION}"
                    )));
                }
            }
            "tensor" => {
                let parts: Vec<&str> = value.split('\t').collect();
                if parts.len() != 5 || parts[3] != "f64" {
                    return Err(PolicyError::Checkpoint(format!("bad tensor line: {line}")));
                }
                let parse = |s: &str| -> Result<usize, PolicyError> {
                    s.parse()
                        .map_err(|_| PolicyError::Checkpoint(format!("bad tensor field: {s}")))
                };
                tensors.push(TensorEntry {
                    name: parts[0].to_string(),
                    rows: parse(parts[1])?,
                    cols: parse(parts[2])?,
                    offset: parse(parts[4])?,
                });
            }
            "blob_bytes" => {
                blob_bytes = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| PolicyError::Checkpoint("bad blob_bytes".into()))?,
                )
            }
            _ => {
                fields.insert(key.to_string(), value.to_string());
            }
        }
    }
    let blob_bytes =
        blob_bytes.ok_or_else(|| PolicyError::Checkpoint("missing blob_bytes".into()))?;
    if blob.len() != blob_bytes {
        return Err(PolicyError::Checkpoint(format!(
            "blob holds {} bytes, header declares {blob_bytes}",
            blob.len()
        )));
    }

    let get = |k: &str| -> Result<&String, PolicyError> {
        fields
            .get(k)
            .ok_or_else(|| PolicyError::Checkpoint(format!("missing header field {k}")))
    };
    let get_usize = |k: &str| -> Result<usize, PolicyError> {
        get(k)?
            .parse()
            .map_err(|_| PolicyError::Checkpoint(format!("bad value for {k}")))
    };
    let config = PolicyConfig {
        d_model: get_usize("d_model")?,
        heads: get_usize("heads")?,
        ffn_dim: get_usize("ffn_dim")?,
        enc_depth: get_usize("enc_depth")?,
        iace_depth: get_usize("iace_depth")?,
        dec_depth: get_usize("dec_depth")?,
        cvae_depth: get_usize("cvae_depth")?,
        chunk_len: get_usize("chunk_len")?,
        z_dim: get_usize("z_dim")?,
        joints_per_arm: get_usize("joints_per_arm")?,
        img_height: get_usize("img_height")?,
        img_width: get_usize("img_width")?,
        img_channels: get_usize("img_channels")?,
        variant: PolicyVariant::parse(get("variant")?)?,
        learned_pos: get("learned_pos")? == "1",
    };

    let read_tensor = |e: &TensorEntry| -> Result<Matrix, PolicyError> {
        let n = e.rows * e.cols;
        let end = e.offset + 8 * n;
        if end > blob.len() {
            return Err(PolicyError::Checkpoint(format!(
                "tensor {} extends past the blob",
                e.name
            )));
        }
        let data: Vec<f64> = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        Ok(Matrix::from_vec(e.rows, e.cols, data))
    };

    let mut stat_vecs: [Option<Vec<f64>>; 4] = [None, None, None, None];
    for e in &tensors {
        if let Some(i) = STAT_NAMES.iter().position(|n| *n == e.name) {
            stat_vecs[i] = Some(read_tensor(e)?.data);
        }
    }
    let stats = NormStats {
        joint_mean: stat_vecs[0]
            .take()
            .ok_or_else(|| PolicyError::Checkpoint("missing joint_mean stats".into()))?,
        joint_std: stat_vecs[1]
            .take()
            .ok_or_else(|| PolicyError::Checkpoint("missing joint_std stats".into()))?,
        action_mean: stat_vecs[2]
            .take()
            .ok_or_else(|| PolicyError::Checkpoint("missing action_mean stats".into()))?,
        action_std: stat_vecs[3]
            .take()
            .ok_or_else(|| PolicyError::Checkpoint("missing action_std stats".into()))?,
    };

    let mut model = PolicyModel::new(config, stats, 0)?;
    let mut loaded = 0usize;
    for e in &tensors {
        if STAT_NAMES.contains(&e.name.as_str()) {
            continue;
        }
        let id = model.params.lookup(&e.name).ok_or_else(|| {
            PolicyError::Checkpoint(format!("checkpoint tensor {} not part of this variant", e.name))
        })?;
        let m = read_tensor(e)?;
        let slot = model.params.get_mut(id);
        if (slot.rows, slot.cols) != (m.rows, m.cols) {
            return Err(PolicyError::Checkpoint(format!(
                "tensor {} is {}x{}, model expects {}x{}",
                e.name, m.rows, m.cols, slot.rows, slot.cols
            )));
        }
        *slot = m;
        loaded += 1;
    }
    if loaded != model.params.len() {
        return Err(PolicyError::Checkpoint(format!(
            "checkpoint provides {loaded} tensors, model has {}",
            model.params.len()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyVariant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats(dims: usize, seed: u64) -> NormStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |offset: f64| -> Vec<f64> {
            (0..dims).map(|_| rng.gen::<f64>() + offset).collect()
        };
        NormStats {
            joint_mean: v(0.0),
            joint_std: v(0.5),
            action_mean: v(0.0),
            action_std: v(0.5),
        }
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_inference_bitwise() {
        for variant in [PolicyVariant::SPLIT_IACE, PolicyVariant::SINGLE_PLAIN] {
            let cfg = crate::policy::PolicyConfig::smallest(variant);
            let model = PolicyModel::new(cfg.clone(), random_stats(8, 1), 77).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&model, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.config, cfg);
            assert_eq!(loaded.stats, model.stats);
            let obs = crate::policy::model::tests::random_obs(&cfg, 5);
            let a = model.infer(&obs).unwrap();
            let b = loaded.infer(&obs).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wrong_variant_tensors_rejected() {
        let cfg = crate::policy::PolicyConfig::smallest(PolicyVariant::SINGLE_IACE);
        let model = PolicyModel::new(cfg, random_stats(8, 2), 78).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        // flip the declared variant: decoder tensors no longer match
        let bytes = fs::read(&path).unwrap();
        let needle: &[u8] = b"variant:single-iace";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let mut patched = Vec::with_capacity(bytes.len());
        patched.extend_from_slice(&bytes[..at]);
        patched.extend_from_slice(b"variant:split-iace");
        patched.extend_from_slice(&bytes[at + needle.len()..]);
        fs::write(&path, &patched).unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("loading a variant-flipped checkpoint should fail"),
        };
        assert!(err.to_string().contains("not part of this variant"), "{err}");
    }
}
