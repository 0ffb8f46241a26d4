//! Model construction and the forward passes of all four variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, ParamId, ParamStore, Tape};
use crate::dataset::{normalize, NormStats};
use crate::math::Matrix;
use crate::nn::{
    image_to_matrix, positional_embed, uniform_init, ConvTokenizer, DecoderBlock, EncoderBlock,
    LinearLayer, TokenizerConfig,
};
use crate::policy::{
    ActionChunk, ArmScope, DecoderMode, Image, LatentStyle, ObservationFrame, PolicyError,
    PolicyVariant,
};

/// Which arm a local path belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmSide {
    Left,
    Right,
}

/// All model hyperparameters. Everything is configurable; the paper-scale
/// transformer dimensions are not prescribed, so the desk defaults below are
/// the reference configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_depth: usize,
    pub iace_depth: usize,
    pub dec_depth: usize,
    pub cvae_depth: usize,
    /// Chunk horizon k.
    pub chunk_len: usize,
    pub z_dim: usize,
    pub joints_per_arm: usize,
    pub img_height: usize,
    pub img_width: usize,
    pub img_channels: usize,
    pub variant: PolicyVariant,
    /// Learned positional table instead of the sinusoidal default.
    pub learned_pos: bool,
}

impl PolicyConfig {
    /// Desk-scale reference configuration.
    pub fn desk(variant: PolicyVariant) -> Self {
        PolicyConfig {
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            enc_depth: 2,
            iace_depth: 2,
            dec_depth: 3,
            cvae_depth: 2,
            chunk_len: 20,
            z_dim: 16,
            joints_per_arm: 4,
            img_height: 48,
            img_width: 48,
            img_channels: 3,
            variant,
            learned_pos: false,
        }
    }

    /// Smallest configuration exercising every architecture path; used by the
    /// gradient checker.
    pub fn smallest(variant: PolicyVariant) -> Self {
        PolicyConfig {
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            enc_depth: 1,
            iace_depth: 1,
            dec_depth: 1,
            cvae_depth: 1,
            chunk_len: 3,
            z_dim: 4,
            joints_per_arm: 4,
            img_height: 48,
            img_width: 48,
            img_channels: 3,
            variant,
            learned_pos: false,
        }
    }

    pub fn action_dims(&self) -> usize {
        2 * self.joints_per_arm
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig::for_image(self.img_height, self.img_width, self.img_channels, self.d_model)
    }

    /// Tokens per camera image.
    pub fn image_tokens(&self) -> usize {
        self.tokenizer_config().token_count()
    }

    /// Segment lengths (left/right, global) including CLS, excluding style.
    pub fn segment_lens(&self) -> (usize, usize) {
        let tok = self.image_tokens();
        (2 + tok, 3 + 2 * tok)
    }

    fn max_seq_len(&self) -> usize {
        let (arm, global) = self.segment_lens();
        let cvae = 2 + self.chunk_len;
        (arm + 1).max(global + 1).max(cvae)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("enc_depth", self.enc_depth),
            ("iace_depth", self.iace_depth),
            ("dec_depth", self.dec_depth),
            ("cvae_depth", self.cvae_depth),
            ("chunk_len", self.chunk_len),
            ("z_dim", self.z_dim),
            ("img_height", self.img_height),
            ("img_width", self.img_width),
            ("img_channels", self.img_channels),
        ] {
            if v == 0 {
                return Err(PolicyError::Input(format!("{name} must be positive")));
            }
        }
        if self.joints_per_arm < 2 {
            return Err(PolicyError::Input("joints_per_arm must be at least 2".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(PolicyError::Input(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

struct ArmDecoder {
    queries: ParamId,
    blocks: Vec<DecoderBlock>,
    head: LinearLayer,
}

struct CvaeEncoder {
    joint_proj: LinearLayer,
    action_proj: LinearLayer,
    cls: ParamId,
    blocks: Vec<EncoderBlock>,
    head: LinearLayer,
}

struct Layers {
    tokenizer: ConvTokenizer,
    joint_proj: LinearLayer,
    style_proj: LinearLayer,
    cls_left: ParamId,
    cls_right: ParamId,
    cls_global: ParamId,
    pos_learned: Option<ParamId>,
    enc_left: Vec<EncoderBlock>,
    enc_right: Vec<EncoderBlock>,
    iace: Option<Vec<EncoderBlock>>,
    single: Option<ArmDecoder>,
    split: Option<(ArmDecoder, ArmDecoder)>,
    cvae: CvaeEncoder,
}

/// The input token sequence partitioned into left-arm, right-arm, and global
/// segments, each headed by a CLS token and carrying its own positional
/// embeddings.
pub struct SegmentedTokens {
    pub left: NodeId,
    pub right: NodeId,
    pub global: NodeId,
    pub left_len: usize,
    pub right_len: usize,
    pub global_len: usize,
}

/// A policy with its parameters and the normalization statistics it was
/// trained with. Forward passes never mutate the model, so a frozen instance
/// can serve concurrent inference.
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub stats: NormStats,
    pub params: ParamStore,
    layers: Layers,
}

impl PolicyModel {
    pub fn new(config: PolicyConfig, stats: NormStats, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        if stats.dims() != config.action_dims() {
            return Err(PolicyError::Input(format!(
                "normalization stats cover {} dims, model needs {}",
                stats.dims(),
                config.action_dims()
            )));
        }
        let mut ps = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let j = config.joints_per_arm;

        let tokenizer = ConvTokenizer::new(&mut ps, rng, "tokenizer", config.tokenizer_config())?;
        let joint_proj = LinearLayer::new(&mut ps, rng, "joint_proj", j, d);
        let style_proj = LinearLayer::new(&mut ps, rng, "style_proj", config.z_dim, d);
        let cls_left = ps.register("cls/left", uniform_init(rng, 1, d, d));
        let cls_right = ps.register("cls/right", uniform_init(rng, 1, d, d));
        let cls_global = ps.register("cls/global", uniform_init(rng, 1, d, d));
        let pos_learned = if config.learned_pos {
            Some(ps.register(
                "pos_table",
                uniform_init(rng, config.max_seq_len(), d, d),
            ))
        } else {
            None
        };

        let stack = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, depth: usize| -> Result<Vec<EncoderBlock>, PolicyError> {
            (0..depth)
                .map(|i| {
                    EncoderBlock::new(ps, rng, &format!("{name}/block{i}"), d, config.heads, config.ffn_dim)
                        .map_err(PolicyError::from)
                })
                .collect()
        };
        let enc_left = stack(&mut ps, rng, "enc_left", config.enc_depth)?;
        let enc_right = stack(&mut ps, rng, "enc_right", config.enc_depth)?;
        let iace = if config.variant.iace {
            Some(stack(&mut ps, rng, "iace", config.iace_depth)?)
        } else {
            None
        };

        let arm_decoder = |ps: &mut ParamStore,
                           rng: &mut ChaCha8Rng,
                           name: &str,
                           out_dims: usize|
         -> Result<ArmDecoder, PolicyError> {
            let queries = ps.register(
                &format!("{name}/queries"),
                uniform_init(rng, config.chunk_len, d, d),
            );
            let blocks = (0..config.dec_depth)
                .map(|i| {
                    DecoderBlock::new(ps, rng, &format!("{name}/block{i}"), d, config.heads, config.ffn_dim)
                        .map_err(PolicyError::from)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let head = LinearLayer::new(ps, rng, &format!("{name}/head"), d, out_dims);
            Ok(ArmDecoder { queries, blocks, head })
        };
        let (single, split) = match config.variant.decoder {
            DecoderMode::Single => (
                Some(arm_decoder(&mut ps, rng, "dec_single", 2 * j)?),
                None,
            ),
            DecoderMode::Split => (
                None,
                Some((
                    arm_decoder(&mut ps, rng, "dec_left", j)?,
                    arm_decoder(&mut ps, rng, "dec_right", j)?,
                )),
            ),
        };

        let cvae = CvaeEncoder {
            joint_proj: LinearLayer::new(&mut ps, rng, "cvae/joint_proj", 2 * j, d),
            action_proj: LinearLayer::new(&mut ps, rng, "cvae/action_proj", 2 * j, d),
            cls: ps.register("cvae/cls", uniform_init(rng, 1, d, d)),
            blocks: stack(&mut ps, rng, "cvae/enc", config.cvae_depth)?,
            head: LinearLayer::new(&mut ps, rng, "cvae/head", d, 2 * config.z_dim),
        };

        Ok(PolicyModel {
            config,
            stats,
            params: ps,
            layers: Layers {
                tokenizer,
                joint_proj,
                style_proj,
                cls_left,
                cls_right,
                cls_global,
                pos_learned,
                enc_left,
                enc_right,
                iace,
                single,
                split,
                cvae,
            },
        })
    }

    fn add_positional(&self, t: &mut Tape, tokens: NodeId) -> NodeId {
        let len = t.rows(tokens);
        let pos = match self.layers.pos_learned {
            Some(id) => {
                let table = t.param(&self.params, id);
                t.slice_rows(table, 0, len)
            }
            None => t.input(positional_embed(len, self.config.d_model)),
        };
        t.add(tokens, pos)
    }

    fn tokenize_image(&self, t: &mut Tape, img: &Image) -> Result<NodeId, PolicyError> {
        let m = image_to_matrix(img.height, img.width, img.channels, &img.pixels)?;
        let node = t.input(m);
        Ok(self.layers.tokenizer.forward(t, &self.params, node)?)
    }

    fn joint_token(&self, t: &mut Tape, joints: &[f64], side: ArmSide) -> Result<NodeId, PolicyError> {
        let j = self.config.joints_per_arm;
        let range = match side {
            ArmSide::Left => 0..j,
            ArmSide::Right => j..2 * j,
        };
        let norm = normalize(
            joints,
            &self.stats.joint_mean[range.clone()],
            &self.stats.joint_std[range],
        );
        let node = t.input(Matrix::row_vec(norm));
        Ok(self.layers.joint_proj.forward(t, &self.params, node)?)
    }

    /// Build the three token segments. A style node, when present, is
    /// projected to the model width and appended to every segment.
    pub fn assemble_tokens(
        &self,
        t: &mut Tape,
        obs: &ObservationFrame,
        style: Option<NodeId>,
    ) -> Result<SegmentedTokens, PolicyError> {
        let c = &self.config;
        obs.validate(c.joints_per_arm, c.img_height, c.img_width, c.img_channels)?;
        let style_tok = match style {
            Some(z) => {
                if t.cols(z) != c.z_dim || t.rows(z) != 1 {
                    return Err(PolicyError::Input(format!(
                        "style node must be 1x{}, got {}x{}",
                        c.z_dim,
                        t.rows(z),
                        t.cols(z)
                    )));
                }
                Some(self.layers.style_proj.forward(t, &self.params, z)?)
            }
            None => None,
        };

        let joint_l = self.joint_token(t, &obs.joints_left, ArmSide::Left)?;
        let joint_r = self.joint_token(t, &obs.joints_right, ArmSide::Right)?;
        let wrist_l = self.tokenize_image(t, &obs.wrist_left)?;
        let wrist_r = self.tokenize_image(t, &obs.wrist_right)?;
        let top = self.tokenize_image(t, &obs.top)?;
        let front = self.tokenize_image(t, &obs.front)?;

        let cls_l = t.param(&self.params, self.layers.cls_left);
        let cls_r = t.param(&self.params, self.layers.cls_right);
        let cls_g = t.param(&self.params, self.layers.cls_global);

        let mut left_parts = vec![cls_l, joint_l, wrist_l];
        let mut right_parts = vec![cls_r, joint_r, wrist_r];
        let mut global_parts = vec![cls_g, joint_l, joint_r, top, front];
        if let Some(s) = style_tok {
            left_parts.push(s);
            right_parts.push(s);
            global_parts.push(s);
        }
        let left = t.concat_rows(&left_parts);
        let right = t.concat_rows(&right_parts);
        let global = t.concat_rows(&global_parts);
        let left = self.add_positional(t, left);
        let right = self.add_positional(t, right);
        let global = self.add_positional(t, global);
        Ok(SegmentedTokens {
            left_len: t.rows(left),
            right_len: t.rows(right),
            global_len: t.rows(global),
            left,
            right,
            global,
        })
    }

    /// Run one arm's local encoder stack; token count is preserved.
    pub fn encode_local(&self, t: &mut Tape, segment: NodeId, side: ArmSide) -> Result<NodeId, PolicyError> {
        let stack = match side {
            ArmSide::Left => &self.layers.enc_left,
            ArmSide::Right => &self.layers.enc_right,
        };
        let mut x = segment;
        for block in stack {
            x = block.forward(t, &self.params, x, None)?;
        }
        Ok(x)
    }

    /// Run the inter-arm coordination encoder over the global segment.
    /// Calling this on a variant without IACE is a contract violation.
    pub fn encode_iace(&self, t: &mut Tape, global: NodeId) -> Result<NodeId, PolicyError> {
        let stack = self.layers.iace.as_ref().ok_or_else(|| {
            PolicyError::Contract("encode_iace called but the variant has IACE disabled".into())
        })?;
        let mut x = global;
        for block in stack {
            x = block.forward(t, &self.params, x, None)?;
        }
        Ok(x)
    }

    /// Denormalize raw head outputs: joint columns get the action statistics'
    /// affine map, gripper columns a logistic squash into [0,1].
    fn transform_output(&self, t: &mut Tape, raw: NodeId, scope: ArmScope) -> NodeId {
        let j = self.config.joints_per_arm;
        let arms: &[ArmSide] = match scope {
            ArmScope::Both => &[ArmSide::Left, ArmSide::Right],
            ArmScope::Left => &[ArmSide::Left],
            ArmScope::Right => &[ArmSide::Right],
        };
        let mut parts = Vec::with_capacity(arms.len() * 2);
        for (i, side) in arms.iter().enumerate() {
            let stat_base = match side {
                ArmSide::Left => 0,
                ArmSide::Right => j,
            };
            let col_base = i * j;
            let angles = t.slice_cols(raw, col_base, j - 1);
            let std_row = t.input(Matrix::row_vec(
                self.stats.action_std[stat_base..stat_base + j - 1].to_vec(),
            ));
            let mean_row = t.input(Matrix::row_vec(
                self.stats.action_mean[stat_base..stat_base + j - 1].to_vec(),
            ));
            let scaled = t.mul_row(angles, std_row);
            let angles_out = t.add_row(scaled, mean_row);
            let grip = t.slice_cols(raw, col_base + j - 1, 1);
            let grip_out = t.sigmoid(grip);
            parts.push(angles_out);
            parts.push(grip_out);
        }
        t.concat_cols(&parts)
    }

    /// Single decoder: k learned queries cross-attend into the concatenation
    /// of both local memories and, when enabled, the coordination tokens.
    pub fn decode_single(
        &self,
        t: &mut Tape,
        mem_left: NodeId,
        mem_right: NodeId,
        mem_iace: Option<NodeId>,
    ) -> Result<NodeId, PolicyError> {
        let dec = self.layers.single.as_ref().ok_or_else(|| {
            PolicyError::Contract("decode_single called on a split-decoder variant".into())
        })?;
        let mut mem_parts = vec![mem_left, mem_right];
        if let Some(m) = mem_iace {
            mem_parts.push(m);
        }
        let memory = t.concat_rows(&mem_parts);
        let mut x = t.param(&self.params, dec.queries);
        for block in &dec.blocks {
            x = block.forward(t, &self.params, x, memory)?;
        }
        let raw = dec.head.forward(t, &self.params, x)?;
        Ok(self.transform_output(t, raw, ArmScope::Both))
    }

    /// Split decoder for one arm: queries cross-attend into that arm's local
    /// memory plus, when enabled, the coordination tokens.
    pub fn decode_split_arm(
        &self,
        t: &mut Tape,
        mem_arm: NodeId,
        mem_iace: Option<NodeId>,
        side: ArmSide,
    ) -> Result<NodeId, PolicyError> {
        let (left, right) = match self.layers.split.as_ref() {
            Some(pair) => (&pair.0, &pair.1),
            None => {
                return Err(PolicyError::Contract(
                    "decode_split_arm called on a single-decoder variant".into(),
                ))
            }
        };
        let dec = match side {
            ArmSide::Left => left,
            ArmSide::Right => right,
        };
        let memory = match mem_iace {
            Some(m) => t.concat_rows(&[mem_arm, m]),
            None => mem_arm,
        };
        let mut x = t.param(&self.params, dec.queries);
        for block in &dec.blocks {
            x = block.forward(t, &self.params, x, memory)?;
        }
        let raw = dec.head.forward(t, &self.params, x)?;
        let scope = match side {
            ArmSide::Left => ArmScope::Left,
            ArmSide::Right => ArmScope::Right,
        };
        Ok(self.transform_output(t, raw, scope))
    }

    /// Full dispatch: assemble, local encoders, IACE when enabled, then the
    /// variant's decoder(s). Returns a k x 2J node (split outputs are
    /// concatenated column-wise left-then-right).
    pub fn forward_nodes(
        &self,
        t: &mut Tape,
        obs: &ObservationFrame,
        style: Option<NodeId>,
    ) -> Result<NodeId, PolicyError> {
        let seg = self.assemble_tokens(t, obs, style)?;
        let mem_l = self.encode_local(t, seg.left, ArmSide::Left)?;
        let mem_r = self.encode_local(t, seg.right, ArmSide::Right)?;
        let mem_iace = if self.config.variant.iace {
            Some(self.encode_iace(t, seg.global)?)
        } else {
            None
        };
        match self.config.variant.decoder {
            DecoderMode::Single => self.decode_single(t, mem_l, mem_r, mem_iace),
            DecoderMode::Split => {
                let l = self.decode_split_arm(t, mem_l, mem_iace, ArmSide::Left)?;
                let r = self.decode_split_arm(t, mem_r, mem_iace, ArmSide::Right)?;
                Ok(t.concat_cols(&[l, r]))
            }
        }
    }

    /// Forward pass producing a both-arms chunk in real units.
    pub fn policy_forward(&self, obs: &ObservationFrame, z: Option<&[f64]>) -> Result<ActionChunk, PolicyError> {
        let mut t = Tape::new();
        let style = match z {
            Some(v) => {
                if v.len() != self.config.z_dim {
                    return Err(PolicyError::Input(format!(
                        "style vector has {} dims, model expects {}",
                        v.len(),
                        self.config.z_dim
                    )));
                }
                Some(t.input(Matrix::row_vec(v.to_vec())))
            }
            None => None,
        };
        let chunk = self.forward_nodes(&mut t, obs, style)?;
        let m = t.value(chunk);
        ActionChunk::new(m.rows, m.cols, ArmScope::Both, m.data.clone())
    }

    /// Inference entry point: the style variable is the zero vector.
    pub fn infer(&self, obs: &ObservationFrame) -> Result<ActionChunk, PolicyError> {
        let zeros = vec![0.0; self.config.z_dim];
        self.policy_forward(obs, Some(&zeros))
    }

    /// CVAE encoder over [CLS, joint token, k action tokens]; the CLS output
    /// maps to (mu, logvar). Chunks shorter than k are padded with their last
    /// action and masked out of the attention.
    pub fn cvae_encode_nodes(
        &self,
        t: &mut Tape,
        target: &ActionChunk,
        joints_now: &[f64],
    ) -> Result<(NodeId, NodeId), PolicyError> {
        let c = &self.config;
        let dims = c.action_dims();
        if target.dims() != dims {
            return Err(PolicyError::Input(format!(
                "target chunk has {} dims, model expects {dims}",
                target.dims()
            )));
        }
        if target.horizon() > c.chunk_len {
            return Err(PolicyError::Input(format!(
                "target chunk horizon {} exceeds model horizon {}",
                target.horizon(),
                c.chunk_len
            )));
        }
        if joints_now.len() != dims {
            return Err(PolicyError::Input(format!(
                "joints_now has {} dims, expected {dims}",
                joints_now.len()
            )));
        }
        // normalized action rows, last-action padded to the model horizon
        let mut rows = Matrix::zeros(c.chunk_len, dims);
        let mut mask = vec![true; 2 + c.chunk_len];
        for r in 0..c.chunk_len {
            let src = r.min(target.horizon() - 1);
            let norm = normalize(target.row(src), &self.stats.action_mean, &self.stats.action_std);
            rows.row_mut(r).copy_from_slice(&norm);
            if r >= target.horizon() {
                mask[2 + r] = false;
            }
        }
        let actions = t.input(rows);
        let action_toks = self.layers.cvae.action_proj.forward(t, &self.params, actions)?;
        let joints = t.input(Matrix::row_vec(normalize(
            joints_now,
            &self.stats.joint_mean,
            &self.stats.joint_std,
        )));
        let joint_tok = self.layers.cvae.joint_proj.forward(t, &self.params, joints)?;
        let cls = t.param(&self.params, self.layers.cvae.cls);
        let seq = t.concat_rows(&[cls, joint_tok, action_toks]);
        let mut x = self.add_positional(t, seq);
        for block in &self.layers.cvae.blocks {
            x = block.forward(t, &self.params, x, Some(&mask))?;
        }
        let cls_out = t.slice_rows(x, 0, 1);
        let head = self.layers.cvae.head.forward(t, &self.params, cls_out)?;
        let mu = t.slice_cols(head, 0, c.z_dim);
        let logvar = t.slice_cols(head, c.z_dim, c.z_dim);
        Ok((mu, logvar))
    }

    /// Posterior parameters for a demonstration chunk; `z` is left empty
    /// until [`crate::policy::sample_latent`] fills it.
    pub fn cvae_encode(&self, target: &ActionChunk, joints_now: &[f64]) -> Result<LatentStyle, PolicyError> {
        let mut t = Tape::new();
        let (mu, lv) = self.cvae_encode_nodes(&mut t, target, joints_now)?;
        Ok(LatentStyle {
            mean: t.value(mu).data.clone(),
            logvar: t.value(lv).data.clone(),
            z: Vec::new(),
        })
    }

    /// L1 reconstruction plus beta-weighted KL to the standard normal.
    pub fn loss_nodes(
        &self,
        t: &mut Tape,
        pred: NodeId,
        target: &ActionChunk,
        mu: NodeId,
        logvar: NodeId,
        kl_weight: f64,
    ) -> Result<(NodeId, NodeId, NodeId), PolicyError> {
        if (t.rows(pred), t.cols(pred)) != (target.horizon(), target.dims()) {
            return Err(PolicyError::Input(format!(
                "prediction is {}x{}, target is {}x{}",
                t.rows(pred),
                t.cols(pred),
                target.horizon(),
                target.dims()
            )));
        }
        let target_m = Matrix::from_vec(target.horizon(), target.dims(), target.data().to_vec());
        let l1 = t.l1_loss(pred, target_m);
        let kl = t.kl_std_normal(mu, logvar);
        let weighted = t.scale(kl, kl_weight);
        let total = t.add(l1, weighted);
        Ok((total, l1, kl))
    }

    /// Scalar training loss on plain values.
    pub fn loss(
        &self,
        pred: &ActionChunk,
        target: &ActionChunk,
        style: &LatentStyle,
        kl_weight: f64,
    ) -> Result<f64, PolicyError> {
        if pred.horizon() != target.horizon() || pred.dims() != target.dims() {
            return Err(PolicyError::Input(format!(
                "prediction {}x{} does not match target {}x{}",
                pred.horizon(),
                pred.dims(),
                target.horizon(),
                target.dims()
            )));
        }
        let mut t = Tape::new();
        let p = t.input(Matrix::from_vec(pred.horizon(), pred.dims(), pred.data().to_vec()));
        let mu = t.input(Matrix::row_vec(style.mean.clone()));
        let lv = t.input(Matrix::row_vec(style.logvar.clone()));
        let (total, _, _) = self.loss_nodes(&mut t, p, target, mu, lv, kl_weight)?;
        Ok(t.value(total).data[0])
    }

    /// Full training-path loss on one sample: CVAE posterior, reparameterized
    /// style with the supplied noise, policy forward, L1 + beta * KL.
    /// Returns (total, reconstruction, kl) nodes.
    pub fn train_loss_nodes(
        &self,
        t: &mut Tape,
        obs: &ObservationFrame,
        target: &ActionChunk,
        noise: &[f64],
        kl_weight: f64,
    ) -> Result<(NodeId, NodeId, NodeId), PolicyError> {
        if noise.len() != self.config.z_dim {
            return Err(PolicyError::Input(format!(
                "noise vector has {} dims, expected {}",
                noise.len(),
                self.config.z_dim
            )));
        }
        let mut joints_now = obs.joints_left.clone();
        joints_now.extend_from_slice(&obs.joints_right);
        let (mu, logvar) = self.cvae_encode_nodes(t, target, &joints_now)?;
        let half = t.scale(logvar, 0.5);
        let sd = t.exp(half);
        let eps = t.input(Matrix::row_vec(noise.to_vec()));
        let scaled = t.mul(sd, eps);
        let z = t.add(mu, scaled);
        let pred = self.forward_nodes(t, obs, Some(z))?;
        self.loss_nodes(t, pred, target, mu, logvar, kl_weight)
    }
}
