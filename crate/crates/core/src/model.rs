//! Full model assembly: patch embedding, transformer blocks with temporal
//! fusion in the shallow half, classification head, and the ablation
//! variants that switch the temporal modules on/off or reverse their
//! direction.

use crate::attention::{
    expand_token_mask, qkta_token_mask, sdsa_forward, ssa_forward, tim_update, AttentionConfig,
    AttentionKind,
};
use crate::encoders::{encode_batch, EncodingSpec};
use crate::error::{Error, Result};
use crate::layers::{linear, register_linear, BnLayer, Phase};
use crate::neurons::{lif_sequence, lif_single, LifParams};
use crate::numerics::{Element, ParamId, ParamSet, Tape, Tensor, ValueId};
use crate::tea::{alpha_of_theta, tea_branch, TeaParams, TemporalDirection};
use crate::tmlp::TmlpLayer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_placement() -> f64 {
    0.5
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_shallow() -> AttentionKind {
    AttentionKind::Qkta
}
fn default_deep() -> AttentionKind {
    AttentionKind::Ssa
}
fn default_tim_alpha() -> f64 {
    0.5
}
fn default_tmlp_direction() -> TemporalDirection {
    TemporalDirection::Backward
}

/// Complete architecture description. Serialized verbatim into checkpoints
/// and run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Fraction of shallow blocks that carry the temporal pair (TEA +
    /// T-MLP); rounded up, so depth 4 at 0.5 gives blocks 0 and 1.
    #[serde(default = "default_placement")]
    pub placement: f64,
    #[serde(default = "default_shallow")]
    pub shallow_attention: AttentionKind,
    #[serde(default = "default_deep")]
    pub deep_attention: AttentionKind,
    #[serde(default)]
    pub disable_tea: bool,
    #[serde(default)]
    pub disable_tmlp: bool,
    #[serde(default)]
    pub tea_direction: TemporalDirection,
    #[serde(default = "default_tmlp_direction")]
    pub tmlp_direction: TemporalDirection,
    #[serde(default)]
    pub encoder: EncodingSpec,
    #[serde(default)]
    pub neuron: LifParams,
    #[serde(default = "default_tim_alpha")]
    pub tim_alpha: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            time_steps: 4,
            in_channels: 1,
            image_h: 14,
            image_w: 14,
            patch_size: 7,
            embed_dim: 32,
            depth: 2,
            heads: default_heads(),
            mlp_ratio: default_mlp_ratio(),
            num_classes: 10,
            placement: default_placement(),
            shallow_attention: default_shallow(),
            deep_attention: default_deep(),
            disable_tea: false,
            disable_tmlp: false,
            tea_direction: TemporalDirection::Forward,
            tmlp_direction: TemporalDirection::Backward,
            encoder: EncodingSpec::default(),
            neuron: LifParams::default(),
            tim_alpha: default_tim_alpha(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_steps < 1 {
            return Err(Error::config("time_steps", "must be >= 1"));
        }
        if self.patch_size == 0 || self.image_h % self.patch_size != 0 {
            return Err(Error::config(
                "patch_size",
                format!("image height {} not divisible by patch {}", self.image_h, self.patch_size),
            ));
        }
        if self.image_w % self.patch_size != 0 {
            return Err(Error::config(
                "patch_size",
                format!("image width {} not divisible by patch {}", self.image_w, self.patch_size),
            ));
        }
        if self.depth < 1 {
            return Err(Error::config("depth", "must be >= 1"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("embed dim {} not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::config("mlp_ratio", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.placement) {
            return Err(Error::config("placement", format!("{} outside [0, 1]", self.placement)));
        }
        if !(0.0..=1.0).contains(&self.tim_alpha) {
            return Err(Error::config("tim_alpha", format!("{} outside [0, 1]", self.tim_alpha)));
        }
        self.encoder
            .validate()
            .map_err(|e| Error::config("encoder", e.to_string()))?;
        self.neuron
            .validate()
            .map_err(|e| Error::config("neuron", e.to_string()))?;
        Ok(())
    }

    /// Number of leading blocks carrying the temporal pair.
    pub fn temporal_blocks(&self) -> usize {
        ((self.placement * self.depth as f64).ceil() as usize).min(self.depth)
    }

    pub fn tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

/// Table 4/5 style variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Baseline,
    TmlpOnly,
    TeaOnly,
    Full,
    TeaBwdTmlpFwd,
    TeaBwdTmlpBwd,
    TeaFwdTmlpFwd,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Baseline,
        AblationVariant::TmlpOnly,
        AblationVariant::TeaOnly,
        AblationVariant::Full,
        AblationVariant::TeaBwdTmlpFwd,
        AblationVariant::TeaBwdTmlpBwd,
        AblationVariant::TeaFwdTmlpFwd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::TmlpOnly => "+tmlp",
            AblationVariant::TeaOnly => "+tea",
            AblationVariant::Full => "full",
            AblationVariant::TeaBwdTmlpFwd => "tea_bwd+tmlp_fwd",
            AblationVariant::TeaBwdTmlpBwd => "tea_bwd+tmlp_bwd",
            AblationVariant::TeaFwdTmlpFwd => "tea_fwd+tmlp_fwd",
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "ablation",
                    format!(
                        "unknown variant `{s}`; expected one of {}",
                        AblationVariant::ALL.map(|v| v.name()).join(", ")
                    ),
                )
            })
    }
}

/// Apply an ablation variant. Direction reversal for TEA transposes the
/// time axis around the mask product; for the T-MLP it runs the recurrence
/// in increasing r from h_0.
pub fn configure_ablation(cfg: &ModelConfig, variant: AblationVariant) -> ModelConfig {
    use AblationVariant::*;
    use TemporalDirection::{Backward, Forward};
    let mut out = cfg.clone();
    let (tea_on, tmlp_on, tea_dir, tmlp_dir) = match variant {
        Baseline => (false, false, Forward, Backward),
        TmlpOnly => (false, true, Forward, Backward),
        TeaOnly => (true, false, Forward, Backward),
        Full => (true, true, Forward, Backward),
        TeaBwdTmlpFwd => (true, true, Backward, Forward),
        TeaBwdTmlpBwd => (true, true, Backward, Backward),
        TeaFwdTmlpFwd => (true, true, Forward, Forward),
    };
    out.disable_tea = !tea_on;
    out.disable_tmlp = !tmlp_on;
    out.tea_direction = tea_dir;
    out.tmlp_direction = tmlp_dir;
    out
}

struct AttnSublayer<F: Element> {
    cfg: AttentionConfig,
    w_q: ParamId,
    bn_q: BnLayer<F>,
    w_k: ParamId,
    bn_k: BnLayer<F>,
    value_path: Option<(ParamId, BnLayer<F>)>,
    w_proj: ParamId,
    bn_proj: BnLayer<F>,
    tea: Option<TeaParams>,
    tea_direction: TemporalDirection,
    /// Channel-mixing map inside TIM's step-wise extractor.
    tim_mix: Option<ParamId>,
}

enum MlpSublayer<F: Element> {
    Plain {
        w1: ParamId,
        w2: ParamId,
        bn: BnLayer<F>,
        lif: LifParams,
    },
    Temporal(TmlpLayer<F>),
}

struct Block<F: Element> {
    attn: AttnSublayer<F>,
    mlp: MlpSublayer<F>,
}

/// Input to a forward pass: static images are encoded on the fly, temporal
/// inputs (already time-major) bypass the encoder.
pub enum ForwardInput<'a, F: Element> {
    /// `[B, C, H, W]` with one stable key per sample (dataset index, so
    /// rate-encoder draws don't depend on batch composition) and the seed
    /// for this pass.
    Static {
        images: &'a Tensor<F>,
        sample_keys: &'a [u64],
        encode_seed: u64,
    },
    /// `[T, B, C, H, W]`
    Temporal(&'a Tensor<F>),
}

pub struct ForwardOutput {
    pub logits: ValueId,
    /// Spike-typed layer outputs for firing-rate diagnostics.
    pub spikes: Vec<(String, ValueId)>,
}

pub struct Model<F: Element> {
    pub cfg: ModelConfig,
    pub params: ParamSet<F>,
    embed_w: ParamId,
    embed_bn: BnLayer<F>,
    blocks: Vec<Block<F>>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Deterministic build: parameters are drawn in registration order from a
/// ChaCha stream seeded by `cfg.seed`, so equal configs give bit-identical
/// models.
pub fn build_model<F: Element>(cfg: &ModelConfig) -> Result<Model<F>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.embed_dim;

    let embed_w = register_linear(&mut params, &mut rng, "embed.w", cfg.patch_dim(), d)?;
    let embed_bn = BnLayer::register(&mut params, "embed.bn", d)?;

    let temporal_blocks = cfg.temporal_blocks();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let temporal = i < temporal_blocks;
        let kind = if temporal { cfg.shallow_attention } else { cfg.deep_attention };
        let prefix = format!("blocks.{i}");

        let attn_cfg = AttentionConfig {
            kind,
            heads: cfg.heads,
            tim_alpha: cfg.tim_alpha,
            lif: cfg.neuron,
            ..Default::default()
        };
        let w_q = register_linear(&mut params, &mut rng, format!("{prefix}.attn.w_q"), d, d)?;
        let bn_q = BnLayer::register(&mut params, &format!("{prefix}.attn.bn_q"), d)?;
        let w_k = register_linear(&mut params, &mut rng, format!("{prefix}.attn.w_k"), d, d)?;
        let bn_k = BnLayer::register(&mut params, &format!("{prefix}.attn.bn_k"), d)?;
        let value_path = match kind {
            AttentionKind::Qkta => None,
            _ => {
                let w_v =
                    register_linear(&mut params, &mut rng, format!("{prefix}.attn.w_v"), d, d)?;
                let bn_v = BnLayer::register(&mut params, &format!("{prefix}.attn.bn_v"), d)?;
                Some((w_v, bn_v))
            }
        };
        let w_proj = register_linear(&mut params, &mut rng, format!("{prefix}.attn.w_proj"), d, d)?;
        let bn_proj = BnLayer::register(&mut params, &format!("{prefix}.attn.bn_proj"), d)?;
        let tea = if temporal && !cfg.disable_tea {
            Some(TeaParams::register(&mut params, format!("{prefix}.tea.theta"))?)
        } else {
            None
        };
        let tim_mix = match kind {
            AttentionKind::Tim => Some(register_linear(
                &mut params,
                &mut rng,
                format!("{prefix}.attn.tim_mix"),
                d,
                d,
            )?),
            _ => None,
        };

        let mlp = if temporal && !cfg.disable_tmlp {
            MlpSublayer::Temporal(TmlpLayer::register(
                &mut params,
                &mut rng,
                &format!("{prefix}.tmlp"),
                d,
                cfg.hidden_dim(),
                cfg.neuron,
                cfg.tmlp_direction,
            )?)
        } else {
            let w1 = register_linear(
                &mut params,
                &mut rng,
                format!("{prefix}.mlp.w1"),
                d,
                cfg.hidden_dim(),
            )?;
            let w2 = register_linear(
                &mut params,
                &mut rng,
                format!("{prefix}.mlp.w2"),
                cfg.hidden_dim(),
                d,
            )?;
            let bn = BnLayer::register(&mut params, &format!("{prefix}.mlp.bn"), d)?;
            MlpSublayer::Plain { w1, w2, bn, lif: cfg.neuron }
        };

        blocks.push(Block {
            attn: AttnSublayer {
                cfg: attn_cfg,
                w_q,
                bn_q,
                w_k,
                bn_k,
                value_path,
                w_proj,
                bn_proj,
                tea,
                tea_direction: cfg.tea_direction,
                tim_mix,
            },
            mlp,
        });
    }

    let head_w = register_linear(&mut params, &mut rng, "head.w", d, cfg.num_classes)?;
    let head_b = params.register("head.b", Tensor::zeros(vec![cfg.num_classes]))?;

    Ok(Model { cfg: cfg.clone(), params, embed_w, embed_bn, blocks, head_w, head_b })
}

/// linear + BN over `[T, R, d_in]`, weights shared across steps; returns
/// the real-valued pre-spike current `[T, R, d_out]`. Free function so
/// callers can borrow the BN layer and the params from disjoint fields.
fn project_norm<F: Element>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    x: ValueId,
    w: ParamId,
    bn: &mut BnLayer<F>,
    phase: Phase,
) -> Result<ValueId> {
    let shape = tape.shape(x).to_vec();
    let (t_steps, rows, d_in) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, vec![t_steps * rows, d_in])?;
    let proj = linear(tape, params, flat, w)?;
    let d_out = tape.shape(proj)[1];
    let normed = bn.forward(tape, params, proj, phase)?;
    tape.reshape(normed, vec![t_steps, rows, d_out])
}

/// [`project_norm`] followed by a temporal neuron: the usual spike branch.
fn spike_projection<F: Element>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    neuron: &LifParams,
    x: ValueId,
    w: ParamId,
    bn: &mut BnLayer<F>,
    phase: Phase,
) -> Result<ValueId> {
    let current = project_norm(tape, params, x, w, bn, phase)?;
    lif_sequence(tape, current, neuron)
}

impl<F: Element> Model<F> {
    pub fn param_count(&self) -> usize {
        self.params.entries().iter().map(|e| e.value.numel()).sum()
    }

    /// Batch-norm running statistics in deterministic order (checkpointed
    /// alongside the parameters so eval-mode forwards reproduce exactly).
    pub fn bn_buffers(&self) -> Vec<(String, &crate::numerics::BnRunning<F>)> {
        let mut out: Vec<(String, &crate::numerics::BnRunning<F>)> =
            vec![("embed.bn".into(), &self.embed_bn.running)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn.bn_q"), &b.attn.bn_q.running));
            out.push((format!("blocks.{i}.attn.bn_k"), &b.attn.bn_k.running));
            if let Some((_, bn_v)) = &b.attn.value_path {
                out.push((format!("blocks.{i}.attn.bn_v"), &bn_v.running));
            }
            out.push((format!("blocks.{i}.attn.bn_proj"), &b.attn.bn_proj.running));
            match &b.mlp {
                MlpSublayer::Plain { bn, .. } => {
                    out.push((format!("blocks.{i}.mlp.bn"), &bn.running))
                }
                MlpSublayer::Temporal(t) => {
                    out.push((format!("blocks.{i}.tmlp.bn"), &t.bn.running))
                }
            }
        }
        out
    }

    pub fn bn_buffers_mut(&mut self) -> Vec<(String, &mut crate::numerics::BnRunning<F>)> {
        let mut out: Vec<(String, &mut crate::numerics::BnRunning<F>)> =
            vec![("embed.bn".into(), &mut self.embed_bn.running)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.attn.bn_q"), &mut b.attn.bn_q.running));
            out.push((format!("blocks.{i}.attn.bn_k"), &mut b.attn.bn_k.running));
            if let Some((_, bn_v)) = &mut b.attn.value_path {
                out.push((format!("blocks.{i}.attn.bn_v"), &mut bn_v.running));
            }
            out.push((format!("blocks.{i}.attn.bn_proj"), &mut b.attn.bn_proj.running));
            match &mut b.mlp {
                MlpSublayer::Plain { bn, .. } => {
                    out.push((format!("blocks.{i}.mlp.bn"), &mut bn.running))
                }
                MlpSublayer::Temporal(t) => {
                    out.push((format!("blocks.{i}.tmlp.bn"), &mut t.bn.running))
                }
            }
        }
        out
    }

    /// Learned decay factor per temporal block, in block order.
    pub fn tea_alphas(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter_map(|b| b.attn.tea.as_ref())
            .map(|tea| alpha_of_theta(self.params.value(tea.theta).data()[0].into_f64()))
            .collect()
    }

    /// Cut static frames into non-overlapping flattened patches:
    /// one `[B, C, H, W]` step -> `[B*N, P]` rows.
    fn patchify(&self, frame: &[F], batch: usize) -> Tensor<F> {
        let cfg = &self.cfg;
        let (c, h, w, p) = (cfg.in_channels, cfg.image_h, cfg.image_w, cfg.patch_size);
        let (gh, gw) = (h / p, w / p);
        let patch_dim = cfg.patch_dim();
        let tokens = cfg.tokens();
        let mut out = vec![F::zero(); batch * tokens * patch_dim];
        for b in 0..batch {
            for gy in 0..gh {
                for gx in 0..gw {
                    let token = gy * gw + gx;
                    for ch in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                let src = ((b * c + ch) * h + gy * p + py) * w + gx * p + px;
                                let dst =
                                    (b * tokens + token) * patch_dim + (ch * p + py) * p + px;
                                out[dst] = frame[src];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch * tokens, patch_dim], out).expect("sized above")
    }

    /// Run the network. `phase` selects batch-norm statistics handling; the
    /// eval-mode forward is a deterministic pure function of parameters and
    /// input.
    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        input: ForwardInput<'_, F>,
        phase: Phase,
    ) -> Result<ForwardOutput> {
        let cfg = self.cfg.clone();
        let mut spikes_log: Vec<(String, ValueId)> = Vec::new();

        // ---- encode + patchify into a [T, B*N, P] leaf ----
        let frames: Tensor<F> = match input {
            ForwardInput::Static { images, sample_keys, encode_seed } => {
                let shape = images.shape();
                if shape.len() != 4
                    || shape[1] != cfg.in_channels
                    || shape[2] != cfg.image_h
                    || shape[3] != cfg.image_w
                {
                    return Err(Error::ShapeMismatch {
                        op: "forward images",
                        lhs: shape.to_vec(),
                        rhs: vec![0, cfg.in_channels, cfg.image_h, cfg.image_w],
                    });
                }
                let spec = EncodingSpec { seed: encode_seed, t_steps: cfg.time_steps, ..cfg.encoder };
                encode_batch(&spec, images, sample_keys)?
            }
            ForwardInput::Temporal(frames) => {
                let shape = frames.shape();
                if shape.len() != 5
                    || shape[0] != cfg.time_steps
                    || shape[2] != cfg.in_channels
                    || shape[3] != cfg.image_h
                    || shape[4] != cfg.image_w
                {
                    return Err(Error::ShapeMismatch {
                        op: "forward frames",
                        lhs: shape.to_vec(),
                        rhs: vec![cfg.time_steps, 0, cfg.in_channels, cfg.image_h, cfg.image_w],
                    });
                }
                frames.clone()
            }
        };
        let t_steps = cfg.time_steps;
        let batch = frames.shape()[1];
        let frame_len = frames.numel() / t_steps;
        let tokens = cfg.tokens();
        let rows = batch * tokens;

        let mut patch_data = Vec::with_capacity(t_steps * rows * cfg.patch_dim());
        for t in 0..t_steps {
            let frame = &frames.data()[t * frame_len..(t + 1) * frame_len];
            patch_data.extend_from_slice(self.patchify(frame, batch).data());
        }
        let patches =
            tape.constant(Tensor::new(vec![t_steps, rows, cfg.patch_dim()], patch_data)?);

        // ---- patch embedding: linear + BN + LIF per step, shared weights ----
        let mut x = spike_projection(
            tape,
            &self.params,
            &cfg.neuron,
            patches,
            self.embed_w,
            &mut self.embed_bn,
            phase,
        )?;
        spikes_log.push(("embed".into(), x));

        // ---- transformer blocks: X += Attn(X); X += MLP(X) ----
        for i in 0..self.blocks.len() {
            let attn_out = self.attention_sublayer(tape, i, x, batch, phase, &mut spikes_log)?;
            x = tape.add(x, attn_out)?;
            let mlp_out = self.mlp_sublayer(tape, i, x, phase, &mut spikes_log)?;
            x = tape.add(x, mlp_out)?;
        }

        // ---- head: re-spike, pool over time and tokens, classify ----
        let final_spikes = lif_sequence(tape, x, &cfg.neuron)?;
        spikes_log.push(("head".into(), final_spikes));
        let shaped = tape.reshape(final_spikes, vec![t_steps, batch, tokens, cfg.embed_dim])?;
        let pooled = tape.mean_axes(shaped, &[0, 2])?;
        let logits = linear(tape, &self.params, pooled, self.head_w)?;
        let bias = tape.param(&self.params, self.head_b);
        let logits = tape.add(logits, bias)?;
        Ok(ForwardOutput { logits, spikes: spikes_log })
    }

    fn attention_sublayer(
        &mut self,
        tape: &mut Tape<F>,
        i: usize,
        x: ValueId,
        batch: usize,
        phase: Phase,
        spikes_log: &mut Vec<(String, ValueId)>,
    ) -> Result<ValueId> {
        let neuron = self.cfg.neuron;
        let tokens = self.cfg.tokens();
        let shape = tape.shape(x).to_vec();
        let (t_steps, rows, d) = (shape[0], shape[1], shape[2]);

        let attn_cfg = self.blocks[i].attn.cfg;
        let (w_q, w_k, w_proj) = (
            self.blocks[i].attn.w_q,
            self.blocks[i].attn.w_k,
            self.blocks[i].attn.w_proj,
        );
        let tea = self.blocks[i].attn.tea;
        let tea_dir = self.blocks[i].attn.tea_direction;
        let tim_mix = self.blocks[i].attn.tim_mix;
        let w_v = self.blocks[i].attn.value_path.as_ref().map(|(w, _)| *w);

        let q = spike_projection(
            tape,
            &self.params,
            &neuron,
            x,
            w_q,
            &mut self.blocks[i].attn.bn_q,
            phase,
        )?;
        spikes_log.push((format!("blocks.{i}.attn.q"), q));
        let q4 = tape.reshape(q, vec![t_steps, batch, tokens, d])?;

        // The value-bearing branch: TEA, when present, fuses the
        // real-valued pre-spike current along time, and the branch neuron
        // re-binarizes the fused result (K carries the content for QKTA,
        // V otherwise).
        let mut value_branch = |tape: &mut Tape<F>,
                                bn: &mut BnLayer<F>,
                                w: ParamId,
                                label: &str,
                                with_tea: bool,
                                spikes_log: &mut Vec<(String, ValueId)>|
         -> Result<ValueId> {
            let current = project_norm(tape, &self.params, x, w, bn, phase)?;
            let spikes = match (with_tea, tea) {
                (true, Some(tea_params)) => {
                    let fused =
                        tea_branch(tape, current, &self.params, &tea_params, &neuron, tea_dir)?;
                    spikes_log.push((format!("blocks.{i}.attn.tea"), fused));
                    fused
                }
                _ => lif_sequence(tape, current, &neuron)?,
            };
            spikes_log.push((format!("blocks.{i}.attn.{label}"), spikes));
            tape.reshape(spikes, vec![t_steps, batch, tokens, d])
        };

        let core = match attn_cfg.kind {
            AttentionKind::Qkta => {
                let bn_k = &mut self.blocks[i].attn.bn_k;
                let carrier = value_branch(tape, bn_k, w_k, "k", true, spikes_log)?;
                let dh = d / attn_cfg.heads;
                let mut steps = Vec::with_capacity(t_steps);
                for t in 0..t_steps {
                    let qt = tape.index0(q4, t)?;
                    let kt = tape.index0(carrier, t)?;
                    let mask = qkta_token_mask(tape, qt, &attn_cfg)?;
                    let mask_full = expand_token_mask(tape, mask, dh)?;
                    steps.push(tape.mul(kt, mask_full)?);
                }
                tape.stack(&steps)?
            }
            AttentionKind::Ssa | AttentionKind::Sdsa | AttentionKind::Tim => {
                let k4 = {
                    let bn_k = &mut self.blocks[i].attn.bn_k;
                    value_branch(tape, bn_k, w_k, "k", false, spikes_log)?
                };
                let v_used = {
                    let w_v = w_v.expect("value path registered for this kind");
                    let (_, bn_v) = self.blocks[i].attn.value_path.as_mut().expect("has V");
                    value_branch(tape, bn_v, w_v, "v", true, spikes_log)?
                };
                match attn_cfg.kind {
                    AttentionKind::Ssa => ssa_forward(tape, q4, k4, v_used, &attn_cfg)?,
                    AttentionKind::Sdsa => sdsa_forward(tape, q4, k4, v_used, &attn_cfg)?,
                    AttentionKind::Tim => {
                        let mix = tim_mix.expect("tim mixing map registered");
                        let params = &self.params;
                        let q_tim = tim_update(tape, q4, attn_cfg.tim_alpha, |tp, prev| {
                            let s = tp.shape(prev).to_vec();
                            let flat = tp.reshape(prev, vec![s[0] * s[1], s[2]])?;
                            let mixed = linear(tp, params, flat, mix)?;
                            let spiked = lif_single(tp, mixed, &neuron)?;
                            tp.reshape(spiked, s)
                        })?;
                        ssa_forward(tape, q_tim, k4, v_used, &attn_cfg)?
                    }
                    _ => unreachable!(),
                }
            }
        };

        let flat = tape.reshape(core, vec![t_steps * rows, d])?;
        let proj = linear(tape, &self.params, flat, w_proj)?;
        let normed = self.blocks[i]
            .attn
            .bn_proj
            .forward(tape, &self.params, proj, phase)?;
        tape.reshape(normed, vec![t_steps, rows, d])
    }

    fn mlp_sublayer(
        &mut self,
        tape: &mut Tape<F>,
        i: usize,
        x: ValueId,
        phase: Phase,
        spikes_log: &mut Vec<(String, ValueId)>,
    ) -> Result<ValueId> {
        let shape = tape.shape(x).to_vec();
        let (t_steps, rows, d) = (shape[0], shape[1], shape[2]);
        let params = &self.params;
        match &mut self.blocks[i].mlp {
            MlpSublayer::Temporal(layer) => {
                let out = layer.forward(tape, params, x, phase)?;
                spikes_log.push((format!("blocks.{i}.tmlp"), out.y));
                Ok(out.y)
            }
            MlpSublayer::Plain { w1, w2, bn, lif } => {
                let (w1, w2, lif) = (*w1, *w2, *lif);
                let flat = tape.reshape(x, vec![t_steps * rows, d])?;
                let up = linear(tape, params, flat, w1)?;
                let hidden = tape.shape(up)[1];
                let up_steps = tape.reshape(up, vec![t_steps, rows, hidden])?;
                let h1 = lif_sequence(tape, up_steps, &lif)?;
                spikes_log.push((format!("blocks.{i}.mlp.h"), h1));
                let h_flat = tape.reshape(h1, vec![t_steps * rows, hidden])?;
                let down = linear(tape, params, h_flat, w2)?;
                let normed = bn.forward(tape, params, down, phase)?;
                let per_step = tape.reshape(normed, vec![t_steps, rows, d])?;
                let y = lif_sequence(tape, per_step, &lif)?;
                spikes_log.push((format!("blocks.{i}.mlp.out"), y));
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            time_steps: 4,
            in_channels: 1,
            image_h: 8,
            image_w: 8,
            patch_size: 4,
            embed_dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 3,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn placement_marks_leading_half() {
        let cfg = tiny_config();
        assert_eq!(cfg.temporal_blocks(), 2);
        let model = build_model::<f32>(&cfg).unwrap();
        for i in [0, 1] {
            assert!(model.params.id_of(&format!("blocks.{i}.tea.theta")).is_some());
            assert!(model.params.id_of(&format!("blocks.{i}.tmlp.w_fx")).is_some());
        }
        for i in [2, 3] {
            assert!(model.params.id_of(&format!("blocks.{i}.tea.theta")).is_none());
            assert!(model.params.id_of(&format!("blocks.{i}.mlp.w1")).is_some());
        }
        assert_eq!(model.tea_alphas(), vec![0.75, 0.75]);

        // odd depth rounds up
        let cfg3 = ModelConfig { depth: 3, ..tiny_config() };
        assert_eq!(cfg3.temporal_blocks(), 2);
    }

    #[test]
    fn zero_placement_is_vanilla_transformer() {
        let cfg = ModelConfig { placement: 0.0, ..tiny_config() };
        let model = build_model::<f32>(&cfg).unwrap();
        assert!(model.tea_alphas().is_empty());
        assert!(model
            .params
            .entries()
            .iter()
            .all(|e| !e.name.contains("tea") && !e.name.contains("tmlp")));
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let cfg = tiny_config();
        let a = build_model::<f32>(&cfg).unwrap();
        let b = build_model::<f32>(&cfg).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (ea, eb) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value.data(), eb.value.data());
        }
    }

    #[test]
    fn ablation_parameter_accounting_is_exact() {
        let cfg = tiny_config();
        let full = build_model::<f32>(&configure_ablation(&cfg, AblationVariant::Full)).unwrap();
        let baseline =
            build_model::<f32>(&configure_ablation(&cfg, AblationVariant::Baseline)).unwrap();
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim());
        let per_block = 1 + d * h + h * h + h; // theta + W_fx + W_fh + gate bias
        let want = cfg.temporal_blocks() * per_block;
        assert_eq!(full.param_count() - baseline.param_count(), want);
        assert!(baseline
            .params
            .entries()
            .iter()
            .all(|e| !e.name.contains("tea") && !e.name.contains("tmlp")));
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = tiny_config();
        assert_eq!(cfg.tokens(), 4);
        let mut model = build_model::<f32>(&cfg).unwrap();
        let images = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i % 7) as f32 / 7.0);
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                ForwardInput::Static { images: &images, sample_keys: &[0, 1], encode_seed: 0 },
                Phase::Eval,
            )
            .unwrap();
        assert_eq!(tape.shape(out.logits), &[2, 3]);
        // every logged spike layer is binary
        for (name, id) in &out.spikes {
            assert!(
                tape.value(*id).data().iter().all(|&v| v == 0.0 || v == 1.0),
                "{name} not binary"
            );
        }
    }

    #[test]
    fn zero_input_logits_equal_classifier_bias() {
        let cfg = ModelConfig {
            encoder: EncodingSpec { kind: EncoderKind::Direct, t_steps: 4, seed: 0 },
            ..tiny_config()
        };
        let mut model = build_model::<f32>(&cfg).unwrap();
        let images = Tensor::zeros(vec![2, 1, 8, 8]);
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                ForwardInput::Static { images: &images, sample_keys: &[0, 1], encode_seed: 0 },
                Phase::Eval,
            )
            .unwrap();
        let bias = model.params.value(model.head_b).data();
        for row in tape.value(out.logits).data().chunks(3) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn permuting_batch_permutes_logits() {
        let cfg = ModelConfig {
            encoder: EncodingSpec { kind: EncoderKind::Direct, t_steps: 4, seed: 0 },
            ..tiny_config()
        };
        let mut model = build_model::<f32>(&cfg).unwrap();
        let a = Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i * 13) % 11) as f32 / 11.0);
        let b = Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i * 7) % 5) as f32 / 5.0);
        let mut ab = a.data().to_vec();
        ab.extend_from_slice(b.data());
        let mut ba = b.data().to_vec();
        ba.extend_from_slice(a.data());
        let ab = Tensor::new(vec![2, 1, 8, 8], ab).unwrap();
        let ba = Tensor::new(vec![2, 1, 8, 8], ba).unwrap();

        let mut run = |images: &Tensor<f32>, keys: &[u64]| {
            let mut tape = Tape::new();
            let out = model
                .forward(
                    &mut tape,
                    ForwardInput::Static { images, sample_keys: keys, encode_seed: 0 },
                    Phase::Eval,
                )
                .unwrap();
            tape.value(out.logits).data().to_vec()
        };
        let fwd = run(&ab, &[10, 20]);
        let rev = run(&ba, &[20, 10]);
        assert_eq!(&fwd[0..3], &rev[3..6]);
        assert_eq!(&fwd[3..6], &rev[0..3]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let mut model = build_model::<f32>(&cfg).unwrap();
        let frames = Tensor::from_fn(vec![4, 2, 1, 8, 8], |i| ((i * 31) % 17) as f32 / 17.0);
        let mut run = |model: &mut Model<f32>| {
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, ForwardInput::Temporal(&frames), Phase::Eval)
                .unwrap();
            tape.value(out.logits).data().to_vec()
        };
        let one = run(&mut model);
        let two = run(&mut model);
        assert_eq!(one, two);
    }

    #[test]
    fn every_attention_kind_runs_in_a_model() {
        for kind in [
            AttentionKind::Qkta,
            AttentionKind::Ssa,
            AttentionKind::Sdsa,
            AttentionKind::Tim,
        ] {
            let cfg = ModelConfig {
                shallow_attention: kind,
                deep_attention: kind,
                depth: 2,
                ..tiny_config()
            };
            let mut model = build_model::<f32>(&cfg).unwrap();
            let frames = Tensor::from_fn(vec![4, 1, 1, 8, 8], |i| (i % 2) as f32);
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, ForwardInput::Temporal(&frames), Phase::Train)
                .unwrap();
            assert_eq!(tape.shape(out.logits), &[1, 3]);
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = ModelConfig { patch_size: 3, ..tiny_config() };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "patch_size"),
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = ModelConfig { heads: 5, ..tiny_config() };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("expected config error, got {other:?}"),
        }
        let bad = ModelConfig { placement: 1.5, ..tiny_config() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ablation_variants_parse_and_configure() {
        let cfg = tiny_config();
        let full: AblationVariant = "full".parse().unwrap();
        let c = configure_ablation(&cfg, full);
        assert!(!c.disable_tea && !c.disable_tmlp);
        assert_eq!(c.tea_direction, TemporalDirection::Forward);
        assert_eq!(c.tmlp_direction, TemporalDirection::Backward);

        let b: AblationVariant = "baseline".parse().unwrap();
        let c = configure_ablation(&cfg, b);
        assert!(c.disable_tea && c.disable_tmlp);

        let v: AblationVariant = "tea_bwd+tmlp_fwd".parse().unwrap();
        let c = configure_ablation(&cfg, v);
        assert_eq!(c.tea_direction, TemporalDirection::Backward);
        assert_eq!(c.tmlp_direction, TemporalDirection::Forward);

        assert!("nonsense".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn tea_backward_equals_forward_on_constant_frames() {
        // a time-constant input is invariant under time reversal, so both
        // directions must agree exactly
        let base = ModelConfig {
            depth: 2,
            disable_tmlp: true,
            encoder: EncodingSpec { kind: EncoderKind::Direct, t_steps: 4, seed: 0 },
            ..tiny_config()
        };
        let frame = Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i * 5) % 9) as f32 / 9.0);
        let mut const_frames = Vec::new();
        for _ in 0..4 {
            const_frames.extend_from_slice(frame.data());
        }
        let frames = Tensor::new(vec![4, 1, 1, 8, 8], const_frames).unwrap();

        let mut out = Vec::new();
        for dir in [TemporalDirection::Forward, TemporalDirection::Backward] {
            let cfg = ModelConfig { tea_direction: dir, ..base.clone() };
            let mut model = build_model::<f32>(&cfg).unwrap();
            let mut tape = Tape::new();
            let o = model
                .forward(&mut tape, ForwardInput::Temporal(&frames), Phase::Eval)
                .unwrap();
            out.push(tape.value(o.logits).data().to_vec());
        }
        assert_eq!(out[0], out[1]);
    }
}
