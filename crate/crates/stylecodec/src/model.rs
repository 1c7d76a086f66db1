//! The assembled pipeline: prompt encoder, style head (mixture-density or
//! direct regression), token generator, and timbre fusion, all over one
//! parameter store.

use anyhow::Result;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ChannelLayout, CodecMatrix, CodecSpace};
use crate::fusion::{FusionConfig, FusionParams};
use crate::generator::{
    durations_from_log, fuse_style, length_regulate, predict_durations, text_encode,
    ConfidenceRule, DecodeSchedule, GeneratorConfig, GeneratorParams,
};
use crate::nn::Linear;
use crate::style_mdn::{
    mdn_forward, smsd_sample, MdnConfig, MdnHeadParams, MdnNodes, NoiseMode,
};
use crate::style_text::{PromptEncoderParams, StylePrompt, TemplateBank, Vocab};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

/// Which style head the model carries. `Direct` is the ablation arm that
/// replaces mixture-density sampling with a deterministic regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleHeadKind {
    Mdn,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layout: ChannelLayout,
    pub emotion_count: usize,
    pub text_vocab: usize,
    pub d_hidden: usize,
    pub d_style: usize,
    pub d_embed: usize,
    pub text_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_mult: usize,
    pub dur_hidden: usize,
    pub mdn_hidden: usize,
    pub components: usize,
    pub noise_mode: NoiseMode,
    pub fixed_sigma: f64,
    pub var_floor: f64,
    pub exact_constant: bool,
    pub inference_noise: bool,
    pub style_head: StyleHeadKind,
    pub freeze_style_encoder: bool,
    pub schedule: DecodeSchedule,
    pub confidence: ConfidenceRule,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layout: ChannelLayout::default(),
            emotion_count: 5,
            text_vocab: 40,
            d_hidden: 128,
            d_style: 16,
            d_embed: 32,
            text_blocks: 2,
            decoder_blocks: 4,
            ff_mult: 2,
            dur_hidden: 32,
            mdn_hidden: 64,
            components: 5,
            noise_mode: NoiseMode::IsotropicAcrossClusters,
            fixed_sigma: 0.5,
            var_floor: 1e-6,
            exact_constant: true,
            inference_noise: false,
            style_head: StyleHeadKind::Mdn,
            freeze_style_encoder: false,
            schedule: DecodeSchedule::default(),
            confidence: ConfidenceRule::SampledProb,
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn mdn_config(&self) -> MdnConfig {
        MdnConfig {
            input_dim: self.d_style,
            target_dim: self.d_style,
            hidden: self.mdn_hidden,
            components: self.components,
            mode: self.noise_mode,
            fixed_sigma: self.fixed_sigma,
            var_floor: self.var_floor,
            exact_constant: self.exact_constant,
            inference_noise: self.inference_noise,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            d_hidden: self.d_hidden,
            d_style: self.d_style,
            text_vocab: self.text_vocab,
            layout: self.layout,
            text_blocks: self.text_blocks,
            decoder_blocks: self.decoder_blocks,
            ff_mult: self.ff_mult,
            dur_hidden: self.dur_hidden,
            max_frames: crate::corpus::MAX_FRAMES,
        }
    }
}

/// Deterministic regression head (the no-sampling ablation arm).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectHeadParams {
    pub trunk: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum StyleHead {
    Mdn(MdnHeadParams),
    Direct(DirectHeadParams),
}

impl StyleHead {
    pub fn kind(&self) -> StyleHeadKind {
        match self {
            StyleHead::Mdn(_) => StyleHeadKind::Mdn,
            StyleHead::Direct(_) => StyleHeadKind::Direct,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub bank: TemplateBank,
    pub space: CodecSpace,
    pub prompt_encoder: PromptEncoderParams,
    pub style_head: StyleHead,
    pub generator: GeneratorParams,
    pub fusion: FusionParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        let bank = TemplateBank::builtin();
        let vocab = Vocab::from_bank(&bank);
        let space = CodecSpace::new(cfg.layout, cfg.emotion_count, cfg.d_style)?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::derive(init_seed, "init", 0, 0);
        let prompt_encoder =
            PromptEncoderParams::new(&mut store, &mut rng, vocab.size(), cfg.d_embed, cfg.d_style);
        let style_head = match cfg.style_head {
            StyleHeadKind::Mdn => {
                StyleHead::Mdn(MdnHeadParams::new(&mut store, &mut rng, cfg.mdn_config()))
            }
            StyleHeadKind::Direct => StyleHead::Direct(DirectHeadParams {
                trunk: Linear::new(&mut store, &mut rng, "direct.trunk", cfg.d_style, cfg.mdn_hidden, true),
                out: Linear::new(&mut store, &mut rng, "direct.out", cfg.mdn_hidden, cfg.d_style, true),
            }),
        };
        let generator = GeneratorParams::new(&mut store, &mut rng, cfg.generator_config());
        let fusion = FusionParams::new(&mut store, &mut rng, cfg.fusion, cfg.layout);
        Ok(Model { cfg, store, vocab, bank, space, prompt_encoder, style_head, generator, fusion })
    }

    /// Style-head training loss node for one (prompt-encoding, target) pair.
    /// Mixture head: exact NLL (may be negative); direct head: MSE.
    pub fn style_loss_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        target: &[f64],
        noise: Option<&[f64]>,
    ) -> NodeId {
        match &self.style_head {
            StyleHead::Mdn(head) => {
                let nodes = crate::style_mdn::mdn_forward_graph(g, head, x, noise);
                crate::style_mdn::nll_graph(g, target, &nodes, head.cfg.exact_constant)
            }
            StyleHead::Direct(head) => {
                let h = head.trunk.apply(g, x);
                let h = g.tanh(h);
                let pred = head.out.apply(g, h);
                let t = g.constant(Tensor::row_vector(target.to_vec()));
                let diff = g.sub(pred, t);
                let sq = g.mul(diff, diff);
                g.all_mean(sq)
            }
        }
    }

    /// Mixture nodes for diagnostics (mixture arm only).
    pub fn mdn_nodes_graph(&self, g: &mut Graph, x: NodeId, noise: Option<&[f64]>) -> Option<MdnNodes> {
        match &self.style_head {
            StyleHead::Mdn(head) => Some(crate::style_mdn::mdn_forward_graph(g, head, x, noise)),
            StyleHead::Direct(_) => None,
        }
    }

    /// Encode a style prompt to its semantic vector (plain values).
    pub fn encode_prompt(&self, prompt: &StylePrompt) -> Result<Vec<f64>> {
        crate::style_text::encode_style_prompt(&self.store, &self.prompt_encoder, &self.vocab, prompt)
    }

    /// Inference-time style draw: sample the mixture (or run the direct
    /// regressor). Returns the style vector and the chosen component.
    pub fn predict_style(
        &self,
        prompt: &StylePrompt,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, Option<usize>)> {
        let x = self.encode_prompt(prompt)?;
        match &self.style_head {
            StyleHead::Mdn(head) => {
                let noise = if head.cfg.inference_noise {
                    Some(head.sample_noise(rng))
                } else {
                    None
                };
                let mp = mdn_forward(&self.store, head, &x, noise.as_deref())?;
                let (y, k) = smsd_sample(&mp, rng);
                Ok((y, Some(k)))
            }
            StyleHead::Direct(head) => {
                let mut g = Graph::new(&self.store);
                let xn = g.constant(Tensor::row_vector(x));
                let h = head.trunk.apply(&mut g, xn);
                let h = g.tanh(h);
                let out = head.out.apply(&mut g, h);
                Ok((g.val(out).data.clone(), None))
            }
        }
    }

    /// Frame states for a content sequence fused with a style vector; runs
    /// the duration predictor unless ground-truth durations are supplied.
    pub fn frame_states(
        &self,
        content_tokens: &[usize],
        style_vec: &[f64],
        forced_durations: Option<&[usize]>,
    ) -> Result<(Tensor, Vec<usize>)> {
        let mut g = Graph::new(&self.store);
        let text_h = text_encode(&mut g, &self.generator, content_tokens)?;
        let style = g.constant(Tensor::row_vector(style_vec.to_vec()));
        let fused = fuse_style(&mut g, &self.generator, text_h, style);
        let durations = match forced_durations {
            Some(d) => d.to_vec(),
            None => {
                let log_durs = predict_durations(&mut g, &self.generator, fused);
                durations_from_log(g.val(log_durs))
            }
        };
        let frames = length_regulate(&mut g, fused, &durations);
        Ok((g.val(frames).clone(), durations))
    }

    /// Full inference for one prompt triple → generated token grid.
    pub fn synthesize(
        &self,
        prompt: &StylePrompt,
        content_tokens: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<SynthOutput> {
        let (style_vec, component) = self.predict_style(prompt, rng)?;
        let (frames, durations) = self.frame_states(content_tokens, &style_vec, None)?;
        let codec = crate::generator::iterative_decode(
            &self.store,
            &self.generator,
            &frames,
            &self.cfg.schedule,
            self.cfg.confidence,
            rng,
        )?;
        Ok(SynthOutput { codec, style_vec, component, durations })
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub codec: CodecMatrix,
    pub style_vec: Vec<f64>,
    pub component: Option<usize>,
    pub durations: Vec<usize>,
}
