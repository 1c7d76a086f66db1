//! Encoder–decoder token generation stack.
//!
//! Text encoding (attention+conv blocks over phoneme embeddings), style
//! fusion by cross-attention onto the global style vector, log-domain
//! duration prediction, length regulation, cosine-schedule channel masking,
//! the masked-channel training loss, and confidence-based iterative
//! decoding. The decoder conditions channel i on the embedded sum of
//! channels < i, the unmasked tokens of channel i (MASK embedding
//! elsewhere), and the frame states — never on timbre, which has no input
//! here at all.

use anyhow::{bail, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ChannelLayout, CodecMatrix};
use crate::nn::{sinusoidal_positions, Attention, ConvAttnBlock, LayerNorm, Linear};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Token embeddings and the positional table are kept at comparable scale
/// so neither buries the other in the input sum.
const EMB_STD: f64 = 0.3;
const POS_SCALE: f64 = 0.3;

fn positions(len: usize, dim: usize) -> Tensor {
    sinusoidal_positions(len, dim).map(|v| v * POS_SCALE)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_hidden: usize,
    pub d_style: usize,
    pub text_vocab: usize,
    pub layout: ChannelLayout,
    pub text_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_mult: usize,
    pub dur_hidden: usize,
    pub max_frames: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_hidden: 128,
            d_style: 16,
            text_vocab: 40,
            layout: ChannelLayout::default(),
            text_blocks: 2,
            decoder_blocks: 4,
            ff_mult: 2,
            dur_hidden: 32,
            max_frames: crate::corpus::MAX_FRAMES,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub cfg: GeneratorConfig,
    pub text_emb: ParamId,
    pub text_blocks: Vec<ConvAttnBlock>,
    pub text_ln: LayerNorm,
    pub fuse_attn: Attention,
    pub fuse_ln: LayerNorm,
    pub dur_hidden: Linear,
    pub dur_out: Linear,
    /// One (codebook+1)×d table per channel; row `codebook` is MASK.
    pub channel_emb: Vec<ParamId>,
    pub channel_id_emb: ParamId,
    pub decoder_blocks: Vec<ConvAttnBlock>,
    pub decoder_ln: LayerNorm,
    pub out_head: Linear,
}

impl GeneratorParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: GeneratorConfig) -> Self {
        let d = cfg.d_hidden;
        let ff = d * cfg.ff_mult;
        let v = cfg.layout.codebook_size;
        let n = cfg.layout.n_channels();
        GeneratorParams {
            text_emb: store.add("gen.text_emb", Tensor::randn(rng, cfg.text_vocab, d, EMB_STD)),
            text_blocks: (0..cfg.text_blocks)
                .map(|i| ConvAttnBlock::new(store, rng, &format!("gen.text{i}"), d, ff))
                .collect(),
            text_ln: LayerNorm::new(store, "gen.text_ln", d),
            fuse_attn: Attention::new(store, rng, "gen.fuse", d, cfg.d_style),
            fuse_ln: LayerNorm::new(store, "gen.fuse_ln", d),
            dur_hidden: Linear::new(store, rng, "gen.dur1", d, cfg.dur_hidden, true),
            dur_out: Linear::new(store, rng, "gen.dur2", cfg.dur_hidden, 1, true),
            channel_emb: (0..n)
                .map(|i| {
                    store.add(&format!("gen.chan{i}_emb"), Tensor::randn(rng, v + 1, d, EMB_STD))
                })
                .collect(),
            channel_id_emb: store.add("gen.chan_id_emb", Tensor::randn(rng, n, d, EMB_STD)),
            decoder_blocks: (0..cfg.decoder_blocks)
                .map(|i| ConvAttnBlock::new(store, rng, &format!("gen.dec{i}"), d, ff))
                .collect(),
            decoder_ln: LayerNorm::new(store, "gen.dec_ln", d),
            out_head: Linear::with_std(store, rng, "gen.head", d, v, 0.02, true),
            cfg,
        }
    }

    pub fn mask_id(&self) -> usize {
        self.cfg.layout.codebook_size
    }
}

/// Phoneme ids → L×d hidden states.
pub fn text_encode(
    g: &mut Graph,
    params: &GeneratorParams,
    content_tokens: &[usize],
) -> Result<NodeId> {
    if content_tokens.is_empty() {
        bail!("empty content token sequence");
    }
    if let Some(&bad) = content_tokens.iter().find(|&&t| t >= params.cfg.text_vocab) {
        bail!("content token {bad} outside text vocab {}", params.cfg.text_vocab);
    }
    let mut x = g.embed(params.text_emb, content_tokens);
    let pos = g.constant(positions(content_tokens.len(), params.cfg.d_hidden));
    x = g.add(x, pos);
    for block in &params.text_blocks {
        x = block.apply(g, x);
    }
    Ok(params.text_ln.apply(g, x))
}

/// Cross-attend the text states onto the style vector (a one-entry
/// key/value memory) and add residually; output length is unchanged.
pub fn fuse_style(
    g: &mut Graph,
    params: &GeneratorParams,
    text_hidden: NodeId,
    style_vec: NodeId,
) -> NodeId {
    let normed = params.fuse_ln.apply(g, text_hidden);
    let attn_out = params.fuse_attn.apply(g, normed, style_vec);
    g.add(text_hidden, attn_out)
}

/// Per-phoneme log-durations (L×1).
pub fn predict_durations(g: &mut Graph, params: &GeneratorParams, text_state: NodeId) -> NodeId {
    let h = params.dur_hidden.apply(g, text_state);
    let h = g.gelu(h);
    params.dur_out.apply(g, h)
}

/// Round exp(log-duration) to an integer frame count, at least one frame.
pub fn durations_from_log(log_durs: &Tensor) -> Vec<usize> {
    log_durs.data.iter().map(|&ld| (ld.exp().round() as isize).max(1) as usize).collect()
}

/// MSE in log-duration space against ground-truth frame counts.
pub fn duration_loss(g: &mut Graph, predicted_log: NodeId, target: &[usize]) -> NodeId {
    let tgt: Vec<f64> = target.iter().map(|&d| (d as f64).ln()).collect();
    let t = g.constant(Tensor::from_vec(tgt.len(), 1, tgt));
    let diff = g.sub(predicted_log, t);
    let sq = g.mul(diff, diff);
    g.all_mean(sq)
}

/// Repeat each phoneme state over its duration: L×d → (Σdur)×d.
pub fn length_regulate(g: &mut Graph, text_state: NodeId, durations: &[usize]) -> NodeId {
    g.repeat_rows(text_state, durations)
}

/// Per-channel Bernoulli mask with cosine-distributed ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub channel: usize,
    pub ratio: f64,
    pub mask: Vec<bool>,
}

impl MaskPlan {
    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// p = cos(u′) with u′ ~ U[0, π/2]; entries i.i.d. Bernoulli(p).
pub fn sample_mask<R: Rng>(rng: &mut R, t: usize, channel: usize) -> MaskPlan {
    assert!(t >= 1, "need at least one frame");
    let u: f64 = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
    let ratio = u.cos();
    let mask = (0..t).map(|_| rng.gen_bool(ratio)).collect();
    MaskPlan { channel, ratio, mask }
}

/// Analytic CDF of the mask ratio: P[p ≤ x] = 1 − (2/π)·arccos(x).
pub fn mask_ratio_cdf(x: f64) -> f64 {
    1.0 - std::f64::consts::FRAC_2_PI * x.clamp(0.0, 1.0).acos()
}

/// Decoder logits for channel `plan.channel` (T×codebook).
///
/// Inputs are summed embeddings: channels < i with their true tokens,
/// channel i with MASK substituted at masked positions, the channel-id
/// embedding, and the frame states.
pub fn codec_logits(
    g: &mut Graph,
    params: &GeneratorParams,
    codec_channels: &dyn Fn(usize) -> Vec<u16>,
    channel: usize,
    mask: &[bool],
    frames: NodeId,
) -> NodeId {
    let t = g.val(frames).rows;
    let d = params.cfg.d_hidden;
    assert_eq!(mask.len(), t, "mask length must equal frame count");
    let mask_id = params.mask_id();

    let mut x = frames;
    for prev in 0..channel {
        let ids: Vec<usize> = codec_channels(prev).iter().map(|&v| v as usize).collect();
        let e = g.embed(params.channel_emb[prev], &ids);
        x = g.add(x, e);
    }
    let own: Vec<usize> = codec_channels(channel)
        .iter()
        .zip(mask.iter())
        .map(|(&tok, &m)| if m { mask_id } else { tok as usize })
        .collect();
    let e_own = g.embed(params.channel_emb[channel], &own);
    x = g.add(x, e_own);
    let chan = g.embed(params.channel_id_emb, &vec![channel; 1]);
    let chan_b = g.broadcast(chan, t, d);
    x = g.add(x, chan_b);
    let pos = g.constant(positions(t, d));
    x = g.add(x, pos);

    for block in &params.decoder_blocks {
        x = block.apply(g, x);
    }
    let x = params.decoder_ln.apply(g, x);
    params.out_head.apply(g, x)
}

/// Masked-channel cross-entropy, averaged over masked positions only.
/// Returns `None` for an empty mask (the step is skipped, no gradient).
pub fn codec_train_step(
    g: &mut Graph,
    params: &GeneratorParams,
    codec: &CodecMatrix,
    frames: NodeId,
    plan: &MaskPlan,
) -> Option<NodeId> {
    assert_eq!(codec.frames(), g.val(frames).rows, "codec/frame length mismatch");
    if plan.n_masked() == 0 {
        return None;
    }
    let grid = &codec.grid;
    let fetch = |c: usize| grid.column(c);
    let logits = codec_logits(g, params, &fetch, plan.channel, &plan.mask, frames);
    let targets: Vec<usize> = grid.column(plan.channel).iter().map(|&v| v as usize).collect();
    Some(g.masked_cross_entropy(logits, &targets, &plan.mask))
}

/// Iteration counts per channel plus the cosine retention schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSchedule {
    pub first_channel_iters: usize,
    pub other_channel_iters: usize,
    pub temperature: f64,
}

impl Default for DecodeSchedule {
    fn default() -> Self {
        DecodeSchedule { first_channel_iters: 8, other_channel_iters: 4, temperature: 1.0 }
    }
}

impl DecodeSchedule {
    pub fn iters_for(&self, channel: usize) -> usize {
        if channel == 0 {
            self.first_channel_iters
        } else {
            self.other_channel_iters
        }
    }

    /// Cumulative number of committed positions after iteration j (1-based)
    /// out of `total` masked positions, following a cosine schedule; the
    /// final iteration always commits everything.
    pub fn cumulative_commit(&self, total: usize, j: usize, iters: usize) -> usize {
        if j >= iters {
            return total;
        }
        let frac = j as f64 / iters as f64;
        let target = (1.0 - (frac * std::f64::consts::FRAC_PI_2).cos()) * total as f64;
        (target.ceil() as usize).clamp(j.min(total), total)
    }

    /// Temperature for iteration j of `iters`, annealed linearly to zero.
    pub fn temperature_at(&self, j: usize, iters: usize) -> f64 {
        if iters <= 1 {
            return 0.0;
        }
        self.temperature * (1.0 - j as f64 / (iters - 1) as f64)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Confidence source for committing candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceRule {
    /// Probability of the sampled token (default).
    SampledProb,
    /// Maximum probability of the row (ablation switch).
    MaxProb,
}

impl Default for ConfidenceRule {
    fn default() -> Self {
        ConfidenceRule::SampledProb
    }
}

/// Channel-by-channel confidence-based iterative decode.
///
/// Every channel starts fully masked; each iteration samples candidates at
/// the still-masked positions (temperature annealed to zero), commits the
/// highest-confidence candidates per the cosine retention schedule, and
/// never revisits a committed position.
pub fn iterative_decode(
    store: &ParamStore,
    params: &GeneratorParams,
    frames_value: &Tensor,
    schedule: &DecodeSchedule,
    confidence: ConfidenceRule,
    rng: &mut ChaCha8Rng,
) -> Result<CodecMatrix> {
    let t = frames_value.rows;
    let n = params.cfg.layout.n_channels();
    let v = params.cfg.layout.codebook_size;
    let mut out = CodecMatrix::zeros(t, params.cfg.layout);

    for channel in 0..n {
        let iters = schedule.iters_for(channel);
        if iters == 0 {
            bail!("decode schedule has zero iterations for channel {channel}");
        }
        let mut committed = vec![false; t];
        let mut tokens = vec![0u16; t];
        let mut done = 0usize;
        for j in 0..iters {
            let still_masked: Vec<usize> =
                (0..t).filter(|&i| !committed[i]).collect();
            if still_masked.is_empty() {
                break;
            }
            let mask: Vec<bool> = committed.iter().map(|&c| !c).collect();
            let mut g = Graph::new(store);
            let frames = g.constant(frames_value.clone());
            let grid_fetch = |c: usize| -> Vec<u16> {
                if c == channel {
                    tokens.clone()
                } else {
                    out.grid.column(c)
                }
            };
            let logits_node = codec_logits(&mut g, params, &grid_fetch, channel, &mask, frames);
            let logits = g.val(logits_node);

            let temp = schedule.temperature_at(j, iters);
            let mut candidates: Vec<(usize, u16, f64)> = Vec::with_capacity(still_masked.len());
            for &pos in &still_masked {
                let mut probs: Vec<f64> = logits.row(pos).to_vec();
                softmax_in_place(&mut probs);
                let token = if temp <= 1e-12 {
                    probs
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap()
                } else {
                    let mut tempered: Vec<f64> =
                        logits.row(pos).iter().map(|&l| l / temp).collect();
                    softmax_in_place(&mut tempered);
                    let u: f64 = rng.gen();
                    let mut cum = 0.0;
                    let mut tok = v - 1;
                    for (i, &p) in tempered.iter().enumerate() {
                        cum += p;
                        if u < cum {
                            tok = i;
                            break;
                        }
                    }
                    tok
                };
                let conf = match confidence {
                    ConfidenceRule::SampledProb => probs[token],
                    ConfidenceRule::MaxProb => {
                        probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    }
                };
                candidates.push((pos, token as u16, conf));
            }

            let cumulative = schedule.cumulative_commit(t, j + 1, iters);
            let commit_now = cumulative.saturating_sub(done).max(1).min(candidates.len());
            candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
            for &(pos, token, _) in candidates.iter().take(commit_now) {
                committed[pos] = true;
                tokens[pos] = token;
                done += 1;
            }
        }
        debug_assert!(committed.iter().all(|&c| c), "all positions committed after the last pass");
        for (i, &tok) in tokens.iter().enumerate() {
            out.grid.set(i, channel, tok);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_params(seed: u64) -> (ParamStore, GeneratorParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = GeneratorConfig {
            d_hidden: 16,
            d_style: 8,
            text_vocab: 10,
            text_blocks: 1,
            decoder_blocks: 1,
            ..GeneratorConfig::default()
        };
        let params = GeneratorParams::new(&mut store, &mut rng, cfg);
        (store, params)
    }

    #[test]
    fn text_encode_is_deterministic_and_position_sensitive() {
        let (store, params) = tiny_params(0);
        let run = |tokens: &[usize]| {
            let mut g = Graph::new(&store);
            let h = text_encode(&mut g, &params, tokens).unwrap();
            g.val(h).clone()
        };
        let a = run(&[1, 2, 3, 4]);
        let b = run(&[1, 2, 3, 4]);
        assert_eq!(a, b);
        let rev = run(&[4, 3, 2, 1]);
        assert_ne!(a.data, rev.data, "position encodings make order matter");
    }

    #[test]
    fn text_encode_rejects_empty_and_oov() {
        let (store, params) = tiny_params(1);
        let mut g = Graph::new(&store);
        assert!(text_encode(&mut g, &params, &[]).is_err());
        let mut g = Graph::new(&store);
        assert!(text_encode(&mut g, &params, &[3, 99]).is_err());
    }

    #[test]
    fn zero_style_vector_fuses_to_identity() {
        let (store, params) = tiny_params(2);
        let mut g = Graph::new(&store);
        let text = g.constant(Tensor::randn(
            &mut ChaCha8Rng::seed_from_u64(5),
            4,
            16,
            1.0,
        ));
        let zero_style = g.constant(Tensor::zeros(1, 8));
        let fused = fuse_style(&mut g, &params, text, zero_style);
        // value projection of a zero vector is zero → residual only
        assert_eq!(g.val(fused).data, g.val(text).data);
    }

    #[test]
    fn different_styles_fuse_differently_and_keep_shape() {
        let (store, params) = tiny_params(3);
        let mut g = Graph::new(&store);
        let text = g.constant(Tensor::randn(&mut ChaCha8Rng::seed_from_u64(6), 5, 16, 1.0));
        let s1 = g.constant(Tensor::randn(&mut ChaCha8Rng::seed_from_u64(7), 1, 8, 1.0));
        let s2 = g.constant(Tensor::randn(&mut ChaCha8Rng::seed_from_u64(8), 1, 8, 1.0));
        let f1 = fuse_style(&mut g, &params, text, s1);
        let f2 = fuse_style(&mut g, &params, text, s2);
        assert_eq!(g.val(f1).rows, 5);
        assert_eq!(g.val(f1).cols, 16);
        assert_ne!(g.val(f1).data, g.val(f2).data);
    }

    #[test]
    fn duration_loss_zero_at_target_and_rounding_floors_at_one() {
        let (store, _params) = tiny_params(4);
        let mut g = Graph::new(&store);
        let target = vec![2usize, 5, 1];
        let exact: Vec<f64> = target.iter().map(|&d| (d as f64).ln()).collect();
        let pred = g.constant(Tensor::from_vec(3, 1, exact));
        let loss = duration_loss(&mut g, pred, &target);
        assert!(g.val(loss).scalar().abs() < 1e-12);
        let lows = Tensor::from_vec(3, 1, vec![-3.0, -10.0, 0.1]);
        let durs = durations_from_log(&lows);
        assert!(durs.iter().all(|&d| d >= 1));
    }

    #[test]
    fn length_regulation_expands_and_mean_pools_back() {
        let (store, _params) = tiny_params(5);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let ones = length_regulate(&mut g, x, &[1, 1]);
        assert_eq!(g.val(ones).data, g.val(x).data, "unit durations are the identity");
        let rep = length_regulate(&mut g, x, &[2, 3]);
        assert_eq!(g.val(rep).rows, 5);
        // mean-pooling the repeated rows with the same durations is exact
        let v = g.val(rep).clone();
        let mut pooled = Tensor::zeros(2, 3);
        let mut cursor = 0;
        for (r, &d) in [2usize, 3].iter().enumerate() {
            for _ in 0..d {
                for c in 0..3 {
                    *pooled.at_mut(r, c) += v.at(cursor, c) / d as f64;
                }
                cursor += 1;
            }
        }
        for (a, b) in pooled.data.iter().zip(g.val(x).data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_ratio_extremes_and_mean() {
        // u′=0 → p=1 (everything masked); u′=π/2 → p=0 (nothing masked)
        assert_eq!(0f64.cos(), 1.0);
        assert!((std::f64::consts::FRAC_PI_2.cos()).abs() < 1e-12);
        let mut rng = crate::rng::derive(0, "mask-mean", 0, 0);
        let n = 20_000;
        let mean: f64 =
            (0..n).map(|_| sample_mask(&mut rng, 8, 0).ratio).sum::<f64>() / n as f64;
        assert!((mean - std::f64::consts::FRAC_2_PI).abs() < 0.01, "mean ratio {mean}");
    }

    #[test]
    fn empty_mask_skips_the_step() {
        let (store, params) = tiny_params(6);
        let codec = CodecMatrix::zeros(4, params.cfg.layout);
        let mut g = Graph::new(&store);
        let frames = g.constant(Tensor::zeros(4, 16));
        let plan = MaskPlan { channel: 2, ratio: 0.0, mask: vec![false; 4] };
        assert!(codec_train_step(&mut g, &params, &codec, frames, &plan).is_none());
    }

    #[test]
    fn untrained_loss_is_near_log_codebook() {
        let (store, params) = tiny_params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total = 0.0;
        let trials = 20;
        for i in 0..trials {
            let t = 12;
            let mut codec = CodecMatrix::zeros(t, params.cfg.layout);
            for r in 0..t {
                for c in 0..params.cfg.layout.n_channels() {
                    codec.grid.set(r, c, rng.gen_range(0..64) as u16);
                }
            }
            let mut g = Graph::new(&store);
            let frames = g.constant(Tensor::randn(&mut rng, t, 16, 0.3));
            let mut mask_rng = crate::rng::derive(1, "mask", i, 0);
            let mut plan = sample_mask(&mut mask_rng, t, (i % 6) as usize);
            plan.channel = (i % 6) as usize;
            if plan.n_masked() == 0 {
                plan.mask[0] = true;
            }
            let loss = codec_train_step(&mut g, &params, &codec, frames, &plan).unwrap();
            total += g.val(loss).scalar();
        }
        let mean = total / trials as f64;
        let expect = (64f64).ln();
        assert!((mean - expect).abs() < 0.1, "init loss {mean} vs ln(64)={expect}");
    }

    #[test]
    fn loss_ignores_unmasked_targets_and_masked_inputs() {
        let (store, params) = tiny_params(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 10;
        let channel = 3;
        let mut codec = CodecMatrix::zeros(t, params.cfg.layout);
        for r in 0..t {
            for c in 0..params.cfg.layout.n_channels() {
                codec.grid.set(r, c, rng.gen_range(0..64) as u16);
            }
        }
        let frames_val = Tensor::randn(&mut rng, t, 16, 0.3);
        let mask: Vec<bool> = (0..t).map(|i| i % 2 == 0).collect();
        let plan = MaskPlan { channel, ratio: 0.5, mask: mask.clone() };

        let run = |codec: &CodecMatrix| {
            let mut g = Graph::new(&store);
            let frames = g.constant(frames_val.clone());
            let loss = codec_train_step(&mut g, &params, codec, frames, &plan).unwrap();
            g.val(loss).scalar()
        };
        let base = run(&codec);

        // perturbing the target array at unmasked rows changes nothing: those
        // rows carry no loss (their tokens still condition the decoder input)
        let mut g = Graph::new(&store);
        let frames = g.constant(frames_val.clone());
        let fetch_orig = |c: usize| codec.grid.column(c);
        let logits = codec_logits(&mut g, &params, &fetch_orig, channel, &mask, frames);
        let mut targets: Vec<usize> =
            codec.grid.column(channel).iter().map(|&v| v as usize).collect();
        for (r, m) in mask.iter().enumerate() {
            if !m {
                targets[r] = (targets[r] + 13) % 64;
            }
        }
        let loss = g.masked_cross_entropy(logits, &targets, &mask);
        assert_eq!(g.val(loss).scalar(), base, "unmasked targets carry no loss");

        // randomizing the *input* tokens at masked positions changes nothing:
        // they are replaced by the MASK embedding before the decoder sees them
        let mut scrambled = codec.clone();
        for r in 0..t {
            if mask[r] {
                let old = scrambled.grid.at(r, channel);
                scrambled.grid.set(r, channel, (old + 29) % 64);
            }
        }
        // targets changed too, so compare against a run with original targets:
        // rebuild with scrambled inputs but original targets via a custom fetch
        let mut g = Graph::new(&store);
        let frames = g.constant(frames_val.clone());
        let fetch = |c: usize| -> Vec<u16> {
            if c == channel {
                scrambled.grid.column(c)
            } else {
                codec.grid.column(c)
            }
        };
        let logits = codec_logits(&mut g, &params, &fetch, channel, &mask, frames);
        let targets: Vec<usize> =
            codec.grid.column(channel).iter().map(|&v| v as usize).collect();
        let loss = g.masked_cross_entropy(logits, &targets, &mask);
        assert_eq!(g.val(loss).scalar(), base, "masked inputs are invisible to the loss");
    }

    #[test]
    fn decode_commits_monotonically_and_finishes() {
        let (store, params) = tiny_params(12);
        let frames = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(3), 9, 16, 0.5);
        let schedule = DecodeSchedule { first_channel_iters: 4, other_channel_iters: 2, temperature: 1.0 };
        let mut rng = crate::rng::derive(5, "decode", 0, 0);
        let out = iterative_decode(&store, &params, &frames, &schedule, ConfidenceRule::SampledProb, &mut rng)
            .unwrap();
        assert_eq!(out.frames(), 9);
        // deterministic given rng
        let mut rng2 = crate::rng::derive(5, "decode", 0, 0);
        let out2 = iterative_decode(&store, &params, &frames, &schedule, ConfidenceRule::SampledProb, &mut rng2)
            .unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn single_iteration_schedule_is_single_pass_greedy() {
        let (store, params) = tiny_params(13);
        let frames = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(4), 6, 16, 0.5);
        let schedule = DecodeSchedule { first_channel_iters: 1, other_channel_iters: 1, temperature: 1.0 };
        let mut rng = crate::rng::derive(6, "decode", 0, 0);
        let out = iterative_decode(&store, &params, &frames, &schedule, ConfidenceRule::SampledProb, &mut rng)
            .unwrap();
        // temperature_at(0, 1) = 0 → greedy; a second run with a different rng
        // must agree because no sampling happens
        let mut rng2 = crate::rng::derive(999, "decode", 7, 7);
        let out2 = iterative_decode(&store, &params, &frames, &schedule, ConfidenceRule::SampledProb, &mut rng2)
            .unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn cumulative_commit_schedule_is_monotone_and_complete() {
        let s = DecodeSchedule::default();
        for &total in &[1usize, 5, 17, 48] {
            for &iters in &[1usize, 4, 8] {
                let mut prev = 0;
                for j in 1..=iters {
                    let c = s.cumulative_commit(total, j, iters);
                    assert!(c >= prev, "monotone");
                    prev = c;
                }
                assert_eq!(prev, total, "everything committed at the end");
            }
        }
    }
}
