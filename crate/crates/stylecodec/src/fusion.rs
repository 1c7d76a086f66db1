//! Timbre extraction and conditional-normalization fusion.
//!
//! The token generator never sees timbre; it enters only here, after
//! generation. A small attention encoder pools a frame-level speech prompt
//! into a unit global vector; the embedded token grid is normalized per
//! feature over the time axis and modulated by scale/shift vectors that are
//! linear in the timbre; a readout head is trained to reconstruct the
//! timbre from that fused state — the toy stand-in for waveform synthesis
//! carrying the voice.
//!
//! The normalization denominator is √(σ²+ε) by default. `paper_exact_eq4`
//! switches to dividing by the variance itself, which is dimensionally
//! anomalous but kept available for fidelity comparisons.

use anyhow::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_content, AttributeLabels, CodecMatrix, CodecSpace, Degrees, TimbreEmbedding,
};
use crate::nn::{sinusoidal_positions, ConvAttnBlock, Linear};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_timbre: usize,
    pub d_fusion: usize,
    pub extractor_blocks: usize,
    pub eps_norm: f64,
    pub paper_exact_eq4: bool,
    /// Frames in a synthetic speech prompt and their noise level.
    pub prompt_len: usize,
    pub prompt_noise: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_timbre: 32,
            d_fusion: 64,
            extractor_blocks: 2,
            eps_norm: 1e-5,
            paper_exact_eq4: false,
            prompt_len: 12,
            prompt_noise: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CondNormParams {
    pub w_gamma: Linear,
    pub w_beta: Linear,
    pub eps_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionParams {
    pub cfg: FusionConfig,
    pub extract_in: Linear,
    pub extract_blocks: Vec<ConvAttnBlock>,
    pub extract_out: Linear,
    pub cond: CondNormParams,
    pub channel_emb: Vec<ParamId>,
    pub readout: Linear,
}

impl FusionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: FusionConfig,
        layout: crate::codec::ChannelLayout,
    ) -> Self {
        let d = cfg.d_fusion;
        let cond = CondNormParams {
            w_gamma: Linear::new(store, rng, "fusion.gamma", cfg.d_timbre, d, true),
            w_beta: Linear::new(store, rng, "fusion.beta", cfg.d_timbre, d, true),
            eps_norm: cfg.eps_norm,
        };
        // start near identity modulation
        store.get_mut(cond.w_gamma.b.unwrap()).data.fill(1.0);
        FusionParams {
            extract_in: Linear::new(store, rng, "fusion.ext_in", cfg.d_timbre, d, true),
            extract_blocks: (0..cfg.extractor_blocks)
                .map(|i| ConvAttnBlock::new(store, rng, &format!("fusion.ext{i}"), d, 2 * d))
                .collect(),
            extract_out: Linear::new(store, rng, "fusion.ext_out", d, cfg.d_timbre, true),
            cond,
            channel_emb: (0..layout.n_channels())
                .map(|i| {
                    store.add(
                        &format!("fusion.chan{i}_emb"),
                        Tensor::randn(rng, layout.codebook_size, d, 0.5),
                    )
                })
                .collect(),
            readout: Linear::new(store, rng, "fusion.readout", d, cfg.d_timbre, true),
            cfg,
        }
    }
}

/// Synthetic speech prompt: the speaker's timbre repeated per frame with
/// independent noise.
pub fn prompt_frames<R: Rng>(
    timbre: &TimbreEmbedding,
    len: usize,
    noise: f64,
    rng: &mut R,
) -> Tensor {
    assert!(len >= 1, "prompt needs at least one frame");
    let d = timbre.dim();
    let mut out = Tensor::zeros(len, d);
    for r in 0..len {
        for (o, &t) in out.row_mut(r).iter_mut().zip(timbre.0.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *o = t + noise * z;
        }
    }
    out
}

/// Attention-encode the prompt frames, mean-pool, project, normalize.
pub fn timbre_extract_graph(g: &mut Graph, params: &FusionParams, frames: NodeId) -> NodeId {
    let t = g.val(frames).rows;
    let mut x = params.extract_in.apply(g, frames);
    let pos = g.constant(sinusoidal_positions(t, params.cfg.d_fusion));
    x = g.add(x, pos);
    for block in &params.extract_blocks {
        x = block.apply(g, x);
    }
    let pooled = g.col_mean(x);
    let v = params.extract_out.apply(g, pooled);
    // unit normalization
    let sq = g.mul(v, v);
    let ss = g.row_sum(sq);
    let eps = g.add_scalar(ss, 1e-12);
    let norm = g.sqrt(eps);
    let d = params.cfg.d_timbre;
    let norm_b = g.broadcast(norm, 1, d);
    g.div(v, norm_b)
}

pub fn timbre_extract(
    store: &ParamStore,
    params: &FusionParams,
    frames: &Tensor,
) -> Result<TimbreEmbedding> {
    anyhow::ensure!(frames.rows >= 1, "empty speech prompt");
    anyhow::ensure!(frames.cols == params.cfg.d_timbre, "prompt frame dim mismatch");
    let mut g = Graph::new(store);
    let f = g.constant(frames.clone());
    let out = timbre_extract_graph(&mut g, params, f);
    Ok(TimbreEmbedding(g.val(out).data.clone()))
}

/// Per-feature normalization of `hidden` over the time axis, scaled by
/// W_γ·t and shifted by W_β·t.
pub fn cond_norm_graph(
    g: &mut Graph,
    cond: &CondNormParams,
    hidden: NodeId,
    timbre: NodeId,
    paper_exact_eq4: bool,
) -> NodeId {
    let (t, d) = (g.val(hidden).rows, g.val(hidden).cols);
    let mu = g.col_mean(hidden); // 1×d over time
    let mu_b = g.broadcast(mu, t, d);
    let centered = g.sub(hidden, mu_b);
    let sq = g.mul(centered, centered);
    let var = g.col_mean(sq);
    let var_eps = g.add_scalar(var, cond.eps_norm);
    let denom = if paper_exact_eq4 { var_eps } else { g.sqrt(var_eps) };
    let denom_b = g.broadcast(denom, t, d);
    let normed = g.div(centered, denom_b);

    let gamma = cond.w_gamma.apply(g, timbre); // 1×d
    let beta = cond.w_beta.apply(g, timbre);
    let gamma_b = g.broadcast(gamma, t, d);
    let beta_b = g.broadcast(beta, t, d);
    let scaled = g.mul(normed, gamma_b);
    g.add(scaled, beta_b)
}

pub fn cond_norm(
    store: &ParamStore,
    cond: &CondNormParams,
    hidden: &Tensor,
    timbre: &TimbreEmbedding,
    paper_exact_eq4: bool,
) -> Tensor {
    let mut g = Graph::new(store);
    let h = g.constant(hidden.clone());
    let t = g.constant(Tensor::row_vector(timbre.0.clone()));
    let out = cond_norm_graph(&mut g, cond, h, t, paper_exact_eq4);
    g.val(out).clone()
}

/// Embed the token grid (summed per-channel embeddings + positions).
fn embed_codec_graph(g: &mut Graph, params: &FusionParams, codec: &CodecMatrix) -> NodeId {
    let t = codec.frames();
    let mut x = g.constant(sinusoidal_positions(t, params.cfg.d_fusion));
    for c in 0..codec.layout.n_channels() {
        let ids: Vec<usize> = codec.grid.column(c).iter().map(|&v| v as usize).collect();
        let e = g.embed(params.channel_emb[c], &ids);
        x = g.add(x, e);
    }
    x
}

/// Timbre-readout node for a codec/timbre pair (unit-normalized 1×d_t).
pub fn timbre_readout_graph(
    g: &mut Graph,
    params: &FusionParams,
    codec: &CodecMatrix,
    timbre: NodeId,
) -> NodeId {
    let emb = embed_codec_graph(g, params, codec);
    let fused = cond_norm_graph(g, &params.cond, emb, timbre, params.cfg.paper_exact_eq4);
    let pooled = g.col_mean(fused);
    let v = params.readout.apply(g, pooled);
    let sq = g.mul(v, v);
    let ss = g.row_sum(sq);
    let eps = g.add_scalar(ss, 1e-12);
    let norm = g.sqrt(eps);
    let norm_b = g.broadcast(norm, 1, params.cfg.d_timbre);
    g.div(v, norm_b)
}

/// Final decoded product of the pipeline: exact attribute/content decode of
/// the token grid plus the learned timbre readout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalUtterance {
    pub attributes: Option<(AttributeLabels, Degrees)>,
    pub content: Option<(Vec<usize>, Vec<usize>)>,
    pub timbre_readout: Vec<f64>,
}

/// Decode a generated codec with a timbre prompt. The attribute/content
/// path is the exact oracle (timbre cannot touch it); the readout carries
/// the timbre.
pub fn assemble_output(
    store: &ParamStore,
    params: &FusionParams,
    space: &CodecSpace,
    content_perm: &[u16],
    codec: &CodecMatrix,
    timbre: &TimbreEmbedding,
) -> Result<FinalUtterance> {
    let norm: f64 = timbre.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    anyhow::ensure!(
        (norm - 1.0).abs() < 1e-6,
        "timbre prompt must be unit-normalized (norm = {norm})"
    );
    let mut g = Graph::new(store);
    let t = g.constant(Tensor::row_vector(timbre.0.clone()));
    let readout = timbre_readout_graph(&mut g, params, codec, t);
    Ok(FinalUtterance {
        attributes: space.decode_attributes(codec).ok(),
        content: decode_content(codec, content_perm).ok(),
        timbre_readout: g.val(readout).data.clone(),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ChannelLayout;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(paper_exact: bool) -> (ParamStore, FusionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            d_timbre: 8,
            d_fusion: 12,
            extractor_blocks: 1,
            paper_exact_eq4: paper_exact,
            ..FusionConfig::default()
        };
        let params = FusionParams::new(&mut store, &mut rng, cfg, ChannelLayout::default());
        (store, params)
    }

    fn unit_timbre(seed: u64, d: usize) -> TimbreEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimbreEmbedding::normalized(
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )
    }

    #[test]
    fn extraction_is_deterministic_and_unit_norm() {
        let (store, params) = setup(false);
        let timbre = unit_timbre(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = prompt_frames(&timbre, 6, 0.1, &mut rng);
        let a = timbre_extract(&store, &params, &frames).unwrap();
        let b = timbre_extract(&store, &params, &frames).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let empty = Tensor::zeros(0, 8);
        assert!(timbre_extract(&store, &params, &empty).is_err());
    }

    #[test]
    fn identity_modulation_is_plain_normalization() {
        let (mut store, params) = setup(false);
        // W_γ·t = 1-vector, W_β·t = 0-vector
        store.get_mut(params.cond.w_gamma.w).data.fill(0.0);
        store.get_mut(params.cond.w_gamma.b.unwrap()).data.fill(1.0);
        store.get_mut(params.cond.w_beta.w).data.fill(0.0);
        store.get_mut(params.cond.w_beta.b.unwrap()).data.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hidden = Tensor::randn(&mut rng, 10, 12, 1.4);
        let timbre = unit_timbre(4, 8);
        let out = cond_norm(&store, &params.cond, &hidden, &timbre, false);
        // per-feature mean ≈ 0 and variance ≈ 1 over time
        for c in 0..12 {
            let col: Vec<f64> = (0..10).map(|r| out.at(r, c)).collect();
            let mean: f64 = col.iter().sum::<f64>() / 10.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-5, "feature {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "feature {c} var {var}");
        }
    }

    #[test]
    fn constant_hidden_input_outputs_the_shift() {
        let (store, params) = setup(false);
        let hidden = Tensor::filled(5, 12, 3.7);
        let timbre = unit_timbre(5, 8);
        let out = cond_norm(&store, &params.cond, &hidden, &timbre, false);
        // zero variance → normalized value 0 → output = W_β t broadcast
        let mut g = Graph::new(&store);
        let t = g.constant(Tensor::row_vector(timbre.0.clone()));
        let beta = params.cond.w_beta.apply(&mut g, t);
        let beta = g.val(beta).clone();
        for r in 0..5 {
            for c in 0..12 {
                assert!((out.at(r, c) - beta.at(0, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distinct_timbres_modulate_differently_and_eq4_flag_changes_path() {
        let (store, params) = setup(false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hidden = Tensor::randn(&mut rng, 7, 12, 1.0);
        let t1 = unit_timbre(7, 8);
        let t2 = unit_timbre(8, 8);
        let o1 = cond_norm(&store, &params.cond, &hidden, &t1, false);
        let o2 = cond_norm(&store, &params.cond, &hidden, &t2, false);
        assert_ne!(o1.data, o2.data);
        let o1_var = cond_norm(&store, &params.cond, &hidden, &t1, true);
        assert_ne!(o1.data, o1_var.data, "variance denominator is a different path");
    }

    #[test]
    fn assemble_rejects_non_unit_timbre_and_ignores_timbre_for_attributes() {
        let (store, params) = setup(false);
        let space = CodecSpace::with_defaults();
        let cfg = crate::corpus::DatasetConfig::default();
        let perm = cfg.content_perm();
        let mut rng = crate::rng::derive(0, "assemble", 0, 0);
        let utt = crate::corpus::synth_utterance(&cfg, &mut rng);

        let zero = TimbreEmbedding(vec![0.0; 8]);
        assert!(assemble_output(&store, &params, &space, &perm, &utt.codec, &zero).is_err());

        let t1 = unit_timbre(9, 8);
        let t2 = unit_timbre(10, 8);
        let a = assemble_output(&store, &params, &space, &perm, &utt.codec, &t1).unwrap();
        let b = assemble_output(&store, &params, &space, &perm, &utt.codec, &t2).unwrap();
        assert_eq!(a.attributes.unwrap(), b.attributes.unwrap());
        assert_eq!(a.attributes.unwrap().0, utt.labels);
        assert_eq!(a.content.as_ref().unwrap().0, utt.content_tokens);
        assert_ne!(a.timbre_readout, b.timbre_readout, "readout does depend on timbre");
    }
}
