//! Joint training of the pipeline and checkpointing.
//!
//! One step optimizes the summed loss l_codec + l_dur + l_style with
//! teacher forcing: the generator sees the ground-truth style vector (from
//! the style extractor) and ground-truth durations; nothing in the training
//! graph touches sampled styles or predicted durations. All randomness is
//! derived from (seed, purpose, step, element), so loss curves are
//! bit-identical across execution modes and checkpoint resume is exact.
//!
//! The timbre-fusion stack (extractor, conditional norm, readout) trains in
//! a separate small phase against reconstruction targets — it sits outside
//! the joint loss, mirroring a codec decoder that is not part of the
//! generator's objective.

use anyhow::{bail, Context, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::codec::SyntheticUtterance;
use crate::corpus::Dataset;
use crate::fusion::{cosine, prompt_frames, timbre_extract_graph, timbre_readout_graph};
use crate::generator::{
    codec_train_step, duration_loss, fuse_style, length_regulate, predict_durations, sample_mask,
    text_encode,
};
use crate::model::{Model, ModelConfig, StyleHead};
use crate::nn::{lr_at, AdamW};
use crate::par::{map_indexed, ExecMode};
use crate::style_text::StylePrompt;
use crate::tensor::{Grads, Graph, ParamId, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_frames: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub w_codec: f64,
    pub w_dur: f64,
    pub w_style: f64,
    pub log_every: u64,
    /// Probability of replacing a scaffold (non-keyword) prompt word with
    /// OOV during training; regularizes the encoder toward the attribute
    /// keywords so unseen template scaffolds do not shift the pooled
    /// vector. Keywords are never dropped — corrupting them would blur the
    /// conditional the mixture head has to learn.
    pub word_dropout: f64,
    pub fusion_steps: u64,
    pub fusion_batch: usize,
    pub fusion_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            batch_frames: 4096,
            peak_lr: 5e-4,
            warmup_steps: 500,
            total_steps: 3000,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            grad_clip: 1.0,
            w_codec: 1.0,
            w_dur: 1.0,
            w_style: 1.0,
            log_every: 25,
            word_dropout: 0.15,
            fusion_steps: 400,
            fusion_batch: 8,
            fusion_lr: 2e-3,
        }
    }
}

/// Per-step losses; l_style is an exact NLL of a continuous density and may
/// be negative.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub lr: f64,
    pub l_codec: f64,
    pub l_dur: f64,
    pub l_style: f64,
    pub skipped_masks: usize,
    pub batch_size: usize,
}

pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub step: u64,
    pub cfg: TrainConfig,
    pub data_hash: u64,
    pub skip_count: u64,
}

impl TrainState {
    pub fn new(model: Model, cfg: TrainConfig, data_hash: u64) -> Self {
        let opt = AdamW::new(&model.store, cfg.beta1, cfg.beta2, cfg.weight_decay);
        TrainState { model, opt, step: 0, cfg, data_hash, skip_count: 0 }
    }
}

pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn dataset_hash(ds: &Dataset) -> u64 {
    hash_bytes(serde_json::to_string(&ds.manifest).expect("manifest serializes").as_bytes())
}

/// Deterministic epoch permutation → greedy frame-budget batches.
fn epoch_batches(data: &[SyntheticUtterance], seed: u64, epoch: u64, batch_frames: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = crate::rng::derive(seed, "epoch", epoch, 0);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut frames = 0usize;
    for idx in order {
        let f = data[idx].frames();
        if !current.is_empty() && frames + f > batch_frames {
            batches.push(std::mem::take(&mut current));
            frames = 0;
        }
        current.push(idx);
        frames += f;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// The batch for an absolute step, recomputable from scratch (resume-safe).
pub fn batch_for_step(
    data: &[SyntheticUtterance],
    seed: u64,
    batch_frames: usize,
    step: u64,
) -> Vec<usize> {
    let mut epoch = 0u64;
    let mut remaining = step;
    loop {
        let batches = epoch_batches(data, seed, epoch, batch_frames);
        if (remaining as usize) < batches.len() {
            return batches[remaining as usize].clone();
        }
        remaining -= batches.len() as u64;
        epoch += 1;
    }
}

struct ElementResult {
    grads: Grads,
    l_codec: Option<f64>,
    l_dur: f64,
    l_style: f64,
}

fn element_losses(
    model: &Model,
    utt: &SyntheticUtterance,
    cfg: &TrainConfig,
    step: u64,
    elem: u64,
) -> Result<ElementResult> {
    let mut g = Graph::new(&model.store);

    // style-head branch: encoder output regressed onto the extractor target
    let prompt = StylePrompt { tokens: utt.style_text.clone(), template_id: Some(utt.template_id) };
    let mut ids = model.vocab.encode(&prompt);
    if cfg.word_dropout > 0.0 {
        let mut drop_rng = crate::rng::derive(cfg.seed, "word-drop", step, elem);
        for id in ids.iter_mut() {
            if !model.vocab.is_keyword(*id) && drop_rng.gen_bool(cfg.word_dropout) {
                *id = model.vocab.oov_id();
            }
        }
    }
    let x = if model.cfg.freeze_style_encoder {
        let v = model.encode_prompt(&prompt)?;
        g.constant(Tensor::row_vector(v))
    } else {
        model.prompt_encoder.encode_graph(&mut g, &ids)
    };
    let (_, style_grid) = crate::codec::split_style(&utt.codec);
    let target = model.space.style_extractor(&style_grid);
    let noise = match &model.style_head {
        StyleHead::Mdn(head) => {
            let mut nrng = crate::rng::derive(cfg.seed, "mdn-noise", step, elem);
            Some(head.sample_noise(&mut nrng))
        }
        StyleHead::Direct(_) => None,
    };
    let l_style = model.style_loss_graph(&mut g, x, &target, noise.as_deref());

    // generator branch under teacher forcing: ground-truth style vector and
    // ground-truth durations only
    let text_h = text_encode(&mut g, &model.generator, &utt.content_tokens)?;
    let style_gt = g.constant(Tensor::row_vector(target.clone()));
    let fused = fuse_style(&mut g, &model.generator, text_h, style_gt);
    let log_durs = predict_durations(&mut g, &model.generator, fused);
    let l_dur = duration_loss(&mut g, log_durs, &utt.durations);
    let frames = length_regulate(&mut g, fused, &utt.durations);

    let n_channels = model.cfg.layout.n_channels();
    let channel = crate::rng::derive(cfg.seed, "channel", step, elem).gen_range(0..n_channels);
    let mut mask_rng = crate::rng::derive(cfg.seed, "mask", step, elem);
    let plan = sample_mask(&mut mask_rng, utt.frames(), channel);
    let l_codec = codec_train_step(&mut g, &model.generator, &utt.codec, frames, &plan);

    let dur_w = g.scale(l_dur, cfg.w_dur);
    let style_w = g.scale(l_style, cfg.w_style);
    let mut total = g.add(dur_w, style_w);
    if let Some(lc) = l_codec {
        let codec_w = g.scale(lc, cfg.w_codec);
        total = g.add(total, codec_w);
    }
    let total_val = g.val(total).scalar();
    if !total_val.is_finite() {
        bail!(
            "non-finite loss at step {step} elem {elem}: codec={:?} dur={} style={}",
            l_codec.map(|n| g.val(n).scalar()),
            g.val(l_dur).scalar(),
            g.val(l_style).scalar()
        );
    }
    Ok(ElementResult {
        l_codec: l_codec.map(|n| g.val(n).scalar()),
        l_dur: g.val(l_dur).scalar(),
        l_style: g.val(l_style).scalar(),
        grads: g.backward(total),
    })
}

/// One optimizer update over one frame-budget batch.
pub fn train_step(
    state: &mut TrainState,
    data: &[SyntheticUtterance],
    mode: ExecMode,
) -> Result<LossBreakdown> {
    let step = state.step;
    let cfg = state.cfg.clone();
    let batch = batch_for_step(data, cfg.seed, cfg.batch_frames, step);
    let n = batch.len();
    let model = &state.model;
    let results: Vec<Result<ElementResult>> = map_indexed(n, mode, |i| {
        element_losses(model, &data[batch[i]], &cfg, step, i as u64)
    });

    let mut merged = Grads::zeros(state.model.store.len());
    let mut l_codec_sum = 0.0;
    let mut codec_count = 0usize;
    let mut l_dur_sum = 0.0;
    let mut l_style_sum = 0.0;
    let mut skipped = 0usize;
    for r in results {
        let r = r?;
        merged.merge(&r.grads);
        match r.l_codec {
            Some(v) => {
                l_codec_sum += v;
                codec_count += 1;
            }
            None => skipped += 1,
        }
        l_dur_sum += r.l_dur;
        l_style_sum += r.l_style;
    }
    merged.scale(1.0 / n as f64);
    if !merged.is_finite() {
        bail!("non-finite gradients at step {step}");
    }

    let lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps);
    state.opt.update(&mut state.model.store, &mut merged, lr, cfg.grad_clip);
    state.step += 1;
    state.skip_count += skipped as u64;

    Ok(LossBreakdown {
        step,
        lr,
        l_codec: if codec_count > 0 { l_codec_sum / codec_count as f64 } else { 0.0 },
        l_dur: l_dur_sum / n as f64,
        l_style: l_style_sum / n as f64,
        skipped_masks: skipped,
        batch_size: n,
    })
}

/// Run the joint phase to `total_steps`, logging one JSON record per
/// `log_every` steps (and the final step) to `log`.
pub fn train_loop(
    state: &mut TrainState,
    data: &[SyntheticUtterance],
    mode: ExecMode,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossBreakdown>> {
    let mut history = Vec::new();
    while state.step < state.cfg.total_steps {
        let breakdown = train_step(state, data, mode)?;
        if breakdown.step % state.cfg.log_every == 0 || breakdown.step + 1 == state.cfg.total_steps
        {
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &breakdown)?;
                w.write_all(b"\n")?;
            }
        }
        history.push(breakdown);
    }
    Ok(history)
}

/// Separate reconstruction phase for the timbre-fusion stack: the extractor
/// chases the ground-truth timbre, the readout reconstructs it from the
/// conditionally-normalized token embedding.
pub fn train_fusion(
    state: &mut TrainState,
    data: &[SyntheticUtterance],
    mode: ExecMode,
) -> Result<Vec<f64>> {
    let cfg = state.cfg.clone();
    let mut opt = AdamW::new(&state.model.store, cfg.beta1, cfg.beta2, 0.0);
    let mut losses = Vec::new();
    for fstep in 0..cfg.fusion_steps {
        let model = &state.model;
        let n = cfg.fusion_batch.min(data.len());
        let results: Vec<(Grads, f64)> = map_indexed(n, mode, |i| {
            let mut pick = crate::rng::derive(cfg.seed, "fusion-pick", fstep, i as u64);
            let utt = &data[pick.gen_range(0..data.len())];
            let mut g = Graph::new(&model.store);
            let mut prng = crate::rng::derive(cfg.seed, "fusion-prompt", fstep, i as u64);
            let frames = prompt_frames(
                &utt.timbre,
                model.cfg.fusion.prompt_len,
                model.cfg.fusion.prompt_noise,
                &mut prng,
            );
            let frames_node = g.constant(frames);
            let extracted = timbre_extract_graph(&mut g, &model.fusion, frames_node);
            let target = g.constant(Tensor::row_vector(utt.timbre.0.clone()));
            // both vectors are unit norm → cosine is a plain dot product
            let ext_dot = g.mul(extracted, target);
            let ext_cos = g.row_sum(ext_dot);
            let readout = timbre_readout_graph(&mut g, &model.fusion, &utt.codec, target);
            let ro_dot = g.mul(readout, target);
            let ro_cos = g.row_sum(ro_dot);
            let sum = g.add(ext_cos, ro_cos);
            let neg = g.scale(sum, -1.0);
            let loss = g.add_scalar(neg, 2.0); // (1−cos_ext) + (1−cos_readout)
            (g.backward(loss), g.val(loss).scalar())
        });
        let mut merged = Grads::zeros(state.model.store.len());
        let mut total = 0.0;
        for (grads, loss) in &results {
            merged.merge(grads);
            total += loss;
        }
        merged.scale(1.0 / n as f64);
        opt.update(&mut state.model.store, &mut merged, cfg.fusion_lr, cfg.grad_clip);
        losses.push(total / n as f64);
    }
    Ok(losses)
}

/// Mean extractor/readout cosine on a held-out slice (fusion quality).
pub fn fusion_eval(model: &Model, data: &[SyntheticUtterance], seed: u64) -> (f64, f64) {
    let mut ext_total = 0.0;
    let mut ro_total = 0.0;
    for (i, utt) in data.iter().enumerate() {
        let mut prng = crate::rng::derive(seed, "fusion-eval", 0, i as u64);
        let frames = prompt_frames(
            &utt.timbre,
            model.cfg.fusion.prompt_len,
            model.cfg.fusion.prompt_noise,
            &mut prng,
        );
        let extracted = crate::fusion::timbre_extract(&model.store, &model.fusion, &frames)
            .expect("non-empty prompt");
        ext_total += cosine(&extracted.0, &utt.timbre.0);
        let out = crate::fusion::assemble_output(
            &model.store,
            &model.fusion,
            &model.space,
            &[0u16; 0],
            &utt.codec,
            &extracted,
        );
        if let Ok(out) = out {
            ro_total += cosine(&out.timbre_readout, &utt.timbre.0);
        }
    }
    let n = data.len().max(1) as f64;
    (ext_total / n, ro_total / n)
}

// ---------------------------------------------------------------------------
// checkpointing

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    adam_step: u64,
    data_hash: u64,
    skip_count: u64,
    init_seed: u64,
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(t.rows as u32)?;
    w.write_u32::<LittleEndian>(t.cols as u32)?;
    for &v in &t.data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in data.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

/// Versioned binary checkpoint: params, optimizer moments, step counters,
/// config metadata. Byte-deterministic.
pub fn save_checkpoint(path: &Path, state: &TrainState, init_seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        schema_version: 1,
        model_config: state.model.cfg.clone(),
        train_config: state.cfg.clone(),
        step: state.step,
        adam_step: state.opt.step,
        data_hash: state.data_hash,
        skip_count: state.skip_count,
        init_seed,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(meta_json.len() as u32)?;
    w.write_all(&meta_json)?;
    w.write_u32::<LittleEndian>(state.model.store.len() as u32)?;
    for (_, name, tensor) in state.model.store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, tensor)?;
    }
    let (m, v) = state.opt.moments();
    for t in m.iter().chain(v.iter()) {
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

/// Rebuild a training state from a checkpoint. The model skeleton is
/// reconstructed from the stored config, then parameter values and
/// optimizer moments are restored by name/index.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, u64)> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf).context("checkpoint metadata")?;

    let mut model = Model::new(meta.model_config.clone(), meta.init_seed)?;
    let n_params = r.read_u32::<LittleEndian>()? as usize;
    if n_params != model.store.len() {
        bail!(
            "checkpoint has {n_params} parameters, config rebuild has {}",
            model.store.len()
        );
    }
    for i in 0..n_params {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)?;
        let expected = model.store.name(ParamId(i)).to_string();
        if name != expected {
            bail!("checkpoint parameter {i} is {name:?}, expected {expected:?}");
        }
        let tensor = read_tensor(&mut r)?;
        let slot = model.store.get_mut(ParamId(i));
        if (slot.rows, slot.cols) != (tensor.rows, tensor.cols) {
            bail!("checkpoint parameter {name} shape mismatch");
        }
        *slot = tensor;
    }
    let mut opt = AdamW::new(&model.store, meta.train_config.beta1, meta.train_config.beta2, meta.train_config.weight_decay);
    {
        let (m, v) = opt.moments_mut();
        for t in m.iter_mut() {
            *t = read_tensor(&mut r)?;
        }
        for t in v.iter_mut() {
            *t = read_tensor(&mut r)?;
        }
    }
    opt.step = meta.adam_step;
    let state = TrainState {
        model,
        opt,
        step: meta.step,
        cfg: meta.train_config,
        data_hash: meta.data_hash,
        skip_count: meta.skip_count,
    };
    Ok((state, meta.init_seed))
}

/// Guard for resume/eval: configs and data must match the checkpoint.
pub fn check_compatible(state: &TrainState, model_cfg: &ModelConfig, data_hash: u64) -> Result<()> {
    if &state.model.cfg != model_cfg {
        bail!("checkpoint model config does not match the requested config");
    }
    if state.data_hash != data_hash {
        bail!("checkpoint was trained on a different dataset (hash mismatch)");
    }
    Ok(())
}
