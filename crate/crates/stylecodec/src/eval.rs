//! Evaluation over the exact decode oracle.
//!
//! Control accuracy scores synthesized grids against the prompted labels by
//! decoding tokens — no learned classifier sits in the loop, so repeated
//! evaluation of the same outputs is bit-identical. Diversity metrics
//! measure the style sampler: decoded-degree variance, distinct degree
//! bins, and mixture-component usage entropy under a fixed prompt.

use anyhow::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::codec::{AttributeLabels, Gender, Level, Pace, StyleAttr, SyntheticUtterance};
use crate::corpus::Dataset;
use crate::fusion::cosine;
use crate::model::{Model, ModelConfig, StyleHeadKind};
use crate::par::{map_indexed, ExecMode};
use crate::style_mdn::NoiseMode;
use crate::style_text::{StylePrompt, TemplateSplit};
use crate::training::{dataset_hash, train_loop, TrainConfig, TrainState};

/// 95% Wilson score interval.
pub fn wilson_interval(correct: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054f64;
    let nf = n as f64;
    let p = correct as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttrAccuracy {
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

impl AttrAccuracy {
    pub fn from_counts(correct: usize, n: usize) -> Self {
        let (lo, hi) = wilson_interval(correct, n);
        AttrAccuracy {
            correct,
            n,
            accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
            wilson_low: lo,
            wilson_high: hi,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimbreStats {
    pub readout_cosine_mean: f64,
    pub same_speaker_auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n: usize,
    pub pitch: AttrAccuracy,
    pub speed: AttrAccuracy,
    pub energy: AttrAccuracy,
    pub emotion: AttrAccuracy,
    pub gender: AttrAccuracy,
    pub decode_failures: usize,
    pub duration_mae: f64,
    pub timbre: TimbreStats,
}

struct ControlSample {
    ok: [bool; 5],
    failed: bool,
    duration_mae: f64,
    readout_cos: f64,
    extracted: Vec<f64>,
    speaker: usize,
}

/// Per-channel correctness of [pitch, speed, energy, emotion, gender].
fn score_attributes(
    model: &Model,
    codec: &crate::codec::CodecMatrix,
    expected: &AttributeLabels,
) -> [bool; 5] {
    let space = &model.space;
    let slot = |attr| space.decode_channel(codec, attr).map(|(s, _)| s);
    let eg = slot(StyleAttr::EmotionGender);
    [
        slot(StyleAttr::Pitch) == Some(expected.pitch.index()),
        slot(StyleAttr::Speed) == Some(expected.speed.index()),
        slot(StyleAttr::Energy) == Some(expected.energy.index()),
        eg.map(|s| s / 2) == Some(expected.emotion),
        eg.map(|s| s % 2) == Some(expected.gender.index()),
    ]
}

/// Synthesize `n` prompts from a split and score the exact oracle against
/// the prompted labels; ground-truth timbre serves as the voice prompt.
pub fn eval_control(
    model: &Model,
    dataset: &Dataset,
    split: &str,
    n: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<EvalReport> {
    let utts = dataset.split(split)?;
    anyhow::ensure!(!utts.is_empty(), "split {split} is empty");
    let n = n.min(utts.len());
    let perm = dataset.manifest.content_perm.clone();

    let samples: Vec<Result<ControlSample>> = map_indexed(n, mode, |i| {
        let u = &utts[i];
        let prompt =
            StylePrompt { tokens: u.style_text.clone(), template_id: Some(u.template_id) };
        let mut rng = crate::rng::derive(seed, "eval-synth", 0, i as u64);
        let out = model.synthesize(&prompt, &u.content_tokens, &mut rng)?;

        // each attribute is scored off its own channel; an invalid channel
        // counts as incorrect for its attribute(s)
        let ok = score_attributes(model, &out.codec, &u.labels);
        let failed = model.space.decode_attributes(&out.codec).is_err();
        let duration_mae = out
            .durations
            .iter()
            .zip(u.durations.iter())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / u.durations.len() as f64;

        let mut prng = crate::rng::derive(seed, "eval-prompt", 0, i as u64);
        let frames = crate::fusion::prompt_frames(
            &u.timbre,
            model.cfg.fusion.prompt_len,
            model.cfg.fusion.prompt_noise,
            &mut prng,
        );
        let extracted = crate::fusion::timbre_extract(&model.store, &model.fusion, &frames)?;
        let assembled = crate::fusion::assemble_output(
            &model.store,
            &model.fusion,
            &model.space,
            &perm,
            &out.codec,
            &extracted,
        )?;
        Ok(ControlSample {
            ok,
            failed,
            duration_mae,
            readout_cos: cosine(&assembled.timbre_readout, &u.timbre.0),
            extracted: extracted.0,
            speaker: u.speaker_id,
        })
    });

    let mut counts = [0usize; 5];
    let mut failures = 0usize;
    let mut mae_total = 0.0;
    let mut cos_total = 0.0;
    let mut embeddings = Vec::with_capacity(n);
    for s in samples {
        let s = s?;
        for (c, &ok) in counts.iter_mut().zip(s.ok.iter()) {
            *c += ok as usize;
        }
        failures += s.failed as usize;
        mae_total += s.duration_mae;
        cos_total += s.readout_cos;
        embeddings.push((s.speaker, s.extracted));
    }

    Ok(EvalReport {
        split: split.to_string(),
        n,
        pitch: AttrAccuracy::from_counts(counts[0], n),
        speed: AttrAccuracy::from_counts(counts[1], n),
        energy: AttrAccuracy::from_counts(counts[2], n),
        emotion: AttrAccuracy::from_counts(counts[3], n),
        gender: AttrAccuracy::from_counts(counts[4], n),
        decode_failures: failures,
        duration_mae: mae_total / n as f64,
        timbre: TimbreStats {
            readout_cosine_mean: cos_total / n as f64,
            same_speaker_auc: same_speaker_auc(&embeddings),
        },
    })
}

/// P(same-speaker pair cosine > cross-speaker pair cosine), ties at ½.
pub fn same_speaker_auc(embeddings: &[(usize, Vec<f64>)]) -> Option<f64> {
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = cosine(&embeddings[i].1, &embeddings[j].1);
            if embeddings[i].0 == embeddings[j].0 {
                same.push(c);
            } else {
                cross.push(c);
            }
        }
    }
    if same.is_empty() || cross.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &s in &same {
        for &c in &cross {
            if s > c {
                wins += 1.0;
            } else if s == c {
                wins += 0.5;
            }
        }
    }
    Some(wins / (same.len() * cross.len()) as f64)
}

/// The six fixed (pitch, speed, energy) control tuples used for the
/// many-to-many protocol.
pub fn many_to_many_tuples() -> Vec<(Level, Pace, Level)> {
    vec![
        (Level::Normal, Pace::Fast, Level::Normal),
        (Level::Normal, Pace::Slow, Level::Normal),
        (Level::High, Pace::Normal, Level::Normal),
        (Level::Low, Pace::Normal, Level::Normal),
        (Level::Normal, Pace::Normal, Level::High),
        (Level::Normal, Pace::Normal, Level::Low),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptDiversity {
    pub prompt_text: String,
    pub sa: f64,
    pub degree_variance: f64,
    pub distinct_degree_bins: f64,
    pub component_entropy: f64,
    pub decode_failures: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManyToManyReport {
    pub n_prompts: usize,
    pub n_samples: usize,
    pub per_prompt: Vec<PromptDiversity>,
    /// fraction of samples matching the prompted pitch/speed/energy classes
    pub sa: f64,
    /// mean over attributes of the decoded-degree variance (the scalar
    /// diversity measure)
    pub degree_variance: f64,
    pub distinct_degree_bins: f64,
    pub component_entropy: f64,
}

fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Fix one style prompt per control tuple, draw `n_samples` style samples
/// each, synthesize, and measure accuracy (SA) and diversity (SD).
pub fn eval_many_to_many(
    model: &Model,
    n_samples: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<ManyToManyReport> {
    let tuples = many_to_many_tuples();
    let train_pool = model.bank.ids(TemplateSplit::Train);
    let mut per_prompt = Vec::new();

    for (pi, &(pitch, speed, energy)) in tuples.iter().enumerate() {
        let labels = AttributeLabels {
            gender: if pi % 2 == 0 { Gender::Female } else { Gender::Male },
            pitch,
            speed,
            energy,
            emotion: 0,
        };
        let mut prng = crate::rng::derive(seed, "m2m-prompt", pi as u64, 0);
        let template = train_pool[prng.gen_range(0..train_pool.len())];
        let prompt = model.bank.render(template, &labels, &mut prng);
        let mut crng = crate::rng::derive(seed, "m2m-content", pi as u64, 0);
        let content: Vec<usize> = {
            let mut toks = Vec::with_capacity(5);
            for i in 0..5usize {
                loop {
                    let t = crng.gen_range(0..model.cfg.text_vocab);
                    if i == 0 || toks[i - 1] != t {
                        toks.push(t);
                        break;
                    }
                }
            }
            toks
        };

        struct SampleOut {
            degrees: [Option<f64>; 4],
            sa_ok: bool,
            failed: bool,
            component: Option<usize>,
        }
        let outs: Vec<Result<SampleOut>> = map_indexed(n_samples, mode, |s| {
            let mut rng = crate::rng::derive(seed, "m2m-sample", pi as u64, s as u64);
            let out = model.synthesize(&prompt, &content, &mut rng)?;
            let ok = score_attributes(model, &out.codec, &labels);
            let mut degrees = [None; 4];
            for (a, attr) in STYLE_ORDER.iter().enumerate() {
                degrees[a] = model.space.decode_channel(&out.codec, *attr).map(|(_, d)| d);
            }
            Ok(SampleOut {
                degrees,
                sa_ok: ok[0] && ok[1] && ok[2],
                failed: model.space.decode_attributes(&out.codec).is_err(),
                component: out.component,
            })
        });

        let mut degs: Vec<[Option<f64>; 4]> = Vec::new();
        let mut sa_count = 0usize;
        let mut comp_counts = vec![0usize; model.cfg.components];
        let mut failures = 0usize;
        for o in outs {
            let o = o?;
            degs.push(o.degrees);
            failures += o.failed as usize;
            sa_count += o.sa_ok as usize;
            if let Some(k) = o.component {
                comp_counts[k] += 1;
            }
        }

        let mut var_sum = 0.0;
        let mut distinct_sum = 0.0;
        for a in 0..4 {
            let vals: Vec<f64> = degs.iter().filter_map(|d| d[a]).collect();
            if vals.len() > 1 {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                var_sum +=
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            }
            let bins = model.space.spec_for(STYLE_ORDER[a]).bins as f64;
            let mut distinct: Vec<i64> = vals.iter().map(|v| (v * bins).round() as i64).collect();
            distinct.sort_unstable();
            distinct.dedup();
            distinct_sum += distinct.len() as f64;
        }

        per_prompt.push(PromptDiversity {
            prompt_text: prompt.text(),
            sa: sa_count as f64 / n_samples as f64,
            degree_variance: var_sum / 4.0,
            distinct_degree_bins: distinct_sum / 4.0,
            component_entropy: if model.cfg.style_head == StyleHeadKind::Mdn {
                entropy(&comp_counts)
            } else {
                0.0
            },
            decode_failures: failures,
        });
    }

    let np = per_prompt.len() as f64;
    Ok(ManyToManyReport {
        n_prompts: per_prompt.len(),
        n_samples,
        sa: per_prompt.iter().map(|p| p.sa).sum::<f64>() / np,
        degree_variance: per_prompt.iter().map(|p| p.degree_variance).sum::<f64>() / np,
        distinct_degree_bins: per_prompt.iter().map(|p| p.distinct_degree_bins).sum::<f64>() / np,
        component_entropy: per_prompt.iter().map(|p| p.component_entropy).sum::<f64>() / np,
        per_prompt,
    })
}

const STYLE_ORDER: [StyleAttr; 4] =
    [StyleAttr::Pitch, StyleAttr::Speed, StyleAttr::Energy, StyleAttr::EmotionGender];

// ---------------------------------------------------------------------------
// ablation grids

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub components: usize,
    pub mode: NoiseMode,
}

/// Component-count grid at the default mode plus the four-mode grid at the
/// default component count.
pub fn default_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for k in [3usize, 5, 7] {
        cells.push(AblationCell { components: k, mode: NoiseMode::IsotropicAcrossClusters });
    }
    for mode in NoiseMode::ALL {
        let cell = AblationCell { components: 5, mode };
        if !cells.iter().any(|c| c.components == cell.components && c.mode == cell.mode) {
            cells.push(cell);
        }
    }
    cells
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub components: usize,
    pub mode: String,
    pub sa: f64,
    pub degree_variance: f64,
    pub distinct_degree_bins: f64,
    pub component_entropy: f64,
    pub variance_count: usize,
    pub sigma_sq_probe_before: f64,
    pub sigma_sq_probe_after: f64,
    pub variance_params_changed: bool,
}

fn variance_param_bytes(model: &Model) -> Vec<u8> {
    let mut bytes = Vec::new();
    if let crate::model::StyleHead::Mdn(head) = &model.style_head {
        let mut push = |id: crate::tensor::ParamId| {
            for &v in &model.store.get(id).data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(head.var_head.w);
        if let Some(b) = head.var_head.b {
            push(b);
        }
        push(head.noise_in.w);
        push(head.noise_out.w);
    }
    bytes
}

fn sigma_probe(model: &Model) -> f64 {
    if let crate::model::StyleHead::Mdn(head) = &model.style_head {
        let x = vec![0.25; head.cfg.input_dim];
        let mp = crate::style_mdn::mdn_forward(&model.store, head, &x, None)
            .expect("probe forward");
        mp.variances.data[0]
    } else {
        f64::NAN
    }
}

/// Train and evaluate every grid cell under a shared seed protocol.
/// Finished cells (result.json present) are loaded, not retrained.
pub fn run_ablations(
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    grid: &[AblationCell],
    out_dir: &Path,
    m2m_samples: usize,
    mode: ExecMode,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for cell in grid {
        let cell_name = format!("k{}_{}", cell.components, cell.mode.name());
        let cell_dir = out_dir.join(&cell_name);
        let result_path = cell_dir.join("result.json");
        if result_path.exists() {
            let row: AblationRow =
                serde_json::from_str(&std::fs::read_to_string(&result_path)?)?;
            rows.push(row);
            continue;
        }
        std::fs::create_dir_all(&cell_dir)?;
        let mut cfg = base_model.clone();
        cfg.components = cell.components;
        cfg.noise_mode = cell.mode;
        let model = Model::new(cfg, train_cfg.seed)?;
        let mut state = TrainState::new(model, train_cfg.clone(), dataset_hash(dataset));
        let sigma_before = sigma_probe(&state.model);
        let var_before = variance_param_bytes(&state.model);
        train_loop(&mut state, &dataset.train, mode, None)?;
        let sigma_after = sigma_probe(&state.model);
        let var_after = variance_param_bytes(&state.model);
        let m2m = eval_many_to_many(&state.model, m2m_samples, train_cfg.seed, mode)?;
        let variance_count = if let crate::model::StyleHead::Mdn(head) = &state.model.style_head {
            let x = vec![0.25; head.cfg.input_dim];
            crate::style_mdn::mdn_forward(&state.model.store, head, &x, None)?.variance_count()
        } else {
            0
        };
        let row = AblationRow {
            components: cell.components,
            mode: cell.mode.name().to_string(),
            sa: m2m.sa,
            degree_variance: m2m.degree_variance,
            distinct_degree_bins: m2m.distinct_degree_bins,
            component_entropy: m2m.component_entropy,
            variance_count,
            sigma_sq_probe_before: sigma_before,
            sigma_sq_probe_after: sigma_after,
            variance_params_changed: var_before != var_after,
        };
        std::fs::write(&result_path, serde_json::to_string_pretty(&row)?)?;
        rows.push(row);
    }

    let mut summary = String::new();
    for row in &rows {
        summary.push_str(&serde_json::to_string(row)?);
        summary.push('\n');
    }
    std::fs::write(out_dir.join("summary.jsonl"), summary)?;
    std::fs::write(out_dir.join("table.txt"), render_ablation_table(&rows))?;
    Ok(rows)
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<32} {:>4} {:>8} {:>10} {:>10} {:>9}\n",
        "mode", "K", "SA", "deg-var", "bins", "entropy"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<32} {:>4} {:>8.3} {:>10.5} {:>10.2} {:>9.3}\n",
            r.mode, r.components, r.sa, r.degree_variance, r.distinct_degree_bins,
            r.component_entropy
        ));
    }
    s
}

pub fn render_control_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<18} {:>5} {:>7} {:>7} {:>7} {:>8} {:>7} {:>6} {:>8} {:>9}\n",
        "split", "n", "pitch", "speed", "energy", "emotion", "gender", "fail", "dur-mae", "timbre"
    ));
    for r in reports {
        s.push_str(&format!(
            "{:<18} {:>5} {:>7.3} {:>7.3} {:>7.3} {:>8.3} {:>7.3} {:>6} {:>8.3} {:>9.3}\n",
            r.split,
            r.n,
            r.pitch.accuracy,
            r.speed.accuracy,
            r.energy.accuracy,
            r.emotion.accuracy,
            r.gender.accuracy,
            r.decode_failures,
            r.duration_mae,
            r.timbre.readout_cosine_mean
        ));
    }
    s
}

/// Score ground-truth codecs through the oracle (sanity: must be perfect).
pub fn oracle_self_check(model: &Model, utts: &[SyntheticUtterance]) -> f64 {
    let mut ok = 0usize;
    for u in utts {
        if let Ok((labels, degrees)) = model.space.decode_attributes(&u.codec) {
            if labels == u.labels && degrees == u.degrees {
                ok += 1;
            }
        }
    }
    ok as f64 / utts.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecMatrix, CodecSpace};

    #[test]
    fn wilson_brackets_the_point_estimate() {
        let (lo, hi) = wilson_interval(90, 100);
        assert!(lo < 0.9 && 0.9 < hi);
        assert!(hi - lo < 0.13);
        let (lo0, hi0) = wilson_interval(0, 50);
        assert!(lo0.abs() < 1e-12);
        assert!(hi0 > 0.0);
    }

    #[test]
    fn entropy_of_degenerate_usage_is_zero() {
        assert_eq!(entropy(&[10, 0, 0]), 0.0);
        let e = entropy(&[5, 5]);
        assert!((e - (2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn oracle_is_perfect_on_ground_truth() {
        let cfg = crate::corpus::DatasetConfig {
            n_train: 30,
            n_test_in_domain: 10,
            n_test_heldout_style: 5,
            n_test_heldout_speaker: 5,
            ..Default::default()
        };
        let ds = crate::corpus::generate_dataset(&cfg, ExecMode::Sequential).unwrap();
        let model = Model::new(
            ModelConfig { d_hidden: 16, d_embed: 8, mdn_hidden: 8, text_blocks: 1, decoder_blocks: 1, ..Default::default() },
            0,
        )
        .unwrap();
        assert_eq!(oracle_self_check(&model, &ds.train), 1.0);
    }

    #[test]
    fn random_token_grids_score_at_analytic_chance() {
        let space = CodecSpace::with_defaults();
        let layout = space.layout;
        let mut rng = crate::rng::derive(0, "chance", 0, 0);
        let n = 1000;
        let mut pitch_ok = 0usize;
        let mut emotion_ok = 0usize;
        let target_pitch = Level::Normal;
        let target_emotion = 2usize;
        for _ in 0..n {
            let mut codec = CodecMatrix::zeros(1, layout);
            for c in 0..layout.n_channels() {
                codec.grid.set(0, c, rng.gen_range(0..layout.codebook_size) as u16);
            }
            if let Some((slot, _)) = space.decode_channel(&codec, StyleAttr::Pitch) {
                pitch_ok += (slot == target_pitch.index()) as usize;
            }
            if let Some((slot, _)) = space.decode_channel(&codec, StyleAttr::EmotionGender) {
                emotion_ok += (slot / 2 == target_emotion) as usize;
            }
        }
        let pitch_chance = space.chance_level(StyleAttr::Pitch);
        let emo_chance = space.chance_level_emotion();
        let se = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
        let pitch_acc = pitch_ok as f64 / n as f64;
        let emo_acc = emotion_ok as f64 / n as f64;
        assert!(
            (pitch_acc - pitch_chance).abs() < 3.0 * se(pitch_chance).max(0.01),
            "pitch {pitch_acc} vs chance {pitch_chance}"
        );
        assert!(
            (emo_acc - emo_chance).abs() < 3.0 * se(emo_chance).max(0.01),
            "emotion {emo_acc} vs chance {emo_chance}"
        );
    }

    #[test]
    fn default_grid_has_expected_cells() {
        let grid = default_grid();
        assert_eq!(grid.len(), 6); // {3,5,7}×iso-across + 3 other modes at K=5
        assert!(grid.iter().filter(|c| c.mode == NoiseMode::IsotropicAcrossClusters).count() == 3);
    }

    #[test]
    fn auc_separates_clustered_embeddings() {
        let embeddings = vec![
            (0usize, vec![1.0, 0.0]),
            (0, vec![0.95, 0.1]),
            (1, vec![0.0, 1.0]),
            (1, vec![0.1, 0.95]),
        ];
        let auc = same_speaker_auc(&embeddings).unwrap();
        assert!(auc > 0.95, "clean clusters should separate, auc={auc}");
    }
}
