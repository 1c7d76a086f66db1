//! Synthetic corpus generation, split layout, and on-disk format.
//!
//! One dataset = four line-delimited record files (train, in-domain test,
//! heldout-style test, heldout-speaker test) plus a manifest recording the
//! config, seed, layout, category sets, degree grids, and the content
//! permutation — everything needed to reproduce the corpus bit-exactly or
//! to decode any record without the generator.

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::codec::{
    write_content_channels, AttributeLabels, ChannelLayout, CodecMatrix, CodecSpace, Degrees,
    Gender, Level, Pace, SyntheticUtterance, TimbreEmbedding, STYLE_ATTRS,
};
use crate::par::{map_indexed, ExecMode};
use crate::style_text::{TemplateBank, TemplateSplit, MAX_EMOTIONS};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Hard cap on frames per utterance, enforced by the duration law.
pub const MAX_FRAMES: usize = 48;
const MAX_PHONE_DURATION: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub text_vocab: usize,
    pub layout: ChannelLayout,
    pub emotion_count: usize,
    pub d_style: usize,
    pub d_timbre: usize,
    pub n_train: usize,
    pub n_test_in_domain: usize,
    pub n_test_heldout_style: usize,
    pub n_test_heldout_speaker: usize,
    pub heldout_speakers: usize,
    pub min_text_len: usize,
    pub max_text_len: usize,
    pub timbre_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            n_speakers: 20,
            text_vocab: 40,
            layout: ChannelLayout::default(),
            emotion_count: 5,
            d_style: 16,
            d_timbre: 32,
            n_train: 2400,
            n_test_in_domain: 250,
            n_test_heldout_style: 150,
            n_test_heldout_speaker: 150,
            heldout_speakers: 4,
            min_text_len: 3,
            max_text_len: 8,
            timbre_jitter: 0.05,
        }
    }
}

/// Validated config constructor; same seed ⇒ byte-identical corpus.
pub fn make_generator_config(
    seed: u64,
    n_speakers: usize,
    text_vocab: usize,
    layout: ChannelLayout,
) -> Result<DatasetConfig> {
    let cfg = DatasetConfig { seed, n_speakers, text_vocab, layout, ..DatasetConfig::default() };
    cfg.validate()?;
    Ok(cfg)
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.text_vocab < 2 {
            bail!("speaker and text vocab counts must be positive (vocab >= 2)");
        }
        if self.text_vocab > self.layout.codebook_size {
            bail!(
                "text vocab {} does not fit content channels with codebook {}",
                self.text_vocab,
                self.layout.codebook_size
            );
        }
        if self.heldout_speakers >= self.n_speakers {
            bail!("heldout speakers must leave at least one training speaker");
        }
        if self.emotion_count > MAX_EMOTIONS {
            bail!("builtin keyword bank covers at most {MAX_EMOTIONS} emotion classes");
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            bail!("bad text length range");
        }
        if self.max_text_len * MAX_PHONE_DURATION > MAX_FRAMES {
            bail!(
                "max_text_len {} can exceed the {MAX_FRAMES}-frame cap",
                self.max_text_len
            );
        }
        // constructing the space validates layout/emotions/d_style together
        CodecSpace::new(self.layout, self.emotion_count, self.d_style)?;
        Ok(())
    }

    pub fn space(&self) -> CodecSpace {
        CodecSpace::new(self.layout, self.emotion_count, self.d_style)
            .expect("validated config")
    }

    /// Fixed permutation for the second content channel.
    pub fn content_perm(&self) -> Vec<u16> {
        let mut perm: Vec<u16> = (0..self.text_vocab as u16).collect();
        let mut rng = crate::rng::derive(self.seed, "content-perm", 0, 0);
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        perm
    }

    pub fn train_speakers(&self) -> std::ops::Range<usize> {
        0..self.n_speakers - self.heldout_speakers
    }

    pub fn heldout_speaker_ids(&self) -> std::ops::Range<usize> {
        self.n_speakers - self.heldout_speakers..self.n_speakers
    }

    /// Deterministic per-speaker base timbre.
    pub fn speaker_timbre(&self, speaker_id: usize) -> TimbreEmbedding {
        let mut rng = crate::rng::derive(self.seed, "speaker-timbre", speaker_id as u64, 0);
        let v: Vec<f64> = (0..self.d_timbre)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        TimbreEmbedding::normalized(v)
    }
}

/// Within-class multiplier: the class centers are {slow 1.4, normal 1.0,
/// fast 0.7}; the degree pushes toward the extreme of its class.
pub fn speed_multiplier(pace: Pace, degree: f64) -> f64 {
    match pace {
        Pace::Slow => 1.4 + 0.3 * (degree - 0.5),
        Pace::Normal => 1.0 + 0.2 * (degree - 0.5),
        Pace::Fast => 0.7 - 0.2 * (degree - 0.5),
    }
}

pub fn base_duration(phoneme: usize) -> usize {
    2 + phoneme % 3
}

/// Duration law: round(base × multiplier) plus sparse ±1 jitter, clamped to
/// [1, 6] frames so any utterance fits the frame cap.
fn draw_duration<R: Rng>(phoneme: usize, pace: Pace, degree: f64, rng: &mut R) -> usize {
    let nominal = (base_duration(phoneme) as f64 * speed_multiplier(pace, degree)).round() as isize;
    let u: f64 = rng.gen();
    let jitter = if u < 0.1 {
        -1
    } else if u > 0.9 {
        1
    } else {
        0
    };
    (nominal + jitter).clamp(1, MAX_PHONE_DURATION as isize) as usize
}

fn draw_labels<R: Rng>(cfg: &DatasetConfig, rng: &mut R) -> AttributeLabels {
    AttributeLabels {
        gender: if rng.gen_bool(0.5) { Gender::Male } else { Gender::Female },
        pitch: Level::from_index(rng.gen_range(0..3)),
        speed: Pace::from_index(rng.gen_range(0..3)),
        energy: Level::from_index(rng.gen_range(0..3)),
        emotion: rng.gen_range(0..cfg.emotion_count),
    }
}

/// Full synthesis with explicit speaker/template control (split plumbing).
pub fn synth_with(
    cfg: &DatasetConfig,
    space: &CodecSpace,
    bank: &TemplateBank,
    perm: &[u16],
    rng: &mut ChaCha8Rng,
    speaker_id: usize,
    template_id: usize,
) -> SyntheticUtterance {
    let labels = draw_labels(cfg, rng);
    let mut bins = [0usize; 4];
    for (i, attr) in STYLE_ATTRS.iter().enumerate() {
        bins[i] = rng.gen_range(0..space.spec_for(*attr).bins);
    }
    let degrees = Degrees {
        pitch: bins[0] as f64 / space.spec_for(STYLE_ATTRS[0]).bins as f64,
        speed: bins[1] as f64 / space.spec_for(STYLE_ATTRS[1]).bins as f64,
        energy: bins[2] as f64 / space.spec_for(STYLE_ATTRS[2]).bins as f64,
        emotion: bins[3] as f64 / space.spec_for(STYLE_ATTRS[3]).bins as f64,
    };

    let text_len = rng.gen_range(cfg.min_text_len..=cfg.max_text_len);
    let mut content_tokens = Vec::with_capacity(text_len);
    for i in 0..text_len {
        loop {
            let p = rng.gen_range(0..cfg.text_vocab);
            if i == 0 || content_tokens[i - 1] != p {
                content_tokens.push(p);
                break;
            }
        }
    }
    let durations: Vec<usize> = content_tokens
        .iter()
        .map(|&p| draw_duration(p, labels.speed, degrees.speed, rng))
        .collect();
    let t: usize = durations.iter().sum();

    let mut codec = CodecMatrix::zeros(t, cfg.layout);
    write_content_channels(&mut codec, &content_tokens, &durations, perm);
    let style_tokens = space.encode_style_tokens(&labels, &bins);
    for r in 0..t {
        for (c, &tok) in style_tokens.iter().enumerate() {
            codec.grid.set(r, cfg.layout.n_content + c, tok);
        }
    }

    let base = cfg.speaker_timbre(speaker_id);
    let jittered: Vec<f64> = base
        .0
        .iter()
        .map(|&v| v + cfg.timbre_jitter * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let timbre = TimbreEmbedding::normalized(jittered);

    let prompt = bank.render(template_id, &labels, rng);

    SyntheticUtterance {
        speaker_id,
        content_tokens,
        style_text: prompt.tokens,
        template_id,
        labels,
        degrees,
        durations,
        codec,
        timbre,
    }
}

/// One utterance from the training pools (random speaker and template).
pub fn synth_utterance(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> SyntheticUtterance {
    let space = cfg.space();
    let bank = TemplateBank::builtin();
    let perm = cfg.content_perm();
    let speakers = cfg.train_speakers();
    let speaker = rng.gen_range(speakers.start..speakers.end);
    let pool = bank.ids(TemplateSplit::Train);
    let template = pool[rng.gen_range(0..pool.len())];
    synth_with(cfg, &space, &bank, &perm, rng, speaker, template)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub genders: Vec<String>,
    pub pitch_classes: Vec<String>,
    pub speed_classes: Vec<String>,
    pub energy_classes: Vec<String>,
    pub emotions: Vec<String>,
    pub degree_bins: Vec<usize>,
    pub channel_specs: Vec<crate::codec::ChannelSpec>,
    pub content_perm: Vec<u16>,
    pub templates: Vec<crate::style_text::Template>,
    pub split_sizes: SplitSizes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test_in_domain: usize,
    pub test_heldout_style: usize,
    pub test_heldout_speaker: usize,
}

pub fn emotion_names(count: usize) -> Vec<String> {
    ["neutral", "happy", "sad", "angry", "surprised"]
        .iter()
        .take(count)
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<SyntheticUtterance>,
    pub test_in_domain: Vec<SyntheticUtterance>,
    pub test_heldout_style: Vec<SyntheticUtterance>,
    pub test_heldout_speaker: Vec<SyntheticUtterance>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[SyntheticUtterance]> {
        match name {
            "train" => Ok(&self.train),
            "in_domain" => Ok(&self.test_in_domain),
            "heldout_style" => Ok(&self.test_heldout_style),
            "heldout_speaker" => Ok(&self.test_heldout_speaker),
            other => bail!("unknown split {other:?} (train|in_domain|heldout_style|heldout_speaker)"),
        }
    }
}

/// Generate all four splits. Per-utterance rngs are derived from
/// (seed, split, index), so output is reproducible and order-independent
/// of the execution mode.
pub fn generate_dataset(cfg: &DatasetConfig, mode: ExecMode) -> Result<Dataset> {
    cfg.validate()?;
    let space = cfg.space();
    let bank = TemplateBank::builtin();
    let perm = cfg.content_perm();
    let train_templates = bank.ids(TemplateSplit::Train);
    let heldout_templates = bank.ids(TemplateSplit::Heldout);
    let train_speakers: Vec<usize> = cfg.train_speakers().collect();
    let heldout_speakers: Vec<usize> = cfg.heldout_speaker_ids().collect();
    anyhow::ensure!(!heldout_speakers.is_empty(), "need at least one heldout speaker");

    let gen_split = |purpose: &str, n: usize, speakers: &[usize], templates: &[usize]| {
        map_indexed(n, mode, |i| {
            let mut rng = crate::rng::derive(cfg.seed, purpose, 0, i as u64);
            let speaker = speakers[rng.gen_range(0..speakers.len())];
            let template = templates[rng.gen_range(0..templates.len())];
            synth_with(cfg, &space, &bank, &perm, &mut rng, speaker, template)
        })
    };

    let train = gen_split("utt-train", cfg.n_train, &train_speakers, &train_templates);
    let test_in_domain =
        gen_split("utt-test-in", cfg.n_test_in_domain, &train_speakers, &train_templates);
    let test_heldout_style = gen_split(
        "utt-test-style",
        cfg.n_test_heldout_style,
        &train_speakers,
        &heldout_templates,
    );
    let test_heldout_speaker = gen_split(
        "utt-test-speaker",
        cfg.n_test_heldout_speaker,
        &heldout_speakers,
        &train_templates,
    );

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: cfg.clone(),
        genders: vec!["male".into(), "female".into()],
        pitch_classes: vec!["low".into(), "normal".into(), "high".into()],
        speed_classes: vec!["slow".into(), "normal".into(), "fast".into()],
        energy_classes: vec!["low".into(), "normal".into(), "high".into()],
        emotions: emotion_names(cfg.emotion_count),
        degree_bins: STYLE_ATTRS.iter().map(|a| space.spec_for(*a).bins).collect(),
        channel_specs: space.specs.clone(),
        content_perm: perm,
        templates: bank.templates.clone(),
        split_sizes: SplitSizes {
            train: cfg.n_train,
            test_in_domain: cfg.n_test_in_domain,
            test_heldout_style: cfg.n_test_heldout_style,
            test_heldout_speaker: cfg.n_test_heldout_speaker,
        },
    };

    Ok(Dataset { manifest, train, test_in_domain, test_heldout_style, test_heldout_speaker })
}

const SPLIT_FILES: [(&str, &str); 4] = [
    ("train", "train.jsonl"),
    ("in_domain", "test_in_domain.jsonl"),
    ("heldout_style", "test_heldout_style.jsonl"),
    ("heldout_speaker", "test_heldout_speaker.jsonl"),
];

pub fn write_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            bail!("output dir {} is not empty (use --force to overwrite)", dir.display());
        }
    }
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest)?;
    for (split, file) in SPLIT_FILES {
        let records = ds.split(split).expect("known split");
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(file))?);
        for rec in records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .context("manifest.json")?;
    let mut splits: Vec<Vec<SyntheticUtterance>> = Vec::new();
    for (_, file) in SPLIT_FILES {
        let reader = std::io::BufReader::new(
            std::fs::File::open(dir.join(file)).with_context(|| file.to_string())?,
        );
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        splits.push(records);
    }
    let test_heldout_speaker = splits.pop().unwrap();
    let test_heldout_style = splits.pop().unwrap();
    let test_in_domain = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset { manifest, train, test_in_domain, test_heldout_style, test_heldout_speaker })
}
