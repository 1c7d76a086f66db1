//! Style descriptions: template-bank prompt generation and the keyword
//! encoder that maps a prompt to the global style semantic vector.
//!
//! Templates carry a `train`/`heldout` split tag; heldout templates share
//! the attribute keyword slots with the train set but use scaffold words
//! the encoder has never seen, which is the out-of-domain style test.
//! The encoder is attention pooling over word embeddings followed by a
//! projection; unknown words map to a single OOV embedding.

use anyhow::{bail, Context, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::codec::AttributeLabels;
use crate::nn::Linear;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const BUILTIN_TEMPLATES: &str = include_str!("../resources/style_templates.txt");

/// Most emotion classes the builtin keyword lists cover.
pub const MAX_EMOTIONS: usize = 5;

const GENDER_WORDS: [&[&str]; 2] = [&["man", "male", "gentleman"], &["woman", "female", "lady"]];
const PITCH_WORDS: [&[&str]; 3] = [
    &["deep", "bass", "low-toned"],
    &["medium-pitched", "even-toned"],
    &["high-pitched", "shrill", "squeaky"],
];
const SPEED_WORDS: [&[&str]; 3] = [
    &["slow", "unhurried", "leisurely"],
    &["steady", "measured"],
    &["fast", "quick", "hurried"],
];
const ENERGY_WORDS: [&[&str]; 3] = [
    &["soft", "quiet", "hushed"],
    &["moderate", "temperate"],
    &["loud", "booming", "thunderous"],
];
const EMOTION_WORDS: [&[&str]; MAX_EMOTIONS] = [
    &["neutral", "plain", "matter-of-fact"],
    &["happy", "cheerful", "joyful"],
    &["sad", "gloomy", "mournful"],
    &["angry", "furious", "irritated"],
    &["surprised", "astonished", "amazed"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSplit {
    Train,
    Heldout,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    pub split: TemplateSplit,
    pub text: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateBank {
    pub templates: Vec<Template>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StylePrompt {
    pub tokens: Vec<String>,
    pub template_id: Option<usize>,
}

impl StylePrompt {
    pub fn from_text(text: &str) -> Self {
        StylePrompt {
            tokens: text.split_whitespace().map(|w| w.to_lowercase()).collect(),
            template_id: None,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl TemplateBank {
    pub fn parse(src: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (lineno, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, text) = line
                .split_once('|')
                .with_context(|| format!("template line {} missing split tag", lineno + 1))?;
            let split = match tag.trim() {
                "train" => TemplateSplit::Train,
                "heldout" => TemplateSplit::Heldout,
                other => bail!("unknown split tag {other:?} on line {}", lineno + 1),
            };
            templates.push(Template { id: templates.len(), split, text: text.trim().to_string() });
        }
        anyhow::ensure!(!templates.is_empty(), "empty template bank");
        Ok(TemplateBank { templates })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES).expect("builtin bank parses")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn ids(&self, split: TemplateSplit) -> Vec<usize> {
        self.templates.iter().filter(|t| t.split == split).map(|t| t.id).collect()
    }

    /// Fill one template with keyword variants consistent with `labels`.
    pub fn render<R: Rng>(
        &self,
        template_id: usize,
        labels: &AttributeLabels,
        rng: &mut R,
    ) -> StylePrompt {
        let template = &self.templates[template_id];
        let mut tokens = Vec::new();
        for word in template.text.split_whitespace() {
            let filled = match word {
                "{gender}" => pick(GENDER_WORDS[labels.gender.index()], rng),
                "{pitch}" => pick(PITCH_WORDS[labels.pitch.index()], rng),
                "{speed}" => pick(SPEED_WORDS[labels.speed.index()], rng),
                "{energy}" => pick(ENERGY_WORDS[labels.energy.index()], rng),
                "{emotion}" => pick(EMOTION_WORDS[labels.emotion % MAX_EMOTIONS], rng),
                w => w,
            };
            tokens.push(filled.to_string());
        }
        StylePrompt { tokens, template_id: Some(template_id) }
    }

    /// `n` distinct prompts consistent with `labels`, drawn from the given
    /// template pool.
    pub fn generate_prompts<R: Rng>(
        &self,
        labels: &AttributeLabels,
        rng: &mut R,
        n: usize,
        pool: &[usize],
    ) -> Result<Vec<StylePrompt>> {
        anyhow::ensure!(n >= 1, "need n >= 1 prompts");
        anyhow::ensure!(!pool.is_empty(), "empty template pool");
        let mut out: Vec<StylePrompt> = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            anyhow::ensure!(attempts < 200 * n, "template pool too small for {n} distinct prompts");
            let tid = pool[rng.gen_range(0..pool.len())];
            let prompt = self.render(tid, labels, rng);
            if !out.iter().any(|p| p.tokens == prompt.tokens) {
                out.push(prompt);
            }
        }
        Ok(out)
    }
}

fn pick<'a, R: Rng>(variants: &[&'a str], rng: &mut R) -> &'a str {
    variants[rng.gen_range(0..variants.len())]
}

/// Word inventory: train-template scaffold plus every keyword variant.
/// Heldout-only scaffold words intentionally map to OOV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    /// ids of attribute keyword variants (never dropped in augmentation)
    pub keyword_ids: std::collections::BTreeSet<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_bank(bank: &TemplateBank) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in &bank.templates {
            if t.split != TemplateSplit::Train {
                continue;
            }
            for w in t.text.split_whitespace() {
                if !w.starts_with('{') {
                    set.insert(w.to_string());
                }
            }
        }
        let all_keywords = GENDER_WORDS
            .iter()
            .chain(PITCH_WORDS.iter())
            .chain(SPEED_WORDS.iter())
            .chain(ENERGY_WORDS.iter())
            .chain(EMOTION_WORDS.iter());
        for class in all_keywords {
            for w in *class {
                set.insert(w.to_string());
            }
        }
        let words: Vec<String> = set.into_iter().collect();
        let mut v = Vocab { words, keyword_ids: Default::default(), index: HashMap::new() };
        v.rebuild_index();
        let keywords = GENDER_WORDS
            .iter()
            .chain(PITCH_WORDS.iter())
            .chain(SPEED_WORDS.iter())
            .chain(ENERGY_WORDS.iter())
            .chain(EMOTION_WORDS.iter())
            .flat_map(|class| class.iter());
        for w in keywords {
            if let Some(&id) = v.index.get(*w) {
                v.keyword_ids.insert(id);
            }
        }
        v
    }

    pub fn is_keyword(&self, id: usize) -> bool {
        self.keyword_ids.contains(&id)
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    /// One extra row past the word list.
    pub fn oov_id(&self) -> usize {
        self.words.len()
    }

    pub fn size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn encode(&self, prompt: &StylePrompt) -> Vec<usize> {
        prompt
            .tokens
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or_else(|| self.oov_id()))
            .collect()
    }

    pub fn oov_fraction(&self, prompt: &StylePrompt) -> f64 {
        if prompt.tokens.is_empty() {
            return 0.0;
        }
        let oov = prompt.tokens.iter().filter(|w| !self.index.contains_key(*w)).count();
        oov as f64 / prompt.tokens.len() as f64
    }
}

/// Attention pooling over word embeddings + projection to style space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptEncoderParams {
    pub emb: ParamId,
    pub score: ParamId,
    pub proj: Linear,
    pub d_embed: usize,
    pub d_style: usize,
}

impl PromptEncoderParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab_size: usize,
        d_embed: usize,
        d_style: usize,
    ) -> Self {
        PromptEncoderParams {
            emb: store.add("prompt.emb", Tensor::randn(rng, vocab_size, d_embed, 0.05)),
            score: store.add("prompt.score", Tensor::randn(rng, d_embed, 1, 0.2)),
            proj: Linear::new(store, rng, "prompt.proj", d_embed, d_style, true),
            d_embed,
            d_style,
        }
    }

    /// Encode token ids to a 1×d_style node.
    pub fn encode_graph(&self, g: &mut Graph, ids: &[usize]) -> NodeId {
        assert!(!ids.is_empty(), "empty prompt");
        let e = g.embed(self.emb, ids);
        let score_w = g.param(self.score);
        let scores = g.matmul(e, score_w);
        let scores_row = g.transpose(scores);
        let attn = g.softmax_rows(scores_row);
        let pooled = g.matmul(attn, e);
        self.proj.apply(g, pooled)
    }
}

/// Map a prompt to its style semantic vector.
pub fn encode_style_prompt(
    store: &ParamStore,
    params: &PromptEncoderParams,
    vocab: &Vocab,
    prompt: &StylePrompt,
) -> Result<Vec<f64>> {
    anyhow::ensure!(!prompt.tokens.is_empty(), "empty style prompt");
    let ids = vocab.encode(prompt);
    let mut g = Graph::new(store);
    let out = params.encode_graph(&mut g, &ids);
    Ok(g.val(out).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{AttributeLabels, Gender, Level, Pace};

    fn labels() -> AttributeLabels {
        AttributeLabels {
            gender: Gender::Female,
            pitch: Level::High,
            speed: Pace::Fast,
            energy: Level::High,
            emotion: 1,
        }
    }

    #[test]
    fn builtin_bank_has_both_splits() {
        let bank = TemplateBank::builtin();
        assert!(bank.ids(TemplateSplit::Train).len() >= 8);
        assert!(bank.ids(TemplateSplit::Heldout).len() >= 3);
    }

    #[test]
    fn prompts_are_distinct_consistent_and_deterministic() {
        let bank = TemplateBank::builtin();
        let pool = bank.ids(TemplateSplit::Train);
        let mut rng = crate::rng::derive(3, "prompt", 0, 0);
        let prompts = bank.generate_prompts(&labels(), &mut rng, 3, &pool).unwrap();
        assert_eq!(prompts.len(), 3);
        for p in &prompts {
            let text = p.text();
            assert!(
                ["high-pitched", "shrill", "squeaky"].iter().any(|k| text.contains(k)),
                "prompt should mention a high-pitch keyword: {text}"
            );
        }
        assert_ne!(prompts[0].tokens, prompts[1].tokens);
        let mut rng2 = crate::rng::derive(3, "prompt", 0, 0);
        let again = bank.generate_prompts(&labels(), &mut rng2, 3, &pool).unwrap();
        assert_eq!(prompts, again);
    }

    #[test]
    fn heldout_scaffold_words_are_oov() {
        let bank = TemplateBank::builtin();
        let vocab = Vocab::from_bank(&bank);
        let p = StylePrompt::from_text("imagine a woman");
        assert!(vocab.oov_fraction(&p) > 0.0);
        let ids = vocab.encode(&p);
        assert_eq!(ids[0], vocab.oov_id());
        assert_ne!(ids[2], vocab.oov_id());
    }

    #[test]
    fn encoder_is_deterministic_and_rejects_empty() {
        let bank = TemplateBank::builtin();
        let vocab = Vocab::from_bank(&bank);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::derive(0, "enc", 0, 0);
        let params = PromptEncoderParams::new(&mut store, &mut rng, vocab.size(), 8, 16);
        let p = StylePrompt::from_text("a loud fast woman");
        let a = encode_style_prompt(&store, &params, &vocab, &p).unwrap();
        let b = encode_style_prompt(&store, &params, &vocab, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let empty = StylePrompt { tokens: vec![], template_id: None };
        assert!(encode_style_prompt(&store, &params, &vocab, &empty).is_err());
    }

    #[test]
    fn all_oov_prompt_encodes_via_oov_path() {
        let bank = TemplateBank::builtin();
        let vocab = Vocab::from_bank(&bank);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::derive(1, "enc", 0, 0);
        let params = PromptEncoderParams::new(&mut store, &mut rng, vocab.size(), 8, 16);
        let p = StylePrompt::from_text("zzz qqq xxx");
        assert_eq!(vocab.oov_fraction(&p), 1.0);
        let v = encode_style_prompt(&store, &params, &vocab, &p).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
