//! Factorized discrete token space with exact attribute decode.
//!
//! A codec matrix is a T×N grid of tokens in `[0, codebook_size)`. Channels
//! are partitioned content → prosody → acoustic. Style attributes (pitch,
//! speed, energy, emotion⊗gender) are embedded into the prosody/acoustic
//! channels by an injective `(class, degree) → token` map, so decoding a
//! generated grid back to its labels is exact. Content channels carry the
//! phoneme sequence; nothing in the grid carries timbre.
//!
//! Style tokens for a channel with `slots` class patterns and `bins` degree
//! steps are laid out as `1 + slot·bins + bin`; token 0 and the tail above
//! `slots·bins` are deliberately invalid so garbage grids fail to decode
//! instead of aliasing onto a label.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn index(self) -> usize {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Gender::Male
        } else {
            Gender::Female
        }
    }
}

/// Three-way bin for pitch and energy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Normal,
    High,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::Low => 0,
            Level::Normal => 1,
            Level::High => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Level::Low,
            1 => Level::Normal,
            _ => Level::High,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pace {
    Slow,
    Normal,
    Fast,
}

impl Pace {
    pub fn index(self) -> usize {
        match self {
            Pace::Slow => 0,
            Pace::Normal => 1,
            Pace::Fast => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Pace::Slow,
            1 => Pace::Normal,
            _ => Pace::Fast,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeLabels {
    pub gender: Gender,
    pub pitch: Level,
    pub speed: Pace,
    pub energy: Level,
    pub emotion: usize,
}

/// Continuous intensity within each label bin, on the channel's degree grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degrees {
    pub pitch: f64,
    pub speed: f64,
    pub energy: f64,
    pub emotion: f64,
}

impl Degrees {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pitch, self.speed, self.energy, self.emotion]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleAttr {
    Pitch,
    Speed,
    Energy,
    EmotionGender,
}

pub const STYLE_ATTRS: [StyleAttr; 4] = [
    StyleAttr::Pitch,
    StyleAttr::Speed,
    StyleAttr::Energy,
    StyleAttr::EmotionGender,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub n_content: usize,
    pub n_prosody: usize,
    pub n_acoustic: usize,
    pub codebook_size: usize,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        ChannelLayout { n_content: 2, n_prosody: 1, n_acoustic: 3, codebook_size: 64 }
    }
}

impl ChannelLayout {
    pub fn n_channels(&self) -> usize {
        self.n_content + self.n_prosody + self.n_acoustic
    }

    pub fn n_style(&self) -> usize {
        self.n_prosody + self.n_acoustic
    }
}

/// Plain T×N token grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<u16>,
}

impl TokenGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        TokenGrid { rows, cols, tokens: vec![0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> u16 {
        self.tokens[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u16) {
        self.tokens[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<u16> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecMatrix {
    pub grid: TokenGrid,
    pub layout: ChannelLayout,
}

impl CodecMatrix {
    pub fn zeros(t: usize, layout: ChannelLayout) -> Self {
        CodecMatrix { grid: TokenGrid::zeros(t, layout.n_channels()), layout }
    }

    pub fn frames(&self) -> usize {
        self.grid.rows
    }
}

/// Unit-norm global timbre vector; never enters the token grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimbreEmbedding(pub Vec<f64>);

impl TimbreEmbedding {
    pub fn normalized(mut v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "zero timbre vector");
        for x in v.iter_mut() {
            *x /= norm;
        }
        TimbreEmbedding(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    UnknownPattern { channel: usize, token: u16 },
    LayoutMismatch,
    BadContent { frame: usize },
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::UnknownPattern { channel, token } => {
                write!(f, "token {token} in style channel {channel} matches no known pattern")
            }
            DecodeError::LayoutMismatch => write!(f, "codec layout does not match this space"),
            DecodeError::BadContent { frame } => {
                write!(f, "content channels inconsistent at frame {frame}")
            }
        }
    }
}

impl std::error::Error for DecodeError {}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub attr: StyleAttr,
    pub slots: usize,
    pub bins: usize,
}

/// Number of degree steps for a style channel: leave token 0 invalid, then
/// round down to a multiple of ten so round decimal degrees sit exactly on
/// the grid.
fn degree_bins(codebook: usize, slots: usize) -> usize {
    let raw = (codebook - 1) / slots;
    if raw >= 10 {
        raw - raw % 10
    } else {
        raw.max(1)
    }
}

/// The factorized token space: channel specs, the style embedding tables
/// behind the style extractor, and the exact decode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecSpace {
    pub layout: ChannelLayout,
    pub emotion_count: usize,
    pub d_style: usize,
    pub specs: Vec<ChannelSpec>,
}

const CLASS_SCALE: f64 = 1.5;
const DEGREE_SCALE: f64 = 1.0;
/// dims per 3-class attr block (one-hot + degree)
const BLOCK: usize = 4;

impl CodecSpace {
    pub fn new(layout: ChannelLayout, emotion_count: usize, d_style: usize) -> anyhow::Result<Self> {
        anyhow::ensure!(layout.n_content >= 1, "need at least one content channel");
        anyhow::ensure!(
            layout.n_style() >= STYLE_ATTRS.len(),
            "need at least {} style channels, layout has {}",
            STYLE_ATTRS.len(),
            layout.n_style()
        );
        anyhow::ensure!(emotion_count >= 2, "need at least two emotion classes");
        anyhow::ensure!(layout.codebook_size >= 2, "codebook too small");
        anyhow::ensure!(d_style >= 3 * BLOCK + 4, "d_style too small for the attribute blocks");
        let mut specs = Vec::new();
        for i in 0..layout.n_style() {
            let attr = STYLE_ATTRS[i % STYLE_ATTRS.len()];
            let slots = match attr {
                StyleAttr::EmotionGender => emotion_count * 2,
                _ => 3,
            };
            let bins = degree_bins(layout.codebook_size, slots);
            anyhow::ensure!(
                slots * bins < layout.codebook_size,
                "codebook {} too small for {} slots",
                layout.codebook_size,
                slots
            );
            specs.push(ChannelSpec { attr, slots, bins });
        }
        Ok(CodecSpace { layout, emotion_count, d_style, specs })
    }

    pub fn with_defaults() -> Self {
        Self::new(ChannelLayout::default(), 5, 16).expect("defaults are valid")
    }

    /// Style-channel index (0-based within the style group) that decode
    /// reads for `attr`; later channels with the same attr are redundant.
    fn primary_channel(&self, attr: StyleAttr) -> usize {
        self.specs.iter().position(|s| s.attr == attr).expect("all attrs present")
    }

    pub fn spec_for(&self, attr: StyleAttr) -> &ChannelSpec {
        &self.specs[self.primary_channel(attr)]
    }

    pub fn slot_of(&self, labels: &AttributeLabels, attr: StyleAttr) -> usize {
        match attr {
            StyleAttr::Pitch => labels.pitch.index(),
            StyleAttr::Speed => labels.speed.index(),
            StyleAttr::Energy => labels.energy.index(),
            StyleAttr::EmotionGender => labels.emotion * 2 + labels.gender.index(),
        }
    }

    /// Quantize a requested degree in [0,1) onto the channel grid; returns
    /// (bin, realized degree). The realized degree round-trips exactly.
    pub fn quantize_degree(&self, attr: StyleAttr, degree: f64) -> (usize, f64) {
        let bins = self.spec_for(attr).bins;
        let bin = ((degree * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        (bin, bin as f64 / bins as f64)
    }

    pub fn style_token(&self, attr: StyleAttr, slot: usize, bin: usize) -> u16 {
        let spec = self.spec_for(attr);
        assert!(slot < spec.slots && bin < spec.bins);
        (1 + slot * spec.bins + bin) as u16
    }

    fn decode_token(&self, spec: &ChannelSpec, token: u16) -> Option<(usize, usize)> {
        let t = token as usize;
        if t == 0 || t > spec.slots * spec.bins {
            return None;
        }
        let idx = t - 1;
        Some((idx / spec.bins, idx % spec.bins))
    }

    /// Tokens for all style channels of an utterance with the given labels
    /// and per-attribute degree bins.
    pub fn encode_style_tokens(&self, labels: &AttributeLabels, bins: &[usize; 4]) -> Vec<u16> {
        self.specs
            .iter()
            .map(|spec| {
                let attr_idx = STYLE_ATTRS.iter().position(|a| *a == spec.attr).unwrap();
                let slot = self.slot_of(labels, spec.attr);
                (1 + slot * spec.bins + bins[attr_idx].min(spec.bins - 1)) as u16
            })
            .collect()
    }

    /// Partial decode of one attribute's channel: majority token → (slot,
    /// degree), or `None` when the majority token is not a valid pattern.
    /// Lets evaluation score each attribute independently even when some
    /// other channel of a model-generated grid is garbage.
    pub fn decode_channel(&self, codec: &CodecMatrix, attr: StyleAttr) -> Option<(usize, f64)> {
        if codec.layout != self.layout {
            return None;
        }
        let ch = self.primary_channel(attr);
        let col = self.layout.n_content + ch;
        let token = majority_token(&codec.grid, col);
        let spec = &self.specs[ch];
        self.decode_token(spec, token)
            .map(|(slot, bin)| (slot, bin as f64 / spec.bins as f64))
    }

    /// Exact inverse of the labels→pattern map. Model-generated grids may
    /// disagree across frames; each channel is read by majority vote (ties
    /// to the smaller token), and a majority token outside the valid range
    /// is an [`DecodeError::UnknownPattern`].
    pub fn decode_attributes(
        &self,
        codec: &CodecMatrix,
    ) -> Result<(AttributeLabels, Degrees), DecodeError> {
        if codec.layout != self.layout {
            return Err(DecodeError::LayoutMismatch);
        }
        let mut slots = [0usize; 4];
        let mut degs = [0f64; 4];
        for (ai, attr) in STYLE_ATTRS.iter().enumerate() {
            let ch = self.primary_channel(*attr);
            let col = self.layout.n_content + ch;
            let token = majority_token(&codec.grid, col);
            let spec = &self.specs[ch];
            let (slot, bin) = self
                .decode_token(spec, token)
                .ok_or(DecodeError::UnknownPattern { channel: col, token })?;
            slots[ai] = slot;
            degs[ai] = bin as f64 / spec.bins as f64;
        }
        let labels = AttributeLabels {
            gender: Gender::from_index(slots[3] % 2),
            pitch: Level::from_index(slots[0]),
            speed: Pace::from_index(slots[1]),
            energy: Level::from_index(slots[2]),
            emotion: slots[3] / 2,
        };
        let degrees =
            Degrees { pitch: degs[0], speed: degs[1], energy: degs[2], emotion: degs[3] };
        Ok((labels, degrees))
    }

    /// Probability that a uniformly random token decodes to the correct
    /// class of `attr` — the analytic chance level for control accuracy.
    pub fn chance_level(&self, attr: StyleAttr) -> f64 {
        let spec = self.spec_for(attr);
        let per_class = match attr {
            StyleAttr::EmotionGender => unreachable!("use chance for emotion or gender"),
            _ => spec.bins,
        };
        per_class as f64 / self.layout.codebook_size as f64
    }

    pub fn chance_level_emotion(&self) -> f64 {
        let spec = self.spec_for(StyleAttr::EmotionGender);
        // one emotion spans both genders
        (2 * spec.bins) as f64 / self.layout.codebook_size as f64
    }

    pub fn chance_level_gender(&self) -> f64 {
        let spec = self.spec_for(StyleAttr::EmotionGender);
        (self.emotion_count * spec.bins) as f64 / self.layout.codebook_size as f64
    }

    /// Style embedding of one token of one style channel; zero for invalid
    /// tokens and for redundant channels beyond the first four.
    fn token_embedding(&self, style_channel: usize, token: u16) -> Vec<f64> {
        let mut v = vec![0.0; self.d_style];
        if style_channel >= STYLE_ATTRS.len() {
            return v;
        }
        let spec = &self.specs[style_channel];
        let (slot, bin) = match self.decode_token(spec, token) {
            Some(x) => x,
            None => return v,
        };
        let degree = bin as f64 / spec.bins as f64;
        match spec.attr {
            StyleAttr::Pitch | StyleAttr::Speed | StyleAttr::Energy => {
                let off = BLOCK * style_channel;
                for i in 0..3 {
                    v[off + i] = CLASS_SCALE * (if i == slot { 1.0 } else { 0.0 } - 1.0 / 3.0);
                }
                v[off + 3] = DEGREE_SCALE * (degree - 0.5);
            }
            StyleAttr::EmotionGender => {
                // emotions sit on a circle so every pair of classes keeps a
                // wide margin; a scalar coordinate packs adjacent classes
                // too closely to survive encoder noise
                let off = 3 * BLOCK;
                let emotion = slot / 2;
                let gender = slot % 2;
                let angle = 2.0 * std::f64::consts::PI * emotion as f64
                    / self.emotion_count as f64;
                v[off] = CLASS_SCALE * angle.cos();
                v[off + 1] = CLASS_SCALE * angle.sin();
                v[off + 2] = CLASS_SCALE * if gender == 0 { -1.0 } else { 1.0 };
                v[off + 3] = DEGREE_SCALE * (degree - 0.5);
            }
        }
        v
    }

    /// Ground-truth global style vector: mean over frames of the summed
    /// per-channel token embeddings. Depends only on the style channels.
    pub fn style_extractor(&self, style: &TokenGrid) -> Vec<f64> {
        assert_eq!(style.cols, self.layout.n_style(), "style grid width mismatch");
        let mut acc = vec![0.0; self.d_style];
        for r in 0..style.rows {
            for c in 0..style.cols {
                let e = self.token_embedding(c, style.at(r, c));
                for (a, b) in acc.iter_mut().zip(e.iter()) {
                    *a += b;
                }
            }
        }
        let n = style.rows.max(1) as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
        acc
    }

    /// Style vector an utterance with these labels/degrees would extract to;
    /// used as the regression target without materializing a grid.
    pub fn style_vector_for(&self, labels: &AttributeLabels, bins: &[usize; 4]) -> Vec<f64> {
        let tokens = self.encode_style_tokens(labels, bins);
        let mut acc = vec![0.0; self.d_style];
        for (c, &tok) in tokens.iter().enumerate() {
            let e = self.token_embedding(c, tok);
            for (a, b) in acc.iter_mut().zip(e.iter()) {
                *a += b;
            }
        }
        acc
    }
}

fn majority_token(grid: &TokenGrid, col: usize) -> u16 {
    let mut counts = std::collections::BTreeMap::new();
    for r in 0..grid.rows {
        *counts.entry(grid.at(r, col)).or_insert(0usize) += 1;
    }
    // BTreeMap iteration is ascending, so ties resolve to the smaller token
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
        .unwrap_or(0)
}

/// Channel-dimension split into (content, prosody⊕acoustic); concatenating
/// the halves back reproduces the original matrix.
pub fn split_style(codec: &CodecMatrix) -> (TokenGrid, TokenGrid) {
    let t = codec.frames();
    let nc = codec.layout.n_content;
    let ns = codec.layout.n_style();
    let mut content = TokenGrid::zeros(t, nc);
    let mut style = TokenGrid::zeros(t, ns);
    for r in 0..t {
        for c in 0..nc {
            content.set(r, c, codec.grid.at(r, c));
        }
        for c in 0..ns {
            style.set(r, c, codec.grid.at(r, nc + c));
        }
    }
    (content, style)
}

pub fn concat_channels(content: &TokenGrid, style: &TokenGrid, layout: ChannelLayout) -> CodecMatrix {
    assert_eq!(content.rows, style.rows);
    assert_eq!(content.cols, layout.n_content);
    assert_eq!(style.cols, layout.n_style());
    let mut out = CodecMatrix::zeros(content.rows, layout);
    for r in 0..content.rows {
        for c in 0..content.cols {
            out.grid.set(r, c, content.at(r, c));
        }
        for c in 0..style.cols {
            out.grid.set(r, layout.n_content + c, style.at(r, c));
        }
    }
    out
}

/// Fill the content channels: channel 0 repeats the phoneme id over its
/// duration, channel 1 (when present) repeats a fixed permuted view of the
/// id. Token values depend only on (content_tokens, durations).
pub fn write_content_channels(
    codec: &mut CodecMatrix,
    content_tokens: &[usize],
    durations: &[usize],
    perm: &[u16],
) {
    assert_eq!(content_tokens.len(), durations.len());
    let mut frame = 0;
    for (&p, &dur) in content_tokens.iter().zip(durations.iter()) {
        for _ in 0..dur {
            codec.grid.set(frame, 0, p as u16);
            if codec.layout.n_content > 1 {
                codec.grid.set(frame, 1, perm[p]);
            }
            frame += 1;
        }
    }
    assert_eq!(frame, codec.frames(), "durations must sum to T");
}

/// Exact inverse of [`write_content_channels`] for grids generated by it
/// (content token runs delimit phonemes; generation never repeats a
/// phoneme consecutively).
pub fn decode_content(
    codec: &CodecMatrix,
    perm: &[u16],
) -> Result<(Vec<usize>, Vec<usize>), DecodeError> {
    let t = codec.frames();
    let mut tokens = Vec::new();
    let mut durations = Vec::new();
    let mut r = 0;
    while r < t {
        let p = codec.grid.at(r, 0) as usize;
        if p >= perm.len() {
            return Err(DecodeError::BadContent { frame: r });
        }
        let mut len = 0;
        while r + len < t && codec.grid.at(r + len, 0) as usize == p {
            if codec.layout.n_content > 1 && codec.grid.at(r + len, 1) != perm[p] {
                return Err(DecodeError::BadContent { frame: r + len });
            }
            len += 1;
        }
        tokens.push(p);
        durations.push(len);
        r += len;
    }
    Ok((tokens, durations))
}

/// Everything the corpus pairs together for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUtterance {
    pub speaker_id: usize,
    pub content_tokens: Vec<usize>,
    pub style_text: Vec<String>,
    pub template_id: usize,
    pub labels: AttributeLabels,
    pub degrees: Degrees,
    pub durations: Vec<usize>,
    pub codec: CodecMatrix,
    pub timbre: TimbreEmbedding,
}

impl SyntheticUtterance {
    pub fn frames(&self) -> usize {
        self.codec.frames()
    }
}
