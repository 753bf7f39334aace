//! Closed-vocabulary prompt encoder: a frozen embedding table plus sinusoidal
//! position codes. Placeholder tokens (`*m`, `*a`, `*s`) have all-zero rows in
//! the base table and are only given meaning by a tuned embedding.

use std::collections::HashMap;

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Appearance, AttributeSpec, Shape, Style};
use crate::error::{Error, Result};
use crate::tape::Matrix;

pub const FUNCTION_WORDS: &[&str] = &["a", "in", "the", "of", "shape", "appearance", "style"];
/// Class nouns that carry no attribute information.
pub const NEUTRAL_NOUNS: &[&str] = &["thing", "object", "toy", "item", "figure", "sticker"];
pub const PLACEHOLDERS: &[&str] = &["*m", "*a", "*s"];

/// Prompt word for each fill program.
pub fn appearance_word(a: Appearance) -> &'static str {
    match a {
        Appearance::SolidRed => "red",
        Appearance::SolidBlue => "blue",
        Appearance::SolidGreen => "green",
        Appearance::Stripes => "striped",
        Appearance::Checker => "checkered",
        Appearance::Dots => "dotted",
    }
}

pub fn style_word(s: Style) -> &'static str {
    match s {
        Style::Flat => "flat",
        Style::Outline => "outlined",
        Style::Stippled => "stippled",
    }
}

pub fn shape_word(s: Shape) -> &'static str {
    s.name()
}

/// Attribute named by a single prompt word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NamedAttribute {
    Shape(Shape),
    Appearance(Appearance),
    Style(Style),
}

pub fn attribute_of_word(word: &str) -> Option<NamedAttribute> {
    if let Some(&s) = Shape::ALL.iter().find(|s| shape_word(**s) == word) {
        return Some(NamedAttribute::Shape(s));
    }
    if let Some(&a) = Appearance::ALL.iter().find(|a| appearance_word(**a) == word) {
        return Some(NamedAttribute::Appearance(a));
    }
    Style::ALL
        .iter()
        .find(|s| style_word(**s) == word)
        .map(|&s| NamedAttribute::Style(s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Function words, neutral nouns, every attribute word and the placeholders.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        tokens.extend(NEUTRAL_NOUNS.iter().map(|s| s.to_string()));
        tokens.extend(Shape::ALL.iter().map(|s| shape_word(*s).to_string()));
        tokens.extend(Appearance::ALL.iter().map(|a| appearance_word(*a).to_string()));
        tokens.extend(Style::ALL.iter().map(|s| style_word(*s).to_string()));
        tokens.extend(PLACEHOLDERS.iter().map(|s| s.to_string()));
        Self::new(tokens)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::Vocabulary {
            token: token.to_string(),
        })
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_placeholder(&self, id: usize) -> bool {
        self.token(id).is_some_and(|t| PLACEHOLDERS.contains(&t))
    }
}

/// Lower-cases and collapses whitespace.
pub fn normalize_prompt(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoding {
    pub ids: Vec<usize>,
    /// `len x text_dim`
    pub embeddings: Matrix,
    /// Token positions holding a placeholder.
    pub placeholder_slots: Vec<usize>,
}

impl PromptEncoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The single placeholder slot of a tuning prompt.
    pub fn single_placeholder(&self) -> Result<usize> {
        match self.placeholder_slots.as_slice() {
            [slot] => Ok(*slot),
            other => Err(Error::Config(format!(
                "tuning prompts need exactly one placeholder, found {}",
                other.len()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { dim: 32, max_len: 24 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub config: TextEncoderConfig,
    /// `vocab x dim`; placeholder rows stay zero.
    pub table: Matrix,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, config: TextEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Matrix::from_shape_fn((vocab.len(), config.dim), |_| {
            rng.sample::<f64, _>(StandardNormal) * 0.5
        });
        for id in 0..vocab.len() {
            if vocab.is_placeholder(id) {
                table.row_mut(id).fill(0.0);
            }
        }
        Self {
            vocab,
            config,
            table,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = normalize_prompt(text)
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.vocab.id(w))
            .collect::<Result<_>>()?;
        if ids.len() > self.config.max_len {
            return Err(Error::Parameter(format!(
                "prompt has {} tokens, limit is {}",
                ids.len(),
                self.config.max_len
            )));
        }
        Ok(ids)
    }

    pub fn encode(&self, text: &str) -> Result<PromptEncoding> {
        let ids = self.tokenize(text)?;
        self.encode_ids(ids)
    }

    pub fn encode_ids(&self, ids: Vec<usize>) -> Result<PromptEncoding> {
        let d = self.dim();
        let mut embeddings = Matrix::zeros((ids.len(), d));
        let mut placeholder_slots = Vec::new();
        for (pos, &id) in ids.iter().enumerate() {
            if id >= self.vocab.len() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    limit: self.vocab.len(),
                });
            }
            if self.vocab.is_placeholder(id) {
                placeholder_slots.push(pos);
            }
            let mut row = embeddings.row_mut(pos);
            row.assign(&self.table.row(id));
            row += &position_code(pos, d);
        }
        Ok(PromptEncoding {
            ids,
            embeddings,
            placeholder_slots,
        })
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.vocab.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Table row of `word`, e.g. the attribute word fused into a placeholder initialization.
    pub fn word_embedding(&self, word: &str) -> Result<Array1<f64>> {
        Ok(self.table.row(self.vocab.id(word)?).to_owned())
    }

    /// Encoding with every placeholder row replaced by `embedding` (plus its position code).
    pub fn encode_with_placeholder(
        &self,
        text: &str,
        embedding: ArrayView1<f64>,
    ) -> Result<PromptEncoding> {
        let mut enc = self.encode(text)?;
        substitute_placeholder(&mut enc, embedding)?;
        Ok(enc)
    }
}

pub fn substitute_placeholder(enc: &mut PromptEncoding, embedding: ArrayView1<f64>) -> Result<()> {
    let d = enc.embeddings.ncols();
    if embedding.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "placeholder embedding has width {}, encoder width is {d}",
            embedding.len()
        )));
    }
    for &slot in &enc.placeholder_slots {
        let mut row = enc.embeddings.row_mut(slot);
        row.assign(&embedding);
        row += &position_code(slot, d);
    }
    Ok(())
}

/// Sinusoidal code for token position `pos`.
pub fn position_code(pos: usize, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |i| {
        let k = (i / 2) as f64;
        let freq = (-(10_000f64.ln()) * 2.0 * k / dim as f64).exp();
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Sentence describing some or all of an image's attributes, used as a
/// base-training caption. `mention` selects which attributes are named; the
/// rest are left for the model to sample.
#[derive(Clone, Copy, Debug)]
pub struct CaptionPlan {
    pub shape: Option<SlotForm>,
    pub appearance: Option<SlotForm>,
    pub style: Option<SlotForm>,
    pub noun: usize,
}

/// How an attribute is phrased: inline (`a red star`) or as a clause
/// (`a thing in the appearance of red`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotForm {
    Inline,
    Clause,
}

impl CaptionPlan {
    pub fn random(rng: &mut impl Rng, mention_prob: f64) -> Self {
        let slot = |rng: &mut dyn rand::RngCore| {
            if rng.gen_bool(mention_prob) {
                Some(if rng.gen_bool(0.5) {
                    SlotForm::Inline
                } else {
                    SlotForm::Clause
                })
            } else {
                None
            }
        };
        let shape = slot(rng);
        let appearance = slot(rng);
        let style = slot(rng);
        Self {
            shape,
            appearance,
            style,
            noun: rng.gen_range(0..NEUTRAL_NOUNS.len()),
        }
    }

    pub fn render(&self, spec: &AttributeSpec) -> String {
        let mut words = vec!["a".to_string()];
        if self.style == Some(SlotForm::Inline) {
            words.push(style_word(spec.style).into());
        }
        if self.appearance == Some(SlotForm::Inline) {
            words.push(appearance_word(spec.appearance).into());
        }
        if self.shape == Some(SlotForm::Inline) {
            words.push(shape_word(spec.shape).into());
        } else {
            words.push(NEUTRAL_NOUNS[self.noun].into());
        }
        let mut clause = |attr: &str, word: &str| {
            words.extend(["in", "the", attr, "of", word].map(String::from));
        };
        if self.shape == Some(SlotForm::Clause) {
            clause("shape", shape_word(spec.shape));
        }
        if self.appearance == Some(SlotForm::Clause) {
            clause("appearance", appearance_word(spec.appearance));
        }
        if self.style == Some(SlotForm::Clause) {
            clause("style", style_word(spec.style));
        }
        words.join(" ")
    }
}

/// Random base-training caption for `spec`.
pub fn random_caption(spec: &AttributeSpec, rng: &mut impl Rng) -> String {
    CaptionPlan::random(rng, 0.75).render(spec)
}

impl Vocabulary {
    /// Restores the token index after deserialization.
    pub fn reindexed(mut self) -> Self {
        self.rebuild_index();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encoder() -> TextEncoder {
        TextEncoder::new(Vocabulary::standard(), TextEncoderConfig::default(), 1)
    }

    #[test]
    fn placeholder_slot_is_located() {
        let enc = encoder();
        let e = enc.encode("a thing in the shape of *m").unwrap();
        assert_eq!(e.placeholder_slots, vec![6]);
        assert_eq!(e.single_placeholder().unwrap(), 6);
        assert_eq!(enc.vocab.token(e.ids[6]), Some("*m"));
        let e = enc.encode("A  circle in the appearance of *a").unwrap();
        assert_eq!(e.placeholder_slots, vec![6]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = encoder();
        let a = enc.encode("a red star in the style of flat").unwrap();
        let b = enc.encode("a red star in the style of flat").unwrap();
        assert_eq!(a, b);
        assert!(a.placeholder_slots.is_empty());
        assert!(a.single_placeholder().is_err());
    }

    #[test]
    fn unknown_token_is_named() {
        let enc = encoder();
        match enc.encode("a zzz in the shape of *m") {
            Err(Error::Vocabulary { token }) => assert_eq!(token, "zzz"),
            other => panic!("expected vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn placeholder_rows_are_zero_and_substitution_works() {
        let enc = encoder();
        let id = enc.vocab.id("*a").unwrap();
        assert!(enc.table.row(id).iter().all(|&v| v == 0.0));
        let v = Array1::from_elem(enc.dim(), 0.25);
        let e = enc.encode_with_placeholder("a star in the appearance of *a", v.view()).unwrap();
        let expected = &v + &position_code(6, enc.dim());
        assert_eq!(e.embeddings.row(6), expected);
        assert!(substitute_placeholder(&mut e.clone(), Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn every_attribute_word_is_in_vocabulary_and_classified() {
        let v = Vocabulary::standard();
        for spec in AttributeSpec::all() {
            for w in [shape_word(spec.shape), appearance_word(spec.appearance), style_word(spec.style)] {
                assert!(v.id(w).is_ok());
            }
            assert_eq!(attribute_of_word(appearance_word(spec.appearance)), Some(NamedAttribute::Appearance(spec.appearance)));
        }
        assert_eq!(attribute_of_word("thing"), None);
    }

    #[test]
    fn vocabulary_survives_serde() {
        let v = Vocabulary::standard();
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocabulary = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn decode_round_trips_normalized_prompts(
            s in 0..5usize, a in 0..6usize, t in 0..3usize, seed in 0u64..10_000, caps in proptest::bool::ANY,
        ) {
            let enc = encoder();
            let spec = AttributeSpec::from_indices(s, a, t).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let caption = random_caption(&spec, &mut rng);
            let messy = if caps { caption.to_uppercase().replace(' ', "   ") } else { caption.clone() };
            let e = enc.encode(&messy).unwrap();
            prop_assert_eq!(enc.decode(&e.ids), normalize_prompt(&messy));
            prop_assert_eq!(enc.decode(&e.ids), caption);
        }
    }
}
