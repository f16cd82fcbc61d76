//! Template-based prompt augmentation and the hashed word tokenizer.
//!
//! Prompts are rendered from a shipped template bank (`assets/templates.txt`)
//! and per-emotion phrase tables (`assets/phrases.txt`), with slot fillers
//! taken from the subject's metadata.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{AgeGroup, Ethnicity, Gender, SubjectMeta};
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::rng;

pub const VOCAB_SIZE: usize = 4096;
pub const DEFAULT_PROMPTS_PER_CLASS: usize = 8;

const TEMPLATES_TXT: &str = include_str!("../assets/templates.txt");
const PHRASES_TXT: &str = include_str!("../assets/phrases.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseForm {
    Noun,
    State,
    Show,
    Act,
    Pair,
}

impl PhraseForm {
    fn parse(s: &str) -> Option<PhraseForm> {
        Some(match s {
            "noun" => PhraseForm::Noun,
            "state" => PhraseForm::State,
            "show" => PhraseForm::Show,
            "act" => PhraseForm::Act,
            "pair" => PhraseForm::Pair,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    AgeAdj,
    Ethnicity,
    EthnicityLower,
    GenderNoun,
    GenderAdj,
    EmotionPhrase,
    EmotionTail,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        Some(match name {
            "age_adj" => Slot::AgeAdj,
            "ethnicity" => Slot::Ethnicity,
            "ethnicity|lower" => Slot::EthnicityLower,
            "gender_noun" => Slot::GenderNoun,
            "gender_noun:adj" => Slot::GenderAdj,
            "emotion_phrase" => Slot::EmotionPhrase,
            "emotion_tail" => Slot::EmotionTail,
            _ => return None,
        })
    }

    /// Slots sharing a base name count as one slot for the used-once rule.
    fn base(self) -> u8 {
        match self {
            Slot::AgeAdj => 0,
            Slot::Ethnicity | Slot::EthnicityLower => 1,
            Slot::GenderNoun | Slot::GenderAdj => 2,
            Slot::EmotionPhrase => 3,
            Slot::EmotionTail => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: u32,
    pub form: PhraseForm,
    pub text: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(id: u32, form: PhraseForm, text: &str) -> Result<PromptTemplate> {
        let mut segments = Vec::new();
        let mut seen = HashSet::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let close = rest[open..].find('}').ok_or_else(|| {
                Error::invalid(format!("template {id}: unterminated slot in '{text}'"))
            })? + open;
            let name = &rest[open + 1..close];
            let slot = Slot::parse(name)
                .ok_or_else(|| Error::invalid(format!("template {id}: unknown slot {{{name}}}")))?;
            if !seen.insert(slot.base()) {
                return Err(Error::invalid(format!(
                    "template {id}: slot {{{name}}} used more than once"
                )));
            }
            segments.push(Segment::Slot(slot));
            rest = &rest[close + 1..];
        }
        if rest.contains('}') {
            return Err(Error::invalid(format!("template {id}: stray '}}' in '{text}'")));
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        let has = |s: Slot| segments.contains(&Segment::Slot(s));
        if !has(Slot::EmotionPhrase) {
            return Err(Error::invalid(format!("template {id}: missing {{emotion_phrase}}")));
        }
        if has(Slot::EmotionTail) != (form == PhraseForm::Pair) {
            return Err(Error::invalid(format!(
                "template {id}: {{emotion_tail}} is required by, and only allowed in, pair templates"
            )));
        }
        Ok(PromptTemplate {
            id,
            form,
            text: text.to_string(),
            segments,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    pub emotion: Emotion,
    pub form: PhraseForm,
    pub head: String,
    pub tail: Option<String>,
}

/// Result of [`PromptBank::expand`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Expansion {
    pub prompts: Vec<String>,
    /// Set when fewer distinct prompts exist than were requested.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct PromptBank {
    templates: Vec<PromptTemplate>,
    phrases: Vec<Phrase>,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

impl PromptBank {
    /// The bank compiled into the crate.
    pub fn builtin() -> &'static PromptBank {
        static BANK: OnceLock<PromptBank> = OnceLock::new();
        BANK.get_or_init(|| {
            PromptBank::parse(TEMPLATES_TXT, PHRASES_TXT).expect("shipped prompt bank is valid")
        })
    }

    pub fn parse(templates: &str, phrases: &str) -> Result<PromptBank> {
        let mut tpls = Vec::new();
        for (line, l) in data_lines(templates) {
            let mut parts = l.splitn(3, '|');
            let (Some(id), Some(form), Some(text)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::invalid(format!("templates line {line}: expected id|form|text")));
            };
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("templates line {line}: bad id '{id}'")))?;
            let form = PhraseForm::parse(form.trim())
                .ok_or_else(|| Error::invalid(format!("templates line {line}: bad form '{form}'")))?;
            if tpls.iter().any(|t: &PromptTemplate| t.id == id) {
                return Err(Error::invalid(format!("templates line {line}: duplicate id {id}")));
            }
            tpls.push(PromptTemplate::parse(id, form, text.trim())?);
        }
        let mut phr = Vec::new();
        for (line, l) in data_lines(phrases) {
            let parts: Vec<&str> = l.split('|').map(str::trim).collect();
            if !(3..=4).contains(&parts.len()) {
                return Err(Error::invalid(format!(
                    "phrases line {line}: expected emotion|form|phrase[|tail]"
                )));
            }
            let emotion: Emotion = parts[0].parse()?;
            let form = PhraseForm::parse(parts[1])
                .ok_or_else(|| Error::invalid(format!("phrases line {line}: bad form")))?;
            let tail = parts.get(3).map(|s| s.to_string());
            if tail.is_some() != (form == PhraseForm::Pair) {
                return Err(Error::invalid(format!(
                    "phrases line {line}: a tail is required by, and only allowed in, pair phrases"
                )));
            }
            phr.push(Phrase {
                emotion,
                form,
                head: parts[2].to_string(),
                tail,
            });
        }
        Ok(PromptBank {
            templates: tpls,
            phrases: phr,
        })
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn phrases(&self, emotion: Emotion, form: PhraseForm) -> Vec<&Phrase> {
        self.phrases
            .iter()
            .filter(|p| p.emotion == emotion && p.form == form)
            .collect()
    }

    /// Renders template `template_id` with the `phrase_index`-th phrase of the
    /// template's form for `emotion`.
    pub fn render(
        &self,
        template_id: u32,
        emotion: Emotion,
        meta: &SubjectMeta,
        phrase_index: usize,
    ) -> Result<String> {
        let tpl = self
            .templates
            .iter()
            .find(|t| t.id == template_id)
            .ok_or_else(|| Error::invalid(format!("no template with id {template_id}")))?;
        let phrases = self.phrases(emotion, tpl.form);
        let phrase = phrases.get(phrase_index).ok_or_else(|| {
            Error::invalid(format!(
                "template {template_id}: phrase index {phrase_index} out of range ({} available)",
                phrases.len()
            ))
        })?;
        Ok(render_with(tpl, phrase, meta))
    }

    /// Every distinct prompt renderable for (emotion, meta), in template then
    /// phrase order.
    pub fn candidates(&self, emotion: Emotion, meta: &SubjectMeta) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for tpl in &self.templates {
            for phrase in self.phrases(emotion, tpl.form) {
                let s = render_with(tpl, phrase, meta);
                if seen.insert(s.clone()) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// `n` distinct prompts for one subject and emotion, in a seeded order.
    pub fn expand(&self, emotion: Emotion, meta: &SubjectMeta, n: usize, seed: u64) -> Result<Expansion> {
        if n == 0 {
            return Err(Error::invalid("prompt count must be >= 1"));
        }
        let mut cands = self.candidates(emotion, meta);
        let mut r = rng::stream(&[
            seed,
            emotion.index() as u64,
            meta.age_group as u64,
            meta.gender as u64,
            meta.ethnicity as u64,
        ]);
        cands.shuffle(&mut r);
        let truncated = n > cands.len();
        cands.truncate(n);
        Ok(Expansion {
            prompts: cands,
            truncated,
        })
    }

    /// A class-level prompt set covering the metadata cross-product.
    ///
    /// The k-th prompt uses metadata combination k (mod 24) with gender
    /// varying fastest, then age group, then ethnicity:
    /// (young, female), (young, male), (middle-aged, female), ... . From that
    /// combination's seeded candidate order it takes the first prompt not
    /// already chosen.
    pub fn class_prompt_set(&self, emotion: Emotion, n_per_class: usize, seed: u64) -> Vec<String> {
        let combos = metadata_combinations();
        let mut lists: Vec<Option<Vec<String>>> = vec![None; combos.len()];
        let mut chosen = Vec::with_capacity(n_per_class);
        let mut seen = HashSet::new();
        let mut exhausted = 0;
        let mut k = 0;
        while chosen.len() < n_per_class && exhausted < combos.len() {
            let c = k % combos.len();
            k += 1;
            let list = lists[c].get_or_insert_with(|| {
                let mut l = self.candidates(emotion, &combos[c]);
                l.shuffle(&mut rng::stream(&[seed, emotion.index() as u64, c as u64, 0xC1A5]));
                l
            });
            match list.iter().position(|s| !seen.contains(s)) {
                Some(i) => {
                    let s = list.remove(i);
                    seen.insert(s.clone());
                    chosen.push(s);
                    exhausted = 0;
                }
                None => exhausted += 1,
            }
        }
        chosen
    }
}

/// All (age, gender, ethnicity) combinations, gender fastest.
pub fn metadata_combinations() -> Vec<SubjectMeta> {
    let mut out = Vec::with_capacity(24);
    for ethnicity in Ethnicity::ALL {
        for age_group in AgeGroup::ALL {
            for gender in Gender::ALL {
                out.push(SubjectMeta {
                    subject_id: 0,
                    age_group,
                    gender,
                    ethnicity,
                });
            }
        }
    }
    out
}

fn render_with(tpl: &PromptTemplate, phrase: &Phrase, meta: &SubjectMeta) -> String {
    let mut s = String::new();
    for seg in &tpl.segments {
        match seg {
            Segment::Text(t) => s.push_str(t),
            Segment::Slot(slot) => s.push_str(&fill(*slot, phrase, meta)),
        }
    }
    agree_articles(&s)
}

fn fill(slot: Slot, phrase: &Phrase, meta: &SubjectMeta) -> String {
    match slot {
        Slot::AgeAdj => match meta.age_group {
            AgeGroup::Young => "young",
            AgeGroup::MiddleAged => "middle-aged",
            AgeGroup::Older => "older",
        }
        .to_string(),
        Slot::Ethnicity => ethnicity_word(meta.ethnicity).to_string(),
        Slot::EthnicityLower => ethnicity_word(meta.ethnicity).to_lowercase(),
        Slot::GenderNoun => match meta.gender {
            Gender::Female => "woman",
            Gender::Male => "man",
        }
        .to_string(),
        Slot::GenderAdj => match meta.gender {
            Gender::Female => "female",
            Gender::Male => "male",
        }
        .to_string(),
        Slot::EmotionPhrase => phrase.head.clone(),
        Slot::EmotionTail => phrase.tail.clone().unwrap_or_default(),
    }
}

fn ethnicity_word(e: Ethnicity) -> &'static str {
    match e {
        Ethnicity::Asian => "Asian",
        Ethnicity::Black => "Black",
        Ethnicity::White => "White",
        Ethnicity::Hispanic => "Hispanic",
    }
}

/// Rewrites "a"/"an" to agree with the initial letter of the next word.
fn agree_articles(s: &str) -> String {
    let words: Vec<&str> = s.split(' ').collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let lower = w.to_ascii_lowercase();
        let next_vowel = words
            .get(i + 1)
            .and_then(|n| n.chars().next())
            .map(|c| "aeiouAEIOU".contains(c));
        match (lower.as_str(), next_vowel) {
            ("a" | "an", Some(vowel)) => {
                let base = if vowel { "an" } else { "a" };
                if w.starts_with(char::is_uppercase) {
                    let mut c = base.chars();
                    let first = c.next().unwrap().to_ascii_uppercase();
                    out.push(std::iter::once(first).chain(c).collect());
                } else {
                    out.push(base.to_string());
                }
            }
            _ => out.push(w.to_string()),
        }
    }
    out.join(" ")
}

pub fn expand(emotion: Emotion, meta: &SubjectMeta, n: usize, seed: u64) -> Result<Expansion> {
    PromptBank::builtin().expand(emotion, meta, n, seed)
}

pub fn class_prompt_set(emotion: Emotion, n_per_class: usize, seed: u64) -> Vec<String> {
    PromptBank::builtin().class_prompt_set(emotion, n_per_class, seed)
}

/// Hashed word ids in `[0, VOCAB_SIZE)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Normalised words: lowercase, punctuation removed, split on whitespace.
pub fn normalize_words(prompt: &str) -> Vec<String> {
    let cleaned: String = prompt
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub fn word_id(word: &str) -> u32 {
    (fnv1a64(word.as_bytes()) % VOCAB_SIZE as u64) as u32
}

pub fn tokenize(prompt: &str) -> Result<TokenSeq> {
    let words = normalize_words(prompt);
    if words.is_empty() {
        return Err(Error::invalid("cannot tokenize an empty prompt"));
    }
    Ok(TokenSeq(words.iter().map(|w| word_id(w)).collect()))
}

/// Every word that can appear in a rendered prompt.
pub fn bank_vocabulary(bank: &PromptBank) -> Vec<String> {
    let mut words: HashSet<String> = HashSet::new();
    for emotion in Emotion::ALL {
        for meta in metadata_combinations() {
            for p in bank.candidates(emotion, &meta) {
                words.extend(normalize_words(&p));
            }
        }
    }
    let mut v: Vec<String> = words.into_iter().collect();
    v.sort();
    v
}
