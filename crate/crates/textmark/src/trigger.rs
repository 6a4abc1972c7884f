//! Trigger dictionaries and deterministic trigger application.
//!
//! A trigger edits text at one of three granularities. The edit targets a
//! "unit" whose meaning depends on the level:
//!
//! * `Character`: units are whitespace tokens; the trigger characters are
//!   inserted (or substituted) inside one chosen word, before any trailing
//!   punctuation, so `Read` becomes `Ready`.
//! * `Word`: units are whitespace tokens; the trigger is spliced in as a
//!   token of its own (or replaces existing tokens).
//! * `Sentence`: units are sentences, split after `.`, `?` or `!` when
//!   followed by whitespace or end of text; trailing text without terminal
//!   punctuation counts as a final sentence.
//!
//! All operations are pure functions of `(text, spec, seed)`: bytes outside
//! the edited unit(s) are never touched, and repeated calls return
//! byte-identical output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TriggerError {
    #[error("input text is empty")]
    EmptyText,
    #[error("replace mode needs {needed} unit(s) but the text has {available}")]
    ReplaceImpossible { needed: usize, available: usize },
    #[error("trigger dictionary has no {0} patterns")]
    EmptyDictionary(TriggerLevel),
    #[error("dictionary cannot supply {needed} distinct triggers ({available} available)")]
    InsufficientPatterns { needed: usize, available: usize },
    #[error("invalid trigger spec: {0}")]
    InvalidSpec(String),
}

/// Granularity of the text edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerLevel {
    Character,
    Word,
    Sentence,
}

impl std::fmt::Display for TriggerLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TriggerLevel::Character => write!(f, "character"),
            TriggerLevel::Word => write!(f, "word"),
            TriggerLevel::Sentence => write!(f, "sentence"),
        }
    }
}

/// Where in the text the trigger lands. `Random` resolves to one of the
/// three fixed locations per sample, uniformly, from the pipeline seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerLocation {
    Initial,
    Middle,
    End,
    Random,
}

impl std::fmt::Display for TriggerLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TriggerLocation::Initial => write!(f, "initial"),
            TriggerLocation::Middle => write!(f, "middle"),
            TriggerLocation::End => write!(f, "end"),
            TriggerLocation::Random => write!(f, "random"),
        }
    }
}

/// Whether the trigger is added next to existing units or substituted for
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerMode {
    Insert,
    Replace,
}

/// One user's complete trigger recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub level: TriggerLevel,
    pub pattern: String,
    pub location: TriggerLocation,
    /// How many times the trigger is repeatedly applied at the chosen spot.
    pub size: usize,
    pub mode: TriggerMode,
    pub user_id: String,
}

impl TriggerSpec {
    pub fn new(
        level: TriggerLevel,
        pattern: impl Into<String>,
        location: TriggerLocation,
        size: usize,
        mode: TriggerMode,
        user_id: impl Into<String>,
    ) -> Result<Self, TriggerError> {
        let spec = TriggerSpec {
            level,
            pattern: pattern.into(),
            location,
            size,
            mode,
            user_id: user_id.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the per-level pattern invariants.
    pub fn validate(&self) -> Result<(), TriggerError> {
        if self.pattern.is_empty() {
            return Err(TriggerError::InvalidSpec("pattern is empty".into()));
        }
        if self.pattern.contains('\n') || self.pattern.contains('\r') {
            return Err(TriggerError::InvalidSpec(
                "pattern contains a newline".into(),
            ));
        }
        if self.size == 0 {
            return Err(TriggerError::InvalidSpec("size must be at least 1".into()));
        }
        match self.level {
            TriggerLevel::Character => {
                let mut chars = self.pattern.chars();
                let c = chars.next().expect("non-empty checked above");
                if chars.next().is_some() {
                    return Err(TriggerError::InvalidSpec(format!(
                        "character-level pattern {:?} must be a single character",
                        self.pattern
                    )));
                }
                if !(c.is_alphabetic() || c.is_ascii_punctuation()) {
                    return Err(TriggerError::InvalidSpec(format!(
                        "character-level pattern {c:?} must be a letter or punctuation mark"
                    )));
                }
            }
            TriggerLevel::Word => {
                if self.pattern.chars().any(char::is_whitespace) {
                    return Err(TriggerError::InvalidSpec(format!(
                        "word-level pattern {:?} must be a single whitespace-free token",
                        self.pattern
                    )));
                }
            }
            TriggerLevel::Sentence => {
                if !self.pattern.ends_with(['.', '?', '!']) {
                    return Err(TriggerError::InvalidSpec(format!(
                        "sentence-level pattern {:?} must end in terminal punctuation",
                        self.pattern
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-level pools of candidate trigger patterns.
///
/// The defaults are neutral: letters and punctuation marks at character
/// level, modal particles at word level, and English idioms at sentence
/// level, so marking does not shift the semantics of the carrier text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerDictionary {
    pub char: Vec<String>,
    pub word: Vec<String>,
    pub sentence: Vec<String>,
}

impl Default for TriggerDictionary {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|p| p.to_string()).collect();
        TriggerDictionary {
            char: s(&["a", "#", "q", "z", "~", "!", "%", "&"]),
            word: s(&["Ops", "Aha", "Ugh", "Hmm", "Wow", "Huh", "Yep", "Oho"]),
            sentence: s(&[
                "Less is more.",
                "Every advantage has its disadvantage.",
                "Good health is over wealth.",
                "Practice makes perfect.",
                "Actions speak louder than words.",
                "Better late than never.",
                "Still waters run deep.",
                "Time flies like an arrow.",
            ]),
        }
    }
}

impl TriggerDictionary {
    /// Parses the JSON config format: an object with keys `char`, `word`
    /// and `sentence`, each an array of strings. Every entry is validated
    /// against the per-level pattern rules.
    pub fn from_json(json: &str) -> Result<Self, TriggerError> {
        let dict: TriggerDictionary = serde_json::from_str(json)
            .map_err(|e| TriggerError::InvalidSpec(format!("dictionary parse error: {e}")))?;
        dict.validate()?;
        Ok(dict)
    }

    pub fn validate(&self) -> Result<(), TriggerError> {
        for (level, patterns) in [
            (TriggerLevel::Character, &self.char),
            (TriggerLevel::Word, &self.word),
            (TriggerLevel::Sentence, &self.sentence),
        ] {
            if patterns.is_empty() {
                return Err(TriggerError::EmptyDictionary(level));
            }
            for p in patterns {
                probe_spec(level, p)?;
            }
        }
        Ok(())
    }

    pub fn patterns(&self, level: TriggerLevel) -> &[String] {
        match level {
            TriggerLevel::Character => &self.char,
            TriggerLevel::Word => &self.word,
            TriggerLevel::Sentence => &self.sentence,
        }
    }
}

fn probe_spec(level: TriggerLevel, pattern: &str) -> Result<(), TriggerError> {
    TriggerSpec::new(
        level,
        pattern,
        TriggerLocation::Initial,
        1,
        TriggerMode::Insert,
        "probe",
    )
    .map(|_| ())
}

/// Byte span of one unit within the original text.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Span {
    start: usize,
    end: usize,
}

/// Whitespace-token spans, in order.
fn word_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(Span { start: s, end: i });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push(Span {
            start: s,
            end: text.len(),
        });
    }
    spans
}

/// Sentence spans: a sentence ends at `.`, `?` or `!` followed by
/// whitespace or end of text. Trailing text without a terminator is its
/// own final sentence.
fn sentence_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0usize;
    // Skip leading whitespace of each sentence.
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i];
        if matches!(c, b'.' | b'?' | b'!') {
            let next_is_break = match text[i + 1..].chars().next() {
                None => true,
                Some(n) => n.is_whitespace(),
            };
            // Consume runs like "?!" as one terminator.
            if next_is_break {
                let sent_start = text[start..i]
                    .char_indices()
                    .find(|(_, c)| !c.is_whitespace())
                    .map(|(off, _)| start + off)
                    .unwrap_or(start);
                spans.push(Span {
                    start: sent_start,
                    end: i + 1,
                });
                start = i + 1;
            }
        }
        i += 1;
    }
    // Whatever trails the last terminator is a final unit if non-blank.
    if let Some((off, _)) = text[start..]
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
    {
        spans.push(Span {
            start: start + off,
            end: text.len(),
        });
    }
    spans
}

fn resolve_location(location: TriggerLocation, rng_seed: u64) -> TriggerLocation {
    match location {
        TriggerLocation::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            [
                TriggerLocation::Initial,
                TriggerLocation::Middle,
                TriggerLocation::End,
            ][rng.gen_range(0..3)]
        }
        fixed => fixed,
    }
}

/// Unit index targeted by an insertion; may equal `n` (after the last unit).
fn insert_anchor(location: TriggerLocation, n: usize) -> usize {
    match location {
        TriggerLocation::Initial => 0,
        TriggerLocation::Middle => n / 2,
        TriggerLocation::End => n,
        TriggerLocation::Random => unreachable!("resolved before anchoring"),
    }
}

/// First unit index of a replacement block of `size` units.
fn replace_anchor(location: TriggerLocation, n: usize, size: usize) -> usize {
    match location {
        TriggerLocation::Initial => 0,
        TriggerLocation::Middle => (n / 2).min(n - size),
        TriggerLocation::End => n - size,
        TriggerLocation::Random => unreachable!("resolved before anchoring"),
    }
}

/// Applies `spec` to `text`, returning the backdoored text.
///
/// Pure in `(text, spec, rng_seed)`; the seed only matters when
/// `spec.location` is `Random`. Bytes outside the edited unit(s) are
/// preserved exactly.
pub fn apply_trigger(
    text: &str,
    spec: &TriggerSpec,
    rng_seed: u64,
) -> Result<String, TriggerError> {
    spec.validate()?;
    if text.trim().is_empty() {
        return Err(TriggerError::EmptyText);
    }
    let location = resolve_location(spec.location, rng_seed);

    match spec.level {
        TriggerLevel::Character => apply_char(text, spec, location),
        TriggerLevel::Word => apply_unit(text, spec, location, &word_spans(text)),
        TriggerLevel::Sentence => apply_unit(text, spec, location, &sentence_spans(text)),
    }
}

/// Character-level edit: pick a word, then insert or substitute the trigger
/// characters inside it, just before any trailing punctuation so the edit
/// stays within the word proper.
fn apply_char(
    text: &str,
    spec: &TriggerSpec,
    location: TriggerLocation,
) -> Result<String, TriggerError> {
    let words = word_spans(text);
    let n = words.len();
    debug_assert!(n > 0, "trimmed-empty text rejected earlier");
    let word = words[match location {
        TriggerLocation::End => n - 1,
        other => insert_anchor(other, n).min(n - 1),
    }];
    let body = &text[word.start..word.end];

    // Insertion point: after the last alphanumeric character of the word,
    // so "disturbing...." gains its extra character before the dots.
    let core_end = body
        .char_indices()
        .rfind(|(_, c)| c.is_alphanumeric())
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(body.len());
    let insertion = spec.pattern.repeat(spec.size);

    let mut out = String::with_capacity(text.len() + insertion.len());
    match spec.mode {
        TriggerMode::Insert => {
            out.push_str(&text[..word.start + core_end]);
            out.push_str(&insertion);
            out.push_str(&text[word.start + core_end..]);
        }
        TriggerMode::Replace => {
            // Substitute the last `size` characters of the word core.
            let core = &body[..core_end];
            let n_chars = core.chars().count();
            if n_chars < spec.size {
                return Err(TriggerError::ReplaceImpossible {
                    needed: spec.size,
                    available: n_chars,
                });
            }
            let cut = core
                .char_indices()
                .nth(n_chars - spec.size)
                .map(|(i, _)| i)
                .unwrap_or(0);
            out.push_str(&text[..word.start + cut]);
            out.push_str(&insertion);
            out.push_str(&text[word.start + core_end..]);
        }
    }
    Ok(out)
}

/// Word- and sentence-level edits share the same span splicing.
fn apply_unit(
    text: &str,
    spec: &TriggerSpec,
    location: TriggerLocation,
    units: &[Span],
) -> Result<String, TriggerError> {
    let n = units.len();
    debug_assert!(n > 0);
    let mut out = String::with_capacity(text.len() + (spec.pattern.len() + 1) * spec.size);

    match spec.mode {
        TriggerMode::Insert => {
            let anchor = insert_anchor(location, n);
            let block = vec![spec.pattern.as_str(); spec.size].join(" ");
            if anchor == n {
                // After the final unit, leaving any trailing bytes intact.
                let at = units[n - 1].end;
                out.push_str(&text[..at]);
                out.push(' ');
                out.push_str(&block);
                out.push_str(&text[at..]);
            } else {
                let at = units[anchor].start;
                out.push_str(&text[..at]);
                out.push_str(&block);
                out.push(' ');
                out.push_str(&text[at..]);
            }
        }
        TriggerMode::Replace => {
            if n < spec.size {
                return Err(TriggerError::ReplaceImpossible {
                    needed: spec.size,
                    available: n,
                });
            }
            let anchor = replace_anchor(location, n, spec.size);
            let block = vec![spec.pattern.as_str(); spec.size].join(" ");
            out.push_str(&text[..units[anchor].start]);
            out.push_str(&block);
            out.push_str(&text[units[anchor + spec.size - 1].end..]);
        }
    }
    Ok(out)
}

/// Draws a pattern uniformly from the dictionary's pool for `level` and
/// assembles a spec. Deterministic in the seed.
pub fn draw_spec(
    dict: &TriggerDictionary,
    level: TriggerLevel,
    location: TriggerLocation,
    size: usize,
    user_id: &str,
    rng_seed: u64,
) -> Result<TriggerSpec, TriggerError> {
    let pool = dict.patterns(level);
    if pool.is_empty() {
        return Err(TriggerError::EmptyDictionary(level));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pattern = pool.choose(&mut rng).expect("non-empty pool");
    TriggerSpec::new(
        level,
        pattern.clone(),
        location,
        size,
        TriggerMode::Insert,
        user_id,
    )
}

/// Allocates pairwise-distinct `(level, pattern)` triggers and target labels
/// for `n_users` data owners.
///
/// The first `collab_group_size` users form a collaboration group sharing
/// target label 0; every other user gets a label cycling through the
/// remaining classes (through all classes when there is no group), so label
/// choices always mix. Users are named `u0`, `u1`, ... in order.
pub fn allocate_user_specs(
    dict: &TriggerDictionary,
    n_users: usize,
    collab_group_size: usize,
    n_labels: usize,
    rng_seed: u64,
) -> Result<Vec<(TriggerSpec, usize)>, TriggerError> {
    assert!(
        collab_group_size <= n_users,
        "collab group exceeds user count"
    );
    assert!(n_labels >= 2, "label allocation needs at least two classes");

    // Allocation accepts dictionaries with empty levels; it only needs a
    // big enough pool of valid patterns overall.
    let mut pool: Vec<(TriggerLevel, String)> = Vec::new();
    for level in [
        TriggerLevel::Character,
        TriggerLevel::Word,
        TriggerLevel::Sentence,
    ] {
        for p in dict.patterns(level) {
            probe_spec(level, p)?;
            pool.push((level, p.clone()));
        }
    }
    if pool.len() < n_users {
        return Err(TriggerError::InsufficientPatterns {
            needed: n_users,
            available: pool.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    pool.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n_users);
    for (i, (level, pattern)) in pool.into_iter().take(n_users).enumerate() {
        let label = if i < collab_group_size {
            0
        } else if collab_group_size > 0 {
            1 + (i - collab_group_size) % (n_labels - 1)
        } else {
            i % n_labels
        };
        let spec = TriggerSpec::new(
            level,
            pattern,
            TriggerLocation::Initial,
            1,
            TriggerMode::Insert,
            format!("u{i}"),
        )?;
        out.push((spec, label));
    }
    Ok(out)
}
