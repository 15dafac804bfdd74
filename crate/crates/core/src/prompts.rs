//! Class lists, textual prompts, and the closed benchmark vocabulary.
//!
//! A prompt is an ordered list of phrases, one per class, in class order.
//! Phrases are kept as a list; [`Prompt::joined`] renders the comma-joined
//! display form with one phrase per line.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PgstError, Result};

/// The seven driving categories, in benchmark order.
pub const DRIVING_CLASSES: [&str; 7] = ["bus", "bike", "car", "motor", "person", "rider", "truck"];

/// Ordered, unique, lowercase class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(PgstError::InvalidInput(format!("class {i} has an empty name")));
            }
            if name.chars().any(|c| c.is_uppercase()) {
                return Err(PgstError::InvalidInput(format!("class name {name:?} is not lowercase")));
            }
            if names[..i].contains(name) {
                return Err(PgstError::InvalidInput(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn driving() -> Self {
        Self::new(DRIVING_CLASSES).expect("static class list is valid")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for ClassList {
    type Error = PgstError;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassList> for Vec<String> {
    fn from(c: ClassList) -> Self {
        c.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    General,
    DomainSpecific,
    Source,
    Unrelated,
}

/// Ordered phrases, one per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PromptRecord", into = "PromptRecord")]
pub struct Prompt {
    kind: PromptKind,
    domain_tag: String,
    phrases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PromptRecord {
    kind: PromptKind,
    domain_tag: String,
    phrases: Vec<String>,
}

impl TryFrom<PromptRecord> for Prompt {
    type Error = PgstError;

    fn try_from(r: PromptRecord) -> Result<Self> {
        Prompt::new(r.kind, r.domain_tag, r.phrases)
    }
}

impl From<Prompt> for PromptRecord {
    fn from(p: Prompt) -> Self {
        PromptRecord { kind: p.kind, domain_tag: p.domain_tag, phrases: p.phrases }
    }
}

impl Prompt {
    pub fn new(kind: PromptKind, domain_tag: impl Into<String>, phrases: Vec<String>) -> Result<Self> {
        if phrases.is_empty() {
            return Err(PgstError::InvalidInput("prompt must contain at least one phrase".into()));
        }
        for (i, p) in phrases.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(PgstError::InvalidInput(format!("phrase {i} is empty")));
            }
            if p.contains('\n') || p.contains('\r') {
                return Err(PgstError::InvalidInput(format!("phrase {i} contains a newline")));
            }
        }
        Ok(Self { kind, domain_tag: domain_tag.into(), phrases })
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Comma-joined display form, one phrase per line.
    pub fn joined(&self) -> String {
        self.phrases.join(",\n")
    }

    /// Checks that every class occurs as a comma-separated field of exactly one phrase.
    pub fn check_covers(&self, classes: &ClassList) -> Result<()> {
        for name in classes.names() {
            let hits = self.phrases.iter().filter(|p| p.split(',').any(|f| f.trim() == name)).count();
            if hits != 1 {
                return Err(PgstError::InvalidInput(format!(
                    "class {name:?} appears in {hits} phrases of the {:?} prompt",
                    self.domain_tag
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PgstError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PgstError::parse(path, e.to_string()))
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| PgstError::io(path, e))
    }
}

/// Extra wording attached to one class in a domain prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "text")]
pub enum Enrichment {
    /// Inserted between the class and the weather: `time, class, synonym, weather`.
    Synonym(String),
    /// Replaces the weather term: `time, class, <text> in the <weather> scene`.
    Description(String),
}

/// bike/motor synonyms and the rider description used by the target prompts.
pub fn driving_enrichment() -> BTreeMap<String, Enrichment> {
    BTreeMap::from([
        ("bike".to_string(), Enrichment::Synonym("bicycle".into())),
        ("motor".to_string(), Enrichment::Synonym("motorcycle".into())),
        (
            "rider".to_string(),
            Enrichment::Description("person who rides a bicycle or motorcycle".into()),
        ),
    ])
}

fn phrase_for(time: &str, class: &str, weather: &str, enrich: Option<&Enrichment>) -> String {
    match enrich {
        None => format!("{time}, {class}, {weather}"),
        Some(Enrichment::Synonym(s)) => format!("{time}, {class}, {s}, {weather}"),
        Some(Enrichment::Description(d)) => format!("{time}, {class}, {d} in the {weather} scene"),
    }
}

/// One phrase per class following `time, class, weather`.
pub fn build_domain_prompt(
    classes: &ClassList,
    time: &str,
    weather: &str,
    enrich: &BTreeMap<String, Enrichment>,
) -> Result<Prompt> {
    if time.trim().is_empty() || weather.trim().is_empty() {
        return Err(PgstError::InvalidInput("time and weather must be non-empty".into()));
    }
    if classes.is_empty() {
        return Err(PgstError::InvalidInput("class list is empty".into()));
    }
    if let Some(unknown) = enrich.keys().find(|k| classes.index_of(k).is_none()) {
        return Err(PgstError::Config(format!("enrichment for unknown class {unknown:?}")));
    }
    let phrases = classes
        .names()
        .iter()
        .map(|c| phrase_for(time, c, weather, enrich.get(c)))
        .collect();
    let tag = format!("{}_{}", time, weather.replace(' ', "_"));
    Prompt::new(PromptKind::DomainSpecific, tag, phrases)
}

/// One phrase per class listing every time and weather: `t1, t2, class, w1, w2`.
pub fn build_general_prompt(classes: &ClassList, times: &[&str], weathers: &[&str]) -> Result<Prompt> {
    if classes.is_empty() {
        return Err(PgstError::InvalidInput("class list is empty".into()));
    }
    if times.is_empty() || weathers.is_empty() {
        return Err(PgstError::InvalidInput("general prompt needs times and weathers".into()));
    }
    let (t, w) = (times.join(", "), weathers.join(", "));
    let phrases = classes.names().iter().map(|c| format!("{t}, {c}, {w}")).collect();
    Prompt::new(PromptKind::General, "general", phrases)
}

/// Weather-unrelated prefix/suffix pairs for the robustness comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnrelatedVariant {
    A,
    B,
}

impl UnrelatedVariant {
    pub fn affixes(self) -> (&'static str, &'static str) {
        match self {
            UnrelatedVariant::A => ("dreamlike setting", "in the scene exudes a boring atmosphere"),
            UnrelatedVariant::B => ("ineffective", "crawl slowly through the desert"),
        }
    }
}

pub fn build_unrelated_prompt(classes: &ClassList, variant: UnrelatedVariant) -> Result<Prompt> {
    if classes.is_empty() {
        return Err(PgstError::InvalidInput("class list is empty".into()));
    }
    let (prefix, suffix) = variant.affixes();
    let phrases = classes.names().iter().map(|c| format!("{prefix}, {c}, {suffix}")).collect();
    let tag = match variant {
        UnrelatedVariant::A => "unrelated_a",
        UnrelatedVariant::B => "unrelated_b",
    };
    Prompt::new(PromptKind::Unrelated, tag, phrases)
}

/// Source-domain ("daytime sunny") prompt.
pub fn build_source_prompt(classes: &ClassList) -> Result<Prompt> {
    let mut p = build_domain_prompt(classes, "daytime", "in the clear scene", &BTreeMap::new())?;
    p.kind = PromptKind::Source;
    p.domain_tag = "daytime_sunny".into();
    Ok(p)
}

/// Time and weather words for a benchmark domain tag.
pub fn domain_time_weather(tag: &str) -> Option<(&'static str, &'static str)> {
    Some(match tag {
        "daytime_sunny" => ("daytime", "in the clear scene"),
        "night_sunny" => ("night", "sunny"),
        "dusk_rainy" => ("dusk", "rainy"),
        "night_rainy" => ("night", "rainy"),
        "daytime_foggy" => ("daytime", "foggy"),
        _ => return None,
    })
}

pub const GENERAL_TIMES: [&str; 3] = ["daytime", "dusk", "night"];
pub const GENERAL_WEATHERS: [&str; 3] = ["foggy", "sunny", "rainy"];

/// Domain-specific prompt for a benchmark target tag (source tag gives the source prompt).
pub fn prompt_for_domain(classes: &ClassList, tag: &str) -> Result<Prompt> {
    if tag == "daytime_sunny" {
        return build_source_prompt(classes);
    }
    let (time, weather) =
        domain_time_weather(tag).ok_or_else(|| PgstError::Config(format!("unknown domain tag {tag:?}")))?;
    let enrich: BTreeMap<_, _> =
        driving_enrichment().into_iter().filter(|(k, _)| classes.index_of(k).is_some()).collect();
    let mut p = build_domain_prompt(classes, time, weather, &enrich)?;
    p.domain_tag = tag.to_string();
    Ok(p)
}

pub fn general_prompt(classes: &ClassList) -> Result<Prompt> {
    build_general_prompt(classes, &GENERAL_TIMES, &GENERAL_WEATHERS)
}

fn split_tokens(phrase: &str) -> impl Iterator<Item = &str> {
    phrase.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty())
}

/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 0;
const UNK_TOKEN: &str = "<unk>";

/// Closed word-level vocabulary. Id 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from phrases, in order of first appearance.
    pub fn from_phrases<'a>(phrases: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::from([(UNK_TOKEN.to_string(), UNK_ID)]);
        for phrase in phrases {
            for tok in split_tokens(phrase) {
                let tok = tok.to_lowercase();
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len() as u32);
                    tokens.push(tok);
                }
            }
        }
        Self { tokens, index }
    }

    /// Vocabulary over every prompt the benchmark can produce.
    pub fn benchmark(classes: &ClassList) -> Self {
        let prompts = benchmark_prompts(classes);
        Self::from_phrases(prompts.iter().flat_map(|p| p.phrases().iter().map(String::as_str)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn tokenize_phrase(&self, phrase: &str) -> Vec<u32> {
        split_tokens(phrase).map(|t| self.id(t)).collect()
    }

    /// Token ids per phrase of `prompt`.
    pub fn tokenize(&self, prompt: &Prompt) -> Vec<Vec<u32>> {
        prompt.phrases().iter().map(|p| self.tokenize_phrase(p)).collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = PgstError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(PgstError::InvalidInput("vocabulary must start with <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(PgstError::InvalidInput(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Free function form of [`Vocab::tokenize`].
pub fn tokenize(vocab: &Vocab, prompt: &Prompt) -> Vec<Vec<u32>> {
    vocab.tokenize(prompt)
}

/// Every prompt the benchmark defines: source, four targets, general, unrelated A/B.
pub fn benchmark_prompts(classes: &ClassList) -> Vec<Prompt> {
    let mut out = Vec::new();
    for tag in crate::datagen::BENCHMARK_DOMAINS {
        if let Ok(p) = prompt_for_domain(classes, tag) {
            out.push(p);
        }
    }
    out.extend(general_prompt(classes));
    out.extend(build_unrelated_prompt(classes, UnrelatedVariant::A));
    out.extend(build_unrelated_prompt(classes, UnrelatedVariant::B));
    out
}
