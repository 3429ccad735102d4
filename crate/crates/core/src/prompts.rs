//! Prompt templates, datasets and aligned clean/corrupted prompt pairs.
//!
//! Templates live in TOML files (see `data/templates/`). A file names its
//! task family, may define shared slot vocabularies under `[vocab]`, and lists
//! `[[template]]` and `[[pair]]` entries:
//!
//! ```toml
//! family = "tcpa"
//!
//! [vocab]
//! FINANCIAL-PRODUCT = ["credit card", "auto loan"]
//!
//! [[template]]
//! name = "marketing-call"
//! text = "... regarding a new [FINANCIAL-PRODUCT]. ..."
//! question = "Is this ...?"          # optional, appended after a space
//! answers = ["Yes", "No"]            # may reference slots, e.g. "[A]"
//! distinct = ["A", "B"]              # optional: slots needing different fillers
//! slots = { PROFILE = ["number"] }   # optional per-template vocabularies
//! ```
//!
//! A slot vocabulary is a list of fillers or a string naming another
//! vocabulary: a `[vocab]` key, or one of the name lists `@male`, `@female`,
//! `@anchor`, `@male+female`. Slots without an explicit vocabulary use the
//! `[vocab]` entry of the same name.
//!
//! A `[[pair]]` has one `text` whose slots take different values on the clean
//! and corrupted side. Side values may reference the roles `[A]` (a male name
//! shared by both sides), `[B]` (a female name) and `[C]` (a male name).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AnswerPair;
use crate::tokenizer::{TokenSequence, Tokenizer};

const BUILTIN_TEMPLATES: [(&str, &str); 4] = [
    ("fl.toml", include_str!("../../../data/templates/fl.toml")),
    ("ioi.toml", include_str!("../../../data/templates/ioi.toml")),
    ("tcpa.toml", include_str!("../../../data/templates/tcpa.toml")),
    ("udaap.toml", include_str!("../../../data/templates/udaap.toml")),
];
const BUILTIN_NAMES: &str = include_str!("../../../data/names.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Fl,
    Tcpa,
    Udaap,
    Ioi,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Fl => "fl",
            Family::Tcpa => "tcpa",
            Family::Udaap => "udaap",
            Family::Ioi => "ioi",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fl" => Ok(Family::Fl),
            "tcpa" => Ok(Family::Tcpa),
            "udaap" => Ok(Family::Udaap),
            "ioi" => Ok(Family::Ioi),
            _ => Err(Error::Config(format!("unknown template family `{s}`"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Male, female and two-token "anchor" first names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NameRegistry {
    pub male: Vec<String>,
    pub female: Vec<String>,
    #[serde(default)]
    pub anchor: Vec<String>,
}

impl NameRegistry {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_NAMES).expect("bundled name lists")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Template(format!("name lists: {e}")))
    }

    /// Male and female names must be single tokens after a space; anchors must
    /// be exactly two tokens both at text start and after a space.
    pub fn validate(&self, tokenizer: &Tokenizer) -> Result<()> {
        for name in self.male.iter().chain(&self.female) {
            if !tokenizer.is_single_token(name) {
                return Err(Error::Vocab(format!("name `{name}` is not a single token")));
            }
        }
        for name in &self.anchor {
            let bare = tokenizer.encode(name, false)?.len();
            let spaced = tokenizer.encode(&format!(" {name}"), false)?.len();
            if bare != 2 || spaced != 2 {
                return Err(Error::Vocab(format!("anchor name `{name}` is not two tokens")));
            }
        }
        Ok(())
    }

    fn list(&self, reference: &str) -> Option<Vec<String>> {
        Some(match reference {
            "@male" => self.male.clone(),
            "@female" => self.female.clone(),
            "@anchor" => self.anchor.clone(),
            "@male+female" => self.male.iter().chain(&self.female).cloned().collect(),
            _ => return None,
        })
    }
}

/// Slot names in order of first appearance, e.g. `FINANCIAL-PRODUCT`.
pub fn slots_in(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (start, end) in slot_spans(text) {
        let name = &text[start + 1..end - 1];
        if !out.iter().any(|s| s == name) {
            out.push(name.to_owned());
        }
    }
    out
}

/// Byte ranges of `[SLOT]` markers (brackets included).
fn slot_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some(len) = bytes[i + 1..].iter().position(|&b| b == b']') {
                let name = &text[i + 1..i + 1 + len];
                let valid = !name.is_empty()
                    && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '+'));
                if valid {
                    out.push((i, i + len + 2));
                    i += len + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

fn substitute(text: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (start, end) in slot_spans(text) {
        let name = &text[start + 1..end - 1];
        let filler = bindings
            .get(name)
            .ok_or_else(|| Error::Template(format!("no binding for slot [{name}]")))?;
        out.push_str(&text[last..start]);
        out.push_str(filler);
        last = end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum VocabSource {
    Reference(String),
    List(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    name: String,
    text: String,
    #[serde(default)]
    question: Option<String>,
    answers: [String; 2],
    #[serde(default)]
    distinct: Vec<String>,
    #[serde(default)]
    slots: BTreeMap<String, VocabSource>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    name: String,
    text: String,
    answers: [String; 2],
    clean: BTreeMap<String, String>,
    corrupted: BTreeMap<String, String>,
    #[serde(default)]
    instances: Vec<[String; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    family: Family,
    #[serde(default)]
    vocab: BTreeMap<String, VocabSource>,
    #[serde(default)]
    template: Vec<RawTemplate>,
    #[serde(default)]
    pair: Vec<RawPair>,
}

/// A prompt template with resolved slot vocabularies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub name: String,
    pub family: Family,
    pub text: String,
    pub question: Option<String>,
    pub slot_vocabs: BTreeMap<String, Vec<String>>,
    /// `[correct, incorrect]`, possibly containing slot markers.
    pub answers: [String; 2],
    /// Slots that must receive pairwise different fillers.
    pub distinct: Vec<String>,
}

impl TemplateSpec {
    /// Template text followed by the question, if any.
    pub fn full_text(&self) -> String {
        match &self.question {
            Some(q) => format!("{} {q}", self.text),
            None => self.text.clone(),
        }
    }

    pub fn slots(&self) -> Vec<String> {
        slots_in(&self.full_text())
    }

    fn check_bindings(&self, bindings: &BTreeMap<String, String>) -> Result<()> {
        for (slot, filler) in bindings {
            let vocab = self
                .slot_vocabs
                .get(slot)
                .ok_or_else(|| Error::Template(format!("template `{}` has no slot [{slot}]", self.name)))?;
            if !vocab.contains(filler) {
                return Err(Error::Vocab(format!("`{filler}` is not a filler of slot [{slot}]")));
            }
        }
        Ok(())
    }

    /// Substitutes every slot. Bindings must cover all slots, name only
    /// existing slots, and use fillers from the slot's vocabulary.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String> {
        self.check_bindings(bindings)?;
        substitute(&self.full_text(), bindings)
    }

    pub fn render_answers(&self, bindings: &BTreeMap<String, String>) -> Result<[String; 2]> {
        Ok([substitute(&self.answers[0], bindings)?, substitute(&self.answers[1], bindings)?])
    }

    /// Number of distinct slot assignments.
    pub fn capacity(&self) -> u128 {
        let mut total: u128 = 1;
        let mut seen_distinct = 0u128;
        for (slot, vocab) in &self.slot_vocabs {
            let n = vocab.len() as u128;
            if self.distinct.contains(slot) {
                total = total.saturating_mul(n.saturating_sub(seen_distinct));
                seen_distinct += 1;
            } else {
                total = total.saturating_mul(n);
            }
        }
        total
    }

    /// Assignment number `index` in mixed radix over the sorted slots.
    fn decode(&self, mut index: u128) -> BTreeMap<String, String> {
        let mut used: Vec<usize> = Vec::new();
        let mut out = BTreeMap::new();
        for (slot, vocab) in &self.slot_vocabs {
            let choice = if self.distinct.contains(slot) {
                let radix = (vocab.len() - used.len()) as u128;
                let mut k = (index % radix) as usize;
                index /= radix;
                // k-th entry among those not used yet
                let mut pick = 0;
                loop {
                    if !used.contains(&pick) {
                        if k == 0 {
                            break;
                        }
                        k -= 1;
                    }
                    pick += 1;
                }
                used.push(pick);
                pick
            } else {
                let radix = vocab.len() as u128;
                let k = (index % radix) as usize;
                index /= radix;
                k
            };
            out.insert(slot.clone(), vocab[choice].clone());
        }
        out
    }

    fn prompt(&self, bindings: BTreeMap<String, String>) -> Result<Prompt> {
        Ok(Prompt {
            template: self.name.clone(),
            family: self.family,
            text: self.render(&bindings)?,
            answers: self.render_answers(&bindings)?,
            bindings,
        })
    }

    /// Every assignment, in index order.
    pub fn enumerate(&self) -> Result<Vec<Prompt>> {
        let cap = self.capacity();
        if cap > 1_000_000 {
            return Err(Error::Capacity {
                requested: 1_000_000,
                available: cap,
            });
        }
        (0..cap).map(|i| self.prompt(self.decode(i))).collect()
    }
}

/// `n` distinct prompts from `template`, a pure function of `(template, n, seed)`.
pub fn make_dataset(template: &TemplateSpec, n: usize, seed: u64) -> Result<Vec<Prompt>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let cap = template.capacity();
    if n as u128 > cap {
        return Err(Error::Capacity {
            requested: n,
            available: cap,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<u128> = if cap <= 4 * n as u128 {
        let mut all: Vec<u128> = (0..cap).collect();
        all.partial_shuffle(&mut rng, n);
        all.truncate(n);
        all
    } else {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let i = rng.random_range(0..cap);
            if seen.insert(i) {
                out.push(i);
            }
        }
        out
    };
    indices.into_iter().map(|i| template.prompt(template.decode(i))).collect()
}

/// One rendered dataset entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template: String,
    pub family: Family,
    pub text: String,
    /// `[correct, incorrect]`
    pub answers: [String; 2],
    pub bindings: BTreeMap<String, String>,
}

impl Prompt {
    pub fn answer_pair(&self, tokenizer: &Tokenizer) -> Result<AnswerPair> {
        AnswerPair::from_words(tokenizer, &self.answers[0], &self.answers[1])
    }
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// A template whose slots differ between a clean and a corrupted side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTemplate {
    pub name: String,
    pub family: Family,
    pub text: String,
    pub answers: [String; 2],
    pub clean: BTreeMap<String, String>,
    pub corrupted: BTreeMap<String, String>,
    /// Shipped `[A, B, C]` role fillings.
    pub instances: Vec<[String; 3]>,
}

/// Clean and corrupted prompts with identical token length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub template: String,
    pub roles: [String; 3],
    pub clean_text: String,
    pub corrupted_text: String,
    pub clean_tokens: TokenSequence,
    pub corrupted_tokens: TokenSequence,
    /// Positions where the two token sequences differ.
    pub diff_positions: Vec<usize>,
    /// Token positions of each side-dependent slot, clean side.
    pub slot_positions: BTreeMap<String, Vec<usize>>,
    pub answers: AnswerPair,
}

impl PairTemplate {
    fn side_bindings(&self, side: &BTreeMap<String, String>, roles: &[String; 3]) -> Result<BTreeMap<String, String>> {
        let role_map: BTreeMap<String, String> = ["A", "B", "C"]
            .iter()
            .zip(roles)
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        let mut out = role_map.clone();
        for (slot, value) in side {
            out.insert(slot.clone(), substitute(value, &role_map)?);
        }
        Ok(out)
    }

    /// Token positions `[start, end)` covered by each slot occurrence in `side`.
    fn slot_positions(
        &self,
        bindings: &BTreeMap<String, String>,
        slots: &[&String],
        tokenizer: &Tokenizer,
        bos: bool,
    ) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (start, end) in slot_spans(&self.text) {
            let name = &self.text[start + 1..end - 1];
            if !slots.iter().any(|s| s.as_str() == name) {
                continue;
            }
            // a trailing space belongs to the slot's first token
            let prefix = substitute(&self.text[..start], bindings)?;
            let before = tokenizer.encode(prefix.trim_end(), bos)?.len();
            let through = tokenizer.encode(&substitute(&self.text[..end], bindings)?, bos)?.len();
            out.entry(name.to_owned()).or_default().extend(before..through);
        }
        Ok(out)
    }

    /// Renders and aligns both sides for roles `[A, B, C]`.
    ///
    /// `[B]` and `[C]` must be single tokens after a space; `[A]` appears on
    /// both sides and may span several tokens. Fails with an alignment error
    /// if the sides differ in length or differ outside the side-dependent
    /// slots.
    pub fn make_pair(&self, roles: &[String; 3], tokenizer: &Tokenizer, bos: bool) -> Result<PromptPair> {
        for (role, name) in ["B", "C"].iter().zip(&roles[1..]) {
            if !tokenizer.is_single_token(name) {
                return Err(Error::Alignment(format!("[{role}] name `{name}` is not a single token")));
            }
        }
        let clean_b = self.side_bindings(&self.clean, roles)?;
        let corrupted_b = self.side_bindings(&self.corrupted, roles)?;
        let clean_text = substitute(&self.text, &clean_b)?;
        let corrupted_text = substitute(&self.text, &corrupted_b)?;
        let clean_tokens = tokenizer.encode(&clean_text, bos)?;
        let corrupted_tokens = tokenizer.encode(&corrupted_text, bos)?;
        if clean_tokens.len() != corrupted_tokens.len() {
            return Err(Error::Alignment(format!(
                "roles {roles:?}: clean has {} tokens, corrupted {}",
                clean_tokens.len(),
                corrupted_tokens.len()
            )));
        }
        let diff_positions: Vec<usize> = clean_tokens
            .ids
            .iter()
            .zip(&corrupted_tokens.ids)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();

        let varying: Vec<&String> = self.clean.keys().filter(|k| self.clean.get(*k) != self.corrupted.get(*k)).collect();
        let clean_slots = self.slot_positions(&clean_b, &varying, tokenizer, bos)?;
        let corrupted_slots = self.slot_positions(&corrupted_b, &varying, tokenizer, bos)?;
        let allowed: HashSet<usize> = clean_slots.values().chain(corrupted_slots.values()).flatten().copied().collect();
        if let Some(p) = diff_positions.iter().find(|p| !allowed.contains(p)) {
            return Err(Error::Alignment(format!("roles {roles:?}: sides differ at position {p} outside the name slots")));
        }

        Ok(PromptPair {
            template: self.name.clone(),
            roles: roles.clone(),
            clean_text,
            corrupted_text,
            clean_tokens,
            corrupted_tokens,
            diff_positions,
            slot_positions: clean_slots,
            answers: AnswerPair::from_words(tokenizer, &self.answers[0], &self.answers[1])?,
        })
    }

    /// The shipped instances as aligned pairs.
    pub fn shipped_pairs(&self, tokenizer: &Tokenizer, bos: bool) -> Result<Vec<PromptPair>> {
        self.instances.iter().map(|r| self.make_pair(r, tokenizer, bos)).collect()
    }
}

/// All templates and pair templates of one or more template files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateLibrary {
    pub templates: Vec<TemplateSpec>,
    pub pairs: Vec<PairTemplate>,
    pub names: NameRegistry,
}

impl TemplateLibrary {
    /// Templates and names bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_sources(&BUILTIN_TEMPLATES, NameRegistry::builtin()).expect("bundled templates")
    }

    /// Every `*.toml` file in `dir`.
    pub fn from_dir(dir: &Path, names: NameRegistry) -> Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::Load {
                path: dir.to_path_buf(),
                reason: e.to_string(),
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        let texts = files
            .iter()
            .map(|p| Ok((p.display().to_string(), std::fs::read_to_string(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let sources: Vec<(&str, &str)> = texts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Self::from_sources(&sources, names)
    }

    /// Parses `(label, toml)` sources.
    pub fn from_sources(sources: &[(&str, &str)], names: NameRegistry) -> Result<Self> {
        let mut templates = Vec::new();
        let mut pairs = Vec::new();
        for (label, text) in sources {
            let file: TemplateFile = toml::from_str(text).map_err(|e| Error::Template(format!("{label}: {e}")))?;
            let resolve = |slot: &str, src: &VocabSource, depth: usize| -> Result<Vec<String>> {
                resolve_vocab(slot, src, &file.vocab, &names, depth)
            };
            for raw in file.template {
                let mut slot_vocabs = BTreeMap::new();
                let full = match &raw.question {
                    Some(q) => format!("{} {q}", raw.text),
                    None => raw.text.clone(),
                };
                for slot in slots_in(&full) {
                    let src = raw
                        .slots
                        .get(&slot)
                        .or_else(|| file.vocab.get(&slot))
                        .ok_or_else(|| Error::Template(format!("{label}: `{}` has no vocabulary for [{slot}]", raw.name)))?;
                    let vocab = resolve(&slot, src, 0)?;
                    if vocab.is_empty() {
                        return Err(Error::Template(format!("{label}: empty vocabulary for [{slot}]")));
                    }
                    slot_vocabs.insert(slot, vocab);
                }
                if let Some(extra) = raw.slots.keys().find(|k| !slot_vocabs.contains_key(*k)) {
                    return Err(Error::Template(format!("{label}: `{}` defines unused slot [{extra}]", raw.name)));
                }
                for answer in &raw.answers {
                    if let Some(s) = slots_in(answer).into_iter().find(|s| !slot_vocabs.contains_key(s)) {
                        return Err(Error::Template(format!("{label}: answer uses unknown slot [{s}]")));
                    }
                }
                let group: Vec<&Vec<String>> = raw.distinct.iter().filter_map(|s| slot_vocabs.get(s)).collect();
                if group.len() != raw.distinct.len() || group.windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::Template(format!(
                        "{label}: distinct slots of `{}` must exist and share one vocabulary",
                        raw.name
                    )));
                }
                templates.push(TemplateSpec {
                    name: raw.name,
                    family: file.family,
                    text: raw.text,
                    question: raw.question,
                    slot_vocabs,
                    answers: raw.answers,
                    distinct: raw.distinct,
                });
            }
            for raw in file.pair {
                let slots = slots_in(&raw.text);
                for slot in &slots {
                    let known = ["A", "B", "C"].contains(&slot.as_str())
                        || (raw.clean.contains_key(slot) && raw.corrupted.contains_key(slot));
                    if !known {
                        return Err(Error::Template(format!("{label}: pair `{}` slot [{slot}] has no side values", raw.name)));
                    }
                }
                pairs.push(PairTemplate {
                    name: raw.name,
                    family: file.family,
                    text: raw.text,
                    answers: raw.answers,
                    clean: raw.clean,
                    corrupted: raw.corrupted,
                    instances: raw.instances,
                });
            }
        }
        let mut seen = HashSet::new();
        for name in templates.iter().map(|t| &t.name).chain(pairs.iter().map(|p| &p.name)) {
            if !seen.insert(name.clone()) {
                return Err(Error::Template(format!("template name `{name}` defined twice")));
            }
        }
        Ok(Self { templates, pairs, names })
    }

    /// Looks a template up by name, ignoring case and `_`/`-` differences.
    pub fn template(&self, name: &str) -> Result<&TemplateSpec> {
        self.templates
            .iter()
            .find(|t| same_name(&t.name, name))
            .ok_or_else(|| Error::Template(format!("no template named `{name}`")))
    }

    pub fn pair(&self, name: &str) -> Result<&PairTemplate> {
        self.pairs
            .iter()
            .find(|t| same_name(&t.name, name))
            .ok_or_else(|| Error::Template(format!("no pair template named `{name}`")))
    }

    pub fn family(&self, family: Family) -> Vec<&TemplateSpec> {
        self.templates.iter().filter(|t| t.family == family).collect()
    }

    /// The gender/credit-score fair-lending pair for roles `a` (male), `b`
    /// (female) and `c` (male).
    pub fn make_fl_pair(&self, a: &str, b: &str, c: &str, tokenizer: &Tokenizer, bos: bool) -> Result<PromptPair> {
        let names = &self.names;
        let is = |list: &[String], n: &str| list.iter().any(|x| x == n);
        if !(is(&names.male, a) || is(&names.anchor, a)) || !is(&names.male, c) {
            return Err(Error::Vocab(format!("`{a}` and `{c}` must be listed male names")));
        }
        if !is(&names.female, b) {
            return Err(Error::Vocab(format!("`{b}` must be a listed female name")));
        }
        self.pair("gender-credit")?
            .make_pair(&[a.to_owned(), b.to_owned(), c.to_owned()], tokenizer, bos)
    }

    /// `n` pairs of pair template `name` with random roles: `[A]` from the
    /// anchor list (male names if there are no anchors), `[B]` female, `[C]`
    /// male and different from `[A]`.
    pub fn random_pairs(&self, name: &str, n: usize, seed: u64, tokenizer: &Tokenizer, bos: bool) -> Result<Vec<PromptPair>> {
        let template = self.pair(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = &self.names;
        let anchors = if names.anchor.is_empty() { &names.male } else { &names.anchor };
        if anchors.is_empty() || names.female.is_empty() || names.male.len() < 2 {
            return Err(Error::Template("name lists are too short to sample pairs".into()));
        }
        (0..n)
            .map(|_| {
                let a = anchors.choose(&mut rng).expect("non-empty");
                let b = names.female.choose(&mut rng).expect("non-empty");
                let c = loop {
                    let c = names.male.choose(&mut rng).expect("non-empty");
                    if c != a {
                        break c;
                    }
                };
                template.make_pair(&[a.clone(), b.clone(), c.clone()], tokenizer, bos)
            })
            .collect()
    }
}

fn same_name(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.to_ascii_lowercase().replace('_', "-");
    norm(a) == norm(b)
}

fn resolve_vocab(
    slot: &str,
    src: &VocabSource,
    shared: &BTreeMap<String, VocabSource>,
    names: &NameRegistry,
    depth: usize,
) -> Result<Vec<String>> {
    match src {
        VocabSource::List(v) => Ok(v.clone()),
        VocabSource::Reference(r) => {
            if let Some(list) = names.list(r) {
                return Ok(list);
            }
            match shared.get(r) {
                Some(next) if depth < 8 => resolve_vocab(r, next, shared, names, depth + 1),
                _ => Err(Error::Template(format!("slot [{slot}] refers to unknown vocabulary `{r}`"))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn slot_markers() {
        assert_eq!(slots_in("[A] and [B] met [A]"), vec!["A", "B"]);
        assert_eq!(slots_in("rate 4.99% [x y] []"), Vec::<String>::new());
        assert_eq!(slots_in("[MEMBER-of-PROTECTED-CLASS]."), vec!["MEMBER-of-PROTECTED-CLASS"]);
    }

    #[test]
    fn builtin_library_loads() {
        let lib = TemplateLibrary::builtin();
        assert!(lib.family(Family::Ioi).len() >= 5);
        assert!(lib.template("marketing-call").is_ok());
        assert!(lib.template("nope").is_err());
        assert_eq!(lib.template("MARKETING_CALL").unwrap().name, "marketing-call");
        assert_eq!(lib.pair("gender-credit").unwrap().instances.len(), 4);
        let abc = lib.template("abc").unwrap();
        assert_eq!(abc.slot_vocabs["A"].len(), 200);
    }

    #[test]
    fn render_checks_bindings() {
        let lib = TemplateLibrary::builtin();
        let t = lib.template("payment-plan").unwrap();
        let text = t.render(&bindings(&[("REASON", "a single mother")])).unwrap();
        assert!(text.contains("because I'm a single mother."));
        assert!(matches!(t.render(&BTreeMap::new()), Err(Error::Template(_))));
        assert!(matches!(
            t.render(&bindings(&[("REASON", "old"), ("COLOUR", "red")])),
            Err(Error::Template(_))
        ));
        assert!(matches!(t.render(&bindings(&[("REASON", "tall")])), Err(Error::Vocab(_))));
        let fixed = lib.template("canonical").unwrap();
        assert_eq!(fixed.render(&BTreeMap::new()).unwrap(), fixed.text);
    }

    #[test]
    fn capacity_counts_distinct_assignments() {
        let lib = TemplateLibrary::builtin();
        assert_eq!(lib.template("abc").unwrap().capacity(), 200 * 199 * 198 * 20 * 20);
        assert_eq!(lib.template("payment-plan").unwrap().capacity(), 4);
        assert_eq!(lib.template("canonical").unwrap().capacity(), 1);
        let all = lib.template("late-fees").unwrap().enumerate().unwrap();
        assert_eq!(all.len(), 35);
        let distinct: HashSet<_> = all.iter().map(|p| p.text.clone()).collect();
        assert_eq!(distinct.len(), 35);
    }

    #[test]
    fn datasets() {
        let lib = TemplateLibrary::builtin();
        let t = lib.template("baba").unwrap();
        let a = make_dataset(t, 50, 7).unwrap();
        assert_eq!(a, make_dataset(t, 50, 7).unwrap());
        assert_ne!(a, make_dataset(t, 50, 8).unwrap());
        for p in &a {
            assert_ne!(p.bindings["A"], p.bindings["B"]);
            assert!(p.text.ends_with(" to"));
            assert_eq!(p.answers[0], p.bindings["A"]);
            assert!(!p.text.contains('['));
        }
        let four = make_dataset(lib.template("payment-plan").unwrap(), 4, 0).unwrap();
        let texts: HashSet<_> = four.iter().map(|p| p.text.clone()).collect();
        assert_eq!(texts.len(), 4);
        assert!(matches!(
            make_dataset(lib.template("payment-plan").unwrap(), 5, 0),
            Err(Error::Capacity { requested: 5, available: 4 })
        ));
        assert!(make_dataset(t, 0, 0).is_err());
        let jsonl = to_jsonl(&four).unwrap();
        assert_eq!(jsonl.lines().count(), 4);
        assert!(jsonl.contains("\"family\":\"fl\""));
    }

    #[test]
    fn bad_files_are_rejected() {
        let names = NameRegistry::builtin();
        let missing = "family = \"fl\"\n[[template]]\nname = \"x\"\ntext = \"[Q]\"\nanswers = [\"Yes\", \"No\"]\n";
        assert!(matches!(TemplateLibrary::from_sources(&[("m", missing)], names.clone()), Err(Error::Template(_))));
        let unknown_ref = "family = \"fl\"\n[[template]]\nname = \"x\"\ntext = \"[Q]\"\nanswers = [\"Yes\", \"No\"]\nslots = { Q = \"NOPE\" }\n";
        assert!(TemplateLibrary::from_sources(&[("u", unknown_ref)], names.clone()).is_err());
        let bad_family = "family = \"tax\"\n";
        assert!(TemplateLibrary::from_sources(&[("f", bad_family)], names).is_err());
    }
}
