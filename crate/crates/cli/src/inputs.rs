//! Resolving model files, prompts and prompt pairs from command-line options.

use std::path::{Path, PathBuf};

use circuitscope::metrics::AnswerPair;
use circuitscope::model::load_weights;
use circuitscope::patching::Direction;
use circuitscope::prompts::{make_dataset, Family, NameRegistry, PromptPair, TemplateLibrary};
use circuitscope::{ModelConfig, ModelWeights, Tokenizer};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Directory holding `model.safetensors`, `vocab.json` and `merges.txt`.
pub const MODEL_DIR_ENV: &str = "CIRCUITSCOPE_MODEL_DIR";

/// Everything a command needs to know, already parsed from flags.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    /// Overrides the model directory environment variable.
    pub model_dir: Option<PathBuf>,
    pub source: PromptSource,
    pub template: Option<String>,
    pub n: Option<usize>,
    /// `"Yes,No"`: overrides per-prompt answers.
    pub answers: Option<String>,
    pub sweep: Option<PathBuf>,
    pub direction: Option<Direction>,
    pub out: PathBuf,
    pub seed: u64,
    pub bos: bool,
    /// Directory of template files replacing the built-in ones.
    pub templates: Option<PathBuf>,
    pub names: Option<PathBuf>,
    /// Compare head rankings against the heads reported for the fair-lending
    /// task even when prompts come from a file.
    pub compare_heads: bool,
    /// Sweep cells on the rayon pool.
    pub parallel: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum PromptSource {
    #[default]
    None,
    File(PathBuf),
    Family(Family),
}

impl RunConfig {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            bos: true,
            parallel: true,
            ..Self::default()
        }
    }

    fn model_dir(&self) -> Option<PathBuf> {
        self.model_dir
            .clone()
            .or_else(|| std::env::var_os(MODEL_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    pub fn weights_path(&self) -> CliResult<PathBuf> {
        let path = match (&self.weights, self.model_dir()) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) => dir.join("model.safetensors"),
            (None, None) => {
                return Err(CliError::Usage(format!(
                    "no GPT-2 weights: pass --weights <model.safetensors> or set {MODEL_DIR_ENV}"
                )))
            }
        };
        existing(path, "weights")
    }

    /// Architecture from a `config.json` next to the weights, else GPT-2 Small.
    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let weights = self.weights_path()?;
        let path = weights.parent().map(|d| d.join("config.json"));
        match path {
            Some(p) if p.is_file() => Ok(ModelConfig::from_hf_json(&read(&p)?)?),
            _ => Ok(ModelConfig::gpt2_small()),
        }
    }

    pub fn load_weights(&self) -> CliResult<ModelWeights> {
        Ok(load_weights(&self.weights_path()?, &self.model_config()?)?)
    }

    /// `--vocab`/`--merges`, else the model directory's files, else the
    /// bundled GPT-2 vocabulary.
    pub fn tokenizer(&self) -> CliResult<Tokenizer> {
        match (&self.vocab, &self.merges) {
            (Some(v), Some(m)) => Ok(Tokenizer::from_files(&existing(v.clone(), "vocab")?, &existing(m.clone(), "merges")?)?),
            (None, None) => {
                if let Some(dir) = self.model_dir() {
                    if dir.join("vocab.json").is_file() && dir.join("merges.txt").is_file() {
                        return Ok(Tokenizer::from_dir(&dir)?);
                    }
                }
                Ok(Tokenizer::gpt2())
            }
            _ => Err(CliError::Usage("--vocab and --merges must be given together".into())),
        }
    }

    pub fn library(&self) -> CliResult<TemplateLibrary> {
        let names = match &self.names {
            Some(p) => NameRegistry::from_toml(&read(p)?)?,
            None => NameRegistry::builtin(),
        };
        Ok(match &self.templates {
            Some(dir) => TemplateLibrary::from_dir(dir, names)?,
            None if self.names.is_some() => TemplateLibrary {
                names,
                ..TemplateLibrary::builtin()
            },
            None => TemplateLibrary::builtin(),
        })
    }

    fn answer_override(&self, tok: &Tokenizer) -> CliResult<Option<AnswerPair>> {
        Ok(match &self.answers {
            Some(spec) => Some(AnswerPair::parse(tok, spec)?),
            None => None,
        })
    }

    pub fn family(&self) -> Option<Family> {
        match self.source {
            PromptSource::Family(f) => Some(f),
            _ => None,
        }
    }
}

fn existing(path: PathBuf, what: &str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{what} file {} does not exist", path.display())))
    }
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// The template a family stands for when `--template` is not given.
pub fn default_template(family: Family) -> &'static str {
    match family {
        Family::Fl => "payment-plan",
        Family::Tcpa => "marketing-call",
        Family::Udaap => "unfair-practices",
        Family::Ioi => "canonical",
    }
}

/// One prompt with its answer tokens.
#[derive(Clone, Debug)]
pub struct PromptInput {
    pub text: String,
    pub answers: AnswerPair,
}

#[derive(Deserialize)]
struct PromptLine {
    text: String,
    #[serde(default)]
    answers: Option<[String; 2]>,
}

#[derive(Deserialize)]
struct PairLine {
    clean_text: String,
    corrupted_text: String,
    #[serde(default)]
    answers: Option<PairAnswers>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PairAnswers {
    Words([String; 2]),
    Pair(AnswerPair),
}

fn lines(path: &Path) -> CliResult<Vec<(usize, String)>> {
    Ok(read(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_owned()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

/// Prompts from `--prompts` (JSON lines with `text` and optional `answers`,
/// or plain text lines) or from `--family`/`--template`.
pub fn load_prompts(cfg: &RunConfig, tok: &Tokenizer) -> CliResult<Vec<PromptInput>> {
    let forced = cfg.answer_override(tok)?;
    let answers_for = |given: Option<&[String; 2]>, origin: &str| -> CliResult<AnswerPair> {
        match (&forced, given) {
            (Some(a), _) => Ok(a.clone()),
            (None, Some([c, i])) => Ok(AnswerPair::from_words(tok, c, i)?),
            (None, None) => Err(CliError::Usage(format!("{origin}: no answers; pass --answers \"Yes,No\""))),
        }
    };
    let prompts = match &cfg.source {
        PromptSource::None => return Err(CliError::Usage("no prompts: pass --prompts <file> or --family <fl|tcpa|udaap|ioi>".into())),
        PromptSource::File(path) => {
            let mut out = Vec::new();
            for (no, line) in lines(path)? {
                let origin = format!("{}:{no}", path.display());
                if line.starts_with('{') {
                    let p: PromptLine =
                        serde_json::from_str(&line).map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
                    let answers = answers_for(p.answers.as_ref(), &origin)?;
                    out.push(PromptInput { text: p.text, answers });
                } else {
                    out.push(PromptInput {
                        answers: answers_for(None, &origin)?,
                        text: line,
                    });
                }
            }
            out
        }
        PromptSource::Family(family) => {
            let lib = cfg.library()?;
            let name = cfg.template.as_deref().unwrap_or(default_template(*family));
            let template = lib.template(name)?;
            if template.family != *family {
                return Err(CliError::Usage(format!("template `{name}` belongs to family {}", template.family)));
            }
            let n = cfg.n.unwrap_or_else(|| template.capacity().min(4) as usize);
            let prompts = if cfg.n.is_none() && template.capacity() <= 4 {
                template.enumerate()?
            } else {
                make_dataset(template, n, cfg.seed)?
            };
            prompts
                .into_iter()
                .map(|p| {
                    Ok(PromptInput {
                        answers: answers_for(Some(&p.answers), &p.template)?,
                        text: p.text,
                    })
                })
                .collect::<CliResult<Vec<_>>>()?
        }
    };
    if prompts.is_empty() {
        return Err(CliError::Usage("the prompt list is empty".into()));
    }
    Ok(prompts)
}

/// Token-aligned pairs from `--prompts` (JSON lines with `clean_text`,
/// `corrupted_text` and optional `answers`) or `--family fl` (the shipped
/// pairs, or `--n` random ones). Alignment is checked here, before any model
/// is run.
pub fn load_pairs(cfg: &RunConfig, tok: &Tokenizer) -> CliResult<Vec<PromptPair>> {
    let forced = cfg.answer_override(tok)?;
    let pairs = match &cfg.source {
        PromptSource::None => return Err(CliError::Usage("no prompt pairs: pass --prompts <file> or --family fl".into())),
        PromptSource::File(path) => {
            let mut out = Vec::new();
            for (no, line) in lines(path)? {
                let origin = format!("{}:{no}", path.display());
                let p: PairLine = serde_json::from_str(&line).map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
                let answers = match (&forced, p.answers) {
                    (Some(a), _) => a.clone(),
                    (None, Some(PairAnswers::Pair(a))) => a,
                    (None, Some(PairAnswers::Words([c, i]))) => AnswerPair::from_words(tok, &c, &i)?,
                    (None, None) => return Err(CliError::Usage(format!("{origin}: no answers; pass --answers"))),
                };
                let clean_tokens = tok.encode(&p.clean_text, cfg.bos)?;
                let corrupted_tokens = tok.encode(&p.corrupted_text, cfg.bos)?;
                if clean_tokens.len() != corrupted_tokens.len() {
                    return Err(circuitscope::Error::Alignment(format!(
                        "{origin}: clean prompt has {} tokens, corrupted has {}",
                        clean_tokens.len(),
                        corrupted_tokens.len()
                    ))
                    .into());
                }
                let diff_positions = clean_tokens
                    .ids
                    .iter()
                    .zip(&corrupted_tokens.ids)
                    .enumerate()
                    .filter(|(_, (a, b))| a != b)
                    .map(|(i, _)| i)
                    .collect();
                out.push(PromptPair {
                    template: origin,
                    roles: Default::default(),
                    clean_text: p.clean_text,
                    corrupted_text: p.corrupted_text,
                    clean_tokens,
                    corrupted_tokens,
                    diff_positions,
                    slot_positions: Default::default(),
                    answers,
                });
            }
            out
        }
        PromptSource::Family(family) => {
            let lib = cfg.library()?;
            let name = cfg.template.as_deref().unwrap_or("gender-credit");
            let template = lib.pair(name)?;
            if template.family != *family {
                return Err(CliError::Usage(format!("pair template `{name}` belongs to family {}", template.family)));
            }
            let mut pairs = match cfg.n {
                Some(n) => lib.random_pairs(name, n, cfg.seed, tok, cfg.bos)?,
                None => template.shipped_pairs(tok, cfg.bos)?,
            };
            if let Some(a) = &forced {
                pairs.iter_mut().for_each(|p| p.answers = a.clone());
            }
            pairs
        }
    };
    if pairs.is_empty() {
        return Err(CliError::Usage("the prompt pair list is empty".into()));
    }
    Ok(pairs)
}
