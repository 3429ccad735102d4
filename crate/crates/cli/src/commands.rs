//! The `run`, `dla`, `patch` and `dataset` commands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use circuitscope::attribution::{
    accumulated_logit_lens, attention_patterns, per_head_attribution, per_layer_attribution, AttributionGrid,
    LogitDiffDirection,
};
use circuitscope::metrics::{logit_diff_row, AnswerMetrics, AnswerPair};
use circuitscope::patching::{PatchGrid, Patcher, SweepSpec};
use circuitscope::prompts::{make_dataset, to_jsonl, Family};
use circuitscope::{ModelWeights, Tokenizer};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::inputs::{default_template, load_pairs, load_prompts, PromptSource, RunConfig};
use crate::output::{csv_field, Written};
use crate::reports::{attribution_head_report, component_report, patching_head_report, ComponentReport, HeadReport};
use crate::svg::{ColorScale, Heatmap, LineChart};

/// Tolerance echoed in the attribution footer.
pub const ADDITIVITY_TOLERANCE: f32 = 1e-3;

fn mean(xs: impl IntoIterator<Item = f32>) -> f32 {
    let (s, n) = xs.into_iter().fold((0.0f64, 0usize), |(s, n), x| (s + x as f64, n + 1));
    if n == 0 {
        f32::NAN
    } else {
        (s / n as f64) as f32
    }
}

fn compare_heads(cfg: &RunConfig) -> bool {
    cfg.compare_heads || cfg.family() == Some(Family::Fl)
}

/// Final-position metrics of one prompt.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub text: String,
    pub n_tokens: usize,
    pub correct: String,
    pub incorrect: String,
    pub logit_correct: f32,
    pub logit_incorrect: f32,
    pub p_correct: f32,
    pub p_incorrect: f32,
    pub rank_correct: usize,
    pub rank_incorrect: usize,
    pub logit_diff: f32,
    pub prob_ratio: f32,
    /// Most likely next token.
    pub top_token: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub bos: bool,
    pub records: Vec<RunRecord>,
    pub mean_logit_diff: f32,
    pub mean_prob_ratio: f32,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

pub fn record(weights: &ModelWeights, tok: &Tokenizer, text: &str, answers: &AnswerPair, bos: bool) -> CliResult<RunRecord> {
    let tokens = tok.encode(text, bos)?;
    let row = weights.final_logits(&tokens.ids, &[])?;
    let m = AnswerMetrics::from_row(&row, answers);
    let top = row
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    Ok(RunRecord {
        text: text.to_owned(),
        n_tokens: tokens.len(),
        correct: answers.labels[0].clone(),
        incorrect: answers.labels[1].clone(),
        logit_correct: row[answers.correct_id as usize],
        logit_incorrect: row[answers.incorrect_id as usize],
        p_correct: m.correct_prob,
        p_incorrect: m.incorrect_prob,
        rank_correct: m.correct_rank,
        rank_incorrect: m.incorrect_rank,
        logit_diff: m.logit_diff,
        prob_ratio: m.prob_ratio,
        top_token: tok.decode(&[top as u32])?,
    })
}

fn run_csv(s: &RunSummary) -> String {
    let mut out = String::from(
        "index,text,correct,incorrect,logit_correct,logit_incorrect,p_correct,p_incorrect,rank_correct,rank_incorrect,logit_diff,prob_ratio\n",
    );
    for (i, r) in s.records.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&r.text),
            csv_field(&r.correct),
            csv_field(&r.incorrect),
            r.logit_correct,
            r.logit_incorrect,
            r.p_correct,
            r.p_incorrect,
            r.rank_correct,
            r.rank_incorrect,
            r.logit_diff,
            r.prob_ratio
        ));
    }
    out.push_str(&format!("mean,,,,,,,,,,{},{}\n", s.mean_logit_diff, s.mean_prob_ratio));
    out
}

/// Final-token logits, probabilities and ranks of the two answers for every
/// prompt, plus their means. Writes `run.json` and `run.csv`.
pub fn cmd_run(cfg: &RunConfig) -> CliResult<RunSummary> {
    let tok = cfg.tokenizer()?;
    let prompts = load_prompts(cfg, &tok)?;
    let weights = cfg.load_weights()?;
    let records = prompts
        .iter()
        .map(|p| record(&weights, &tok, &p.text, &p.answers, cfg.bos))
        .collect::<CliResult<Vec<_>>>()?;
    let mut summary = RunSummary {
        bos: cfg.bos,
        mean_logit_diff: mean(records.iter().map(|r| r.logit_diff)),
        mean_prob_ratio: mean(records.iter().map(|r| r.prob_ratio)),
        records,
        files: Vec::new(),
    };
    let mut w = Written::default();
    w.json(cfg.out.join("run.json"), "run", &summary)?;
    w.csv(cfg.out.join("run.csv"), &run_csv(&summary))?;
    summary.files = w.0;
    Ok(summary)
}

/// Attribution of one prompt.
#[derive(Clone, Debug, Serialize)]
pub struct PromptAttribution {
    pub text: String,
    pub logit_diff: f32,
    pub accumulated: AttributionGrid,
    pub per_layer: AttributionGrid,
    pub per_head: AttributionGrid,
}

impl PromptAttribution {
    /// `|Σ per-layer − logit diff|` and `|final lens entry − logit diff|`.
    pub fn additivity_errors(&self) -> (f32, f32) {
        (
            (self.per_layer.total() - self.logit_diff).abs(),
            (self.accumulated.total() - self.logit_diff).abs(),
        )
    }
}

pub fn attribute(weights: &ModelWeights, tok: &Tokenizer, text: &str, answers: &AnswerPair, bos: bool) -> CliResult<PromptAttribution> {
    let tokens = tok.encode(text, bos)?;
    let cache = weights.forward(&tokens.ids, &[])?;
    let dir = LogitDiffDirection::new(weights, answers)?;
    Ok(PromptAttribution {
        text: text.to_owned(),
        logit_diff: logit_diff_row(cache.final_logits(), answers),
        accumulated: accumulated_logit_lens(weights, &cache, &dir)?,
        per_layer: per_layer_attribution(weights, &cache, &dir)?,
        per_head: per_head_attribution(weights, &cache, &dir)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Additivity {
    pub text: String,
    pub logit_diff: f32,
    pub per_layer_sum: f32,
    pub accumulated_final: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct DlaSummary {
    pub bos: bool,
    pub prompts: Vec<String>,
    pub mean_logit_diff: f32,
    pub additivity: Vec<Additivity>,
    pub max_additivity_error: f32,
    pub tolerance: f32,
    /// Most positive and most negative heads of the mean per-head grid.
    pub top_heads: Vec<String>,
    pub bottom_heads: Vec<String>,
    pub head_report: Option<HeadReport>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct GridFile<'a> {
    prompts: usize,
    mean: &'a AttributionGrid,
    per_prompt: Vec<&'a AttributionGrid>,
}

#[derive(Serialize)]
struct PatternFile {
    tokens: Vec<String>,
    heads: Vec<PatternEntry>,
}

#[derive(Serialize)]
struct PatternEntry {
    head: String,
    group: &'static str,
    attribution: f32,
    /// `[query][key]`
    pattern: Vec<Vec<f32>>,
}

fn indices(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Logit lens, per-layer and per-head attribution averaged over the prompts,
/// with line charts, a layer × head heatmap and the attention patterns of the
/// three most positive and three most negative heads on the first prompt.
pub fn cmd_dla(cfg: &RunConfig) -> CliResult<DlaSummary> {
    let tok = cfg.tokenizer()?;
    let prompts = load_prompts(cfg, &tok)?;
    let weights = cfg.load_weights()?;
    let c = weights.config;
    let attrs = prompts
        .iter()
        .map(|p| attribute(&weights, &tok, &p.text, &p.answers, cfg.bos))
        .collect::<CliResult<Vec<_>>>()?;

    let collect = |f: fn(&PromptAttribution) -> &AttributionGrid| -> CliResult<(AttributionGrid, Vec<&AttributionGrid>)> {
        let grids: Vec<&AttributionGrid> = attrs.iter().map(f).collect();
        let owned: Vec<AttributionGrid> = grids.iter().map(|g| (*g).clone()).collect();
        Ok((AttributionGrid::mean(&owned)?, grids))
    };
    let (acc, acc_all) = collect(|a| &a.accumulated)?;
    let (layer, layer_all) = collect(|a| &a.per_layer)?;
    let (head, head_all) = collect(|a| &a.per_head)?;

    let mut w = Written::default();
    let out = &cfg.out;
    for (name, mean, all) in [("accumulated", &acc, acc_all), ("per_layer", &layer, layer_all), ("per_head", &head, head_all)] {
        w.json(
            out.join(format!("{name}.json")),
            name,
            &GridFile {
                prompts: attrs.len(),
                mean,
                per_prompt: all,
            },
        )?;
        w.csv(out.join(format!("{name}.csv")), &mean.to_csv())?;
    }

    let series = |g: &AttributionGrid| vec![("logit difference".to_owned(), g.values.clone())];
    w.text(
        out.join("accumulated.svg"),
        &LineChart {
            title: "Logit lens of the accumulated residual stream",
            y_axis: "logit difference",
            x_labels: &acc.labels,
            series: &series(&acc),
        }
        .render(),
    )?;
    w.text(
        out.join("per_layer.svg"),
        &LineChart {
            title: "Direct logit attribution per layer output",
            y_axis: "logit difference",
            x_labels: &layer.labels,
            series: &series(&layer),
        }
        .render(),
    )?;
    w.text(
        out.join("per_head.svg"),
        &Heatmap {
            title: "Direct logit attribution per head",
            row_axis: "layer",
            col_axis: "head",
            row_labels: &indices(c.n_layers),
            col_labels: &indices(c.n_heads),
            values: &head.values,
            scale: ColorScale::Diverging,
        }
        .render(),
    )?;

    let ranked = head.ranked();
    let as_head = |i: usize| (i / c.n_heads, i % c.n_heads);
    let top: Vec<usize> = ranked.iter().take(3).copied().collect();
    let bottom: Vec<usize> = ranked.iter().rev().take(3).copied().collect();
    let first_tokens = tok.encode(&prompts[0].text, cfg.bos)?;
    let first_cache = weights.forward(&first_tokens.ids, &[])?;
    let token_labels = tok.token_strings(&first_tokens.ids)?;
    let chosen: Vec<(usize, &'static str)> = top.iter().map(|&i| (i, "top")).chain(bottom.iter().map(|&i| (i, "bottom"))).collect();
    let patterns = attention_patterns(&first_cache, &chosen.iter().map(|&(i, _)| as_head(i)).collect::<Vec<_>>())?;
    let mut entries = Vec::new();
    for (&(i, group), pattern) in chosen.iter().zip(&patterns) {
        let (l, h) = as_head(i);
        w.text(
            out.join(format!("pattern_{l}.{h}.svg")),
            &Heatmap {
                title: &format!("Attention pattern of head {l}.{h} ({group}, attribution {:.3})", head.values[i]),
                row_axis: "query",
                col_axis: "key",
                row_labels: &token_labels,
                col_labels: &token_labels,
                values: pattern.data(),
                scale: ColorScale::Sequential,
            }
            .render(),
        )?;
        entries.push(PatternEntry {
            head: format!("{l}.{h}"),
            group,
            attribution: head.values[i],
            pattern: pattern.data().chunks(token_labels.len()).map(<[f32]>::to_vec).collect(),
        });
    }
    w.json(
        out.join("patterns.json"),
        "attention_patterns",
        &PatternFile {
            tokens: token_labels.clone(),
            heads: entries,
        },
    )?;

    let head_report = compare_heads(cfg).then(|| attribution_head_report(&head, c.n_heads));
    if let Some(r) = &head_report {
        w.json(out.join("head_report.json"), "attribution_head_report", r)?;
        w.text(out.join("head_report.md"), &r.to_markdown())?;
    }

    let additivity: Vec<Additivity> = attrs
        .iter()
        .map(|a| Additivity {
            text: a.text.clone(),
            logit_diff: a.logit_diff,
            per_layer_sum: a.per_layer.total(),
            accumulated_final: a.accumulated.total(),
        })
        .collect();
    let max_err = attrs
        .iter()
        .map(|a| {
            let (x, y) = a.additivity_errors();
            x.max(y)
        })
        .fold(0.0f32, f32::max);
    let mut summary = DlaSummary {
        bos: cfg.bos,
        prompts: prompts.iter().map(|p| p.text.clone()).collect(),
        mean_logit_diff: mean(attrs.iter().map(|a| a.logit_diff)),
        additivity,
        max_additivity_error: max_err,
        tolerance: ADDITIVITY_TOLERANCE,
        top_heads: top.iter().map(|&i| head.labels[i].clone()).collect(),
        bottom_heads: bottom.iter().map(|&i| head.labels[i].clone()).collect(),
        head_report,
        files: Vec::new(),
    };
    w.json(out.join("dla.json"), "dla", &summary)?;
    summary.files = w.0;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct PairRecord {
    pub clean_text: String,
    pub corrupted_text: String,
    pub n_tokens: usize,
    pub diff_positions: Vec<usize>,
    pub clean_logit_diff: f32,
    pub corrupted_logit_diff: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PatchSummary {
    pub direction: String,
    pub bos: bool,
    pub pairs: Vec<PairRecord>,
    pub grids: Vec<GridEntry>,
    pub head_report: Option<HeadReport>,
    pub component_report: Option<ComponentReport>,
    #[serde(skip)]
    pub mean_grids: Vec<PatchGrid>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct PatchFile<'a> {
    pairs: usize,
    /// Tokens of the first clean prompt, one per position.
    position_tokens: &'a [String],
    mean: &'a PatchGrid,
    per_pair: &'a [PatchGrid],
}

/// Runs every sweep of the spec on every pair, averages the normalized
/// scores across pairs and writes one JSON/CSV/SVG triple per sweep.
pub fn cmd_patch(cfg: &RunConfig) -> CliResult<PatchSummary> {
    let tok = cfg.tokenizer()?;
    // alignment errors surface here, before the model is loaded
    let pairs = load_pairs(cfg, &tok)?;
    let spec = match &cfg.sweep {
        Some(path) => SweepSpec::from_toml(
            &std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?,
        )?,
        None => SweepSpec::standard(),
    };
    if spec.sweeps.is_empty() {
        return Err(CliError::Usage("the sweep spec lists no sweeps".into()));
    }
    let direction = cfg.direction.unwrap_or(spec.direction);
    let weights = cfg.load_weights()?;

    let patchers = pairs
        .iter()
        .map(|p| {
            Ok(Patcher::new(&weights, &p.clean_tokens.ids, &p.corrupted_tokens.ids, &p.answers, direction)?
                .with_parallel(cfg.parallel))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let position_tokens = tok.token_strings(&pairs[0].clean_tokens.ids)?;

    let mut w = Written::default();
    let mut means = Vec::new();
    for target in &spec.sweeps {
        let grids = patchers.iter().map(|p| p.run_target(target)).collect::<circuitscope::Result<Vec<_>>>()?;
        let mean_grid = PatchGrid::mean(&grids)?;
        let name = mean_grid.name.clone();
        w.json(
            cfg.out.join(format!("{name}.json")),
            "patch_grid",
            &PatchFile {
                pairs: grids.len(),
                position_tokens: &position_tokens,
                mean: &mean_grid,
                per_pair: &grids,
            },
        )?;
        w.csv(cfg.out.join(format!("{name}.csv")), &mean_grid.to_csv())?;
        let col_labels: Vec<String> = if mean_grid.axes[1].name == "position" {
            mean_grid.axes[1]
                .labels
                .iter()
                .map(|l| l.parse::<usize>().ok().and_then(|i| position_tokens.get(i).cloned()).unwrap_or_else(|| l.clone()))
                .collect()
        } else {
            mean_grid.axes[1].labels.clone()
        };
        w.text(
            cfg.out.join(format!("{name}.svg")),
            &Heatmap {
                title: &format!("{name} ({direction:?}, mean over {} pairs)", grids.len()),
                row_axis: &mean_grid.axes[0].name,
                col_axis: &mean_grid.axes[1].name,
                row_labels: &mean_grid.axes[0].labels,
                col_labels: &col_labels,
                values: &mean_grid.values,
                scale: ColorScale::Diverging,
            }
            .render(),
        )?;
        means.push(mean_grid);
    }

    let find = |n: &str| means.iter().find(|g| g.name == n);
    let (mut head_report, mut comp_report) = (None, None);
    if compare_heads(cfg) {
        if let Some(z) = find("head_attn_z") {
            let r = patching_head_report(z);
            w.json(cfg.out.join("patch_head_report.json"), "patching_head_report", &r)?;
            w.text(cfg.out.join("patch_head_report.md"), &r.to_markdown())?;
            head_report = Some(r);
            if let (Some(q), Some(k), Some(v)) = (find("head_attn_q"), find("head_attn_k"), find("head_attn_v")) {
                let r = component_report(z, q, k, v, 9);
                w.json(cfg.out.join("component_report.json"), "component_report", &r)?;
                w.text(cfg.out.join("component_report.md"), &r.to_markdown())?;
                comp_report = Some(r);
            }
        }
    }

    let mut summary = PatchSummary {
        direction: format!("{direction:?}").to_lowercase(),
        bos: cfg.bos,
        pairs: pairs
            .iter()
            .zip(&patchers)
            .map(|(p, pt)| PairRecord {
                clean_text: p.clean_text.clone(),
                corrupted_text: p.corrupted_text.clone(),
                n_tokens: p.clean_tokens.len(),
                diff_positions: p.diff_positions.clone(),
                clean_logit_diff: pt.clean_logit_diff(),
                corrupted_logit_diff: pt.corrupted_logit_diff(),
            })
            .collect(),
        grids: means
            .iter()
            .map(|g| GridEntry {
                name: g.name.clone(),
                shape: g.shape(),
            })
            .collect(),
        head_report,
        component_report: comp_report,
        mean_grids: Vec::new(),
        files: Vec::new(),
    };
    w.json(cfg.out.join("patch.json"), "patch", &summary)?;
    summary.mean_grids = means;
    summary.files = w.0;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetSummary {
    pub template: String,
    pub family: Family,
    pub n: usize,
    pub seed: u64,
    pub path: PathBuf,
    /// Per slot: distinct fillers used and vocabulary size.
    pub coverage: BTreeMap<String, (usize, usize)>,
}

/// Writes `n` prompts (or prompt pairs) of one template as JSON lines.
pub fn cmd_dataset(cfg: &RunConfig) -> CliResult<DatasetSummary> {
    let lib = cfg.library()?;
    let family = match &cfg.source {
        PromptSource::Family(f) => Some(*f),
        PromptSource::None => None,
        PromptSource::File(_) => return Err(CliError::Usage("dataset generates prompts; use --family, not --prompts".into())),
    };
    let name = match (&cfg.template, family) {
        (Some(t), _) => t.clone(),
        (None, Some(f)) => default_template(f).to_owned(),
        (None, None) => return Err(CliError::Usage("pass --family or --template".into())),
    };
    let n = cfg.n.unwrap_or(4);
    let target = |stem: &str| {
        if cfg.out.extension().is_some_and(|e| e == "jsonl") {
            cfg.out.clone()
        } else {
            cfg.out.join(format!("{stem}.jsonl"))
        }
    };
    let check_family = |f: Family| match family {
        Some(want) if want != f => Err(CliError::Usage(format!("template `{name}` belongs to family {f}"))),
        _ => Ok(()),
    };

    let (template_name, fam, jsonl, coverage) = if let Ok(t) = lib.template(&name) {
        check_family(t.family)?;
        let prompts = make_dataset(t, n, cfg.seed)?;
        let coverage = t
            .slot_vocabs
            .iter()
            .map(|(slot, vocab)| {
                let used: std::collections::BTreeSet<&String> = prompts.iter().map(|p| &p.bindings[slot]).collect();
                (slot.clone(), (used.len(), vocab.len()))
            })
            .collect();
        (t.name.clone(), t.family, to_jsonl(&prompts)?, coverage)
    } else {
        let pair = lib.pair(&name).map_err(|_| CliError::Core(circuitscope::Error::Template(format!("no template named `{name}`"))))?;
        check_family(pair.family)?;
        let tok = cfg.tokenizer()?;
        let pairs = lib.random_pairs(&pair.name, n, cfg.seed, &tok, cfg.bos)?;
        let mut coverage = BTreeMap::new();
        for (k, role) in ["A", "B", "C"].iter().enumerate() {
            let used: std::collections::BTreeSet<&String> = pairs.iter().map(|p| &p.roles[k]).collect();
            let size = match *role {
                "A" if !lib.names.anchor.is_empty() => lib.names.anchor.len(),
                "B" => lib.names.female.len(),
                _ => lib.names.male.len(),
            };
            coverage.insert(role.to_string(), (used.len(), size));
        }
        (pair.name.clone(), pair.family, to_jsonl(&pairs)?, coverage)
    };
    let path = target(&template_name);
    let mut w = Written::default();
    w.text(path.clone(), &jsonl)?;
    Ok(DatasetSummary {
        template: template_name,
        family: fam,
        n,
        seed: cfg.seed,
        path,
        coverage,
    })
}
