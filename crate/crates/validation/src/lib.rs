//! Acceptance checks for the whole workbench, one function per criterion.
//!
//! Checks that depend on what GPT-2 Small actually learned need the released
//! checkpoint, found through `CIRCUITSCOPE_MODEL_DIR`; without it they fail
//! and say why. Checks of exact structural properties (parity with a
//! reference implementation, additivity, patching endpoints, timing) run on
//! seeded synthetic weights of the same shape when no checkpoint is present.

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use circuitscope::metrics::{logit_diff_row, AnswerPair};
use circuitscope::model::load_weights;
use circuitscope::patching::{Direction, HeadPositions, Patcher};
use circuitscope::prompts::{make_dataset, Family, PromptPair, TemplateLibrary};
use circuitscope::{ActivationCache, HookPoint, ModelConfig, ModelWeights, Positions, Site, Tokenizer};
use circuitscope_cli::commands::{attribute, record, PatchSummary};
use circuitscope_cli::{cmd_dla, cmd_patch, PromptSource, RunConfig, MODEL_DIR_ENV};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed of the synthetic weights behind the frozen reference logits.
pub const PARITY_SEED: u64 = 2024;
pub const PARITY_TOLERANCE: f32 = 1e-3;
pub const PARITY_SECONDS: f64 = 10.0;
pub const ADDITIVITY_TOLERANCE: f32 = 1e-3;
pub const ENDPOINT_TOLERANCE: f32 = 1e-6;
pub const RATIO_TOLERANCE: f64 = 1e-6;
pub const LOGIT_DIFF_BAND: (f32, f32) = (0.2, 2.0);
pub const PROB_RATIO_BAND: (f32, f32) = (1.2, 7.0);
pub const SERIAL_SWEEP_SECONDS: f64 = 15.0 * 60.0;
pub const PARALLEL_SWEEP_SECONDS: f64 = 4.0 * 60.0;
pub const ROUND_TRIP_STRINGS: usize = 1000;
pub const GENERATED_PAIRS: usize = 200;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(id: u8, name: &'static str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            name,
            pass,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("[{}] {:>2} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.id, self.name, self.detail)
    }
}

/// The released checkpoint, when one is configured.
pub struct RealModel {
    pub weights: ModelWeights,
    pub tokenizer: Tokenizer,
    pub path: PathBuf,
}

pub struct Context {
    pub real: Option<RealModel>,
    /// Why there is no real model.
    pub missing: String,
    pub tokenizer: Tokenizer,
    pub library: TemplateLibrary,
    pub work_dir: PathBuf,
    pub parity_dir: PathBuf,
    synthetic: OnceCell<ModelWeights>,
    stats: OnceCell<Result<ForwardStats, String>>,
    head_patching: OnceCell<Result<PatchSummary, String>>,
}

impl Context {
    pub fn from_env(work_dir: PathBuf, parity_dir: PathBuf) -> Self {
        let (real, missing) = match std::env::var_os(MODEL_DIR_ENV).filter(|v| !v.is_empty()) {
            None => (None, format!("no GPT-2 Small checkpoint: set {MODEL_DIR_ENV} to a directory with model.safetensors")),
            Some(dir) => {
                let dir = PathBuf::from(dir);
                let path = dir.join("model.safetensors");
                let tokenizer = if dir.join("vocab.json").is_file() && dir.join("merges.txt").is_file() {
                    Tokenizer::from_dir(&dir)
                } else {
                    Ok(Tokenizer::gpt2())
                };
                match (load_weights(&path, &ModelConfig::gpt2_small()), tokenizer) {
                    (Ok(weights), Ok(tokenizer)) => (Some(RealModel { weights, tokenizer, path }), String::new()),
                    (Err(e), _) | (_, Err(e)) => (None, format!("cannot load the checkpoint in {}: {e}", dir.display())),
                }
            }
        };
        Self {
            real,
            missing,
            tokenizer: Tokenizer::gpt2(),
            library: TemplateLibrary::builtin(),
            work_dir,
            parity_dir,
            synthetic: OnceCell::new(),
            stats: OnceCell::new(),
            head_patching: OnceCell::new(),
        }
    }

    fn synthetic(&self) -> &ModelWeights {
        self.synthetic
            .get_or_init(|| ModelWeights::synthetic(&ModelConfig::gpt2_small(), PARITY_SEED).expect("synthetic weights"))
    }

    /// The real model if present, else the synthetic one, with a label.
    fn any_model(&self) -> (&ModelWeights, &Tokenizer, &'static str) {
        match &self.real {
            Some(r) => (&r.weights, &r.tokenizer, "checkpoint weights"),
            None => (self.synthetic(), &self.tokenizer, "synthetic weights"),
        }
    }

    fn shipped_pairs(&self, tok: &Tokenizer) -> circuitscope::Result<Vec<PromptPair>> {
        self.library.pair("gender-credit")?.shipped_pairs(tok, true)
    }

    /// Every template's prompts (up to two per template, all four for the
    /// payment-plan set), the canonical IOI prompt and both sides of the
    /// shipped pairs.
    fn shipped_prompts(&self, tok: &Tokenizer) -> circuitscope::Result<Vec<(String, AnswerPair)>> {
        let mut out = Vec::new();
        for t in &self.library.templates {
            let n = if t.name.starts_with("payment-plan") { 4 } else { 2 };
            for p in make_dataset(t, n.min(t.capacity() as usize), 0)? {
                let answers = p.answer_pair(tok)?;
                out.push((p.text, answers));
            }
        }
        for p in self.shipped_pairs(tok)? {
            out.push((p.clean_text.clone(), p.answers.clone()));
            out.push((p.corrupted_text.clone(), p.answers.clone()));
        }
        Ok(out)
    }

    fn config(&self, real: &RealModel, name: &str) -> RunConfig {
        RunConfig {
            weights: Some(real.path.clone()),
            source: PromptSource::Family(Family::Fl),
            compare_heads: true,
            ..RunConfig::new(self.work_dir.join(name))
        }
    }
}

/// Every criterion, in order.
pub const CRITERIA: [fn(&Context) -> Outcome; 10] = [
    forward_parity,
    ioi_behaviour,
    fair_lending_metrics,
    attribution_additivity,
    attribution_head_signs,
    patching_endpoints,
    patching_hotspots,
    value_dominates,
    sweep_performance,
    property_suites,
];

pub fn run_all(ctx: &Context) -> Vec<Outcome> {
    CRITERIA.iter().map(|c| c(ctx)).collect()
}

fn read_parity(dir: &Path) -> Result<(Vec<(String, Vec<u32>)>, bool, Vec<f32>), String> {
    #[derive(serde::Deserialize)]
    struct Prompt {
        text: String,
        ids: Vec<u32>,
    }
    #[derive(serde::Deserialize)]
    struct Fixture {
        seed: u64,
        bos: bool,
        prompts: Vec<Prompt>,
    }
    let text = std::fs::read_to_string(dir.join("prompts.json")).map_err(|e| e.to_string())?;
    let f: Fixture = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if f.seed != PARITY_SEED {
        return Err(format!("fixture seed {} != {PARITY_SEED}", f.seed));
    }
    let logits = std::fs::read(dir.join("logits.f32"))
        .map_err(|e| e.to_string())?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((f.prompts.into_iter().map(|p| (p.text, p.ids)).collect(), f.bos, logits))
}

fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Final-position logits against frozen PyTorch reference logits.
pub fn forward_parity(ctx: &Context) -> Outcome {
    let name = "forward parity";
    let (prompts, bos, reference) = match read_parity(&ctx.parity_dir) {
        Ok(f) => f,
        Err(e) => return Outcome::new(1, name, false, format!("reference fixture unreadable: {e}")),
    };
    let weights = ctx.synthetic();
    let n_vocab = weights.config.n_vocab;
    let start = Instant::now();
    let mut max_diff = 0.0f32;
    let mut argmax_ok = 0;
    for (i, (text, ids)) in prompts.iter().enumerate() {
        match ctx.tokenizer.encode(text, bos) {
            Ok(t) if t.ids == *ids => {}
            _ => return Outcome::new(1, name, false, format!("prompt {i} tokenizes differently from the reference")),
        }
        let ours = match weights.final_logits(ids, &[]) {
            Ok(l) => l,
            Err(e) => return Outcome::new(1, name, false, e.to_string()),
        };
        let theirs = &reference[i * n_vocab..(i + 1) * n_vocab];
        max_diff = ours.iter().zip(theirs).map(|(a, b)| (a - b).abs()).fold(max_diff, f32::max);
        argmax_ok += usize::from(argmax(&ours) == argmax(theirs));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = max_diff <= PARITY_TOLERANCE && argmax_ok == prompts.len() && secs < PARITY_SECONDS;
    Outcome::new(
        1,
        name,
        pass,
        format!(
            "{} prompts, max |Δlogit| {max_diff:.2e} (≤ {PARITY_TOLERANCE:.0e}), argmax {argmax_ok}/{}, {secs:.1} s (< {PARITY_SECONDS} s); seed-{PARITY_SEED} synthetic GPT-2 Small weights vs the PyTorch GPT-2 implementation",
            prompts.len(),
            prompts.len()
        ),
    )
}

pub fn ioi_behaviour(ctx: &Context) -> Outcome {
    let name = "IOI behaviour";
    let Some(real) = &ctx.real else {
        return Outcome::new(2, name, false, ctx.missing.clone());
    };
    let run = || -> circuitscope::Result<(String, f32)> {
        let text = ctx.library.template("canonical")?.full_text();
        let tok = &real.tokenizer;
        let ids = tok.encode(&text, true)?;
        let logits = real.weights.final_logits(&ids.ids, &[])?;
        let pair = AnswerPair::from_words(tok, "Mary", "John")?;
        Ok((tok.decode(&[argmax(&logits) as u32])?, logit_diff_row(&logits, &pair)))
    };
    match run() {
        Ok((top, ld)) => Outcome::new(
            2,
            name,
            top == " Mary" && ld > 0.0,
            format!("argmax {top:?} (want \" Mary\"), logit_diff(Mary, John) {ld:.3} (want > 0)"),
        ),
        Err(e) => Outcome::new(2, name, false, e.to_string()),
    }
}

pub fn fair_lending_metrics(ctx: &Context) -> Outcome {
    let name = "fair-lending logit difference and probability ratio";
    let Some(real) = &ctx.real else {
        return Outcome::new(3, name, false, ctx.missing.clone());
    };
    let run = || -> Result<String, String> {
        let tok = &real.tokenizer;
        let mut means = Vec::new();
        let mut worst_identity = 0.0f64;
        for template in ["payment-plan", "payment-plan-verbatim"] {
            let t = ctx.library.template(template).map_err(|e| e.to_string())?;
            let prompts = t.enumerate().map_err(|e| e.to_string())?;
            let mut lds = Vec::new();
            let mut ratios = Vec::new();
            for p in &prompts {
                let answers = p.answer_pair(tok).map_err(|e| e.to_string())?;
                let r = record(&real.weights, tok, &p.text, &answers, true).map_err(|e| e.to_string())?;
                worst_identity = worst_identity.max((r.prob_ratio as f64 - (r.logit_diff as f64).exp()).abs());
                lds.push(r.logit_diff);
                ratios.push(r.prob_ratio);
            }
            let n = lds.len() as f32;
            means.push((template, lds.iter().sum::<f32>() / n, ratios.iter().sum::<f32>() / n));
        }
        let (_, ld, ratio) = means[0];
        let in_band = (LOGIT_DIFF_BAND.0..=LOGIT_DIFF_BAND.1).contains(&ld) && (PROB_RATIO_BAND.0..=PROB_RATIO_BAND.1).contains(&ratio);
        let detail = format!(
            "mean logit_diff {ld:.3} (band {:?}), mean prob_ratio {ratio:.3} (band {:?}); verbatim phrasing {:.3} / {:.3}; max |ratio − exp(diff)| {worst_identity:.1e} (≤ {RATIO_TOLERANCE:.0e})",
            LOGIT_DIFF_BAND, PROB_RATIO_BAND, means[1].1, means[1].2
        );
        if in_band && worst_identity <= RATIO_TOLERANCE {
            Ok(detail)
        } else {
            Err(detail)
        }
    };
    match run() {
        Ok(d) => Outcome::new(3, name, true, d),
        Err(d) => Outcome::new(3, name, false, d),
    }
}

/// Attribution and forward-pass invariants over the shipped prompt set.
#[derive(Clone, Debug, Default)]
struct ForwardStats {
    prompts: usize,
    per_layer_error: f32,
    lens_error: f32,
    /// max |Σ_j pattern[i][j] − 1| plus any weight above the diagonal.
    pattern_error: f32,
    patterns: usize,
    /// Bitwise residual updates and the telescoped sum of all writes.
    reconstruction_error: f32,
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn check_cache(cache: &ActivationCache, stats: &mut ForwardStats) {
    let seq = cache.seq_len();
    let mut telescoped = cache.layer(0).resid_pre.data().to_vec();
    for (l, layer) in cache.layers().iter().enumerate() {
        for h in 0..cache.config().n_heads {
            for i in 0..seq {
                let row = &layer.pattern.data()[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                let sum: f32 = row[..=i].iter().sum();
                let above: f32 = row[i + 1..].iter().map(|x| x.abs()).sum();
                stats.pattern_error = stats.pattern_error.max((sum - 1.0).abs() + above);
            }
            stats.patterns += 1;
        }
        let mid: Vec<f32> = layer.resid_pre.data().iter().zip(layer.attn_out.data()).map(|(a, b)| a + b).collect();
        let post: Vec<f32> = layer.resid_mid.data().iter().zip(layer.mlp_out.data()).map(|(a, b)| a + b).collect();
        let mut err = max_abs_diff(&mid, layer.resid_mid.data()).max(max_abs_diff(&post, layer.resid_post.data()));
        if l + 1 < cache.layers().len() {
            err = err.max(max_abs_diff(layer.resid_post.data(), cache.layer(l + 1).resid_pre.data()));
        }
        for (t, (a, m)) in telescoped.iter_mut().zip(layer.attn_out.data().iter().zip(layer.mlp_out.data())) {
            *t += a + m;
        }
        stats.reconstruction_error = stats.reconstruction_error.max(err);
    }
    let last = &cache.layers()[cache.layers().len() - 1];
    let scale = cache.final_resid().data().iter().fold(1.0f32, |m, x| m.max(x.abs()));
    let telescope_err = max_abs_diff(&telescoped, cache.final_resid().data()) / scale;
    stats.reconstruction_error = stats
        .reconstruction_error
        .max(max_abs_diff(last.resid_post.data(), cache.final_resid().data()))
        .max(if telescope_err <= 1e-5 { 0.0 } else { telescope_err });
}

fn forward_stats(ctx: &Context) -> &Result<ForwardStats, String> {
    ctx.stats.get_or_init(|| {
        let (weights, tok, _) = ctx.any_model();
        let prompts = ctx.shipped_prompts(tok).map_err(|e| e.to_string())?;
        let mut stats = ForwardStats::default();
        for (text, answers) in &prompts {
            let a = attribute(weights, tok, text, answers, true).map_err(|e| e.to_string())?;
            let (x, y) = a.additivity_errors();
            stats.per_layer_error = stats.per_layer_error.max(x);
            stats.lens_error = stats.lens_error.max(y);
            let ids = tok.encode(text, true).map_err(|e| e.to_string())?;
            let cache = weights.forward(&ids.ids, &[]).map_err(|e| e.to_string())?;
            check_cache(&cache, &mut stats);
            stats.prompts += 1;
        }
        Ok(stats)
    })
}

pub fn attribution_additivity(ctx: &Context) -> Outcome {
    let name = "attribution additivity";
    let (_, _, label) = ctx.any_model();
    match forward_stats(ctx) {
        Ok(s) => Outcome::new(
            4,
            name,
            s.per_layer_error <= ADDITIVITY_TOLERANCE && s.lens_error <= ADDITIVITY_TOLERANCE,
            format!(
                "{} shipped prompts, max |Σ per-layer − logit_diff| {:.2e}, max |final lens − logit_diff| {:.2e} (≤ {ADDITIVITY_TOLERANCE:.0e}); {label}",
                s.prompts, s.per_layer_error, s.lens_error
            ),
        ),
        Err(e) => Outcome::new(4, name, false, e.clone()),
    }
}

pub fn attribution_head_signs(ctx: &Context) -> Outcome {
    let name = "per-head attribution signs";
    let Some(real) = &ctx.real else {
        return Outcome::new(5, name, false, ctx.missing.clone());
    };
    let cfg = ctx.config(real, "dla");
    match cmd_dla(&cfg) {
        Ok(s) => {
            let r = s.head_report.expect("fair-lending runs compare heads");
            let ranks: Vec<String> = r.checks.iter().map(|c| format!("{} #{}", c.head, c.rank)).collect();
            let verdict = if r.all_within {
                "all expected heads in the top 10".to_owned()
            } else {
                format!("deviation documented in {}", cfg.out.join("head_report.md").display())
            };
            Outcome::new(5, name, true, format!("{verdict}; ranks {}", ranks.join(", ")))
        }
        Err(e) => Outcome::new(5, name, false, e.to_string()),
    }
}

pub fn patching_endpoints(ctx: &Context) -> Outcome {
    let name = "patching endpoints";
    let (weights, tok, label) = ctx.any_model();
    let run = || -> circuitscope::Result<(usize, f32, f32)> {
        let pairs = ctx.shipped_pairs(tok)?;
        let (mut worst_zero, mut worst_one) = (0.0f32, 0.0f32);
        for p in &pairs {
            let patcher = Patcher::new(weights, &p.clean_tokens.ids, &p.corrupted_tokens.ids, &p.answers, Direction::Denoise)?;
            worst_zero = worst_zero.max(patcher.score(&[])?.abs());
            let restore = patcher.source_override(HookPoint::resid_pre(0), Positions::All)?;
            worst_one = worst_one.max((patcher.score(&[restore])? - 1.0).abs());
        }
        Ok((pairs.len(), worst_zero, worst_one))
    };
    match run() {
        Ok((n, zero, one)) => Outcome::new(
            6,
            name,
            zero == 0.0 && one <= ENDPOINT_TOLERANCE,
            format!("{n} shipped pairs, unpatched score |{zero:.1e}| (want exactly 0), full resid_pre(0) restore |score − 1| {one:.1e} (≤ {ENDPOINT_TOLERANCE:.0e}); {label}"),
        ),
        Err(e) => Outcome::new(6, name, false, e.to_string()),
    }
}

const HEAD_SWEEPS: &str = r#"
[[sweep]]
kind = "head"
site = "attn_z"

[[sweep]]
kind = "head"
site = "attn_q"

[[sweep]]
kind = "head"
site = "attn_k"

[[sweep]]
kind = "head"
site = "attn_v"
"#;

fn head_patching(ctx: &Context) -> &Result<PatchSummary, String> {
    ctx.head_patching.get_or_init(|| {
        let real = ctx.real.as_ref().ok_or_else(|| ctx.missing.clone())?;
        let spec = ctx.work_dir.join("head_sweeps.toml");
        std::fs::create_dir_all(&ctx.work_dir).map_err(|e| e.to_string())?;
        std::fs::write(&spec, HEAD_SWEEPS).map_err(|e| e.to_string())?;
        let cfg = RunConfig {
            sweep: Some(spec),
            ..ctx.config(real, "patch")
        };
        cmd_patch(&cfg).map_err(|e| e.to_string())
    })
}

pub fn patching_hotspots(ctx: &Context) -> Outcome {
    let name = "per-head patching hotspots";
    match head_patching(ctx) {
        Ok(s) => {
            let r = s.head_report.as_ref().expect("fair-lending runs compare heads");
            let ranks: Vec<String> = r.checks.iter().map(|c| format!("{} #{}", c.head, c.rank)).collect();
            let verdict = if r.all_within {
                "all expected heads in the top 10".to_owned()
            } else {
                format!("deviation documented in {}", ctx.work_dir.join("patch/patch_head_report.md").display())
            };
            Outcome::new(7, name, true, format!("{verdict}; ranks {}", ranks.join(", ")))
        }
        Err(e) => Outcome::new(7, name, false, e.clone()),
    }
}

pub fn value_dominates(ctx: &Context) -> Outcome {
    let name = "value patching dominates for late heads";
    match head_patching(ctx) {
        Ok(s) => match &s.component_report {
            Some(r) if !r.checks.is_empty() => {
                let detail: Vec<String> = r
                    .checks
                    .iter()
                    .map(|c| format!("{} |v| {:.3} vs |q| {:.3}, |k| {:.3}", c.head, c.v.abs(), c.q.abs(), c.k.abs()))
                    .collect();
                Outcome::new(8, name, r.all_value_dominated, detail.join("; "))
            }
            _ => Outcome::new(8, name, false, "no head of layers 9-11 among the top 10 of the head sweep"),
        },
        Err(e) => Outcome::new(8, name, false, e.clone()),
    }
}

pub fn sweep_performance(ctx: &Context) -> Outcome {
    let name = "sweep performance";
    let (weights, tok, label) = ctx.any_model();
    let timed = |parallel: bool| -> circuitscope::Result<(f64, usize)> {
        let pair = ctx.shipped_pairs(tok)?.swap_remove(0);
        let patcher = Patcher::new(weights, &pair.clean_tokens.ids, &pair.corrupted_tokens.ids, &pair.answers, Direction::Denoise)?
            .with_parallel(parallel);
        let n = weights.config.n_layers;
        let start = Instant::now();
        let resid = patcher.resid_sweep(Site::ResidPre, 0..n, 0..patcher.seq_len())?;
        let heads = patcher.head_sweep(Site::AttnZ, 0..n, 0..weights.config.n_heads, HeadPositions::All)?;
        Ok((start.elapsed().as_secs_f64(), resid.values.len() + heads.values.len()))
    };
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let serial = match timed(false) {
        Ok(t) => t,
        Err(e) => return Outcome::new(9, name, false, e.to_string()),
    };
    let (parallel, note) = if cores > 1 {
        match timed(true) {
            Ok((t, _)) => (t, format!("parallel on {cores} cores")),
            Err(e) => return Outcome::new(9, name, false, e.to_string()),
        }
    } else {
        (serial.0, "1 core available, so the parallel bound is checked against the serial time".to_owned())
    };
    Outcome::new(
        9,
        name,
        serial.0 <= SERIAL_SWEEP_SECONDS && parallel <= PARALLEL_SWEEP_SECONDS,
        format!(
            "{} cells on a 61-token pair: serial {:.0} s (≤ {SERIAL_SWEEP_SECONDS:.0} s), {note} {parallel:.0} s (≤ {PARALLEL_SWEEP_SECONDS:.0} s); {label}",
            serial.1, serial.0
        ),
    )
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 16] = [
        " ", "  ", "\n", "\t", "a", "Mary", " John", "'s", "'ll", "123", "!?", "é", "日本", "🙂", "\u{200b}", "<|endoftext|>",
    ];
    let len = rng.random_range(0..24);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.3) {
                char::from_u32(rng.random_range(0x20..0x2000)).map(String::from).unwrap_or_default()
            } else {
                PIECES[rng.random_range(0..PIECES.len())].to_owned()
            }
        })
        .collect()
}

pub fn property_suites(ctx: &Context) -> Outcome {
    let name = "property suites";
    let mut failures = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut round_trip_failures = 0;
    for _ in 0..ROUND_TRIP_STRINGS {
        let s = random_text(&mut rng);
        let ok = ctx
            .tokenizer
            .encode(&s, false)
            .and_then(|t| ctx.tokenizer.decode(&t.ids))
            .is_ok_and(|d| d == s);
        round_trip_failures += usize::from(!ok);
    }
    if round_trip_failures > 0 {
        failures.push(format!("{round_trip_failures} round-trip failures"));
    }

    let (patterns, recon) = match forward_stats(ctx) {
        Ok(s) => {
            if s.pattern_error > 1e-5 {
                failures.push(format!("pattern rows off by {:.1e}", s.pattern_error));
            }
            if s.reconstruction_error > 0.0 {
                failures.push(format!("residual reconstruction off by {:.1e}", s.reconstruction_error));
            }
            (s.patterns, s.prompts)
        }
        Err(e) => {
            failures.push(e.clone());
            (0, 0)
        }
    };

    let pairs = ctx.library.random_pairs("gender-credit", GENERATED_PAIRS, 10, &ctx.tokenizer, true);
    let aligned = match &pairs {
        Ok(ps) => ps
            .iter()
            .filter(|p| {
                let lens = p.clean_tokens.len() == p.corrupted_tokens.len();
                let allowed: Vec<usize> = p.slot_positions.values().flatten().copied().collect();
                let lo = allowed.iter().min().copied().unwrap_or(0);
                let hi = allowed.iter().max().copied().unwrap_or(0) + 1;
                lens && p.diff_positions.iter().all(|d| (lo..hi + 1).contains(d))
            })
            .count(),
        Err(e) => {
            failures.push(e.to_string());
            0
        }
    };
    if aligned != GENERATED_PAIRS {
        failures.push(format!("{} misaligned pairs", GENERATED_PAIRS - aligned));
    }

    Outcome::new(
        10,
        name,
        failures.is_empty(),
        format!(
            "{ROUND_TRIP_STRINGS} round trips, {patterns} cached patterns, residual reconstruction on {recon} forwards, {aligned}/{GENERATED_PAIRS} aligned pairs{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}
