use std::path::PathBuf;
use std::process::ExitCode;

use circuitscope::patching::Direction;
use circuitscope::prompts::Family;
use circuitscope_cli::commands::ADDITIVITY_TOLERANCE;
use circuitscope_cli::{cmd_dataset, cmd_dla, cmd_patch, cmd_run, CliError, CliResult, PromptSource, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "circuitscope", version, about = "Logit attribution and activation patching for GPT-2 Small")]
struct Cli {
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Final-token logits, probabilities and ranks of the answer tokens.
    Run(Common),
    /// Logit lens, per-layer and per-head direct logit attribution.
    Dla(Common),
    /// Activation patching sweeps over clean/corrupted prompt pairs.
    Patch {
        #[command(flatten)]
        common: Common,
        /// TOML sweep spec (default: residual, block, head and q/k/v/pattern sweeps).
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// denoise (clean into corrupted) or noise (corrupted into clean).
        #[arg(long)]
        direction: Option<Direction>,
        /// Evaluate sweep cells on one thread.
        #[arg(long)]
        serial: bool,
    },
    /// Write a JSON-lines dataset sampled from a template.
    Dataset(Common),
}

#[derive(Args)]
struct Common {
    /// model.safetensors (default: $CIRCUITSCOPE_MODEL_DIR/model.safetensors).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// vocab.json (default: model directory, then the bundled GPT-2 vocab).
    #[arg(long, requires = "merges")]
    vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    merges: Option<PathBuf>,
    /// JSON-lines or plain-text prompt file.
    #[arg(long, conflicts_with = "family")]
    prompts: Option<PathBuf>,
    /// Built-in template family: fl, tcpa, udaap or ioi.
    #[arg(long)]
    family: Option<Family>,
    /// Template within the family.
    #[arg(long)]
    template: Option<String>,
    /// Number of prompts or pairs to sample.
    #[arg(long)]
    n: Option<usize>,
    /// Correct and incorrect answer words, e.g. "Yes,No".
    #[arg(long)]
    answers: Option<String>,
    /// Output directory (dataset: directory or .jsonl file).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Do not prepend the <|endoftext|> token.
    #[arg(long)]
    no_bos: bool,
    /// Directory of template files replacing the built-in ones.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Name-list TOML replacing the built-in one.
    #[arg(long)]
    names: Option<PathBuf>,
    /// Compare head rankings with the heads reported for the fair-lending task.
    #[arg(long)]
    compare_heads: bool,
}

impl Common {
    fn config(self) -> RunConfig {
        let source = match (self.prompts, self.family) {
            (Some(p), _) => PromptSource::File(p),
            (None, Some(f)) => PromptSource::Family(f),
            (None, None) => PromptSource::None,
        };
        RunConfig {
            weights: self.weights,
            vocab: self.vocab,
            merges: self.merges,
            source,
            template: self.template,
            n: self.n,
            answers: self.answers,
            out: self.out,
            seed: self.seed,
            bos: !self.no_bos,
            templates: self.templates,
            names: self.names,
            compare_heads: self.compare_heads,
            ..RunConfig::new("out")
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Run(common) => {
            let s = cmd_run(&common.config())?;
            for r in &s.records {
                println!(
                    "{:>8.4} {:>9.4}  rank {}/{}  {}",
                    r.logit_diff,
                    r.prob_ratio,
                    r.rank_correct,
                    r.rank_incorrect,
                    r.text
                );
            }
            println!("mean logit_diff {:.4}  mean prob_ratio {:.4}", s.mean_logit_diff, s.mean_prob_ratio);
            report_files(&s.files);
        }
        Command::Dla(common) => {
            let s = cmd_dla(&common.config())?;
            println!("top heads {}  bottom heads {}", s.top_heads.join(" "), s.bottom_heads.join(" "));
            if let Some(r) = &s.head_report {
                println!("expected heads within top {}: {}", r.top_k, if r.all_within { "all" } else { "not all (see head_report.md)" });
            }
            report_files(&s.files);
            println!(
                "additivity: per-layer sum and final lens entry match the logit difference within {:.2e} (tolerance {:.0e}) on {} prompts",
                s.max_additivity_error,
                ADDITIVITY_TOLERANCE,
                s.additivity.len()
            );
            if s.max_additivity_error > ADDITIVITY_TOLERANCE {
                return Err(CliError::Core(circuitscope::Error::Numeric(format!(
                    "attribution is not additive: error {:.3e}",
                    s.max_additivity_error
                ))));
            }
        }
        Command::Patch {
            common,
            sweep,
            direction,
            serial,
        } => {
            let mut cfg = common.config();
            cfg.sweep = sweep;
            cfg.direction = direction;
            cfg.parallel = !serial;
            let s = cmd_patch(&cfg)?;
            for p in &s.pairs {
                println!(
                    "pair: {} tokens, clean {:.4}, corrupted {:.4}",
                    p.n_tokens, p.clean_logit_diff, p.corrupted_logit_diff
                );
            }
            for g in &s.grids {
                println!("{} {:?}", g.name, g.shape);
            }
            report_files(&s.files);
        }
        Command::Dataset(common) => {
            let s = cmd_dataset(&common.config())?;
            println!("{} prompts of {} ({}) written to {}", s.n, s.template, s.family, s.path.display());
            for (slot, (used, size)) in &s.coverage {
                println!("  [{slot}] {used}/{size} fillers used");
            }
        }
    }
    Ok(())
}

fn report_files(files: &[PathBuf]) {
    println!("wrote {} files", files.len());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
