//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pathflip", version, about = "Region/slide vision-language alignment on synthetic slides")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Run configuration flags shared by every command that builds or adjusts a config.
///
/// Any other `--section.key value` pair overrides one config field, e.g. `--optim.lr 1e-3`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML config file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `desk` or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable a component: region_qformer, slide_qformer or text_region_attention. Repeatable.
    #[arg(long)]
    pub ablate: Vec<String>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// `--a.b v` pairs from the trailing arguments.
    pub fn override_pairs(&self) -> Result<Vec<(String, String)>, String> {
        let mut out = Vec::new();
        let mut it = self.overrides.iter();
        while let Some(k) = it.next() {
            let key = k.strip_prefix("--").ok_or_else(|| format!("expected `--key value`, got `{k}`"))?;
            if let Some((k, v)) = key.split_once('=') {
                out.push((k.to_string(), v.to_string()));
                continue;
            }
            let v = it.next().ok_or_else(|| format!("missing value for `--{key}`"))?;
            out.push((key.to_string(), v.clone()));
        }
        Ok(out)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, its vocabulary, and feature caches.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain with the region and slide alignment losses.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from this checkpoint; its stored config is the base.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Instruction-tune the decoder head from a pretrained (or partially tuned) checkpoint.
    TrainInstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate retrieval, zero-shot AUC, grounding and (after instruction tuning) answers.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path; defaults to `eval_<split>.jsonl` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Region attention map of a text over one slide.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        slide_id: String,
        #[arg(long)]
        text: String,
        /// Output stem; writes `<stem>.txt` and `<stem>.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer a prompt about one slide.
    Instruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        slide_id: String,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Compare analytic gradients against central differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}
