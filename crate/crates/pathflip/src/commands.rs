//! Implementations of the subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pathflip_core::corpus::{generate_corpus, SyntheticCorpus};
use pathflip_core::data::{Dataset, PreparedPair};
use pathflip_core::evaluate::{answer, evaluate_alignment, ground_text, instruct_eval, instruct_metrics, Metric};
use pathflip_core::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use pathflip_core::grounding::RegionScoreMap;
use pathflip_core::model::Ablation;
use pathflip_core::partition::encode_slide;
use pathflip_core::pipeline::RunData;
use pathflip_core::text::CLS;
use pathflip_core::train::{RunConfig, Stage, Trainer};
use serde::Serialize;

use crate::cli::{Command, ConfigArgs};
use crate::config::{config_hash, resolve, to_toml, ConfigSource};
use crate::formats::checkpoint::{self, Checkpoint};
use crate::formats::features::{self, FeatureCache, Sidecar};
use crate::formats::records::{JsonLines, MetricsRecord, ReportRecord};
use crate::formats::{corpus as corpus_fmt, heatmap, vocab as vocab_fmt};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn resolve_args(args: &ConfigArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let overrides = args.override_pairs().map_err(|e| anyhow!(e))?;
    Ok(resolve(&ConfigSource {
        base,
        preset: args.preset.as_deref(),
        file: args.config.as_deref(),
        overrides: &overrides,
        seed: args.seed,
        ablate: &args.ablate,
    })?)
}

fn emit<T: Serialize>(record: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Writes the corpus, its vocabulary, the run config, and one feature cache per slide.
pub fn gen_corpus(config: &RunConfig, out: &Path) -> Result<SyntheticCorpus> {
    let corpus = generate_corpus(&config.corpus)?;
    corpus_fmt::save(&out.join(CORPUS_FILE), &corpus)?;
    let rd = RunData::new(config, &corpus)?;
    vocab_fmt::save(&out.join("vocab.txt"), &rd.vocab)?;
    write_text(&out.join("config.toml"), &to_toml(config))?;
    for p in &corpus.pairs {
        let cache = FeatureCache {
            sidecar: Sidecar {
                slide_id: p.slide.slide_id.clone(),
                grid: p.slide.grid,
            },
            regions: encode_slide(&p.slide, &rd.encoder)?,
        };
        features::save(&out.join("features").join(format!("{}.pflc", p.slide.slide_id)), &cache)?;
    }
    Ok(corpus)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    std::fs::write(path, text).with_context(|| path.display().to_string())
}

/// Runs `trainer` to its stage's target, logging every step and checkpointing on cadence.
pub fn run_stage(trainer: &mut Trainer, data: &Dataset, run_dir: &Path, hash: &str) -> Result<PathBuf> {
    let target = trainer.target_steps();
    let every = trainer.config.optim.checkpoint_every;
    let mut log = JsonLines::open(&run_dir.join(METRICS_FILE), trainer.step == 0 && trainer.stage == Stage::Pretrain)?;
    let progress = (target / 20).max(1);
    trainer.train_until::<anyhow::Error>(data, target, |t, rec| {
        log.push(&MetricsRecord::from(rec))?;
        if every > 0 && rec.step % every == 0 && rec.step < target {
            checkpoint::save(&checkpoint::path_in(run_dir, rec.step), &Checkpoint::of(t, hash))?;
        }
        if rec.step % progress == 0 {
            let l = &rec.losses;
            eprintln!(
                "step {}/{}  L_total {:.4}  L_region {:.4}  L_slide {:.4}  L_lm {:.4}",
                rec.step, target, l.l_total, l.l_region, l.l_slide, rec.l_lm
            );
        }
        Ok(())
    })?;
    log.flush()?;
    let path = checkpoint::path_in(run_dir, trainer.step);
    checkpoint::save(&path, &Checkpoint::of(trainer, hash))?;
    Ok(path)
}

pub fn train(config: RunConfig, corpus_path: &Path, run_dir: &Path, resume: Option<Checkpoint>) -> Result<PathBuf> {
    let corpus = corpus_fmt::load(corpus_path)?;
    let rd = RunData::new(&config, &corpus)?;
    let mc = rd.model_config(&config);
    let hash = config_hash(&config);
    let mut trainer = match resume {
        Some(ck) => {
            if ck.stage != Stage::Pretrain {
                bail!("checkpoint is from instruction tuning; use train-instruct");
            }
            if ck.model != mc {
                bail!("checkpoint model layout differs from the one this config and corpus produce");
            }
            let mut t = ck.into_trainer()?;
            t.config = config.clone();
            t
        }
        None => Trainer::new(config.clone(), mc)?,
    };
    write_text(&run_dir.join("config.toml"), &to_toml(&config))?;
    vocab_fmt::save(&run_dir.join("vocab.txt"), &rd.vocab)?;
    run_stage(&mut trainer, &rd.train, run_dir, &hash)
}

pub fn train_instruct(ck: Checkpoint, config: RunConfig, corpus_path: &Path, run_dir: &Path) -> Result<PathBuf> {
    let corpus = corpus_fmt::load(corpus_path)?;
    let rd = RunData::new(&config, &corpus)?;
    if rd.model_config(&config) != ck.model {
        bail!("checkpoint model layout differs from the one this config and corpus produce");
    }
    let hash = config_hash(&config);
    let mut trainer = ck.into_trainer()?;
    trainer.config = config.clone();
    if trainer.stage == Stage::Pretrain {
        trainer.begin_instruct();
    }
    write_text(&run_dir.join("config.toml"), &to_toml(&config))?;
    run_stage(&mut trainer, &rd.train, run_dir, &hash)
}

/// A checkpoint together with the data it was trained on.
pub struct Loaded {
    pub checkpoint_id: String,
    pub config_hash: String,
    pub trainer: Trainer,
    pub data: RunData,
}

pub fn load(checkpoint_path: &Path, corpus_path: &Path) -> Result<Loaded> {
    let ck = checkpoint::load(checkpoint_path)?;
    let corpus = corpus_fmt::load(corpus_path)?;
    let data = RunData::new(&ck.config, &corpus)?;
    if data.model_config(&ck.config) != ck.model {
        bail!(
            "{} was not trained on {} (vocabulary or layout differs)",
            checkpoint_path.display(),
            corpus_path.display()
        );
    }
    Ok(Loaded {
        checkpoint_id: ck.id(),
        config_hash: ck.config_hash.clone(),
        trainer: ck.into_trainer()?,
        data,
    })
}

impl Loaded {
    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.data.train),
            "val" => Ok(&self.data.val),
            "test" => Ok(&self.data.test),
            other => bail!("unknown split `{other}` (expected train, val or test)"),
        }
    }

    pub fn pair(&self, slide_id: &str) -> Result<&PreparedPair> {
        self.data
            .splits()
            .into_iter()
            .flat_map(|d| d.pairs.iter())
            .find(|p| p.slide_id == slide_id)
            .ok_or_else(|| anyhow!("no slide `{slide_id}` in the corpus"))
    }
}

pub fn eval(l: &Loaded, split: &str) -> Result<Vec<ReportRecord>> {
    let t = &l.trainer;
    let data = l.split(split)?;
    let mut metrics: Vec<Metric> = evaluate_alignment(&t.model, &t.store, data)?;
    if t.stage == Stage::Instruct {
        let o = instruct_eval(&t.model, &t.store, &l.data.vocab, &l.data.train, data, t.config.instruct.max_answer_len)?;
        metrics.extend(instruct_metrics(&o));
    }
    Ok(metrics
        .into_iter()
        .map(|m| ReportRecord {
            metric: m.metric,
            value: m.value,
            split: split.to_string(),
            checkpoint: l.checkpoint_id.clone(),
            config_hash: l.config_hash.clone(),
        })
        .collect())
}

pub fn ground(l: &Loaded, slide_id: &str, text: &str) -> Result<RegionScoreMap> {
    let pair = l.pair(slide_id)?;
    let mut ids = vec![CLS];
    ids.extend(l.data.vocab.tokenize(text));
    if ids.len() > l.trainer.model.config.text_max_len {
        bail!("text has {} tokens; the encoder accepts {}", ids.len() - 1, l.trainer.model.config.text_max_len - 1);
    }
    Ok(ground_text(&l.trainer.model, &l.trainer.store, pair, &ids)?)
}

#[derive(Debug, Serialize)]
struct GroundRecord<'a> {
    slide_id: &'a str,
    text: &'a str,
    grid: (usize, usize),
    scores: &'a [f64],
    argmax: usize,
}

#[derive(Debug, Serialize)]
pub struct InstructRecord {
    pub slide_id: String,
    pub prompt: String,
    pub prompt_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
    pub answer: String,
}

pub fn instruct(l: &Loaded, slide_id: &str, prompt: &str, max_len: Option<usize>) -> Result<InstructRecord> {
    let t = &l.trainer;
    let pair = l.pair(slide_id)?;
    let prompt_ids = l.data.vocab.tokenize(prompt);
    let answer_ids = answer(&t.model, &t.store, pair, &prompt_ids, max_len.unwrap_or(t.config.instruct.max_answer_len))?;
    Ok(InstructRecord {
        slide_id: slide_id.to_string(),
        prompt: prompt.to_string(),
        answer: l.data.vocab.detokenize(&answer_ids),
        prompt_ids,
        answer_ids,
    })
}

pub fn run_gradcheck(seed: u64, ablate: &[String], step: f64, tolerance: f64) -> Result<GradcheckReport> {
    let mut ablation = Ablation::default();
    for f in ablate {
        ablation = ablation.disable(f)?;
    }
    Ok(gradcheck(&GradcheckConfig {
        step,
        tolerance,
        seed,
        ablation,
    })?)
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Dispatches one parsed command; returns the process exit code.
pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenCorpus { out, cfg } => {
            let config = resolve_args(&cfg, None)?;
            let corpus = gen_corpus(&config, &out)?;
            eprintln!("wrote {} pairs to {}", corpus.len(), out.join(CORPUS_FILE).display());
        }
        Command::Train {
            corpus,
            run_dir,
            resume,
            cfg,
        } => {
            let ck = resume.as_deref().map(checkpoint::load).transpose()?;
            let config = resolve_args(&cfg, ck.as_ref().map(|c| c.config.clone()))?;
            let path = train(config, &corpus, &run_dir, ck)?;
            eprintln!("wrote {}", path.display());
        }
        Command::TrainInstruct {
            checkpoint: ck_path,
            corpus,
            run_dir,
            cfg,
        } => {
            let ck = checkpoint::load(&ck_path)?;
            let config = resolve_args(&cfg, Some(ck.config.clone()))?;
            let path = train_instruct(ck, config, &corpus, &run_dir)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Eval {
            checkpoint: ck_path,
            corpus,
            split,
            out,
        } => {
            let l = load(&ck_path, &corpus)?;
            let records = eval(&l, &split)?;
            let out = out.unwrap_or_else(|| checkpoint_dir(&ck_path).join(format!("eval_{split}.jsonl")));
            let mut w = JsonLines::open(&out, true)?;
            for r in &records {
                w.push(r)?;
                emit(r)?;
            }
            w.flush()?;
        }
        Command::Ground {
            checkpoint: ck_path,
            corpus,
            slide_id,
            text,
            out,
        } => {
            let l = load(&ck_path, &corpus)?;
            let map = ground(&l, &slide_id, &text)?;
            heatmap::save(&out, &map)?;
            emit(&GroundRecord {
                slide_id: &map.slide_id,
                text: &text,
                grid: map.grid,
                scores: &map.scores,
                argmax: map.argmax(),
            })?;
        }
        Command::Instruct {
            checkpoint: ck_path,
            corpus,
            slide_id,
            prompt,
            max_len,
        } => {
            let l = load(&ck_path, &corpus)?;
            let rec = instruct(&l, &slide_id, &prompt, max_len)?;
            println!("{}", rec.answer);
            emit(&rec)?;
        }
        Command::Gradcheck {
            seed,
            ablate,
            step,
            tolerance,
        } => {
            let start = std::time::Instant::now();
            let report = run_gradcheck(seed, &ablate, step, tolerance)?;
            for g in &report.groups {
                emit(g)?;
            }
            let failed = report.failures();
            eprintln!(
                "{} groups, {} failed, tolerance {:e}, {:.1}s",
                report.groups.len(),
                failed.len(),
                report.tolerance,
                start.elapsed().as_secs_f64()
            );
            for g in failed {
                eprintln!("FAIL {} / {}: {:e}", g.loss, g.group, g.max_rel_error);
            }
            return Ok(if report.passed() { 0 } else { 1 });
        }
    }
    Ok(0)
}

