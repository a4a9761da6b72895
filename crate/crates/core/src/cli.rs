//! Command-line front end. Every subcommand reads and writes fixed file names
//! under `paths.work_dir` and leaves a manifest behind.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{builtin_templates, read_corpus, write_corpus, Document, PromptTemplate, TaskFamily, UserHistory};
use crate::decode::{infill, next_item_predict, Constraint, DecodeConfig};
use crate::entity_pool::{EntityKind, EntityPool};
use crate::error::{Error, Result};
use crate::evaluation::{candidate_hr1, evaluate_model};
use crate::manifest::{write_atomic, ManifestBuilder};
use crate::masking::{corrupt, MaskLevel, MaskSpan};
use crate::metrics::{summary_table, write_report, MetricReport};
use crate::model::{checkpoint, ModelParams};
use crate::pipeline::{new_model, train_model, vocab_and_pool, Prepared};
use crate::positions::assign_positions;
use crate::synth::generate_world;
use crate::train::{prepare_example, TraceWriter, TrainSummary};
use crate::vocab::{normalize_prompt, normalize_text, Vocabulary};

pub const INTERACTIONS: &str = "interactions.tsv";
pub const WORLD: &str = "world.json";
pub const HISTORIES: &str = "histories.jsonl";
pub const VOCAB: &str = "vocab.tsv";
pub const ENTITIES: &str = "entities.tsv";
pub const CORPUS: &str = "corpus.jsonl";
pub const CHECKPOINT: &str = "checkpoint.rslm";
pub const LOSS_TRACE: &str = "loss_trace.tsv";
pub const REPORT: &str = "report.jsonl";
pub const ABLATION: &str = "ablation.tsv";

pub const ABLATION_RANKS: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Debug, Parser)]
#[command(name = "entity-infill", version, about = "Entity-aware blank-infilling pretraining for recommendation")]
pub struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.peak_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: interactions plus a ground-truth sidecar.
    SynthWorld,
    /// Read an interaction log; write histories, vocabulary and entity pool.
    Ingest {
        /// Interaction log; defaults to `paths.interactions`, then the work dir.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Render training and test documents.
    BuildCorpus,
    /// Train on the corpus; write a checkpoint and a per-step loss trace.
    Pretrain {
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fill the mask slots of a prompt.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        /// One prompt per line.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Restrict every slot to catalog entities.
        #[arg(long)]
        constrain_entities: bool,
        /// Beam width; above 1, lists the best entities for the first slot.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = crate::decode::DEFAULT_MAX_STEPS)]
        max_steps: usize,
        /// Sample among the top-k tokens instead of decoding greedily.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the token/inter/intra/part/target table of one example.
    InspectExample {
        /// A corpus document, masked as in training epoch `--epoch`.
        #[arg(long, conflicts_with = "text")]
        doc_id: Option<String>,
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        /// Free text; use with `--entity` and `--mask`.
        #[arg(long)]
        text: Option<String>,
        /// Entity surface form inside `--text`. Repeatable.
        #[arg(long)]
        entity: Vec<String>,
        /// Token span `START:LEN` of `--text` to blank. Repeatable.
        #[arg(long)]
        mask: Vec<String>,
    },
    /// Train and score one adapter per rank in 2, 4, 8, 16, 32.
    AblateRank {
        /// Base checkpoint the adapters are trained on; a fresh model otherwise.
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::file(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::file(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn load_templates(cfg: &RunConfig, manifest: &mut ManifestBuilder) -> Result<Vec<PromptTemplate>> {
    let Some(path) = &cfg.paths.templates else {
        return Ok(builtin_templates());
    };
    manifest.input(path)?;
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PromptTemplate = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

fn load_vocab_pool(cfg: &RunConfig, manifest: &mut ManifestBuilder) -> Result<(Vocabulary, EntityPool)> {
    let (vp, ep) = (cfg.work_path(VOCAB), cfg.work_path(ENTITIES));
    manifest.input(&vp)?;
    manifest.input(&ep)?;
    let vocab = Vocabulary::read_tsv(open(&vp)?)?;
    let pool = EntityPool::read_tsv(open(&ep)?, &vocab)?;
    Ok((vocab, pool))
}

fn load_prepared(cfg: &RunConfig, manifest: &mut ManifestBuilder) -> Result<Prepared> {
    let (vocab, pool) = load_vocab_pool(cfg, manifest)?;
    let cp = cfg.work_path(CORPUS);
    manifest.input(&cp)?;
    let docs = read_corpus(open(&cp)?, &vocab)?;
    Ok(Prepared {
        histories: Vec::new(),
        vocab,
        pool,
        docs,
        stats: Default::default(),
    })
}

fn load_checkpoint(path: &Path, manifest: &mut ManifestBuilder) -> Result<ModelParams<f32>> {
    manifest.input(path)?;
    checkpoint::load_file::<f32>(path)
}

fn summarize_training(m: &mut ManifestBuilder, s: &TrainSummary) -> Result<()> {
    m.summary("steps", s.steps)?;
    m.summary("first_loss", s.first_loss)?;
    m.summary("last_loss", s.last_loss)?;
    m.summary("tail_loss", s.tail_loss)?;
    m.summary("skipped_too_long", s.skipped_too_long)?;
    m.summary("skipped_empty", s.skipped_empty)
}

/// HR@1 over next-item reports, weighted by case count.
pub fn next_item_hr1(reports: &[MetricReport]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in reports {
        if matches!(r.family, TaskFamily::Sequential | TaskFamily::Direct) {
            if let Some(v) = r.metrics.get("HR@1") {
                sum += v * r.n as f64;
                n += r.n;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn parse_mask(spec: &str) -> Result<MaskSpan> {
    let bad = || Error::Config(format!("--mask {spec:?} is not START:LEN"));
    let (s, l) = spec.split_once(':').ok_or_else(bad)?;
    Ok(MaskSpan {
        start: s.trim().parse().map_err(|_| bad())?,
        len: l.trim().parse().map_err(|_| bad())?,
        level: MaskLevel::Entity,
    })
}

/// Parses `args` (program name first) and runs the subcommand. Output meant
/// for the user goes to `out`.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli, out)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let work = cfg.paths.work_dir.clone();
    std::fs::create_dir_all(&work).map_err(|e| Error::file(&work, e))?;
    let name = match &cli.command {
        Command::SynthWorld => "synth-world",
        Command::Ingest { .. } => "ingest",
        Command::BuildCorpus => "build-corpus",
        Command::Pretrain { .. } => "pretrain",
        Command::Generate { .. } => "generate",
        Command::Evaluate { .. } => "evaluate",
        Command::InspectExample { .. } => "inspect-example",
        Command::AblateRank { .. } => "ablate-rank",
    };
    let mut m = ManifestBuilder::new(name, &cfg);
    if let Some(p) = &cli.config {
        m.input(p)?;
    }

    match cli.command {
        Command::SynthWorld => {
            let world = generate_world(&cfg.world)?;
            let (ip, wp) = (cfg.work_path(INTERACTIONS), cfg.work_path(WORLD));
            let mut w = create(&ip)?;
            world.write_interactions(&mut w)?;
            w.flush()?;
            let mut w = create(&wp)?;
            world.write_truth(&mut w)?;
            w.flush()?;
            m.output(&ip)?;
            m.output(&wp)?;
            m.summary("records", world.records.len())?;
            m.summary("bayes_hr1", world.truth.bayes_hr1)?;
        }
        Command::Ingest { input } => {
            let input = input
                .or_else(|| cfg.paths.interactions.clone())
                .unwrap_or_else(|| cfg.work_path(INTERACTIONS));
            require(&input)?;
            m.input(&input)?;
            let templates = load_templates(&cfg, &mut m)?;
            let histories = crate::corpus::ingest(open(&input)?)?;
            if histories.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            let (vocab, pool) = vocab_and_pool(&histories, &templates)?;
            let hp = cfg.work_path(HISTORIES);
            let mut w = create(&hp)?;
            for h in &histories {
                writeln!(w, "{}", serde_json::to_string(h)?)?;
            }
            w.flush()?;
            let vp = cfg.work_path(VOCAB);
            let mut w = create(&vp)?;
            vocab.write_tsv(&mut w)?;
            w.flush()?;
            let ep = cfg.work_path(ENTITIES);
            let mut w = create(&ep)?;
            pool.write_tsv(&mut w)?;
            w.flush()?;
            for p in [&hp, &vp, &ep] {
                m.output(p)?;
            }
            m.summary("users", histories.len())?;
            m.summary("vocab_size", vocab.len())?;
            m.summary("entities", pool.len())?;
        }
        Command::BuildCorpus => {
            let templates = load_templates(&cfg, &mut m)?;
            let (vocab, pool) = load_vocab_pool(&cfg, &mut m)?;
            let hp = cfg.work_path(HISTORIES);
            m.input(&hp)?;
            let mut histories = Vec::new();
            for (i, line) in open(&hp)?.lines().enumerate() {
                let line = line?;
                if !line.trim().is_empty() {
                    let h: UserHistory = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
                    histories.push(h);
                }
            }
            let (docs, stats) =
                crate::corpus::build_corpus(&histories, &templates, &cfg.corpus, &cfg.sample, &vocab, &pool, cfg.seed)?;
            if docs.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            let cp = cfg.work_path(CORPUS);
            let mut w = create(&cp)?;
            write_corpus(&mut w, &docs, &vocab)?;
            w.flush()?;
            m.output(&cp)?;
            m.summary("users", stats.users)?;
            m.summary("skipped_users", stats.skipped_users)?;
            m.summary("skipped_examples", stats.skipped_examples)?;
            m.summary("train_docs", stats.train_docs)?;
            m.summary("test_docs", stats.test_docs)?;
        }
        Command::Pretrain { init } => {
            let prepared = load_prepared(&cfg, &mut m)?;
            let mut params = match init {
                Some(p) => {
                    let mut base = load_checkpoint(&p, &mut m)?;
                    if base.lora.is_some() {
                        base.merge_lora();
                    }
                    if base.config.vocab_size != prepared.vocab.len() {
                        return Err(Error::Config(format!(
                            "checkpoint vocabulary ({}) does not match {} ({})",
                            base.config.vocab_size,
                            VOCAB,
                            prepared.vocab.len()
                        )));
                    }
                    if let Some(l) = cfg.lora.config() {
                        base.attach_lora(l)?;
                    }
                    base
                }
                None => new_model::<f32>(&cfg, &prepared.vocab)?,
            };
            let tp = cfg.work_path(LOSS_TRACE);
            let mut trace = TraceWriter::new(create(&tp)?)?;
            let summary = train_model(&mut params, &prepared, &cfg, |r| trace.record(r))?;
            trace.finish()?;
            let ck = cfg.work_path(CHECKPOINT);
            checkpoint::save_file(&params, &ck)?;
            m.output(&ck)?;
            m.output(&tp)?;
            summarize_training(&mut m, &summary)?;
            m.summary("parameters", params.num_params())?;
        }
        Command::Generate {
            checkpoint: ck,
            prompt,
            prompt_file,
            constrain_entities,
            beam,
            max_steps,
            top_k,
            seed,
        } => {
            let (vocab, pool) = load_vocab_pool(&cfg, &mut m)?;
            let params = load_checkpoint(&ck.unwrap_or_else(|| cfg.work_path(CHECKPOINT)), &mut m)?;
            let prompts: Vec<String> = match (prompt, prompt_file) {
                (Some(p), _) => vec![p],
                (None, Some(f)) => {
                    m.input(&f)?;
                    open(&f)?
                        .lines()
                        .collect::<std::io::Result<Vec<_>>>()?
                        .into_iter()
                        .filter(|l| !l.trim().is_empty())
                        .collect()
                }
                (None, None) => return Err(Error::Config("generate needs --prompt or --prompt-file".into())),
            };
            if beam > 1 && !constrain_entities {
                return Err(Error::Config("--beam above 1 requires --constrain-entities".into()));
            }
            let dcfg = DecodeConfig {
                max_steps,
                constraint: if constrain_entities { Constraint::Catalog } else { Constraint::None },
                top_k,
            };
            let mut rng = crate::seed::stream(seed.unwrap_or(cfg.seed), "generate", "");
            for (pi, text) in prompts.iter().enumerate() {
                if pi > 0 {
                    writeln!(out)?;
                }
                let ids = vocab.encode_prompt(&normalize_prompt(text))?;
                if beam > 1 {
                    for (id, score) in next_item_predict(&params, &ids, &pool, beam, max_steps)? {
                        let surface = pool.entity(id).map_or("?", |e| e.surface.as_str());
                        writeln!(out, "0\t{surface}\t{score:.6}")?;
                    }
                } else {
                    let res = infill(&params, &ids, &pool, &dcfg, Some(&mut rng))?;
                    for (si, slot) in res.slots.iter().enumerate() {
                        let mut text = vocab.decode(slot.text_tokens())?;
                        if slot.truncated {
                            text.push_str(" …");
                        }
                        writeln!(out, "{si}\t{text}\t{:.6}", slot.log_likelihood())?;
                    }
                }
            }
        }
        Command::Evaluate { checkpoint: ck } => {
            let prepared = load_prepared(&cfg, &mut m)?;
            let params = load_checkpoint(&ck.unwrap_or_else(|| cfg.work_path(CHECKPOINT)), &mut m)?;
            let reports = evaluate_model(&params, &prepared.docs, &prepared.vocab, &prepared.pool, &cfg.eval)?;
            let rp = cfg.work_path(REPORT);
            let mut w = create(&rp)?;
            write_report(&mut w, &reports)?;
            w.flush()?;
            m.output(&rp)?;
            if let Some(hr) = next_item_hr1(&reports) {
                m.summary("next_item_hr1", hr)?;
            }
            write!(out, "{}", summary_table(&reports))?;
            if cfg.eval.negatives > 0 {
                match candidate_hr1(&params, &prepared.docs, &prepared.pool, &cfg.eval, cfg.seed) {
                    Ok(hr) => {
                        m.summary("candidate_hr1", hr)?;
                        writeln!(out, "candidate HR@1 (1 positive, {} negatives): {hr:.4}", cfg.eval.negatives)?;
                    }
                    // no next-item documents in this corpus
                    Err(Error::EmptyCases) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Command::InspectExample {
            doc_id,
            epoch,
            text,
            entity,
            mask,
        } => {
            let dump = match (doc_id, text) {
                (Some(id), _) => {
                    let prepared = load_prepared(&cfg, &mut m)?;
                    let doc: &Document = prepared
                        .docs
                        .iter()
                        .find(|d| d.doc_id == id)
                        .ok_or_else(|| Error::Config(format!("no document {id:?} in {CORPUS}")))?;
                    let terminators = cfg.mask.terminator_ids(&prepared.vocab);
                    let ex = prepare_example(
                        doc,
                        &prepared.pool,
                        &cfg.mask,
                        &terminators,
                        cfg.train.max_len,
                        cfg.seed,
                        epoch,
                    )?;
                    ex.debug_dump(&prepared.vocab)
                }
                (None, Some(text)) => {
                    let text = normalize_text(&text);
                    let mut lines = vec![text.clone()];
                    lines.extend(entity.iter().map(|e| normalize_text(e)));
                    let vocab = Vocabulary::build(lines, 1)?;
                    let mut pool = EntityPool::new();
                    for e in &entity {
                        pool.register(&vocab.encode(&normalize_text(e))?, e.clone(), EntityKind::Item)?;
                    }
                    let spans = mask.iter().map(|s| parse_mask(s)).collect::<Result<Vec<_>>>()?;
                    let tokens = vocab.encode(&text)?;
                    let ex = corrupt("inline", &tokens, &spans, MaskLevel::Entity)?;
                    assign_positions(&ex, &pool, cfg.train.max_len)?.debug_dump(&vocab)
                }
                (None, None) => return Err(Error::Config("inspect-example needs --doc-id or --text".into())),
            };
            write!(out, "{dump}")?;
        }
        Command::AblateRank { base } => {
            let prepared = load_prepared(&cfg, &mut m)?;
            let base_params = match &base {
                Some(p) => {
                    let mut b = load_checkpoint(p, &mut m)?;
                    if b.lora.is_some() {
                        b.merge_lora();
                    }
                    Some(b)
                }
                None => None,
            };
            let mut report = String::from("rank\tlora_params\tsteps\tfirst_loss\tlast_loss\tnext_item_hr1\n");
            for rank in ABLATION_RANKS {
                let mut rcfg = cfg.clone();
                rcfg.lora.enabled = true;
                rcfg.lora.rank = rank;
                let mut params = match &base_params {
                    Some(b) => {
                        let mut p = b.clone();
                        p.attach_lora(rcfg.lora.config().expect("enabled above"))?;
                        p
                    }
                    None => new_model::<f32>(&rcfg, &prepared.vocab)?,
                };
                let s = train_model(&mut params, &prepared, &rcfg, |_| Ok(()))?;
                let reports = evaluate_model(&params, &prepared.docs, &prepared.vocab, &prepared.pool, &rcfg.eval)?;
                let hr = next_item_hr1(&reports).unwrap_or(f64::NAN);
                report.push_str(&format!(
                    "{rank}\t{}\t{}\t{:.6}\t{:.6}\t{hr:.6}\n",
                    params.config.lora_param_count(rank),
                    s.steps,
                    s.first_loss,
                    s.last_loss
                ));
            }
            let ap = cfg.work_path(ABLATION);
            write_atomic(&ap, report.as_bytes())?;
            m.output(&ap)?;
            write!(out, "{report}")?;
        }
    }
    m.finish(&work)?;
    Ok(())
}
