//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::codec::{Codec, Vocab};
use crate::config::{parse_config, RunConfig};
use crate::decode::{NameIndex, Predictor};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, predictions_tsv, Evaluation};
use crate::kg::{
    build_icews_descriptions, load_graph, reformat_nell_name, validate_zero_shot_split, Direction, KnowledgeGraph,
    KnownTrueIndex, Meta, MetaKind, Query,
};
use crate::train::Trainer;
use crate::trie::build_entity_trie;

pub const SWEEP_WIDTHS: [usize; 4] = [1, 5, 10, 40];

#[derive(Debug, Parser)]
#[command(name = "kgs2s", version, about = "Generative knowledge-graph completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RawKind {
    Icews,
    Nell,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a raw entity table into entities.tsv and copy the other files.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: RawKind,
        /// Raw entity TSV.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        id_col: usize,
        #[arg(long, default_value_t = 1)]
        name_col: usize,
        /// ICEWS sector column.
        #[arg(long)]
        sector_col: Option<usize>,
        /// ICEWS country column.
        #[arg(long)]
        country_col: Option<usize>,
        /// NELL description column.
        #[arg(long)]
        desc_col: Option<usize>,
        /// Skip the first input line.
        #[arg(long)]
        header: bool,
    },
    /// Build vocab.txt from the graph text.
    BuildVocab {
        #[command(flatten)]
        common: Common,
    },
    /// Train and keep the checkpoint with the best valid MRR.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Rank the eval split and write metrics and predictions.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Top-K candidates for one query such as `e1,r0,?,` or `?,r0,e2,`.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        query: String,
    },
    /// Evaluate at beam widths 1, 5, 10 and 40.
    SweepBeam {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Preprocess { common, .. }
            | Command::BuildVocab { common }
            | Command::Train { common }
            | Command::Eval { common }
            | Command::Predict { common, .. }
            | Command::SweepBeam { common } => common,
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(&cfg.out_dir)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::load(cfg.out_dir.join("vocab.txt"))
}

/// Graph, codec and best checkpoint of a trained run.
/// Graph, codec and best checkpoint of a finished `train` run.
pub fn load_trained(cfg: &RunConfig) -> Result<(KnowledgeGraph, Codec, Checkpoint)> {
    let graph = load_graph(&cfg.data_dir, cfg.meta_kind)?;
    let vocab = load_vocab(cfg)?;
    let ckpt = load_checkpoint(cfg.out_dir.join("checkpoint.bin"), &vocab)?;
    let codec = Codec::new(&graph, vocab, ckpt.desc_len, ckpt.config.max_len)?;
    Ok((graph, codec, ckpt))
}

fn warn_collisions(graph: &KnowledgeGraph) {
    let collisions = graph.name_collisions();
    if !collisions.is_empty() {
        eprintln!(
            "warning: {} entity names are shared by several entities; generated names map to all of them",
            collisions.len()
        );
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let common = cli.command.common();
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Preprocess {
            kind,
            input,
            id_col,
            name_col,
            sector_col,
            country_col,
            desc_col,
            header,
            ..
        } => preprocess(
            &cfg,
            *kind,
            input,
            RawColumns {
                id: *id_col,
                name: *name_col,
                sector: *sector_col,
                country: *country_col,
                desc: *desc_col,
                header: *header,
            },
        ),
        Command::BuildVocab { .. } => build_vocab(&cfg),
        Command::Train { .. } => train(&cfg),
        Command::Eval { .. } => eval(&cfg, stdout),
        Command::Predict { query, .. } => predict(&cfg, query, stdout),
        Command::SweepBeam { .. } => sweep(&cfg, stdout),
    }
}

/// Parse `args` (without the program name), run, and return what would
/// have gone to stdout. Argument errors become [`Error::Usage`].
pub fn run_args<I, S>(args: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("kgs2s")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Usage(e.to_string().trim_end().to_string()))?;
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

struct RawColumns {
    id: usize,
    name: usize,
    sector: Option<usize>,
    country: Option<usize>,
    desc: Option<usize>,
    header: bool,
}

fn preprocess(cfg: &RunConfig, kind: RawKind, input: &Path, cols: RawColumns) -> Result<()> {
    if !input.exists() {
        return Err(Error::MissingFile(input.to_path_buf()));
    }
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let file = input.display().to_string();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate().skip(usize::from(cols.header)) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |c: usize| {
            fields.get(c).copied().ok_or(Error::Malformed {
                file: file.clone(),
                line: i + 1,
                message: format!("no column {c}"),
            })
        };
        let opt = |c: Option<usize>| c.map_or(Ok(""), field);
        let (name, desc) = match kind {
            RawKind::Icews => (
                field(cols.name)?.to_string(),
                build_icews_descriptions(opt(cols.sector)?, opt(cols.country)?),
            ),
            RawKind::Nell => (reformat_nell_name(field(cols.name)?), opt(cols.desc)?.to_string()),
        };
        let _ = writeln!(out, "{}\t{name}\t{desc}", field(cols.id)?);
    }
    let dir = out_dir(cfg)?;
    write_file(&dir.join("entities.tsv"), &out)?;
    let mut complete = true;
    for name in ["relations.tsv", "train.tsv", "valid.tsv", "test.tsv"] {
        let src = cfg.data_dir.join(name);
        if src.exists() {
            if src != dir.join(name) {
                fs::copy(&src, dir.join(name)).map_err(|e| Error::io(&src, e))?;
            }
        } else {
            complete = false;
        }
    }
    if complete {
        let graph = load_graph(dir, cfg.meta_kind)?;
        warn_collisions(&graph);
        if kind == RawKind::Nell {
            let bad = validate_zero_shot_split(&graph);
            let report: String = bad.iter().map(|r| format!("{}\n", graph.relation(*r).raw_id)).collect();
            write_file(&dir.join("zero_shot_violations.txt"), &report)?;
            if !bad.is_empty() {
                eprintln!("warning: {} valid/test relations also occur in train", bad.len());
            }
        }
    }
    Ok(())
}

fn build_vocab(cfg: &RunConfig) -> Result<()> {
    let graph = load_graph(&cfg.data_dir, cfg.meta_kind)?;
    let vocab = Vocab::build(&graph, cfg.desc_len);
    vocab.save(out_dir(cfg)?.join("vocab.txt"))?;
    eprintln!("vocabulary: {} tokens", vocab.len());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let graph = load_graph(&cfg.data_dir, cfg.meta_kind)?;
    warn_collisions(&graph);
    let dir = out_dir(cfg)?.to_path_buf();
    let vocab_path = dir.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        Vocab::load(&vocab_path)?
    } else {
        let v = Vocab::build(&graph, cfg.desc_len);
        v.save(&vocab_path)?;
        v
    };
    let codec = Codec::new(&graph, vocab, cfg.desc_len, cfg.max_len)?;
    let model_cfg = cfg.model_config(codec.vocab().len(), graph.relations.len());
    let trainer = Trainer::new(&graph, &codec, model_cfg.clone(), cfg.train_plan(), cfg.valid_protocol())?;
    let log_path = dir.join("train_log.tsv");
    let last_path = dir.join("last.bin");
    let best_path = dir.join("checkpoint.bin");
    let mut log = String::new();
    let mut run = if cfg.resume && last_path.exists() {
        let last = load_checkpoint(&last_path, codec.vocab())?;
        let best = load_checkpoint(&best_path, codec.vocab())?;
        if log_path.exists() {
            log = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
        trainer.resume(last, best.params)?
    } else {
        let run = trainer.start()?;
        for rec in &run.history {
            let _ = writeln!(log, "{}", rec.log_line());
        }
        save_checkpoint(&best_path, &run.best_checkpoint(&model_cfg, cfg.desc_len), codec.vocab())?;
        save_checkpoint(&last_path, &run.last_checkpoint(&model_cfg, cfg.desc_len), codec.vocab())?;
        write_file(&log_path, &log)?;
        run
    };
    trainer.run_to_end(&mut run, &mut |rec, run| {
        eprintln!("{}", rec.log_line());
        let _ = writeln!(log, "{}", rec.log_line());
        if run.best_epoch == rec.epoch {
            save_checkpoint(&best_path, &run.best_checkpoint(&model_cfg, cfg.desc_len), codec.vocab())?;
        }
        save_checkpoint(&last_path, &run.last_checkpoint(&model_cfg, cfg.desc_len), codec.vocab())?;
        write_file(&log_path, &log)
    })?;
    eprintln!("best valid mrr {:.6} at epoch {}", run.best_valid_mrr, run.best_epoch);
    Ok(())
}

fn evaluate(cfg: &RunConfig, k: usize) -> Result<(KnowledgeGraph, Evaluation)> {
    let (graph, codec, ckpt) = load_trained(cfg)?;
    warn_collisions(&graph);
    let eval = evaluate_split(&ckpt.config, &ckpt.params, &codec, &graph, cfg.eval_split, &cfg.protocol(k))?;
    Ok((graph, eval))
}

fn eval(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let (graph, eval) = evaluate(cfg, cfg.beam_width)?;
    let dir = out_dir(cfg)?;
    let report = eval.metrics.report();
    write_file(&dir.join("metrics.txt"), &report)?;
    write_file(&dir.join("metrics.tsv"), &eval.metrics.tsv())?;
    write_file(&dir.join("predictions.tsv"), &predictions_tsv(&graph, &eval.outcomes))?;
    if eval.discarded() > 0 {
        eprintln!("discarded {} non-entity generations", eval.discarded());
    }
    stdout.write_all(report.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// One block per width: the metrics report plus the largest candidate list.
pub fn sweep_report(blocks: &[(usize, Evaluation)]) -> (String, String) {
    let mut text = String::new();
    let mut tsv = String::new();
    for (i, (k, e)) in blocks.iter().enumerate() {
        if i == 0 {
            let header = e.metrics.tsv();
            let _ = writeln!(tsv, "beam_width\t{}\tmax_candidates", header.lines().next().unwrap_or(""));
        }
        if i > 0 {
            text.push('\n');
        }
        let _ = write!(text, "beam_width={k}\n{}max_candidates={}\n", e.metrics.report(), e.max_candidates());
        let row = e.metrics.tsv();
        let _ = writeln!(tsv, "{k}\t{}\t{}", row.lines().nth(1).unwrap_or(""), e.max_candidates());
    }
    (text, tsv)
}

fn sweep(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let (graph, codec, ckpt) = load_trained(cfg)?;
    warn_collisions(&graph);
    let mut blocks = Vec::new();
    for k in SWEEP_WIDTHS {
        let e = evaluate_split(&ckpt.config, &ckpt.params, &codec, &graph, cfg.eval_split, &cfg.protocol(k))?;
        blocks.push((k, e));
    }
    let (text, tsv) = sweep_report(&blocks);
    let dir = out_dir(cfg)?;
    write_file(&dir.join("sweep.txt"), &text)?;
    write_file(&dir.join("sweep.tsv"), &tsv)?;
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Parse `head,rel,tail[,meta]` with `?` on exactly one side.
pub fn parse_query(graph: &KnowledgeGraph, text: &str) -> Result<Query> {
    let usage = |m: &str| Error::Usage(format!("query {text:?}: {m}"));
    let fields: Vec<&str> = text.splitn(4, ',').map(str::trim).collect();
    if fields.len() < 3 {
        return Err(usage("expected head,rel,tail[,meta]"));
    }
    let entity = |raw: &str| {
        graph
            .entity_by_raw_id(raw)
            .ok_or_else(|| usage(&format!("unknown entity {raw:?}")))
    };
    let rel = graph
        .relation_by_raw_id(fields[1])
        .ok_or_else(|| usage(&format!("unknown relation {:?}", fields[1])))?;
    let (direction, known) = match (fields[0], fields[2]) {
        ("?", "?") => return Err(usage("only one side may be ?")),
        ("?", t) => (Direction::Head, entity(t)?),
        (h, "?") => (Direction::Tail, entity(h)?),
        _ => return Err(usage("one side must be ?")),
    };
    let meta_text = fields.get(3).copied().unwrap_or("");
    let meta = match graph.meta_kind {
        MetaKind::None if meta_text.is_empty() => Meta::None,
        MetaKind::None => return Err(usage("this graph has no meta information")),
        kind => kind.wrap(meta_text),
    };
    Ok(Query {
        direction,
        known,
        rel,
        meta,
    })
}

fn predict(cfg: &RunConfig, query: &str, stdout: &mut dyn Write) -> Result<()> {
    let (graph, codec, ckpt) = load_trained(cfg)?;
    warn_collisions(&graph);
    let q = parse_query(&graph, query)?;
    let trie = build_entity_trie(&codec);
    let names = NameIndex::new(&codec);
    let block = (!cfg.block_splits.is_empty()).then(|| KnownTrueIndex::build(&graph, &cfg.block_splits));
    let predictor = Predictor {
        config: &ckpt.config,
        params: &ckpt.params,
        codec: &codec,
        entity_trie: &trie,
        names: &names,
        block_index: block.as_ref(),
    };
    let list = predictor.predict_topk(&q, None, &cfg.protocol(cfg.beam_width).decode)?;
    let mut out = String::new();
    for (i, (e, s)) in list.entries.iter().enumerate() {
        let ent = graph.entity(*e);
        let _ = writeln!(out, "{}\t{}\t{s:.6}\t{}", i + 1, ent.raw_id, ent.name);
    }
    if list.discarded > 0 {
        eprintln!("discarded {} non-entity generations", list.discarded);
    }
    if list.is_empty() {
        eprintln!("no candidates generated");
    }
    stdout.write_all(out.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}
