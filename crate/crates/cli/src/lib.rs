//! Batch driver: corpus generation, training, evaluation, retrieval,
//! gradient checking and attention export.
//!
//! Exit codes are 0 on success, 1 on a domain failure and 2 on a usage
//! error. Failures print one `error kind=<kind> msg=<text>` line to stderr.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hat::alignment::{attention_maps, export_attention, score_all};
use hat::data::{generate_corpus, load_config, Dataset, RunConfig, Split};
use hat::encoders::HatModel;
use hat::eval::{evaluate, folded_eval, rank_candidates};
use hat::objective::{
    encode_split, evaluate_split, grad_check, score_split, GradCheckSpec, TrainConfig, Trainer,
    LOG_HEADER,
};
use hat::{Error, Result};

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train.tsv";
pub const REPORT: &str = "report.txt";
pub const EFFECTIVE_CONFIG: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(
    name = "hat",
    version,
    about = "Hierarchical alignment image-text retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired corpus to --out.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        val_pairs: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model on the training split of --data.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Score the training split every N epochs for the log (0 never).
        #[arg(long, default_value_t = 1)]
        eval_every: usize,
        /// Stop once both directions reach this training R@1.
        #[arg(long)]
        target_r1: Option<f64>,
    },
    /// Recall@K report of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "val")]
        split: String,
        /// Images per fold; with --folds, evaluates folds and averages.
        #[arg(long, requires = "folds")]
        fold_size: Option<usize>,
        #[arg(long, requires = "fold_size")]
        folds: Option<usize>,
    },
    /// Top candidates for one query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "val")]
        split: String,
        /// Query id, local to the split.
        #[arg(long)]
        query_id: usize,
        #[arg(long, value_enum, default_value_t = Modality::Image)]
        query: Modality,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Seeds to check; defaults to --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        frozen: bool,
        /// Entries probed per tensor.
        #[arg(long)]
        max_entries: Option<usize>,
        /// Central-difference step.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Attention weights of one image-caption pair as CSV.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        image_id: usize,
        #[arg(long)]
        text_id: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Modality {
    Image,
    Text,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra configuration entry, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image stage numbers to align, e.g. "2,3,4", or "all".
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    freeze_epochs: Option<usize>,
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    per_level_mean: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory (or file, for export-attn).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

impl Common {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        for entry in &self.set {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {entry:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("levels", self.levels.clone()),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("margin", self.margin.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("freeze_epochs", self.freeze_epochs.map(|v| v.to_string())),
            ("direction", self.direction.clone()),
            ("per_level_mean", self.per_level_mean.then(|| "true".into())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
        ];
        for (k, v) in flags.iter().chain(extra) {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

/// Mirrors every line to stdout and, when opened, to a log file.
struct Log {
    file: Option<BufWriter<File>>,
}

impl Log {
    fn stdout_only() -> Self {
        Self { file: None }
    }

    fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            file: Some(BufWriter::new(file)),
        })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(std::io::stdout(), "{text}").map_err(|e| io_err("<stdout>", e))?;
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{text}").map_err(|e| io_err("<log>", e))?;
        }
        Ok(())
    }

    fn block(&mut self, text: &str) -> Result<()> {
        text.lines().try_for_each(|l| self.line(l))
    }

    fn config(&mut self, cfg: &RunConfig) -> Result<()> {
        self.line("# effective configuration")?;
        self.block(&cfg.to_kv_string())
    }

    fn finish(self) -> Result<()> {
        if let Some(mut f) = self.file {
            f.flush().map_err(|e| io_err("<log>", e))?;
        }
        Ok(())
    }
}

fn io_err(path: impl AsRef<Path>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.as_ref().to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Error::Config(format!("{command} needs --out")))?;
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn log_for(common: &Common, command: &str) -> Result<Log> {
    match &common.out {
        Some(dir) => Log::to_file(&dir.join(format!("{command}.log"))),
        None => Ok(Log::stdout_only()),
    }
}

/// Loads the corpus and checkpoint; the scorer settings come from `cfg`,
/// the model shape from the checkpoint.
fn load_model(args: &ModelArgs, cfg: &mut RunConfig) -> Result<(Dataset, HatModel)> {
    let data = Dataset::load(&args.data)?;
    let model = HatModel::load(&args.ckpt)?;
    cfg.model = model.config().clone();
    Ok((data, model))
}

fn gen_data(common: &Common, extra: &[(&str, Option<String>)]) -> Result<()> {
    let cfg = common.resolve(extra)?;
    let dir = out_dir(common, "gen-data")?;
    let mut log = log_for(common, "gen-data")?;
    log.config(&cfg)?;
    let corpus = generate_corpus(&cfg.synthetic)?;
    corpus.dataset.save(&dir)?;
    log.line(&format!(
        "wrote {} images ({} train) and {} captions to {}",
        corpus.dataset.num_images(),
        corpus.dataset.num_train(),
        corpus.dataset.num_texts(),
        dir.display()
    ))?;
    log.finish()
}

fn train(common: &Common, data_dir: &Path, eval_every: usize, target: Option<f64>) -> Result<()> {
    let mut cfg = common.resolve(&[])?;
    let data = Dataset::load(data_dir)?;
    // the model's input shape follows the corpus
    cfg.set("vocab_size", &data.vocab_size().to_string())?;
    if let Some(grid) = data.images().first() {
        let side = (grid.rows() as f64).sqrt().round() as usize;
        cfg.set("grid_side", &side.to_string())?;
        cfg.set("in_dim", &grid.cols().to_string())?;
    }
    let dir = out_dir(common, "train")?;
    let mut log = log_for(common, "train")?;
    log.config(&cfg)?;
    write_file(&dir.join(EFFECTIVE_CONFIG), &cfg.to_kv_string())?;

    let model = HatModel::new(cfg.model.clone(), cfg.seed)?;
    let train_config = TrainConfig::from_run(&cfg)?;
    let align = train_config.alignment.clone();
    let mut trainer = Trainer::new(model, train_config)?;
    let positives = data.positives(Split::Train);
    let mut tsv = format!("{LOG_HEADER}\n");
    log.line(LOG_HEADER)?;
    for epoch in 0..cfg.schedule.epochs {
        let stats = trainer.train_epoch(&data, &positives)?;
        let report = if eval_every > 0 && (epoch + 1) % eval_every == 0 {
            Some(evaluate_split(
                trainer.model(),
                &data,
                Split::Train,
                &align,
            )?)
        } else {
            None
        };
        let line = stats.log_line(report.as_ref().map_or(f64::NAN, |r| r.mean_r1()));
        log.line(&line)?;
        tsv.push_str(&line);
        tsv.push('\n');
        if let (Some(t), Some(r)) = (target, &report) {
            if r.i2t.r1 >= t && r.t2i.r1 >= t {
                log.line(&format!(
                    "reached R@1 {t} in both directions after epoch {epoch}"
                ))?;
                break;
            }
        }
    }
    write_file(&dir.join(TRAIN_LOG), &tsv)?;
    let ckpt = dir.join(CHECKPOINT);
    trainer.model().save(&ckpt)?;
    log.line(&format!("checkpoint {}", ckpt.display()))?;
    log.finish()
}

fn eval_cmd(
    common: &Common,
    args: &ModelArgs,
    split: &str,
    folds: Option<(usize, usize)>,
) -> Result<()> {
    let mut cfg = common.resolve(&[])?;
    let split: Split = split.parse()?;
    let (data, model) = load_model(args, &mut cfg)?;
    let align = cfg.alignment()?;
    let mut log = log_for(common, "eval")?;
    log.config(&cfg)?;
    let scores = score_split(&model, &data, split, &align, false)?;
    let gt = data.ground_truth(split)?;
    let report = match folds {
        Some((size, count)) => folded_eval(&scores, &gt, size, count)?,
        None => evaluate(&scores, &gt)?,
    };
    log.block(&report.to_table())?;
    if let Some(dir) = &common.out {
        write_file(&dir.join(REPORT), &report.to_kv())?;
    }
    log.finish()
}

fn retrieve(
    common: &Common,
    args: &ModelArgs,
    split: &str,
    query_id: usize,
    query: Modality,
    topk: usize,
) -> Result<()> {
    let mut cfg = common.resolve(&[])?;
    let split: Split = split.parse()?;
    let (data, model) = load_model(args, &mut cfg)?;
    let align = cfg.alignment()?;
    let mut log = log_for(common, "retrieve")?;
    log.config(&cfg)?;
    let (images, texts) = encode_split(&model, &data, split)?;
    let (queries, what) = match query {
        Modality::Image => (images.len(), "image"),
        Modality::Text => (texts.len(), "text"),
    };
    if query_id >= queries {
        return Err(Error::Input(format!(
            "{what} query {query_id} outside the split's {queries} {what}s"
        )));
    }
    let scores = match query {
        Modality::Image => {
            score_all(&images[query_id..=query_id], &texts, &align, false)?.image_row(0)
        }
        Modality::Text => {
            score_all(&images, &texts[query_id..=query_id], &align, false)?.text_column(0)
        }
    };
    let ranked = rank_candidates(&scores)?;
    log.line("rank\tcandidate\tscore")?;
    for (r, &c) in ranked.iter().take(topk).enumerate() {
        log.line(&format!("{}\t{c}\t{}", r + 1, scores[c]))?;
    }
    log.finish()
}

fn grad_check_cmd(
    common: &Common,
    seeds: &[u64],
    tolerance: f64,
    pairs: Option<usize>,
    frozen: bool,
    max_entries: Option<usize>,
    step: Option<f64>,
) -> Result<()> {
    let cfg = common.resolve(&[])?;
    let mut log = log_for(common, "grad-check")?;
    log.config(&cfg)?;
    let defaults = GradCheckSpec::default();
    let spec = GradCheckSpec {
        alignment: {
            let mut rc = cfg.clone();
            rc.model = defaults.model.clone();
            rc.alignment()?
        },
        margin: cfg.schedule.margin,
        pairs: pairs.unwrap_or(defaults.pairs),
        encoders_frozen: frozen,
        max_entries,
        step: step.unwrap_or(defaults.step),
        ..defaults
    };
    let seeds = if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    };
    let mut failing = Vec::new();
    for &seed in &seeds {
        let report = grad_check(&spec, seed)?;
        log.block(&report.to_table())?;
        let worst = report.max_rel_error();
        log.line(&format!("seed={seed} max_rel_error={worst:e}"))?;
        if !report.passes(tolerance) {
            failing.push(format!("seed {seed}: {worst:e}"));
        }
    }
    log.finish()?;
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "above {tolerance:e}: {}",
            failing.join(", ")
        )))
    }
}

fn export_attn(
    common: &Common,
    args: &ModelArgs,
    split: &str,
    image_id: usize,
    text_id: usize,
) -> Result<()> {
    let mut cfg = common.resolve(&[])?;
    let split: Split = split.parse()?;
    let (data, model) = load_model(args, &mut cfg)?;
    let align = cfg.alignment()?;
    let images = data.image_range(split);
    let texts = data.text_range(split);
    if image_id >= images.len() || text_id >= texts.len() {
        return Err(Error::Input(format!(
            "pair ({image_id}, {text_id}) outside the split's {} images and {} texts",
            images.len(),
            texts.len()
        )));
    }
    let img = model.encode_image(&data.images()[images.start + image_id])?;
    let txt = model.encode_text(&data.texts()[texts.start + text_id])?;
    let maps = attention_maps(&img, &txt, &align)?;
    match &common.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            let file = File::create(path).map_err(|e| io_err(path, e))?;
            export_attention(&maps, BufWriter::new(file)).map_err(|e| io_err(path, e))?;
        }
        None => {
            export_attention(&maps, std::io::stdout().lock()).map_err(|e| io_err("<stdout>", e))?
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            pairs,
            val_pairs,
            noise,
        } => gen_data(
            &common,
            &[
                ("pairs", pairs.map(|v| v.to_string())),
                ("val_pairs", val_pairs.map(|v| v.to_string())),
                ("noise", noise.map(|v| v.to_string())),
            ],
        ),
        Command::Train {
            common,
            data,
            eval_every,
            target_r1,
        } => train(&common, &data, eval_every, target_r1),
        Command::Eval {
            common,
            model,
            split,
            fold_size,
            folds,
        } => eval_cmd(&common, &model, &split, fold_size.zip(folds)),
        Command::Retrieve {
            common,
            model,
            split,
            query_id,
            query,
            topk,
        } => retrieve(&common, &model, &split, query_id, query, topk),
        Command::GradCheck {
            common,
            seeds,
            tolerance,
            pairs,
            frozen,
            max_entries,
            step,
        } => grad_check_cmd(&common, &seeds, tolerance, pairs, frozen, max_entries, step),
        Command::ExportAttn {
            common,
            model,
            split,
            image_id,
            text_id,
        } => export_attn(&common, &model, &split, image_id, text_id),
    }
}

/// One-line machine-parsable error description.
pub fn error_line(err: &Error) -> String {
    let mut msg = String::new();
    let _ = write!(msg, "{err}");
    format!("error kind={} msg={}", err.kind(), msg.replace('\n', " "))
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
