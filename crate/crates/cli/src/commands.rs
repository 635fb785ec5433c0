//! Command implementations.

use crate::config::{Config, ConfigError, ScorerChoice, Settings};
use crate::ConfigArgs;
use clap::Args;
use moonlite::attr::GenConfig;
use moonlite::eval::{embed_corpus, evaluate, view_input, EvalOptions, Tasks};
use moonlite::model::Model;
use moonlite::numeric::{checkpoint, Adam, Param};
use moonlite::rl::{ExternalScorer, F1Scorer, QualityScorer};
use moonlite::train::{self, load_state, save_state, RlRecord, SftRecord};
use moonlite::{Dataset, ParamSet, Schema, Selector, Tensor};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] moonlite::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_)
            | CliError::Usage(_)
            | CliError::Run(moonlite::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut c = Config::default();
    if let Some(p) = &args.config {
        c.apply_text(&p.display().to_string(), &read(p)?)?;
    }
    for s in &args.set {
        c.apply(s)?;
    }
    Ok(c)
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Schema file with `Key: v1, v2, ...` lines; defaults to the built-in schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub products: u64,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub triplets: u64,
    /// Standard deviation of the patch noise.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 8)]
    pub patches: usize,
    #[arg(long, default_value_t = 16)]
    pub patch_dim: usize,
    /// Fraction of products and triplets held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Relative frequency of image, text and multimodal queries.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 1.0, 1.0])]
    pub selector_ratios: Vec<f64>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let schema = match &a.schema {
        Some(p) => Schema::parse(&read(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => Schema::default_schema(),
    };
    let cfg = GenConfig {
        products: a.products as usize,
        triplets: a.triplets as usize,
        noise: a.noise,
        patches: a.patches,
        patch_dim: a.patch_dim,
        test_fraction: a.test_fraction,
        selector_ratios: [
            a.selector_ratios[0],
            a.selector_ratios[1],
            a.selector_ratios[2],
        ],
        seed: a.seed,
    };
    let ds = Dataset::generate(schema, &cfg)?;
    mkdir(&a.out)?;
    ds.save(&a.out)?;
    eprintln!(
        "wrote {} products and {} triplets to {}",
        ds.products.len(),
        ds.triplets.len(),
        a.out.display()
    );
    Ok(())
}

/// Run directory: `config.echo`, `checkpoints/`, `logs/`.
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path, cfg: &Config) -> Result<Self> {
        mkdir(&root.join("checkpoints"))?;
        mkdir(&root.join("logs"))?;
        write(&root.join("config.echo"), &cfg.echo())?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    fn ckpt(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    fn log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.log"))
    }
}

/// Opens a step log for appending after `start` steps; earlier lines of a
/// resumed run are kept and later ones dropped.
fn open_log(path: &Path, header: &str, start: u64) -> Result<BufWriter<fs::File>> {
    let mut text = format!("{header}\n");
    if start > 0 && path.exists() {
        for line in read(path)?.lines().skip(1) {
            let step: Option<u64> = line.split('\t').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s < start) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    write(path, &text)?;
    let f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    Ok(BufWriter::new(f))
}

fn should_save(step: usize, every: usize, total: usize) -> bool {
    step + 1 == total || (every > 0 && (step + 1).is_multiple_of(every))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    Ok(Dataset::load(dir)?)
}

#[derive(Args, Debug)]
pub struct TrainSftArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Continue from the run's last checkpoint and optimizer state.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn train_sft(a: TrainSftArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let s = cfg.settings(&ds)?;
    let run = RunDir::create(&a.run, &cfg)?;
    let ckpt = run.ckpt("sft");
    let (mut model, mut opt) = if a.resume && ckpt.exists() {
        load_state(s.model.clone(), &ckpt, s.sft.lr)?
    } else {
        let m = Model::new(s.model.clone())?;
        let o = Adam::new(&m.params, s.sft.lr);
        (m, o)
    };
    let log_path = run.log("sft");
    let mut log = open_log(&log_path, SftRecord::HEADER, opt.step)?;
    if s.sft.steps == 0 {
        save_state(&model, &opt, &ckpt)?;
    }
    let every = s.sft_ckpt_every;
    train::train_sft(&mut model, &mut opt, &ds, &s.sft, &mut |r, m, o| {
        writeln!(log, "{}", r.line())?;
        if should_save(r.step, every, s.sft.steps) {
            log.flush()?;
            save_state(m, o, &ckpt)?;
            eprintln!("sft step {} loss {:.4}", r.step + 1, r.total);
        }
        Ok(())
    })?;
    log.flush().map_err(io_err(&log_path))?;
    eprintln!("checkpoint {}", ckpt.display());
    Ok(())
}

fn scorer(s: &Settings) -> Box<dyn QualityScorer> {
    match &s.scorer {
        ScorerChoice::F1 => Box::new(F1Scorer),
        ScorerChoice::External(p) => Box::new(ExternalScorer { program: p.clone() }),
    }
}

#[derive(Args, Debug)]
pub struct TrainRlArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// Starting checkpoint, normally the run's `checkpoints/sft.ckpt`.
    #[arg(long)]
    pub init: PathBuf,
    /// Continue from the run's last policy checkpoint instead of `--init`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn train_rl(a: TrainRlArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let s = cfg.settings(&ds)?;
    if !a.init.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            a.init.display()
        )));
    }
    let run = RunDir::create(&a.run, &cfg)?;
    let ckpt = run.ckpt("rl");
    let (mut model, mut opt) = if a.resume && ckpt.exists() {
        load_state(s.model.clone(), &ckpt, s.rl.lr)?
    } else {
        let m = Model::load(s.model.clone(), &a.init)?;
        let o = Adam::new(&m.params, s.rl.lr);
        (m, o)
    };
    let log_path = run.log("rl");
    let mut log = open_log(&log_path, RlRecord::HEADER, opt.step)?;
    if s.rl.steps == 0 {
        save_state(&model, &opt, &ckpt)?;
    }
    let every = s.rl_ckpt_every;
    let judge = scorer(&s);
    train::train_rl(
        &mut model,
        &mut opt,
        &ds,
        &s.rl,
        judge.as_ref(),
        &mut |r, m, o| {
            writeln!(log, "{}", r.line())?;
            if should_save(r.step, every, s.rl.steps) {
                log.flush()?;
                save_state(m, o, &ckpt)?;
                eprintln!(
                    "rl step {} composite {:.4} format {:.3}",
                    r.step + 1,
                    r.composite,
                    r.format
                );
            }
            Ok(())
        },
    )?;
    log.flush().map_err(io_err(&log_path))?;
    eprintln!("checkpoint {}", ckpt.display());
    Ok(())
}

fn load_model(s: &Settings, ckpt: &Path) -> Result<Model> {
    if !ckpt.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            ckpt.display()
        )));
    }
    Ok(Model::load(s.model.clone(), ckpt)?)
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Embedding file (`embeddings` tensor, one row per product in id order).
    #[arg(long)]
    pub out: PathBuf,
    /// Visible product views: image, text or mm.
    #[arg(long, default_value = "mm")]
    pub selector: String,
    /// Also write each product's generated rationale, one `id<TAB>tokens` line.
    #[arg(long)]
    pub rationales: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let selector: Selector = a
        .selector
        .parse()
        .map_err(|e: moonlite::Error| CliError::Usage(e.to_string()))?;
    let cfg = load_config(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let s = cfg.settings(&ds)?;
    let model = load_model(&s, &a.ckpt)?;
    let inputs: Vec<_> = ds
        .products
        .iter()
        .map(|p| view_input(p, selector))
        .collect();
    let e = embed_corpus(&model, &inputs, s.model.reasoning)?;
    let d = e.rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = e.rows.concat();
    let mut out = ParamSet::new();
    out.insert(Param::new(
        "embeddings",
        Tensor::new(vec![e.rows.len(), d], data)?,
    ))?;
    checkpoint::save(&a.out, &out)?;
    if let Some(p) = &a.rationales {
        let text: String = ds
            .products
            .iter()
            .zip(&e.rationales)
            .map(|(p, r)| format!("{}\t{}\n", p.id, ds.vocab.render(r)))
            .collect();
        write(p, &text)?;
    }
    eprintln!(
        "embedded {} products ({} dims) to {}",
        e.rows.len(),
        d,
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated subset of retrieval,classify,attr.
    #[arg(long, default_value = "retrieval,classify,attr")]
    pub tasks: String,
    /// Largest candidate pool per retrieval query; defaults to `eval.pool`.
    #[arg(long)]
    pub pool: Option<usize>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let tasks = Tasks::parse(&a.tasks).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = load_config(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let s = cfg.settings(&ds)?;
    let model = load_model(&s, &a.ckpt)?;
    let pool = a.pool.unwrap_or(s.pool);
    let kmax = moonlite::eval::KS[moonlite::eval::KS.len() - 1];
    if tasks.retrieval && pool < kmax {
        return Err(CliError::Usage(format!("--pool must be at least {kmax}")));
    }
    let opts = EvalOptions {
        tasks,
        pool,
        reasoning: s.model.reasoning,
        seed: s.sft.seed,
    };
    let report = evaluate(&model, &ds, &opts)?.render();
    match &a.out {
        Some(p) => write(p, &report)?,
        None => print!("{report}"),
    }
    Ok(())
}
