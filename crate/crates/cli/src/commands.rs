use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use aseg_core::metrics::{self, BinaryMask, MetricReport, DEFAULT_TAU};
use aseg_core::model::PromptKind;
use aseg_core::phantom::{self, PhantomSample, INDEX_FILE};
use aseg_core::pgm;
use aseg_core::study::{self, AblationRow, OffsetRow, Table, Variant};
use aseg_core::train::{
    dataset_hash, evaluate, load_model, prepare, BoxOffset, EpochSummary, EvalOptions, Prompting, Trainer,
};

use crate::config::{resolve, GenConfig, RunConfig};
use crate::manifest::RunManifest;
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "aseg", version, about = "Class-prompted segmentation on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset as PGM files plus a JSON index.
    Gen(GenArgs),
    /// Train a model; writes logs plus final and best checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and score every variant of a grid on shared data and seeds.
    Ablate(AblateArgs),
    /// Score a box-prompted checkpoint with enlarged boxes.
    Offset(OffsetArgs),
    /// DSC and NSD between PGM masks.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `epochs`; with `--resume` this is the new total.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Which part of the dataset to score.
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated class ids to report, e.g. `0,2`.
    #[arg(long)]
    pub classes: Option<String>,
    /// Box offset in pixels for box-prompted checkpoints.
    #[arg(long, default_value_t = 0)]
    pub box_offset: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Branch,
    Diffusion,
    JointLoss,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Grid file with one `label: key=value ...` line per variant.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub grid: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated seeds; each seed trains the whole grid.
    #[arg(long, conflicts_with = "seed")]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct OffsetArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "0,5,15,30,50,IB")]
    pub offsets: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long, requires = "pred", required_unless_present = "pairs")]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// JSON list of `{"gt": .., "pred": .., "class_id": ..}`, paths relative to the file.
    #[arg(long, conflicts_with_all = ["gt", "pred"])]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Print the MetricReport JSON instead of the summary line.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Builds the global worker pool from `ASEG_THREADS` when set.
fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ASEG_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("ASEG_THREADS must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called in-process; the first one wins
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Offset(a) => cmd_offset(a),
        Command::Score(a) => cmd_score(a),
    }
}

fn json<T: Serialize>(v: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(aseg_core::Error::from)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::from(e).context(path))
}

impl CliError {
    fn context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn load_data(dir: &Path) -> Result<Vec<PhantomSample>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("data directory {} does not exist", dir.display())));
    }
    if !dir.join(INDEX_FILE).is_file() {
        return Err(CliError::usage(format!("no {INDEX_FILE} in {}", dir.display())));
    }
    let (_, samples) = phantom::import(dir)?;
    Ok(samples)
}

fn select(samples: Vec<PhantomSample>, args: &DataArgs) -> Result<Vec<PhantomSample>, CliError> {
    Ok(match args.split {
        Split::All => samples,
        Split::Train => phantom::split(&samples, args.train_frac)?.0,
        Split::Val => phantom::split(&samples, args.train_frac)?.1,
    })
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::usage(format!("bad {what} {t:?}"))))
        .collect()
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let mut cfg = resolve(GenConfig::default(), a.config.as_deref(), &a.sets, GenConfig::set)?;
    if let Some(s) = a.common.seed {
        cfg.phantom.seed = s;
    }
    cfg.phantom.validate()?;
    let mut manifest = RunManifest::new("gen", a.config.as_deref(), cfg.to_map(), BTreeMap::new(), &a.out);
    let samples = phantom::generate(&cfg.phantom, cfg.n)?;
    phantom::export(&samples, &cfg.phantom, &a.out)?;
    manifest.inputs.insert("dataset".into(), dataset_hash(&[&samples]));
    manifest.finish(&a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// One line of `epochs.jsonl`; per-sample scores are left out.
#[derive(Serialize)]
struct EpochLog<'a> {
    epoch: usize,
    steps: usize,
    lr: f64,
    next_lr: f64,
    mean_loss: f64,
    mean_dsc: f64,
    mean_nsd: f64,
    per_class: &'a BTreeMap<usize, metrics::ClassScore>,
    seconds: f64,
}

fn append_line(path: &Path, line: &str) -> Result<(), CliError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(RunConfig::default(), a.config.as_deref(), &a.sets, RunConfig::set)?;
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    let samples = load_data(&a.data)?;
    let (train, val) = phantom::split(&samples, cfg.train_frac)?;

    let mut t = match &a.resume {
        Some(dir) => {
            let mut t = Trainer::resume(dir, &train, &val)?;
            t.config.epochs = a.epochs.unwrap_or(t.config.epochs);
            cfg.train = t.config.clone();
            t
        }
        None => Trainer::new(cfg.train.clone(), &train, &val)?,
    };

    let mut inputs = BTreeMap::from([("dataset".to_string(), t.dataset_hash.clone())]);
    if let Some(dir) = &a.resume {
        inputs.insert("resume".into(), dir.display().to_string());
    }
    let mut manifest = RunManifest::new("train", a.config.as_deref(), cfg.to_map(), inputs, &a.out);
    manifest.write(&a.out)?;

    let epochs_log = a.out.join("epochs.jsonl");
    let steps_log = a.out.join("steps.jsonl");
    let ckpt = a.out.join("checkpoints");
    while t.epoch < t.config.epochs {
        let prev_best = t.best_dsc;
        let mut lines = vec![];
        let summary: Result<EpochSummary, aseg_core::Error> =
            t.run_epoch(|r| lines.push(serde_json::to_string(r).unwrap_or_default()));
        for l in &lines {
            append_line(&steps_log, l)?;
        }
        let s = match summary {
            Ok(s) => s,
            Err(e) => {
                let dump = serde_json::json!({ "epoch": t.epoch, "step": t.step, "error": e.to_string() });
                write_text(&a.out.join("abort.json"), &dump.to_string())?;
                return Err(e.into());
            }
        };
        let log = EpochLog {
            epoch: s.epoch,
            steps: s.steps,
            lr: s.lr,
            next_lr: s.next_lr,
            mean_loss: s.mean_loss,
            mean_dsc: s.eval.mean_dsc,
            mean_nsd: s.eval.mean_nsd,
            per_class: &s.eval.per_class,
            seconds: s.seconds,
        };
        append_line(&epochs_log, &serde_json::to_string(&log).map_err(aseg_core::Error::from)?)?;
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  dsc {:.3}  nsd {:.3}  {:.1}s",
            s.epoch, s.lr, s.mean_loss, s.eval.mean_dsc, s.eval.mean_nsd, s.seconds
        );
        if t.best_dsc != prev_best {
            t.save_checkpoint(&ckpt.join("best"))?;
        }
        t.save_checkpoint(&ckpt.join("final"))?;
    }
    if !ckpt.join("final").is_dir() {
        t.save_checkpoint(&ckpt.join("final"))?;
    }
    manifest.finish(&a.out)?;
    println!("trained {} epochs; best val DSC {:.3}", t.epoch, t.best_dsc.unwrap_or(0.0));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let samples = select(load_data(&a.data.data)?, &a.data)?;
    let classes = a.classes.as_deref().map(|s| parse_list::<usize>("class id", s)).transpose()?;
    if let Some(cs) = &classes {
        if let Some(c) = cs.iter().find(|&&c| c >= model.config.num_classes) {
            return Err(CliError::usage(format!("class {c} out of range (model has {})", model.config.num_classes)));
        }
    }
    let data = prepare(&model, &samples, false)?;
    let prompting = match ck.train.prompt_kind {
        PromptKind::Class => Prompting::Class(ck.train.prompt_options()),
        PromptKind::Box => Prompting::Box(BoxOffset::Pixels(a.box_offset)),
    };
    let opts = EvalOptions {
        prompting,
        threshold: ck.train.threshold,
        tau: ck.train.tau,
        batch_size: ck.train.batch_size,
        classes: classes.clone(),
    };
    let report = evaluate(&model, &data, &opts)?;

    let mut config = BTreeMap::from([
        ("split".to_string(), format!("{:?}", a.data.split).to_lowercase()),
        ("train_frac".to_string(), a.data.train_frac.to_string()),
        ("box_offset".to_string(), a.box_offset.to_string()),
    ]);
    if let Some(s) = a.common.seed {
        config.insert("seed".into(), s.to_string());
    }
    if let Some(cs) = &classes {
        config.insert("classes".into(), cs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
    }
    let inputs = BTreeMap::from([
        ("dataset".to_string(), dataset_hash(&[&samples])),
        ("checkpoint".to_string(), model.store.hash_where(|_| true)),
    ]);
    let mut manifest = RunManifest::new("eval", None, config, inputs, &a.out);
    manifest.write(&a.out)?;
    write_text(&a.out.join("metrics.json"), &json(&report)?)?;
    manifest.finish(&a.out)?;
    println!("DSC {:.3} NSD {:.3}", report.mean_dsc, report.mean_nsd);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AblationOutput {
    variants: Vec<Variant>,
    rows: Vec<AblationRow>,
    tables: Vec<Table>,
}

fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    let mut cfg = resolve(RunConfig::default(), a.config.as_deref(), &a.sets, RunConfig::set)?;
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let (variants, title) = match (&a.grid, a.preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read grid {}: {e}", p.display())))?;
            (study::parse_grid(&text)?, format!("Ablation ({})", p.display()))
        }
        (None, Some(Preset::Branch)) => (study::branch_grid(), "Branch ablation".to_string()),
        (None, Some(Preset::Diffusion)) => (study::diffusion_grid(), "Diffusion ablation".to_string()),
        (None, Some(Preset::JointLoss)) => (study::joint_loss_grid(), "Joint loss ablation".to_string()),
        (None, None) => return Err(CliError::usage("either --grid or --preset is required")),
    };
    for v in &variants {
        v.apply(&cfg.train)?;
    }
    let seeds = match &a.seeds {
        Some(s) => parse_list::<u64>("seed", s)?,
        None => vec![cfg.train.seed],
    };
    if seeds.is_empty() {
        return Err(CliError::usage("--seeds lists no seeds"));
    }
    let samples = load_data(&a.data)?;
    let (train, val) = phantom::split(&samples, cfg.train_frac)?;

    let mut config = cfg.to_map();
    config.insert("seeds".into(), seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    for v in &variants {
        let deltas: Vec<String> = v.deltas.iter().map(|(k, v)| format!("{k}={v}")).collect();
        config.insert(format!("variant.{}", v.label), deltas.join(" "));
    }
    let inputs = BTreeMap::from([("dataset".to_string(), dataset_hash(&[&train, &val]))]);
    let mut manifest = RunManifest::new("ablate", a.config.as_deref(), config, inputs, &a.out);
    manifest.write(&a.out)?;

    let mut rows = vec![];
    let mut tables = vec![];
    for &seed in &seeds {
        let base = aseg_core::train::TrainConfig { seed, ..cfg.train.clone() };
        let r = study::run_ablation(&base, &variants, &train, &val, |row| {
            eprintln!("seed {}  {:<12} dsc {:.3}  nsd {:.3}", row.seed, row.label, row.mean_dsc, row.mean_nsd)
        })?;
        let t = if seeds.len() > 1 { format!("{title}, seed {seed}") } else { title.clone() };
        tables.push(study::ablation_table(&t, &variants, &r));
        rows.extend(r);
    }
    let text: String = tables.iter().map(|t| t.to_text()).collect::<Vec<_>>().join("\n");
    write_text(&a.out.join("ablation.json"), &json(&AblationOutput { variants, rows, tables })?)?;
    write_text(&a.out.join("ablation.txt"), &text)?;
    manifest.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct OffsetOutput {
    rows: Vec<OffsetRow>,
    table: Table,
}

fn cmd_offset(a: OffsetArgs) -> Result<(), CliError> {
    let offsets = study::parse_offsets(&a.offsets)?;
    let (model, ck) = load_model(&a.checkpoint)?;
    if ck.train.prompt_kind != PromptKind::Box {
        return Err(CliError {
            code: crate::EXIT_INCOMPATIBLE,
            message: "offset study needs a checkpoint trained with prompt_kind = box".into(),
        });
    }
    let samples = select(load_data(&a.data.data)?, &a.data)?;
    let data = prepare(&model, &samples, false)?;
    let mut config = BTreeMap::from([
        ("offsets".to_string(), a.offsets.clone()),
        ("split".to_string(), format!("{:?}", a.data.split).to_lowercase()),
        ("train_frac".to_string(), a.data.train_frac.to_string()),
    ]);
    if let Some(s) = a.common.seed {
        config.insert("seed".into(), s.to_string());
    }
    let inputs = BTreeMap::from([
        ("dataset".to_string(), dataset_hash(&[&samples])),
        ("checkpoint".to_string(), model.store.hash_where(|_| true)),
    ]);
    let mut manifest = RunManifest::new("offset", None, config, inputs, &a.out);
    manifest.write(&a.out)?;
    let rows = study::box_offset_study(&model, &data, &offsets, ck.train.threshold, ck.train.tau, ck.train.batch_size)?;
    let table = study::offset_table(&rows);
    let text = table.to_text();
    write_text(&a.out.join("offset.json"), &json(&OffsetOutput { rows, table })?)?;
    write_text(&a.out.join("offset.txt"), &text)?;
    manifest.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

#[derive(Deserialize)]
struct PairEntry {
    gt: PathBuf,
    pred: PathBuf,
    #[serde(default)]
    class_id: usize,
}

fn read_mask(path: &Path) -> Result<BinaryMask, CliError> {
    Ok(pgm::gray_to_mask(&pgm::read(path).map_err(|e| CliError::from(e).context(path))?))
}

fn cmd_score(a: ScoreArgs) -> Result<(), CliError> {
    if !(a.tau >= 0.0 && a.tau.is_finite()) {
        return Err(CliError::usage(format!("--tau must be a finite non-negative number, got {}", a.tau)));
    }
    let pairs: Vec<PairEntry> = match (&a.pairs, &a.gt, &a.pred) {
        (Some(index), _, _) => {
            let text = fs::read_to_string(index).map_err(|e| CliError::from(e).context(index))?;
            let base = index.parent().unwrap_or(Path::new("."));
            let list: Vec<PairEntry> = serde_json::from_str(&text).map_err(aseg_core::Error::from)?;
            list.into_iter()
                .map(|p| PairEntry { gt: base.join(p.gt), pred: base.join(p.pred), class_id: p.class_id })
                .collect()
        }
        (None, Some(gt), Some(pred)) => vec![PairEntry { gt: gt.clone(), pred: pred.clone(), class_id: 0 }],
        _ => return Err(CliError::usage("give --gt and --pred, or --pairs")),
    };
    let mut gts = vec![];
    let mut preds = vec![];
    for p in &pairs {
        gts.push(read_mask(&p.gt)?);
        preds.push(read_mask(&p.pred)?);
    }
    let classes: Vec<usize> = pairs.iter().map(|p| p.class_id).collect();
    let ids: Vec<usize> = (0..pairs.len()).collect();
    let report: MetricReport = metrics::evaluate_batch(&preds, &gts, &classes, &ids, a.tau)?;
    let line = format!("DSC {:.3} NSD {:.3}", report.mean_dsc, report.mean_nsd);
    let body = json(&report)?;
    if let Some(out) = &a.out {
        let mut config = BTreeMap::from([("tau".to_string(), a.tau.to_string())]);
        if let Some(s) = a.common.seed {
            config.insert("seed".into(), s.to_string());
        }
        let inputs = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("pair{i}"), format!("{} {}", p.gt.display(), p.pred.display())))
            .collect();
        let mut manifest = RunManifest::new("score", None, config, inputs, out);
        manifest.write(out)?;
        write_text(&out.join("score.json"), &body)?;
        manifest.finish(out)?;
    }
    if a.json || a.pairs.is_some() {
        println!("{body}");
    } else {
        println!("{line}");
    }
    Ok(())
}
