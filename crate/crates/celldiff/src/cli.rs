//! Command-line surface: `synth`, `train`, `sample`, `eval`, `baseline`, `report`.
//!
//! Settings come from the defaults, then the `--config` file, then flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use celldiff_core::data::{generate_synthetic, CellFilter, CellMeta, Dataset, Split};
use celldiff_core::denoiser::{Condition, Denoiser, DenoiserParams};
use celldiff_core::diffusion::NoiseSchedule;
use celldiff_core::eval::{evaluate, EvalConfig, LinearBaseline, MeanBaseline, MeanLevel, Metric, MetricReport};
use celldiff_core::rng::derive_seed;
use celldiff_core::train::{transfer, LossWeights, StepLog, TrainMode, Trainer, Transfer};
use celldiff_core::Matrix;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{self, Checkpoint, CheckpointHeader};
use crate::pipeline::{self, BatchSource, PredictConfig, ValidationSet};
use crate::report::{self, ReportDoc};

#[derive(Debug, Parser)]
#[command(name = "celldiff", version, about = "Diffusion over cell populations: synthesize, train, sample, evaluate")]
pub struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic perturbation dataset.
    Synth(SynthArgs),
    /// Train a model (from scratch, marginal pretraining, or finetuning).
    Train(TrainArgs),
    /// Generate cells for conditions of a dataset.
    Sample(SampleArgs),
    /// Score prediction files against a truth dataset.
    Eval(EvalArgs),
    /// Write mean or linear baseline predictions.
    Baseline(BaselineArgs),
    /// Summarize report files into markdown and CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output prefix inside --out.
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long)]
    pub genes: Option<usize>,
    #[arg(long)]
    pub contexts: Option<usize>,
    #[arg(long)]
    pub perturbations: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub cells_per_replicate: Option<usize>,
    #[arg(long)]
    pub control_cells_per_replicate: Option<usize>,
    #[arg(long)]
    pub sigma_latent: Option<f64>,
    #[arg(long)]
    pub effect_rank: Option<usize>,
    #[arg(long)]
    pub effect_scale: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub zero_inflation: Option<f64>,
    /// Fraction of perturbations held out of the test contexts' training data.
    #[arg(long)]
    pub holdout_frac: Option<f64>,
    #[arg(long)]
    pub dose_bins: Option<usize>,
    /// Write gzip-compressed files.
    #[arg(long)]
    pub gzip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Scratch,
    Pretrain,
    Finetune,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset prefix.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "scratch")]
    pub mode: Mode,
    /// Pretrained checkpoint (finetune only).
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Re-initialize the gene-facing projections when finetuning.
    #[arg(long)]
    pub reinit_projections: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Cells per batch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub energy_weight: Option<f64>,
    #[arg(long)]
    pub mse_weight: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Output name; defaults to the mode.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset prefix supplying controls and the condition list.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated `context:perturbation[@dose]` labels; default: every condition in --split.
    #[arg(long)]
    pub conditions: Option<String>,
    /// Cells per condition; default: as many as the truth has.
    #[arg(long)]
    pub cells: Option<usize>,
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub no_self_condition: bool,
    /// Generate with the perturbation replaced by the null token.
    #[arg(long)]
    pub zero_shot: bool,
    #[arg(long, default_value = "pred")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Truth dataset prefix.
    #[arg(long)]
    pub truth: PathBuf,
    /// Prediction dataset prefixes.
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Mean,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Perturbation,
    #[value(alias = "cell-type")]
    Context,
    Batch,
    Overall,
}

impl LevelArg {
    fn core(self) -> MeanLevel {
        match self {
            LevelArg::Perturbation => MeanLevel::Perturbation,
            LevelArg::Context => MeanLevel::Context,
            LevelArg::Batch => MeanLevel::Batch,
            LevelArg::Overall => MeanLevel::Overall,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            LevelArg::Perturbation => "perturbation",
            LevelArg::Context => "context",
            LevelArg::Batch => "batch",
            LevelArg::Overall => "overall",
        }
    }
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    #[arg(long, value_enum, default_value = "perturbation")]
    pub level: LevelArg,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `*.report.json` files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = "summary")]
    pub name: String,
}

/// Parses arguments from the process and runs the command.
pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Precondition("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Precondition(format!("thread pool: {e}")))?;
    }
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Ctx { cfg, out: cli.out, force: cli.force };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Sample(a) => sample(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Baseline(a) => baseline(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }
}

fn parse_split(s: &str) -> CliResult<Split> {
    Split::parse(s).ok_or_else(|| CliError::Precondition(format!("unknown split {s:?} (expected train, valid, test or pred)")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Split summary: cells, perturbations, contexts and batches (replicates) per split.
pub fn split_summary(ds: &Dataset) -> String {
    let ctrl = ds.control_id();
    let mut out = String::from("split\tcells\tperturbations\tcontexts\tbatches\n");
    for split in [Split::Train, Split::Valid, Split::Test, Split::Pred] {
        let cells: Vec<&CellMeta> = ds.meta().iter().filter(|m| m.split == split).collect();
        if cells.is_empty() {
            continue;
        }
        let perts: BTreeSet<usize> = cells.iter().map(|m| m.perturbation).filter(|p| Some(*p) != ctrl).collect();
        let contexts: BTreeSet<usize> = cells.iter().map(|m| m.context).collect();
        let batches: BTreeSet<usize> = cells.iter().map(|m| m.replicate).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            split.as_str(),
            cells.len(),
            perts.len(),
            contexts.len(),
            batches.len()
        );
    }
    out
}

fn synth(ctx: &Ctx, a: SynthArgs) -> CliResult<()> {
    let mut s = ctx.cfg.synth.clone();
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => { $(if let Some(v) = a.$arg { s.$field = v; })* };
    }
    set!(
        genes <- genes,
        contexts <- contexts,
        perturbations <- perturbations,
        replicates <- replicates,
        cells_per_replicate <- cells_per_replicate,
        control_cells_per_replicate <- control_cells_per_replicate,
        sigma_latent <- sigma_latent,
        effect_rank <- effect_rank,
        effect_scale <- effect_scale,
        noise_scale <- noise_scale,
        zero_inflation <- zero_inflation,
        holdout_fraction <- holdout_frac,
        dose_bins <- dose_bins
    );
    let core = s.to_core(ctx.cfg.seed);
    core.validate()?;
    core.holdout_count()?;
    let prefix = ctx.path(&a.name);
    let (m, t) = io::dataset_paths(&prefix, a.gzip);
    io::check_writable(&[m, t], ctx.force)?;
    let ds = generate_synthetic(&core)?;
    let (m, t) = io::save_dataset(&prefix, &ds, a.gzip)?;
    print!("{}", split_summary(&ds));
    eprintln!("wrote {} and {}", m.display(), t.display());
    Ok(())
}

/// One line of `<name>.validation.tsv`.
struct ValidationRow {
    step: usize,
    loss: f64,
    score: f64,
    means: Option<BTreeMap<Metric, Option<f64>>>,
}

fn validation_tsv(rows: &[ValidationRow]) -> String {
    let mut out = String::from("step\tval_loss\tscore");
    for m in Metric::ALL {
        out.push('\t');
        out.push_str(m.name());
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{:.6}\t{:.6}", r.step, r.loss, r.score);
        for m in Metric::ALL {
            let v = r.means.as_ref().and_then(|mm| mm[&m]);
            let _ = write!(out, "\t{}", v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NaN".into()));
        }
        out.push('\n');
    }
    out
}

fn train_tsv(logs: &[StepLog]) -> String {
    let mut out = String::from("step\tlr\tloss\tenergy\tmse\tgrad_norm\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            l.step, l.lr, l.loss.total, l.loss.energy, l.loss.mse, l.grad_norm
        );
    }
    out
}

fn shape_check(what: &str, flag: Option<usize>, ckpt: usize) -> CliResult<()> {
    match flag {
        Some(v) if v != ckpt => Err(CliError::Precondition(format!(
            "--{what} {v} does not match the checkpoint ({what} = {ckpt})"
        ))),
        _ => Ok(()),
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let ds = io::load_dataset(&a.data)?;
    let mut t = ctx.cfg.train.clone();
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.lr {
        t.peak_lr = v;
    }
    if let Some(v) = a.warmup {
        t.warmup_steps = v;
    }
    if let Some(v) = a.energy_weight {
        t.energy_weight = v;
    }
    if let Some(v) = a.mse_weight {
        t.mse_weight = v;
    }
    if let Some(v) = a.eval_interval {
        t.eval_interval = v;
    }
    if t.batch == 0 {
        return Err(CliError::Precondition("batch size must be positive".into()));
    }
    let seed = ctx.cfg.seed;
    let core_mode = if a.mode == Mode::Pretrain { TrainMode::MarginalPretrain } else { TrainMode::Perturbation };
    let tc = t.to_core(core_mode, seed);
    let schedule = NoiseSchedule::default();

    let from = match (a.mode, &a.from) {
        (Mode::Finetune, Some(p)) => Some(io::load_checkpoint(p)?),
        (Mode::Finetune, None) => return Err(CliError::Precondition("finetune needs --from <checkpoint>".into())),
        (_, Some(_)) => return Err(CliError::Precondition("--from only applies to --mode finetune".into())),
        (_, None) => None,
    };
    let name = a.name.clone().unwrap_or_else(|| a.mode.as_str().to_string());
    let ckpt_path = ctx.path(&format!("{name}.ckpt"));
    let train_log = ctx.path(&format!("{name}.train.tsv"));
    let val_log = ctx.path(&format!("{name}.validation.tsv"));
    io::check_writable(&[ckpt_path.clone(), train_log.clone(), val_log.clone()], ctx.force)?;
    ctx.ensure_out()?;

    let mut trainer = match &from {
        Some(ck) => {
            ck.check_compatible(&ds)?;
            let model = ck.model_config();
            shape_check("width", a.width, model.width)?;
            shape_check("blocks", a.blocks, model.blocks)?;
            shape_check("heads", a.heads, model.heads)?;
            let pre = DenoiserParams::unflatten(&model, &ck.params)?;
            let strategy = if a.reinit_projections { Transfer::ReinitProjections } else { Transfer::Keep };
            let params = transfer(&pre, &model, strategy, derive_seed(seed, 0))?;
            Trainer::from_params(model, tc, schedule.clone(), &params)?
        }
        None => {
            let m = &ctx.cfg.model;
            let mut model = pipeline::model_config_for(
                &ds,
                a.width.unwrap_or(m.width),
                a.blocks.unwrap_or(m.blocks),
                a.heads.unwrap_or(m.heads),
            );
            model.self_condition = m.self_condition;
            Trainer::new(model, tc, schedule.clone())?
        }
    };

    let marginal = a.mode == Mode::Pretrain;
    let source = if marginal { BatchSource::marginal(&ds, t.batch)? } else { BatchSource::conditional(&ds, t.batch)? };
    let val_set = ValidationSet::new(&ds, Split::Valid, t.batch, 8, marginal, derive_seed(seed, 2), &schedule)?;
    let weights = LossWeights { energy: t.energy_weight, mse: t.mse_weight };
    let score_by_metrics = !marginal && !ds.conditions(Split::Valid).is_empty();
    let predict = PredictConfig {
        batch: t.batch,
        sampler: celldiff_core::diffusion::SamplerConfig {
            steps: t.validation_sampler_steps,
            seed: derive_seed(seed, 3),
            ..Default::default()
        },
        zero_shot: false,
    };
    let eval_cfg = EvalConfig { balance_controls: ctx.cfg.eval.balance_controls, seed };
    let mut rows: Vec<ValidationRow> = Vec::new();
    let mut validate = |step: usize, model: &Denoiser| -> celldiff_core::Result<f64> {
        let loss = val_set.loss(model, weights, &schedule)?;
        if !loss.is_finite() {
            return Err(celldiff_core::Error::NonFinite("validation loss".into()));
        }
        let (score, means) = if score_by_metrics {
            let rep: MetricReport =
                pipeline::validation_report(model, &ds, Split::Valid, &predict, &schedule, &eval_cfg)?;
            let means: BTreeMap<Metric, Option<f64>> = Metric::ALL.iter().map(|m| (*m, rep.mean(*m))).collect();
            (means[&Metric::PdCorr].unwrap_or(f64::NAN), Some(means))
        } else {
            (-loss, None)
        };
        eprintln!("step {step}: val_loss {loss:.4} score {score:.4}");
        rows.push(ValidationRow { step, loss, score, means });
        Ok(score)
    };

    let initial = validate(0, &trainer.ema_model())?;
    let (best_step, best_score, best_params, logs) = if t.steps == 0 {
        (0, initial, trainer.ema_params(), Vec::new())
    } else {
        let summary = trainer.fit(t.steps, |r| source.draw(r), &mut validate)?;
        let score = summary.history.iter().find(|(s, _)| *s == summary.best_step).map(|h| h.1).unwrap_or(f64::NAN);
        (summary.best_step, score, summary.best_params, summary.logs)
    };
    drop(validate);

    let header = CheckpointHeader {
        model: trainer.model.into(),
        step: best_step,
        mode: a.mode.as_str().into(),
        score: best_score.is_finite().then_some(best_score),
        genes: ds.genes.clone(),
        contexts: ds.contexts.clone(),
        perturbations: ds.perturbations.clone(),
        doses: ds.doses.clone(),
        num_parameters: best_params.num_parameters(),
    };
    io::save_checkpoint(&ckpt_path, &Checkpoint { header, params: best_params.flatten() })?;
    write_text(&train_log, &train_tsv(&logs))?;
    write_text(&val_log, &validation_tsv(&rows))?;
    println!("best step {best_step} score {best_score:.6}");
    eprintln!("wrote {}", ckpt_path.display());
    Ok(())
}

/// Resolves `context:perturbation[@dose]`.
pub fn parse_condition(ds: &Dataset, label: &str) -> Option<Condition> {
    let (ctx, rest) = label.split_once(':')?;
    let (pert, dose) = match rest.split_once('@') {
        Some((p, d)) => (p, Some(ds.doses.iter().position(|x| x == d)?)),
        None => (rest, None),
    };
    Some(Condition::new(ds.context_id(ctx)?, ds.perturbation_id(pert)?, dose))
}

fn prediction_dataset(
    ds: &Dataset,
    name: &str,
    parts: Vec<(Vec<CellMeta>, Matrix)>,
) -> CliResult<Dataset> {
    let mut meta = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (m, x) in parts {
        for (i, cm) in m.into_iter().enumerate() {
            rows.push(x.row(i).to_vec());
            meta.push(CellMeta { cell_id: format!("{name}_{}", meta.len()), ..cm });
        }
    }
    let expr = Matrix::from_rows(&rows)?;
    Ok(Dataset::new(ds.genes.clone(), ds.contexts.clone(), ds.perturbations.clone(), ds.doses.clone(), expr, meta)?)
}

fn sample(ctx: &Ctx, a: SampleArgs) -> CliResult<()> {
    let ck = io::load_checkpoint(&a.checkpoint)?;
    let ds = io::load_dataset(&a.data)?;
    ck.check_compatible(&ds)?;
    let split = parse_split(&a.split)?;
    let conds = match &a.conditions {
        Some(list) => {
            let mut found = Vec::new();
            let mut skipped = Vec::new();
            for label in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match parse_condition(&ds, label) {
                    Some(c) if c.perturbation != ds.control_id() => found.push(c),
                    _ => skipped.push(label.to_string()),
                }
            }
            if !skipped.is_empty() {
                eprintln!("skipping unknown conditions: {}", skipped.join(", "));
            }
            if found.is_empty() {
                return Err(CliError::Precondition("no known conditions to sample".into()));
            }
            found
        }
        None => ds.conditions(split),
    };
    if conds.is_empty() {
        return Err(CliError::Precondition(format!("no {} conditions in {}", split.as_str(), a.data.display())));
    }
    let mut s = ctx.cfg.sampler.clone();
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.eta {
        s.eta = v;
    }
    if let Some(v) = a.guidance {
        s.guidance = v;
    }
    if a.no_self_condition {
        s.self_condition = false;
    }
    let prefix = ctx.path(&a.name);
    let (mp, tp) = io::dataset_paths(&prefix, false);
    io::check_writable(&[mp, tp], ctx.force)?;

    let model = Denoiser { config: ck.model_config(), params: DenoiserParams::unflatten(&ck.model_config(), &ck.params)? };
    let cfg = s.to_predict(ctx.cfg.seed, a.zero_shot);
    let default_cells = s.batch;
    let count = |c: &Condition| {
        a.cells.unwrap_or_else(|| {
            let n = ds.indices(&CellFilter::condition(c, split)).len();
            if n == 0 { default_cells } else { n }
        })
    };
    let schedule = NoiseSchedule::default();
    let pred = pipeline::predict_conditions(&model, &ds, &conds, count, &cfg, &schedule)?;
    let provenance = if a.zero_shot {
        "zero-shot;perturbation=null".to_string()
    } else {
        format!("model={}", stem(&a.checkpoint))
    };
    let parts = pred
        .into_iter()
        .map(|(c, x)| {
            let meta = (0..x.rows())
                .map(|_| CellMeta {
                    cell_id: String::new(),
                    context: c.context,
                    perturbation: c.perturbation.expect("conditions name a perturbation"),
                    dose: c.dose,
                    replicate: 0,
                    split: Split::Pred,
                    provenance: Some(provenance.clone()),
                })
                .collect();
            (meta, x)
        })
        .collect();
    let out = prediction_dataset(&ds, &a.name, parts)?;
    let (m, t) = io::save_dataset(&prefix, &out, false)?;
    println!("{} cells for {} conditions", out.len(), conds.len());
    eprintln!("wrote {} and {}", m.display(), t.display());
    Ok(())
}

/// Groups cells of a prediction dataset by condition, ignoring controls and split.
fn group_predictions(pred: &Dataset) -> BTreeMap<Condition, Vec<usize>> {
    let ctrl = pred.control_id();
    let mut groups: BTreeMap<Condition, Vec<usize>> = BTreeMap::new();
    for (i, m) in pred.meta().iter().enumerate() {
        if Some(m.perturbation) != ctrl {
            groups.entry(Condition::new(m.context, m.perturbation, m.dose)).or_default().push(i);
        }
    }
    groups
}

fn eval(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let truth_ds = io::load_dataset(&a.truth)?;
    let split = parse_split(&a.split)?;
    let truth = pipeline::truth_sets(&truth_ds, split);
    if truth.is_empty() {
        return Err(CliError::Precondition(format!("no {} conditions in {}", split.as_str(), a.truth.display())));
    }
    let sources: Vec<String> = a.pred.iter().map(|p| stem(p)).collect();
    let unique: BTreeSet<&String> = sources.iter().collect();
    if unique.len() != sources.len() {
        return Err(CliError::Precondition("prediction prefixes must have distinct names".into()));
    }
    let mut targets: Vec<PathBuf> =
        sources.iter().map(|s| ctx.path(&format!("{s}.report.json"))).collect();
    targets.push(ctx.path("aggregate.csv"));
    io::check_writable(&targets, ctx.force)?;
    ctx.ensure_out()?;

    let eval_cfg = EvalConfig { balance_controls: ctx.cfg.eval.balance_controls, seed: ctx.cfg.seed };
    let mut docs = Vec::new();
    for (path, source) in a.pred.iter().zip(&sources) {
        let pred = io::load_dataset(path)?;
        io::vocab_diff("genes", &truth_ds.genes, &pred.genes)?;
        io::vocab_diff("contexts", &truth_ds.contexts, &pred.contexts)?;
        io::vocab_diff("perturbations", &truth_ds.perturbations, &pred.perturbations)?;
        io::vocab_diff("doses", &truth_ds.doses, &pred.doses)?;
        let mut groups = group_predictions(&pred);
        let mut paired_truth = Vec::new();
        let mut paired_pred = Vec::new();
        let mut skipped = Vec::new();
        for (c, x) in &truth {
            match groups.remove(c) {
                Some(idx) => {
                    paired_truth.push((*c, x.clone()));
                    paired_pred.push((*c, pred.expression().select_rows(&idx)));
                }
                None => skipped.push(report::condition_label(&truth_ds, c)),
            }
        }
        if !groups.is_empty() {
            eprintln!("{source}: ignoring {} conditions absent from the truth {} split", groups.len(), split.as_str());
        }
        if !skipped.is_empty() {
            eprintln!("{source}: no predictions for {}", skipped.join(", "));
        }
        if paired_truth.is_empty() {
            return Err(CliError::Precondition(format!("{source}: no prediction matches a truth condition")));
        }
        let inputs = pipeline::eval_inputs(&truth_ds, paired_truth, paired_pred)?;
        let rep = evaluate(&inputs, &eval_cfg)?;
        let doc = ReportDoc::new(source, split.as_str(), &truth_ds, &rep, skipped);
        let path = report::write_report(&ctx.out, &doc, &rep, &truth_ds)?;
        eprintln!("wrote {}", path.display());
        docs.push(doc);
    }
    let csv = report::aggregate_csv(&docs);
    write_text(&ctx.path("aggregate.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn baseline(ctx: &Ctx, a: BaselineArgs) -> CliResult<()> {
    let ds = io::load_dataset(&a.data)?;
    let split = parse_split(&a.split)?;
    let truth = pipeline::truth_sets(&ds, split);
    if truth.is_empty() {
        return Err(CliError::Precondition(format!("no {} conditions in {}", split.as_str(), a.data.display())));
    }
    let name = a.name.clone().unwrap_or_else(|| match a.kind {
        BaselineKind::Mean => format!("mean_{}", a.level.as_str()),
        BaselineKind::Linear => "linear".into(),
    });
    let prefix = ctx.path(&name);
    let (mp, tp) = io::dataset_paths(&prefix, false);
    io::check_writable(&[mp, tp], ctx.force)?;

    let mut parts = Vec::new();
    match a.kind {
        BaselineKind::Mean => {
            let model = MeanBaseline::fit(&ds, a.level.core())?;
            let provenance = format!("baseline=mean;level={}", a.level.as_str());
            for (c, _) in &truth {
                let meta: Vec<CellMeta> = ds
                    .indices(&CellFilter::condition(c, split))
                    .into_iter()
                    .map(|i| CellMeta { split: Split::Pred, provenance: Some(provenance.clone()), ..ds.meta()[i].clone() })
                    .collect();
                let x = model.predict_cells(&meta);
                parts.push((meta, x));
            }
        }
        BaselineKind::Linear => {
            let model = LinearBaseline::fit(&ds, a.ridge.unwrap_or(ctx.cfg.eval.ridge))?;
            for (c, x_true) in &truth {
                let x = model.predict_cells(c, x_true.rows())?;
                let meta = (0..x.rows())
                    .map(|_| CellMeta {
                        cell_id: String::new(),
                        context: c.context,
                        perturbation: c.perturbation.expect("conditions name a perturbation"),
                        dose: c.dose,
                        replicate: 0,
                        split: Split::Pred,
                        provenance: Some("baseline=linear".into()),
                    })
                    .collect();
                parts.push((meta, x));
            }
        }
    }
    let out = prediction_dataset(&ds, &name, parts)?;
    let (m, t) = io::save_dataset(&prefix, &out, false)?;
    println!("{} cells for {} conditions", out.len(), truth.len());
    eprintln!("wrote {} and {}", m.display(), t.display());
    Ok(())
}

fn report_cmd(ctx: &Ctx, a: ReportArgs) -> CliResult<()> {
    let docs = a.reports.iter().map(|p| ReportDoc::load(p)).collect::<CliResult<Vec<_>>>()?;
    let md_path = ctx.path(&format!("{}.md", a.name));
    let csv_path = ctx.path(&format!("{}.csv", a.name));
    io::check_writable(&[md_path.clone(), csv_path.clone()], ctx.force)?;
    ctx.ensure_out()?;
    let (shared, differs) = report::shared_conditions(&docs);
    if differs {
        eprintln!("reports cover different conditions; using the {} shared ones", shared.len());
    }
    let restricted: Vec<ReportDoc> = docs.iter().map(|d| report::restrict(d, &shared)).collect();
    let md = report::render_markdown(&docs);
    write_text(&md_path, &md)?;
    write_text(&csv_path, &report::aggregate_csv(&restricted))?;
    print!("{md}");
    Ok(())
}
