use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kappa_sphere::calibration::{reliability_svg, BinningStrategy};
use kappa_sphere::io::model::MODEL_SCHEMA_VERSION;
use kappa_sphere::io::scene::{load_features, load_raw, SCENE_FILE};
use kappa_sphere::io::{self, load_bank_dir, load_scene, stage_scene, ModelKind, ModelState, Report, RunConfig, Staged};
use kappa_sphere::latency::{measure_latency, LatencyReport};
use kappa_sphere::pipeline::{
    evaluate_matches, evaluate_queries, fit_joint, fit_post, predict, reencode, EvalInputs, HeadOutput,
    MatchEvaluation, MethodEntry, MethodOutcome, QueryEvaluation,
};
use kappa_sphere::synth::{generate_scene, Split};
use kappa_sphere::trainer::{history_csv, HistoryRow, TrainMode};
use kappa_sphere::{FeatureMap, Method};

use crate::{table, Common, EvalArgs};

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().context("--out <dir> is required")
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

/// Replaces the scene section by the generator config stored with the data.
fn adopt_scene(cfg: &mut RunConfig, data: &Path) -> Result<()> {
    if data.join(SCENE_FILE).exists() {
        #[derive(Deserialize)]
        struct SceneHead {
            config: kappa_sphere::SceneConfig,
        }
        let head: SceneHead = serde_json::from_str(
            &std::fs::read_to_string(data.join(SCENE_FILE)).with_context(|| format!("reading {}", data.display()))?,
        )
        .context("parsing scene.json")?;
        cfg.scene = head.config;
    }
    Ok(())
}

pub fn gen(common: &Common) -> Result<()> {
    let out = out_dir(common)?;
    let mut cfg = base_config(common)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    let ds = generate_scene(&cfg.scene)?;
    let mut staged = Staged::new();
    stage_scene(&mut staged, out, &ds)?;
    staged.write_json(out.join("config.json"), &cfg)?;
    staged.commit()?;
    println!(
        "generated {} images ({} train / {} db / {} query), {} aliased class pairs -> {}",
        ds.len(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::Database).len(),
        ds.indices(Split::Query).len(),
        ds.aliased_pairs.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    mode: TrainMode,
    epochs: usize,
    best_epoch: usize,
    phase_two_start: Option<usize>,
    best: Option<HistoryRow>,
}

fn summary(mode: TrainMode, history: &[HistoryRow], best_epoch: usize, phase_two_start: Option<usize>) -> TrainSummary {
    TrainSummary {
        mode,
        epochs: history.last().map(|r| r.epoch).unwrap_or(0),
        best_epoch,
        phase_two_start,
        best: history.iter().rev().find(|r| r.epoch == best_epoch).cloned(),
    }
}

fn train_config(common: &Common, data: &Path) -> Result<RunConfig> {
    let mut cfg = base_config(common)?;
    adopt_scene(&mut cfg, data)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_training(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    model: &ModelState,
    history: &[HistoryRow],
    summary: &TrainSummary,
) -> Result<()> {
    let mut staged = Staged::new();
    staged.write_json(out.join("model.json"), model)?;
    staged.write(out.join("history.csv"), history_csv(history).as_bytes())?;
    staged.write_json(out.join(format!("{command}.json")), &Report::new(command, cfg, cfg.train.seed, summary))?;
    staged.commit()?;
    Ok(())
}

pub fn fit(common: &Common, data: &Path) -> Result<()> {
    let out = out_dir(common)?;
    let mut cfg = train_config(common, data)?;
    if !matches!(cfg.train.mode, TrainMode::PostTraining | TrainMode::GnllVariant) {
        cfg.train.mode = TrainMode::PostTraining;
    }
    cfg.validate()?;
    let ds = load_scene(data)?;
    let fit = fit_post(&ds, &cfg.train)?;
    let o = fit.outcome;
    let model = ModelState {
        schema_version: MODEL_SCHEMA_VERSION,
        kind: ModelKind::Post,
        train: cfg.train.clone(),
        lmcl: None,
        head: o.head,
        encoder: None,
        prototypes: None,
        optimizers: vec![o.optimizer],
        best_epoch: o.best_epoch,
        phase_two_start: None,
    };
    let s = summary(cfg.train.mode, &o.history, o.best_epoch, None);
    write_training(out, "fit", &cfg, &model, &o.history, &s)?;
    println!(
        "fit: {} epochs, best epoch {} (validation ECE@1 {}) -> {}",
        s.epochs,
        s.best_epoch,
        s.best.as_ref().map(|r| format!("{:.4}", r.ece_at_1)).unwrap_or_default(),
        out.display()
    );
    Ok(())
}

pub fn train(common: &Common, data: &Path) -> Result<()> {
    let out = out_dir(common)?;
    let mut cfg = train_config(common, data)?;
    if !matches!(cfg.train.mode, TrainMode::JointTraining | TrainMode::ClassificationOnly) {
        cfg.train.mode = TrainMode::JointTraining;
    }
    cfg.validate()?;
    let ds = load_scene(data)?;
    let fit = fit_joint(&ds, &cfg.train, &cfg.lmcl)?;
    let o = fit.outcome;
    let model = ModelState {
        schema_version: MODEL_SCHEMA_VERSION,
        kind: ModelKind::Joint,
        train: cfg.train.clone(),
        lmcl: Some(cfg.lmcl),
        head: o.head,
        encoder: Some(o.encoder),
        prototypes: Some(o.prototypes),
        optimizers: o.optimizers.to_vec(),
        best_epoch: o.best_epoch,
        phase_two_start: o.phase_two_start,
    };
    let s = summary(cfg.train.mode, &o.history, o.best_epoch, o.phase_two_start);
    write_training(out, "train", &cfg, &model, &o.history, &s)?;
    println!(
        "train: {} epochs, best epoch {}, phase two from {:?} (validation R@1 {}) -> {}",
        s.epochs,
        s.best_epoch,
        s.phase_two_start,
        s.best.as_ref().map(|r| format!("{:.4}", r.recall_at_1)).unwrap_or_default(),
        out.display()
    );
    Ok(())
}

/// Applies `--k`, `--bins`, `--binning` and `--method` to the config.
fn eval_config(common: &Common, args: &EvalArgs) -> Result<(RunConfig, Option<ModelState>)> {
    let mut cfg = base_config(common)?;
    adopt_scene(&mut cfg, &args.data)?;
    if let Some(k) = &args.k {
        cfg.ks = k.clone();
    }
    if let Some(b) = args.bins {
        cfg.binning.num_bins = b;
    }
    if let Some(b) = &args.binning {
        cfg.binning.strategy = BinningStrategy::parse(b)?;
    }
    if let Some(ms) = &args.method {
        cfg.methods = ms.iter().map(|m| Method::parse(m)).collect::<kappa_sphere::Result<_>>()?;
    }
    let model = match &args.model {
        Some(p) => {
            let m: ModelState = io::read_json(p)?;
            m.validate()?;
            cfg.train = m.train.clone();
            if let Some(l) = m.lmcl {
                cfg.lmcl = l;
            }
            Some(m)
        }
        None => None,
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok((cfg, model))
}

struct Loaded {
    queries: kappa_sphere::DescriptorBank,
    database: kappa_sphere::DescriptorBank,
    ground_truth: kappa_sphere::GroundTruth,
    query_values: Option<Vec<f64>>,
    database_values: Option<Vec<f64>>,
    output: HeadOutput,
}

fn load_for_eval(data: &Path, model: Option<&ModelState>) -> Result<Loaded> {
    let (mut bank, manifest) = load_bank_dir(data)?;
    let q_idx = manifest.indices(Split::Query);
    let db_idx = manifest.indices(Split::Database);
    if q_idx.is_empty() || db_idx.is_empty() {
        bail!("{} needs both query and db rows", data.display());
    }
    let mut values = manifest.kappas.clone();
    let mut output = HeadOutput::Kappa;
    if let Some(m) = model {
        if let Some(enc) = &m.encoder {
            let raw = load_raw(data)?;
            bank = reencode(&bank, enc, &raw.values)?;
        }
        values = if m.head_trained() {
            let features = load_features(data)?;
            let refs: Vec<&FeatureMap> = features.iter().collect();
            Some(predict(&m.head, &refs)?)
        } else {
            None
        };
        if m.predicts_variance() {
            output = HeadOutput::Variance;
        }
    }
    let pick = |v: &Option<Vec<f64>>, idx: &[usize]| v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect());
    Ok(Loaded {
        queries: bank.subset(&q_idx),
        database: bank.subset(&db_idx),
        ground_truth: manifest.ground_truth(),
        query_values: pick(&values, &q_idx),
        database_values: pick(&values, &db_idx),
        output,
    })
}

impl Loaded {
    fn inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            queries: &self.queries,
            database: &self.database,
            ground_truth: &self.ground_truth,
            query_kappas: self.query_values.as_deref(),
            database_kappas: self.database_values.as_deref(),
            output: self.output,
        }
    }
}

fn stage_calibration(staged: &mut Staged, out: &Path, methods: &[MethodEntry], level: &str, svg: bool) -> Result<()> {
    for entry in methods {
        if let MethodOutcome::Ok { reports } = &entry.outcome {
            for r in reports {
                let stem = out.join("calibration").join(format!("{level}_{}_k{}", entry.method, r.k));
                staged.write(stem.with_extension("csv"), r.to_csv().as_bytes())?;
                if svg {
                    staged.write(stem.with_extension("svg"), reliability_svg(r).as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let out = out_dir(common)?;
    let (cfg, model) = eval_config(common, args)?;
    let loaded = load_for_eval(&args.data, model.as_ref())?;
    let result = evaluate_queries(&loaded.inputs(), &cfg.eval())?;
    let mut staged = Staged::new();
    staged.write_json(out.join("report.json"), &Report::new("eval", &cfg, cfg.scene.seed, &result))?;
    stage_calibration(&mut staged, out, &result.methods, "query", args.svg)?;
    staged.commit()?;
    print!("{}", table::query_table(&result));
    Ok(())
}

pub fn match_eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let out = out_dir(common)?;
    let (cfg, model) = eval_config(common, args)?;
    let loaded = load_for_eval(&args.data, model.as_ref())?;
    let result = evaluate_matches(&loaded.inputs(), &cfg.eval())?;
    let mut staged = Staged::new();
    staged.write_json(
        out.join("match_report.json"),
        &Report::new("match-eval", &cfg, cfg.scene.seed, &result),
    )?;
    stage_calibration(&mut staged, out, &result.methods, "match", args.svg)?;
    staged.commit()?;
    print!("{}", table::match_table(&result));
    Ok(())
}

pub fn report(common: &Common, input: &Path) -> Result<()> {
    #[derive(Deserialize)]
    struct Peek {
        command: String,
    }
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let name = input.display().to_string();
    let peek: Peek = io::parse_json(&text, &name)?;
    let rendered = match peek.command.as_str() {
        "eval" => table::query_table(&io::parse_json::<Report<QueryEvaluation>>(&text, &name)?.result),
        "match-eval" => table::match_table(&io::parse_json::<Report<MatchEvaluation>>(&text, &name)?.result),
        "bench" => table::bench_table(&io::parse_json::<Report<LatencyReport>>(&text, &name)?.result),
        other => bail!("{name}: no table layout for `{other}` reports"),
    };
    if let Some(out) = &common.out {
        let path: PathBuf = out.join("report.txt");
        io::write_atomic(&path, rendered.as_bytes())?;
    }
    print!("{rendered}");
    Ok(())
}

pub fn bench(common: &Common) -> Result<()> {
    let mut cfg = base_config(common)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    let result = measure_latency(&cfg.bench)?;
    if let Some(out) = &common.out {
        let mut staged = Staged::new();
        staged.write_json(out.join("bench.json"), &Report::new("bench", &cfg, cfg.bench.seed, &result))?;
        staged.commit()?;
    }
    print!("{}", table::bench_table(&result));
    Ok(())
}
