use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pointdet::baseline::{self, BaselineModel};
use pointdet::checkpoint;
use pointdet::config::{ModelKind, RunConfig};
use pointdet::data::{self, CocoDoc, Dataset, CLASS_NAMES};
use pointdet::error::{Error, Result};
use pointdet::eval::{self, Detection, DetectionExport};
use pointdet::gradcheck;
use pointdet::infer::{self, InferConfig};
use pointdet::model::Model;
use pointdet::study;
use pointdet::train::train;
use pointdet::viz;

#[derive(Parser)]
#[command(
    name = "pointdet",
    version,
    about = "Point-set object detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file: one `key = value` per line, `#` comments.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override every stage seed (data, model, train, gradcheck, study).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (default depends on the command).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite an existing dataset directory.
    #[arg(long)]
    force: bool,
    /// Individual key override, e.g. --set train.batch_size=8. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset to disk and print its class histogram.
    #[command(name = "generate-data")]
    GenerateData {
        /// Scene count; shorthand for --set data.num_scenes=N.
        #[arg(long, value_name = "N")]
        scenes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector; writes model.ckpt, metrics.csv, and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset; prints the AP table.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Draw detections over each scene: initial points hollow, refined
    /// points filled, pseudo box outlined.
    Visualize {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Proposal-sensitivity study: pooled-feature regression versus
    /// point-set localization under jittered hypotheses.
    #[command(name = "appendix-a1")]
    AppendixA1 {
        #[command(flatten)]
        common: Common,
    },
}

/// Defaults, then config file, then --set overrides, then --seed.
fn resolve(common: &Common, default_out: &str) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        cfg.set_assignment(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    Ok((cfg, out))
}

/// Every run logs the configuration it resolved to; feeding the file back
/// through --config reproduces the run.
fn log_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.echo())?;
    Ok(())
}

/// A trained detector of either kind, reconstructed from the architecture
/// keys embedded in its checkpoint.
enum AnyModel {
    Points(Model),
    Baseline(BaselineModel),
}

impl AnyModel {
    fn load(ckpt: &Path) -> Result<Self> {
        let (echo, _) = checkpoint::load(ckpt)?;
        let mut stored = RunConfig::default();
        stored.apply_text(&echo, &format!("{} config", ckpt.display()))?;
        Ok(match stored.kind {
            ModelKind::Points => {
                let mut m = Model::init(stored.model.clone(), stored.model_seed)?;
                checkpoint::load_into(ckpt, &mut m.store)?;
                AnyModel::Points(m)
            }
            ModelKind::Baseline => {
                let mut m = BaselineModel::init(stored.model.clone(), stored.model_seed)?;
                checkpoint::load_into(ckpt, &mut m.store)?;
                AnyModel::Baseline(m)
            }
        })
    }

    fn infer(
        &self,
        image: &ndarray::Array3<f64>,
        image_id: u64,
        cfg: &InferConfig,
    ) -> Result<Vec<Detection>> {
        match self {
            AnyModel::Points(m) => infer::infer(m, image, image_id, cfg),
            AnyModel::Baseline(m) => baseline::infer(m, image, image_id, cfg),
        }
    }
}

fn cmd_generate_data(scenes: Option<usize>, common: &Common) -> Result<()> {
    let (mut cfg, out) = resolve(common, "dataset")?;
    if let Some(n) = scenes {
        cfg.set("data.num_scenes", &n.to_string())?;
        cfg.validate()?;
    }
    if out.exists() {
        if !common.force {
            return Err(Error::Config(format!(
                "output directory {} exists (pass --force to overwrite)",
                out.display()
            )));
        }
        std::fs::remove_dir_all(&out)?;
    }
    data::generate(&out, &cfg.data)?;
    log_config(&out, &cfg)?;

    let doc = CocoDoc::load(&out.join("annotations.json"))?;
    let mut hist = [0usize; data::NUM_CLASSES];
    for a in &doc.annotations {
        hist[a.category_id as usize - 1] += 1;
    }
    println!(
        "wrote {} scenes, {} annotations to {}",
        doc.images.len(),
        doc.annotations.len(),
        out.display()
    );
    for (name, count) in CLASS_NAMES.iter().zip(hist) {
        println!("  {name:<10} {count}");
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let (cfg, out) = resolve(common, "run")?;
    let dataset = Dataset::load(cfg.dataset_path()?)?;
    log_config(&out, &cfg)?;
    let echo = cfg.echo();
    let start = Instant::now();
    let output = match cfg.kind {
        ModelKind::Points => {
            let mut m = Model::init(cfg.model.clone(), cfg.model_seed)?;
            train(&mut m, &dataset, &cfg.train, &cfg.loss, &out, &echo)?
        }
        ModelKind::Baseline => {
            let mut m = BaselineModel::init(cfg.model.clone(), cfg.model_seed)?;
            train(&mut m, &dataset, &cfg.train, &cfg.loss, &out, &echo)?
        }
    };
    let l = &output.final_loss;
    println!(
        "trained {} model for {} iterations in {:.1}s",
        cfg.kind.name(),
        cfg.train.iterations,
        start.elapsed().as_secs_f64()
    );
    println!(
        "final loss {:.4} (cls {:.4}, loc1 {:.4}, loc2 {:.4})",
        l.total, l.cls, l.loc_stage1, l.loc_stage2
    );
    println!("checkpoint: {}", output.checkpoint_path.display());
    println!("metrics:    {}", output.metrics_path.display());
    Ok(())
}

fn cmd_eval(common: &Common) -> Result<()> {
    let (cfg, out) = resolve(common, "eval")?;
    let ds_dir = cfg.dataset_path()?;
    let model = AnyModel::load(cfg.checkpoint_path()?)?;
    let dataset = Dataset::load(ds_dir)?;
    log_config(&out, &cfg)?;

    let start = Instant::now();
    let mut dets = Vec::new();
    for scene in &dataset.scenes {
        dets.extend(model.infer(&scene.image, scene.image_id, &cfg.infer)?);
    }
    eval::save_detections(&out.join("detections.json"), &dets)?;
    let exports: Vec<_> = dets.iter().map(DetectionExport::from_detection).collect();
    let doc = CocoDoc::load(&ds_dir.join("annotations.json"))?;
    let result = eval::evaluate(&exports, &doc)?;
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&result)?)?;

    println!(
        "{} detections over {} scenes in {:.1}s",
        dets.len(),
        dataset.scenes.len(),
        start.elapsed().as_secs_f64()
    );
    println!("AP {:.3}  AP50 {:.3}  AP75 {:.3}", result.ap, result.ap50, result.ap75);
    for c in &result.per_class {
        println!("  {:<10} AP {:.3}", c.name, c.ap);
    }
    Ok(())
}

fn cmd_visualize(common: &Common) -> Result<()> {
    let (cfg, out) = resolve(common, "viz")?;
    let ds_dir = cfg.dataset_path()?;
    let model = AnyModel::load(cfg.checkpoint_path()?)?;
    let dataset = Dataset::load(ds_dir)?;
    log_config(&out, &cfg)?;

    let mut total = 0usize;
    for scene in &dataset.scenes {
        let dets = model.infer(&scene.image, scene.image_id, &cfg.infer)?;
        let mut img = image::open(ds_dir.join(&scene.file_name))
            .map_err(|e| Error::Dataset(format!("{}: {e}", scene.file_name)))?
            .to_rgb8();
        viz::draw_detections(&mut img, &dets);
        img.save(out.join(&scene.file_name))?;
        total += dets.len();
    }
    println!(
        "drew {} detections over {} scenes into {}",
        total,
        dataset.scenes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let (cfg, _) = resolve(common, "run")?;
    let results = gradcheck::run_all(cfg.gradcheck_instances, cfg.gradcheck_seed);
    let mut failed = 0;
    for r in &results {
        println!("{}", r.line());
        if !r.pass() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Check(format!("{failed} gradient suites failed")));
    }
    println!("all {} gradient suites passed", results.len());
    Ok(())
}

fn cmd_appendix_a1(common: &Common) -> Result<()> {
    let (cfg, out) = resolve(common, "a1")?;
    log_config(&out, &cfg)?;
    let report = study::run(cfg.study_seed, &out)?;
    println!("{}", report.summary());
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::GenerateData { scenes, common } => cmd_generate_data(*scenes, common),
        Cmd::Train { common } => cmd_train(common),
        Cmd::Eval { common } => cmd_eval(common),
        Cmd::Visualize { common } => cmd_visualize(common),
        Cmd::Gradcheck { common } => cmd_gradcheck(common),
        Cmd::AppendixA1 { common } => cmd_appendix_a1(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
