//! `aptlab`: data generation, backbone pretraining, incremental runs, cost
//! tables and attention heatmaps.
//!
//! Failures print one line `error E_TAG: message` to stderr and exit with
//! status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apt_core::config::RunConfig;
use apt_core::data::{generate_checked, read_dataset, split_stream, write_dataset, Dataset, Split};
use apt_core::flops::{flops_csv, MethodKind, MethodSpec};
use apt_core::harness::{pretrain_backbone, run_cil, write_run_dir, RunSummary};
use apt_core::heatmap::{cls_attention, to_csv, to_pgm};
use apt_core::prompt::PromptSet;
use apt_core::vit::{ViTConfig, ViTModel};
use apt_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const PRETRAIN_TRAIN: &str = "pretrain_train.aptd";
const PRETRAIN_TEST: &str = "pretrain_test.aptd";
const TRAIN: &str = "train.aptd";
const TEST: &str = "test.aptd";
const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "aptlab", version, about = "Additive prompt tuning lab")]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, visible_alias = "spec")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the pretraining and incremental datasets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze a backbone.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a class-incremental stream on a frozen backbone.
    TrainCil {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic cost table as CSV.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use ViT-B/16 geometry instead of the configured one.
        #[arg(long)]
        vit_b16: bool,
        /// Comma-separated: plain, apt, vpt-shallow, vpt-deep, pool.
        #[arg(long, value_delimiter = ',', default_value = "plain,apt,vpt-shallow,vpt-deep,pool")]
        methods: Vec<String>,
    },
    /// CLS attention heatmap of one test image.
    Heatmap {
        #[arg(long)]
        weights: PathBuf,
        /// Additive prompt snapshot; omitted means the plain backbone.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Dataset file, or a gen-data directory (its test split).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        image_index: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Output prefix; writes `<out>.pgm` and `<out>.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error {}: {}", e.tag(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, out } => gen_data(&cfg.resolve()?, &out),
        Command::Pretrain { cfg, data, out, epochs, lr, seed } => {
            let mut rc = cfg.resolve()?;
            if let Some(v) = epochs {
                rc.pretrain_epochs = v;
            }
            if let Some(v) = lr {
                rc.pretrain_lr = v;
            }
            if let Some(v) = seed {
                rc.pretrain_seed = v;
            }
            pretrain(&rc, &data, &out)
        }
        Command::TrainCil { cfg, weights, data, method, tasks, alpha, seed, epochs, out } => {
            let mut rc = cfg.resolve()?;
            if let Some(m) = method {
                rc.method = m.parse()?;
            }
            if let Some(v) = tasks {
                rc.tasks = v;
            }
            if let Some(v) = alpha {
                rc.alpha = v;
            }
            if let Some(v) = seed {
                rc.seed = v;
            }
            if let Some(v) = epochs {
                rc.epochs = v;
            }
            train_cil(rc, &weights, &data, &out)
        }
        Command::Flops { cfg, vit_b16, methods } => {
            let rc = cfg.resolve()?;
            let geometry = if vit_b16 { ViTConfig::vit_b16() } else { rc.vit() };
            let specs = methods
                .iter()
                .map(|m| {
                    let kind: MethodKind = m.trim().parse()?;
                    Ok(MethodSpec::default_for(kind))
                })
                .collect::<Result<Vec<_>>>()?;
            print!("{}", flops_csv(&geometry, &specs)?);
            Ok(())
        }
        Command::Heatmap { weights, prompts, data, image_index, layer, out } => {
            heatmap(&weights, prompts.as_deref(), &data, image_index, layer, &out)
        }
    }
}

fn gen_data(rc: &RunConfig, out: &Path) -> Result<()> {
    rc.validate()?;
    fs::create_dir_all(out)?;
    let (pre, cil) = (rc.pretrain_spec(), rc.cil_spec());
    write_dataset(&generate_checked(&pre, Split::Train)?, &out.join(PRETRAIN_TRAIN))?;
    write_dataset(&generate_checked(&pre, Split::Test)?, &out.join(PRETRAIN_TEST))?;
    write_dataset(&generate_checked(&cil, Split::Train)?, &out.join(TRAIN))?;
    write_dataset(&generate_checked(&cil, Split::Test)?, &out.join(TEST))?;
    let manifest = json!({
        "pretrain": { "class_offset": pre.class_offset, "n_classes": pre.n_classes },
        "incremental": { "class_offset": cil.class_offset, "n_classes": cil.n_classes },
        "config": rc.to_json(),
    });
    write_json(&out.join(MANIFEST), &manifest)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Global class ids of the pretraining and incremental universes.
fn class_ranges(data: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = fs::read_to_string(data.join(MANIFEST))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let range = |part: &str| -> Result<Vec<usize>> {
        let field = |k: &str| {
            v[part][k]
                .as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Format(format!("manifest lacks {part}.{k}")))
        };
        let (o, n) = (field("class_offset")?, field("n_classes")?);
        Ok((o..o + n).collect())
    };
    Ok((range("pretrain")?, range("incremental")?))
}

fn pretrain(rc: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    rc.vit().validate()?;
    let (pre_ids, cil_ids) = class_ranges(data)?;
    let train = read_dataset(&data.join(PRETRAIN_TRAIN))?;
    let test = read_dataset(&data.join(PRETRAIN_TEST))?;
    let (model, report) = pretrain_backbone(rc.vit(), &train, &test, &pre_ids, &cil_ids, &rc.pretrain())?;
    model.save(out)?;
    println!("pretrain_accuracy {:.4}", report.test_accuracy);
    Ok(())
}

fn train_cil(mut rc: RunConfig, weights: &Path, data: &Path, out: &Path) -> Result<()> {
    rc.validate()?;
    let model = ViTModel::load(weights)?;
    let g = model.config();
    (rc.image_size, rc.channels, rc.patch_size) = (g.image_size, g.channels, g.patch_size);
    (rc.depth, rc.dim, rc.heads, rc.mlp_ratio) = (g.depth, g.dim, g.heads, g.mlp_ratio);
    let train = read_dataset(&data.join(TRAIN))?;
    let test = read_dataset(&data.join(TEST))?;
    let stream = split_stream(&train, &test, rc.tasks, rc.seed)?;
    let run = run_cil(&model, &train, &test, &stream, rc.method, &rc.train())?;
    let summary = RunSummary::new(&run, &model, &rc.train(), rc.to_json())?;
    write_run_dir(out, &run, &summary)?;
    println!("method {} avg_acc {:.4} forgetting {:.4}", rc.method, run.avg_acc, run.forgetting);
    Ok(())
}

fn heatmap(weights: &Path, prompts: Option<&Path>, data: &Path, index: usize, layer: usize, out: &Path) -> Result<()> {
    let model = ViTModel::load(weights)?;
    let prompts = prompts.map(PromptSet::load).transpose()?;
    let ds: Dataset = if data.is_dir() {
        read_dataset(&data.join(TEST))?
    } else {
        read_dataset(data)?
    };
    if index >= ds.len() {
        return Err(Error::Config(format!("image index {index} outside 0..{}", ds.len())));
    }
    let cells = cls_attention(&model, prompts.as_ref(), ds.image(index), layer)?;
    let side = model.config().grid();
    fs::write(with_suffix(out, "pgm"), to_pgm(&cells, side)?)?;
    fs::write(with_suffix(out, "csv"), to_csv(&cells, side))?;
    println!("cls_attention_mass {:.6}", cells.iter().sum::<f64>());
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
