use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::accuracy_from_features;
use super::{
    extract_features, mix, train_task, AuditedData, GrowingClassifier, Method, Prompter, TaskData,
    TaskLog, TrainConfig, WarmStart,
};
use crate::data::{Dataset, TaskStream};
use crate::error::{Error, Result};
use crate::flops::flops_forward;
use crate::metrics::{avg_accuracy, forgetting, EvalMatrix};
use crate::prompt::{init_prompts, ppf_fuse, AddPoint, ConcatMode, ConcatPromptSet, PromptPool, PromptSet};
use crate::vit::ViTModel;

const TAG_PROMPT_INIT: u64 = 0x7072_6f6d;

/// Everything a class-incremental run produces.
#[derive(Debug, Clone)]
pub struct CilRun {
    pub method: Method,
    pub matrix: EvalMatrix,
    pub avg_acc: f64,
    pub forgetting: f64,
    pub logs: Vec<TaskLog>,
    /// Prompts used for inference after each task.
    pub snapshots: Vec<Prompter>,
    /// Classifier after each task.
    pub heads: Vec<GrowingClassifier>,
    /// Training-sample indices read during each task.
    pub reads: Vec<BTreeSet<usize>>,
}

impl CilRun {
    pub fn head(&self) -> &GrowingClassifier {
        self.heads.last().expect("a run trains at least one task")
    }
}

fn initial_prompter(model: &ViTModel, method: Method, cfg: &TrainConfig) -> Result<Prompter> {
    let c = model.config();
    let seed = mix(cfg.seed, TAG_PROMPT_INIT, 0);
    Ok(match method {
        Method::Apt | Method::AptNoPpf => Prompter::Additive { set: init_prompts(c), point: AddPoint::KeyValue },
        Method::AptInputLevel => Prompter::Additive { set: init_prompts(c), point: AddPoint::InputLevel },
        Method::VptShallow => Prompter::Concat(ConcatPromptSet::new(c, ConcatMode::Shallow, cfg.vpt_tokens, seed)?),
        Method::VptDeep => Prompter::Concat(ConcatPromptSet::new(c, ConcatMode::Deep, cfg.vpt_tokens, seed)?),
        Method::Pool => Prompter::Pool(PromptPool::new(c, cfg.pool_size, cfg.pool_tokens, cfg.pool_top_k, seed)?),
        Method::LinearProbe => Prompter::None,
    })
}

/// Runs every task of `stream` in order and fills the accuracy matrix.
pub fn run_cil(
    model: &ViTModel,
    train: &Dataset,
    test: &Dataset,
    stream: &TaskStream,
    method: Method,
    cfg: &TrainConfig,
) -> Result<CilRun> {
    cfg.validate()?;
    if !model.is_frozen() {
        return Err(Error::Contract("incremental training needs a frozen backbone".into()));
    }
    if train.image_len() != model.config().pixels() || test.image_len() != model.config().pixels() {
        return Err(Error::shape(
            "run_cil",
            &[train.channels, train.height, train.width],
            &[model.config().channels, model.config().image_size, model.config().image_size],
        ));
    }
    let n = stream.n_tasks();
    if n == 0 {
        return Err(Error::Config("task stream is empty".into()));
    }
    let audit = AuditedData::new(train);
    let mut trainable = initial_prompter(model, method, cfg)?;
    let mut head = GrowingClassifier::new(model.config().dim);
    let mut matrix = EvalMatrix::new(n);
    let mut fused_old: Option<PromptSet> = None;
    let mut logs = Vec::with_capacity(n);
    let mut snapshots = Vec::with_capacity(n);
    let mut heads = Vec::with_capacity(n);
    // Features never change when only the head is trained.
    let probe = if trainable.is_none() {
        Some(task_features(model, &trainable, test, &stream.test)?)
    } else {
        None
    };

    for t in 0..n {
        head.extend(&stream.classes[t])?;
        let data = TaskData {
            task: t,
            audit: &audit,
            indices: &stream.train[t],
            classes: &stream.classes[t],
        };
        logs.push(train_task(model, &mut trainable, &mut head, &data, cfg)?);
        trainable.round_to_f32();

        let inference = match (&trainable, method.fuses()) {
            (Prompter::Additive { set, point }, true) => {
                let mut fused = match &fused_old {
                    None => set.clone(),
                    Some(old) => ppf_fuse(old, set, cfg.alpha)?,
                };
                fused.round_to_f32();
                fused_old = Some(fused.clone());
                Prompter::Additive { set: fused, point: *point }
            }
            _ => trainable.clone(),
        };
        if let Prompter::Additive { set, .. } = &mut trainable {
            match cfg.warm_start {
                WarmStart::Fused => {
                    if let Some(f) = &fused_old {
                        *set = f.clone();
                    }
                }
                WarmStart::Fresh => *set = init_prompts(model.config()),
                WarmStart::Trained => {}
            }
        }

        let computed;
        let per_task: &[Vec<Vec<f64>>] = match &probe {
            Some(all) => &all[..=t],
            None => {
                computed = task_features(model, &inference, test, &stream.test[..=t])?;
                &computed
            }
        };
        for (i, feats) in per_task.iter().enumerate() {
            let labels: Vec<usize> = stream.test[i].iter().map(|&j| test.labels[j]).collect();
            matrix.set(t, i, accuracy_from_features(&head, feats, &labels)?)?;
        }
        log::info!("{method} task {t}: row {:?}", (0..=t).map(|i| matrix.get(t, i).unwrap_or(f64::NAN)).collect::<Vec<_>>());
        snapshots.push(inference);
        heads.push(head.clone());
    }

    Ok(CilRun {
        method,
        avg_acc: avg_accuracy(&matrix, n - 1)?,
        forgetting: forgetting(&matrix, n - 1)?,
        matrix,
        logs,
        snapshots,
        heads,
        reads: audit.log(),
    })
}

/// Test features grouped by task.
fn task_features(
    model: &ViTModel,
    prompter: &Prompter,
    test: &Dataset,
    tasks: &[Vec<usize>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let images: Vec<&[f64]> = tasks.iter().flatten().map(|&i| test.image(i)).collect();
    let mut feats = extract_features(model, prompter, &images)?.into_iter();
    Ok(tasks.iter().map(|idx| feats.by_ref().take(idx.len()).collect()).collect())
}

/// Class id predicted for one image over every seen column.
pub fn predict(model: &ViTModel, prompter: &Prompter, head: &GrowingClassifier, image: &[f64]) -> Result<usize> {
    let f = extract_features(model, prompter, &[image])?;
    Ok(head.column_classes()[head.predict_column(&f[0])?])
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub alpha: f64,
    pub avg_acc: f64,
    pub forgetting: f64,
    pub gmacs: f64,
    pub flops_ratio: f64,
    pub trainable_prompt_params: usize,
    pub config: serde_json::Value,
}

impl RunSummary {
    pub fn new(run: &CilRun, model: &ViTModel, cfg: &TrainConfig, config: serde_json::Value) -> Result<Self> {
        let flops = flops_forward(model.config(), &run.method.cost_spec(cfg))?;
        Ok(Self {
            method: run.method.name().to_string(),
            seed: cfg.seed,
            alpha: cfg.alpha,
            avg_acc: run.avg_acc,
            forgetting: run.forgetting,
            gmacs: flops.gmacs(),
            flops_ratio: flops.ratio_to_plain,
            trainable_prompt_params: run.snapshots.last().map_or(0, Prompter::param_count),
            config,
        })
    }
}

/// Writes `eval_matrix.csv`, `summary.json` and `prompts_task{t}.aptw`.
pub fn write_run_dir(dir: &Path, run: &CilRun, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("eval_matrix.csv"), run.matrix.to_csv())?;
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    for (t, p) in run.snapshots.iter().enumerate() {
        p.save(&dir.join(format!("prompts_task{t}.aptw")))?;
    }
    Ok(())
}
