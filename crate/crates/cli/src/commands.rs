use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use elmlab::audit::{
    check_equivalence, check_gradients, CheckRow, EquivalenceOptions, GradientOptions,
};
use elmlab::data::{load_csv_dataset_with, write_csv_dataset, CsvOptions, Dataset};
use elmlab::eval::{dump_features, evaluate_model, rarest_classes_recall};
use elmlab::losses::compute_margin_table;
use elmlab::par::map_slice;
use elmlab::{
    train_run, ClassCounts, EvalSummary, Execution, LossVariant, MarginMode, ModelParams,
    ScaleConvention,
};

use crate::config::{ExperimentConfig, SyntheticSource};
use crate::fmt::{sig7, sig7_list, sig7_opt};

/// Relative output paths are placed under this variable when it is set.
pub const OUTPUT_ROOT_VAR: &str = "ELMLAB_OUTPUT_ROOT";

/// Classes counted as the minority group in summaries.
const RAREST_CLASSES: usize = 2;

/// What the process should report back to the shell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    SuiteFailed,
}

pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Counts file written next to generated data.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    #[serde(flatten)]
    source: &'a SyntheticSource,
    counts: &'a [usize],
}

#[derive(Debug, Deserialize)]
struct ManifestCounts {
    counts: Vec<usize>,
}

pub fn read_manifest_counts(path: &Path) -> anyhow::Result<ClassCounts> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let m: ManifestCounts =
        serde_json::from_str(&text).with_context(|| format!("manifest {}", path.display()))?;
    Ok(ClassCounts::new(m.counts)?)
}

pub fn gen_data(source: &SyntheticSource, out: &Path) -> anyhow::Result<Outcome> {
    let data = source.generate()?;
    let counts = data.train.counts();
    let dir = output_path(out);
    create_dir(&dir)?;
    write_csv_dataset(&data.train, dir.join("train.csv"))?;
    if let Some(test) = &data.test {
        write_csv_dataset(test, dir.join("test.csv"))?;
    }
    write_json(
        &dir.join("counts.json"),
        &Manifest {
            source,
            counts: &counts,
        },
    )?;
    println!("counts: {counts:?}");
    println!("rows: {}", data.train.len());
    println!("wrote {}", dir.display());
    Ok(Outcome::Success)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricStat {
    pub name: String,
    pub values: Vec<Option<f64>>,
    /// Arithmetic mean over seeds where the metric is defined.
    pub mean: Option<f64>,
    /// Sample standard deviation; needs two defined values.
    pub std: Option<f64>,
}

impl MetricStat {
    pub fn new(name: &str, values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len() as f64;
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / n);
        let std = match mean {
            Some(m) if defined.len() >= 2 => {
                Some((defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            }
            _ => None,
        };
        MetricStat {
            name: name.to_string(),
            values,
            mean,
            std,
        }
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    seeds: Vec<u64>,
    evaluated_on: &'static str,
    metrics: Vec<MetricStat>,
}

fn summary_metrics(
    summary: &EvalSummary,
    train_counts: &[usize],
) -> Vec<(&'static str, Option<f64>)> {
    let groups = summary.groups.as_ref();
    vec![
        ("top1", summary.accuracy(1)),
        ("balanced_accuracy", summary.balanced_accuracy),
        ("frequent_recall", groups.and_then(|g| g.frequent)),
        ("rare_recall", groups.and_then(|g| g.rare)),
        (
            "rarest_classes_recall",
            rarest_classes_recall(summary, train_counts, RAREST_CLASSES),
        ),
    ]
}

pub fn train(config_path: &Path, exec: Execution) -> anyhow::Result<Outcome> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let prepared = cfg.prepare(base)?;
    let out = output_path(&cfg.output_dir);

    let train_counts = prepared.train.counts();
    let (eval_data, evaluated_on): (&Dataset, _) = match &prepared.test {
        Some(test) => (test, "test"),
        None => (&prepared.train, "train"),
    };
    // seeds fan out; each run is sequential inside
    let inner = if cfg.seeds.len() > 1 && exec.is_parallel() {
        Execution::Sequential
    } else {
        exec
    };
    let runs = map_slice(exec, &cfg.seeds, |&seed| -> anyhow::Result<_> {
        let mut tc = cfg.train_config(seed);
        tc.execution = inner;
        let (model, report) = train_run(&prepared.train, &tc)?;
        let summary = evaluate_model(&model, eval_data, Some(&train_counts), inner)?;
        Ok((model, report, summary))
    });
    let runs = runs.into_iter().collect::<anyhow::Result<Vec<_>>>()?;

    create_dir(&out)?;
    let mut per_seed = Vec::with_capacity(runs.len());
    for (seed, (model, report, summary)) in cfg.seeds.iter().zip(&runs) {
        let dir = out.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        write_json(&dir.join("report.json"), report)?;
        write_json(&dir.join("eval.json"), summary)?;
        write_json(&dir.join("model.json"), model)?;
        dump_features(model, eval_data, dir.join("features.csv"))?;
        let metrics = summary_metrics(summary, &train_counts);
        println!(
            "seed {seed}: {}",
            metrics
                .iter()
                .map(|(name, v)| format!("{name}={}", sig7_opt(*v)))
                .collect::<Vec<_>>()
                .join(" ")
        );
        per_seed.push(metrics);
    }

    let names: Vec<&str> = per_seed[0].iter().map(|(n, _)| *n).collect();
    let metrics: Vec<MetricStat> = names
        .iter()
        .enumerate()
        .map(|(i, name)| MetricStat::new(name, per_seed.iter().map(|m| m[i].1).collect()))
        .collect();
    for m in &metrics {
        println!(
            "{}: mean {} std {}",
            m.name,
            sig7_opt(m.mean),
            sig7_opt(m.std)
        );
    }
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            seeds: cfg.seeds.clone(),
            evaluated_on,
            metrics,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(Outcome::Success)
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub has_header: bool,
    pub counts: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn eval(args: &EvalArgs, exec: Execution) -> anyhow::Result<Outcome> {
    let text = fs::read_to_string(args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let model: ModelParams =
        serde_json::from_str(&text).with_context(|| format!("model {}", args.model.display()))?;
    model
        .validate()
        .with_context(|| format!("model {}", args.model.display()))?;
    let data = load_csv_dataset_with(
        args.data,
        &CsvOptions {
            has_header: args.has_header,
            num_classes: Some(model.classes()),
        },
    )?;
    let counts = args.counts.map(read_manifest_counts).transpose()?;
    let counts = counts.as_ref().map(|c| c.as_slice());
    let summary = evaluate_model(&model, &data, counts, exec)?;

    println!("samples: {}", summary.samples);
    for t in &summary.top_k {
        println!("top{}: {}", t.k, sig7(t.accuracy));
    }
    println!("balanced_accuracy: {}", sig7_opt(summary.balanced_accuracy));
    let recalls: Vec<String> = summary
        .per_class_recall
        .iter()
        .map(|&r| sig7_opt(r))
        .collect();
    println!("per_class_recall: [{}]", recalls.join(", "));
    if let Some(g) = &summary.groups {
        println!("frequent_recall: {}", sig7_opt(g.frequent));
        println!("rare_recall: {}", sig7_opt(g.rare));
    }
    if let Some(out) = args.out {
        let out = output_path(out);
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json(&out, &summary)?;
        println!("wrote {}", out.display());
    }
    Ok(Outcome::Success)
}

fn print_rows(rows: &[CheckRow]) -> Outcome {
    let mut outcome = Outcome::Success;
    for row in rows {
        let status = if !row.enforced {
            "INFO"
        } else if row.passed() {
            "PASS"
        } else {
            outcome = Outcome::SuiteFailed;
            "FAIL"
        };
        println!(
            "{status} {} trials={} worst={} tolerance={}",
            row.name,
            row.trials,
            sig7(row.worst),
            sig7(row.tolerance)
        );
    }
    outcome
}

pub fn check_equivalence_cmd(
    trials: usize,
    seed: u64,
    convention: ScaleConvention,
    exec: Execution,
) -> anyhow::Result<Outcome> {
    let rows = check_equivalence(&EquivalenceOptions {
        trials,
        seed,
        convention,
        execution: exec,
    })?;
    Ok(print_rows(&rows))
}

pub fn check_gradients_cmd(
    variants: Option<LossVariant>,
    trials: usize,
    seed: u64,
    step: f64,
    exec: Execution,
) -> anyhow::Result<Outcome> {
    if !(step > 0.0) || !step.is_finite() {
        bail!("--h must be positive, got {step}");
    }
    let opts = GradientOptions {
        trials,
        seed,
        step,
        variants: match variants {
            Some(v) => vec![v],
            None => vec![LossVariant::Ce, LossVariant::Ldam, LossVariant::Elm],
        },
        include_model: variants.is_none(),
        execution: exec,
    };
    let rows = check_gradients(&opts)?;
    Ok(print_rows(&rows))
}

pub fn margins(counts: &ClassCounts, max_margin: f64) -> anyhow::Result<Outcome> {
    let literal = compute_margin_table(counts, max_margin, MarginMode::Literal)?;
    let normalized = compute_margin_table(counts, max_margin, MarginMode::Normalized)?;
    println!("counts: {:?}", counts.as_slice());
    println!("max_margin: {}", sig7(max_margin));
    println!("literal: {}", sig7_list(literal.deltas()));
    println!("normalized: {}", sig7_list(normalized.deltas()));
    println!(
        "{:>6} {:>10} {:>12} {:>12}",
        "class", "count", "literal", "normalized"
    );
    for (j, &n) in counts.as_slice().iter().enumerate() {
        println!(
            "{j:>6} {n:>10} {:>12} {:>12}",
            sig7(literal.deltas()[j]),
            sig7(normalized.deltas()[j])
        );
    }
    Ok(Outcome::Success)
}
