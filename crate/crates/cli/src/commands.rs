//! The five commands behind the `cdgan` binary: phantom generation,
//! training, evaluation, model comparison, and conditional synthesis.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cdgan_core::evaluate::{evaluate_model, pair_subject_accuracies, EvalReport, EvalSlice};
use cdgan_core::metrics::paired_ttest;
use cdgan_core::nets::{one_hot_codes, Model, ModelKind, NetConfig};
use cdgan_core::phantom::PhantomSpec;
use cdgan_core::tensor::Mode;
use cdgan_core::train::{
    batch_indices, lr_at, make_batch, params_all_finite, train_step, trains_generator,
    TrainConfig, TrainState,
};
use cdgan_core::volume::{extract_axial_slices, SliceRange};
use cdgan_core::{CoreError, PhaseLabel};

use crate::error::{io_ctx, CliError, Result};
use crate::formats;
use crate::logs::{LogRecord, MetricsLog, RunRecord};
use crate::{checkpoint, dataset};

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_ctx(path, e))
}

fn parse_phase_arg(s: &str) -> Result<PhaseLabel> {
    PhaseLabel::from_name(s).map_err(|_| {
        CliError::usage(format!(
            "unknown phase '{s}'; valid phases: non_contrast, portal_venous, delayed"
        ))
    })
}

fn parse_model_arg(s: &str) -> Result<ModelKind> {
    ModelKind::from_name(s).map_err(|_| {
        let kinds: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        CliError::usage(format!("unknown model '{s}'; valid kinds: {}", kinds.join(", ")))
    })
}

// ---------------------------------------------------------------- gen

#[derive(Debug)]
pub struct GenArgs {
    pub out: PathBuf,
    pub spec_file: Option<PathBuf>,
    pub seed: Option<u64>,
    pub subjects_per_phase: usize,
    pub train_fraction: f64,
    pub overlap: Option<f64>,
    pub label_noise: Option<f64>,
    pub image_size: Option<usize>,
    pub slices_per_volume: Option<usize>,
}

pub fn cmd_gen_phantoms(args: &GenArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut spec: PhantomSpec = match &args.spec_file {
        Some(p) => formats::read_json_config(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(overlap) = args.overlap {
        spec.enhancement_overlap = overlap;
    }
    if let Some(rate) = args.label_noise {
        spec.label_noise_rate = rate;
    }
    if let Some(size) = args.image_size {
        spec.image_hw = (size, size);
    }
    if let Some(slices) = args.slices_per_volume {
        spec.slices_per_volume = slices;
    }
    spec.validate()?;

    let (train, test) =
        dataset::generate_dataset(&spec, args.subjects_per_phase, args.train_fraction, &args.out)?;

    let config = json!({
        "spec": spec,
        "subjects_per_phase": args.subjects_per_phase,
        "train_fraction": args.train_fraction,
    });
    let mut record = RunRecord::new("gen-phantoms", spec.seed, config);
    record.artifact(&train);
    record.artifact(&test);
    record.wall_clock_seconds = t0.elapsed().as_secs_f64();
    record.write(&args.out)?;

    println!(
        "wrote {} and {} under {}",
        formats_rel(&train, &args.out),
        formats_rel(&test, &args.out),
        args.out.display()
    );
    Ok(())
}

fn formats_rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

// -------------------------------------------------------------- train

#[derive(Debug)]
pub struct TrainArgs {
    pub model: String,
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub net: Option<PathBuf>,
    pub desk: bool,
    pub seed: Option<u64>,
    pub iterations: Option<u64>,
    pub resume: Option<PathBuf>,
}

pub fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join(format!("checkpoint_{iteration:06}.ckpt"))
}

/// Write a diagnostic snapshot for a numeric failure and return the
/// exit-3 error pointing at it.
fn numeric_diagnostic(
    out: &Path,
    iteration: u64,
    kind: ModelKind,
    config: &TrainConfig,
    n: usize,
    message: &str,
) -> CliError {
    let indices = batch_indices(config.seed, iteration, config.batch_size, n);
    let path = out.join("diagnostic.json");
    let body = json!({
        "iteration": iteration,
        "model": kind.name(),
        "message": message,
        "batch_indices": indices,
    });
    let _ = fs::write(&path, serde_json::to_vec_pretty(&body).expect("diagnostic encode"));
    CliError::numeric(format!("{message}; diagnostic written to {}", path.display()))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let kind = parse_model_arg(&args.model)?;

    let (mut state, config) = match &args.resume {
        Some(ckpt) => {
            if args.config.is_some() || args.net.is_some() || args.desk || args.seed.is_some() {
                return Err(CliError::usage(
                    "--resume pins the configuration from the checkpoint; only --iterations, \
                     --out and the manifests may change"
                        .to_string(),
                ));
            }
            let (state, mut config) = checkpoint::load(ckpt)?;
            if state.model.kind != kind {
                return Err(CliError::usage(format!(
                    "checkpoint holds a {} model but --model is {}",
                    state.model.kind.name(),
                    kind.name()
                )));
            }
            if let Some(total) = args.iterations {
                config.iterations = total;
            }
            if state.iteration >= config.iterations {
                return Err(CliError::usage(format!(
                    "checkpoint is already at iteration {}; raise --iterations past it",
                    state.iteration
                )));
            }
            (state, config)
        }
        None => {
            let mut config: TrainConfig = match &args.config {
                Some(p) => formats::read_json_config(p)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(iterations) = args.iterations {
                config.iterations = iterations;
            }
            let net: NetConfig = match &args.net {
                Some(p) => formats::read_json_config(p)?,
                None if args.desk => NetConfig::desk(),
                None => NetConfig::default(),
            };
            let model: Model<f32> = Model::build(kind, net, config.seed)?;
            (TrainState::new(model, &config)?, config)
        }
    };

    let data = dataset::load_train_dataset(&args.train_manifest)?;
    if data.hw() != state.model.config.image_hw {
        return Err(CliError::usage(format!(
            "manifest slices are {:?} but the network expects {:?} (image_hw)",
            data.hw(),
            state.model.config.image_hw
        )));
    }
    let eval_slices: Option<Vec<EvalSlice>> = match &args.eval_manifest {
        Some(p) => Some(dataset::load_eval_slices(p)?),
        None => None,
    };

    ensure_dir(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut log = MetricsLog::open(&metrics_path)?;
    let mut checkpoints = Vec::new();
    let total = config.iterations;

    while state.iteration < total {
        let it = state.iteration;
        let lr = lr_at(it, &config);
        let batch = make_batch::<f32>(&data, it, &config, trains_generator(kind, &config))?;
        let losses = train_step(&mut state, &batch, &config).map_err(|e| match e {
            CoreError::Numeric(msg) => {
                numeric_diagnostic(&args.out, it, kind, &config, data.len(), &msg)
            }
            other => CliError::from(other),
        })?;
        log.append(&LogRecord::Step {
            iteration: state.iteration,
            model: kind.name().to_string(),
            lr,
            losses,
        })?;

        let at_interval = state.iteration % config.checkpoint_interval == 0;
        if at_interval || state.iteration == total {
            if !params_all_finite(&state.model.store) {
                return Err(numeric_diagnostic(
                    &args.out,
                    state.iteration,
                    kind,
                    &config,
                    data.len(),
                    "a parameter became non-finite",
                ));
            }
            let ckpt = checkpoint_path(&args.out, state.iteration);
            checkpoint::save(&state, &config, &ckpt)?;
            checkpoints.push(ckpt);
            if let Some(slices) = &eval_slices {
                let report = evaluate_model(&state.model, slices, 32)?;
                log.append(&LogRecord::Eval {
                    iteration: state.iteration,
                    model: kind.name().to_string(),
                    accuracy: report.overall_accuracy,
                    confusion: report.confusion,
                })?;
            }
            log.flush()?;
        }
    }
    log.flush()?;

    let resolved = json!({
        "model": kind.name(),
        "net": state.model.config,
        "train": config,
        "train_manifest": args.train_manifest.display().to_string(),
        "eval_manifest": args.eval_manifest.as_ref().map(|p| p.display().to_string()),
        "resumed_from": args.resume.as_ref().map(|p| p.display().to_string()),
    });
    let mut record = RunRecord::new("train", config.seed, resolved);
    record.artifact(&metrics_path);
    for c in &checkpoints {
        record.artifact(c);
    }
    record.wall_clock_seconds = t0.elapsed().as_secs_f64();
    record.write(&args.out)?;

    println!(
        "trained {} to iteration {}; final checkpoint {}",
        kind.name(),
        state.iteration,
        checkpoints.last().expect("at least the final checkpoint").display()
    );
    Ok(())
}

// --------------------------------------------------------------- eval

#[derive(Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub test_manifest: PathBuf,
    pub out: PathBuf,
    pub batch_size: usize,
}

/// The eval bundle written to disk; compare consumes this.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub model: String,
    pub checkpoint: String,
    pub iteration: u64,
    pub report: EvalReport,
}

fn confusion_table(report: &EvalReport) -> String {
    let names: Vec<&str> = PhaseLabel::ALL.iter().map(|p| p.name()).collect();
    let width = names.iter().map(|n| n.len()).max().expect("three phases");
    let mut out = String::new();
    out.push_str(&format!("{:>width$} | predicted\n", "true"));
    out.push_str(&format!("{:>width$} | {}\n", "", names.join("  ")));
    let norm = report.confusion.normalized();
    for (r, name) in names.iter().enumerate() {
        let cells: Vec<String> = (0..names.len())
            .map(|c| format!("{:>w$}", format!("{:.3}", norm[r][c]), w = names[c].len()))
            .collect();
        out.push_str(&format!("{name:>width$} | {}\n", cells.join("  ")));
    }
    out.push_str(&format!(
        "\ncounts: {:?}\noverall accuracy: {:.4} over {} slices\n",
        report.confusion.counts,
        report.overall_accuracy,
        report.predictions.len()
    ));
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let t0 = Instant::now();
    let (state, config) = checkpoint::load(&args.checkpoint)?;
    let model = state.model;
    let slices = dataset::load_eval_slices(&args.test_manifest)?;
    let report = evaluate_model(&model, &slices, args.batch_size)?;

    if !report.unpaired_subjects.is_empty() {
        eprintln!(
            "warning: subjects without all three phases: {}",
            report.unpaired_subjects.join(", ")
        );
    }

    ensure_dir(&args.out)?;
    let output = EvalOutput {
        model: model.kind.name().to_string(),
        checkpoint: args.checkpoint.display().to_string(),
        iteration: state.iteration,
        report,
    };
    let report_path = args.out.join("report.json");
    fs::write(
        &report_path,
        serde_json::to_vec_pretty(&output).map_err(|e| CliError::usage(format!("report: {e}")))?,
    )
    .map_err(|e| io_ctx(&report_path, e))?;

    let table_path = args.out.join("confusion.txt");
    fs::write(&table_path, confusion_table(&output.report))
        .map_err(|e| io_ctx(&table_path, e))?;

    // Misclassified slices as grayscale images for qualitative review.
    let mis_dir = args.out.join("misclassified");
    ensure_dir(&mis_dir)?;
    for p in &output.report.misclassified {
        let slice = slices
            .iter()
            .find(|s| {
                s.subject_id == p.subject_id && s.slice_index == p.slice_index && s.label == p.truth
            })
            .expect("misclassified slice came from the input set");
        let base = mis_dir.join(format!(
            "{}_{:03}_{}_as_{}",
            p.subject_id,
            p.slice_index,
            p.truth.name(),
            p.predicted.name()
        ));
        formats::write_slice_image(&slice.pixels, &base)?;
    }

    let mut record = RunRecord::new(
        "eval",
        config.seed,
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "test_manifest": args.test_manifest.display().to_string(),
            "batch_size": args.batch_size,
        }),
    );
    record.artifact(&report_path);
    record.artifact(&table_path);
    record.wall_clock_seconds = t0.elapsed().as_secs_f64();
    record.write(&args.out)?;

    println!(
        "{}: accuracy {:.4} over {} slices ({} misclassified)",
        output.model,
        output.report.overall_accuracy,
        output.report.predictions.len(),
        output.report.misclassified.len()
    );
    Ok(())
}

// ------------------------------------------------------------ compare

#[derive(Debug)]
pub struct CompareArgs {
    pub report_a: PathBuf,
    pub report_b: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub mean_accuracy_a: f64,
    pub mean_accuracy_b: f64,
    pub t: f64,
    pub p_value: f64,
    pub dof: u64,
    pub degenerate: bool,
    pub subjects: usize,
}

fn read_eval_output(path: &Path) -> Result<EvalOutput> {
    let text = fs::read(path).map_err(|e| io_ctx(path, e))?;
    serde_json::from_slice(&text)
        .map_err(|e| CliError::usage(format!("{}: bad eval report: {e}", path.display())))
}

pub fn compare_reports(a: &EvalOutput, b: &EvalOutput) -> Result<Comparison> {
    let (acc_a, acc_b) = pair_subject_accuracies(&a.report, &b.report)?;
    let ttest = paired_ttest(&acc_a, &acc_b)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Comparison {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        mean_accuracy_a: mean(&acc_a),
        mean_accuracy_b: mean(&acc_b),
        t: ttest.t,
        p_value: ttest.p_value,
        dof: ttest.dof,
        degenerate: ttest.degenerate,
        subjects: acc_a.len(),
    })
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let t0 = Instant::now();
    let a = read_eval_output(&args.report_a)?;
    let b = read_eval_output(&args.report_b)?;
    let cmp = compare_reports(&a, &b)?;

    println!(
        "paired t-test over {} subjects: {} mean {:.4} vs {} mean {:.4}",
        cmp.subjects, cmp.model_a, cmp.mean_accuracy_a, cmp.model_b, cmp.mean_accuracy_b
    );
    println!(
        "t = {:.6}, p = {:.6e}, dof = {}{}",
        cmp.t,
        cmp.p_value,
        cmp.dof,
        if cmp.degenerate { " (degenerate: zero-variance differences)" } else { "" }
    );

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let path = out.join("comparison.json");
        fs::write(
            &path,
            serde_json::to_vec_pretty(&cmp)
                .map_err(|e| CliError::usage(format!("comparison: {e}")))?,
        )
        .map_err(|e| io_ctx(&path, e))?;
        let mut record = RunRecord::new(
            "compare",
            0,
            json!({
                "report_a": args.report_a.display().to_string(),
                "report_b": args.report_b.display().to_string(),
            }),
        );
        record.artifact(&path);
        record.wall_clock_seconds = t0.elapsed().as_secs_f64();
        record.write(out)?;
    }
    Ok(())
}

// --------------------------------------------------------- synthesize

#[derive(Debug)]
pub struct SynthArgs {
    pub checkpoint: PathBuf,
    pub volume: PathBuf,
    pub slice: usize,
    pub target_phase: Option<String>,
    pub out: PathBuf,
}

pub fn cmd_synthesize(args: &SynthArgs) -> Result<()> {
    let t0 = Instant::now();
    let (state, config) = checkpoint::load(&args.checkpoint)?;
    let model = state.model;
    if !model.kind.has_generator() {
        return Err(CliError::usage("no generator in checkpoint".to_string()));
    }

    let volume = formats::read_volume(&args.volume)?;
    let slices =
        extract_axial_slices(&volume, SliceRange::Inclusive(args.slice, args.slice))?;
    let pixels = &slices[0].pixels;
    let (h, w) = pixels.dim();
    if (h, w) != model.config.image_hw {
        return Err(CliError::usage(format!(
            "slice is {h}x{w} but the generator expects {:?}",
            model.config.image_hw
        )));
    }

    let targets: Vec<PhaseLabel> = match &args.target_phase {
        Some(s) => vec![parse_phase_arg(s)?],
        None => PhaseLabel::ALL.to_vec(),
    };

    let mut x = Array4::<f32>::zeros((1, h, w, 1));
    for r in 0..h {
        for c in 0..w {
            x[[0, r, c, 0]] = pixels[[r, c]];
        }
    }

    ensure_dir(&args.out)?;
    let mut record = RunRecord::new(
        "synthesize",
        config.seed,
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "volume": args.volume.display().to_string(),
            "slice": args.slice,
            "target_phase": args.target_phase,
        }),
    );
    for phase in targets {
        let codes = one_hot_codes::<f32>(&[phase]);
        let y = model.synthesize(&x.view(), &codes.view(), Mode::Infer)?;
        let mut img = Array2::<f32>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                img[[r, c]] = y[[0, r, c, 0]];
            }
        }
        let base = args.out.join(format!("synth_{}", phase.name()));
        let (pgm, raw) = formats::write_slice_image(&img, &base)?;
        record.artifact(&pgm);
        record.artifact(&raw);
        println!("wrote {}", pgm.display());
    }
    record.wall_clock_seconds = t0.elapsed().as_secs_f64();
    record.write(&args.out)?;
    Ok(())
}
