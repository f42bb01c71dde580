use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;

use hsq_core::ablation::{default_grid, parse_grid, run_grid, write_csv, Axis, LabeledFixture, RunSettings};
use hsq_core::bench::{measure, BlockBench, LatencyStats};
use hsq_core::gradreport::{gradcheck_micro, GradcheckOptions};
use hsq_core::metrics::{evaluate, load_scores_csv};
use hsq_core::model::{load_checkpoint, save_checkpoint, Preset};
use hsq_core::numerics::{ops, Fault};
use hsq_core::pyramid::{backbone_seeds, level_tokens, read_pyramid, synth_pyramid, write_pyramid, DEFAULT_CHANNELS};
use hsq_core::HsqModel;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{AblateArgs, BenchArgs, EvalArgs, ForwardArgs, GradcheckArgs, SynthArgs};

const DEFAULT_SIZE: usize = 224;
const ABLATION_SIZE: usize = 64;
const DEFAULT_REPETITIONS: usize = 5;

fn init_threads(n: Option<usize>) -> CliResult<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn required(p: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| CliError::Config(format!("missing {what} path (flag or run config)")))
}

fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_rows<T: Serialize>(rows: &[T], path: Option<&Path>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_pyramid(path: &Path) -> CliResult<hsq_core::FeaturePyramid> {
    read_pyramid(path).map_err(CliError::in_file(path, "pyramid_io"))
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let mut rc = a.common.resolve()?;
    rc.overlay(&RunConfig {
        cnn: a.cnn_out,
        vit: a.vit_out,
        ..RunConfig::default()
    });
    init_threads(rc.threads)?;
    let (h, w) = rc.size(DEFAULT_SIZE);
    let (cc, vc) = rc.pyramid_channels(DEFAULT_CHANNELS);
    let (cs, vs) = backbone_seeds(rc.seed());
    for (path, ch, seed, name) in [
        (required(rc.cnn.clone(), "cnn output")?, cc, cs, "cnn"),
        (required(rc.vit.clone(), "vit output")?, vc, vs, "vit"),
    ] {
        let p = synth_pyramid(h, w, ch, seed)?;
        write_pyramid(&p, &path).map_err(CliError::in_file(&path, "pyramid_io"))?;
        println!("{name}: {} tokens {:?} channels {:?}", path.display(), p.token_counts(), p.channels());
    }
    Ok(())
}

#[derive(Serialize)]
struct ForwardRow<'a> {
    input_id: &'a str,
    p_benign: f64,
    p_malignant: f64,
    stage: usize,
    expert: usize,
    count: usize,
}

pub fn forward(a: ForwardArgs) -> CliResult<()> {
    let mut rc = a.common.resolve()?;
    rc.overlay(&RunConfig {
        cnn: a.cnn,
        vit: a.vit,
        checkpoint: a.checkpoint,
        save_checkpoint: a.save_checkpoint,
        out: a.out,
        ..RunConfig::default()
    });
    init_threads(rc.threads)?;
    let cnn_path = required(rc.cnn.clone(), "cnn")?;
    let vit_path = required(rc.vit.clone(), "vit")?;
    let cnn = load_pyramid(&cnn_path)?;
    let vit = load_pyramid(&vit_path)?;
    let model = match &rc.checkpoint {
        Some(path) => {
            let m = load_checkpoint(path).map_err(CliError::in_file(path, "model"))?;
            if rc.model_config_over(m.config().clone())? != *m.config() {
                return Err(CliError::Config(format!(
                    "run config disagrees with checkpoint {}",
                    path.display()
                )));
            }
            if rc.channels.is_some() && rc.pyramid_channels(DEFAULT_CHANNELS) != m.channels() {
                return Err(CliError::Config(format!(
                    "channels disagree with checkpoint {}",
                    path.display()
                )));
            }
            m
        }
        None => HsqModel::build_with(rc.model_config(Preset::Small)?, cnn.channels(), vit.channels(), rc.seed())?,
    };
    if model.config().num_classes != 2 {
        return Err(CliError::Config("forward reports two classes; set num_classes = 2".into()));
    }
    let (logits, diag) = model.forward(&cnn, &vit)?;
    let p = ops::softmax_rows(&logits)?;
    let id = a.id.unwrap_or_else(|| {
        cnn_path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
    });
    let rows: Vec<ForwardRow> = diag
        .stages
        .iter()
        .flat_map(|s| {
            let id = id.as_str();
            let p = &p;
            s.utilization.iter().enumerate().map(move |(expert, &count)| ForwardRow {
                input_id: id,
                p_benign: p.get(0, 0),
                p_malignant: p.get(0, 1),
                stage: s.stage,
                expert,
                count,
            })
        })
        .collect();
    write_rows(&rows, rc.out.as_deref())?;
    if let Some(path) = &rc.save_checkpoint {
        save_checkpoint(&model, path).map_err(CliError::in_file(path, "model"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GroupRow<'a> {
    group: &'a str,
    tensors: usize,
    entries: usize,
    max_relative_error: f64,
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    init_threads(a.threads)?;
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        max_entries: a.max_entries,
        sample_seed: a.seed,
        fault: a.fault_gelu.map(Fault::GeluBackward),
    };
    let report = gradcheck_micro(a.seed, &opts)?;
    for g in &report.groups {
        println!("{:<40} {:>3} {:>6} {:.3e}", g.group, g.tensors, g.entries, g.max_relative_error);
    }
    println!("max relative error {:.3e} (tolerance {:.1e})", report.max_relative_error(), report.tolerance);
    if let Some(out) = &a.out {
        let rows: Vec<GroupRow> = report
            .groups
            .iter()
            .map(|g| GroupRow {
                group: &g.group,
                tensors: g.tensors,
                entries: g.entries,
                max_relative_error: g.max_relative_error,
            })
            .collect();
        write_rows(&rows, Some(out))?;
    }
    let failed: Vec<&str> = report.failures().map(|g| g.group.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        let more = if failed.len() > 5 { ", ..." } else { "" };
        Err(CliError::Tolerance(format!(
            "{} of {} groups exceed {:.1e}: {}{more}",
            failed.len(),
            report.groups.len(),
            report.tolerance,
            failed[..failed.len().min(5)].join(", ")
        )))
    }
}

pub fn ablate(a: AblateArgs) -> CliResult<()> {
    let mut rc = a.common.resolve()?;
    rc.overlay(&RunConfig {
        out: a.out,
        ..RunConfig::default()
    });
    init_threads(rc.threads)?;
    let axis: Axis = a.axis.parse()?;
    let base = rc.model_config(Preset::Base)?;
    let points = match &a.grid {
        Some(g) => parse_grid(axis, &base, g)?,
        None => default_grid(axis, &base),
    };
    let (cc, vc) = rc.pyramid_channels(DEFAULT_CHANNELS);
    if cc != vc {
        return Err(CliError::Config("ablation uses one channel list for both pyramids".into()));
    }
    let fixture = a
        .fixture
        .as_ref()
        .map(|p| LabeledFixture::load(p).map_err(CliError::in_file(p, "ablation")))
        .transpose()?;
    let (height, width) = rc.size(ABLATION_SIZE);
    let settings = RunSettings {
        height,
        width,
        channels: cc,
        seed: rc.seed(),
        fixture: fixture.as_ref(),
    };
    let rows = run_grid(axis, &points, &settings)?;
    write_csv(&rows, sink(rc.out.as_deref())?)?;
    eprintln!("{}: {} points", axis.name(), rows.len());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arm {
    Sparse,
    Dense,
    Both,
}

#[derive(Serialize)]
struct BenchRow {
    arm: &'static str,
    scope: &'static str,
    queries: usize,
    dim: usize,
    experts: usize,
    top_k: usize,
    latent_tokens: usize,
    repetitions: usize,
    median_ms: f64,
    p95_ms: f64,
    mean_ms: f64,
    min_ms: f64,
    max_ms: f64,
    throughput: f64,
}

pub fn bench(a: BenchArgs) -> CliResult<()> {
    let mut rc = a.common.resolve()?;
    rc.overlay(&RunConfig {
        repetitions: a.repetitions,
        out: a.out,
        ..RunConfig::default()
    });
    init_threads(rc.threads)?;
    let reps = rc.repetitions.unwrap_or(DEFAULT_REPETITIONS);
    let cfg = rc.model_config(Preset::Small)?;
    let (h, w) = rc.size(DEFAULT_SIZE);
    let (cc, vc) = rc.pyramid_channels(DEFAULT_CHANNELS);
    let latent_tokens = level_tokens(h, w, 0);
    let arms: &[(&'static str, bool)] = match a.arm {
        Arm::Sparse => &[("sparse", false)],
        Arm::Dense => &[("dense", true)],
        Arm::Both => &[("sparse", false), ("dense", true)],
    };
    let mut rows = Vec::new();
    let row = |arm, scope, s: LatencyStats| BenchRow {
        arm,
        scope,
        queries: cfg.queries,
        dim: cfg.dim,
        experts: cfg.experts,
        top_k: cfg.top_k,
        latent_tokens,
        repetitions: s.repetitions,
        median_ms: s.median_ms,
        p95_ms: s.p95_ms,
        mean_ms: s.mean_ms,
        min_ms: s.min_ms,
        max_ms: s.max_ms,
        throughput: s.throughput,
    };
    if a.block {
        hsq_core::pyramid::check_image_size(h, w)?;
        let mut b = BlockBench::new(&cfg.block_spec(), cfg.queries, latent_tokens, rc.seed())?;
        for &(name, dense) in arms {
            b.set_dense(dense);
            rows.push(row(name, "block", measure(reps, || b.run())?));
        }
    } else {
        let mut model = HsqModel::build_with(cfg.clone(), cc, vc, rc.seed())?;
        let (cs, vs) = backbone_seeds(rc.seed());
        let (cnn, vit) = (synth_pyramid(h, w, cc, cs)?, synth_pyramid(h, w, vc, vs)?);
        for &(name, dense) in arms {
            model.set_dense_moe(dense || cfg.dense_moe);
            rows.push(row(name, "model", measure(reps, || model.forward(&cnn, &vit))?));
        }
    }
    for r in &rows {
        eprintln!(
            "{:<6} {} median {:.2} ms p95 {:.2} ms over {} reps",
            r.arm, r.scope, r.median_ms, r.p95_ms, r.repetitions
        );
    }
    write_rows(&rows, rc.out.as_deref())
}

#[derive(Serialize)]
struct EvalRow {
    items: usize,
    threshold: f64,
    accuracy: f64,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    auc: f64,
    tp: usize,
    fp: usize,
    tn: usize,
    r#fn: usize,
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"))
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let (_, mut d) = load_scores_csv(&a.scores).map_err(CliError::in_file(&a.scores, "metrics"))?;
    if a.by_group {
        d = d.aggregate_by_group()?;
    }
    let r = evaluate(&d, a.threshold)?;
    let c = &r.confusion;
    println!("items      {}", r.items);
    println!("threshold  {}", r.threshold);
    println!("accuracy   {:.6}", c.accuracy);
    println!("precision  {}", show(c.precision));
    println!("recall     {}", show(c.recall));
    println!("f1         {}", show(c.f1));
    println!("auc        {:.6}", r.auc);
    println!("confusion  tp={} fp={} tn={} fn={}", c.tp, c.fp, c.tn, c.r#fn);
    if let Some(out) = &a.out {
        let row = EvalRow {
            items: r.items,
            threshold: r.threshold,
            accuracy: c.accuracy,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            auc: r.auc,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            r#fn: c.r#fn,
        };
        write_rows(&[row], Some(out))?;
    }
    Ok(())
}
