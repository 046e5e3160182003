//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use pso_core::batch::Batch;
use pso_core::dist::{
    columns, diag_gaussian_fit, matrix_a_csv, transformed_columns, uniform_box, uniform_box_fit,
    Density,
};
use pso_core::eval::{is_error, lsqr, psqr, total_integral};
use pso_core::instances::{
    check_feasibility, default_probes, default_s_grid, make_named, wrap_bounded, wrap_cut_at,
    AuxInfo, ForceSel, InstanceParams, PsoInstance, ThresholdSide,
};
use pso_core::kernel::{differential_check, gramian, pair_scan, ScanKind};
use pso_core::rng::{stream_rng, Stream};
use pso_core::surface::{Model, Preconditioner, Surface};
use pso_core::train::{train, DownSource, TrainHooks, UpSource};

use crate::checkpoint::{Checkpoint, DataDescriptor, DownDescriptor};
use crate::config::{load_config, DataCfg, DataKind, DownCfg, InstanceCfg};
use crate::sink;

fn build_data_density(cfg: &DataCfg) -> Result<(Box<dyn Density<f64>>, DataDescriptor)> {
    Ok(match cfg.distribution {
        DataKind::Columns => (
            Box::new(columns::<f64>(cfg.dim)?),
            DataDescriptor::Columns {
                dim: cfg.dim as u32,
            },
        ),
        DataKind::TransformedColumns => (
            Box::new(transformed_columns::<f64>()?),
            DataDescriptor::TransformedColumns,
        ),
    })
}

fn data_density_of(desc: &DataDescriptor) -> Result<Option<Box<dyn Density<f64>>>> {
    Ok(match desc {
        DataDescriptor::External => None,
        DataDescriptor::Columns { dim } => Some(Box::new(columns::<f64>(*dim as usize)?)),
        DataDescriptor::TransformedColumns => Some(Box::new(transformed_columns::<f64>()?)),
    })
}

fn build_down(
    cfg: &DownCfg,
    data: &Batch<f64>,
) -> Result<(Box<dyn Density<f64>>, DownDescriptor)> {
    Ok(match cfg {
        DownCfg::UniformFit => {
            let d = uniform_box_fit(data)?;
            let (lo, hi) = d.bounds();
            let desc = DownDescriptor::UniformBox {
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            };
            (Box::new(d), desc)
        }
        DownCfg::GaussianFit => {
            let d = diag_gaussian_fit(data)?;
            let desc = DownDescriptor::DiagGaussian {
                mean: d.mean().to_vec(),
                std: d.std().to_vec(),
            };
            (Box::new(d), desc)
        }
        DownCfg::Explicit { lo, hi } => {
            let d = uniform_box(lo.clone(), hi.clone())?;
            let desc = DownDescriptor::UniformBox {
                lo: lo.clone(),
                hi: hi.clone(),
            };
            (Box::new(d), desc)
        }
    })
}

pub fn build_instance(cfg: &InstanceCfg) -> Result<PsoInstance<f64>> {
    let mut inst = make_named::<f64>(&cfg.name, &cfg.params)?;
    if cfg.wrap_bounded {
        inst = wrap_bounded(inst);
    }
    if let Some(phi) = cfg.cut_up_at {
        // stop pushing up once the surface exceeds the threshold
        inst = wrap_cut_at(inst, phi, ThresholdSide::Above, ForceSel::Up);
    }
    if let Some(phi) = cfg.cut_down_at {
        // stop pushing down once the surface falls below the threshold
        inst = wrap_cut_at(inst, phi, ThresholdSide::Below, ForceSel::Down);
    }
    Ok(inst)
}

/// Test sets used by both the trainer's metric hook and `eval`, sampled in a
/// fixed order from the seed's test stream so the two agree exactly.
fn sample_test_sets(
    data: &dyn Density<f64>,
    down: &dyn Density<f64>,
    n: usize,
    seed: u64,
) -> (Batch<f64>, Batch<f64>) {
    let mut rng = stream_rng(seed, Stream::Test);
    let up = data.sample(&mut rng, n);
    let dn = down.sample(&mut rng, n);
    (up, dn)
}

const TI_SAMPLES: usize = 100_000;

struct MetricState {
    psqr: f64,
    lsqr: f64,
    is_err: f64,
}

fn compute_metrics(
    model: &Model<f64>,
    truth: Option<&dyn Density<f64>>,
    down_logpdf: &dyn Fn(&[f64]) -> f64,
    test_up: &Batch<f64>,
    test_down: &Batch<f64>,
) -> Result<MetricState> {
    let (p, l) = match truth {
        Some(t) => {
            let tl = |x: &[f64]| t.log_pdf(x);
            (
                psqr(model, &tl, test_up)?,
                lsqr(model, &tl, test_up)?,
            )
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok(MetricState {
        psqr: p,
        lsqr: l,
        is_err: is_error(model, test_up, test_down, down_logpdf)?,
    })
}

pub fn run_train(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    let out_dir = out_override.unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;

    // data
    let (data_density, data_desc) = build_data_density(&cfg.data)?;
    let (dataset, truth): (Batch<f64>, Option<&dyn Density<f64>>) = match &cfg.data.dataset_path {
        Some(path) => {
            let b = sink::read_samples_csv(path)?;
            if b.cols() != cfg.data.dim {
                bail!(
                    "dataset {} has {} columns, config data.dim is {}",
                    path.display(),
                    b.cols(),
                    cfg.data.dim
                );
            }
            (b, None)
        }
        None => {
            let mut rng = stream_rng(cfg.train.seed, Stream::Data);
            (
                data_density.sample(&mut rng, cfg.data.dataset_size),
                Some(data_density.as_ref()),
            )
        }
    };
    let data_desc = if cfg.data.dataset_path.is_some() {
        DataDescriptor::External
    } else {
        data_desc
    };

    // down density, model
    let (down, down_desc) = build_down(&cfg.down, &dataset)?;
    let bias_density = down_desc.to_density()?;
    let precond = Preconditioner::fit(&dataset)?
        .with_height_bias(Arc::new(move |x: &[f64]| bias_density.log_pdf(x)));
    let model = Model::init(
        cfg.model.spec_template.clone(),
        precond,
        cfg.train.seed,
        cfg.model.zero_last_layer,
    )?;
    let inst = build_instance(&cfg.instance)?;

    log::info!(
        "training `{}` on {} points, {} parameters, {} iterations",
        inst.name(),
        dataset.rows(),
        model.params().len(),
        cfg.train.iterations
    );

    // metric hook over fixed seeded test sets
    let (test_up, test_down) =
        sample_test_sets(data_density.as_ref(), down.as_ref(), cfg.eval.test_size, cfg.train.seed);
    let down_lp = {
        let d = down_desc.to_density()?;
        move |x: &[f64]| d.log_pdf(x)
    };
    let truth_for_hook = truth;
    let mut metrics_hook = |_iter: u64, m: &Model<f64>| -> (f64, f64, f64) {
        match compute_metrics(m, truth_for_hook, &down_lp, &test_up, &test_down) {
            Ok(ms) => (ms.psqr, ms.lsqr, ms.is_err),
            Err(_) => (f64::NAN, f64::NAN, f64::NAN),
        }
    };

    // checkpoint hook
    let ck_template = Checkpoint {
        experiment_hash: cfg.hash,
        iteration: 0,
        spec: cfg.model.spec_template.clone(),
        mean: Vec::new(),
        std: Vec::new(),
        bias_from_down: true,
        data: data_desc.clone(),
        down: down_desc.clone(),
        theta: Vec::new(),
    };
    let write_ck = |iter: u64, m: &Model<f64>, path: &Path, tpl: &Checkpoint| -> Result<()> {
        let ck = Checkpoint {
            iteration: iter,
            mean: m.precond().mean().to_vec(),
            std: m.precond().std().to_vec(),
            theta: m.params().values().to_vec(),
            ..tpl.clone()
        };
        crate::checkpoint::save(path, &ck)
    };
    let ck_dir = out_dir.clone();
    let ck_tpl = ck_template.clone();
    let enable_ck = cfg.output.checkpoints;
    let last_ck_cell = std::cell::RefCell::new(None::<PathBuf>);
    let last_checkpoint: Option<PathBuf>;
    {
        let mut hooks = TrainHooks {
            metrics: Some(Box::new(&mut metrics_hook)),
            checkpoint: if enable_ck && cfg.train.checkpoint_period > 0 {
                let cell = &last_ck_cell;
                let dir = ck_dir.clone();
                let tpl = ck_tpl.clone();
                Some(Box::new(move |iter: u64, m: &Model<f64>| {
                    let path = dir.join(format!("checkpoint_{iter:09}.ckpt"));
                    if write_ck(iter, m, &path, &tpl).is_ok() {
                        *cell.borrow_mut() = Some(path);
                    }
                }))
            } else {
                None
            },
        };

        let up_source = UpSource::Dataset(&dataset);
        let down_source = DownSource::Density(down.as_ref());
        let result = train(model, &inst, up_source, down_source, &cfg.train, &mut hooks);
        drop(hooks);
        last_checkpoint = last_ck_cell.into_inner();

        let (model, trace) = result.map_err(|e| {
            let at = last_checkpoint
                .as_ref()
                .map(|p| format!(" (last checkpoint: {})", p.display()))
                .unwrap_or_default();
            anyhow!("{e}{at}")
        })?;

        // artifacts
        sink::write_metrics_csv(&out_dir.join(&cfg.output.csv), &trace)?;
        if enable_ck {
            let final_path = out_dir.join("checkpoint_final.ckpt");
            write_ck(cfg.train.iterations, &model, &final_path, &ck_template)?;
        }

        let mut ti_rng = stream_rng(cfg.train.seed, Stream::Diag);
        let ti = total_integral(&model, down.as_ref(), TI_SAMPLES, &mut ti_rng)?;
        let final_metrics =
            compute_metrics(&model, truth, &down_lp, &test_up, &test_down)?;
        sink::write_summary(
            &out_dir.join("summary.txt"),
            &[
                ("instance", inst.name().to_string()),
                ("iterations", cfg.train.iterations.to_string()),
                ("parameters", model.params().len().to_string()),
                ("final_psqr", sink::fmt_f64(final_metrics.psqr)),
                ("final_lsqr", sink::fmt_f64(final_metrics.lsqr)),
                ("final_is_err", sink::fmt_f64(final_metrics.is_err)),
                ("total_integral", sink::fmt_f64(ti)),
                ("experiment_hash", format!("{:#018x}", cfg.hash)),
            ],
        )?;
        println!(
            "trained `{}`: lsqr {:.6}, is_err {:.6}, total integral {:.4}; artifacts in {}",
            inst.name(),
            final_metrics.lsqr,
            final_metrics.is_err,
            ti,
            out_dir.display()
        );
    }
    Ok(())
}

pub fn run_eval(
    checkpoint_path: &Path,
    seed: u64,
    test_size: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = crate::checkpoint::load(checkpoint_path)?;
    let model = ck.to_model()?;
    let down = ck.down.to_density()?;
    let truth = data_density_of(&ck.data)?;

    let data_for_tests: &dyn Density<f64> = match &truth {
        Some(t) => t.as_ref(),
        None => down.as_ref(), // no analytic data density: test points from the down cover
    };
    let (test_up, test_down) = sample_test_sets(data_for_tests, down.as_ref(), test_size, seed);
    let down_lp = |x: &[f64]| down.log_pdf(x);
    let ms = compute_metrics(
        &model,
        truth.as_ref().map(|b| b.as_ref()),
        &down_lp,
        &test_up,
        &test_down,
    )?;
    let mut ti_rng = stream_rng(seed, Stream::Diag);
    let ti = total_integral(&model, down.as_ref(), TI_SAMPLES, &mut ti_rng)?;

    let entries = [
        ("checkpoint", checkpoint_path.display().to_string()),
        ("iteration", ck.iteration.to_string()),
        ("test_size", test_size.to_string()),
        ("seed", seed.to_string()),
        ("psqr", sink::fmt_f64(ms.psqr)),
        ("lsqr", sink::fmt_f64(ms.lsqr)),
        ("is_err", sink::fmt_f64(ms.is_err)),
        ("total_integral", sink::fmt_f64(ti)),
    ];
    for (k, v) in &entries {
        println!("{k} = {v}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        sink::write_summary(&dir.join("eval.txt"), &entries)?;
    }
    Ok(())
}

pub enum DiagMode {
    Scan(ScanKind),
    Gramian,
    Differential { deltas: Vec<f64> },
}

pub fn run_diag(
    checkpoint_path: &Path,
    mode: DiagMode,
    probes: usize,
    seed: u64,
    out: PathBuf,
) -> Result<()> {
    let ck = crate::checkpoint::load(checkpoint_path)?;
    let model = ck.to_model()?;
    let down = ck.down.to_density()?;
    let data = data_density_of(&ck.data)?;
    std::fs::create_dir_all(&out)?;

    // probe set: half data-density draws, half down draws
    let mut rng = stream_rng(seed, Stream::Diag);
    let n_up = probes / 2;
    let up_part = match &data {
        Some(d) => d.sample(&mut rng, n_up),
        None => down.sample(&mut rng, n_up),
    };
    let down_part = down.sample(&mut rng, probes - n_up);
    let mut probe_batch = Batch::zeros(probes, model.input_dim());
    for i in 0..n_up {
        probe_batch.row_mut(i).copy_from_slice(up_part.row(i));
    }
    for i in 0..(probes - n_up) {
        probe_batch
            .row_mut(n_up + i)
            .copy_from_slice(down_part.row(i));
    }

    match mode {
        DiagMode::Scan(kind) => {
            let scan = pair_scan(&model, &probe_batch, kind)?;
            let name = match kind {
                ScanKind::Raw => "scan_raw.csv",
                ScanKind::Relative => "scan_relative.csv",
                ScanKind::Cosine => "scan_cosine.csv",
            };
            sink::write_scan_csv(&out.join(name), &scan)?;
            println!("wrote {} pairs to {}", scan.pairs.len(), out.join(name).display());
        }
        DiagMode::Gramian => {
            let g = gramian(&model, &probe_batch)?;
            sink::write_gramian(&out.join("gramian.bin"), &g)?;
            println!("wrote {}x{} gramian to {}", g.n(), g.n(), out.join("gramian.bin").display());
        }
        DiagMode::Differential { deltas } => {
            // batches for the update direction: the instance the model was
            // trained with is not stored, so the reference bounded
            // log-density instance is used for the probe step
            let inst = pso_core::instances::make_pso_lde(0.25)
                .map_err(|e| anyhow!("building probe instance: {e}"))?;
            let up = match &data {
                Some(d) => d.sample(&mut rng, 256),
                None => down.sample(&mut rng, 256),
            };
            let dn = down.sample(&mut rng, 256);
            let aux = |x: &[f64]| AuxInfo::with_log_q(down.log_pdf(x));
            let records =
                differential_check(&model, &inst, &up, &dn, &aux, &probe_batch, &deltas)?;
            sink::write_differential_csv(&out.join("differential.csv"), &records)?;
            println!(
                "wrote {} differential records to {}",
                records.len(),
                out.join("differential.csv").display()
            );
        }
    }
    Ok(())
}

pub fn run_feasibility(
    name: &str,
    params: &[(String, f64)],
    grid_points: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut p = InstanceParams::new();
    for (k, v) in params {
        p = p.set(k, *v);
    }
    let inst = make_named::<f64>(name, &p)?;
    let grid = default_s_grid(&inst.interval(), grid_points.max(100));
    let probes = default_probes::<f64>();
    let report = check_feasibility(&inst, &inst.interval(), &grid, &probes)
        .map_err(|e| anyhow!("feasibility check: {e}"))?;

    let verdict = if !report.feasible_on_k {
        "infeasible"
    } else if report.needs_range_restriction {
        "feasible only with a range-restricted model"
    } else {
        "feasible without range restriction"
    };
    println!("instance = {}", inst.name());
    println!("feasible_on_k = {}", report.feasible_on_k);
    println!("needs_range_restriction = {}", report.needs_range_restriction);
    println!("verdict = {verdict}");
    for v in report.violations.iter().take(10) {
        println!("violation = {} at s={} (probe {})", v.condition, v.s, v.probe);
    }
    if report.violations.len() > 10 {
        println!("violation_count = {}", report.violations.len());
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let mut entries = vec![
            ("instance", inst.name().to_string()),
            ("feasible_on_k", report.feasible_on_k.to_string()),
            (
                "needs_range_restriction",
                report.needs_range_restriction.to_string(),
            ),
            ("verdict", verdict.to_string()),
            ("violation_count", report.violations.len().to_string()),
        ];
        let joined = report
            .violations
            .iter()
            .take(50)
            .map(|v| format!("{}@s={}", v.condition, v.s))
            .collect::<Vec<_>>()
            .join("; ");
        entries.push(("violations", joined));
        sink::write_summary(&dir.join("feasibility.txt"), &entries)?;
    }
    Ok(())
}

pub fn run_sample(
    config: Option<PathBuf>,
    distribution: Option<String>,
    dim: Option<usize>,
    count: usize,
    seed: u64,
    out: PathBuf,
    matrix_a: bool,
) -> Result<()> {
    std::fs::create_dir_all(&out)?;
    if matrix_a {
        let path = out.join("matrix_a.csv");
        std::fs::write(&path, matrix_a_csv())?;
        println!("wrote embedded transform matrix to {}", path.display());
        return Ok(());
    }

    let density: Box<dyn Density<f64>> = if let Some(cfg_path) = config {
        let cfg = load_config(&cfg_path)?;
        build_data_density(&cfg.data)?.0
    } else {
        let name = distribution
            .ok_or_else(|| anyhow!("need --config or --distribution"))?;
        match name.as_str() {
            "columns" => Box::new(columns::<f64>(dim.unwrap_or(1))?),
            "transformed_columns" => Box::new(transformed_columns::<f64>()?),
            other => bail!("unknown distribution `{other}`"),
        }
    };
    let mut rng = stream_rng(seed, Stream::Data);
    let samples = density.sample(&mut rng, count);
    let path = out.join("samples.csv");
    sink::write_samples_csv(&path, &samples)?;
    println!("wrote {count} samples to {}", path.display());
    Ok(())
}
