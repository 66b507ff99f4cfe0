use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;

use maskcal_core::baselines::{quantile_heuristic_mask, train_quantile, QuantileModel};
use maskcal_core::calibration::{calibrate, CalibrationResult, Heuristic, SearchOptions};
use maskcal_core::dataset::{attach_masks, load_dataset};
use maskcal_core::evaluation::{
    evaluate, reports_to_csv, reports_to_json, svg_histogram, svg_scatter, threshold_from_quantile, MethodMasks,
};
use maskcal_core::io::{read_mask, read_tensor, write_atomic, write_image};
use maskcal_core::masker::{predict_mask, train_masker, MaskerModel, ModelKind, TrainConfig};
use maskcal_core::optimal::optimal_mask;
use maskcal_core::synthetic::{generate, write_synthetic, SyntheticSpec};
use maskcal_core::{optimize_mask, DistortionSpec, Error, ErrorProfile, Mask, OracleConfig, Shape, Split, TripletDataset};

use crate::*;

pub fn run(cmd: &Cmd, seed: Option<u64>) -> Result<()> {
    match cmd {
        Cmd::SynthGen(a) => synth_gen(a, seed),
        Cmd::TrainMasker(a) => train_masker_cmd(a, seed.unwrap_or(0)),
        Cmd::TrainQuantile(a) => train_quantile_cmd(a, seed.unwrap_or(0)),
        Cmd::PredictMask(a) => predict(a, false),
        Cmd::PredictQuantileMask(a) => predict(a, true),
        Cmd::Uni(a) => uni(a),
        Cmd::Oracle(a) => oracle(a),
        Cmd::ClosedForm(a) => closed_form(a),
        Cmd::Calibrate(a) => calibrate_cmd(a),
        Cmd::Apply(a) => apply(a),
        Cmd::Evaluate(a) => evaluate_cmd(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load(manifest: &Path, split: Option<Split>) -> Result<TripletDataset> {
    let ds = load_dataset(manifest, split).with_context(|| format!("loading {}", manifest.display()))?;
    if ds.is_empty() {
        match split {
            Some(s) => bail!("{} has no {s} records", manifest.display()),
            None => bail!("{} has no records", manifest.display()),
        }
    }
    Ok(ds)
}

fn resolve_alpha(opts: &AlphaOpts, manifest: &Path, d: &DistortionSpec) -> Result<f64> {
    match (opts.alpha, opts.alpha_quantile) {
        (Some(a), None) => Ok(a),
        (None, Some(q)) => {
            let train = load(manifest, Some(Split::Train))?;
            let dists = train
                .iter()
                .map(|r| d.distance(&r.y, &r.y_hat))
                .collect::<maskcal_core::Result<Vec<_>>>()?;
            let alpha = threshold_from_quantile(&dists, q)?;
            info!("alpha = {alpha} ({q}-quantile of {} train distortions)", dists.len());
            Ok(alpha)
        }
        _ => Err(usage("one of --alpha or --alpha-quantile is required")),
    }
}

fn synth_gen(a: &SynthGenArgs, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let mut spec = SyntheticSpec::from_json(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let records = generate(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let manifest = write_synthetic(&a.out, &spec, &records)?;
    info!("wrote {} records to {}", records.len(), manifest.display());
    Ok(())
}

fn train_config(t: &TrainOpts, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: t.learning_rate,
        batch_size: t.batch_size,
        epochs: t.epochs,
        seed,
        distortion: t.distortion,
        model: match t.model {
            ModelArg::Linear => ModelKind::Linear,
            ModelArg::Mlp => ModelKind::Mlp { hidden: t.hidden },
        },
        standardize: !t.no_standardize,
        ..TrainConfig::default()
    }
}

fn trace_csv(columns: &[(&str, &[f64])]) -> String {
    let mut out = String::from("epoch");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let n = columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
    for e in 0..n {
        out.push_str(&e.to_string());
        for (_, v) in columns {
            out.push(',');
            if let Some(x) = v.get(e) {
                out.push_str(&x.to_string());
            }
        }
        out.push('\n');
    }
    out
}

fn train_masker_cmd(a: &TrainMaskerArgs, seed: u64) -> Result<()> {
    let train = load(&a.train.manifest, Some(Split::Train))?;
    let cfg = TrainConfig {
        mu: a.mu,
        ..train_config(&a.train, seed)
    };
    let trained = train_masker(&train, &cfg)?;
    if let Some(last) = trained.loss_trace.last() {
        info!("final epoch loss {last}");
    }
    write_text(&a.train.out, &trained.model.to_json()?)?;
    if let Some(p) = &a.train.trace {
        write_text(p, &trace_csv(&[("loss", &trained.loss_trace)]))?;
    }
    Ok(())
}

fn train_quantile_cmd(a: &TrainQuantileArgs, seed: u64) -> Result<()> {
    let train = load(&a.train.manifest, Some(Split::Train))?;
    let cfg = train_config(&a.train, seed);
    let trained = train_quantile(&train, (a.lower, a.upper), &cfg)?;
    write_text(&a.train.out, &trained.model.to_json()?)?;
    if let Some(p) = &a.train.trace {
        write_text(p, &trace_csv(&[("lower", &trained.lower_trace), ("upper", &trained.upper_trace)]))?;
    }
    Ok(())
}

fn write_masks(dir: &Path, ids: &[String], masks: &[Mask]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ids.par_iter()
        .zip(masks)
        .try_for_each(|(id, m)| write_image(dir.join(format!("{id}.mskt")), m))?;
    Ok(())
}

fn mask_manifest(manifest: &Path, out_dir: &Path, out_manifest: Option<&PathBuf>, ids: &[String]) -> Result<()> {
    let out = out_manifest.cloned().unwrap_or_else(|| out_dir.join("manifest.jsonl"));
    attach_masks(manifest, &out, out_dir, ids)?;
    info!("manifest with masks: {}", out.display());
    Ok(())
}

fn predict(a: &PredictArgs, quantile: bool) -> Result<()> {
    let ds = load(&a.manifest, a.split)?;
    let text = std::fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let masks: Vec<Mask> = if quantile {
        let model = QuantileModel::from_json(&text)?;
        ds.records()
            .par_iter()
            .map(|r| quantile_heuristic_mask(&model, &r.x, &r.y_hat))
            .collect::<maskcal_core::Result<_>>()?
    } else {
        let model = MaskerModel::from_json(&text)?;
        ds.records()
            .par_iter()
            .map(|r| predict_mask(&model, &r.x, &r.y_hat))
            .collect::<maskcal_core::Result<_>>()?
    };
    let ids: Vec<String> = ds.iter().map(|r| r.id.clone()).collect();
    write_masks(&a.out_dir, &ids, &masks)?;
    mask_manifest(&a.manifest, &a.out_dir, a.out_manifest.as_ref(), &ids)
}

fn uni(a: &UniArgs) -> Result<()> {
    let alpha = resolve_alpha(&a.alpha, &a.manifest, &a.distortion)?;
    let cal = load(&a.manifest, Some(Split::Calibration))?;
    let res = calibrate(&cal, Heuristic::Uni, &a.distortion, alpha, a.beta, &SearchOptions::default())?;
    info!("mu_uni = {}", res.lambda);
    write_text(&a.out, &res.to_json()?)
}

fn oracle(a: &OracleArgs) -> Result<()> {
    let alpha = resolve_alpha(&a.alpha, &a.manifest, &a.distortion)?;
    let ds = load(&a.manifest, Some(a.split))?;
    let cfg = OracleConfig {
        mu: a.mu,
        mu_growth: a.mu_growth,
        step_size: a.step_size,
        max_iters: a.max_iters,
        target_alpha: alpha,
        ..OracleConfig::default()
    };
    cfg.validate()?;
    let outcomes: Vec<(Mask, usize, f64)> = ds
        .records()
        .par_iter()
        .map(|r| match optimize_mask(&r.y, &r.y_hat, &a.distortion, &cfg) {
            Ok(o) => Ok((o.mask, o.iterations, o.distortion)),
            Err(Error::NonConvergence {
                iterations,
                best,
                best_distortion,
                ..
            }) => {
                warn!("oracle did not reach alpha on {} (best {best_distortion})", r.id);
                Ok((*best, iterations, best_distortion))
            }
            Err(e) => Err(e),
        })
        .collect::<maskcal_core::Result<_>>()?;
    let ids: Vec<String> = ds.iter().map(|r| r.id.clone()).collect();
    let masks: Vec<Mask> = outcomes.iter().map(|o| o.0.clone()).collect();
    write_masks(&a.out_dir, &ids, &masks)?;
    let mut csv = String::from("id,mask_size,iterations,final_distortion\n");
    for (id, (m, it, d)) in ids.iter().zip(&outcomes) {
        csv.push_str(&format!("{id},{},{it},{d}\n", m.size()));
    }
    let path = a.csv.clone().unwrap_or_else(|| a.out_dir.join("oracle.csv"));
    write_text(&path, &csv)
}

fn closed_form(a: &ClosedFormArgs) -> Result<()> {
    if let Some(errors) = &a.errors {
        // raw tensor: errors are not intensities and must not be clipped to [0, 1]
        let d = read_tensor(errors).with_context(|| format!("reading {}", errors.display()))?;
        let profile = ErrorProfile::with_shape(d.data, Shape::from_dims(&d.dims)?, a.p, a.alpha)?;
        let out = optimal_mask(&profile)?;
        if out.slack {
            info!("alpha exceeds the total error; mask is all ones");
        }
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_image(&a.out, &out.mask)?;
        return Ok(());
    }
    let manifest = a.manifest.as_ref().ok_or_else(|| usage("--errors or --manifest is required"))?;
    let ds = load(manifest, a.split)?;
    let masks: Vec<Mask> = ds
        .records()
        .par_iter()
        .map(|r| {
            let d: Vec<f64> = r.y.values().iter().zip(r.y_hat.values()).map(|(y, h)| (y - h).abs().powf(a.p)).collect();
            Ok(optimal_mask(&ErrorProfile::with_shape(d, r.y.shape(), a.p, a.alpha)?)?.mask)
        })
        .collect::<maskcal_core::Result<_>>()?;
    let ids: Vec<String> = ds.iter().map(|r| r.id.clone()).collect();
    write_masks(&a.out, &ids, &masks)
}

fn calibrate_cmd(a: &CalibrateArgs) -> Result<()> {
    let alpha = resolve_alpha(&a.alpha, &a.manifest, &a.distortion)?;
    let cal = load(&a.manifest, Some(Split::Calibration))?;
    if a.heuristic.needs_attached_mask() && cal.iter().any(|r| r.heuristic_mask.is_none()) {
        bail!(
            "heuristic {} needs masks attached to every calibration record (see predict-mask)",
            a.heuristic
        );
    }
    let opts = SearchOptions {
        eps: a.eps,
        epsilon_denominator: a.epsilon_denominator,
        scan_fallback: !a.no_scan_fallback,
        grid_points: a.grid_points,
    };
    let res = calibrate(&cal, a.heuristic, &a.distortion, alpha, a.beta, &opts)?;
    if res.infeasible_count > 0 {
        warn!("{} calibration records were infeasible at the lower bound", res.infeasible_count);
    }
    info!("lambda = {} (index {} of {})", res.lambda, res.quantile_index, res.sample_count);
    write_text(&a.out, &res.to_json()?)
}

fn apply(a: &ApplyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.result).with_context(|| format!("reading {}", a.result.display()))?;
    let res = CalibrationResult::from_json(&text)?;
    let ds = load(&a.manifest, Some(a.split))?;
    let masks: Vec<Mask> = ds
        .records()
        .par_iter()
        .map(|r| res.apply(r.heuristic_mask.as_ref(), r.y.shape()))
        .collect::<maskcal_core::Result<_>>()?;
    let ids: Vec<String> = ds.iter().map(|r| r.id.clone()).collect();
    write_masks(&a.out_dir, &ids, &masks)?;
    mask_manifest(&a.manifest, &a.out_dir, a.out_manifest.as_ref(), &ids)
}

fn read_mask_dir(dir: &Path, ids: &[String]) -> Result<Vec<Mask>> {
    ids.par_iter()
        .map(|id| {
            let p = dir.join(format!("{id}.mskt"));
            read_mask(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let ds = load(&a.manifest, Some(a.split))?;
    let ids: Vec<String> = ds.iter().map(|r| r.id.clone()).collect();
    let mut methods = Vec::new();
    for spec in &a.methods {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--method expects name=dir, got `{spec}`")))?;
        methods.push(MethodMasks {
            method: name.to_string(),
            masks: read_mask_dir(Path::new(dir), &ids)?,
        });
    }
    let opt_sizes: Option<Vec<f64>> = match &a.opt {
        Some(dir) => Some(read_mask_dir(dir, &ids)?.iter().map(Mask::size).collect()),
        None => None,
    };
    let reports = evaluate(&ds, &methods, opt_sizes.as_deref(), &a.distortion, a.alpha, a.beta)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_text(&a.out_dir.join("report.json"), &reports_to_json(&reports)?)?;
    write_text(&a.out_dir.join("report.csv"), &reports_to_csv(&reports))?;
    if a.svg {
        let sizes: Vec<(String, Vec<f64>)> = methods
            .iter()
            .map(|m| (m.method.clone(), m.masks.iter().map(Mask::size).collect()))
            .collect();
        let mut series: Vec<(&str, &[f64])> = sizes.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        if let Some(o) = &opt_sizes {
            series.push(("opt", o));
        }
        write_text(&a.out_dir.join("sizes.svg"), &svg_histogram("mask size", &series, 20))?;
        if let Some(o) = &opt_sizes {
            for (name, v) in &sizes {
                let svg = svg_scatter(&format!("{name} vs opt"), o, v, "opt mask size", &format!("{name} mask size"));
                write_text(&a.out_dir.join(format!("scatter_{name}.svg")), &svg)?;
            }
        }
    }
    for r in &reports {
        info!("{}: size {:.4} coverage {:.4}", r.method, r.mean_size, r.coverage);
    }
    Ok(())
}
