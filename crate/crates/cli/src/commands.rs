use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use organpp::metrics::PlanComparison;
use organpp::nifti::{read_labels, read_probs, read_scalar, Datatype, NiftiImage};
use organpp::{
    apply_plan, argmax_labels, compute_ct_stats, ensemble_average, evaluate_cases, generate_phantom,
    normalize, optimize_plan, resample_labels, resample_scalar, EvalReport, LabelVolume, LookupScorer,
    OptimizerConfig, OrganTable, PPPlan, PhantomSpec, PreprocessConfig, ProbVolume,
    ResampleMode, ScalarVolume, SlidingWindowConfig, ThresholdScorer,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::manifest::{CaseEntry, Needs, RunManifest};
use crate::output::{write_atomic, write_image, write_json, RunSummary};
use crate::{progress, CaseSource, EnsembleArgs, EvaluateArgs, OptimizeArgs, PhantomArgs, PostprocessArgs, PreprocessArgs};

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_organs(flag: Option<&Path>, manifest: &RunManifest) -> CliResult<OrganTable> {
    match flag.or(manifest.organs.as_deref()) {
        Some(p) => Ok(OrganTable::from_json(&read_text(p)?)?),
        None => {
            progress(format_args!("no organ table given; using the AMOS label map"));
            Ok(OrganTable::amos())
        }
    }
}

fn load_plan(spec: &str) -> CliResult<PPPlan> {
    match spec {
        "amos-task1" => Ok(PPPlan::amos_task1()),
        "amos-task2" => Ok(PPPlan::amos_task2()),
        path => Ok(PPPlan::from_json(&read_text(Path::new(path))?)?),
    }
}

fn plan_source(flag: Option<&str>, manifest: &RunManifest) -> CliResult<String> {
    flag.map(str::to_string)
        .or_else(|| manifest.configs.get("plan").map(|p| p.display().to_string()))
        .ok_or_else(|| CliError::invalid("no plan given (--plan or manifest configs.plan)"))
}

fn load_cases(src: &CaseSource, needs: Needs) -> CliResult<RunManifest> {
    let m = match (&src.manifest, &src.preds, &src.refs) {
        (Some(m), _, _) => RunManifest::load(m)?,
        (None, Some(p), Some(r)) => RunManifest::from_dirs(p, r)?,
        _ => return Err(CliError::invalid("give --manifest or both --preds and --refs")),
    };
    m.validate(needs)?;
    Ok(m)
}

fn read_pairs(cases: &[CaseEntry]) -> CliResult<(Vec<LabelVolume>, Vec<LabelVolume>)> {
    let pairs: Vec<(LabelVolume, LabelVolume)> = cases
        .par_iter()
        .map(|c| {
            let pred = read_labels(c.pred.as_ref().expect("validated"))?;
            let reference = read_labels(c.reference.as_ref().expect("validated"))?;
            Ok::<_, organpp::Error>((pred, reference))
        })
        .collect::<Result<_, _>>()?;
    Ok(pairs.into_iter().unzip())
}

fn out_dir(flag: Option<&PathBuf>, manifest: &RunManifest) -> CliResult<PathBuf> {
    flag.or(manifest.output_dir.as_ref())
        .cloned()
        .ok_or_else(|| CliError::invalid("no output location (--out or manifest output_dir)"))
}

fn summary_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_summary.json")
    } else {
        out.with_file_name("run_summary.json")
    }
}

fn rel(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

pub fn preprocess(a: PreprocessArgs) -> CliResult<()> {
    let mut summary = RunSummary::new("preprocess");
    let m = RunManifest::load(&a.manifest)?;
    let out = out_dir(a.out.as_ref(), &m)?;
    let cfg_path = a
        .config
        .clone()
        .or_else(|| m.configs.get("preprocess").cloned())
        .ok_or_else(|| CliError::invalid("no preprocessing config (--config or manifest configs.preprocess)"))?;
    let mut raw: Value = serde_json::from_str(&read_text(&cfg_path)?)
        .map_err(|e| CliError::invalid(format!("{}: {e}", cfg_path.display())))?;
    let fit_ct = raw["scheme"]["kind"] == "CT" && raw["scheme"].get("ct_mean").is_none();
    m.validate(Needs { image: true, reference: fit_ct, ..Needs::default() })?;

    let images: Vec<ScalarVolume> = summary.time("read", || {
        m.cases.par_iter().map(|c| read_scalar(c.image.as_ref().expect("validated"))).collect::<Result<_, _>>()
    })?;
    if fit_ct {
        let masks: Vec<LabelVolume> = m
            .cases
            .par_iter()
            .map(|c| read_labels(c.reference.as_ref().expect("validated")))
            .collect::<Result<_, _>>()?;
        let scheme = summary.time("ct_stats", || compute_ct_stats(&images, &masks))?;
        raw["scheme"] = serde_json::to_value(&scheme).map_err(organpp::Error::from)?;
    }
    let cfg: PreprocessConfig = serde_json::from_value(raw).map_err(organpp::Error::from)?;
    cfg.validate()?;
    summary.config("preprocess", &cfg);

    let entries: Vec<CaseEntry> = summary.time("resample_normalize", || {
        m.cases
            .par_iter()
            .zip(images)
            .map(|(c, img)| -> CliResult<CaseEntry> {
                let dir = out.join(&c.id);
                let img = resample_scalar(&img, cfg.target_spacing, ResampleMode::Trilinear)?;
                let img = normalize(&img, &cfg.scheme)?;
                let image = dir.join("image.nii.gz");
                write_image(&image, &NiftiImage::from_scalar(&img, Datatype::F32)?)?;
                let mut entry = CaseEntry { id: c.id.clone(), image: Some(rel(&image, &out)), ..CaseEntry::default() };
                for (src, name, slot) in [(&c.pred, "pred.nii.gz", &mut entry.pred), (&c.reference, "ref.nii.gz", &mut entry.reference)] {
                    if let Some(src) = src {
                        let labels = resample_labels(&read_labels(src)?, cfg.target_spacing)?;
                        let path = dir.join(name);
                        write_image(&path, &NiftiImage::from_labels(&labels))?;
                        *slot = Some(rel(&path, &out));
                    }
                }
                Ok(entry)
            })
            .collect::<CliResult<_>>()
    })?;
    let out_manifest = RunManifest { cases: entries, organs: m.organs.clone(), ..RunManifest::default() };
    write_json(&out.join("manifest.json"), &out_manifest)?;
    write_json(&out.join("preprocess.json"), &cfg)?;
    summary.output(&out);
    summary.write(&summary_path(&out, true))
}

fn write_probs(dir: &Path, probs: &ProbVolume, per_class: bool) -> CliResult<Vec<PathBuf>> {
    if !per_class {
        let path = dir.join("probs.nii.gz");
        write_image(&path, &NiftiImage::from_probs(probs))?;
        return Ok(vec![path]);
    }
    let mut paths = Vec::new();
    for (k, class) in probs.probs().axis_iter(Axis(0)).enumerate() {
        let vol = ScalarVolume::new(probs.geometry().clone(), class.to_owned())?;
        let path = dir.join(format!("probs_class_{k}.nii.gz"));
        write_image(&path, &NiftiImage::from_scalar(&vol, Datatype::F32)?)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn ensemble(a: EnsembleArgs) -> CliResult<()> {
    let mut summary = RunSummary::new("ensemble");
    let m = RunManifest::load(&a.manifest)?;
    let out = out_dir(a.out.as_ref(), &m)?;
    m.validate(Needs { probs: true, image: a.bands.is_some(), ..Needs::default() })?;
    let window = match &a.patch {
        Some(p) if p.len() != 3 => return Err(CliError::invalid(format!("--patch needs three sizes, got {p:?}"))),
        Some(p) => {
            let cfg = SlidingWindowConfig {
                patch_size: [p[0], p[1], p[2]],
                step_fraction: a.step,
                gaussian_weighting: !a.no_gaussian,
                gaussian_sigma_fraction: a.sigma,
            };
            cfg.validate()?;
            Some(cfg)
        }
        None => None,
    };
    let bands: Option<ThresholdScorer> = match &a.bands {
        Some(p) => {
            let s: ThresholdScorer = serde_json::from_str(&read_text(p)?).map_err(organpp::Error::from)?;
            s.validate()?;
            Some(s)
        }
        None => None,
    };
    summary.config("sliding_window", &window);
    summary.config("threshold_scorer", &bands);
    summary.config("per_class", a.per_class);

    let entries: Vec<CaseEntry> = summary.time("ensemble", || {
        m.cases
            .par_iter()
            .map(|c| -> CliResult<CaseEntry> {
                let image = c.image.as_ref().map(read_scalar).transpose()?;
                let mut members = Vec::with_capacity(c.probs.len() + 1);
                for p in &c.probs {
                    let member = read_probs(p)?;
                    members.push(match &window {
                        Some(cfg) => {
                            let img = match &image {
                                Some(img) => img.clone(),
                                None => ScalarVolume::new(member.geometry().clone(), ndarray::Array3::zeros(member.geometry().shape()))?,
                            };
                            organpp::sliding_window_predict(&img, &LookupScorer::new(member), cfg)?
                        }
                        None => member,
                    });
                }
                if let (Some(scorer), Some(img)) = (&bands, &image) {
                    let cfg = window.clone().unwrap_or_else(|| SlidingWindowConfig::new(img.geometry().shape()));
                    members.push(organpp::sliding_window_predict(img, scorer, &cfg)?);
                }
                let avg = ensemble_average(&members)?;
                let dir = out.join(&c.id);
                let probs = write_probs(&dir, &avg, a.per_class)?;
                let pred = dir.join("pred.nii.gz");
                write_image(&pred, &NiftiImage::from_labels(&argmax_labels(&avg)?))?;
                Ok(CaseEntry {
                    id: c.id.clone(),
                    pred: Some(rel(&pred, &out)),
                    reference: c.reference.clone(),
                    image: c.image.clone(),
                    probs: if a.per_class { vec![] } else { probs.iter().map(|p| rel(p, &out)).collect() },
                })
            })
            .collect::<CliResult<_>>()
    })?;
    let out_manifest = RunManifest { cases: entries, organs: m.organs.clone(), ..RunManifest::default() };
    write_json(&out.join("manifest.json"), &out_manifest)?;
    summary.output(&out);
    summary.write(&summary_path(&out, true))
}

pub fn postprocess(a: PostprocessArgs) -> CliResult<()> {
    let mut summary = RunSummary::new("postprocess");
    summary.config("connectivity", a.connectivity.as_u8());
    if let Some(input) = &a.input {
        let out = a.out.clone().ok_or_else(|| CliError::invalid("--out is required with --input"))?;
        let plan = load_plan(a.plan.as_deref().ok_or_else(|| CliError::invalid("--plan is required with --input"))?)?;
        summary.config("plan", &plan);
        let pred = read_labels(input)?;
        let processed = summary.time("apply_plan", || apply_plan(&pred, &plan, a.connectivity))?;
        write_image(&out, &NiftiImage::from_labels(&processed))?;
        summary.output(&out);
        return summary.write(&summary_path(&out, false));
    }
    let m = RunManifest::load(a.manifest.as_ref().expect("clap enforces one source"))?;
    let out = out_dir(a.out.as_ref(), &m)?;
    let plan = load_plan(&plan_source(a.plan.as_deref(), &m)?)?;
    m.validate(Needs { pred: true, ..Needs::default() })?;
    summary.config("plan", &plan);
    let entries: Vec<CaseEntry> = summary.time("apply_plan", || {
        m.cases
            .par_iter()
            .map(|c| -> CliResult<CaseEntry> {
                let pred = read_labels(c.pred.as_ref().expect("validated"))?;
                let processed = apply_plan(&pred, &plan, a.connectivity)?;
                let path = out.join(format!("{}.nii.gz", c.id));
                write_image(&path, &NiftiImage::from_labels(&processed))?;
                Ok(CaseEntry { pred: Some(rel(&path, &out)), ..c.clone() })
            })
            .collect::<CliResult<_>>()
    })?;
    let out_manifest = RunManifest { cases: entries, organs: m.organs.clone(), ..RunManifest::default() };
    write_json(&out.join("manifest.json"), &out_manifest)?;
    summary.output(&out);
    summary.write(&summary_path(&out, true))
}

pub fn optimize(a: OptimizeArgs) -> CliResult<()> {
    let mut summary = RunSummary::new("optimize-pp");
    let m = load_cases(&a.cases, Needs { pred: true, reference: true, ..Needs::default() })?;
    let organs = load_organs(a.organs.as_deref(), &m)?;
    let mut strategies = a.strategies.clone();
    if !strategies.contains(&organpp::StrategyKind::None) {
        strategies.insert(0, organpp::StrategyKind::None);
    }
    let cfg = OptimizerConfig { rate_grid: a.rates.clone(), strategies, connectivity: a.connectivity };
    cfg.validate()?;
    summary.config("optimizer", &cfg);
    summary.config("cases", m.cases.iter().map(|c| &c.id).collect::<Vec<_>>());
    let (preds, refs) = summary.time("read", || read_pairs(&m.cases))?;
    let result = summary.time("optimize", || optimize_plan(&preds, &refs, &organs, &cfg))?;
    write_atomic(&a.out, format!("{}\n", result.plan.to_json()?).as_bytes())?;
    summary.output(&a.out);
    if let Some(trace) = &a.trace {
        write_atomic(trace, result.trace_csv().as_bytes())?;
        summary.output(trace);
    }
    for (label, s) in &result.plan.strategies {
        progress(format_args!("organ {label}: {s}"));
    }
    summary.write(&summary_path(&a.out, false))
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport, summary: &mut RunSummary) -> CliResult<()> {
    let files = [
        (format!("{stem}.json"), None),
        (format!("confusion{}_mm3.csv", stem.strip_prefix("report").unwrap_or("")), Some(report.confusion.to_csv_mm3())),
        (format!("confusion{}_percent.csv", stem.strip_prefix("report").unwrap_or("")), Some(report.confusion.to_csv_percent())),
    ];
    for (name, csv) in files {
        let path = dir.join(name);
        match csv {
            None => write_json(&path, report)?,
            Some(text) => write_atomic(&path, text.as_bytes())?,
        }
        summary.output(&path);
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut summary = RunSummary::new("evaluate");
    let m = load_cases(&a.cases, Needs { pred: true, reference: true, ..Needs::default() })?;
    let out = out_dir(a.out.as_ref(), &m)?;
    let organs = load_organs(a.organs.as_deref(), &m)?;
    let plan = match a.plan.as_deref() {
        Some(p) => Some(load_plan(p)?),
        None => None,
    };
    summary.config("organs", &organs);
    summary.config("plan", &plan);
    summary.config("connectivity", a.connectivity.as_u8());
    let (preds, refs) = summary.time("read", || read_pairs(&m.cases))?;
    let before = summary.time("evaluate", || evaluate_cases(&preds, &refs, &organs))?;
    write_report(&out, "report", &before, &mut summary)?;
    let mut stdout = json!({ "cases": before.case_count, "mean_dice": before.mean_dice });
    if let Some(plan) = &plan {
        let processed: Vec<LabelVolume> = summary.time("apply_plan", || {
            preds.par_iter().map(|p| apply_plan(p, plan, a.connectivity)).collect::<Result<_, _>>()
        })?;
        let after = evaluate_cases(&processed, &refs, &organs)?;
        write_report(&out, "report_after", &after, &mut summary)?;
        let cmp = PlanComparison::new(&before, &after, &organs, |l| plan.strategy(l).to_string());
        let path = out.join("comparison.json");
        write_json(&path, &cmp)?;
        summary.output(&path);
        stdout["mean_dice_after"] = json!(after.mean_dice);
    }
    println!("{stdout}");
    summary.write(&summary_path(&out, true))
}

/// Writes one phantom case into `dir` and returns its manifest entry.
fn write_phantom_case(spec: &PhantomSpec, id: &str, dir: &Path, base: &Path) -> CliResult<(CaseEntry, OrganTable)> {
    let p = generate_phantom(spec)?;
    let reference = dir.join("ref.nii.gz");
    let pred = dir.join("pred.nii.gz");
    let image = dir.join("image.nii.gz");
    write_image(&reference, &NiftiImage::from_labels(&p.reference))?;
    write_image(&pred, &NiftiImage::from_labels(&p.prediction))?;
    write_image(&image, &NiftiImage::from_scalar(&p.image, Datatype::F32)?)?;
    let mut probs = Vec::new();
    for (k, f) in p.prob_fixtures.iter().enumerate() {
        let path = dir.join(format!("probs_{k}.nii.gz"));
        write_image(&path, &NiftiImage::from_probs(f))?;
        probs.push(rel(&path, base));
    }
    let entry = CaseEntry {
        id: id.to_string(),
        pred: Some(rel(&pred, base)),
        reference: Some(rel(&reference, base)),
        image: Some(rel(&image, base)),
        probs,
    };
    Ok((entry, p.organs))
}

pub fn phantom(a: PhantomArgs) -> CliResult<()> {
    let mut summary = RunSummary::new("phantom");
    let spec = PhantomSpec::from_json(&read_text(&a.spec)?)?;
    summary.config("spec", &spec);
    let generated: Vec<(CaseEntry, OrganTable)> = summary.time("generate", || match a.cases {
        None => Ok(vec![write_phantom_case(&spec, "phantom", &a.out, &a.out)?]),
        Some(0) => Err(CliError::invalid("--cases must be at least 1")),
        Some(n) => (0..n)
            .into_par_iter()
            .map(|i| {
                let spec = PhantomSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() };
                let id = format!("case_{i:03}");
                write_phantom_case(&spec, &id, &a.out.join(&id), &a.out)
            })
            .collect(),
    })?;

    // smallest reference volume seen per organ across the generated cases
    let mut min_volumes: BTreeMap<u8, f64> = BTreeMap::new();
    for (_, table) in &generated {
        for o in &table.organs {
            let v = min_volumes.entry(o.label).or_insert(f64::INFINITY);
            *v = v.min(o.min_volume_mm3);
        }
    }
    let mut organs = generated[0].1.clone();
    for o in &mut organs.organs {
        o.min_volume_mm3 = min_volumes[&o.label];
    }
    let organs_path = a.out.join("organs.json");
    write_json(&organs_path, &organs)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    let manifest = RunManifest {
        cases: generated.into_iter().map(|(c, _)| c).collect(),
        organs: Some(PathBuf::from("organs.json")),
        ..RunManifest::default()
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    summary.output(&a.out);
    summary.write(&summary_path(&a.out, true))
}
