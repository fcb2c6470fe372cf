use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use organpp::nifti::{read_labels, read_probs, read_probs_per_class};
use organpp::{apply_plan, Connectivity, Defect, DefectKind, PPPlan, PhantomOrgan, PhantomSpec, Side};
use serde_json::Value;

fn organpp(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_organpp"))
        .arg("--quiet")
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("binary runs")
}

fn ok(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let out = organpp(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args.iter().map(|a| a.as_ref().to_owned()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn organ(label: u8, radius: [f64; 2], side: Option<Side>, partner: Option<u8>) -> PhantomOrgan {
    PhantomOrgan { label_id: label, blob_count: 1, radius_range_mm: radius, lr_side: side, lr_partner: partner }
}

fn cv_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        shape: [20, 32, 40],
        spacing: [2.0, 1.0, 1.0],
        organs: vec![
            organ(1, [5.0, 8.0], None, None),
            organ(2, [3.0, 6.0], Some(Side::Right), Some(3)),
            organ(3, [3.0, 6.0], Some(Side::Left), Some(2)),
            organ(4, [4.0, 6.0], None, None),
            organ(5, [3.0, 5.0], None, None),
        ],
        defects: vec![
            Defect { kind: DefectKind::Satellite, target: 1, magnitude: 5.0 },
            Defect { kind: DefectKind::LrSwap, target: 3, magnitude: 0.3 },
            Defect { kind: DefectKind::Satellite, target: 4, magnitude: 3.0 },
        ],
        num_classes: None,
        prob_fixtures: 2,
        intensity_noise: 5.0,
    }
}

fn write_spec(dir: &Path, spec: &PhantomSpec) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Phantom cases → plan → post-processing → evaluation.
fn pipeline(root: &Path, jobs: &str) {
    let spec = write_spec(root, &cv_spec(11));
    let ph = root.join("ph");
    ok(&[&"--jobs", &jobs, &"phantom", &"--spec", &spec, &"--out", &ph, &"--cases", &"5"]);
    let manifest = ph.join("manifest.json");
    let plan = root.join("plan.json");
    let trace = root.join("trace.csv");
    ok(&[&"--jobs", &jobs, &"optimize-pp", &"--manifest", &manifest, &"--out", &plan, &"--trace", &trace]);
    ok(&[&"--jobs", &jobs, &"postprocess", &"--manifest", &manifest, &"--plan", &plan, &"--out", &root.join("pp")]);
    ok(&[&"--jobs", &jobs, &"evaluate", &"--manifest", &manifest, &"--plan", &plan, &"--out", &root.join("eval")]);
    ok(&[&"--jobs", &jobs, &"evaluate", &"--manifest", &root.join("pp/manifest.json"), &"--out", &root.join("eval_pp")]);
    ok(&[&"--jobs", &jobs, &"ensemble", &"--manifest", &manifest, &"--patch", &"8,16,16", &"--out", &root.join("ens")]);
}

#[test]
fn end_to_end_post_processing_does_not_lower_dice() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    pipeline(root, "2");

    let before = json(&root.join("eval/report.json"));
    let after = json(&root.join("eval/report_after.json"));
    let b = before["mean_dice"].as_f64().unwrap();
    let a = after["mean_dice"].as_f64().unwrap();
    assert!(a >= b, "after {a} < before {b}");
    assert!(a > b, "defects should have been repaired");
    for (label, d) in before["per_organ_dice"].as_object().unwrap() {
        assert!(after["per_organ_dice"][label].as_f64().unwrap() >= d.as_f64().unwrap(), "organ {label}");
    }
    // evaluating the post-processed files gives the same after-scores
    assert_eq!(json(&root.join("eval_pp/report.json"))["per_organ_dice"], after["per_organ_dice"]);

    let cmp = json(&root.join("eval/comparison.json"));
    assert_eq!(cmp["mean_after"], after["mean_dice"]);
    let trace = std::fs::read_to_string(root.join("trace.csv")).unwrap();
    assert!(trace.starts_with("organ,strategy,rate,mean_dice\n"));
    // 5 organs × (None, PP4, PP3, 6 × PP1, 6 × PP2)
    assert_eq!(trace.lines().count(), 1 + 5 * 15);

    for file in ["report.json", "confusion_mm3.csv", "confusion_percent.csv", "run_summary.json"] {
        assert!(root.join("eval").join(file).is_file(), "{file}");
    }
    let summary = json(&root.join("eval/run_summary.json"));
    assert_eq!(summary["command"], "evaluate");
    assert!(summary["timings_s"]["evaluate"].is_number());
    assert!(summary["configs"]["plan"].is_object());
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_summary.json" {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn job_count_does_not_change_outputs() {
    let one = tempfile::tempdir().unwrap();
    let many = tempfile::tempdir().unwrap();
    pipeline(one.path(), "1");
    pipeline(many.path(), "4");
    let names = files(one.path());
    assert_eq!(names, files(many.path()));
    assert!(names.len() > 40);
    for name in names {
        let a = std::fs::read(one.path().join(&name)).unwrap();
        let b = std::fs::read(many.path().join(&name)).unwrap();
        if name.extension().is_some_and(|e| e == "json") && name.ends_with("manifest.json") {
            // carried input paths differ by temp root only
            let strip = |bytes: Vec<u8>, root: &Path| String::from_utf8(bytes).unwrap().replace(&root.display().to_string(), "<root>");
            assert_eq!(strip(a, one.path()), strip(b, many.path()), "{}", name.display());
        } else {
            assert!(a == b, "{} differs between --jobs 1 and --jobs 4", name.display());
        }
    }
}

#[test]
fn directories_and_manifest_give_the_same_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = write_spec(root, &cv_spec(21));
    let ph = root.join("ph");
    ok(&[&"phantom", &"--spec", &spec, &"--out", &ph, &"--cases", &"3"]);
    let (preds, refs) = (root.join("preds"), root.join("refs"));
    std::fs::create_dir_all(&preds).unwrap();
    std::fs::create_dir_all(&refs).unwrap();
    for i in 0..3 {
        let case = ph.join(format!("case_{i:03}"));
        std::fs::copy(case.join("pred.nii.gz"), preds.join(format!("c{i}.nii.gz"))).unwrap();
        std::fs::copy(case.join("ref.nii.gz"), refs.join(format!("c{i}.nii.gz"))).unwrap();
    }
    let organs = ph.join("organs.json");
    let rates = "0.1,0.25,0.5,0.75,0.9,0.95";
    ok(&[&"optimize-pp", &"--preds", &preds, &"--refs", &refs, &"--organs", &organs, &"--rates", &rates, &"--out", &root.join("a.json")]);
    ok(&[&"optimize-pp", &"--manifest", &ph.join("manifest.json"), &"--out", &root.join("b.json")]);
    assert_eq!(std::fs::read(root.join("a.json")).unwrap(), std::fs::read(root.join("b.json")).unwrap());
    PPPlan::from_json(&std::fs::read_to_string(root.join("a.json")).unwrap()).unwrap();
}

#[test]
fn evaluate_prediction_equal_to_reference_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = write_spec(root, &cv_spec(31));
    ok(&[&"phantom", &"--spec", &spec, &"--out", &root.join("ph")]);
    let manifest = serde_json::json!({
        "organs": "ph/organs.json",
        "cases": [{"id": "same", "pred": "ph/ref.nii.gz", "ref": "ph/ref.nii.gz"}],
    });
    std::fs::write(root.join("m.json"), manifest.to_string()).unwrap();
    let out = ok(&[&"evaluate", &"--manifest", &root.join("m.json"), &"--out", &root.join("ev")]);
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout["mean_dice"], 1.0);
    let report = json(&root.join("ev/report.json"));
    assert_eq!(report["mean_dice"], 1.0);
    assert!(report["per_organ_dice"].as_object().unwrap().values().all(|d| d == 1.0));
}

#[test]
fn bundled_plan_through_the_cli_equals_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let organs = (1..=15u8)
        .map(|l| match l {
            2 => organ(2, [3.0, 6.0], Some(Side::Right), Some(3)),
            3 => organ(3, [3.0, 6.0], Some(Side::Left), Some(2)),
            11 => organ(11, [3.0, 6.0], Some(Side::Right), Some(12)),
            12 => organ(12, [3.0, 6.0], Some(Side::Left), Some(11)),
            _ => organ(l, [3.0, 6.0], None, None),
        })
        .collect();
    let spec = PhantomSpec {
        seed: 41,
        shape: [40, 64, 72],
        spacing: [2.0, 1.5, 1.5],
        organs,
        defects: vec![
            Defect { kind: DefectKind::LrSwap, target: 2, magnitude: 1.0 },
            Defect { kind: DefectKind::Satellite, target: 6, magnitude: 4.0 },
        ],
        num_classes: Some(16),
        prob_fixtures: 0,
        intensity_noise: 5.0,
    };
    let spec = write_spec(root, &spec);
    ok(&[&"phantom", &"--spec", &spec, &"--out", &root.join("ph")]);
    let pred_path = root.join("ph/pred.nii.gz");
    for (name, plan) in [("amos-task1", PPPlan::amos_task1()), ("amos-task2", PPPlan::amos_task2())] {
        let out = root.join(format!("{name}.nii.gz"));
        ok(&[&"postprocess", &"--input", &pred_path, &"--plan", &name, &"--out", &out]);
        let want = apply_plan(&read_labels(&pred_path).unwrap(), &plan, Connectivity::TwentySix).unwrap();
        assert_eq!(read_labels(&out).unwrap(), want, "{name}");
    }
    // the same plan as a file
    let plan_file = root.join("task1.json");
    std::fs::write(&plan_file, PPPlan::amos_task1().to_json().unwrap()).unwrap();
    let out = root.join("file.nii.gz");
    ok(&[&"postprocess", &"--input", &pred_path, &"--plan", &plan_file, &"--out", &out]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(root.join("amos-task1.nii.gz")).unwrap());
}

#[test]
fn ensemble_writes_4d_or_per_class_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = write_spec(root, &cv_spec(51));
    ok(&[&"phantom", &"--spec", &spec, &"--out", &root.join("ph")]);
    let manifest = root.join("ph/manifest.json");
    ok(&[&"ensemble", &"--manifest", &manifest, &"--out", &root.join("four")]);
    ok(&[&"ensemble", &"--manifest", &manifest, &"--per-class", &"--out", &root.join("split")]);
    let four = read_probs(root.join("four/phantom/probs.nii.gz")).unwrap();
    let parts: Vec<PathBuf> = (0..four.num_classes()).map(|k| root.join(format!("split/phantom/probs_class_{k}.nii.gz"))).collect();
    assert_eq!(read_probs_per_class(&parts).unwrap().probs(), four.probs());

    // members averaged by hand
    let members: Vec<_> = (0..2).map(|k| read_probs(root.join(format!("ph/probs_{k}.nii.gz"))).unwrap()).collect();
    for ((a, b), got) in members[0].as_slice().iter().zip(members[1].as_slice()).zip(four.as_slice()) {
        assert!((((*a as f64 + *b as f64) / 2.0) as f32 - got).abs() <= 1e-7);
    }
    assert_eq!(
        read_labels(root.join("four/phantom/pred.nii.gz")).unwrap(),
        organpp::argmax_labels(&four).unwrap()
    );
}

#[test]
fn preprocess_fits_ct_statistics_when_absent() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = write_spec(root, &cv_spec(61));
    ok(&[&"phantom", &"--spec", &spec, &"--out", &root.join("ph"), &"--cases", &"2"]);
    std::fs::write(root.join("pre.json"), r#"{"target_spacing":[4.0,2.0,2.0],"scheme":{"kind":"CT"}}"#).unwrap();
    ok(&[&"preprocess", &"--manifest", &root.join("ph/manifest.json"), &"--config", &root.join("pre.json"), &"--out", &root.join("pre")]);
    let cfg = json(&root.join("pre/preprocess.json"));
    assert_eq!(cfg["scheme"]["kind"], "CT");
    assert!(cfg["scheme"]["ct_std"].as_f64().unwrap() > 0.0);
    let labels = read_labels(root.join("pre/case_000/ref.nii.gz")).unwrap();
    assert_eq!(labels.geometry().shape(), [10, 16, 20]);
    assert_eq!(labels.geometry().spacing(), [4.0, 2.0, 2.0]);
    let image = organpp::nifti::read_scalar(root.join("pre/case_000/image.nii.gz")).unwrap();
    assert_eq!(image.geometry().shape(), [10, 16, 20]);
}

#[test]
fn exit_codes_follow_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let code = |out: Output| out.status.code().unwrap();

    // I/O
    assert_eq!(code(organpp(&[&"phantom", &"--spec", &root.join("none.json"), &"--out", &root.join("x")])), 2);

    // validation: bad flags, bad JSON, manifest naming missing files
    assert_eq!(code(organpp(&[&"evaluate", &"--bogus"])), 3);
    assert_eq!(code(organpp(&[&"--jobs", &"0", &"evaluate", &"--manifest", &"m.json", &"--out", &"x"])), 3);
    std::fs::write(root.join("bad.json"), "{ not json").unwrap();
    assert_eq!(code(organpp(&[&"phantom", &"--spec", &root.join("bad.json"), &"--out", &root.join("x")])), 3);
    let manifest = serde_json::json!({"cases": [{"id": "a", "pred": "missing.nii.gz", "ref": "missing.nii.gz"}]});
    std::fs::write(root.join("m.json"), manifest.to_string()).unwrap();
    let out = organpp(&[&"evaluate", &"--manifest", &root.join("m.json"), &"--out", &root.join("ev")]);
    assert_eq!(code(out), 3);
    assert!(!root.join("ev").exists(), "nothing is written when validation fails");
    assert_eq!(code(organpp(&[&"optimize-pp", &"--manifest", &root.join("m.json"), &"--rates", &"0.5,0.1", &"--out", &root.join("p.json")])), 3);

    // computation: a placement that cannot succeed
    let mut spec = cv_spec(1);
    spec.shape = [6, 6, 6];
    spec.organs.iter_mut().for_each(|o| o.radius_range_mm = [20.0, 25.0]);
    let spec = write_spec(root, &spec);
    assert_eq!(code(organpp(&[&"phantom", &"--spec", &spec, &"--out", &root.join("y")])), 4);
}
