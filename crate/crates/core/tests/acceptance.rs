//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shipnet::attention::GateMode;
use shipnet::config::RunConfig;
use shipnet::data::{decode_ppm, generate_synthetic, SynthSpec};
use shipnet::experiment::{
    compare_runs, heatmap_run, prepare_data, prepare_out_dir, train_run, HeatmapRequest, RunOutcome, CHECKPOINT_DIR,
    COMPARE_FILE, LOG_FILE, METRICS_FILE,
};
use shipnet::gradsweep::{gradcheck_sweep, LINEAR_TOLERANCE, TOLERANCE};
use shipnet::heatmap::HeatmapMethod;
use shipnet::model::{ForwardOptions, Model, ModelConfig, Variant};
use shipnet::tensor::{Tape, Tensor};
use shipnet::train::{load_checkpoint, round2, save_checkpoint, MetricsReport, BEST_MARKER};

type Verdict = Result<String, String>;

struct Outcome {
    id: usize,
    title: &'static str,
    verdict: Verdict,
    seconds: f64,
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let rows = gradcheck_sweep(0).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let linear = rows
        .iter()
        .filter(|r| r.tolerance == LINEAR_TOLERANCE)
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let other = rows
        .iter()
        .filter(|r| r.tolerance == TOLERANCE)
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    let failing: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.kind).collect();
    check(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} kinds, max rel err {other:.2e} (< 1e-4), linear/matmul {linear:.2e} (< 1e-6), {secs:.1}s (< 120s){}",
            rows.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failing.join(","))
            }
        ),
    )
}

fn criterion_2() -> Verdict {
    let configs = 240;
    let (conv, depthwise) = common::conv_oracle_sweep(configs, 2024);
    let pool = common::maxpool_oracle_sweep(100, 2025);
    let attn = common::attention_oracle_sweep(60, 2026);
    check(
        conv < 1e-5 && pool <= 1e-6 && attn <= 1e-6 && configs >= 200,
        format!(
            "conv {configs} configs ({depthwise} depthwise) max |diff| {conv:.2e} (< 1e-5, f32); maxpool {pool:.2e}; attention {attn:.2e} (<= 1e-6)"
        ),
    )
}

fn table(report: &MetricsReport) -> [String; 7] {
    let r = |x: f64| round2(x);
    [
        r(report.accuracy),
        r(report.macro_avg.precision),
        r(report.macro_avg.recall),
        r(report.macro_avg.f1),
        r(report.weighted_avg.precision),
        r(report.weighted_avg.recall),
        r(report.weighted_avg.f1),
    ]
}

fn criterion_3() -> Verdict {
    let classes: Vec<String> = ["Bulk Carrier", "Cargo", "Container", "Oil Tanker"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let t1 = [(0.83, 0.81, 411), (0.93, 0.90, 308), (0.85, 0.76, 258), (0.88, 0.94, 691)];
    let t2 = [(0.94, 0.95, 405), (0.94, 0.93, 330), (0.91, 0.90, 254), (0.98, 0.98, 679)];
    let want1 = ["0.87", "0.87", "0.85", "0.86", "0.87", "0.87", "0.87"];
    let want2 = ["0.95", "0.94", "0.94", "0.94", "0.95", "0.95", "0.95"];
    let got1 = table(&MetricsReport::from_rows(&classes, &t1).map_err(|e| e.to_string())?);
    let got2 = table(&MetricsReport::from_rows(&classes, &t2).map_err(|e| e.to_string())?);
    check(
        got1 == want1 && got2 == want2,
        format!(
            "table 1 acc/macro/weighted {} | table 2 {}",
            got1.join(" "),
            got2.join(" ")
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut enhanced = ModelConfig::tiny(Variant::Enhanced);
    enhanced.enhanced.multiscale_fusion = false;
    let mut compared = 0;
    for (k, cfg) in [ModelConfig::tiny(Variant::Cbam), enhanced].into_iter().enumerate() {
        let full = Model::<f32>::build(&cfg, 100 + k as u64).map_err(|e| e.to_string())?;
        let mut skeleton = Model::<f32>::build(&cfg.skeleton(), 200 + k as u64).map_err(|e| e.to_string())?;
        if skeleton.store.copy_matching(&full.store) != skeleton.store.len() {
            return Err("skeleton parameters not all shared".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(300 + k as u64);
        for trial in 0..3 {
            let vals = common::random_values(&mut rng, 2 * 3 * 64 * 64);
            let x = Tensor::<f32>::from_f64(&[2, 3, 64, 64], &vals).map_err(|e| e.to_string())?;
            for train in [false, true] {
                let run = |m: &Model<f32>, gates| {
                    let tape = Tape::new();
                    let out = m.forward(&tape, tape.constant(x.clone()), ForwardOptions { train, gates });
                    out.map(|o| o.logits.value().data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>())
                };
                let a = run(&full, GateMode::Bypass).map_err(|e| e.to_string())?;
                let b = run(&skeleton, GateMode::Learned).map_err(|e| e.to_string())?;
                if a != b {
                    return Err(format!("{} trial {trial} train={train}: logits differ", cfg.variant));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} forward pairs bitwise equal (cbam, enhanced without fusion; eval and train mode)"))
}

fn corpus(root: &Path, per_class: usize) -> Result<PathBuf, String> {
    let dir = root.join(format!("synth_{per_class}"));
    if !dir.exists() {
        let spec = SynthSpec {
            per_class,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, &dir).map_err(|e| e.to_string())?;
    }
    Ok(dir)
}

fn desk_config(data: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in ["preset=tiny", "seed=42", "epochs=15", "batch_size=32", "lr=0.001", "workers=1"] {
        cfg.apply_override(kv).expect("valid key");
    }
    cfg.data = Some(data.to_path_buf());
    cfg
}

fn criterion_5(root: &Path, runs: &Path) -> Result<(Verdict, Vec<RunOutcome>), String> {
    let data = corpus(root, 250)?;
    let cfg = desk_config(&data);
    let t = Instant::now();
    let outcomes = compare_runs(&cfg, runs, |_, _| {}).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let acc = |v: Variant| outcomes.iter().find(|o| o.variant == v).map(|o| o.report.accuracy).unwrap_or(0.0);
    let (b, c, e) = (acc(Variant::Baseline), acc(Variant::Cbam), acc(Variant::Enhanced));
    let verdict = check(
        e >= 0.90 && e >= c - 0.02 && c >= b - 0.02 && secs <= 900.0,
        format!(
            "test acc baseline {b:.4} cbam {c:.4} enhanced {e:.4} (enhanced >= 0.90, enhanced >= cbam - 0.02, cbam >= baseline - 0.02); {secs:.0}s (<= 900s)"
        ),
    );
    Ok((verdict, outcomes))
}

fn small_config(data: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in ["preset=tiny", "seed=7", "epochs=4", "lr_every=3", "batch_size=16", "lr=0.001", "workers=1"] {
        cfg.apply_override(kv).expect("valid key");
    }
    cfg.data = Some(data.to_path_buf());
    cfg
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_6(root: &Path) -> Verdict {
    let data = corpus(root, 40)?;
    let mut cfg = small_config(&data);
    cfg.epochs = 3;
    let dirs = [root.join("det_a"), root.join("det_b")];
    for d in &dirs {
        prepare_out_dir(d, true).map_err(|e| e.to_string())?;
        compare_runs(&cfg, d, |_, _| {}).map_err(|e| e.to_string())?;
    }
    let mut files = vec![PathBuf::from(COMPARE_FILE)];
    for v in Variant::ALL {
        files.push(Path::new(v.as_str()).join(LOG_FILE));
        files.push(Path::new(v.as_str()).join(METRICS_FILE));
    }
    for f in &files {
        if read(&dirs[0].join(f))? != read(&dirs[1].join(f))? {
            return Err(format!("{} differs between runs", f.display()));
        }
    }
    Ok(format!(
        "two compare runs (3 variants x {} epochs, workers=1): {} log/metrics files byte-identical",
        cfg.epochs,
        files.len()
    ))
}

fn criterion_7(root: &Path) -> Verdict {
    let data = corpus(root, 40)?;
    let cfg = small_config(&data);
    let model = cfg.model_config(None).map_err(|e| e.to_string())?;
    let prepared = prepare_data(&cfg, model.input_size).map_err(|e| e.to_string())?;
    let (full, split) = (root.join("resume_full"), root.join("resume_split"));
    prepare_out_dir(&full, true).map_err(|e| e.to_string())?;
    prepare_out_dir(&split, true).map_err(|e| e.to_string())?;
    train_run(&cfg, cfg.variant, &prepared, &full, None, |_, _| {}).map_err(|e| e.to_string())?;
    let resume_at = 2;
    let mut first = cfg.clone();
    first.epochs = resume_at;
    train_run(&first, cfg.variant, &prepared, &split, None, |_, _| {}).map_err(|e| e.to_string())?;
    let ckpt = split.join(CHECKPOINT_DIR).join(format!("epoch_{resume_at:03}.ckpt"));
    // save -> load -> save is byte-identical
    let state = load_checkpoint::<f32>(&ckpt, Some(&prepared_model(&cfg, &prepared)?)).map_err(|e| e.to_string())?;
    let again = root.join("again.ckpt");
    save_checkpoint(&state, &again).map_err(|e| e.to_string())?;
    if read(&again)? != read(&ckpt)? {
        return Err("save -> load -> save changed the checkpoint bytes".into());
    }
    train_run(&cfg, cfg.variant, &prepared, &split, Some(&ckpt), |_, _| {}).map_err(|e| e.to_string())?;
    let last = format!("epoch_{:03}.ckpt", cfg.epochs);
    let same = |f: &Path| -> Result<bool, String> { Ok(read(&full.join(f))? == read(&split.join(f))?) };
    for f in [
        PathBuf::from(LOG_FILE),
        PathBuf::from(METRICS_FILE),
        Path::new(CHECKPOINT_DIR).join(&last),
        Path::new(CHECKPOINT_DIR).join(BEST_MARKER),
    ] {
        if !same(&f)? {
            return Err(format!("{} differs after resume", f.display()));
        }
    }
    Ok(format!(
        "{} run resumed at epoch {resume_at} of {} (lr decay after epoch 3): log, metrics, final checkpoint and best marker identical",
        cfg.variant, cfg.epochs
    ))
}

fn prepared_model(cfg: &RunConfig, data: &shipnet::experiment::PreparedData) -> Result<ModelConfig, String> {
    cfg.model_config(Some(data.classes.len())).map_err(|e| e.to_string())
}

fn criterion_8(root: &Path, runs: &Path) -> Verdict {
    let cbam_ckpt = {
        let dir = runs.join(Variant::Cbam.as_str()).join(CHECKPOINT_DIR);
        let marker = std::fs::read_to_string(dir.join(BEST_MARKER)).map_err(|e| e.to_string())?;
        dir.join(marker.trim())
    };
    let sample = root.join("heat_sample");
    if !sample.exists() {
        let spec = SynthSpec {
            per_class: 5,
            seed: 4242,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, &sample).map_err(|e| e.to_string())?;
    }
    let mut state = load_checkpoint::<f32>(&cbam_ckpt, None).map_err(|e| e.to_string())?;
    let zeroed = root.join("zero_gates.ckpt");
    let ids: Vec<_> = state
        .model
        .store
        .ids()
        .filter(|&id| state.model.store.name(id).contains(".cbam.spatial."))
        .collect();
    for id in ids {
        let shape = state.model.store.value(id).shape().to_vec();
        state.model.store.set_value(id, Tensor::zeros(&shape)).map_err(|e| e.to_string())?;
    }
    save_checkpoint(&state, &zeroed).map_err(|e| e.to_string())?;

    let mut trained = Vec::new();
    let mut uniform = true;
    let mut valid = 0;
    for class_dir in std::fs::read_dir(&sample).map_err(|e| e.to_string())? {
        let class_dir = class_dir.map_err(|e| e.to_string())?.path();
        for (ckpt, tag) in [(&cbam_ckpt, "trained"), (&zeroed, "zero")] {
            let out = root.join("heat_out").join(tag);
            let req = HeatmapRequest {
                checkpoint: ckpt.clone(),
                input: class_dir.clone(),
                method: HeatmapMethod::SpatialGate,
                stage: None,
                class: None,
                out: out.clone(),
            };
            for (path, map) in heatmap_run(&req).map_err(|e| e.to_string())? {
                let img = decode_ppm(&read(&path)?).map_err(|e| e.to_string())?;
                if (img.height(), img.width()) == (map.height, map.width) {
                    valid += 1;
                }
                match tag {
                    "trained" => trained.push(map.range()),
                    _ => uniform &= map.values.iter().all(|&v| v == 0.5),
                }
            }
        }
    }
    let varied = trained.iter().filter(|&&r| r > 0.1).count();
    let n = trained.len();
    check(
        n == 20 && valid == 2 * n && uniform && varied * 10 > 8 * n,
        format!(
            "{valid} valid P6 overlays; zero-weight gates uniform 0.5: {uniform}; trained maps with range > 0.1: {varied}/{n} (> 80%)"
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let runs = root.join("desk_compare");
    prepare_out_dir(&runs, true).expect("run dir");
    let mut results: Vec<Outcome> = Vec::new();
    let mut timed = |id, title, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let verdict = f();
        results.push(Outcome {
            id,
            title,
            verdict,
            seconds: t.elapsed().as_secs_f64(),
        });
        let r = results.last().expect("just pushed");
        let (tag, detail) = match &r.verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {} [{tag}] {}: {detail} ({:.1}s)", r.id, r.title, r.seconds);
    };
    timed(1, "gradient correctness", &mut criterion_1);
    timed(2, "kernel oracle equivalence", &mut criterion_2);
    timed(3, "metrics arithmetic vs published tables", &mut criterion_3);
    timed(4, "bypass equivalence", &mut criterion_4);
    let mut have_runs = false;
    timed(5, "desk-scale end-to-end", &mut || {
        let (v, _) = criterion_5(root, &runs)?;
        have_runs = true;
        v
    });
    timed(6, "determinism", &mut || criterion_6(root));
    timed(7, "checkpoint integrity", &mut || criterion_7(root));
    timed(8, "heatmap contract", &mut || {
        if !have_runs {
            return Err("no trained cbam checkpoint (criterion 5 did not run)".into());
        }
        criterion_8(root, &runs)
    });
    let failed: Vec<usize> = results.iter().filter(|r| r.verdict.is_err()).map(|r| r.id).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
