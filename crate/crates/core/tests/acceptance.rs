//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so progress and results print in order.
//! `LAPRAN_ACCEPTANCE=1,4,9` restricts the run to the listed criteria.

mod common;

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use lapran::config::ExperimentConfig;
use lapran::losses::{discriminator_loss, euclidean_loss, total_loss, EuclideanForm, LossWeights};
use lapran::metrics::{evaluate, AblationCurves};
use lapran::models::{residual_block_count, InitProvenance, ModelConfig, PerStage, StageModel};
use lapran::pyramid_data::{list_images, load_sources, prepare_dataset, ImageTensor};
use lapran::reconstructor::{reconstruct, select_stages, CascadeBundle};
use lapran::sensing::{beta_upper_bound, build_matrices, derive_stage_dims, rip_lower_bound, Beta, SensingConfig};
use lapran::trainer::{
    ablate_fusion, load_checkpoint, save_checkpoint, train_pyramid, train_stage, Checkpoint, EncodedDataset, PyramidData,
    StageInit, TrainConfig,
};
use lapran::Error;
use lapran_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// A shipped config with its data path resolved.
fn shipped(name: &str) -> ExperimentConfig {
    let path = workspace().join("configs").join(name);
    let mut config = ExperimentConfig::load(&path).unwrap();
    let data = config.data.as_mut().unwrap();
    data.path = path.parent().unwrap().join(&data.path);
    config
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn progress(ck: &Checkpoint) {
    let m = ck.history.last().unwrap();
    eprintln!(
        "    stage {} epoch {}: train {:.5} val {:.5} ({:.1}s)",
        ck.stage,
        ck.epoch,
        m.train_mse,
        m.val_mse.unwrap_or(f64::NAN),
        m.wall_seconds
    );
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder_filters: PerStage::Uniform(4),
        fused_map_channels: PerStage::Uniform(2),
        residual_filters: PerStage::Uniform(4),
        disc_filters: PerStage::Uniform(4),
        ..ModelConfig::default()
    }
}

fn random_bundle(sensing: &SensingConfig, model: &ModelConfig, seed: u64) -> CascadeBundle {
    let weights = (1..=sensing.stages())
        .map(|s| {
            let spec = model.stage_spec(sensing, s).unwrap();
            StageModel::<f32>::new(&spec, seed + s as u64).unwrap().export(InitProvenance::Fresh { seed: seed + s as u64 })
        })
        .collect();
    CascadeBundle::new(sensing.clone(), weights, "acceptance").unwrap()
}

fn sensing_invariants() -> Outcome {
    let trials = 1000;
    for seed in 0..trials {
        common::sensing_trial(seed)?;
    }
    Ok(format!("{trials} randomized trials: nesting exact, linearity and explicit product within 1e-5"))
}

fn budget_math() -> Outcome {
    for m in [1, 7, 64, 128, 512] {
        let dims = derive_stage_dims(m, Beta::integer(2), 4, Some(4096)).map_err(fail)?;
        if dims != [m, 2 * m, 4 * m, 8 * m] {
            return Err(format!("m = {m}: {dims:?}"));
        }
    }
    let upper = beta_upper_bound();
    let rip = rip_lower_bound(100, 4096).map_err(fail)?;
    check(upper == Beta::integer(4) && rip == 104, format!("[m, 2m, 4m, 8m] for 5 values of m; beta bound {upper}; rip(100, 4096) = {rip}"))
}

fn model_structure() -> Outcome {
    let model = shipped("mnist_cr5.toml").model;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0usize;
    for (channels, cr) in [(1, 5.0), (3, 10.0)] {
        let sensing = SensingConfig::for_compression_ratio(cr, Beta::integer(2), 4, 4096, channels, 1).map_err(fail)?;
        for stage in 1..=4 {
            let spec = model.stage_spec(&sensing, stage).map_err(fail)?;
            let net = StageModel::<f32>::new(&spec, 10 + stage as u64).map_err(fail)?;
            let blocks = residual_block_count(&net.generator.describe("gen"));
            if blocks != 3 {
                return Err(format!("stage {stage} has {blocks} residual blocks"));
            }
            let y: Vec<f32> = (0..2 * spec.measurement_len()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = Tensor::new(vec![2, spec.measurement_len()], y);
            let side = spec.output_side();
            let prev = spec.input_side().map(|s| {
                let v: Vec<f32> = (0..2 * channels * s * s).map(|_| rng.random_range(-1.0..=1.0)).collect();
                Tensor::new(vec![2, channels, s, s], v)
            });
            let parts = net.generator.infer_parts(prev.as_ref(), &y).map_err(fail)?;
            if parts.output.shape() != [2, channels, side, side] {
                return Err(format!("stage {stage} output shape {:?}", parts.output.shape()));
            }
            if let Some(prev) = &prev {
                if side != 2 * prev.shape()[2] {
                    return Err(format!("stage {stage} does not double the side"));
                }
                let context = net.generator.context(prev).map_err(fail)?;
                if context.shape() != [2, spec.measurement_len()] {
                    return Err(format!("stage {stage} context shape {:?}", context.shape()));
                }
                let u = parts.upscaled.as_ref().unwrap();
                for ((&o, &a), &b) in parts.pre_clamp.data().iter().zip(u.data()).zip(parts.residual.data()) {
                    if o != a + b {
                        return Err(format!("stage {stage}: pre-clamp {o} != {a} + {b}"));
                    }
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("8 random stages: 3 residual blocks each, sides double, context length = measurement length, {compared} pre-clamp sums exact"))
}

fn gradient_check() -> Outcome {
    let report = common::gradient_check_tiny_stage(11, 200, 1e-3);
    check(
        report.pass_rate() >= 0.95,
        format!("{} of {} coordinates within 1e-3 relative (worst {:.2e})", report.passed, report.checked, report.worst),
    )
}

fn loss_identities() -> Outcome {
    let d = discriminator_loss(&[0.5], &[0.5]).map_err(fail)?;
    let ln4 = 2.0 * std::f64::consts::LN_2;
    if (d - ln4).abs() > 1e-9 {
        return Err(format!("discriminator_loss(0.5, 0.5) = {d}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let no_adv = LossWeights { lambda_adv: 0.0, lambda_euc: 1.0 };
    for _ in 0..100 {
        let x: Vec<f32> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f32> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        for form in [EuclideanForm::Mse, EuclideanForm::Norm] {
            let euc = euclidean_loss(&x, &t, 3, form).map_err(fail)?;
            let total = total_loss(euc, rng.random_range(0.0..10.0), &no_adv);
            if total.to_bits() != euc.to_bits() {
                return Err(format!("total_loss {total} differs from euclidean_loss {euc}"));
            }
            let zero = euclidean_loss(&x, &x, 3, form).map_err(fail)?;
            if zero != 0.0 {
                return Err(format!("euclidean_loss(x, x) = {zero}"));
            }
        }
    }
    Ok(format!("D(0.5, 0.5) = {d:.12}; lambda_adv = 0 is bit-exact; euclidean_loss(x, x) = 0"))
}

fn overfit() -> Outcome {
    let config = shipped("mnist_cr5.toml");
    let data = config.data.as_ref().unwrap();
    let paths: Vec<PathBuf> = list_images(&data.path).map_err(fail)?.into_iter().take(10).collect();
    let images: Vec<ImageTensor> =
        load_sources(&paths, 1, data.resize).map_err(fail)?.into_iter().map(|s| s.image).collect();
    let matrix = build_matrices(&config.sensing);
    let encoded = EncodedDataset::new(&images, &matrix).map_err(fail)?;
    let stage1 = encoded.stage_data(1, &[]).map_err(fail)?;
    let spec = config.model.stage_spec(&config.sensing, 1).map_err(fail)?;
    let cfg = TrainConfig {
        batch_size: 10,
        max_epochs: 200,
        early_stop_patience: 200,
        loss: LossWeights { lambda_adv: 0.0, lambda_euc: 1.0 },
        ..config.train.clone()
    };
    let ck = train_stage(&spec, &stage1, &stage1, StageInit::Fresh, &cfg, None).map_err(fail)?;
    let first = ck.history[0].train_mse;
    let (epoch, best) = ck
        .history
        .iter()
        .map(|m| (m.epoch, m.train_mse))
        .fold((0, f64::INFINITY), |acc, (e, v)| if v < acc.1 { (e, v) } else { acc });
    let reached = ck.history.iter().find(|m| m.train_mse * 10.0 <= first).map(|m| m.epoch);
    let detail = format!("10 images, epoch-1 train mse {first:.5}, best {best:.6} at epoch {epoch}, 10x drop at epoch {reached:?}");
    check(reached.is_some(), detail)
}

fn fusion_ablation() -> Outcome {
    let config = shipped("cifar10_cr10.toml");
    let mut data_cfg = config.data.clone().unwrap();
    data_cfg.limit = Some(2000);
    let side = config.sensing.image_side().unwrap();
    let data = prepare_dataset(&data_cfg, config.sensing.channels(), side).map_err(fail)?;
    let total = data.train.len() + data.val.len() + data.test.len();
    let matrix = build_matrices(&config.sensing);
    let train = EncodedDataset::new(&data.train, &matrix).map_err(fail)?;
    let val = EncodedDataset::new(&data.val, &matrix).map_err(fail)?;
    let test = EncodedDataset::new(&data.test, &matrix).map_err(fail)?;
    let stages = config.train.stages.unwrap_or(2);
    if stages < 2 || config.train.max_epochs > 20 {
        return Err(format!("shipped profile trains {stages} stages for {} epochs", config.train.max_epochs));
    }
    let mut curves = AblationCurves { config_hash: config.hash(), seeds: Vec::new(), runs: Vec::new() };
    for &seed in &config.eval.ablation_seeds {
        let cfg = TrainConfig { seed, ..config.train.clone() };
        let run = ablate_fusion(PyramidData { train: &train, val: &val }, &test, &matrix, &config.model, &cfg).map_err(fail)?;
        eprintln!("    seed {seed}: fused {:?} no fusion {:?}", run.fused, run.no_fusion);
        curves.seeds.push(seed);
        curves.runs.push(run);
    }
    curves.write(&Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ablation")).map_err(fail)?;
    let (fused, plain) = (curves.fused_mean(), curves.no_fusion_mean());
    let drop = 1.0 - fused[1] / fused[0];
    let detail = format!(
        "{total} images, cr {:.2}, {} seeds: fused {:.5} -> {:.5} ({:.1}% lower), no fusion stage 2 {:.5}",
        config.sensing.compression_ratio(config.sensing.stages()).map_err(fail)?,
        curves.seeds.len(),
        fused[0],
        fused[1],
        100.0 * drop,
        plain[1]
    );
    check(curves.seeds.len() >= 3 && drop >= 0.10 && fused[1] < plain[1], detail)
}

/// Epoch budget per stage for the quality-floor run; later stages cost
/// far more per epoch.
const QUALITY_EPOCHS: [usize; 4] = [30, 20, 10, 3];

fn quality_floor() -> Outcome {
    let config = shipped("mnist_cr5.toml");
    let mut data_cfg = config.data.clone().unwrap();
    data_cfg.limit = Some(5000);
    let side = config.sensing.image_side().unwrap();
    let data = prepare_dataset(&data_cfg, 1, side).map_err(fail)?;
    let total = data.train.len() + data.val.len() + data.test.len();
    let matrix = build_matrices(&config.sensing);
    let train = EncodedDataset::new(&data.train, &matrix).map_err(fail)?;
    let val = EncodedDataset::new(&data.val, &matrix).map_err(fail)?;
    let test = EncodedDataset::new(&data.test, &matrix).map_err(fail)?;
    let mut done = Vec::new();
    let mut hook = |ck: &Checkpoint| {
        progress(ck);
        Ok(())
    };
    for (stage, &epochs) in QUALITY_EPOCHS.iter().enumerate() {
        let cfg = TrainConfig { stages: Some(stage + 1), max_epochs: epochs.min(config.train.max_epochs), ..config.train.clone() };
        done = train_pyramid(PyramidData { train: &train, val: &val }, &matrix, &config.model, &cfg, done, Some(&mut hook))
            .map_err(fail)?;
    }
    let weights = done.iter().map(|ck| ck.weights.clone()).collect();
    let bundle = CascadeBundle::new(config.sensing.clone(), weights, config.hash()).map_err(fail)?;
    let cr = config.sensing.compression_ratio(4).map_err(fail)?;
    let reports = evaluate(&bundle, &test, config.sensing.signal_dim(), &[cr], "mnist", &config.hash()).map_err(fail)?;
    let level = reports[0].final_level();
    let detail = format!(
        "{total} images, cr {cr:.2}, epochs {QUALITY_EPOCHS:?}: {} test patches, stage {} psnr {:.2} dB, ssim {:.4}",
        level.samples,
        level.stage,
        level.psnr,
        level.ssim.unwrap_or(f64::NAN)
    );
    check(level.stage == 4 && level.psnr >= 20.0, detail)
}

fn flexible_reconstruction() -> Outcome {
    let sensing = SensingConfig::for_compression_ratio(5.0, Beta::integer(2), 4, 4096, 1, 7).map_err(fail)?;
    let bundle = random_bundle(&sensing, &small_model(), 20);
    let image = common::synthetic_images(1, 64, 4).pop().unwrap();
    let set = build_matrices(&sensing).encode(&image).map_err(fail)?;
    let full = reconstruct(&set, &bundle).map_err(fail)?;
    let dims = sensing.stage_dims().to_vec();
    for available in 0..dims[0] {
        if !matches!(select_stages(available, &bundle), Err(Error::InsufficientMeasurements { .. })) {
            return Err(format!("{available} measurements should be refused"));
        }
    }
    for available in dims[0]..=set.available() {
        let predicted = dims.iter().filter(|&&q| q <= available).count();
        let selected = select_stages(available, &bundle).map_err(fail)?;
        let pyramid = reconstruct(&set.truncated(available), &bundle).map_err(fail)?;
        if selected != predicted || pyramid.depth() != predicted {
            return Err(format!("{available} measurements: predicted {predicted}, selected {selected}, got {}", pyramid.depth()));
        }
        if pyramid != full.truncated(predicted) {
            return Err(format!("{available} measurements: prefix reconstruction differs from the truncated full one"));
        }
    }
    Ok(format!("every prefix length {}..={} of {dims:?}: depth as predicted, levels bit-identical", dims[0], set.available()))
}

fn runtime_invariance() -> Outcome {
    let model = shipped("mnist_cr5.toml").model;
    let image = common::synthetic_images(1, 64, 9).pop().unwrap();
    let mut medians = Vec::new();
    for cr in [5.0, 10.0, 20.0, 30.0] {
        let sensing = SensingConfig::for_compression_ratio(cr, Beta::integer(2), 4, 4096, 1, 3).map_err(fail)?;
        let bundle = random_bundle(&sensing, &model, 30);
        let set = build_matrices(&sensing).encode(&image).map_err(fail)?;
        for _ in 0..3 {
            reconstruct(&set, &bundle).map_err(fail)?;
        }
        let mut times: Vec<f64> = (0..15)
            .map(|_| {
                let start = Instant::now();
                let depth = reconstruct(&set, &bundle).unwrap().depth();
                assert_eq!(depth, 4);
                start.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(f64::total_cmp);
        medians.push((cr, times[times.len() / 2]));
    }
    let fastest = medians.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let slowest = medians.iter().map(|m| m.1).fold(0.0, f64::max);
    let listed: Vec<String> = medians.iter().map(|(cr, ms)| format!("cr {cr}: {ms:.2} ms")).collect();
    check(slowest < 2.0 * fastest, format!("median of 15, 4 stages: {}; ratio {:.2}", listed.join(", "), slowest / fastest))
}

fn history(ck: &Checkpoint) -> Vec<(f64, Option<f64>, f64, f64)> {
    ck.history.iter().map(|m| (m.train_mse, m.val_mse, m.d_loss, m.g_adv_loss)).collect()
}

fn isolation_and_determinism() -> Outcome {
    let matrix = build_matrices(&SensingConfig::new(16, Beta::integer(2), 2, 256, 1, 5).unwrap());
    let train = EncodedDataset::new(&common::synthetic_images(24, 16, 1), &matrix).map_err(fail)?;
    let val = EncodedDataset::new(&common::synthetic_images(8, 16, 2), &matrix).map_err(fail)?;
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 3,
        seed: 3,
        loss: LossWeights { lambda_adv: 1e-2, lambda_euc: 1.0 },
        ..TrainConfig::default()
    };
    let data = PyramidData { train: &train, val: &val };

    let stage1 = train_pyramid(data, &matrix, &small_model(), &TrainConfig { stages: Some(1), ..cfg.clone() }, Vec::new(), None)
        .map_err(fail)?;
    let frozen = stage1[0].weights.clone();
    let both = train_pyramid(data, &matrix, &small_model(), &cfg, stage1, None).map_err(fail)?;
    if both[0].weights != frozen {
        return Err("stage 1 weights changed while stage 2 trained".into());
    }

    let again = train_pyramid(data, &matrix, &small_model(), &cfg, Vec::new(), None).map_err(fail)?;
    for (a, b) in both.iter().zip(&again) {
        if history(a) != history(b) || a.weights != b.weights {
            return Err(format!("stage {} differs between two runs with seed {}", a.stage, cfg.seed));
        }
    }

    let spec = small_model().stage_spec(matrix.config(), 1).map_err(fail)?;
    let t1 = train.stage_data(1, &[]).map_err(fail)?;
    let v1 = val.stage_data(1, &[]).map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let saved = RefCell::new(false);
    let mut hook = |ck: &Checkpoint| {
        if ck.epoch == 1 {
            save_checkpoint(dir.path(), ck, "acceptance")?;
            *saved.borrow_mut() = true;
        }
        Ok(())
    };
    let straight = train_stage(&spec, &t1, &v1, StageInit::Fresh, &cfg, Some(&mut hook)).map_err(fail)?;
    let (loaded, _) = load_checkpoint(dir.path()).map_err(fail)?;
    let resumed = train_stage(&spec, &t1, &v1, StageInit::Resume(Box::new(loaded)), &cfg, None).map_err(fail)?;
    let same = *saved.borrow()
        && history(&resumed) == history(&straight)
        && resumed.latest == straight.latest
        && resumed.gen_optimizer == straight.gen_optimizer
        && resumed.disc_optimizer == straight.disc_optimizer;
    check(
        same,
        format!("frozen stage bit-identical; {} stages reproduce; resume after epoch 1 matches epochs 2..={}", both.len(), cfg.max_epochs),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "sensing invariants", sensing_invariants),
    (2, "budget math", budget_math),
    (3, "model structure", model_structure),
    (4, "gradient check", gradient_check),
    (5, "loss identities", loss_identities),
    (6, "overfit sanity", overfit),
    (7, "fusion ablation trend", fusion_ablation),
    (8, "quality floor", quality_floor),
    (9, "flexible reconstruction", flexible_reconstruction),
    (10, "runtime invariance", runtime_invariance),
    (11, "training isolation and determinism", isolation_and_determinism),
];

fn selected() -> Option<Vec<usize>> {
    let list = std::env::var("LAPRAN_ACCEPTANCE").ok()?;
    Some(list.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let seconds = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] criterion {id:>2} {name}: {detail} ({seconds:.1}s)");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
