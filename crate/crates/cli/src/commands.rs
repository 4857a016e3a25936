use std::fs;
use std::path::PathBuf;

use clap::Args;
use lapran::config::ExperimentConfig;
use lapran::metrics::{evaluate, write_reports, AblationCurves};
use lapran::models::{InitProvenance, StageModel};
use lapran::mrcs::write_mrcs;
use lapran::pyramid_data::decode_image;
use lapran::reconstructor::{
    default_thresholds, reconstruct_file, save_bundle_manifest, select_stages, stage_dir, CascadeBundle,
};
use lapran::sensing::{beta_upper_bound, build_matrices, rip_lower_bound, Beta, SensingConfig};
use lapran::trainer::{ablate_fusion, save_checkpoint, train_pyramid, Checkpoint, EncodedDataset, PyramidData};
use lapran::{Error, Result};

use crate::run::{latest_run, load_checkpoints, load_config, load_data, new_run, write_run_files};
use crate::Global;

#[derive(Args, Debug)]
pub struct BudgetArgs {
    /// Base measurement count per channel.
    #[arg(long, conflicts_with = "cr")]
    m: Option<usize>,
    /// Target compression ratio of the final stage.
    #[arg(long)]
    cr: Option<f64>,
    /// Measurement increment ratio, e.g. `2` or `3/2`.
    #[arg(long, default_value = "2")]
    beta: String,
    /// Number of stages.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Signal dimension per channel.
    #[arg(long = "n", visible_alias = "N", default_value_t = 4096)]
    n: usize,
    /// Sparsity for the RIP measurement advisory.
    #[arg(long)]
    sparsity: Option<usize>,
}

pub fn budget(global: &Global, args: &BudgetArgs) -> Result<()> {
    let sensing = match (args.m, args.cr) {
        (None, None) if global.config.is_some() => load_config(global)?.sensing,
        (None, None) => return Err(Error::Config("budget needs --m, --cr or --config".into())),
        (m, cr) => {
            let beta: Beta = args.beta.parse()?;
            match (m, cr) {
                (Some(m), _) => SensingConfig::new(m, beta, args.k, args.n, 1, 0)?,
                (None, Some(cr)) => SensingConfig::for_compression_ratio(cr, beta, args.k, args.n, 1, 0)?,
                _ => unreachable!(),
            }
        }
    };
    let beta = sensing.beta();
    let note = if beta == beta_upper_bound() { " (upper bound)" } else { "" };
    println!("beta = {beta}{note}, k = {}, N = {}", sensing.stages(), sensing.signal_dim());
    println!("stage  side  measurements  cr");
    for stage in 1..=sensing.stages() {
        let side = lapran::pyramid_data::pyramid_side(stage);
        println!("{stage:>5}  {side:>4}  {:>12}  {}", sensing.stage_dim(stage)?, sensing.compression_ratio(stage)?);
    }
    if let Some(s) = args.sparsity {
        let bound = rip_lower_bound(s, sensing.signal_dim())?;
        let first = sensing.stage_dims().iter().position(|&q| q >= bound).map_or("none".to_string(), |i| (i + 1).to_string());
        println!("rip bound for sparsity {s}: {bound} measurements (first stage meeting it: {first})");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    /// Image to encode; resized to the configured side if needed.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keep only this many measurements per channel.
    #[arg(long)]
    keep: Option<usize>,
}

pub fn encode(global: &Global, args: &EncodeArgs) -> Result<()> {
    let config = load_config(global)?;
    let side = config.sensing.image_side().expect("validated");
    let bytes = fs::read(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let image = decode_image(&bytes, config.sensing.channels(), Some(side), &args.input)?;
    let mut set = build_matrices(&config.sensing).encode(&image)?;
    if let Some(keep) = args.keep {
        if keep > set.available() {
            return Err(Error::Config(format!("--keep {keep} exceeds the {} available measurements", set.available())));
        }
        set = set.truncated(keep);
    }
    write_mrcs(&args.output, &config.sensing, &set)?;
    log::info!("wrote {} measurements per channel to {}", set.available(), args.output.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    measurements: PathBuf,
    /// Run directory holding `bundle.json` and the stage weights.
    #[arg(long)]
    bundle: PathBuf,
    /// Defaults to `<bundle>/reconstructions/<file stem>`.
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn reconstruct(_global: &Global, args: &ReconstructArgs) -> Result<()> {
    let bundle = CascadeBundle::load(&args.bundle)?;
    let stem = args.measurements.file_stem().map_or("measurements".into(), |s| s.to_string_lossy().into_owned());
    let out = args.output.clone().unwrap_or_else(|| args.bundle.join("reconstructions").join(stem));
    let result = reconstruct_file(&args.measurements, &bundle, &out)?;
    let depth = result.pyramid.depth();
    if depth < bundle.sensing().stages() {
        log::warn!(
            "measurements enable {depth} of {} stages; emitting a {s}x{s} preview",
            bundle.sensing().stages(),
            s = result.pyramid.level(depth).side()
        );
    }
    for path in &result.images {
        println!("{}", path.display());
    }
    log::info!("{} stages in {:.3} ms", depth, result.timing.milliseconds);
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Train through this stage (overrides `train.stages`).
    #[arg(long)]
    stages: Option<usize>,
    /// Run id under the run root; defaults to the latest run of this config.
    #[arg(long)]
    run: Option<String>,
    /// Start a new run even if one exists.
    #[arg(long, conflicts_with = "run")]
    fresh: bool,
}

pub fn train(global: &Global, args: &TrainArgs) -> Result<()> {
    let mut config = load_config(global)?;
    if args.stages.is_some() {
        config.train.stages = args.stages;
        config.validate()?;
    }
    let hash = config.hash();
    let data = load_data(&config)?;
    let matrix = build_matrices(&config.sensing);
    let train = EncodedDataset::new(&data.train, &matrix)?;
    let val = EncodedDataset::new(&data.val, &matrix)?;
    let dir = match (&args.run, args.fresh) {
        (Some(id), _) => {
            let dir = global.run_dir.join(id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            dir
        }
        (None, false) => match latest_run(&global.run_dir, &config) {
            Some(dir) => dir,
            None => new_run(&global.run_dir, &config)?,
        },
        (None, true) => new_run(&global.run_dir, &config)?,
    };
    log::info!("run directory {}", dir.display());
    write_run_files(&dir, &config, Some(&data))?;
    save_bundle_manifest(&dir, &config.sensing, &default_thresholds(&config.sensing), &hash)?;
    let existing = load_checkpoints(&dir, config.sensing.stages(), &hash)?;
    let mut hook = |ck: &Checkpoint| save_checkpoint(&stage_dir(&dir, ck.stage), ck, &hash);
    let done = train_pyramid(PyramidData { train: &train, val: &val }, &matrix, &config.model, &config.train, existing, Some(&mut hook))?;
    for ck in &done {
        save_checkpoint(&stage_dir(&dir, ck.stage), ck, &hash)?;
        println!("stage {}: best epoch {} of {}, selection mse {:.6}", ck.stage, ck.best_epoch, ck.epoch, ck.best_mse);
    }
    println!("{}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory to evaluate; defaults to the latest run of this config.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Evaluate freshly initialized weights instead of a trained run.
    #[arg(long, conflicts_with = "bundle")]
    untrained: bool,
}

fn untrained_bundle(config: &ExperimentConfig) -> Result<CascadeBundle> {
    let weights = (1..=config.sensing.stages())
        .map(|stage| {
            let spec = config.model.stage_spec(&config.sensing, stage)?;
            let seed = config.train.seed;
            Ok(StageModel::<f32>::new(&spec, seed)?.export(InitProvenance::Fresh { seed }))
        })
        .collect::<Result<Vec<_>>>()?;
    CascadeBundle::new(config.sensing.clone(), weights, config.hash())
}

pub fn eval(global: &Global, args: &EvalArgs) -> Result<()> {
    let config = load_config(global)?;
    let hash = config.hash();
    let (bundle, dir) = if args.untrained {
        let dir = new_run(&global.run_dir, &config)?;
        write_run_files(&dir, &config, None)?;
        let bundle = untrained_bundle(&config)?;
        bundle.save(&dir)?;
        (bundle, dir)
    } else {
        let dir = match &args.bundle {
            Some(dir) => dir.clone(),
            None => latest_run(&global.run_dir, &config).ok_or(Error::MissingCheckpoint { stage: 1, needed_by: 1 })?,
        };
        (CascadeBundle::load(&dir)?, dir)
    };
    if bundle.config_hash() != hash {
        log::warn!("bundle was trained with config {}, evaluating with {hash}", bundle.config_hash());
    }
    let data = load_data(&config)?;
    let test = EncodedDataset::new(&data.test, &build_matrices(&config.sensing))?;
    let name = config.data.as_ref().map_or("data", |d| d.name.as_str());
    let ratios = config.eval_ratios();
    for &cr in &ratios {
        let available = (config.sensing.signal_dim() as f64 / cr).floor() as usize;
        select_stages(available, &bundle)?;
    }
    let reports = evaluate(&bundle, &test, config.sensing.signal_dim(), &ratios, name, &hash)?;
    let out = dir.join("eval");
    write_reports(&out, "quality", &reports, &hash)?;
    for r in &reports {
        let last = r.final_level();
        let ssim = last.ssim.map_or("-".into(), |v| format!("{v:.4}"));
        println!(
            "{} cr {}: {} stages, final {}x{} psnr {:.2} dB ssim {ssim} mse {:.6} ({} samples)",
            r.dataset, r.compression_ratio, r.depth, last.side, last.side, last.psnr, last.mse, r.samples
        );
    }
    println!("{}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Number of stages to train per variant (overrides `train.stages`).
    #[arg(long)]
    stages: Option<usize>,
}

pub fn ablate(global: &Global, args: &AblateArgs) -> Result<()> {
    let mut config = load_config(global)?;
    if args.stages.is_some() {
        config.train.stages = args.stages;
        config.validate()?;
    }
    let hash = config.hash();
    let seeds = match global.seed {
        Some(seed) => vec![seed],
        None => config.eval.ablation_seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(Error::Config("eval.ablation_seeds is empty".into()));
    }
    let data = load_data(&config)?;
    let matrix = build_matrices(&config.sensing);
    let train = EncodedDataset::new(&data.train, &matrix)?;
    let val = EncodedDataset::new(&data.val, &matrix)?;
    let test = EncodedDataset::new(&data.test, &matrix)?;
    let dir = new_run(&global.run_dir, &config)?;
    write_run_files(&dir, &config, Some(&data))?;
    let mut curves = AblationCurves { config_hash: hash, seeds: Vec::new(), runs: Vec::new() };
    for seed in seeds {
        log::info!("ablation seed {seed}");
        let cfg = lapran::trainer::TrainConfig { seed, ..config.train.clone() };
        let result = ablate_fusion(PyramidData { train: &train, val: &val }, &test, &matrix, &config.model, &cfg)?;
        curves.seeds.push(seed);
        curves.runs.push(result);
        curves.write(&dir.join("ablation"))?;
    }
    println!("mean test mse per stage (full-resolution reference / own level)");
    for (name, full, own) in [
        ("fused", curves.fused_mean(), curves.fused_own_level_mean()),
        ("no fusion", curves.no_fusion_mean(), curves.no_fusion_own_level_mean()),
    ] {
        let values: Vec<String> = full.iter().zip(&own).map(|(f, o)| format!("{f:.6}/{o:.6}")).collect();
        println!("{name:>9}: {}", values.join(" "));
    }
    println!("{}", dir.join("ablation").display());
    Ok(())
}
