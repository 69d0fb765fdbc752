use std::fs;
use std::path::{Path, PathBuf};

use kkl::learning::{resume_autoencoder, resume_supervised, train_autoencoder, train_supervised, TrainingLog, TrainingMeta};
use kkl::linfilter::{build_design, FilterDesign};
use kkl::observer::{
    contraction_check, error_heatmap, evaluate_trajectory, ContractionOptions, ContractionOutcome, TrajectoryConfig,
};
use kkl::sampling::{cell_centers, convergence_time, generate_dataset, Dataset, DatasetMeta, GenerateOptions};
use kkl::tuning::sweep;
use kkl::{AutoencoderModel64, Dataset64, LearnedObserver64, System64};
use serde_json::json;

use crate::config::{ExperimentConfig, TrainerMode};
use crate::error::{CliError, CliResult};

pub struct Context {
    pub config: ExperimentConfig,
    pub digest: String,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf) -> CliResult<Self> {
        config.validate()?;
        fs::create_dir_all(&out).map_err(CliError::io(format!("creating {}", out.display())))?;
        let digest = config.digest();
        Ok(Self { config, digest, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(CliError::io(format!("writing {}", p.display())))?;
        Ok(p)
    }

    fn write_csv(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(CliError::io(format!("formatting {name}")))?;
        self.write(name, &buf)
    }

    /// JSON sidecar carrying the config digest of a CSV artifact.
    fn write_sidecar(&self, name: &str, mut body: serde_json::Value) -> CliResult<PathBuf> {
        body["config_digest"] = json!(self.digest);
        self.write(name, serde_json::to_string_pretty(&body).expect("json").as_bytes())
    }

    fn check_digest(&self, what: &str, found: Option<&str>) -> CliResult<()> {
        match found {
            Some(d) if d == self.digest => Ok(()),
            Some(d) => Err(CliError::Config(format!(
                "config digest mismatch: {what} was produced with {d}, current config is {}",
                self.digest
            ))),
            None => Err(CliError::Config(format!("{what} carries no config digest"))),
        }
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))
}

pub enum Checkpoint {
    Supervised(LearnedObserver64),
    Autoencoder(AutoencoderModel64),
}

impl Checkpoint {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read(path)?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(kkl::KklError::from)?;
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("supervised") => Ok(Checkpoint::Supervised(LearnedObserver64::from_json(&text)?)),
            Some("autoencoder") => Ok(Checkpoint::Autoencoder(AutoencoderModel64::from_json(&text)?)),
            other => Err(CliError::Config(format!("{}: unknown checkpoint kind {other:?}", path.display()))),
        }
    }

    fn meta(&self) -> Option<&TrainingMeta> {
        match self {
            Checkpoint::Supervised(m) => m.meta.as_ref(),
            Checkpoint::Autoencoder(m) => m.meta.as_ref(),
        }
    }

    fn d_x(&self) -> usize {
        match self {
            Checkpoint::Supervised(m) => m.d_x,
            Checkpoint::Autoencoder(m) => m.d_x,
        }
    }

    fn verify(&self, ctx: &Context, system: &System64) -> CliResult<()> {
        ctx.check_digest("checkpoint", self.meta().and_then(|m| m.experiment_digest.as_deref()))?;
        if self.d_x() != system.dim_x() {
            return Err(CliError::Config(format!("checkpoint has d_x = {}, system {} has {}", self.d_x(), system.name, system.dim_x())));
        }
        Ok(())
    }

    /// Frequencies to evaluate with their designs.
    fn designs(&self, omegas: &[f64], system: &System64) -> CliResult<Vec<FilterDesign>> {
        match self {
            Checkpoint::Supervised(m) => omegas.iter().map(|&w| Ok(m.design(w)?)).collect(),
            Checkpoint::Autoencoder(m) => {
                if m.d_y != system.dim_y() {
                    return Err(CliError::Config("checkpoint output dimension does not match the system".into()));
                }
                Ok(vec![m.design()?])
            }
        }
    }
}

fn dataset_meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn load_dataset(csv: &Path) -> CliResult<Dataset64> {
    let meta: DatasetMeta = serde_json::from_str(&read(&dataset_meta_path(csv))?).map_err(kkl::KklError::from)?;
    Ok(Dataset::from_csv(&read(csv)?, meta)?)
}

pub fn cmd_generate(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    let system = cfg.system_model()?;
    let omegas = cfg.omegas()?;
    let opts = GenerateOptions {
        n: cfg.sampler.n,
        sampler: cfg.sampler.method,
        seed: cfg.sampler.seed,
        dt: cfg.dt(&system),
        z0: None,
        shared_points: cfg.sampler.shared_points,
        blowup_bound: cfg.system.blowup_bound,
    };
    log::info!("generating {} x {} pairs for {}", omegas.len(), opts.n, system.name);
    let mut ds = generate_dataset(&system, &omegas, &opts)?;
    ds.meta.config_digest = Some(ctx.digest.clone());
    let csv = ctx.write_csv("dataset.csv", |w| ds.write_csv(w))?;
    ctx.write("dataset.json", ds.meta_json()?.as_bytes())?;
    println!("omega_c,t_c");
    for [w, t] in &ds.meta.t_c {
        println!("{w},{t}");
    }
    println!("wrote {} pairs to {} (max roundtrip error {:.3e})", ds.len(), csv.display(), ds.meta.max_roundtrip_error);
    Ok(())
}

pub struct TrainArgs {
    pub dataset: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Restrict supervised training to one frequency of the dataset.
    pub fine_tune: Option<f64>,
}

fn print_log(log: &TrainingLog) {
    if let Some(last) = log.last() {
        let parts: Vec<String> = log.columns.iter().zip(&last.losses).map(|(c, v)| format!("{c} {v:.6e}")).collect();
        println!("epochs {}: {}", log.epochs.len(), parts.join(", "));
    }
}

pub fn cmd_train(ctx: &Context, args: &TrainArgs) -> CliResult<()> {
    let cfg = &ctx.config;
    let system = cfg.system_model()?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        ck.verify(ctx, &system)?;
    }
    let (json, log) = match cfg.trainer.mode {
        TrainerMode::Supervised => {
            let path = args.dataset.clone().unwrap_or_else(|| ctx.path("dataset.csv"));
            let mut ds = load_dataset(&path)?;
            ctx.check_digest("dataset", ds.meta.config_digest.as_deref())?;
            if ds.meta.d_x != system.dim_x() {
                return Err(CliError::Config(format!("dataset has d_x = {}, system {} has {}", ds.meta.d_x, system.name, system.dim_x())));
            }
            if let Some(w) = args.fine_tune {
                let keep: Vec<_> = ds.pairs.iter().filter(|p| (p.omega_c - w).abs() <= 1e-12 * w).cloned().collect();
                if keep.is_empty() {
                    return Err(CliError::Config(format!("fine-tune frequency {w} is not in the dataset")));
                }
                ds.pairs = keep;
            }
            let tc = cfg.train_config();
            let (obs, log) = match resume {
                None => train_supervised(&ds, &tc)?,
                Some(Checkpoint::Supervised(init)) => resume_supervised(init, &ds, &tc)?,
                Some(Checkpoint::Autoencoder(_)) => {
                    return Err(CliError::Config("trainer.mode: supervised mode cannot resume an autoencoder checkpoint".into()))
                }
            };
            (obs.to_json()?, log)
        }
        TrainerMode::Autoencoder => {
            if args.fine_tune.is_some() {
                return Err(CliError::Config("trainer.mode: fine-tuning applies to supervised training".into()));
            }
            let ae = &cfg.trainer.autoencoder;
            let xs = cfg.sampler.method.sample(ae.n, &system.domain, cfg.sampler.seed)?;
            let ac = cfg.autoencoder_config();
            let (mut model, log) = match resume {
                None => {
                    let d_init = build_design(ae.omega_init, system.dim_x(), system.dim_y())?;
                    train_autoencoder(&xs, &system, &d_init, &ac)?
                }
                Some(Checkpoint::Autoencoder(init)) => resume_autoencoder(init, &xs, &system, &ac)?,
                Some(Checkpoint::Supervised(_)) => {
                    return Err(CliError::Config("trainer.mode: autoencoder mode cannot resume a supervised checkpoint".into()))
                }
            };
            if let Some(m) = model.meta.as_mut() {
                m.experiment_digest = Some(ctx.digest.clone());
            }
            let poles: Vec<String> = model.poles.poles().iter().map(|p| format!("{:.6}{:+.6}i", p.re, p.im)).collect();
            println!("trained poles: {}", poles.join(", "));
            (model.to_json()?, log)
        }
    };
    let ck = ctx.write("model.json", json.as_bytes())?;
    ctx.write_csv("train_log.csv", |w| log.write_csv(w))?;
    ctx.write_sidecar("train_log.json", json!({ "columns": log.columns, "epochs": log.epochs.len() }))?;
    print_log(&log);
    println!("wrote {}", ck.display());
    Ok(())
}

fn load_checked(ctx: &Context, path: Option<&Path>, system: &System64) -> CliResult<Checkpoint> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("model.json"));
    let ck = Checkpoint::load(&path)?;
    ck.verify(ctx, system)?;
    Ok(ck)
}

pub fn cmd_tune(ctx: &Context, checkpoint: Option<&Path>) -> CliResult<()> {
    let cfg = &ctx.config;
    let system = cfg.system_model()?;
    let obs = match load_checked(ctx, checkpoint, &system)? {
        Checkpoint::Supervised(m) => m,
        Checkpoint::Autoencoder(_) => {
            return Err(CliError::Config("tuning sweeps ω_c and needs a supervised checkpoint".into()));
        }
    };
    let omegas = cfg.omegas()?;
    let report = sweep(&obs, &system, obs.d_z, &omegas, &cfg.test_grid(), obs.bessel_norm);
    ctx.write_csv("tuning.csv", |w| report.write_csv(w))?;
    let invalid: Vec<_> = report
        .entries
        .iter()
        .filter_map(|e| match e {
            kkl::tuning::SweepEntry::Invalid { omega_c, reason } => Some(json!({ "omega_c": omega_c, "reason": reason })),
            _ => None,
        })
        .collect();
    ctx.write_sidecar("tuning.json", json!({ "argmin_omega_c": report.argmin_omega_c, "invalid": invalid }))?;
    match report.argmin_entry() {
        Some(e) => {
            println!("argmin omega_c = {} (alpha = {:.6e})", e.omega_c, e.alpha);
            Ok(())
        }
        None => Err(CliError::AllInvalid(report.entries.len())),
    }
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub omegas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub x0: Vec<Vec<f64>>,
}

fn pick<T: Clone>(flag: &[T], fallback: Vec<T>) -> Vec<T> {
    if flag.is_empty() {
        fallback
    } else {
        flag.to_vec()
    }
}

fn check_x0(system: &System64, x0: &[Vec<f64>]) -> CliResult<()> {
    for x in x0 {
        if x.len() != system.dim_x() {
            return Err(CliError::Config(format!("initial state {x:?} does not have {} coordinates", system.dim_x())));
        }
    }
    Ok(())
}

pub fn cmd_evaluate(ctx: &Context, args: &EvalArgs) -> CliResult<()> {
    let cfg = &ctx.config;
    let system = cfg.system_model()?;
    let ck = load_checked(ctx, args.checkpoint.as_deref(), &system)?;
    let designs = ck.designs(&pick(&args.omegas, cfg.eval_omegas()), &system)?;
    let sigmas = pick(&args.sigmas, cfg.eval_sigmas());
    let x0s = pick(&args.x0, cfg.eval_trajectories());
    check_x0(&system, &x0s)?;
    let e = &cfg.evaluation;
    let mut summary = String::from("omega_c,sigma,trajectory,rmse,post_transient_rmse,file\n");
    for design in &designs {
        for &sigma in &sigmas {
            for (i, x0) in x0s.iter().enumerate() {
                let tc = TrajectoryConfig {
                    duration: e.duration,
                    dt: cfg.integrator.dt,
                    sigma,
                    seed: e.noise_seed,
                    interpolation: e.interpolation,
                    start_on_manifold: e.start_on_manifold,
                };
                let run = match &ck {
                    Checkpoint::Supervised(m) => evaluate_trajectory(m, design, &system, x0, &tc)?,
                    Checkpoint::Autoencoder(m) => evaluate_trajectory(m, design, &system, x0, &tc)?,
                };
                let name = format!("run_w{}_s{}_x{i}.csv", design.omega_c, sigma);
                ctx.write_csv(&name, |w| run.write_csv(w))?;
                println!(
                    "omega_c {} sigma {} x0 {:?}: rmse {:.6} (post-transient {:.6})",
                    design.omega_c, sigma, x0, run.rmse, run.post_transient_rmse
                );
                summary.push_str(&format!(
                    "{},{},{i},{},{},{name}\n",
                    design.omega_c, sigma, run.rmse, run.post_transient_rmse
                ));
            }
        }
    }
    ctx.write("evaluate.csv", summary.as_bytes())?;
    ctx.write_sidecar("evaluate.json", json!({ "trajectories": x0s, "sigmas": sigmas, "noise_seed": e.noise_seed }))?;
    Ok(())
}

pub fn cmd_heatmap(ctx: &Context, checkpoint: Option<&Path>, omegas: &[f64]) -> CliResult<()> {
    let cfg = &ctx.config;
    let system = cfg.system_model()?;
    let ck = load_checked(ctx, checkpoint, &system)?;
    let designs = ck.designs(&pick(omegas, cfg.eval_omegas()), &system)?;
    let grid = cell_centers(&system.domain, cfg.evaluation.heatmap_side)?;
    let dt = cfg.dt(&system);
    let mut stats = Vec::new();
    for design in &designs {
        let hm = match &ck {
            Checkpoint::Supervised(m) => error_heatmap(m, design, &system, &grid, dt)?,
            Checkpoint::Autoencoder(m) => error_heatmap(m, design, &system, &grid, dt)?,
        };
        let name = format!("heatmap_w{}.csv", design.omega_c);
        ctx.write_csv(&name, |w| hm.write_csv(w))?;
        println!("omega_c {}: median error {:.6e}, max {:.6e}", design.omega_c, hm.median(), hm.max());
        stats.push(json!({ "omega_c": design.omega_c, "median": hm.median(), "max": hm.max(), "file": name }));
    }
    ctx.write_sidecar("heatmap.json", json!({ "side": cfg.evaluation.heatmap_side, "maps": stats }))?;
    Ok(())
}

pub fn cmd_contraction(ctx: &Context, checkpoint: Option<&Path>, omegas: &[f64], x0: &[Vec<f64>]) -> CliResult<()> {
    let cfg = &ctx.config;
    let system = cfg.system_model()?;
    let ck = load_checked(ctx, checkpoint, &system)?;
    let designs = ck.designs(&pick(omegas, cfg.eval_omegas()), &system)?;
    let x0s = pick(x0, cfg.eval_trajectories());
    check_x0(&system, &x0s)?;
    let e = &cfg.evaluation;
    let mut summary = String::from("omega_c,trajectory,lambda_min,slope,converged_time,file\n");
    for design in &designs {
        let mut opts = ContractionOptions::new(e.contraction_duration.unwrap_or_else(|| convergence_time(design)), cfg.dt(&system));
        opts.window = (e.contraction_window[0], e.contraction_window[1]);
        for (i, x) in x0s.iter().enumerate() {
            let run = match &ck {
                Checkpoint::Supervised(m) => contraction_check(m, design, &system, x, &opts)?,
                Checkpoint::Autoencoder(m) => contraction_check(m, design, &system, x, &opts)?,
            };
            let name = format!("contraction_w{}_x{i}.csv", design.omega_c);
            ctx.write_csv(&name, |w| {
                use std::io::Write;
                writeln!(w, "t,error")?;
                for (t, err) in run.times.iter().zip(&run.errors) {
                    writeln!(w, "{},{}", kkl::export::fmt_num(*t), kkl::export::fmt_num(*err))?;
                }
                Ok(())
            })?;
            let (slope, conv) = match run.outcome {
                ContractionOutcome::Rate { slope, .. } => {
                    println!("omega_c {} x0 {:?}: slope {:.6} (-lambda_min = {:.6})", design.omega_c, x, slope, -design.lambda_min);
                    (slope.to_string(), String::new())
                }
                ContractionOutcome::Converged { time } => {
                    println!("omega_c {} x0 {:?}: converged at t = {time}", design.omega_c, x);
                    (String::new(), time.to_string())
                }
                ContractionOutcome::Plateau { level } => {
                    log::warn!("omega_c {} x0 {:?}: error sits on a plateau at {level:.3e} over the fit window", design.omega_c, x);
                    (String::new(), String::new())
                }
            };
            summary.push_str(&format!("{},{i},{},{slope},{conv},{name}\n", design.omega_c, design.lambda_min));
        }
    }
    ctx.write("contraction.csv", summary.as_bytes())?;
    ctx.write_sidecar("contraction.json", json!({ "trajectories": x0s, "window": e.contraction_window }))?;
    Ok(())
}
