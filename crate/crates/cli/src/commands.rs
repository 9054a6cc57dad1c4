use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use tomo_core::bench::{
    self, curves_csv, finals_csv, summarize_points, summary_csv, DatasetSpec, Fig3aConfig, Fig3bConfig, Method,
};
use tomo_core::cgan::{self, PretrainConfig, QstCgan, RunReport, TrainConfig};
use tomo_core::fock::{default_pad, DensityMatrix, StateKind, StateSpec};
use tomo_core::imle::{reconstruct_imle, ImleConfig, InitialState};
use tomo_core::measure::{
    add_shot_noise, measurement_set, simulate_data, DisplacementSet, MeasurementKind, MeasurementSet, NoiseKind,
};
use tomo_core::metrics::fidelity;
use tomo_core::store::{self, ArtifactKind, DataFile};
use tomo_core::{Error, C64};

use crate::manifest::Manifest;
use crate::{
    BenchArgs, CliError, Command, EmitArgs, FigureArg, GenDataArgs, GenStateArgs, MeasureArg, MethodArg, NoiseArg,
    PretrainArgs, ReconstructArgs, SingleShotArgs, StateKindArg,
};

type CliResult<T> = Result<T, CliError>;

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenState(a) => gen_state(a),
        Command::GenData(a) => gen_data(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Pretrain(a) => pretrain(a),
        Command::SingleShot(a) => single_shot(a),
        Command::Bench(a) => bench(a),
        Command::EmitWigner(a) => emit(a, true),
        Command::EmitHusimi(a) => emit(a, false),
    }
}

/// `"32x24"` or `"32"`.
fn parse_grid(spec: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::bad_flag(format!("grid {spec:?} is not of the form NXxNY"));
    let parse = |s: &str| s.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match spec.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a).ok_or_else(bad)?, parse(b).ok_or_else(bad)?)),
        None => parse(spec).map(|n| (n, n)).ok_or_else(bad),
    }
}

/// Plain JSON or a `config` artifact; missing fields take their defaults.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::MalformedPayload(format!("{}: {e}", path.display())))?;
    if raw.get("magic").is_some() {
        return Ok(store::from_artifact_str(ArtifactKind::Config, &text)?);
    }
    Ok(serde_json::from_value(raw).map_err(|e| Error::MalformedPayload(format!("{}: {e}", path.display())))?)
}

fn load_target(path: Option<&Path>, ms: &MeasurementSet) -> CliResult<Option<DensityMatrix>> {
    let Some(path) = path else { return Ok(None) };
    let rho = store::load_state(path)?;
    if rho.dim() != ms.dim() {
        return Err(Error::DimensionMismatch(format!(
            "target of dimension {} for data of dimension {}",
            rho.dim(),
            ms.dim()
        ))
        .into());
    }
    Ok(Some(rho))
}

fn gen_state(a: GenStateArgs) -> CliResult<()> {
    let alpha = C64::new(a.alpha, a.alpha_imag);
    let kind = match a.kind {
        StateKindArg::Fock => StateKind::Fock { n: a.n },
        StateKindArg::Coherent => StateKind::Coherent { alpha },
        StateKindArg::Cat => StateKind::Cat {
            alpha,
            heads: a.heads,
            phases: a.phases.clone(),
        },
        StateKindArg::Random => StateKind::Random {
            rank: a.rank,
            seed: a.seed,
        },
    };
    let spec = StateSpec::new(kind, a.dim);
    let rho = spec.build()?;
    store::save_state(&a.out, &rho)?;
    Manifest::new("gen-state")
        .config(&spec)?
        .seeds([a.seed])
        .output(&a.out)
        .write_beside(&a.out)?;
    println!("wrote {}-dimensional state to {}", rho.dim(), a.out.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let rho = store::load_state(&a.state)?;
    let kind = match a.measure {
        MeasureArg::Husimi => MeasurementKind::Husimi,
        MeasureArg::Wigner => MeasurementKind::Wigner,
        MeasureArg::Genq => {
            if a.ns.is_empty() {
                return Err(CliError::bad_flag("--measure genq needs --ns"));
            }
            MeasurementKind::GeneralizedQ { ns: a.ns.clone() }
        }
    };
    let ds = match (a.disk, a.grid.as_deref()) {
        (Some(count), _) => DisplacementSet::disk(a.radius, count, a.disk_seed)?,
        (None, grid) => {
            let (nx, ny) = parse_grid(grid.unwrap_or("32x32"))?;
            DisplacementSet::square_grid(a.extent, nx, ny)?
        }
    };
    let pad = a.pad.unwrap_or_else(|| default_pad(rho.dim()));
    let ms = measurement_set(kind.clone(), ds, rho.dim(), pad)?;
    let mut data = simulate_data(&rho, &ms)?;
    let noise = match a.noise {
        NoiseArg::None => NoiseKind::None,
        NoiseArg::Binomial => NoiseKind::Binomial,
        NoiseArg::Gaussian => NoiseKind::Gaussian { sigma: a.sigma },
    };
    if noise != NoiseKind::None || a.shots.is_some() {
        let shots = match (a.shots, &noise) {
            (Some(s), _) => s,
            (None, NoiseKind::Binomial) => return Err(CliError::bad_flag("--noise binomial needs --shots")),
            (None, _) => 0,
        };
        data = add_shot_noise(&data, &kind, shots, &noise, a.seed)?;
    }
    let file = DataFile {
        measurement: ms.recipe(),
        data,
    };
    store::save_data(&a.out, &file)?;
    Manifest::new("gen-data")
        .config(&file.measurement)?
        .seeds([a.disk_seed, a.seed])
        .input(&a.state)?
        .output(&a.out)
        .write_beside(&a.out)?;
    let max = file.data.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("wrote {} values (max {max:.6}) to {}", file.data.len(), a.out.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let data = store::load_data(&a.data)?;
    let ms = Arc::new(MeasurementSet::from_recipe(&data.measurement)?);
    let target = load_target(a.target.as_deref(), &ms)?;
    let d = &data.data.values;
    let mut manifest = Manifest::new("reconstruct").input(&a.data)?;
    if let Some(t) = &a.target {
        manifest = manifest.input(t)?;
    }
    if let Some(c) = &a.config {
        manifest = manifest.input(c)?;
    }
    let report: RunReport = match a.method {
        MethodArg::Cgan => {
            if a.init.is_some() || a.g_correction || a.tolerance.is_some() {
                return Err(CliError::bad_flag("--init, --g-correction and --tolerance apply to imle only"));
            }
            let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
            if let Some(v) = a.iterations {
                cfg.iterations = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.log_every {
                cfg.log_every = v;
            }
            if let Some(v) = a.fidelity_target {
                cfg.fidelity_target = Some(v);
            }
            cfg.validate()?;
            manifest = manifest.config(&cfg)?.seeds([cfg.seed]);
            cgan::reconstruct(d, ms.clone(), &cfg, target.as_ref())?
        }
        MethodArg::Imle => {
            let mut cfg: ImleConfig = load_config(a.config.as_deref())?;
            if let Some(v) = a.iterations {
                cfg.max_iterations = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.log_every {
                cfg.log_every = v;
            }
            if let Some(v) = a.fidelity_target {
                cfg.fidelity_target = Some(v);
            }
            if let Some(v) = a.tolerance {
                cfg.tolerance = v;
            }
            cfg.g_correction |= a.g_correction;
            match a.init.as_deref() {
                None => {}
                Some("random") => cfg.initial = InitialState::Random,
                Some("mixed") => cfg.initial = InitialState::MaximallyMixed,
                Some(path) => {
                    manifest = manifest.input(Path::new(path))?;
                    cfg.initial = InitialState::Explicit {
                        rho: store::load_state(Path::new(path))?,
                    };
                }
            }
            cfg.validate()?;
            manifest = manifest.config(&cfg)?.seeds([cfg.seed]);
            reconstruct_imle(d, &ms, &cfg, target.as_ref())?
        }
    };
    store::save_state(&a.out, &report.final_rho)?;
    manifest = manifest.output(&a.out);
    if let Some(p) = &a.report {
        store::write_report_csv(p, &report)?;
        manifest = manifest.output(p);
    }
    if let Some(p) = &a.report_json {
        store::save_report(p, &report)?;
        manifest = manifest.output(p);
    }
    manifest.write_beside(&a.out)?;
    let fid = report
        .final_fidelity
        .map(|f| format!(", fidelity {f:.6}"))
        .unwrap_or_default();
    println!(
        "{}: {} iterations, converged {}{fid}",
        report.method, report.iterations_run, report.converged
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut spec: DatasetSpec = load_config(Some(&a.dataset_spec))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ms = Arc::new(spec.measurement_set()?);
    let train = spec.generate(&ms)?;
    let held_out = if a.validation == 0 {
        Vec::new()
    } else {
        DatasetSpec {
            count: a.validation,
            seed: spec.seed.wrapping_add(1),
            ..spec.clone()
        }
        .generate(&ms)?
    };
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.train.validate()?;
    let outcome = cgan::pretrain(ms.clone(), &train, &held_out, &cfg)?;
    store::save_checkpoint(&a.out, &outcome.model.snapshot())?;
    let mut manifest = Manifest::new("pretrain")
        .config(&serde_json::json!({ "dataset": spec, "pretrain": cfg, "validation": a.validation }))?
        .seeds([spec.seed, cfg.train.seed])
        .input(&a.dataset_spec)?
        .output(&a.out);
    if let Some(c) = &a.config {
        manifest = manifest.input(c)?;
    }
    if let Some(p) = &a.report {
        store::write_atomic(p, store::pretrain_history_csv(&outcome.history).as_bytes())?;
        manifest = manifest.output(p);
    }
    if let Some(p) = &a.dataset_out {
        store::save_dataset(p, &ms.recipe(), &train)?;
        manifest = manifest.output(p);
    }
    manifest.write_beside(&a.out)?;
    println!(
        "best epoch {} with validation fidelity {:.6}",
        outcome.best_epoch, outcome.best_validation_fidelity
    );
    Ok(())
}

fn single_shot(a: SingleShotArgs) -> CliResult<()> {
    let snapshot = store::load_checkpoint(&a.ckpt)?;
    let data = store::load_data(&a.data)?;
    if data.measurement != snapshot.measurement {
        return Err(Error::DimensionMismatch(
            "data were taken with a different measurement set than the model was trained on".into(),
        )
        .into());
    }
    let model = QstCgan::from_snapshot(&snapshot)?;
    let rho = if a.fine_tune > 0 {
        model.fine_tune(&data.data.values, a.fine_tune)?
    } else {
        model.single_shot(&data.data.values)?
    };
    store::save_state(&a.out, &rho)?;
    let target = load_target(a.target.as_deref(), model.measurement_set())?;
    let mut manifest = Manifest::new("single-shot")
        .config(&serde_json::json!({ "fine_tune": a.fine_tune, "train": snapshot.config }))?
        .seeds([snapshot.config.seed])
        .input(&a.ckpt)?
        .input(&a.data)?
        .output(&a.out);
    if let Some(t) = &a.target {
        manifest = manifest.input(t)?;
    }
    manifest.write_beside(&a.out)?;
    match target {
        Some(t) => println!("fidelity {:.6}", fidelity(&t, &rho)?),
        None => println!("wrote state to {}", a.out.display()),
    }
    Ok(())
}

fn parse_methods(names: &[String]) -> CliResult<Option<Vec<Method>>> {
    if names.is_empty() {
        return Ok(None);
    }
    names
        .iter()
        .map(|n| {
            Method::ALL
                .into_iter()
                .find(|m| m.label() == n.trim())
                .ok_or_else(|| CliError::bad_flag(format!("unknown method {n:?} (expected cgan, imle or imle_g)")))
        })
        .collect::<CliResult<Vec<_>>>()
        .map(Some)
}

fn bench(a: BenchArgs) -> CliResult<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io(format!("{}: {e}", a.out.display())))?;
    let methods = parse_methods(&a.methods)?;
    let mut manifest = Manifest::new("bench");
    if let Some(c) = &a.config {
        manifest = manifest.input(c)?;
    }
    let write = |name: &str, text: String| -> CliResult<()> {
        store::write_atomic(&a.out.join(name), text.as_bytes())?;
        Ok(())
    };
    let runs = match a.figure {
        FigureArg::Fig3a => {
            if !a.counts.is_empty() {
                return Err(CliError::bad_flag("--counts applies to fig3b only"));
            }
            let mut cfg: Fig3aConfig = load_config(a.config.as_deref())?;
            if let Some(n) = a.seeds {
                cfg.seeds = (0..n).collect();
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if let Some(v) = a.cgan_iterations {
                cfg.configs.cgan.iterations = v;
            }
            if let Some(v) = a.imle_iterations {
                cfg.configs.imle.max_iterations = v;
            }
            if let Some(v) = a.alpha {
                cfg.problem.alpha = v;
            }
            if let Some(v) = a.dim {
                cfg.problem.dim = v;
            }
            manifest = manifest.config(&cfg)?.seeds(cfg.seeds.clone());
            let runs = bench::run_fig3a(&cfg)?;
            write("curves.csv", curves_csv(&runs))?;
            for method in &cfg.methods {
                let hits: Vec<String> = runs
                    .iter()
                    .filter(|r| r.method == *method)
                    .map(|r| match r.report.iterations_to(0.99) {
                        Some(i) => i.to_string(),
                        None => "-".into(),
                    })
                    .collect();
                println!("{}: iterations to 0.99 per seed [{}]", method.label(), hits.join(", "));
            }
            runs
        }
        FigureArg::Fig3b => {
            let mut cfg: Fig3bConfig = load_config(a.config.as_deref())?;
            if let Some(n) = a.seeds {
                cfg.seeds = (0..n).collect();
            }
            if !a.counts.is_empty() {
                cfg.counts = a.counts.clone();
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if let Some(v) = a.cgan_iterations {
                cfg.configs.cgan.iterations = v;
            }
            if let Some(v) = a.imle_iterations {
                cfg.configs.imle.max_iterations = v;
            }
            if let Some(v) = a.alpha {
                cfg.problem.alpha = v;
            }
            if let Some(v) = a.dim {
                cfg.problem.dim = v;
            }
            manifest = manifest.config(&cfg)?.seeds(cfg.seeds.clone());
            let runs = bench::run_fig3b(&cfg)?;
            let summary = summarize_points(&runs);
            write("summary.csv", summary_csv(&summary))?;
            for s in &summary {
                println!(
                    "{:>7} {:>5} points: mean fidelity {:.4} ± {:.4}",
                    s.method.label(),
                    s.points,
                    s.mean_fidelity,
                    s.std_fidelity
                );
            }
            runs
        }
    };
    write("finals.csv", finals_csv(&runs))?;
    store::save_artifact(&a.out.join("runs.json"), ArtifactKind::Benchmark, &runs)?;
    for name in ["curves.csv", "summary.csv", "finals.csv", "runs.json"] {
        let p = a.out.join(name);
        if p.exists() {
            manifest = manifest.output(&p);
        }
    }
    manifest.write_to(&a.out.join("manifest.json"))
}

fn emit(a: EmitArgs, wigner: bool) -> CliResult<()> {
    let rho = store::load_state(&a.state)?;
    let (nx, ny) = parse_grid(&a.grid)?;
    let rows = if wigner {
        bench::wigner_grid(&rho, a.extent, nx, ny)?
    } else {
        bench::husimi_grid(&rho, a.extent, nx, ny)?
    };
    store::write_grid_csv(&a.out, &rows)?;
    Manifest::new(if wigner { "emit-wigner" } else { "emit-husimi" })
        .config(&serde_json::json!({ "grid": [nx, ny], "extent": a.extent }))?
        .input(&a.state)?
        .output(&a.out)
        .write_beside(&a.out)?;
    println!("wrote {} grid values to {}", rows.len(), a.out.display());
    Ok(())
}
