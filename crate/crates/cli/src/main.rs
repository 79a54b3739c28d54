//! `ecse`: command-line driver for the symmetrization experiments.
//!
//! Exit codes: 0 when every checked invariant holds, 1 when one fails,
//! 2 on bad input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use ecse_core::backbones::{
    load_checkpoint, save_checkpoint, AnyBackbone, Backbone, Locality, MlpBackbone, MlpShape,
    OutputKind, Pet, PetShape, Prediction,
};
use ecse_core::ecse::{EcseConfig, PoolMode, Symmetrized};
use ecse_core::harness::{
    fd_forces, net_force, richardson_estimate, sweep_csv, sweep_tradeoff, verify_equivariance,
    verify_smoothness, SweepOptions, DEFAULT_AMPLITUDES, RICHARDSON_STEP,
};
use ecse_core::smoothmath::CutoffParams;
use ecse_core::structures::{
    parse_xyz, write_xyz, AtomicEnvironment, Species, SpeciesTable, Structure,
};
use ecse_core::training::{make_toy_dataset, train_toy, SyntheticPotential, ToyKind, TrainOptions};
use ecse_core::Error;

#[derive(Parser)]
#[command(
    name = "ecse",
    version,
    about = "Rotational symmetrization of point-cloud models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare y(R s) with R y(s) over random rotations.
    VerifyEquivariance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value_t = 20)]
        rotations: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Evaluate the bare backbone; reported without a verdict.
        #[arg(long)]
        raw: bool,
    },
    /// Gaussian-perturbation smoothness experiment.
    VerifySmoothness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Comma-separated ascending amplitudes.
        #[arg(long, value_delimiter = ',')]
        amplitudes: Option<Vec<f64>>,
        #[arg(long, default_value_t = 50)]
        perturbations: usize,
        #[arg(long, default_value_t = 0.8)]
        slope_min: f64,
        #[arg(long, default_value_t = 1.2)]
        slope_max: f64,
        #[arg(long)]
        raw: bool,
    },
    /// Central-difference forces of the symmetrized model.
    FdForces {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Also report the Richardson ratio |F(h) - F(h/2)| / |F(h/2) - F(h/4)|,
        /// halving h from 1e-3 until it settles.
        #[arg(long)]
        richardson: bool,
        /// Use the synthetic pair potential and compare with its analytic forces.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Frame count, smoothness and equivariance for loose and tight presets.
    SweepTradeoff {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-6, 1e-5, 1e-4, 1e-3])]
        amplitudes: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        perturbations: usize,
        #[arg(long, default_value_t = 5)]
        rotations: usize,
    },
    /// Train a backbone on a synthetic dataset. `--config` holds training
    /// options, `--checkpoint` receives the trained parameters and `--out`
    /// the per-epoch history.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ch4_like")]
        dataset: ToyKind,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_val: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// One-shot symmetrized prediction for every structure.
    Symmetrize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Write a labelled synthetic dataset as extended XYZ.
    GenDataset {
        #[arg(long, default_value = "ch4_like")]
        kind: ToyKind,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "loose")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackboneKind::Pet)]
    backbone: BackboneKind,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct Data {
    /// Extended-XYZ input; a synthetic set is generated when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "ch4_like")]
    dataset: ToyKind,
    #[arg(long, default_value_t = 10)]
    n: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackboneKind {
    Mlp,
    Pet,
    Pet2body,
}

enum Verdict {
    Pass,
    Fail,
}

fn default_cutoff() -> CutoffParams {
    CutoffParams::new(3.5, 0.5).expect("valid cutoff")
}

fn species_of(structures: &[Structure]) -> Vec<Species> {
    let mut s: Vec<Species> = structures
        .iter()
        .flat_map(|x| x.species.iter().copied())
        .collect();
    s.extend([1, 6]);
    s.sort_unstable();
    s.dedup();
    s
}

fn build_backbone(
    kind: BackboneKind,
    species: Vec<Species>,
    seed: u64,
) -> anyhow::Result<AnyBackbone> {
    Ok(match kind {
        BackboneKind::Mlp => AnyBackbone::Mlp(MlpBackbone::new(
            MlpShape::new(species, default_cutoff()),
            seed,
        )),
        BackboneKind::Pet => {
            AnyBackbone::Pet(Pet::new(PetShape::micro(species, default_cutoff()), seed)?)
        }
        BackboneKind::Pet2body => AnyBackbone::Pet(Pet::new(
            PetShape::two_body(species, default_cutoff()),
            seed,
        )?),
    })
}

fn backbone(common: &Common, structures: &[Structure]) -> anyhow::Result<AnyBackbone> {
    match &common.checkpoint {
        Some(path) => Ok(load_checkpoint(path)?.0),
        None => build_backbone(common.backbone, species_of(structures), common.seed),
    }
}

fn ecse_config(common: &Common, model: &AnyBackbone) -> anyhow::Result<EcseConfig> {
    if let Some(path) = &common.config {
        return Ok(EcseConfig::load(path)?);
    }
    let mut cfg = EcseConfig::preset(&common.preset)?;
    if matches!(model, AnyBackbone::Pet(_)) {
        cfg.mode = PoolMode::GlobalPool;
    }
    Ok(cfg)
}

fn symmetrized(
    common: &Common,
    structures: &[Structure],
) -> anyhow::Result<(Symmetrized, Arc<dyn Backbone>)> {
    let model = backbone(common, structures)?;
    let cfg = ecse_config(common, &model)?;
    let aux = build_backbone(
        BackboneKind::Pet2body,
        species_of(structures),
        common.seed.wrapping_add(1),
    )?;
    let raw: Arc<dyn Backbone> = Arc::new(model);
    let aux: Arc<dyn Backbone> = Arc::new(aux);
    let aux = cfg.aux.is_some().then_some(aux);
    Ok((Symmetrized::new(raw.clone(), aux, cfg)?, raw))
}

fn load_data(data: &Data, seed: u64) -> anyhow::Result<Vec<Structure>> {
    match &data.input {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(parse_xyz(&text)?)
        }
        None => Ok(make_toy_dataset(data.dataset, data.n, seed)?),
    }
}

fn emit(out: &Option<PathBuf>, csv: &str) -> anyhow::Result<()> {
    if let Some(path) = out {
        write_file(path, csv)?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn run(cli: Cli) -> anyhow::Result<Verdict> {
    match cli.command {
        Command::VerifyEquivariance {
            common,
            data,
            rotations,
            tol,
            raw,
        } => {
            let structures = load_data(&data, common.seed)?;
            let (sym, bare) = symmetrized(&common, &structures)?;
            let report = if raw {
                verify_equivariance(bare.as_ref(), &structures, rotations, common.seed, None)?
            } else {
                verify_equivariance(&sym, &structures, rotations, common.seed, Some(tol))?
            };
            emit(&common.out, &report.to_csv())?;
            println!(
                "cases {}  max relative {:e}  max absolute {:e}  above 1e-6: {:.1}%",
                report.cases.len(),
                report.max_relative,
                report.max_absolute,
                100.0 * report.fraction_above(1e-6)
            );
            match report.passed {
                None => {
                    println!("reference run (raw backbone), no verdict");
                    Ok(Verdict::Pass)
                }
                Some(ok) => {
                    println!("{} (tol {tol:e})", if ok { "PASS" } else { "FAIL" });
                    Ok(verdict(ok))
                }
            }
        }
        Command::VerifySmoothness {
            common,
            data,
            amplitudes,
            perturbations,
            slope_min,
            slope_max,
            raw,
        } => {
            let structures = load_data(&data, common.seed)?;
            let (sym, bare) = symmetrized(&common, &structures)?;
            let model: &dyn Backbone = if raw { bare.as_ref() } else { &sym };
            let amplitudes = amplitudes.unwrap_or_else(|| DEFAULT_AMPLITUDES.to_vec());
            let report =
                verify_smoothness(model, &structures, &amplitudes, perturbations, common.seed)?;
            emit(&common.out, &report.to_csv())?;
            for (s, m) in &report.max_by_amplitude {
                println!("sigma {s:e}  max |delta| {m:e}");
            }
            println!(
                "slope {:.4}  scale {:e}  max spike ratio {:e}  spikes {}  trend violations {}",
                report.slope,
                report.scale,
                report.max_spike_ratio,
                report.spikes.len(),
                report.trend_violations.len()
            );
            let ok = report.passes(slope_min, slope_max);
            println!("{}", if ok { "PASS" } else { "FAIL" });
            Ok(verdict(ok))
        }
        Command::FdForces {
            common,
            data,
            h,
            richardson,
            synthetic,
            tol,
        } => {
            let structures = load_data(&data, common.seed)?;
            let mut csv = String::from("structure_id,atom,fx,fy,fz\n");
            let mut ok = true;
            if synthetic {
                let pot = SyntheticPotential::toy();
                let model = SyntheticModel(pot.clone());
                let mut worst = 0.0f64;
                for (k, s) in structures.iter().enumerate() {
                    let (_, exact) = pot.energy_and_forces(s)?;
                    let fd = fd_forces(&model, s, h)?;
                    for (i, (a, b)) in fd.iter().zip(&exact).enumerate() {
                        worst = worst.max((a - b).norm());
                        csv.push_str(&format!("{k},{i},{:e},{:e},{:e}\n", a.x, a.y, a.z));
                    }
                }
                println!("max |F_fd - F_exact| {worst:e}");
                ok &= worst <= tol;
            } else {
                let (sym, _) = symmetrized(&common, &structures)?;
                let mut worst = 0.0f64;
                for (k, s) in structures.iter().enumerate() {
                    let f = fd_forces(&sym, s, h)?;
                    worst = worst.max(net_force(&f).norm());
                    for (i, a) in f.iter().enumerate() {
                        csv.push_str(&format!("{k},{i},{:e},{:e},{:e}\n", a.x, a.y, a.z));
                    }
                    if richardson {
                        let q = richardson_estimate(&sym, s, RICHARDSON_STEP)?;
                        println!(
                            "structure {k}: richardson ratio {:.4} at h = {:e}{}",
                            q.ratio,
                            q.step,
                            if q.settled { "" } else { " (not settled)" }
                        );
                        ok &= (3.5..=4.5).contains(&q.ratio);
                    }
                }
                println!("max |sum F| {worst:e}");
                ok &= worst <= tol;
            }
            emit(&common.out, &csv)?;
            println!("{}", if ok { "PASS" } else { "FAIL" });
            Ok(verdict(ok))
        }
        Command::SweepTradeoff {
            common,
            data,
            amplitudes,
            perturbations,
            rotations,
        } => {
            let structures = load_data(&data, common.seed)?;
            let model = backbone(&common, &structures)?;
            let mut presets = Vec::new();
            for name in ["loose", "tight"] {
                let mut cfg = EcseConfig::preset(name)?;
                if matches!(model, AnyBackbone::Pet(_)) {
                    cfg.mode = PoolMode::GlobalPool;
                }
                presets.push((name.to_string(), cfg));
            }
            if let Some(path) = &common.config {
                presets.push((path.display().to_string(), EcseConfig::load(path)?));
            }
            let aux = build_backbone(
                BackboneKind::Pet2body,
                species_of(&structures),
                common.seed.wrapping_add(1),
            )?;
            let opts = SweepOptions {
                amplitudes,
                n_perturbations: perturbations,
                n_rotations: rotations,
                seed: common.seed,
                ..SweepOptions::default()
            };
            let rows = sweep_tradeoff(
                Arc::new(model),
                Some(Arc::new(aux)),
                &structures,
                &presets,
                &opts,
            )?;
            let csv = sweep_csv(&rows);
            emit(&common.out, &csv)?;
            print!("{csv}");
            let ok =
                rows[1].mean_frames < rows[0].mean_frames && rows.iter().all(|r| r.equivariant);
            println!("{}", if ok { "PASS" } else { "FAIL" });
            Ok(verdict(ok))
        }
        Command::TrainToy {
            common,
            dataset,
            n_train,
            n_val,
            epochs,
            lr,
        } => {
            let mut opts = match &common.config {
                Some(path) => TrainOptions::load(path)?,
                None => TrainOptions::default(),
            };
            opts.seed = common.seed;
            if let Some(e) = epochs {
                opts.epochs = e;
            }
            if let Some(lr) = lr {
                opts.lr = lr;
            }
            let train = make_toy_dataset(dataset, n_train, common.seed)?;
            let val = make_toy_dataset(dataset, n_val, common.seed.wrapping_add(1))?;
            let mut model = build_backbone(common.backbone, species_of(&train), common.seed)?;
            let outcome = train_toy(model.as_trainable_mut(), &train, &val, &opts)?;
            emit(&common.out, &outcome.history.to_csv())?;
            let first = outcome
                .history
                .records
                .first()
                .map_or(f64::NAN, |r| r.val_e_rmse);
            let best = outcome.history.best().map_or(f64::NAN, |r| r.val_e_rmse);
            println!(
                "epochs run {}  best epoch {}  val E rmse {first:e} -> {best:e}{}",
                outcome.history.records.len() - 1,
                outcome.best_epoch,
                if outcome.stopped_early {
                    "  (stopped early)"
                } else {
                    ""
                }
            );
            if let Some(path) = &common.checkpoint {
                save_checkpoint(path, &model, common.seed)?;
                println!("checkpoint written to {}", path.display());
            }
            Ok(Verdict::Pass)
        }
        Command::Symmetrize { common, data } => {
            let structures = load_data(&data, common.seed)?;
            let (sym, _) = symmetrized(&common, &structures)?;
            let mut csv = String::from("structure_id,values\n");
            for (k, s) in structures.iter().enumerate() {
                let p = sym.eval_structure(s)?;
                let vals: Vec<String> = p.values.iter().map(|v| format!("{v:e}")).collect();
                csv.push_str(&format!("{k},{}\n", vals.join(" ")));
            }
            match &common.out {
                Some(path) => write_file(path, &csv)?,
                None => print!("{csv}"),
            }
            Ok(Verdict::Pass)
        }
        Command::GenDataset { kind, n, seed, out } => {
            let mut data = make_toy_dataset(kind, n, seed)?;
            let pot = SyntheticPotential::toy();
            for s in &mut data {
                pot.label(s)?;
            }
            write_file(&out, &write_xyz(&data, &SpeciesTable::default())?)?;
            println!("{} structures written to {}", data.len(), out.display());
            Ok(Verdict::Pass)
        }
    }
}

/// The synthetic pair potential seen as a structure-level model.
struct SyntheticModel(SyntheticPotential);

impl Backbone for SyntheticModel {
    fn output_kind(&self) -> OutputKind {
        OutputKind::SCALAR
    }

    fn locality(&self) -> Locality {
        Locality::Global
    }

    fn cutoff(&self) -> f64 {
        self.0.cutoff.r_c()
    }

    fn eval_env(&self, _env: &AtomicEnvironment) -> ecse_core::Result<Prediction> {
        Err(Error::ShapeMismatch(
            "the synthetic potential is evaluated per structure".into(),
        ))
    }

    fn eval_structure(&self, s: &Structure) -> ecse_core::Result<Prediction> {
        Ok(Prediction::scalar(self.0.energy(s)?))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Diverged { .. }) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
