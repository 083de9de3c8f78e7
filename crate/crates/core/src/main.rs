use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lindblad_learn::constraints::{
    build_prior_system, ConstraintSet, MeasurementRecord, NoiseMode, NoiseSpec, ObservableTable,
    Prior, RecordFile,
};
use lindblad_learn::dynamics::{evolve, log_time_grid, mean_local_trace_distance};
use lindblad_learn::experiments::{run, ExperimentConfig, ExperimentId};
use lindblad_learn::model::{
    classical_ising_loss_model, loss_dephasing_model, random_nn_jump_model, random_nn_model,
    LindbladModel,
};
use lindblad_learn::pauli::DensityMatrix;
use lindblad_learn::recovery::{reconstruction_error, recover, recover_with_prior};
use lindblad_learn::steady_state::{find_steady_state, load_state, save_state, DEFAULT_TOL};
use lindblad_learn::stitching::{
    partition, patch_tables, recover_patch, stitch, DEFAULT_SHARED_FLOOR,
};
use lindblad_learn::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "lindblad-learn",
    version,
    about = "Learn local Lindbladians from steady-state expectation values"
)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Numerical tolerance for steady states and propagation.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ensemble {
    /// Random Hamiltonian with random single-site jumps.
    Nn,
    /// Random Hamiltonian with random nearest-neighbour jumps.
    NnJump,
    /// Random Hamiltonian with loss and dephasing.
    LossDephasing,
    /// Classical Ising chain with loss.
    Ising,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a model and write `model.json`.
    Generate {
        #[arg(long, value_enum, default_value = "nn")]
        ensemble: Ensemble,
        #[arg(long)]
        n_sites: usize,
        #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
        alpha_d: f64,
        #[arg(long, default_value_t = 0.1)]
        alpha_l: f64,
    },
    /// Solve for the steady state, write `state.bin` and report the residual.
    Steady {
        #[arg(long)]
        model: PathBuf,
    },
    /// Measure the observables needed for recovery and write `record.json`.
    Measure {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 3)]
        k_max: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, value_enum, default_value = "per-observable")]
        noise_mode: Mode,
        /// Also measure the observables for a known-Hamiltonian prior.
        #[arg(long)]
        with_prior: bool,
    },
    /// Recover the generator from a record; writes `recovery.json` and `k.csv`.
    Recover {
        /// Model supplying the operator basis (and the truth for Δ).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value_t = 3)]
        k_max: usize,
        /// Use only the first N constraints.
        #[arg(long)]
        n_constraints: Option<usize>,
    },
    /// Recover the dissipative part with the model's Hamiltonian as prior.
    RecoverPrior {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value_t = 3)]
        k_max: usize,
    },
    /// Recover overlapping patches on the exact steady state and stitch them.
    Stitch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 6)]
        patch_size: usize,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long, default_value_t = 3)]
        k_max: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
    },
    /// Evolve the all-up state under two models and write the local trace distance.
    Dynamics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        other: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        t_min: f64,
        #[arg(long, default_value_t = 10.0)]
        t_max: f64,
        #[arg(long, default_value_t = 50)]
        n_times: usize,
    },
    /// Run a figure replica.
    Experiment { id: String },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum Mode {
    PerObservable,
    PerPauli,
    PerEntry,
}

impl From<Mode> for NoiseMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PerObservable => NoiseMode::PerObservable,
            Mode::PerPauli => NoiseMode::PerPauli,
            Mode::PerEntry => NoiseMode::PerEntry,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_record(path: &Path) -> Result<MeasurementRecord> {
    let file: RecordFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    MeasurementRecord::from_file(&file)
}

#[derive(Serialize)]
struct SteadyReport {
    residual: f64,
    smallest_abs_eigenvalues: [f64; 2],
}

#[derive(Serialize)]
struct RecoverReport<'a> {
    #[serde(flatten)]
    result: &'a lindblad_learn::recovery::RecoveryResult,
    n_constraints: usize,
    delta: f64,
}

#[derive(Serialize)]
struct PriorReport {
    c_l: Vec<f64>,
    residual: f64,
    rank: usize,
    delta: f64,
}

#[derive(Serialize)]
struct StitchReport {
    n_patches: usize,
    c: Vec<f64>,
    delta: f64,
    audit: lindblad_learn::stitching::StitchAudit,
}

fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(1);
    let tol = cli.tol.unwrap_or(DEFAULT_TOL);
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::Generate {
            ensemble,
            n_sites,
            alpha_d,
            alpha_l,
        } => {
            let m = match ensemble {
                Ensemble::Nn => random_nn_model(n_sites, alpha_d, seed)?,
                Ensemble::NnJump => random_nn_jump_model(n_sites, alpha_d, seed)?,
                Ensemble::LossDephasing => loss_dephasing_model(n_sites, alpha_l, seed)?,
                Ensemble::Ising => classical_ising_loss_model(n_sites, seed)?,
            };
            m.save(&out.join("model.json"))?;
        }
        Command::Steady { model } => {
            let m = LindbladModel::load(&model)?;
            let ss = find_steady_state(&m, tol)?;
            save_state(&ss.rho, &out.join("state.bin"))?;
            let report = SteadyReport {
                residual: ss.residual,
                smallest_abs_eigenvalues: ss.gap_report,
            };
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Measure {
            model,
            state,
            k_max,
            epsilon,
            noise_mode,
            with_prior,
        } => {
            let m = LindbladModel::load(&model)?;
            let rho = load_state(&state)?;
            let n = m.n_sites();
            let cs = ConstraintSet::new(n, k_max.min(n), seed)?;
            let mut obs = ObservableTable::new(&cs, m.basis())?.observables();
            if with_prior {
                obs.extend(lindblad_learn::constraints::prior_observables(
                    &cs,
                    m.basis(),
                    &Prior::Hamiltonian(m.c_h().to_vec()),
                )?);
            }
            let spec = NoiseSpec {
                epsilon,
                seed,
                mode: noise_mode.into(),
            };
            let rec = MeasurementRecord::measure(&rho, &obs, spec)?;
            write_json(&out.join("record.json"), &rec.to_file())?;
        }
        Command::Recover {
            model,
            record,
            k_max,
            n_constraints,
        } => {
            let m = LindbladModel::load(&model)?;
            let rec = read_record(&record)?;
            let n = m.n_sites();
            let cs = ConstraintSet::new(n, k_max.min(n), seed)?;
            let mut k = ObservableTable::new(&cs, m.basis())?.assemble(&rec)?;
            if let Some(nc) = n_constraints {
                if nc == 0 || nc > k.nrows() {
                    return Err(Error::InvalidArgument(format!(
                        "n_constraints must lie in 1..={}",
                        k.nrows()
                    )));
                }
                k = k.top_rows(nc);
            }
            k.write_csv(BufWriter::new(File::create(out.join("k.csv"))?))?;
            let r = recover(&k, rec.noise().epsilon)?;
            let delta = reconstruction_error(&r.c_hat, &m.pack())?;
            write_json(
                &out.join("recovery.json"),
                &RecoverReport {
                    result: &r,
                    n_constraints: k.nrows(),
                    delta,
                },
            )?;
            println!(
                "delta = {delta:.6e}, delta_est = {:.6e}, ill_determined = {}",
                r.delta_est, r.ill_determined
            );
        }
        Command::RecoverPrior {
            model,
            record,
            k_max,
        } => {
            let m = LindbladModel::load(&model)?;
            let rec = read_record(&record)?;
            let n = m.n_sites();
            let cs = ConstraintSet::new(n, k_max.min(n), seed)?;
            let (k, b) =
                build_prior_system(&cs, m.basis(), &rec, &Prior::Hamiltonian(m.c_h().to_vec()))?;
            let p = recover_with_prior(&k, &b)?;
            let mut full = m.c_h().to_vec();
            full.extend(&p.c_l);
            let delta = reconstruction_error(&full, &m.pack())?;
            write_json(
                &out.join("recovery_prior.json"),
                &PriorReport {
                    c_l: p.c_l,
                    residual: p.residual,
                    rank: p.rank,
                    delta,
                },
            )?;
            println!(
                "delta = {delta:.6e}, residual = {:.6e}, rank = {}",
                p.residual, p.rank
            );
        }
        Command::Stitch {
            model,
            state,
            patch_size,
            stride,
            k_max,
            epsilon,
        } => {
            let m = LindbladModel::load(&model)?;
            let rho = load_state(&state)?;
            let layout = partition(m.n_sites(), patch_size, stride)?;
            let tables = patch_tables(&layout, m.basis(), k_max, seed)?;
            let obs: Vec<_> = tables.iter().flat_map(|(_, t)| t.observables()).collect();
            let rec =
                MeasurementRecord::measure(&rho, &obs, NoiseSpec::per_observable(epsilon, seed))?;
            let patches = tables
                .iter()
                .enumerate()
                .map(|(j, (cols, t))| recover_patch(j, cols, t, &rec).map(|p| p.0))
                .collect::<Result<Vec<_>>>()?;
            let s = stitch(&patches, DEFAULT_SHARED_FLOOR)?;
            let truth = m.pack();
            let c = s.to_dense(truth.len())?;
            let delta = reconstruction_error(&c, &truth)?;
            write_json(
                &out.join("stitch.json"),
                &StitchReport {
                    n_patches: patches.len(),
                    c,
                    delta,
                    audit: s.audit,
                },
            )?;
            println!("patches = {}, delta = {delta:.6e}", patches.len());
        }
        Command::Dynamics {
            model,
            other,
            t_min,
            t_max,
            n_times,
        } => {
            let a = LindbladModel::load(&model)?;
            let b = LindbladModel::load(&other)?;
            let times = log_time_grid(t_min, t_max, n_times);
            let up = DensityMatrix::all_up(a.n_sites());
            let ta = evolve(&a, &up, &times, tol)?;
            let tb = evolve(&b, &up, &times, tol)?;
            let mut w = csv::Writer::from_path(out.join("dynamics.csv"))?;
            w.write_record(["t", "d_loc"])?;
            for ((t, x), y) in times.iter().zip(&ta.states).zip(&tb.states) {
                let d = mean_local_trace_distance(x, y)?;
                w.write_record([format!("{t:.16e}"), format!("{d:.16e}")])?;
            }
            w.flush()?;
        }
        Command::Experiment { id } => {
            let id: ExperimentId = id.parse()?;
            let mut cfg = match &cli.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            match cfg.experiment {
                Some(e) if e != id => {
                    return Err(Error::Config(format!("config is for '{e}', not '{id}'")));
                }
                _ => cfg.experiment = Some(id),
            }
            if cli.seed.is_some() {
                cfg.seed = cli.seed;
            }
            if cli.tol.is_some() {
                cfg.tol = cli.tol;
            }
            let output = run(&cfg)?;
            output.write(out)?;
            println!(
                "{id}: {} trial rows in {:.1} s",
                output.trials.rows.len(),
                output.wall_seconds
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
