use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use interp_spde::fem::FemSpace;
use interp_spde::geometry::{dodecagon_mesh, Mesh};
use interp_spde::harness::{self, Profile};
use interp_spde::kernels::parse_kernel;
use interp_spde::noise::{
    build_spectrum, write_increment_dump, EmbeddingMode, NoiseStream, DEFAULT_MAX_PADDING,
};
use interp_spde::sobolev::{interpolation_rate_study, MeshKind, TestFunction};
use interp_spde::stepper::{run, Discretization};
use interp_spde::{Error, Result};

/// Finite element SPDE solver with grid-interpolated circulant-embedding noise.
#[derive(Parser)]
#[command(name = "interp-spde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mesh and print its statistics.
    Mesh {
        /// `dodecagon` or `square`.
        family: String,
        level: u32,
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Draw one noise increment on the square grid.
    Sample {
        /// Kernel, e.g. `matern:nu=0.5,sigma2=10,rho=0.25`.
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        level: u32,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        sample: u64,
        #[arg(long, default_value_t = 0)]
        step: u64,
        #[arg(long, default_value = "clip")]
        mode: String,
        #[arg(long, default_value_t = DEFAULT_MAX_PADDING)]
        max_padding: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one trajectory from a key=value config file.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated output times.
        #[arg(long, value_delimiter = ',')]
        snapshot: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// Directory for nodal dumps of the snapshots.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Monte Carlo strong convergence study.
    Study {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the sample count.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        serial: bool,
        /// Also track the running maximum over time steps of the error.
        #[arg(long)]
        running_max: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interpolation error rates of a test function.
    InterpStudy {
        /// `sin`, `linear:c0,c1,c2` or `radial:exponent[,cx,cy]`.
        #[arg(long)]
        function: String,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        p: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<u32>,
        #[arg(long, default_value = "dodecagon")]
        mesh: String,
        #[arg(long, default_value_t = 200_000)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn mesh_cmd(family: &str, level: u32, dump: Option<&Path>) -> Result<()> {
    let mesh: Mesh = match family {
        "dodecagon" => dodecagon_mesh(level)?,
        other => MeshKind::parse(other)?.mesh(level)?,
    };
    println!(
        "{family} level {level}: {} nodes, {} triangles, {} boundary nodes, h = {}, area = {}",
        mesh.n_nodes(),
        mesh.n_triangles(),
        mesh.boundary_nodes().len(),
        mesh.h_max(),
        mesh.total_area()
    );
    if let Some(path) = dump {
        mesh.write_dump(path)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    kernel: &str,
    level: u32,
    dt: f64,
    seed: u64,
    sample: u64,
    step: u64,
    mode: &str,
    max_padding: u32,
    out: Option<&Path>,
) -> Result<()> {
    let kernel = parse_kernel(kernel)?;
    let spectrum = Arc::new(build_spectrum(
        &kernel,
        level,
        max_padding,
        EmbeddingMode::parse(mode)?,
    )?);
    println!(
        "kernel {kernel}, grid level {level}, embed size {}, clipped {} ({:e})",
        spectrum.embed_size(),
        spectrum.clip_count(),
        spectrum.clipped_fraction()
    );
    let mut stream = NoiseStream::new(spectrum, seed, sample, dt)?;
    let values = stream.increment_at(step).to_vec();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    println!(
        "{} values, mean {mean:.6e}, variance {var:.6e}",
        values.len()
    );
    if let Some(path) = out {
        write_increment_dump(path, level, step, &values)?;
    }
    Ok(())
}

fn solve_cmd(config: &Path, snapshot: &[f64], sample: u64, dump_dir: Option<&Path>) -> Result<()> {
    let cfg = harness::load_config(config)?;
    let p = &cfg.problem;
    let n = p.n_steps()?;
    let default = [p.t_end];
    let times = if snapshot.is_empty() {
        &default[..]
    } else {
        snapshot
    };
    let mut steps = Vec::new();
    for &t in times {
        let j = (t / p.dt).round();
        if !(0.0..=n as f64).contains(&j) || (j * p.dt - t).abs() > 1e-9 * p.t_end.max(1.0) {
            return Err(Error::Config(format!(
                "snapshot time {t} is not a time grid point in [0, {}]",
                p.t_end
            )));
        }
        steps.push(j as usize);
    }
    let mesh = Arc::new(dodecagon_mesh(p.d_level)?);
    let disc = Discretization::new(p, mesh.clone(), p.s_level)?;
    let spectrum = Arc::new(build_spectrum(
        &p.kernel,
        p.s_level,
        cfg.max_padding,
        cfg.embedding_mode,
    )?);
    let mut stream = NoiseStream::new(spectrum, cfg.master_seed, sample, p.dt)?;
    let fields = run(p, &disc, &mut stream, &steps)?;
    let space = FemSpace::new(mesh, p.bc);
    for (j, x) in &fields {
        let t = p.time(*j);
        println!("t = {t}: ||X||_L2 = {:.10e}", space.l2_norm(x));
        if let Some(dir) = dump_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            space.write_field_dump(&dir.join(format!("field_step{j}.txt")), x)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn study_cmd(
    preset: Option<&str>,
    profile: &str,
    config: Option<&Path>,
    samples: Option<usize>,
    seed: Option<u64>,
    serial: bool,
    running_max: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut configs = match (preset, config) {
        (Some(name), _) => harness::preset(name, Profile::parse(profile)?)?,
        (None, Some(path)) => vec![harness::load_config(path)?],
        (None, None) => return Err(Error::Config("study needs --preset or --config".into())),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    for cfg in &mut configs {
        if let Some(m) = samples {
            cfg.samples = m;
        }
        if let Some(s) = seed {
            cfg.master_seed = s;
        }
        cfg.track_running_max |= running_max;
        let report = harness::run_convergence_study_with(cfg, !serial)?;
        print!("{}", report.summary());
        let target = match (out, &cfg.output) {
            (Some(dir), _) => Some(dir.join(format!("{}.csv", cfg.name))),
            (None, Some(path)) => Some(path.clone()),
            (None, None) => None,
        };
        if let Some(path) = target {
            harness::emit_csv(&report, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn interp_cmd(
    function: &str,
    r: f64,
    p: f64,
    levels: &[u32],
    mesh: &str,
    pairs: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let v = TestFunction::parse(function)?;
    let study = interpolation_rate_study(&v, r, p, levels, MeshKind::parse(mesh)?, pairs, seed)?;
    for row in &study.rows {
        println!(
            "level {} h {:.5} error {:.6e} +- {:.2e}",
            row.level, row.h, row.error, row.stderr
        );
    }
    println!("slope {:.4}", study.slope);
    if let Some(path) = out {
        study.write_csv(path)?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Mesh {
            family,
            level,
            dump,
        } => mesh_cmd(&family, level, dump.as_deref()),
        Command::Sample {
            kernel,
            level,
            dt,
            seed,
            sample,
            step,
            mode,
            max_padding,
            out,
        } => sample_cmd(
            &kernel,
            level,
            dt,
            seed,
            sample,
            step,
            &mode,
            max_padding,
            out.as_deref(),
        ),
        Command::Solve {
            config,
            snapshot,
            sample,
            dump_dir,
        } => solve_cmd(&config, &snapshot, sample, dump_dir.as_deref()),
        Command::Study {
            preset,
            profile,
            config,
            samples,
            seed,
            serial,
            running_max,
            out,
        } => study_cmd(
            preset.as_deref(),
            &profile,
            config.as_deref(),
            samples,
            seed,
            serial,
            running_max,
            out.as_deref(),
        ),
        Command::InterpStudy {
            function,
            r,
            p,
            levels,
            mesh,
            pairs,
            seed,
            out,
        } => interp_cmd(&function, r, p, &levels, &mesh, pairs, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
