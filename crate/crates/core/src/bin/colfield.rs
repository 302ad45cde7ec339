use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use colfield::checkpoint;
use colfield::gradcheck::verify_gradients;
use colfield::recovery::evaluate;
use colfield::run::{load_labels, load_scene, write_evaluation, write_scene_dir, RunConfig, CHECKPOINT_FILE, METRICS_FILE};
use colfield::scene::ViewId;
use colfield::templates::template;

// Training allocates large per-step buffers; the system allocator returns
// them to the OS and faults them back in every step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
use colfield::train::{render_view, write_metrics, Dataset, Model, TrainState};
use colfield::Error;

/// Collaborative neural fields for recovering failed camera views.
#[derive(Parser)]
#[command(name = "colfield", version)]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a template scene with oracle images, masks and flows.
    GenScene {
        /// static-room, moving-box or two-agent-intersection.
        template: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains both phases and writes the checkpoint and metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in this invocation; resume later.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Renders one view from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory providing the camera poses.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        agent: String,
        #[arg(long)]
        camera: String,
        #[arg(long)]
        t: i64,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Output PPM image.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the failure sweep and writes the report and recovered images.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compares analytic gradients with central differences.
    VerifyGrads {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

/// Config file plus flag overrides shared by the run commands.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sets both phase lengths.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    static_steps: Option<u64>,
    #[arg(long)]
    dynamic_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rays: Option<usize>,
    /// Quadrature samples per ray during training.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lambda_static: Option<f64>,
    #[arg(long)]
    lambda_dynamic: Option<f64>,
    #[arg(long)]
    lambda_optical: Option<f64>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    lambda_smooth: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> colfield::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.scene {
            c.scene = v.clone();
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.steps {
            c.train.static_steps = v;
            c.train.dynamic_steps = v;
        }
        if let Some(v) = self.static_steps {
            c.train.static_steps = v;
        }
        if let Some(v) = self.dynamic_steps {
            c.train.dynamic_steps = v;
        }
        if let Some(v) = self.lr {
            c.train.lr_init = v;
        }
        if let Some(v) = self.rays {
            c.train.rays_per_batch = v;
        }
        if let Some(v) = self.samples {
            c.train.samples_per_ray = v;
        }
        let w = &mut c.train.weights;
        for (flag, slot) in [
            (self.lambda_static, &mut w.static_rgb),
            (self.lambda_dynamic, &mut w.dynamic_rgb),
            (self.lambda_optical, &mut w.optical),
            (self.lambda_cycle, &mut w.cycle),
            (self.lambda_smooth, &mut w.smooth),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        c.resolve()
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Input(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenScene { template: name, seed, out } => {
            let scene = template(&name, seed)?;
            write_scene_dir(&scene, &out)?;
            info!("wrote {} views of {name} to {}", scene.all_views().len(), out.display());
        }
        Command::Train { run, resume, stop_after } => train(&run.resolve()?, resume, stop_after)?,
        Command::Render {
            checkpoint,
            scene,
            agent,
            camera,
            t,
            samples,
            out,
        } => {
            let state = checkpoint::load(&checkpoint)?;
            let scene = load_scene(&scene)?;
            let cam = scene.view_camera(&ViewId::new(agent, camera, t))?;
            let img = render_view(&state.model, &cam, t, samples, state.render_mode(), state.config.chunk)?;
            img.write_ppm(&out)?;
        }
        Command::Evaluate { run, checkpoint } => {
            let c = run.resolve()?;
            let path = checkpoint.unwrap_or_else(|| c.out.join(CHECKPOINT_FILE));
            evaluate_run(&c, &path)?;
        }
        Command::VerifyGrads {
            run,
            checkpoint,
            probes,
            tolerance,
        } => {
            let c = run.resolve()?;
            let scene = load_scene(&c.scene)?;
            let data = Dataset::new(&scene, load_labels(&c.scene, &scene)?)?;
            let state = match checkpoint {
                Some(p) => checkpoint::load(&p)?,
                None => TrainState::new(c.train.clone(), Model::build(&scene, &[], &c.field, &c.bev, c.seed)?)?,
            };
            let report = verify_gradients(&state, &data, probes, c.seed)?;
            print!("{}", report.to_csv());
            let worst = report.worst();
            if !(worst < tolerance) {
                return Err(Failure::Runtime(format!("max relative error {worst:.3e} exceeds {tolerance:.1e}")));
            }
        }
    }
    Ok(())
}

fn train(c: &RunConfig, resume: bool, stop_after: Option<u64>) -> colfield::Result<()> {
    let scene = load_scene(&c.scene)?;
    let held_out = c.held_out(&scene)?;
    let labels = load_labels(&c.scene, &scene)?
        .into_iter()
        .filter(|(id, _)| !held_out.contains(id))
        .collect();
    let data = Dataset::new(&scene, labels)?;
    c.save(&c.out)?;
    let ckpt = c.out.join(CHECKPOINT_FILE);
    let metrics = c.out.join(METRICS_FILE);
    let mut state = if resume {
        let s = checkpoint::load(&ckpt)?;
        if s.config != c.train {
            return Err(Error::Config("checkpoint was trained with a different train config".into()));
        }
        s
    } else {
        TrainState::new(c.train.clone(), Model::build(&scene, &held_out, &c.field, &c.bev, c.seed)?)?
    };
    for v in &held_out {
        info!("held out {v}");
    }
    checkpoint::save(&state, &ckpt)?;
    let every = c.checkpoint_every;
    let mut budget = stop_after.unwrap_or(u64::MAX);
    let result = (|| {
        while budget > 0 {
            let Some(row) = state.step(&data)? else { break };
            budget -= 1;
            let done = state.static_step + state.dynamic_step;
            if done % 100 == 0 {
                info!("{} step {} loss {:.6}", row.phase.name(), row.step, row.total);
            }
            if every > 0 && done % every == 0 {
                checkpoint::save(&state, &ckpt)?;
                write_metrics(&metrics, &state.history)?;
            }
        }
        Ok(())
    })();
    write_metrics(&metrics, &state.history)?;
    result?;
    checkpoint::save(&state, &ckpt)?;
    info!("trained {} static and {} dynamic steps", state.static_step, state.dynamic_step);
    Ok(())
}

fn evaluate_run(c: &RunConfig, checkpoint_path: &Path) -> colfield::Result<()> {
    let state = checkpoint::load(checkpoint_path)?;
    let scene = load_scene(&c.scene)?;
    let t = c.failure.time(&scene);
    let truth: Vec<_> = load_labels(&c.scene, &scene)?
        .into_iter()
        .filter(|(id, _)| id.t == t)
        .map(|(id, l)| (id, l.image))
        .collect();
    let ev = evaluate(&state.model, state.render_mode(), &scene, &truth, &c.failure, &c.eval)?;
    write_evaluation(&c.out, &ev)?;
    print!("{}", ev.report.to_csv());
    Ok(())
}
