use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use morf_cli::{fork_script, reference_image, sibling_reference_binary};
use morf_client::{Client, SubmitRequest, SubmitResponse};
use morf_core::catalog::{designate_holdouts, load_manifest};
use morf_core::orchestrator::{Orchestrator, OrchestratorOptions};
use morf_core::sandbox::pack_image;
use morf_core::synth::{write_course, CourseSpec};
use morf_server::{AppState, Auth};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "morf",
    version,
    about = "Submit and inspect experiments on a MORF server"
)]
struct Cli {
    /// Gateway base URL.
    #[arg(
        long,
        global = true,
        env = "MORF_URL",
        default_value = "http://127.0.0.1:8750"
    )]
    url: String,
    /// Bearer token.
    #[arg(long, global = true, env = "MORF_TOKEN")]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the platform service.
    Serve(ServeArgs),
    /// Submit a job from a config file.
    Submit(SubmitArgs),
    /// Show a job record.
    Status { job_id: String },
    /// Show a job's event feed.
    Events { job_id: String },
    /// Show a job's summary results.
    Results {
        job_id: String,
        /// Print CSV instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Submit a job that reuses another job's extracted features.
    Fork {
        source_job: String,
        #[command(flatten)]
        submit: SubmitArgs,
    },
    /// Compare two predict jobs course by course (Wilcoxon signed-rank).
    Compare {
        job_a: String,
        job_b: String,
        #[arg(long, default_value = "auc")]
        metric: String,
    },
    /// Catalog commands.
    #[command(subcommand)]
    Data(DataCommand),
    /// Artifact registry commands.
    #[command(subcommand)]
    Artifacts(ArtifactCommand),
    /// Image archive commands.
    #[command(subcommand)]
    Image(ImageCommand),
}

#[derive(Args)]
struct ServeArgs {
    /// State directory (job log, registry, cache).
    #[arg(long)]
    state: PathBuf,
    /// Catalog manifest CSV.
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8750")]
    bind: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Sandbox backend: namespace or bundle.
    #[arg(long, default_value = "namespace")]
    backend: String,
    /// File of `<token> <user> [trusted]` lines; without it access is open.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Per-task wall-clock limit in seconds.
    #[arg(long, default_value_t = 3600)]
    task_timeout: u64,
    /// Per-job wall-clock limit in seconds.
    #[arg(long, default_value_t = 6 * 3600)]
    job_timeout: u64,
}

#[derive(Args)]
struct SubmitArgs {
    /// INI config with a [morf] section.
    #[arg(long)]
    config: PathBuf,
    /// Controller script or rule file to upload instead of the config reference.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Image archive to upload instead of the config reference.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Wait for the job to finish.
    #[arg(long)]
    wait: bool,
    /// Seconds to wait with --wait.
    #[arg(long, default_value_t = 3600)]
    timeout: u64,
}

#[derive(Subcommand)]
enum DataCommand {
    /// List registered courses and sessions.
    Ls,
    /// Write a synthetic catalog of export bundles and its manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    courses: u32,
    #[arg(long, default_value_t = 3)]
    sessions: u32,
    #[arg(long, default_value_t = 100)]
    users: u32,
    #[arg(long, default_value_t = 6)]
    weeks: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    signal: f64,
    #[arg(long, default_value_t = 0.4)]
    completion: f64,
    #[arg(long, default_value = "u")]
    user_prefix: String,
}

#[derive(Subcommand)]
enum ArtifactCommand {
    /// List a job's archived artifacts.
    Ls { job_id: String },
    /// Download an artifact (restricted kinds need a trusted token).
    Get {
        persistent_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify every registry blob against its digest.
    Fsck,
}

#[derive(Subcommand)]
enum ImageCommand {
    /// Pack a rootfs directory into an image archive.
    Pack {
        #[arg(long)]
        rootfs: PathBuf,
        /// Entrypoint path inside the rootfs, then fixed arguments.
        #[arg(long, num_args = 1.., required = true)]
        entrypoint: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack the bundled reference experiment.
    Reference {
        #[arg(long)]
        out: PathBuf,
        /// Deliberate misbehavior for sandbox tests.
        #[arg(long)]
        behavior: Option<String>,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

async fn submit(client: &Client, args: &SubmitArgs, script: Option<String>) -> Result<()> {
    let image = match &args.image {
        Some(p) => Some(fs::read(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let resp: SubmitResponse = client
        .submit(SubmitRequest {
            config: read(&args.config)?,
            script,
            image,
        })
        .await?;
    print_json(&resp)?;
    if let Some(err) = &resp.error {
        bail!("job {} rejected: {err}", resp.job_id);
    }
    if args.wait {
        let job = client
            .wait(&resp.job_id, Duration::from_secs(args.timeout))
            .await?;
        print_json(
            &serde_json::json!({ "job_id": job.job_id, "state": job.state, "failure_reason": job.failure_reason }),
        )?;
        if job.failure_reason.is_some() {
            bail!("job {} failed", job.job_id);
        }
    }
    Ok(())
}

async fn serve(args: ServeArgs) -> Result<()> {
    let catalog = designate_holdouts(load_manifest(&args.catalog)?);
    let auth = match &args.tokens {
        Some(p) => Auth::parse(&read(p)?)?,
        None => Auth::open(),
    };
    let mut opts = OrchestratorOptions::new(&args.state);
    opts.workers = args.workers;
    opts.backend = args.backend;
    opts.limits.wall_clock = Duration::from_secs(args.task_timeout);
    opts.job_timeout = Duration::from_secs(args.job_timeout);
    let orch = tokio::task::spawn_blocking(move || Orchestrator::open(opts, catalog)).await??;
    let listener = tokio::net::TcpListener::bind(&args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    morf_server::serve(
        listener,
        AppState {
            orch,
            auth: Arc::new(auth),
        },
    )
    .await
}

fn synth(args: &SynthArgs) -> Result<()> {
    for i in 0..args.courses {
        let mut spec = CourseSpec::new(
            format!("course{:02}", i + 1),
            args.seed.wrapping_add(i as u64),
        );
        spec.n_sessions = args.sessions;
        spec.users_per_session = args.users;
        spec.weeks = args.weeks;
        spec.signal_strength = args.signal;
        spec.completion_rate = args.completion;
        spec.user_prefix = args.user_prefix.clone();
        write_course(&spec, &args.out)?;
    }
    println!("{}", args.out.join("manifest.csv").display());
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let client = Client::new(&cli.url, cli.token.clone());
    match cli.command {
        Command::Serve(args) => serve(args).await?,
        Command::Submit(args) => {
            let script = args.script.as_deref().map(read).transpose()?;
            submit(&client, &args, script).await?
        }
        Command::Fork {
            source_job,
            submit: args,
        } => {
            let Some(path) = &args.script else {
                bail!(
                    "fork needs --script with the train/test steps to run on the forked features"
                );
            };
            let script = fork_script(&source_job, &read(path)?);
            submit(&client, &args, Some(script)).await?
        }
        Command::Status { job_id } => print_json(&client.job(&job_id).await?)?,
        Command::Events { job_id } => print_json(&client.events(&job_id).await?)?,
        Command::Results { job_id, csv } => {
            if csv {
                print!("{}", client.results_csv(&job_id).await?);
            } else {
                print_json(&client.results(&job_id).await?)?;
            }
        }
        Command::Compare {
            job_a,
            job_b,
            metric,
        } => print_json(&client.compare(&job_a, &job_b, &metric).await?)?,
        Command::Data(DataCommand::Ls) => print_json(&client.courses().await?)?,
        Command::Data(DataCommand::Synth(args)) => synth(&args)?,
        Command::Artifacts(ArtifactCommand::Ls { job_id }) => {
            print_json(&client.artifacts(&job_id).await?)?
        }
        Command::Artifacts(ArtifactCommand::Get { persistent_id, out }) => {
            let artifact = client.artifact(&persistent_id).await?;
            match out {
                Some(path) => {
                    fs::write(&path, &artifact.bytes)
                        .with_context(|| format!("writing {}", path.display()))?;
                    eprintln!(
                        "wrote {} bytes ({}) to {}",
                        artifact.bytes.len(),
                        artifact.digest.unwrap_or_default(),
                        path.display()
                    );
                }
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&artifact.bytes)?;
                }
            }
        }
        Command::Artifacts(ArtifactCommand::Fsck) => {
            let report = client.fsck().await?;
            print_json(&report)?;
            if !report.ok {
                bail!("registry check found {} problem(s)", report.problems.len());
            }
        }
        Command::Image(ImageCommand::Pack {
            rootfs,
            entrypoint,
            out,
        }) => {
            let bytes = pack_image(&rootfs, &entrypoint)?;
            fs::write(&out, &bytes)?;
            println!("{}", morf_core::digest::sha256_hex(&bytes));
        }
        Command::Image(ImageCommand::Reference { out, behavior }) => {
            let bytes = reference_image(&sibling_reference_binary()?, behavior.as_deref())?;
            fs::write(&out, &bytes)?;
            println!("{}", morf_core::digest::sha256_hex(&bytes));
        }
    }
    Ok(())
}
