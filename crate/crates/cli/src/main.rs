use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use critlab_client::Client;
use critlab_core::api::{JobRequest, JobState};
use critlab_core::config::ExperimentConfig;
use critlab_core::experiments::{Command, MANIFEST_FILE};
use critlab_service::{serve, AppState};

/// Critical learning period experiments. Every command runs as a job on a
/// critlab service; without --server an in-process one is started.
#[derive(Parser)]
#[command(name = "critlab", version)]
struct Cli {
    /// Base URL of a running critlab-server.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one network, probing the Fisher trace at train.probe_epochs.
    Train(Common),
    /// Final accuracy against deficit removal epoch.
    SweepRemoval(Common),
    /// Sensitivity to a fixed-length deficit window at each onset.
    SweepWindow(Common),
    /// Deficit damage across network depths.
    SweepDepth(Common),
    /// Window sweeps repeated for each weight decay.
    SweepWd(Common),
    /// Per-layer Fisher trace over training, clean and with deficits.
    FimTimeline(Common),
    /// Relate window sensitivity to the clean Fisher trace.
    Correlate(Common),
    /// Fit a curve from the CSV named in fit.input.
    Fit(Common),
    /// Write a conv layer's kernels as an image grid.
    ExportFilters(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: out/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Arms trained in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Base seed, overriding train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Cmd {
    fn split(self) -> (Command, Common) {
        match self {
            Cmd::Train(c) => (Command::Train, c),
            Cmd::SweepRemoval(c) => (Command::SweepRemoval, c),
            Cmd::SweepWindow(c) => (Command::SweepWindow, c),
            Cmd::SweepDepth(c) => (Command::SweepDepth, c),
            Cmd::SweepWd(c) => (Command::SweepWd, c),
            Cmd::FimTimeline(c) => (Command::FimTimeline, c),
            Cmd::Correlate(c) => (Command::Correlate, c),
            Cmd::Fit(c) => (Command::Fit, c),
            Cmd::ExportFilters(c) => (Command::ExportFilters, c),
        }
    }
}

fn build_request(command: Command, common: Common) -> anyhow::Result<JobRequest> {
    let cwd = std::env::current_dir()?;
    let mut config = match &common.config {
        Some(path) => {
            let path = std::path::absolute(path)?;
            ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.rebase(&cwd);
            cfg
        }
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if common.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let out = common
        .out
        .unwrap_or_else(|| PathBuf::from("out").join(command.as_str()));
    Ok(JobRequest {
        command,
        config,
        out: std::path::absolute(out)?,
        workers: common.workers,
    })
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (command, common) = cli.command.split();
    let req = build_request(command, common)?;

    let (client, shutdown) = match cli.server {
        Some(url) => (Client::new(url), None),
        None => {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            let (tx, rx) = tokio::sync::oneshot::channel::<()>();
            let server = tokio::spawn(serve(listener, AppState::new(1), async {
                let _ = rx.await;
            }));
            (Client::new(format!("http://{addr}")), Some((tx, server)))
        }
    };

    let id = client.submit(&req).await?;
    eprintln!("job {id}: {} -> {}", command.as_str(), req.out.display());
    let mut seen = 0;
    let result = client
        .wait(id, Duration::from_millis(250), |s| {
            if s.state == JobState::Running && s.arms_done > seen {
                seen = s.arms_done;
                eprintln!(
                    "  [{}/{}] {}",
                    s.arms_done,
                    s.arms_total,
                    s.last_arm.as_deref().unwrap_or("")
                );
            }
        })
        .await;

    if let Some((tx, server)) = shutdown {
        let _ = tx.send(());
        server.await??;
    }
    let status = result?;
    let manifest = status.manifest.context("finished job has no manifest")?;
    for arm in manifest.arms.iter().filter(|a| a.final_accuracy.is_none()) {
        eprintln!("  arm {} did not finish: {:?}", arm.id, arm.status);
    }
    println!("{}", req.out.join(MANIFEST_FILE).display());
    println!("{}", serde_json::to_string_pretty(&manifest.summary)?);
    Ok(())
}
