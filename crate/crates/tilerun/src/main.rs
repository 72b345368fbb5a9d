//! Command-line entry point: trains a model from a JSON run
//! configuration on the modeled device topology, writing metrics,
//! optional Chrome traces and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tilerun::model::{Gpt2Model, RunConfig};
use tilerun::scheduler::PolicyKind;
use tilerun::{Error, Result, Runtime};

#[derive(Parser)]
#[command(name = "tilerun", about = "Tile-based task-parallel training runtime", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a run configuration file.
    Train(TrainArgs),
    /// Print a default run configuration as JSON.
    DefaultConfig,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the scheduling policy: `eager` or `greedy-ect`.
    #[arg(long)]
    policy: Option<String>,
    /// Write a Chrome trace-event file of the whole run.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Override the per-GPU-like-device memory capacity in bytes.
    #[arg(long)]
    cap_bytes: Option<u64>,
    /// Disable offloading: devices never evict, full is fatal.
    #[arg(long)]
    no_offload: bool,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Metrics CSV output path.
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
    /// Save final parameters to this checkpoint file.
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
    /// Load initial parameters from this checkpoint file.
    #[arg(long)]
    load_checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::DefaultConfig => {
            println!(
                "{}",
                serde_json::to_string_pretty(&RunConfig::default()).expect("serializable")
            );
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::OutOfDeviceMemory { .. }) {
                eprintln!(
                    "diagnosis: the working set no longer fits the modeled device \
                     memories; raise --cap-bytes, shrink the model, or re-enable \
                     offloading (drop --no-offload)"
                );
            }
            ExitCode::FAILURE
        }
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::from_reader(BufReader::new(File::open(&args.config)?))?;
    if let Some(p) = &args.policy {
        cfg.scheduler.policy = PolicyKind::parse(p)
            .ok_or_else(|| Error::Config(format!("unknown policy `{p}`")))?;
    }
    if let Some(cap) = args.cap_bytes {
        cfg.devices.gpu_mem_bytes = cap;
    }
    if let Some(steps) = args.steps {
        cfg.training.steps = steps;
    }
    let topology = cfg.devices.topology()?;
    let options = cfg.run_options(!args.no_offload, args.trace.is_some());
    println!(
        "devices: {} | policy: {} | offload: {} | steps: {}",
        topology.len(),
        cfg.scheduler.policy,
        !args.no_offload,
        cfg.training.steps
    );

    let mut rt = Runtime::new(topology, options)?;

    // Checkpoint restore happens through a throwaway model instance so
    // that `train` owns its own build; both share the config seed and
    // therefore the same tile layout.
    if let Some(path) = &args.load_checkpoint {
        let model = Gpt2Model::build(&mut rt, &cfg.model)?;
        model.load_checkpoint(&mut rt, &mut BufReader::new(File::open(path)?))?;
        let outcome = train_with_model(&mut rt, &model, &cfg)?;
        finish(&rt, &cfg, &args, outcome, Some(&model))?;
        return Ok(());
    }

    let model = Gpt2Model::build(&mut rt, &cfg.model)?;
    let outcome = train_with_model(&mut rt, &model, &cfg)?;
    finish(&rt, &cfg, &args, outcome, Some(&model))?;
    Ok(())
}

fn train_with_model(
    rt: &mut Runtime,
    model: &Gpt2Model,
    cfg: &RunConfig,
) -> Result<Vec<tilerun::model::TrainMetrics>> {
    use tilerun::model::{Dataset, TrainMetrics};
    use tilerun::nn::OptimizerState;
    use tilerun::tensor::TensorGradPair;

    println!("parameters: {}", model.parameter_count());
    let params = model.parameters();
    let refs: Vec<&TensorGradPair> = params.iter().map(|(_, p)| *p).collect();
    let mut optimizer = OptimizerState::new(rt, cfg.training.optimizer, &refs)?;
    drop(params);
    let dataset = Dataset::new(
        cfg.training.dataset,
        &cfg.model,
        cfg.training.data_seed,
        cfg.training.n_fixed_sequences,
    );
    let step_flops = cfg.model.step_flops();
    let mut metrics = Vec::new();
    for step in 0..cfg.training.steps {
        let (ids, labels) = dataset.batch(step);
        let wall = std::time::Instant::now();
        let loss = model.train_step(rt, &ids, &labels, Some(&mut optimizer))?;
        let summary = rt.last_summary().expect("step ran");
        let m = TrainMetrics {
            step,
            loss,
            makespan: summary.makespan,
            wall_seconds: wall.elapsed().as_secs_f64(),
            flops_per_vsec: if summary.makespan > 0.0 {
                step_flops / summary.makespan
            } else {
                0.0
            },
            bytes_moved: summary.bytes_moved,
        };
        println!(
            "step {:4}  loss {:8.4}  makespan {:12.1}  flops/vs {:10.3e}  moved {:>10} B  wall {:.2}s",
            m.step, m.loss, m.makespan, m.flops_per_vsec, m.bytes_moved, m.wall_seconds
        );
        metrics.push(m);
        rt.retire_completed();
    }
    Ok(metrics)
}

fn finish(
    rt: &Runtime,
    cfg: &RunConfig,
    args: &TrainArgs,
    metrics: Vec<tilerun::model::TrainMetrics>,
    model: Option<&Gpt2Model>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(&args.metrics)?);
    tilerun::model::write_metrics_csv(&mut out, &metrics)?;
    out.flush()?;
    println!("metrics written to {}", args.metrics.display());

    // Per-device utilization summary over the whole run.
    let trace = rt.trace();
    let total_makespan = trace.total_makespan();
    let ndev = rt.topology().len();
    let mut busy = vec![0.0f64; ndev];
    let mut tasks = vec![0usize; ndev];
    for s in &trace.summaries {
        for d in 0..ndev {
            busy[d] += s.device_busy[d];
            tasks[d] += s.device_tasks[d];
        }
    }
    println!(
        "run summary: virtual makespan {total_makespan:.1}s, bytes moved {}",
        trace.total_bytes_moved()
    );
    for d in rt.topology().devices.iter() {
        let util = if total_makespan > 0.0 {
            busy[d.id] / total_makespan
        } else {
            0.0
        };
        println!(
            "  device {:2} ({:?}, speed {:>5}): {:6} tasks, busy {:11.1}s, utilization {:5.1}%",
            d.id,
            d.kind,
            d.speed,
            tasks[d.id],
            busy[d.id],
            100.0 * util
        );
    }

    if let Some(path) = &args.trace {
        let mut w = BufWriter::new(File::create(path)?);
        trace.write_chrome_trace(rt.topology(), &mut w)?;
        w.flush()?;
        println!("chrome trace written to {}", path.display());
    }
    if let (Some(path), Some(model)) = (&args.save_checkpoint, model) {
        let mut w = BufWriter::new(File::create(path)?);
        model.save_checkpoint(rt, &mut w)?;
        w.flush()?;
        println!("checkpoint written to {}", path.display());
    }
    let _ = cfg;
    Ok(())
}
