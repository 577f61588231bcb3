use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use gremdcl::encoder::{checkpoint, embed_view, GlobalProp};
use gremdcl::graph::{self, DatasetFormat};
use gremdcl::pipeline::{self, gradcheck, RunConfig};
use gremdcl::{augment::View, Error, Result};

#[derive(Parser)]
#[command(name = "gremdcl", version, about = "Contrastive node embeddings with augmented graph views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, then write checkpoint, loss trace and embeddings.
    Train(RunArgs),
    /// Probe the embeddings of a saved checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Pretrain and probe every split; writes report.json.
    Protocol(RunArgs),
    /// Run the full model and the three single-component ablations.
    Ablate(RunArgs),
    /// One protocol run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// tau, in_drop or attn_drop.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Embed the original graph with a saved checkpoint.
    ExportEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective on an 8-node graph.
    Gradcheck {
        #[arg(long, default_value = "attention")]
        global_prop: String,
    },
    /// Rewrite a dataset in the generic_json layout.
    ConvertDataset {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "linqs_text")]
        format: String,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_splits: Option<usize>,
    #[arg(long)]
    lambda_la: Option<f64>,
    #[arg(long)]
    svd_rank: Option<usize>,
    #[arg(long)]
    svd_iters: Option<usize>,
    #[arg(long)]
    svd_target: Option<String>,
    #[arg(long)]
    cvae_epochs: Option<usize>,
    #[arg(long)]
    cvae_hidden: Option<usize>,
    #[arg(long)]
    cvae_zdim: Option<usize>,
    #[arg(long)]
    global_prop: Option<String>,
    #[arg(long)]
    tau_all: Option<f64>,
    #[arg(long)]
    dump_views: Option<PathBuf>,
    #[arg(long)]
    retrain_per_split: bool,
    #[arg(long)]
    no_la: bool,
    #[arg(long)]
    no_svd: bool,
    #[arg(long)]
    no_mdcl: bool,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o: Vec<(&'static str, String)> = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k, v));
            }
        };
        put("dataset", self.dataset.clone());
        put("format", self.format.clone());
        put("output_dir", self.output.as_ref().map(|p| p.display().to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("num_splits", self.num_splits.map(|v| v.to_string()));
        put("lambda_la", self.lambda_la.map(|v| v.to_string()));
        put("svd_rank", self.svd_rank.map(|v| v.to_string()));
        put("svd_iters", self.svd_iters.map(|v| v.to_string()));
        put("svd_target", self.svd_target.clone());
        put("cvae_epochs", self.cvae_epochs.map(|v| v.to_string()));
        put("cvae_hidden", self.cvae_hidden.map(|v| v.to_string()));
        put("cvae_zdim", self.cvae_zdim.map(|v| v.to_string()));
        put("global_prop", self.global_prop.clone());
        put("tau_all", self.tau_all.map(|v| v.to_string()));
        put("dump_views", self.dump_views.as_ref().map(|p| p.display().to_string()));
        for (flag, key) in [
            (self.retrain_per_split, "retrain_per_split"),
            (self.no_la, "no_la"),
            (self.no_svd, "no_svd"),
            (self.no_mdcl, "no_mdcl"),
        ] {
            put(key, flag.then(|| "true".to_string()));
        }
        o
    }

    /// Config file (or `base`), then `--set` pairs, then named flags.
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(b)) => b,
            (None, None) => RunConfig::default(),
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &text)
}

fn print_summary(label: &str, s: &pipeline::Summary, splits: usize) {
    let std = if s.std_defined { format!("{:.2}", 100.0 * s.std) } else { "n/a".into() };
    println!("{label}: {:.2} ± {std} over {splits} split(s)", 100.0 * s.mean);
}

/// Checkpoint plus the config it was trained with (or `--config`).
fn load_checkpoint(run: &RunArgs, path: &Path) -> Result<(RunConfig, gremdcl::encoder::TripleNetState)> {
    let data = checkpoint::read(path)?;
    let stored = RunConfig::from_text(&data.config_text)?;
    let cfg = run.resolve(Some(stored))?;
    let g = cfg.load_graph()?;
    let (state, _) = data.restore(g.feature_dim(), cfg.encoder.clone())?;
    Ok((cfg, state))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(run) => {
            let cfg = run.resolve(None)?;
            let g = cfg.load_graph()?;
            let trained = pipeline::train(&g, &cfg)?;
            let ckpt = pipeline::write_training_outputs(&cfg.output_dir, &cfg, &trained)?;
            write_text(&cfg.output_dir.join("config.cfg"), &cfg.to_text())?;
            pipeline::export_embeddings(&cfg.output_dir, &cfg.dataset, &trained.embed()?, &ckpt)?;
            let last = trained.trace.last().map_or(f64::NAN, |r| r.total);
            println!("trained {} epochs, final loss {last:.6}; outputs in {}", trained.trace.len(), cfg.output_dir.display());
        }
        Command::Eval { run, checkpoint } => {
            let (cfg, state) = load_checkpoint(&run, &checkpoint)?;
            let g = cfg.load_graph()?;
            let emb = embed_view(&state, &View::original(&g))?;
            let (splits, summary) = pipeline::evaluate_embeddings(&g, &cfg, &emb)?;
            create_dir(&cfg.output_dir)?;
            write_json(
                &cfg.output_dir.join("eval.json"),
                &serde_json::json!({ "checkpoint": checkpoint, "splits": splits, "summary": summary }),
            )?;
            print_summary("test accuracy", &summary, splits.len());
        }
        Command::Protocol(run) => {
            let cfg = run.resolve(None)?;
            let g = cfg.load_graph()?;
            let (report, trained) = pipeline::run_protocol(&g, &cfg)?;
            let ckpt = pipeline::write_training_outputs(&cfg.output_dir, &cfg, &trained)?;
            report.write_json(&cfg.output_dir.join("report.json"))?;
            pipeline::export_embeddings(&cfg.output_dir, &cfg.dataset, &trained.embed()?, &ckpt)?;
            print_summary("test accuracy", &report.summary, report.accuracies.len());
            println!("wall time {:.1}s; outputs in {}", report.wall_seconds, cfg.output_dir.display());
        }
        Command::Ablate(run) => {
            let cfg = run.resolve(None)?;
            let g = cfg.load_graph()?;
            let runs = pipeline::ablate(&g, &cfg)?;
            create_dir(&cfg.output_dir)?;
            write_text(&cfg.output_dir.join("ablation.csv"), &pipeline::variants_csv("variant", &runs))?;
            write_json(&cfg.output_dir.join("ablation.json"), &runs)?;
            for r in &runs {
                print_summary(&r.name, &r.report.summary, r.report.accuracies.len());
            }
        }
        Command::Sweep { run, axis, values } => {
            let cfg = run.resolve(None)?;
            let g = cfg.load_graph()?;
            let runs = pipeline::sweep(&g, &cfg, &axis, &values)?;
            create_dir(&cfg.output_dir)?;
            write_text(&cfg.output_dir.join(format!("sweep_{axis}.csv")), &pipeline::variants_csv(&axis, &runs))?;
            write_json(&cfg.output_dir.join(format!("sweep_{axis}.json")), &runs)?;
            for r in &runs {
                print_summary(&format!("{axis} = {}", r.name), &r.report.summary, r.report.accuracies.len());
            }
        }
        Command::ExportEmbeddings { run, checkpoint, out } => {
            let (cfg, state) = load_checkpoint(&run, &checkpoint)?;
            let g = cfg.load_graph()?;
            let emb = embed_view(&state, &View::original(&g))?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let m = pipeline::export_embeddings(&dir, &cfg.dataset, &emb, &checkpoint)?;
            println!("wrote {}×{} embeddings to {}", m.num_nodes, m.width, dir.display());
        }
        Command::Gradcheck { global_prop } => {
            let prop: GlobalProp = global_prop.parse()?;
            let reports = gradcheck::objective_gradcheck(&gradcheck::fixture_config(prop))?;
            let mut worst: f64 = 0.0;
            for (name, r) in &reports {
                println!("{name:<16} max relative error {:.3e}", r.max_rel_err);
                worst = worst.max(r.max_rel_err);
            }
            let ok = worst < gradcheck::GRADCHECK_TOL;
            println!(
                "max relative error {worst:.3e} (tolerance {:.0e}): {}",
                gradcheck::GRADCHECK_TOL,
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
        Command::ConvertDataset { input, format, output } => {
            let format: DatasetFormat = format.parse()?;
            let g = graph::load_dataset(&input, format)?;
            create_dir(&output)?;
            graph::write_generic_json(&g, &output)?;
            println!(
                "{} nodes, {} edges, {} features, {} classes -> {}",
                g.num_nodes(),
                g.num_edge_entries() / 2,
                g.feature_dim(),
                g.num_classes(),
                output.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    gremdcl::numkit::configure_threads();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
