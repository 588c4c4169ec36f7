//! Command front end. Every command writes only under the output directory.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{Config, DataSource, Role, RmaxSetting};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, load_report, save_report, write_pair_dump, write_reference_table, Setting};
use crate::graph::{build_sequences, dump_graphs, estimate_rmax, GraphParams, LaneConvention};
use crate::ingest::{harmonize, load_dataset, meta_path_for, save_dataset, DatasetMeta, Schema};
use crate::nn::{Checkpoint, ParamStore};
use crate::synth::{generate_to, ScenarioSpec};
use crate::train::{run::save_log, run_finetune, run_pretrain, TrainOutcome};
use crate::trajectory::{split_vehicles, Dataset, SourceTag, VehicleSplit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "lagat", version, about = "Lane-aware graph attention trajectory prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (key = value).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Evaluation setting: pretrain-test, zero-shot or fine-tuned.
    #[arg(long, global = true, value_name = "TAG")]
    pub setting: Option<String>,
    /// Checkpoint to fine-tune from or evaluate.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic merge-zone datasets.
    Synth,
    /// Harmonize every configured dataset.
    Ingest,
    /// Estimate the proximity radius from training data.
    EstimateRmax,
    /// Dump anchor graphs of every ingested dataset.
    BuildGraphs,
    /// Train from scratch on the pre-training dataset.
    Pretrain,
    /// Fine-tune a checkpoint with the encoder frozen.
    Finetune,
    /// Compute displacement and safety metrics for one setting.
    Evaluate,
    /// Collect evaluation results into one table.
    Report,
    /// Print the trainable parameter count.
    ParamCount,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let cfg = Config::load(path)?;
    let setting = cli.setting.as_deref().map(str::parse::<Setting>).transpose()?;
    if cli.threads == Some(0) {
        return Err(Error::Config("--threads must be positive".into()));
    }
    let ctx = Context {
        out: cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone()),
        cfg,
        checkpoint: cli.checkpoint.clone(),
        setting,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| ctx.dispatch(cli.command))
}

struct Context {
    cfg: Config,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    setting: Option<Setting>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Context {
    fn dispatch(&self, command: Command) -> Result<()> {
        match command {
            Command::Synth => self.synth(),
            Command::Ingest => self.ingest(),
            Command::EstimateRmax => self.estimate_rmax().map(|r| println!("{r}")),
            Command::BuildGraphs => self.build_graphs(),
            Command::Pretrain => self.pretrain(),
            Command::Finetune => self.finetune(),
            Command::Evaluate => self.evaluate(),
            Command::Report => self.report(),
            Command::ParamCount => {
                println!("{}", ParamStore::init(self.cfg.model.clone(), self.cfg.seed).count_parameters());
                Ok(())
            }
        }
    }

    fn synth_path(&self, role: Role) -> PathBuf {
        self.out.join("synth").join(format!("{}.csv", role.as_str()))
    }

    fn ingested_path(&self, role: Role) -> PathBuf {
        self.out.join("ingest").join(format!("{}.csv", role.as_str()))
    }

    fn synth(&self) -> Result<()> {
        let roles: Vec<_> = self.cfg.datasets.iter().filter(|d| d.source == DataSource::Synth).collect();
        if roles.is_empty() {
            return Err(Error::Config("no dataset uses `path = synth`".into()));
        }
        create_dir(&self.out.join("synth"))?;
        for d in roles {
            let spec = ScenarioSpec {
                vehicles: d.synth_vehicles.unwrap_or(self.cfg.synth.vehicles),
                seed: self.cfg.seed.wrapping_add(d.synth_seed_offset),
                ..self.cfg.synth.clone()
            };
            let path = self.synth_path(d.role);
            let ds = generate_to(&spec, &path)?;
            println!("{}: {} vehicles, {} states -> {}", d.role.as_str(), ds.num_vehicles(), ds.num_states(), path.display());
        }
        Ok(())
    }

    fn ingest(&self) -> Result<()> {
        if self.cfg.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        let dir = self.out.join("ingest");
        create_dir(&dir)?;
        for d in &self.cfg.datasets {
            let (path, sidecar) = match &d.source {
                DataSource::File(p) => (p.clone(), d.meta.clone()),
                DataSource::Synth => {
                    let p = self.synth_path(d.role);
                    let m = d.meta.clone().unwrap_or_else(|| meta_path_for(&p));
                    (p, Some(m))
                }
            };
            let mut meta = match (&sidecar, d.lane_max) {
                (_, Some(lane_max)) => DatasetMeta {
                    source_tag: match d.schema {
                        Schema::Ngsim => SourceTag::NgsimUs101,
                        Schema::Ute => SourceTag::UteW1,
                    },
                    lane_max,
                    merge_lane_ids: BTreeSet::new(),
                },
                (Some(m), None) => DatasetMeta::read(m)?,
                (None, None) => return Err(Error::Config(format!("{}: no lane metadata", d.role.as_str()))),
            };
            if let Some(tag) = d.source_tag {
                meta.source_tag = tag;
            }
            if let Some(m) = &d.merge_lane_ids {
                meta.merge_lane_ids = m.clone();
            }
            let (ds, report) = harmonize(&path, d.schema, &meta)?;
            let out = self.ingested_path(d.role);
            save_dataset(&ds, &out)?;
            write_file(&dir.join(format!("{}.report.txt", d.role.as_str())), &report.to_string())?;
            println!(
                "{}: {} vehicles, {} records kept, {} trajectories dropped -> {}",
                d.role.as_str(),
                ds.num_vehicles(),
                report.records_out,
                report.dropped_trajectories,
                out.display()
            );
        }
        Ok(())
    }

    fn load(&self, role: Role) -> Result<Dataset> {
        if self.cfg.dataset(role).is_none() {
            return Err(Error::Config(format!("no `{}.path` configured", role.as_str())));
        }
        load_dataset(&self.ingested_path(role))
    }

    fn pretrain_split(&self, ds: &Dataset) -> Result<VehicleSplit> {
        // Same seed as the first dataset in the pre-training run.
        split_vehicles(ds, self.cfg.pretrain.split, self.cfg.pretrain.seed)
    }

    /// Radius from config, the persisted estimate, or a fresh estimate over
    /// the pre-training split's training vehicles.
    fn estimate_rmax(&self) -> Result<f64> {
        if let RmaxSetting::Fixed(r) = self.cfg.rmax {
            return Ok(r);
        }
        let path = self.out.join("rmax.txt");
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return text
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{}: not a number", path.display())));
        }
        let ds = self.load(Role::Pretrain)?;
        let split = self.pretrain_split(&ds)?;
        let train = Dataset::new(
            ds.source_tag,
            ds.lane_max,
            ds.merge_lane_ids.clone(),
            ds.trajectories().filter(|t| split.train.contains(&t.vehicle_id())).cloned(),
        )?;
        let r = estimate_rmax(&[&train])?;
        create_dir(&self.out)?;
        write_file(&path, &format!("{r}\n"))?;
        Ok(r)
    }

    fn graph_params(&self, rmax: f64, ds: &Dataset) -> GraphParams {
        GraphParams {
            convention: LaneConvention {
                lower_index_is_left: self.cfg.lower_lane_is_left,
            },
            ..GraphParams::new(rmax, ds.merge_lane_ids.clone())
        }
    }

    fn build_graphs(&self) -> Result<()> {
        let rmax = self.estimate_rmax()?;
        for d in &self.cfg.datasets {
            let ds = self.load(d.role)?;
            let seqs = build_sequences(&ds, &self.graph_params(rmax, &ds), self.cfg.eval_stride);
            let dir = self.out.join("graphs").join(d.role.as_str());
            let n = dump_graphs(&seqs, &dir)?;
            println!("{}: {n} anchor graphs -> {}", d.role.as_str(), dir.display());
        }
        Ok(())
    }

    fn save_outcome(&self, phase: &str, outcome: &TrainOutcome) -> Result<PathBuf> {
        let dir = self.out.join(phase);
        create_dir(&dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        outcome.checkpoint.save(&ckpt)?;
        save_log(&outcome.log, &dir.join(LOG_FILE))?;
        let mut splits = String::new();
        for (d, s) in outcome.splits.iter().enumerate() {
            for (name, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                splits.push_str(&format!("dataset{d}.{name} = {}\n", ids.join(",")));
            }
        }
        write_file(&dir.join("splits.txt"), &splits)?;
        println!(
            "{phase}: best epoch {} of {} -> {}",
            outcome.checkpoint.meta.best_epoch,
            outcome.log.len(),
            ckpt.display()
        );
        Ok(ckpt)
    }

    fn pretrain(&self) -> Result<()> {
        let ds = self.load(Role::Pretrain)?;
        let rmax = self.estimate_rmax()?;
        let outcome = run_pretrain(&[&ds], rmax, &self.cfg.model, &self.cfg.pretrain)?;
        self.save_outcome("pretrain", &outcome).map(|_| ())
    }

    fn checkpoint_path(&self, default_phase: &str) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(default_phase).join(CHECKPOINT_FILE))
    }

    fn load_checkpoint(&self, default_phase: &str) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(&self.checkpoint_path(default_phase))?;
        if ckpt.store.config != self.cfg.model {
            return Err(Error::invalid(format!(
                "checkpoint model {:?} does not match configured model {:?}",
                ckpt.store.config, self.cfg.model
            )));
        }
        Ok(ckpt)
    }

    fn finetune(&self) -> Result<()> {
        let ckpt = self.load_checkpoint("pretrain")?;
        let ds = self.load(Role::Finetune)?;
        let rmax = ckpt.meta.rmax;
        let outcome = run_finetune(ckpt, &ds, rmax, &self.cfg.finetune)?;
        self.save_outcome("finetune", &outcome).map(|_| ())
    }

    fn evaluate(&self) -> Result<()> {
        let setting = self
            .setting
            .ok_or_else(|| Error::Config("evaluate needs --setting (pretrain-test, zero-shot, fine-tuned)".into()))?;
        let ckpt = self.load_checkpoint(match setting {
            Setting::FineTuned => "finetune",
            _ => "pretrain",
        })?;
        let (ds, vehicles) = match setting {
            Setting::PretrainTest => {
                let ds = self.load(Role::Pretrain)?;
                let split = self.pretrain_split(&ds)?;
                if split.test.is_empty() {
                    return Err(Error::InsufficientPopulation("pre-training test split is empty".into()));
                }
                (ds, Some(split.test))
            }
            _ => {
                let role = if self.cfg.dataset(Role::Test).is_some() {
                    Role::Test
                } else {
                    log::warn!("no test dataset configured; evaluating on the fine-tuning dataset");
                    Role::Finetune
                };
                (self.load(role)?, None)
            }
        };
        let graph = self.graph_params(ckpt.meta.rmax, &ds);
        let (report, pairs) = evaluate_dataset(
            &ckpt.store.params,
            &ckpt.stats,
            &ds,
            &graph,
            vehicles.as_ref(),
            self.cfg.eval_stride,
            &self.cfg.ssm,
            setting.as_str(),
        )?;
        let dir = self.out.join("eval");
        create_dir(&dir)?;
        let csv = dir.join(format!("{setting}.csv"));
        save_report(std::slice::from_ref(&report), &csv)?;
        let pair_path = dir.join(format!("{setting}_pairs.txt"));
        let file = std::fs::File::create(&pair_path).map_err(|e| Error::io(&pair_path, e))?;
        write_pair_dump(&pairs, std::io::BufWriter::new(file)).map_err(|e| Error::io(&pair_path, e))?;
        for m in &report.horizons {
            println!("{setting} {}: ADE {:.3} m, FDE {:.3} m, {} samples", m.horizon, m.ade, m.fde, m.n_samples);
        }
        Ok(())
    }

    fn report(&self) -> Result<()> {
        let mut reports = Vec::new();
        for s in Setting::ALL {
            let path = self.out.join("eval").join(format!("{s}.csv"));
            if path.is_file() {
                reports.extend(load_report(&path)?);
            }
        }
        create_dir(&self.out)?;
        let path = self.out.join("report.csv");
        save_report(&reports, &path)?;
        let reference = self.out.join("reference_results.csv");
        let file = std::fs::File::create(&reference).map_err(|e| Error::io(&reference, e))?;
        write_reference_table(std::io::BufWriter::new(file)).map_err(|e| Error::io(&reference, e))?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "computed:\n{text}");
        let _ = write_reference_table(&mut stdout);
        Ok(())
    }
}
