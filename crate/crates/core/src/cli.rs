//! Command-line front end. [`run`] returns the process exit status: 0 on success,
//! 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attnviz::{channel_map_csv, extract_channel_map, extract_map, QueryMode};
use crate::cost::{cost_report, FlopOptions};
use crate::data::{gen_synthetic, Dataset};
use crate::error::Error;
use crate::gradcheck::{check_model, FD_STEP};
use crate::init::trunc_normal;
use crate::model::checkpoint::load_checkpoint;
use crate::model::{Model, ModelConfig, Variant};
use crate::runconfig::{Preset, RunConfig, Source, SEED_ENV};
use crate::tensor::Real;
use crate::train::{evaluate, train, History, Precision, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Max relative error accepted by `gradcheck`.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "cavit", version, about = "Channel-attention vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every subcommand.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Starting values for every key
    #[arg(long, value_parser = ["desk", "gradcheck", "paper"])]
    preset: Option<String>,
    /// Block variant: baseline_vit, cavit, channel_mhsa, channel_only, cls_swapped
    #[arg(long)]
    variant: Option<String>,
    /// Seed for initialization, shuffling and data generation (overrides CAVIT_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Override any key; repeatable, applied in order after the other flags
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// bars or blobs
        #[arg(long)]
        kind: Option<String>,
        /// Number of samples
        #[arg(long)]
        count: Option<usize>,
        /// Output dataset file
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Train a model; writes history.csv, checkpoint.cavt and config.txt under --out
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; without it a synthetic set is generated from data_kind/data_count
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Artifact directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
    /// Parameter and FLOP counts per sublayer
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print CSV instead of the aligned table
        #[arg(long)]
        csv: bool,
        /// Also charge norms, softmax, activations and adds
        #[arg(long)]
        elementwise: bool,
        /// Leave out the q·kᵀ and attn·v matmuls
        #[arg(long)]
        no_attention_matmuls: bool,
        /// Print reductions relative to baseline_vit at the same sizes
        #[arg(long)]
        compare: bool,
        /// Write cost.csv into this directory
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient (64-bit)
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fail above this max relative error
        #[arg(long, default_value_t = GRADCHECK_THRESHOLD)]
        threshold: f64,
        /// Central-difference step
        #[arg(long, default_value_t = FD_STEP)]
        step: f64,
    },
    /// Export a head- and query-averaged spatial attention map
    Attnmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        image_index: usize,
        /// Block index (default: last)
        #[arg(long)]
        block: Option<usize>,
        /// Average the class-token row only
        #[arg(long)]
        cls_row_only: bool,
        /// Output path prefix for .pgm, _up.pgm, .csv and _channel.csv
        #[arg(long, value_name = "PREFIX")]
        out: PathBuf,
    },
    /// Train all five variants with one seed; writes ablation.csv under --out
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the variants concurrently, one thread each
        #[arg(long)]
        parallel: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

type CmdResult = std::result::Result<i32, Failure>;

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Io<'_> {
    fn say(&mut self, s: &str) {
        let _ = self.out.write_all(s.as_bytes());
    }

    fn note(&mut self, s: &str) {
        let _ = self.err.write_all(s.as_bytes());
    }
}

/// Parse `args` (program name first) and run the subcommand. `seed_env` is the value
/// of `CAVIT_SEED`, if set.
pub fn run<I, S>(args: I, seed_env: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
            } else {
                let _ = out.write_all(text.as_bytes());
            }
            return code;
        }
    };
    let mut io = Io { out, err };
    match dispatch(cli.command, seed_env, &mut io) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            io.note(&format!("error: {msg}\n"));
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            io.note(&format!("error: {e}\n"));
            EXIT_FAILURE
        }
    }
}

fn resolve(
    args: &ConfigArgs,
    default_preset: Preset,
    seed_env: Option<&str>,
    extra: &[(&str, String)],
) -> std::result::Result<RunConfig, Failure> {
    let preset = match &args.preset {
        Some(p) => p.parse().map_err(usage)?,
        None => default_preset,
    };
    let mut rc = RunConfig::preset(preset);
    if let Some(path) = &args.config {
        rc.apply_file(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Runtime(e),
            e => usage(e),
        })?;
    }
    rc.apply_seed_env(seed_env).map_err(usage)?;
    if let Some(v) = &args.variant {
        rc.set("variant", v, Source::Flag).map_err(usage)?;
    }
    if let Some(s) = args.seed {
        rc.set("seed", &s.to_string(), Source::Flag).map_err(usage)?;
    }
    for (k, v) in extra {
        rc.set(k, v, Source::Flag).map_err(usage)?;
    }
    for s in &args.set {
        rc.set_flag(s).map_err(usage)?;
    }
    Ok(rc)
}

fn announce(io: &mut Io, rc: &RunConfig) {
    io.note("# resolved configuration\n");
    io.note(&rc.render());
}

fn create_dir(dir: &Path) -> crate::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> crate::Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command, seed_env: Option<&str>, io: &mut Io) -> CmdResult {
    match cmd {
        Command::GenData {
            cfg,
            kind,
            count,
            output,
        } => {
            let mut extra = Vec::new();
            if let Some(k) = kind {
                extra.push(("data_kind", k));
            }
            if let Some(c) = count {
                extra.push(("data_count", c.to_string()));
            }
            let rc = resolve(&cfg, Preset::Desk, seed_env, &extra)?;
            announce(io, &rc);
            let image_size = rc.model_config().map_err(usage)?.image_size;
            let d = gen_synthetic(rc.data_kind(), rc.data_count(), image_size, rc.seed()).map_err(usage)?;
            d.save(&output)?;
            io.say(&format!(
                "wrote {} {} samples ({}x{}, {} classes) to {}\n",
                d.len(),
                rc.data_kind(),
                d.width(),
                d.height(),
                d.n_classes(),
                output.display()
            ));
            Ok(EXIT_OK)
        }
        Command::Train { cfg, data, epochs, out } => {
            let mut extra = Vec::new();
            if let Some(d) = data {
                extra.push(("data", d.display().to_string()));
            }
            if let Some(e) = epochs {
                extra.push(("epochs", e.to_string()));
            }
            let rc = resolve(&cfg, Preset::Desk, seed_env, &extra)?;
            announce(io, &rc);
            cmd_train(&rc, &out, io)
        }
        Command::Eval { cfg, checkpoint, data } => {
            let rc = resolve(&cfg, Preset::Desk, seed_env, &[])?;
            announce(io, &rc);
            let mc = rc.model_config().map_err(usage)?;
            let ds = Dataset::load(&data)?;
            let mut model = Model::<f32>::new(mc, rc.seed())?;
            load_checkpoint(model.params_mut(), &checkpoint)?;
            let acc = evaluate(&model, &ds)?;
            io.say(&format!("accuracy {acc:.6} ({} samples)\n", ds.len()));
            Ok(EXIT_OK)
        }
        Command::Count {
            cfg,
            csv,
            elementwise,
            no_attention_matmuls,
            compare,
            out,
        } => {
            let rc = resolve(&cfg, Preset::Desk, seed_env, &[])?;
            announce(io, &rc);
            let mc = rc.model_config().map_err(usage)?;
            let opts = FlopOptions {
                include_elementwise: elementwise,
                include_attention_matmuls: !no_attention_matmuls,
            };
            let report = cost_report(&mc, opts).map_err(usage)?;
            io.say(&if csv { report.to_csv() } else { report.to_table() });
            if compare {
                let base = cost_report(&mc.clone().with_variant(Variant::BaselineVit), opts)?;
                let r = report.reduction_from(&base);
                io.say(&format!(
                    "vs baseline_vit: params {} -> {} ({:+.2}%), flops {} -> {} ({:+.2}%)\n",
                    base.total_params(),
                    report.total_params(),
                    -100.0 * r.params,
                    base.total_flops(),
                    report.total_flops(),
                    -100.0 * r.flops
                ));
            }
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_file(&dir.join("cost.csv"), report.to_csv())?;
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { cfg, threshold, step } => {
            let rc = resolve(&cfg, Preset::Gradcheck, seed_env, &[])?;
            announce(io, &rc);
            cmd_gradcheck(&rc, threshold, step, io)
        }
        Command::Attnmap {
            cfg,
            checkpoint,
            data,
            image_index,
            block,
            cls_row_only,
            out,
        } => {
            let rc = resolve(&cfg, Preset::Desk, seed_env, &[])?;
            announce(io, &rc);
            let mc = rc.model_config().map_err(usage)?;
            let ds = Dataset::load(&data)?;
            ds.check_geometry(&mc)?;
            if image_index >= ds.len() {
                return Err(usage(Error::Index {
                    op: "attnmap --image-index",
                    index: image_index,
                    extent: ds.len(),
                }));
            }
            let block = block.unwrap_or(mc.depth.saturating_sub(1));
            let mut model = Model::<f32>::new(mc.clone(), rc.seed())?;
            load_checkpoint(model.params_mut(), &checkpoint)?;
            let (x, _) = ds.batch::<f32>(&[image_index])?;
            let mode = if cls_row_only {
                QueryMode::ClsRowOnly
            } else {
                QueryMode::AllQueries
            };
            let map = extract_map(&model, &x, block, mode).map_err(|e| match e {
                Error::Capability(_) | Error::Index { .. } => usage(e),
                e => e.into(),
            })?;
            let path = |suffix: &str| {
                let mut s = out.clone().into_os_string();
                s.push(suffix);
                PathBuf::from(s)
            };
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_file(&path(".pgm"), map.to_pgm(1))?;
            write_file(&path("_up.pgm"), map.to_pgm(mc.patch_size))?;
            write_file(&path(".csv"), map.to_csv())?;
            let mut written = vec![path(".pgm"), path("_up.pgm"), path(".csv")];
            if mc.variant.has_channel_attention() {
                let (ch, t) = extract_channel_map(&model, &x, block)?;
                write_file(&path("_channel.csv"), channel_map_csv(&ch, t))?;
                written.push(path("_channel.csv"));
            }
            for p in written {
                io.say(&format!("wrote {}\n", p.display()));
            }
            Ok(EXIT_OK)
        }
        Command::Ablate {
            cfg,
            data,
            epochs,
            parallel,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(d) = data {
                extra.push(("data", d.display().to_string()));
            }
            if let Some(e) = epochs {
                extra.push(("epochs", e.to_string()));
            }
            let rc = resolve(&cfg, Preset::Desk, seed_env, &extra)?;
            announce(io, &rc);
            cmd_ablate(&rc, parallel, &out, io)
        }
    }
}

/// The configured dataset file, or a synthetic set generated from the seed; split
/// into train and validation parts by seed.
fn datasets(rc: &RunConfig, mc: &ModelConfig) -> std::result::Result<(Dataset, Dataset), Failure> {
    let full = match rc.data_path() {
        Some(p) => Dataset::load(p)?,
        None => gen_synthetic(rc.data_kind(), rc.data_count(), mc.image_size, rc.seed()).map_err(usage)?,
    };
    full.check_geometry(mc).map_err(usage)?;
    Ok(full.split(rc.val_fraction(), rc.seed()).map_err(usage)?)
}

fn train_in<T: Real>(
    mc: &ModelConfig,
    tc: &TrainConfig,
    tr: &Dataset,
    va: &Dataset,
    on_epoch: impl FnMut(&crate::train::EpochRecord),
) -> crate::Result<History> {
    let mut model = Model::<T>::new(mc.clone(), tc.seed)?;
    Ok(train(&mut model, tr, va, tc, on_epoch)?.history)
}

fn cmd_train(rc: &RunConfig, out: &Path, io: &mut Io) -> CmdResult {
    let mc = rc.model_config().map_err(usage)?;
    let mut tc = rc.train_config().map_err(usage)?;
    let (tr, va) = datasets(rc, &mc)?;
    if tc.batch_size > tr.len() {
        return Err(Failure::Usage(format!(
            "batch_size {} exceeds the {} training samples",
            tc.batch_size,
            tr.len()
        )));
    }
    create_dir(out)?;
    write_file(&out.join("config.txt"), rc.render())?;
    tc.checkpoint = Some(out.join("checkpoint.cavt"));
    io.say(&format!("{}\n", History::CSV_HEADER));
    let history = match tc.precision {
        Precision::F32 => train_in::<f32>(&mc, &tc, &tr, &va, |r| io.say(&format!("{}\n", History::csv_row(r)))),
        Precision::F64 => train_in::<f64>(&mc, &tc, &tr, &va, |r| io.say(&format!("{}\n", History::csv_row(r)))),
    }?;
    write_file(&out.join("history.csv"), history.to_csv())?;
    if let Some(best) = history.best() {
        io.note(&format!(
            "best val_acc {:.6} at epoch {}; artifacts in {}\n",
            best.val_acc,
            best.epoch,
            out.display()
        ));
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(rc: &RunConfig, threshold: f64, step: f64, io: &mut Io) -> CmdResult {
    let mc = rc.model_config().map_err(usage)?;
    if !(step > 0.0 && threshold > 0.0) {
        return Err(Failure::Usage("--step and --threshold must be positive".into()));
    }
    let seed = rc.seed();
    let model = Model::<f64>::new(mc.clone(), seed)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let x = trunc_normal(&[2, mc.in_channels, mc.image_size, mc.image_size], 1.0, &mut rng)?;
    let labels: Vec<usize> = (0..2).map(|i| i % mc.n_classes).collect();
    let r = check_model(&model, &x, &labels, step)?;
    let width = r.groups.keys().map(String::len).max().unwrap_or(5);
    for (g, e) in &r.groups {
        io.say(&format!("{g:<width$}  {e:.3e}\n"));
    }
    let max = r.max();
    let pass = max < threshold;
    io.say(&format!(
        "max relative error {max:.3e} ({} threshold {threshold:.0e})\n",
        if pass { "below" } else { "ABOVE" }
    ));
    Ok(if pass { EXIT_OK } else { EXIT_FAILURE })
}

/// Variant configurations for an ablation sweep. The multi-head channel variant
/// uses `channel_heads` when it is above 1, otherwise the largest divisor of `N`
/// not above `max(spatial_heads, 2)`; every other variant uses one channel head.
pub fn ablation_configs(base: &ModelConfig) -> Vec<ModelConfig> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut c = base.clone().with_variant(v);
            c.channel_heads = match v {
                Variant::ChannelMhsa if base.channel_heads > 1 => base.channel_heads,
                Variant::ChannelMhsa => {
                    let n = c.num_patches();
                    (2..=base.spatial_heads.max(2)).rev().find(|h| n % h == 0).unwrap_or(1)
                }
                _ => 1,
            };
            c
        })
        .collect()
}

#[derive(Debug, Clone)]
struct AblationRow {
    variant: Variant,
    accuracy: f64,
    params: u64,
    flops: u64,
}

fn cmd_ablate(rc: &RunConfig, parallel: bool, out: &Path, io: &mut Io) -> CmdResult {
    let mc = rc.model_config().map_err(usage)?;
    let tc = rc.train_config().map_err(usage)?;
    let (tr, va) = datasets(rc, &mc)?;
    let configs = ablation_configs(&mc);
    for c in &configs {
        c.validate().map_err(usage)?;
    }
    let run_one = |c: &ModelConfig| -> crate::Result<AblationRow> {
        let history = match tc.precision {
            Precision::F32 => train_in::<f32>(c, &tc, &tr, &va, |_| {}),
            Precision::F64 => train_in::<f64>(c, &tc, &tr, &va, |_| {}),
        }?;
        let cost = cost_report(c, FlopOptions::default())?;
        Ok(AblationRow {
            variant: c.variant,
            accuracy: history.best().map_or(0.0, |b| b.val_acc),
            params: cost.total_params(),
            flops: cost.total_flops(),
        })
    };
    let rows: Vec<crate::Result<AblationRow>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(|| run_one(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    } else {
        configs.iter().map(run_one).collect()
    };
    let mut csv = String::from("variant,accuracy,params,flops\n");
    for r in rows {
        let r = r?;
        csv.push_str(&format!("{},{:.6},{},{}\n", r.variant, r.accuracy, r.params, r.flops));
    }
    create_dir(out)?;
    write_file(&out.join("config.txt"), rc.render())?;
    write_file(&out.join("ablation.csv"), &csv)?;
    io.say(&csv);
    Ok(EXIT_OK)
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let seed = std::env::var(SEED_ENV).ok();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(
        std::env::args_os(),
        seed.as_deref(),
        &mut stdout.lock(),
        &mut stderr.lock(),
    )
}
