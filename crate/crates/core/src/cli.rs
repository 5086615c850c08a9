//! The `hse` command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_manifest, Dataset, RgbImage};
use crate::error::{HseError, Result};
use crate::eval::{self, EvalMode, MetricsReport};
use crate::gradsuite;
use crate::model::HseModel;
use crate::taxonomy::Taxonomy;
use crate::training::augment::augment_sample;
use crate::training::{train_stage1, train_stage2, EpochRecord};

#[derive(Debug, Parser)]
#[command(name = "hse", version, about = "Hierarchical fine-grained classifier")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stages {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint plus a `.cfg` file next to it.
    Train {
        /// Dataset directory with taxonomy.tsv, train.tsv and val.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stages,
        /// Starting checkpoint; required when running stage 2 alone.
        #[arg(long)]
        init: Option<PathBuf>,
        /// JSON-lines log, one record per epoch.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Per-level accuracy, error decomposition and path consistency.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the variant recorded in the configuration.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EvalMode>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inter/intra-superclass errors, optionally against a reference model.
    AnalyzeErrors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EvalMode>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        reference_mode: Option<EvalMode>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Attention heatmap of one image at a guided level.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// 1-based level, at least 2.
        #[arg(long)]
        level: usize,
        /// P5 output; raw values go to the same path with `.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient check of every primitive and the toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the per-level category counts of a taxonomy file.
    InspectTaxonomy { taxonomy: PathBuf },
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    EvalMode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = EvalMode::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Runs the front end and returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn load_config(cli: &Cli, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, checkpoint.map(sidecar)) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(side)) if side.exists() => RunConfig::load(side)?,
        _ => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| HseError::io("<stdout>", e))
}

fn load_split(dir: &Path, taxonomy: &Taxonomy, split: &str) -> Result<Dataset> {
    load_manifest(taxonomy, dir.join(format!("{split}.tsv")), dir)
}

fn load_model(cfg: &RunConfig, taxonomy: &Taxonomy, checkpoint: &Path, mode: Option<EvalMode>) -> Result<HseModel> {
    let mut model_cfg = cfg.model_config(taxonomy.level_sizes());
    if let Some(mode) = mode {
        model_cfg = model_cfg.with_variant(mode.variant());
    }
    HseModel::load(model_cfg, checkpoint)
}

fn configured_mode(cfg: &RunConfig) -> EvalMode {
    match (cfg.model.enable_serl, cfg.model.enable_sglr) {
        (true, true) => EvalMode::Full,
        (true, false) => EvalMode::NoSglr,
        (false, true) => EvalMode::NoSerl,
        (false, false) => EvalMode::Baseline,
    }
}

fn evaluate_checkpoint(cli: &Cli, data: &Path, checkpoint: &Path, mode: Option<EvalMode>, split: &str) -> Result<MetricsReport> {
    let cfg = load_config(cli, Some(checkpoint))?;
    let mode = mode.unwrap_or_else(|| configured_mode(&cfg));
    let taxonomy = Taxonomy::load(data.join("taxonomy.tsv"))?;
    let model = load_model(&cfg, &taxonomy, checkpoint, Some(mode))?;
    let dataset = load_split(data, &taxonomy, split)?;
    eval::evaluate(&model, &taxonomy, &dataset, &cfg.train.augment, mode)
}

fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData { out: dir } => {
            let cfg = load_config(&cli, None)?;
            let t = generate_synthetic(&cfg.synthetic, dir)?;
            let sizes: Vec<String> = t.level_sizes().iter().map(usize::to_string).collect();
            write_out(out, &format!("wrote {} ({} categories per level)\n", dir.display(), sizes.join(" ")))
        }
        Command::Train {
            data,
            out: ckpt,
            stage,
            init,
            metrics,
        } => {
            let cfg = load_config(&cli, None)?;
            if *stage == Stages::Two && init.is_none() {
                return Err(HseError::InvalidArgument(
                    "stage 2 alone needs --init with a stage-1 checkpoint".into(),
                ));
            }
            let taxonomy = Taxonomy::load(data.join("taxonomy.tsv"))?;
            let model_cfg = cfg.model_config(taxonomy.level_sizes());
            let mut model = match init {
                Some(p) => HseModel::load(model_cfg, p)?,
                None => HseModel::new(model_cfg, cfg.seed)?,
            };
            let train = load_split(data, &taxonomy, "train")?;
            let val = load_split(data, &taxonomy, "val")?;
            let tc = cfg.train_config();

            let mut log = match metrics {
                Some(p) => Some(fs::File::create(p).map_err(|e| HseError::io(p, e))?),
                None => None,
            };
            let mut on_epoch = |r: &EpochRecord| -> Result<()> {
                let line = serde_json::to_string(&serde_json::to_value(r)?)?;
                if let (Some(f), Some(p)) = (log.as_mut(), metrics.as_ref()) {
                    writeln!(f, "{line}").map_err(|e| HseError::io(p, e))?;
                }
                let level = r.level.map_or(String::new(), |l| format!(" level {l}"));
                let acc: Vec<String> = r.val_accuracy.iter().map(|a| format!("{a:.3}")).collect();
                let _ = writeln!(
                    err,
                    "stage {}{level} epoch {}: loss {:.4} val [{}] lr {}",
                    r.stage,
                    r.epoch,
                    r.total,
                    acc.join(", "),
                    r.lr
                );
                Ok(())
            };
            if *stage != Stages::Two {
                train_stage1(&mut model, &taxonomy, &train, &val, &tc, &mut on_epoch)?;
            }
            if *stage != Stages::One {
                train_stage2(&mut model, &taxonomy, &train, &val, &tc, &mut on_epoch)?;
            }
            model.save(ckpt)?;
            let side = sidecar(ckpt);
            fs::write(&side, cfg.to_text()).map_err(|e| HseError::io(&side, e))?;
            write_out(out, &format!("wrote {}\n", ckpt.display()))
        }
        Command::Eval {
            data,
            checkpoint,
            mode,
            split,
            out: report_path,
        } => {
            let report = evaluate_checkpoint(&cli, data, checkpoint, *mode, split)?;
            let json = report.to_json()? + "\n";
            match report_path {
                Some(p) => fs::write(p, json).map_err(|e| HseError::io(p, e)),
                None => write_out(out, &json),
            }
        }
        Command::AnalyzeErrors {
            data,
            checkpoint,
            mode,
            reference,
            reference_mode,
            split,
        } => {
            let report = evaluate_checkpoint(&cli, data, checkpoint, *mode, split)?;
            let base = match reference {
                Some(r) => Some(evaluate_checkpoint(&cli, data, r, *reference_mode, split)?),
                None => None,
            };
            let mut text = String::from("level\tinter\tintra\tcorrect\ttotal");
            if base.is_some() {
                text.push_str("\treference_inter\tinter_reduction_percent");
            }
            text.push('\n');
            for (i, l) in report.levels.iter().enumerate().skip(1) {
                let inter = l.inter_superclass_errors.unwrap_or(0);
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}",
                    l.level,
                    inter,
                    l.intra_superclass_errors.unwrap_or(0),
                    l.correct,
                    report.samples
                ));
                if let Some(b) = &base {
                    let r = b.levels[i].inter_superclass_errors.unwrap_or(0);
                    let red = eval::relative_reduction(r, inter).map_or("-".to_string(), |v| format!("{:.1}", v * 100.0));
                    text.push_str(&format!("\t{r}\t{red}"));
                }
                text.push('\n');
            }
            write_out(out, &text)
        }
        Command::ExportAttention {
            checkpoint,
            taxonomy,
            image,
            level,
            out: path,
        } => {
            let cfg = load_config(&cli, Some(checkpoint))?;
            if *level < 2 {
                return Err(HseError::InvalidArgument(format!("level {level} has no guided attention")));
            }
            let t = Taxonomy::load(taxonomy)?;
            let model = load_model(&cfg, &t, checkpoint, None)?;
            let img = augment_sample(&RgbImage::load(image)?.to_tensor(), &cfg.train.augment, None)?;
            let map = eval::export_attention(&model, &img, level - 1, path)?;
            let [h, w] = [map.shape()[0], map.shape()[1]];
            write_out(out, &format!("wrote {} ({w}x{h})\n", path.display()))
        }
        Command::Gradcheck { seed } => {
            let cases = gradsuite::run_suite(*seed)?;
            let mut text = String::new();
            for c in &cases {
                let verdict = if c.report.pass { "ok" } else { "FAIL" };
                text.push_str(&format!(
                    "{:<18} probes {:>4}  skipped {:>2}  max rel err {:.3e}  {verdict}\n",
                    c.name, c.report.probes, c.report.skipped, c.report.max_rel_err
                ));
            }
            write_out(out, &text)?;
            match cases.iter().find(|c| !c.report.pass) {
                Some(c) => Err(HseError::CheckFailed(format!("gradient check of {}", c.name))),
                None => Ok(()),
            }
        }
        Command::InspectTaxonomy { taxonomy } => {
            load_config(&cli, None)?;
            let t = Taxonomy::load(taxonomy)?;
            let sizes: Vec<String> = t.level_sizes().iter().map(usize::to_string).collect();
            write_out(out, &format!("{}\n", sizes.join(" ")))
        }
    }
}
