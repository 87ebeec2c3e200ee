//! Experiment runner for the continual-segmentation bench.
//!
//! Subcommands: `run` (one experiment → one record directory), `grid`
//! (sweep → one directory per cell), `report` (records → tables and
//! heatmaps), `dump-dataset` (procedural samples → PNG files), and `check`
//! (fast runtime invariant suite).
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 stream-protocol
//! violation, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Parser, Subcommand};

use driftseg::config::{
    apply_overrides, preset, ExperimentConfig, GridConfig, GRID_PRESETS, RUN_PRESETS,
};
use driftseg::domains::{domain_preset, generate_sample, render_sample_images};
use driftseg::experiment::{run_experiment, ExperimentOutcome};
use driftseg::record::{csv_summary, RunRecord};
use driftseg::report::{
    mean_transfer, scan_records, summary_table, transfer_heatmap, transfer_table,
};
use driftseg::strategies::PRETRAIN_SEED_BASE;

#[derive(Parser)]
#[command(
    name = "driftseg",
    version,
    about = "Online continual segmentation bench on procedural multi-domain streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its record directory.
    #[command(group(ArgGroup::new("source").required(true).args(["config", "preset"])))]
    Run {
        /// Path to a configuration document.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Name of a built-in configuration (see --list-presets).
        #[arg(long)]
        preset: Option<String>,
        /// Override a key, e.g. --set stream.budget=2 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory for record.json, timing.json, config.txt,
        /// summary.csv.
        #[arg(long)]
        out: PathBuf,
        /// Print the resolved configuration and exit without running.
        #[arg(long)]
        dry_run: bool,
        /// Overwrite an existing record in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Expand a sweep document and run every cell into its own directory.
    #[command(group(ArgGroup::new("source").required(true).args(["config", "preset"])))]
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory; each cell writes to <out>/<cell-name>/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Summarize record directories: tables, CSV, transfer heatmaps.
    Report {
        /// Directory holding record.json files (directly or one level deep).
        #[arg(long)]
        runs: PathBuf,
        /// Output directory for report.txt, summary.csv, and heatmap PNGs.
        #[arg(long)]
        out: PathBuf,
        /// Heatmap cell edge length in pixels.
        #[arg(long, default_value_t = 32)]
        cell: u32,
    },
    /// Write procedural samples as paired image/mask PNG files.
    DumpDataset {
        /// Domain preset: metro, delta, coastal, alpine, sima, simb.
        #[arg(long)]
        domain: String,
        /// Number of samples to write.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Which seed range to draw: test, train, or pretrain.
        #[arg(long, default_value = "test")]
        split: String,
        /// Held-out set size, which positions the train range.
        #[arg(long, default_value_t = 300)]
        test_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in run and grid presets.
    ListPresets,
    /// Run the fast runtime invariant suite.
    Check,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version land here.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<driftseg::Error>() {
        Some(driftseg::Error::Protocol(_)) => 2,
        Some(driftseg::Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            config,
            preset,
            set,
            out,
            dry_run,
            force,
        } => cmd_run(config, preset, &set, &out, dry_run, force),
        Command::Grid {
            config,
            preset,
            set,
            out,
            force,
        } => cmd_grid(config, preset, &set, &out, force),
        Command::Report { runs, out, cell } => cmd_report(&runs, &out, cell),
        Command::DumpDataset {
            domain,
            count,
            split,
            test_size,
            out,
        } => cmd_dump_dataset(&domain, count, &split, test_size, &out),
        Command::ListPresets => {
            println!("run presets:");
            for p in RUN_PRESETS {
                println!("  {p}");
            }
            println!("grid presets:");
            for p in GRID_PRESETS {
                println!("  {p}");
            }
            Ok(())
        }
        Command::Check => cmd_check(),
    }
}

/// Resolve --config/--preset plus --set overrides into document text.
fn load_document(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    overrides: &[String],
) -> anyhow::Result<String> {
    let text = match (&config, &preset_name) {
        (Some(path), None) => {
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
        }
        (None, Some(name)) => preset(name)
            .ok_or_else(|| {
                anyhow!("unknown preset {name:?}; `driftseg list-presets` shows the options")
            })?
            .to_string(),
        _ => unreachable!("clap enforces exactly one source"),
    };
    let mut pairs = Vec::with_capacity(overrides.len());
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("--set {o:?}: expected KEY=VALUE"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(apply_overrides(&text, &pairs)?)
}

fn write_outcome(dir: &Path, outcome: &ExperimentOutcome, echo: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    outcome.record.save(&dir.join("record.json"))?;
    outcome.timing.save(&dir.join("timing.json"))?;
    fs::write(dir.join("config.txt"), echo)?;
    fs::write(dir.join("summary.csv"), csv_summary(&[&outcome.record]))?;
    Ok(())
}

fn refuse_overwrite(dir: &Path, force: bool) -> anyhow::Result<()> {
    if !force && dir.join("record.json").exists() {
        bail!(
            "{} already holds a record; pass --force to overwrite",
            dir.display()
        );
    }
    Ok(())
}

fn cmd_run(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    set: &[String],
    out: &Path,
    dry_run: bool,
    force: bool,
) -> anyhow::Result<()> {
    let text = load_document(config, preset_name, set)?;
    let cfg = ExperimentConfig::from_text(&text)?;
    if dry_run {
        print!("{}", cfg.echo_text());
        return Ok(());
    }
    refuse_overwrite(out, force)?;
    let outcome = run_experiment(&cfg)?;
    write_outcome(out, &outcome, &cfg.echo_text())?;
    print!("{}", summary_table(&[&outcome.record]));
    println!(
        "wrote {} ({} seeds, {:.1}s)",
        out.join("record.json").display(),
        outcome.record.seeds.len(),
        outcome.timing.total_seconds
    );
    Ok(())
}

fn cmd_grid(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    set: &[String],
    out: &Path,
    force: bool,
) -> anyhow::Result<()> {
    let text = load_document(config, preset_name, set)?;
    let grid = GridConfig::from_text(&text)?;
    let cells = grid.expand();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut done: Vec<RunRecord> = Vec::new();
    let mut failed = 0usize;
    for (name, cfg) in &cells {
        let cell_dir = out.join(name);
        // A cell failure is recorded in place and the grid moves on.
        let result: anyhow::Result<ExperimentOutcome> = (|| {
            let cfg = cfg.as_ref().map_err(|e| anyhow!("{e}"))?;
            refuse_overwrite(&cell_dir, force)?;
            let outcome = run_experiment(cfg)?;
            write_outcome(&cell_dir, &outcome, &cfg.echo_text())?;
            Ok(outcome)
        })();
        match result {
            Ok(outcome) => {
                println!(
                    "cell {name}: mean mIoU {:.1}",
                    outcome.record.mean_final_miou * 100.0
                );
                done.push(outcome.record);
            }
            Err(e) => {
                failed += 1;
                fs::create_dir_all(&cell_dir)?;
                fs::write(cell_dir.join("error.txt"), format!("{e:#}\n"))?;
                eprintln!("cell {name} failed: {e:#}");
            }
        }
    }

    if !done.is_empty() {
        let refs: Vec<&RunRecord> = done.iter().collect();
        fs::write(out.join("summary.csv"), csv_summary(&refs))?;
        let table = summary_table(&refs);
        fs::write(out.join("report.txt"), &table)?;
        print!("{table}");
    }
    println!(
        "{} of {} cells succeeded{}",
        done.len(),
        cells.len(),
        if failed > 0 {
            " (failed cells hold an error.txt)"
        } else {
            ""
        }
    );
    if done.is_empty() {
        bail!("every grid cell failed");
    }
    Ok(())
}

fn cmd_report(runs: &Path, out: &Path, cell: u32) -> anyhow::Result<()> {
    let (records, problems) = scan_records(runs)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let refs: Vec<&RunRecord> = records.iter().collect();
    let mut report = summary_table(&refs);
    report.push('\n');

    for record in &records {
        if let Some(mean) = mean_transfer(record) {
            report.push_str(&format!("transfer ({}, seed mean):\n", record.name));
            report.push_str(&transfer_table(&mean));
            report.push('\n');
            let img = transfer_heatmap(&mean, cell)?;
            img.save(out.join(format!("{}--transfer-mean.png", record.name)))
                .with_context(|| format!("saving heatmap for {}", record.name))?;
            for outcome in &record.per_seed {
                if let Some(t) = &outcome.transfer {
                    let img = transfer_heatmap(t, cell)?;
                    img.save(out.join(format!(
                        "{}--transfer-seed{}.png",
                        record.name, outcome.seed
                    )))?;
                }
            }
        }
    }
    if !problems.is_empty() {
        report.push_str("problems:\n");
        for p in &problems {
            report.push_str(&format!("  {p}\n"));
        }
    }

    fs::write(out.join("report.txt"), &report)?;
    fs::write(out.join("summary.csv"), csv_summary(&refs))?;
    print!("{report}");
    println!("wrote report to {}", out.display());
    Ok(())
}

fn cmd_dump_dataset(
    domain: &str,
    count: usize,
    split: &str,
    test_size: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let spec = domain_preset(domain).ok_or_else(|| {
        anyhow!("unknown domain {domain:?}; presets: metro, delta, coastal, alpine, sima, simb")
    })?;
    let start = match split {
        "test" => 0,
        "train" => test_size as u64,
        "pretrain" => PRETRAIN_SEED_BASE,
        other => bail!("split {other:?}: expected test, train, or pretrain"),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut manifest = Vec::with_capacity(count);
    for seed in start..start + count as u64 {
        let sample = generate_sample(&spec, seed)?;
        let (rgb, mask) = render_sample_images(&sample)?;
        let image_file = format!("{domain}-{seed:08}.png");
        let mask_file = format!("{domain}-{seed:08}-mask.png");
        rgb.save(out.join(&image_file))?;
        mask.save(out.join(&mask_file))?;
        manifest.push(serde_json::json!({
            "domain": domain,
            "seed": seed,
            "image": image_file,
            "mask": mask_file,
        }));
    }
    let manifest = serde_json::json!({
        "domain": domain,
        "label_space": spec.label_space.name(),
        "num_classes": spec.label_space.num_classes(),
        "split": split,
        "samples": manifest,
    });
    fs::write(
        out.join("manifest.json"),
        format!("{}\n", serde_json::to_string_pretty(&manifest)?),
    )?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

/// Fast self-test of the bench's load-bearing invariants, printing one line
/// per check. Failures use the numeric exit code.
fn cmd_check() -> anyhow::Result<()> {
    use driftseg::labelspace::builtin_map;
    use driftseg::stream::build_plan;
    use driftseg::tensor::{masked_softmax_cross_entropy, MaskTensor, Tensor};
    use driftseg::Error;

    let pass = |name: &str| println!("ok {name}");

    // Cross-entropy of uniform logits is ln(C).
    {
        let c = 19;
        let logits = Tensor::zeros(&[1, c, 2, 2]);
        let labels = MaskTensor::filled(&[1, 2, 2], 3);
        let (loss, _) = masked_softmax_cross_entropy(&logits, &labels)?;
        if (loss - (c as f64).ln()).abs() > 1e-9 {
            return Err(Error::numeric(format!(
                "uniform-logit cross-entropy {loss} differs from ln({c})"
            ))
            .into());
        }
        pass("uniform-logit cross-entropy equals ln(C)");
    }

    // Relabel tables cover exactly the documented overlaps.
    {
        for (name, want) in [("sima", 11), ("simb", 15)] {
            let map = builtin_map(name).expect("built-in map");
            let got = map.overlap_count();
            if got != want {
                return Err(
                    Error::numeric(format!("{name} overlap count {got}, expected {want}")).into(),
                );
            }
        }
        pass("simulator label maps overlap 11 and 15 target classes");
    }

    // Canonical stream arithmetic at the default configuration.
    {
        let cfg = ExperimentConfig::from_text("")?;
        let plan = build_plan(&cfg.stream, 0)?;
        let steps = plan.num_steps();
        if steps != 852 {
            return Err(
                Error::numeric(format!("default stream has {steps} steps, expected 852")).into(),
            );
        }
        pass("default stream schedules 852 steps of 8 samples");
    }

    // A miniature run is deterministic and audits its budget.
    {
        let text = "stream.domains = metro,delta\nstream.train_per_domain = 8\n\
                    stream.test_per_domain = 2\nstream.batch_size = 4\nstream.budget = 3\n\
                    model.hidden_channels = 2\nmodel.num_layers = 2\ntrain.seeds = 1\n";
        let cfg = ExperimentConfig::from_text(text)?;
        let a = run_experiment(&cfg)?;
        let b = run_experiment(&cfg)?;
        if a.record.to_json()? != b.record.to_json()? {
            return Err(Error::numeric("identical runs produced different records").into());
        }
        let outcome = &a.record.per_seed[0];
        if outcome.updates_applied != outcome.steps_run * 3 {
            return Err(Error::protocol(format!(
                "audit mismatch: {} updates over {} steps at budget 3",
                outcome.updates_applied, outcome.steps_run
            ))
            .into());
        }
        pass("miniature run is byte-deterministic and budget-audited");
    }

    println!("all checks passed");
    Ok(())
}
