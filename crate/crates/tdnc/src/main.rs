// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tdnc::config::{FormatSettings, PipelineConfig, Settings, TrainSettings};
use tdnc::manifest::Manifest;
use tdnc::model::{load_model, save_model, Model};
use tdnc::pipeline::{
    factorize_network, float_accuracy, implement, load_mnist, mnist_paths, sweep_row, sweep_table,
    MnistSplits,
};
use tdnc::vcd::VcdWriter;
use tdnc_core::emit::{emit_dot, emit_netlist, report_stats};
use tdnc_core::finetune::{finetune_with_progress, train_baseline_softmax};
use tdnc_core::fxsim::{
    cycle_simulate_traced, predict_words, quantize_graph, FxFormat, FxProgram, TraceSink,
};
use tdnc_core::netir::{argmax, Dataset, FeatureMap, NetworkSpec};
use tdnc_core::tdnn::{stream_forward, TdnnGraph};

/// Compiles trained networks into bit-serial time-delay hardware.
#[derive(Parser)]
#[command(name = "tdnc", version)]
struct Cli {
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Directory for outputs and manifests.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Training images used to choose power-of-two rescaling before
    /// fixed-point implementation; 0 disables it [default: 1000].
    #[arg(long, global = true)]
    calibration_images: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// L2 penalty on weights.
    #[arg(long)]
    l2: Option<f64>,
}

#[derive(Args, Default)]
struct FormatArgs {
    /// Word length n.
    #[arg(long)]
    word_bits: Option<u32>,
    /// Fractional bits m.
    #[arg(long)]
    frac_bits: Option<u32>,
}

#[derive(Args, Default)]
struct RankArgs {
    /// Largest acceptable relative approximation error, as a fraction.
    #[arg(long, conflicts_with = "ranks")]
    target_error: Option<f64>,
    /// Explicit ranks `rc,rv,rf`, capped per layer.
    #[arg(long, value_parser = parse_ranks)]
    ranks: Option<[usize; 3]>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Float,
    Fx,
    Cycle,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Artifact {
    Netlist,
    Dot,
    Report,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline softmax regression on MNIST.
    Train {
        /// Where to write the model [default: <out-dir>/baseline.model].
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Replace conv and fully-connected layers by factored sub-layers.
    Factorize {
        #[arg(long)]
        model: PathBuf,
        /// [default: <out-dir>/factored.model]
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        ranks: RankArgs,
    },
    /// Fine-tune a factored fully-connected network on MNIST.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        /// [default: <out-dir>/finetuned.model]
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Build the time-delay graph and print its resource report.
    Build {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        format: FormatArgs,
    },
    /// Classify MNIST test images with the streaming graph.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "fx")]
        mode: Mode,
        /// Only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
        /// Write a VCD trace of the first image (cycle mode only).
        #[arg(long)]
        vcd: Option<PathBuf>,
        #[command(flatten)]
        format: FormatArgs,
    },
    /// Write the Verilog netlist, Graphviz drawing and resource report.
    Emit {
        #[arg(long)]
        model: PathBuf,
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "netlist,dot,report"
        )]
        what: Vec<Artifact>,
        #[command(flatten)]
        format: FormatArgs,
    },
    /// Accuracy, parameter and delay-unit table over approximation errors.
    Sweep {
        /// Target errors in percent.
        #[arg(long, value_delimiter = ',', default_value = "10,16,31,40,51,61,82")]
        errors: Vec<f64>,
        /// Start from this model instead of training a baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        format: FormatArgs,
    },
}

fn parse_ranks(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [rc, rv, rf] = parts[..] else {
        return Err(format!("expected rc,rv,rf, got `{s}`"));
    };
    let p = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| format!("`{t}` is not a rank"))
    };
    Ok([p(rc)?, p(rv)?, p(rf)?])
}

impl TrainArgs {
    fn settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            l2: self.l2,
        }
    }
}

impl FormatArgs {
    fn settings(&self) -> FormatSettings {
        FormatSettings {
            n: self.word_bits,
            m: self.frac_bits,
        }
    }
}

fn resolve(cli: &Cli) -> Result<PipelineConfig> {
    let mut flags = Settings {
        seed: cli.seed,
        data: cli.data.clone(),
        out_dir: cli.out_dir.clone(),
        calibration_images: cli.calibration_images,
        ..Settings::default()
    };
    match &cli.command {
        Command::Train { train, .. } | Command::Finetune { train, .. } => {
            flags.train = train.settings()
        }
        Command::Factorize { ranks, .. } => {
            flags.target_error = ranks.target_error;
            flags.ranks = ranks.ranks;
        }
        Command::Build { format, .. }
        | Command::Simulate { format, .. }
        | Command::Emit { format, .. } => flags.format = format.settings(),
        Command::Sweep { train, format, .. } => {
            flags.train = train.settings();
            flags.format = format.settings();
        }
    }
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    Ok(PipelineConfig::resolve(&[
        ("flags", &flags),
        ("config file", &file),
    ])?)
}

struct Run {
    cfg: PipelineConfig,
    manifest: Manifest,
    splits: Option<MnistSplits>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .input(path)
            .with_context(|| format!("cannot read {}", path.display()))
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .output(path)
            .with_context(|| format!("cannot read back {}", path.display()))
    }

    fn data(&mut self) -> Result<&MnistSplits> {
        if self.splits.is_none() {
            for p in mnist_paths(&self.cfg.data) {
                self.input(&p)?;
            }
            let splits = load_mnist(&self.cfg.data)
                .with_context(|| format!("loading MNIST from {}", self.cfg.data.display()))?;
            self.splits = Some(splits);
        }
        Ok(self.splits.as_ref().expect("just loaded"))
    }

    fn take_data(&mut self) -> Result<MnistSplits> {
        self.data()?;
        Ok(self.splits.take().expect("just loaded"))
    }

    /// Model as implemented in `fmt`, rescaled unless calibration is off.
    fn implement(&mut self, net: &NetworkSpec, fmt: FxFormat) -> Result<TdnnGraph> {
        let count = self.cfg.calibration_images;
        let calibration: Vec<FeatureMap> = if count == 0 {
            Vec::new()
        } else {
            let train = &self.data()?.train;
            train.images[..count.min(train.len())].to_vec()
        };
        Ok(implement(net, &calibration, fmt)?.1)
    }

    fn model(&mut self, path: &Path) -> Result<Model> {
        let m = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
        self.input(path)?;
        Ok(m)
    }

    fn save(&mut self, path: &Path, model: &Model) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        save_model(path, model).with_context(|| format!("writing {}", path.display()))?;
        self.output(path)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.cfg.out_dir)
            .with_context(|| format!("creating {}", self.cfg.out_dir.display()))?;
        let path = self.cfg.out_dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.output(&path)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn out_path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given
            .clone()
            .unwrap_or_else(|| self.cfg.out_dir.join(default))
    }
}

fn limited(data: &Dataset, limit: Option<usize>) -> Dataset {
    data.slice(0..limit.unwrap_or(data.len()).min(data.len()))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let name = match &cli.command {
        Command::Train { .. } => "train",
        Command::Factorize { .. } => "factorize",
        Command::Finetune { .. } => "finetune",
        Command::Build { .. } => "build",
        Command::Simulate { .. } => "simulate",
        Command::Emit { .. } => "emit",
        Command::Sweep { .. } => "sweep",
    };
    let manifest = Manifest::new(name, std::env::args().collect(), &cfg);
    let mut run = Run {
        cfg,
        manifest,
        splits: None,
    };
    let fmt = run.cfg.fx_format()?;
    match &cli.command {
        Command::Train { output, .. } => {
            let splits = run.take_data()?;
            let started = Instant::now();
            let net =
                train_baseline_softmax(&splits.train, &splits.valid, &run.cfg.train_config())?;
            let seconds = started.elapsed().as_secs_f64();
            let acc = float_accuracy(&net, &splits.test)?;
            println!("test accuracy {acc:.4} ({seconds:.1} s)");
            run.manifest.result("test_accuracy", acc);
            run.manifest.result("train_seconds", seconds);
            let path = run.out_path(output, "baseline.model");
            run.save(&path, &Model::new(net))?;
        }
        Command::Factorize { model, output, .. } => {
            let Some(choice) = run.cfg.rank_choice() else {
                bail!("factorize needs --target-error or --ranks (or target_error / ranks in the config file)");
            };
            let m = run.model(model)?;
            let (net, report) = factorize_network(&m.net, choice)?;
            if report.is_empty() {
                bail!(
                    "{} has no conv or fully_connected layer to factorize",
                    model.display()
                );
            }
            for r in &report {
                println!(
                    "layer {} ({}) {:?}: ranks {:?}, relative error {:.6}, params {} -> {}",
                    r.layer, r.kind, r.dims, r.ranks, r.rel_error, r.params_before, r.params_after
                );
            }
            println!(
                "network params {} -> {}",
                m.net.param_count(),
                net.param_count()
            );
            run.manifest.result("layers", &report);
            let path = run.out_path(output, "factored.model");
            run.save(&path, &Model::new(net))?;
        }
        Command::Finetune { model, output, .. } => {
            let m = run.model(model)?;
            let splits = run.take_data()?;
            let before = float_accuracy(&m.net, &splits.test)?;
            let net = finetune_with_progress(
                &m.net,
                &splits.train,
                &splits.valid,
                &run.cfg.train_config(),
                |e, a| println!("epoch {}: validation accuracy {a:.4}", e + 1),
            )?;
            let after = float_accuracy(&net, &splits.test)?;
            println!("test accuracy {before:.4} -> {after:.4}");
            run.manifest.result("test_accuracy_before", before);
            run.manifest.result("test_accuracy_after", after);
            let path = run.out_path(output, "finetuned.model");
            run.save(&path, &Model::new(net))?;
        }
        Command::Build { model, .. } => {
            let m = run.model(model)?;
            let g = run.implement(&m.net, fmt)?;
            let report = report_stats(&g, fmt);
            print!("{}", report.to_table());
            run.write("build-report.txt", &report.to_table())?;
            run.manifest.result("synapses", report.synapses);
            run.manifest.result("delay_elements", report.delay_elements);
            run.manifest
                .result("cycles_per_image", report.cycles_per_image);
        }
        Command::Simulate {
            model,
            mode,
            limit,
            vcd,
            ..
        } => {
            let m = run.model(model)?;
            let g = run.implement(&m.net, fmt)?;
            let test = limited(&run.data()?.test, *limit);
            let report = report_stats(&g, fmt);
            let mut predictions = Vec::with_capacity(test.len());
            let label = match mode {
                Mode::Float => {
                    for image in &test.images {
                        let out = stream_forward(&g, image)?;
                        predictions.push(out.valid_steps().last().map(|s| argmax(&s.values)));
                    }
                    println!("first valid raster step {}", g.first_valid_step());
                    "float"
                }
                Mode::Fx => {
                    let program = FxProgram::new(&g, fmt);
                    for image in &test.images {
                        predictions.push(Some(program.predict(image)?));
                    }
                    println!("first valid raster step {}", g.first_valid_step());
                    "fx"
                }
                Mode::Cycle => {
                    let mut first_cycle = None;
                    for (i, image) in test.images.iter().enumerate() {
                        let result = match (i, vcd) {
                            (0, Some(path)) => {
                                let file = fs::File::create(path)
                                    .with_context(|| format!("creating {}", path.display()))?;
                                let mut writer = VcdWriter::new(BufWriter::new(file), &g)?;
                                let r = cycle_simulate_traced(
                                    &g,
                                    image,
                                    fmt,
                                    Some(&mut writer as &mut dyn TraceSink),
                                )?;
                                writer
                                    .finish()
                                    .with_context(|| format!("writing {}", path.display()))?;
                                run.output(path)?;
                                println!("wrote {}", path.display());
                                r
                            }
                            _ => cycle_simulate_traced(&g, image, fmt, None)?,
                        };
                        first_cycle = first_cycle.or(result.trace.first_valid_output_cycle);
                        predictions.push(predict_words(&result.outputs));
                    }
                    if let Some(c) = first_cycle {
                        println!("first valid output cycle {c}");
                        run.manifest.result("first_valid_output_cycle", c);
                    }
                    "cycle"
                }
            };
            if vcd.is_some() && !matches!(mode, Mode::Cycle) {
                bail!("--vcd needs --mode cycle");
            }
            let correct = predictions
                .iter()
                .zip(&test.labels)
                .filter(|(p, &l)| **p == Some(l))
                .count();
            let acc = correct as f64 / test.len() as f64;
            println!("{label} accuracy {acc:.4} on {} images", test.len());
            println!("{} cycles per image", report.cycles_per_image);
            let lines: String = predictions
                .iter()
                .map(|p| p.map_or("-".to_string(), |c| c.to_string()) + "\n")
                .collect();
            run.write(&format!("predictions-{label}.txt"), &lines)?;
            run.manifest.result("accuracy", acc);
            run.manifest.result("images", test.len());
            run.manifest
                .result("first_valid_step", g.first_valid_step());
        }
        Command::Emit { model, what, .. } => {
            let m = run.model(model)?;
            let g = run.implement(&m.net, fmt)?;
            if what.contains(&Artifact::Netlist) {
                let q = quantize_graph(&g, fmt);
                run.write("tdnn.v", &emit_netlist(&q, fmt)?)?;
            }
            if what.contains(&Artifact::Dot) {
                run.write("tdnn.dot", &emit_dot(&g))?;
            }
            if what.contains(&Artifact::Report) {
                let report = report_stats(&g, fmt);
                run.write("report.txt", &report.to_table())?;
                run.write("report.kv", &report.to_kv())?;
            }
        }
        Command::Sweep {
            errors, baseline, ..
        } => {
            if let Some(e) = errors.iter().find(|e| !(0.0..=100.0).contains(*e)) {
                bail!("--errors takes percentages in 0..=100, got {e}");
            }
            let splits = run.take_data()?;
            let train = run.cfg.train_config();
            let base = match baseline {
                Some(path) => run.model(path)?.net,
                None => train_baseline_softmax(&splits.train, &splits.valid, &train)?,
            };
            let original = float_accuracy(&base, &splits.test)?;
            let calibration =
                &splits.train.images[..run.cfg.calibration_images.min(splits.train.len())];
            println!("original test accuracy {original:.4}");
            let mut rows = Vec::new();
            for &e in errors {
                let (row, _) = sweep_row(
                    &base,
                    original,
                    &splits,
                    e / 100.0,
                    &train,
                    fmt,
                    calibration,
                )?;
                print!(
                    "{}",
                    sweep_table(std::slice::from_ref(&row))
                        .lines()
                        .nth(1)
                        .unwrap_or("")
                );
                println!();
                rows.push(row);
            }
            let table = sweep_table(&rows);
            print!("{table}");
            run.write("sweep.txt", &table)?;
            run.manifest.result("rows", &rows);
        }
    }
    let path = run
        .manifest
        .write(&run.cfg.out_dir)
        .context("writing manifest")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
