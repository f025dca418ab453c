//! `mssr` — train, run and inspect the multi-scale super-resolution models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mssr_core::checkpoint::{load_checkpoint, spec_from_config};
use mssr_core::evaluate::{
    evaluate, min_overlap, super_resolve, EvalOptions, InferOptions, TileConfig,
};
use mssr_core::graph::Graph;
use mssr_core::image_io::{read_image, write_image, ImageBuffer};
use mssr_core::manifest::{load_manifest, save_manifest, split_by_camera};
use mssr_core::models::{audit_graph, build_network, count_parameters, preset, receptive_field};
use mssr_core::optim::AdamState;
use mssr_core::rng::SeededRng;
use mssr_core::selftest::run_self_test;
use mssr_core::train::{train, TrainConfig};
use mssr_core::Result;

#[derive(Parser)]
#[command(name = "mssr", version, about = "Multi-scale super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config file
    Train {
        /// Config file (keys: model, loss, patch_size, batch_size, updates,
        /// lr_*, seed, data_manifest, ckpt_dir, eval_interval)
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's loss
        #[arg(long, value_parser = ["l1", "l2"])]
        loss: Option<String>,
    },
    /// Super-resolve a single image
    Infer {
        /// Checkpoint directory; architecture and weights come from here
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Preset used when no checkpoint is given (randomly initialized)
        #[arg(long, value_parser = ["baseline-r", "msrn", "baseline-d", "msdn"])]
        model: Option<String>,
        /// Single input image; mutually exclusive with --manifest
        #[arg(
            long = "in",
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        input: Option<PathBuf>,
        /// Process every entry of a dataset manifest instead
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output image path (with --in) or directory (with --manifest)
        #[arg(long = "out")]
        output: PathBuf,
        /// Average the 8 flip/rotation variants
        #[arg(long)]
        ensemble: bool,
        /// Process in tiles of this core size
        #[arg(long)]
        tile: Option<usize>,
        /// Tile overlap; defaults to the model's receptive-field radius
        #[arg(long)]
        overlap: Option<usize>,
        /// Init seed for a preset run without a checkpoint
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute PSNR/SSIM over a dataset manifest
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_parser = ["baseline-r", "msrn", "baseline-d", "msdn"])]
        model: Option<String>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ensemble: bool,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        /// Also restrict PSNR to the luma channel
        #[arg(long)]
        y_channel: bool,
        /// Write the TSV report here instead of stdout
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a preset's structure: parameters, additions/concatenations,
    /// receptive field
    Inspect {
        #[arg(long, value_parser = ["baseline-r", "msrn", "baseline-d", "msdn"])]
        model: String,
    },
    /// Run the built-in oracle checks (gradients, convolution, metrics)
    SelfTest,
    /// Split a manifest into per-camera manifests
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to the manifest's directory
        #[arg(long = "out")]
        output: Option<PathBuf>,
    },
}

fn load_model(ckpt: &Option<PathBuf>, model: &Option<String>, seed: u64) -> Result<Graph<f32>> {
    match (ckpt, model) {
        (Some(dir), _) => {
            let ckpt = load_checkpoint(dir)?;
            let spec = spec_from_config(&ckpt.manifest.config)?;
            let mut init = SeededRng::new(seed).stream("init");
            let mut graph = build_network(&spec, &mut init)?;
            let mut adam = AdamState::new(&graph);
            ckpt.apply_to(&mut graph, &mut adam)?;
            Ok(graph)
        }
        (None, Some(name)) => {
            eprintln!("note: no checkpoint given; '{name}' runs with random weights");
            let spec = preset(name)?;
            let mut init = SeededRng::new(seed).stream("init");
            build_network(&spec, &mut init)
        }
        (None, None) => Err(mssr_core::Error::Config("need --ckpt or --model".into())),
    }
}

fn tile_config(
    graph: &Graph<f32>,
    tile: Option<usize>,
    overlap: Option<usize>,
) -> Option<TileConfig> {
    tile.map(|t| TileConfig {
        tile: t,
        overlap: overlap.unwrap_or_else(|| min_overlap(graph)),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, loss } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = loss {
                cfg.loss = mssr_core::ops::LossMode::parse(&l)?;
            }
            let out = train(&cfg)?;
            println!(
                "trained {} updates\tfinal_loss={:.6}\twindowed_loss={:.6}\tmetrics={}",
                cfg.updates,
                out.final_loss,
                out.windowed_loss,
                out.metrics_path.display()
            );
        }
        Command::Infer {
            ckpt,
            model,
            input,
            manifest,
            output,
            ensemble,
            tile,
            overlap,
            seed,
        } => {
            let graph = load_model(&ckpt, &model, seed)?;
            let opts = InferOptions {
                ensemble,
                tile: tile_config(&graph, tile, overlap),
            };
            let run_one = |src: &std::path::Path, dst: &std::path::Path| -> Result<(u32, u32)> {
                let img = read_image(src)?;
                let sr = super_resolve(&graph, &img.to_tensor(), &opts)?;
                write_image(&ImageBuffer::from_tensor(&sr)?, dst)?;
                Ok((img.width, img.height))
            };
            match (input, manifest) {
                (Some(path), None) => {
                    let (w, h) = run_one(&path, &output)?;
                    println!("wrote {} ({w}x{h})", output.display());
                }
                (None, Some(path)) => {
                    let data = load_manifest(&path)?;
                    std::fs::create_dir_all(&output)?;
                    for e in &data.entries {
                        let dst = output.join(format!("{}.png", e.id));
                        let (w, h) = run_one(&e.lr_path, &dst)?;
                        println!("wrote {} ({w}x{h})", dst.display());
                    }
                }
                _ => unreachable!("clap enforces exactly one of --in/--manifest"),
            }
        }
        Command::Eval {
            ckpt,
            model,
            manifest,
            ensemble,
            tile,
            overlap,
            y_channel,
            report,
            seed,
        } => {
            let graph = load_model(&ckpt, &model, seed)?;
            let data = load_manifest(&manifest)?;
            let opts = EvalOptions {
                infer: InferOptions {
                    ensemble,
                    tile: tile_config(&graph, tile, overlap),
                },
                y_channel,
            };
            let rep = evaluate(&graph, &data, &opts)?;
            let text = rep.to_text();
            match report {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Inspect { model } => {
            let spec = preset(&model)?;
            let mut init = SeededRng::new(0).stream("init");
            let graph = build_network(&spec, &mut init)?;
            let (total, per_layer) = count_parameters(&graph);
            let (adds, concats) = audit_graph(&graph);
            println!("model\t{}", spec.name);
            println!("body\t{:?}", spec.body);
            println!("blocks\t{:?}", spec.blocks);
            println!("filters\t{:?}", spec.filters);
            println!("parameters\t{total}");
            println!("additions\t{adds}");
            println!("concatenations\t{concats}");
            println!("receptive_field\t{}", receptive_field(&graph));
            println!("layers\t{}", per_layer.len());
        }
        Command::SelfTest => {
            let results = run_self_test();
            let mut failed = false;
            for r in &results {
                println!(
                    "{}\t{}\t{}",
                    if r.passed { "pass" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                failed |= !r.passed;
            }
            if failed {
                return Err(mssr_core::Error::Config("self-test failed".into()));
            }
        }
        Command::Split { manifest, output } => {
            let data = load_manifest(&manifest)?;
            let dir = output
                .or_else(|| manifest.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            let stem = manifest
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("manifest");
            for (tag, part) in split_by_camera(&data)? {
                let path = dir.join(format!("{stem}.{tag}.tsv"));
                save_manifest(&part, &path)?;
                println!("{tag}\t{}\t{}", part.entries.len(), path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("MSSR_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(0) => {} // auto
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            Err(_) => {
                eprintln!("error: MSSR_THREADS must be a non-negative integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse(); // usage errors exit 2 via clap
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
