//! `patchgraph` command-line tool.
//!
//! Exit codes: 0 success, 1 any pipeline error (message on stderr),
//! 2 invalid command-line usage.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use patchgraph::assembly::{filter_edges, infer, EdgeClassifier, PairNet, SeamHeuristic, TruthOracle};
use patchgraph::dataset::{
    load_patch_dir, make_splits, resize_and_split, save_patch_dir, synth_corpus, DatasetManifest, GridSpec,
    Split, PAPER_SPLIT_RATIOS,
};
use patchgraph::graph::{complete_graph, RelationLabel};
use patchgraph::graphio::{export, import, PatchStorage};
use patchgraph::raster::RgbImage;
use patchgraph::reconstruct::{layout, render};
use patchgraph::training::{evaluate, train_graphs, Evaluation, ImageGraphs, TrainConfig};
use patchgraph_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "patchgraph", version, about = "Reassemble documents from square patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus of 768x1280 PNG pages.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign images to train/val/test and optionally cut them into patches.
    SplitImage {
        /// Directory of PNG images, or single PNG files.
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out_manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train,val,test fractions; defaults to the 3394/500/200 proportions.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Also write every image's patches as `<stem>_<index>.png` here.
        #[arg(long)]
        patches_dir: Option<PathBuf>,
        /// Training config supplying the grid.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the pairwise network on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML file with TrainConfig keys; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Best-validation parameters are written here.
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Final-epoch parameters.
        #[arg(long)]
        last_checkpoint: Option<PathBuf>,
        /// Per-epoch CSV history.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Loss, balanced accuracy and per-class F1 on the manifest's splits.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path, or `oracle` (ground truth) or `seam` (gradient heuristic).
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to one split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Classify every ordered pair of a directory of patches.
    Infer {
        #[arg(long)]
        patches_dir: PathBuf,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Store patches as PNG files beside the graph instead of embedding them.
        #[arg(long)]
        patch_files: bool,
    },
    /// Threshold a graph and lay out its connected components.
    Layout {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render each component of a laid-out graph as a PNG mosaic.
    Render {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Threshold used when the graph carries no layout.
        #[arg(long, default_value_t = 0.8)]
        tau: f32,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "PATCHGRAPH_CHECKPOINT")]
        checkpoint: Option<String>,
        #[arg(long, env = "PATCHGRAPH_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = "PATCHGRAPH_PATCH_SIZE", default_value_t = 256)]
        patch_size: usize,
        #[arg(long, env = "PATCHGRAPH_TAU", default_value_t = 0.8)]
        tau: f32,
        /// Sessions are restored from and saved to this file.
        #[arg(long, env = "PATCHGRAPH_SNAPSHOT")]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("in config {}", p.display()))
        }
    }
}

fn classifier(spec: &str, grid: GridSpec) -> Result<Arc<dyn EdgeClassifier>> {
    Ok(match spec {
        "oracle" => Arc::new(TruthOracle { grid }),
        "seam" => Arc::new(SeamHeuristic::default()),
        path => Arc::new(PairNet::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?),
    })
}

fn png_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "png"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no PNG images given");
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Rows in the layout of a results table: loss, balanced accuracy, F1 per class.
fn results_table(rows: &[(String, Evaluation)]) -> String {
    let mut out = String::new();
    write!(out, "{:<12}{:>8}{:>10}", "split", "loss", "bal.acc").unwrap();
    for l in RelationLabel::ALL {
        write!(out, "{:>8}", format!("F1 {}", l.glyph())).unwrap();
    }
    out.push('\n');
    for (name, ev) in rows {
        write!(out, "{name:<12}{:>8.4}{:>10.4}", ev.loss, ev.balanced_accuracy).unwrap();
        for f in ev.f1 {
            write!(out, "{f:>8.4}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, seed, out } => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, img) in synth_corpus(n, seed).iter().enumerate() {
                img.save_png(&out.join(format!("synth_{i:04}.png")))?;
            }
            eprintln!("wrote {n} images to {}", out.display());
        }
        Command::SplitImage {
            input,
            out_manifest,
            seed,
            ratios,
            patches_dir,
            config,
        } => {
            let images = png_inputs(&input)?;
            let ratios = match ratios {
                Some(r) if r.len() == 3 => [r[0], r[1], r[2]],
                Some(_) => Cli::command()
                    .error(ErrorKind::WrongNumberOfValues, "--ratios takes exactly three values")
                    .exit(),
                None => PAPER_SPLIT_RATIOS,
            };
            let manifest = make_splits(&images, ratios, seed)?;
            manifest.save(&out_manifest)?;
            for split in Split::ALL {
                eprintln!("{split}: {} images", manifest.count(split));
            }
            if let Some(dir) = patches_dir {
                let grid = read_config(config.as_deref())?.grid;
                for path in &images {
                    let patches = resize_and_split(&RgbImage::load_png(path)?, &grid)?;
                    save_patch_dir(&patches, &dir, &stem(path))?;
                }
                eprintln!("wrote patches of {} images to {}", images.len(), dir.display());
            }
        }
        Command::Train {
            manifest,
            config,
            out_checkpoint,
            last_checkpoint,
            history,
        } => {
            let cfg = read_config(config.as_deref())?;
            let m = DatasetManifest::load(&manifest)?;
            let train = ImageGraphs::from_manifest(&m, Split::Train, cfg.grid);
            let val = ImageGraphs::from_manifest(&m, Split::Val, cfg.grid);
            let outcome = train_graphs(&train, Some(&val), &cfg, |r| {
                let mut line = format!(
                    "epoch {:>3}  train loss {:.4} bal.acc {:.4}",
                    r.epoch, r.train.loss, r.train.balanced_accuracy
                );
                if let Some(v) = r.val {
                    write!(line, "  val loss {:.4} bal.acc {:.4}", v.loss, v.balanced_accuracy).unwrap();
                }
                eprintln!("{line}");
                ControlFlow::Continue(())
            })?;
            outcome.best.save(&out_checkpoint)?;
            if let Some(p) = last_checkpoint {
                outcome.last.save(&p)?;
            }
            if let Some(p) = history {
                outcome.history.save_csv(&p)?;
            }
            eprintln!("best epoch {} written to {}", outcome.best_epoch, out_checkpoint.display());
        }
        Command::Eval {
            manifest,
            checkpoint,
            config,
            split,
        } => {
            let cfg = read_config(config.as_deref())?;
            let m = DatasetManifest::load(&manifest)?;
            let model = classifier(&checkpoint, cfg.grid)?;
            let splits = match split {
                Some(s) => vec![s.parse::<Split>()?],
                None => Split::ALL.to_vec(),
            };
            let mut rows = Vec::new();
            for s in splits {
                let source = ImageGraphs::from_manifest(&m, s, cfg.grid);
                if source.paths.is_empty() {
                    continue;
                }
                rows.push((s.to_string(), evaluate(model.as_ref(), &source, &cfg.loss_weights)?));
            }
            if rows.is_empty() {
                bail!("the manifest has no images in the requested splits");
            }
            print!("{}", results_table(&rows));
        }
        Command::Infer {
            patches_dir,
            checkpoint,
            config,
            out,
            patch_files,
        } => {
            let cfg = read_config(config.as_deref())?;
            let model = classifier(&checkpoint, cfg.grid)?;
            let g = complete_graph(load_patch_dir(&patches_dir)?)?;
            let inferred = infer(&g, model.as_ref())?;
            let storage = if patch_files {
                let dir = out.with_extension("patches");
                PatchStorage::Files(dir)
            } else {
                PatchStorage::Embedded
            };
            export(&inferred, None, &storage, &out)?;
            eprintln!(
                "{} nodes, {} edges classified by {} -> {}",
                inferred.node_count(),
                inferred.edge_count(),
                model.name(),
                out.display()
            );
        }
        Command::Layout { graph, tau, out } => {
            let (g, _) = import(&graph)?;
            let filtered = filter_edges(&g, tau)?;
            let l = layout(&filtered);
            export(&filtered, Some(&l), &PatchStorage::Embedded, &out)?;
            println!(
                "{} components, {} collisions, {} conflicting edges",
                l.components.len(),
                l.collisions.len(),
                l.conflicts.len()
            );
            for (i, c) in l.components.iter().enumerate() {
                println!("component {i}: nodes {:?}", c.node_ids());
            }
            for c in &l.collisions {
                println!(
                    "collision in component {} at {:?}: nodes {:?}",
                    c.component, c.position, c.nodes
                );
            }
        }
        Command::Render { graph, out_dir, tau } => {
            let (g, l) = import(&graph)?;
            let l = match l {
                Some(l) => l,
                None => layout(&filter_edges(&g, tau)?),
            };
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let mosaics = render(g.nodes(), &l)?;
            for (i, m) in mosaics.iter().enumerate() {
                m.save_png(&out_dir.join(format!("component_{i:03}.png")))?;
            }
            println!("{} mosaics written to {}", mosaics.len(), out_dir.display());
        }
        Command::Serve {
            checkpoint,
            addr,
            patch_size,
            tau,
            snapshot,
            config,
        } => {
            patchgraph_service::check_tau(tau).map_err(|e| anyhow::anyhow!(e.message))?;
            let cfg = read_config(config.as_deref())?;
            let grid = GridSpec { patch: patch_size, ..cfg.grid };
            let model = checkpoint.as_deref().map(|c| classifier(c, grid)).transpose()?;
            if let Some(m) = &model {
                if m.patch_size().is_some_and(|s| s != patch_size) {
                    bail!("checkpoint expects {}px patches, service configured for {patch_size}px", m.patch_size().unwrap());
                }
            }
            let state = AppState::new(
                ServiceConfig {
                    patch_size,
                    default_tau: tau,
                    snapshot,
                },
                model,
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on {}", listener.local_addr()?);
                patchgraph_service::serve(listener, state).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
