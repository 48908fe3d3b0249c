use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use xmq_core::dataset::{generate_synthetic, Dataset, SHAPES};
use xmq_core::detector::{Detection, DetectorModel};
use xmq_core::features::{read_labels_csv, schema, FeatureTable};
use xmq_core::foa::{select_features, write_trace_csv, FitnessData, FoaConfig, MaskFile};
use xmq_core::geom::Rect;
use xmq_core::imgproc::{preprocess, Image};
use xmq_core::io::{read_json, read_string, write_json};
use xmq_core::kgraph::{CrfModel, KnowledgeGraph};
use xmq_core::pipeline::{
    evaluate_predictions, evaluate_run, image_graph, image_skeleton, object_row, object_skeleton, rescale_detections,
    run_inference, run_training, Layout, PipelineConfig, Prediction, Predictions,
};
use xmq_core::skeleton::ThresholdPolicy;
use xmq_core::textkw::{rank_keywords, Encoder, EncoderConfig};
use xmq_core::{Error, Result};

const SEED_ENV: &str = "XMQ_SEED";

#[derive(Parser)]
#[command(
    name = "xmq",
    version,
    about = "Image captioning and visual question answering pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset (images/ and annotations.json).
    Synth {
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 21)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resize, denoise and contrast-enhance one image.
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Detect objects; boxes are reported in original-image pixels.
    Detect {
        /// Detector checkpoint or a run directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Binarize and thin an image, optionally inside one box `x,y,w,h`.
    Skeletonize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_box)]
        r#box: Option<Rect>,
        /// Fixed threshold instead of Otsu.
        #[arg(long)]
        threshold: Option<u8>,
    },
    /// Build the knowledge graph of an image from its detections.
    Kgraph {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CRF weights; defaults to a class-prior model over the shape classes.
        #[arg(long)]
        crf: Option<PathBuf>,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        min_pixels: usize,
    },
    /// One feature row per detected object.
    Features {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fossa feature selection over a feature table.
    Select {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 20)]
        pop: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train the word-vector text encoder on a corpus, one document per line.
    EmbedText {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
    },
    /// Rank the keywords of a text with a trained encoder.
    Keywords {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Run every training stage and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory overriding the configured source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory overriding the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption an image with a trained run.
    Caption {
        /// Run directory or its model.xmq.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Where intermediates and result.json go.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer a question about an image with a trained run.
    Vqa {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction file against a dataset, or a run on its test split.
    Eval {
        #[arg(long, conflicts_with = "run", requires = "gold")]
        pred: Option<PathBuf>,
        /// Dataset directory with annotations.json.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_box(s: &str) -> std::result::Result<Rect, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] if w > 0.0 && h > 0.0 => Ok(Rect::new(x, y, w, h)),
        _ => Err("expected x,y,w,h with positive width and height".into()),
    }
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Error::InvalidArgument(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn load_detector(path: &Path) -> Result<DetectorModel> {
    if path.is_dir() {
        DetectorModel::load(Layout::new(path).detector())
    } else {
        DetectorModel::load(path)
    }
}

fn print_file(path: &Path) -> Result<()> {
    println!("{}", read_string(path)?.trim_end());
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { images, seed, out } => {
            generate_synthetic(images, seed)?.export(&out)?;
            info!("wrote {images} images to {}", out.display());
        }
        Command::Preprocess { image, out, config } => {
            let cfg = pipeline_config(config.as_deref())?;
            preprocess(&Image::load(&image)?, &cfg.preprocess)?.save(&out)?;
        }
        Command::Detect {
            model,
            image,
            out,
            config,
        } => {
            let cfg = pipeline_config(config.as_deref())?;
            let det = load_detector(&model)?;
            let img = Image::load(&image)?;
            let pre = preprocess(&img, &cfg.preprocess)?;
            let dets = rescale_detections(
                &det.detect(&pre)?,
                (pre.width(), pre.height()),
                (img.width(), img.height()),
            );
            write_json(&out, &dets)?;
            info!("{} detections", dets.len());
        }
        Command::Skeletonize {
            image,
            out,
            r#box,
            threshold,
        } => {
            let policy = threshold.map_or(ThresholdPolicy::Otsu, ThresholdPolicy::Fixed);
            let img = Image::load(&image)?;
            let mask = match r#box {
                Some(r) => object_skeleton(&img, &r, policy)?,
                None => image_skeleton(&img, policy)?,
            };
            mask.save(&out)?;
            info!("skeleton has {} pixels", mask.count());
        }
        Command::Kgraph {
            image,
            detections,
            out,
            crf,
            dot,
            min_pixels,
        } => {
            let img = Image::load(&image)?;
            let dets: Vec<Detection> = read_json(&detections)?;
            let shapes: Vec<String> = SHAPES.iter().map(|s| s.to_string()).collect();
            let crf = match crf {
                Some(p) => read_json(p)?,
                None => CrfModel::with_class_prior(&shapes, 2.0),
            };
            let skel = image_skeleton(&img, ThresholdPolicy::Otsu)?;
            let (g, secs) = image_graph(&crf, &img, &dets, &skel, min_pixels)?;
            g.save(&out)?;
            if let Some(d) = dot {
                xmq_core::io::write_string(d, &g.to_dot())?;
            }
            info!(
                "graph with {} nodes and {} edges in {secs:.6}s",
                g.nodes.len(),
                g.edges.len()
            );
        }
        Command::Features {
            image,
            detections,
            graph,
            out,
        } => {
            let img = Image::load(&image)?;
            let dets: Vec<Detection> = read_json(&detections)?;
            let g = KnowledgeGraph::load(&graph)?;
            let mut table = FeatureTable::new(schema());
            for d in &dets {
                let skel = object_skeleton(&img, &d.rect, ThresholdPolicy::Otsu)?;
                table.push(&object_row(&img, &d.rect, &skel, &g)?)?;
            }
            table.write_csv(&out)?;
        }
        Command::Select {
            features,
            labels,
            pop,
            iters,
            seed,
            out,
            trace,
        } => {
            let table = FeatureTable::read_csv(&features)?;
            let y = read_labels_csv(&labels)?;
            let cfg = FoaConfig {
                population: pop,
                iterations: iters,
                seed,
                ..FoaConfig::default()
            };
            let data = FitnessData::split(&table.rows, &y, cfg.val_fraction, seed)?;
            let result = select_features(&cfg, &data)?;
            let mask = MaskFile::new(&table.names, &result);
            write_json(&out, &mask)?;
            if let Some(t) = trace {
                write_trace_csv(t, &result.trace)?;
            }
            info!(
                "selected {} of {} features, error {}",
                mask.selected.len(),
                table.names.len(),
                result.best_error
            );
        }
        Command::EmbedText {
            corpus,
            out,
            dim,
            window,
        } => {
            let text = read_string(&corpus)?;
            let docs: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            let enc = Encoder::train(&docs, &EncoderConfig { dim, window })?;
            enc.save(&out)?;
            info!("encoder over {} words", enc.vocab().len());
        }
        Command::Keywords { encoder, text, top } => {
            let enc = Encoder::load(&encoder)?;
            let ranked = rank_keywords(&enc, &text, top)?;
            for k in ranked {
                println!("{}\t{:.6}", k.keyword, k.score);
            }
        }
        Command::Train { config, data, out } => {
            let mut cfg = pipeline_config(config.as_deref())?;
            if let Some(seed) = env_seed()? {
                cfg.seed = seed;
            }
            if let Some(d) = data {
                cfg.data = xmq_core::pipeline::DataSource::Directory { path: d, limit: None };
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = run_training(&cfg)?;
            println!("{}", outcome.run_dir.join("manifest.json").display());
        }
        Command::Caption { model, image, out } => {
            let out = out.unwrap_or_else(|| default_inference_dir(&model, &image));
            let rec = run_inference(&model, &image, None, &out)?;
            if let Prediction::Caption(c) = rec.prediction {
                println!("{c}");
            }
        }
        Command::Vqa {
            model,
            image,
            question,
            out,
        } => {
            let out = out.unwrap_or_else(|| default_inference_dir(&model, &image));
            let rec = run_inference(&model, &image, Some(&question), &out)?;
            if let Prediction::Answer(a) = rec.prediction {
                println!("{a}");
            }
        }
        Command::Eval { pred, gold, run, out } => match (pred, gold, run) {
            (Some(p), Some(g), None) => {
                let preds: Predictions = read_json(&p)?;
                let report = evaluate_predictions(&preds, &Dataset::load_dir(&g, None)?)?;
                write_json(&out, &report)?;
                print_file(&out)?;
            }
            (None, gold, Some(r)) => {
                let ds = gold.map(|g| Dataset::load_dir(g, None)).transpose()?;
                let summary = evaluate_run(&r, ds.as_ref())?;
                write_json(&out, &summary)?;
                print_file(&out)?;
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "eval needs either --pred with --gold, or --run".into(),
                ))
            }
        },
    }
    Ok(())
}

fn default_inference_dir(model: &Path, image: &Path) -> PathBuf {
    let root = if model.is_file() {
        model.parent().unwrap_or(Path::new("."))
    } else {
        model
    };
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    root.join("inference").join(stem)
}

/// 2 for bad input, 3 for a failing stage.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { .. } | Error::Diverged(_) => 3,
        e if e.is_validation() => 2,
        Error::Io { .. } | Error::EmptyInput(_) | Error::Image(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
