//! Command-line front end: corpus synthesis and ingestion, training,
//! inference, cross-validation and evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. `NAZR_THREADS` caps the worker count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rubblemap::config::PipelineConfig;
use rubblemap::encoding::write_fisher_vector;
use rubblemap::error::{Error, Result};
use rubblemap::eval::{
    confusion_matrix, format_confusion_percent, global_pixel_accuracy, mean_pixel_accuracy,
    precision_recall, ConfusionMatrix,
};
use rubblemap::imaging::{
    majority_vote, rasterize_annotations, read_annotations, read_image, read_label_map,
    write_image, write_label_map, LabelMap, NUM_CLASSES,
};
use rubblemap::pipeline::{init_thread_pool, run_cv, run_inference, run_training};
use rubblemap::segments::dump_segments;
use rubblemap::synth::{generate_corpus, read_manifest, BackgroundKind, SceneSpec};

#[derive(Parser)]
#[command(
    name = "rubblemap",
    about = "Two-stage damage assessment: CRF-smoothed pixel labeling, then per-segment Fisher-vector classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus per-flag overrides shared by the model-running
/// subcommands. Flags win over the file, the file over defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    gmm_k: Option<usize>,
    #[arg(long)]
    svm_c: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long)]
    crf_iters: Option<usize>,
    #[arg(long)]
    crf_tol: Option<f64>,
    #[arg(long)]
    theta_pos: Option<f64>,
    #[arg(long)]
    theta_int: Option<f64>,
    /// Pairwise kernel weights as "w1,w2" (spatial, bilateral).
    #[arg(long)]
    kernel_weights: Option<String>,
    /// Class weighting: on, off, or both (cv only).
    #[arg(long)]
    class_weighting: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set wants KEY=VALUE, got {kv}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        if let Some(v) = &self.model_dir {
            cfg.model_dir = v.clone();
        }
        macro_rules! over {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        over!(gmm_k, "gmm_k");
        over!(svm_c, "svm_c");
        over!(folds, "folds");
        over!(seed, "seed");
        over!(min_area, "min_area");
        over!(crf_iters, "crf_iters");
        over!(crf_tol, "crf_tol");
        over!(theta_pos, "theta_pos");
        over!(theta_int, "theta_int");
        over!(kernel_weights, "kernel_weights");
        over!(class_weighting, "class_weighting");
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackgroundArg {
    Gradient,
    Speckle,
    Stripes,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Fraction of scenes left without structures.
        #[arg(long, default_value_t = 0.0)]
        empty_frac: f64,
        #[arg(long, default_value_t = 48)]
        width: u32,
        #[arg(long, default_value_t = 48)]
        height: u32,
        #[arg(long, default_value_t = 3)]
        annotators: usize,
        #[arg(long, default_value_t = 1.0)]
        jitter: f64,
        #[arg(long, default_value_t = 1)]
        structures_min: usize,
        #[arg(long, default_value_t = 3)]
        structures_max: usize,
        #[arg(long, value_enum, default_value_t = BackgroundArg::Gradient)]
        background: BackgroundArg,
        /// Sampling frequencies for mild,medium,severe.
        #[arg(long, default_value = "0.54,0.22,0.24")]
        class_freqs: String,
        /// Disable label confusion and vertex jitter.
        #[arg(long)]
        noise_free: bool,
    },
    /// Build a corpus manifest from existing images and annotation JSONs.
    Ingest {
        /// Directory of per-image annotation JSON documents.
        #[arg(long)]
        annotations: PathBuf,
        /// Directory containing the images the annotations reference.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep scenes whose merged annotation has no structures.
        #[arg(long)]
        keep_empty: bool,
    },
    /// Train the pixel model, mixture and segment classifier.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full pipeline on one image.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump one Fisher-vector file per segment.
        #[arg(long)]
        fv_dir: Option<PathBuf>,
    },
    /// Cross-validated evaluation over a corpus.
    Cv {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the JSON report here (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Compare predicted label maps against a corpus's merged annotations.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of <stem>_labels.pgm files, as written by infer.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Display output embeds the cause chain.
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            scenes,
            seed,
            empty_frac,
            width,
            height,
            annotators,
            jitter,
            structures_min,
            structures_max,
            background,
            class_freqs,
            noise_free,
        } => {
            let parts: Vec<f64> = class_freqs
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad --class-freqs {class_freqs}")))?;
            if parts.len() != 3 {
                return Err(Error::Config("--class-freqs wants three values".into()));
            }
            let mut spec = SceneSpec {
                class_freqs: [parts[0], parts[1], parts[2]],
                width,
                height,
                background: match background {
                    BackgroundArg::Gradient => BackgroundKind::SmoothGradient,
                    BackgroundArg::Speckle => BackgroundKind::Speckle,
                    BackgroundArg::Stripes => BackgroundKind::Stripes,
                },
                structures_min,
                structures_max,
                annotators,
                jitter_px: jitter,
                empty_frac,
                ..SceneSpec::default()
            };
            if noise_free {
                spec = spec.noise_free();
            }
            let manifest = generate_corpus(&out, scenes, &spec, seed)?;
            println!("wrote {scenes} scenes; manifest at {}", manifest.display());
            Ok(())
        }
        Command::Ingest {
            annotations,
            images,
            out,
            keep_empty,
        } => ingest(&annotations, &images, &out, keep_empty),
        Command::Train { config } => {
            let cfg = config.build()?;
            let outcome = run_training(&cfg)?;
            println!(
                "trained models in {} (config {})",
                outcome.model_dir.display(),
                outcome.config_hash
            );
            for f in &outcome.files {
                println!("  {}", f.display());
            }
            Ok(())
        }
        Command::Infer {
            config,
            image,
            out,
            fv_dir,
        } => {
            let cfg = config.build()?;
            let result = run_inference(&cfg, &image)?;
            fs::create_dir_all(&out).map_err(|e| Error::file(&out, e))?;
            let stem = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let labels_path = out.join(format!("{stem}_labels.pgm"));
            write_label_map(&labels_path, &result.labels)?;
            let overlay_path = out.join(format!("{stem}_overlay.ppm"));
            write_image(&overlay_path, &result.overlay)?;
            let seg_path = out.join(format!("{stem}_segments.jsonl"));
            let records: Vec<_> = result.segments.iter().map(|c| c.segment.clone()).collect();
            fs::write(&seg_path, dump_segments(&stem, &records))
                .map_err(|e| Error::file(&seg_path, e))?;
            if let Some(dir) = fv_dir {
                fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
                for cs in &result.segments {
                    if let Some(fv) = &cs.fv {
                        write_fisher_vector(
                            &dir.join(format!("{stem}_{:03}.nzrf", cs.segment.id)),
                            fv,
                        )?;
                    }
                }
            }
            let flagged = result.segments.iter().filter(|c| c.unencodable).count();
            println!(
                "{}: {} segments ({} kept pixel-stage label), outputs in {}",
                stem,
                result.segments.len(),
                flagged,
                out.display()
            );
            Ok(())
        }
        Command::Cv {
            config,
            report,
            format,
        } => {
            let cfg = config.build()?;
            let set = run_cv(&cfg)?;
            let rendered = match format {
                Format::Json => set.to_json(),
                Format::Table => set.to_table(),
            };
            match report {
                Some(path) => {
                    // The machine-readable report is always JSON; the table
                    // render goes to stdout.
                    fs::write(&path, set.to_json()).map_err(|e| Error::file(&path, e))?;
                    if matches!(format, Format::Table) {
                        println!("{rendered}");
                    }
                    println!("report written to {}", path.display());
                }
                None => println!("{rendered}"),
            }
            Ok(())
        }
        Command::Evaluate {
            manifest,
            pred,
            format,
        } => evaluate(&manifest, &pred, format),
    }
}

/// Builds a corpus from existing annotation JSONs: merges annotators by
/// majority vote into a truth map and writes a manifest next to the copies.
fn ingest(annotations: &Path, images: &Path, out: &Path, keep_empty: bool) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut json_files: Vec<PathBuf> = fs::read_dir(annotations)
        .map_err(|e| Error::file(annotations, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    json_files.sort();
    if json_files.is_empty() {
        return Err(Error::Data(format!(
            "no annotation JSON files in {}",
            annotations.display()
        )));
    }
    let mut entries = Vec::new();
    let mut dropped_empty = 0usize;
    for ann_path in &json_files {
        let ann = read_annotations(ann_path)?;
        let image_path = images.join(&ann.image);
        let image = read_image(&image_path)?;
        let rast = rasterize_annotations(&ann, image.width, image.height);
        if rast.degenerate_skipped > 0 {
            log::warn!(
                "{}: skipped {} degenerate polygons",
                ann_path.display(),
                rast.degenerate_skipped
            );
        }
        let merged = majority_vote(&rast.maps)?;
        if !keep_empty && !merged.has_foreground() {
            dropped_empty += 1;
            continue;
        }
        let stem = Path::new(&ann.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| ann.image.clone());
        let image_name = format!("{stem}.{}", if image.channels == 1 { "pgm" } else { "ppm" });
        let ann_name = format!("{stem}.json");
        let truth_name = format!("{stem}_truth.pgm");
        write_image(&out.join(&image_name), &image)?;
        fs::copy(ann_path, out.join(&ann_name))
            .map_err(|e| Error::file(ann_path, e))?;
        write_label_map(&out.join(&truth_name), &merged)?;
        entries.push(rubblemap::synth::SceneEntry {
            image: image_name,
            annotations: ann_name,
            truth: truth_name,
        });
    }
    let manifest = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serialization");
    fs::write(&manifest, json).map_err(|e| Error::file(&manifest, e))?;
    println!(
        "ingested {} scenes ({} empty dropped); manifest at {}",
        entries.len(),
        dropped_empty,
        manifest.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    scenes: usize,
    mean_pixel_accuracy: f64,
    global_pixel_accuracy: f64,
    per_class: Vec<ClassPr>,
    confusion: ConfusionMatrix,
}

#[derive(Serialize)]
struct ClassPr {
    class: String,
    precision: Option<f64>,
    recall: Option<f64>,
}

fn evaluate(manifest: &Path, pred_dir: &Path, format: Format) -> Result<()> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut gt_maps: Vec<LabelMap> = Vec::new();
    let mut pred_maps: Vec<LabelMap> = Vec::new();
    for entry in &entries {
        let image_path = base.join(&entry.image);
        let ann = read_annotations(&base.join(&entry.annotations))?;
        let image = read_image(&image_path)?;
        let merged = majority_vote(&rasterize_annotations(&ann, image.width, image.height).maps)?;
        let stem = Path::new(&entry.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let pred_path = pred_dir.join(format!("{stem}_labels.pgm"));
        let pred = read_label_map(&pred_path)?;
        gt_maps.push(merged);
        pred_maps.push(pred);
    }
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for (g, p) in gt_maps.iter().zip(&pred_maps) {
        cm.merge(&confusion_matrix(&g.labels, &p.labels, NUM_CLASSES)?);
    }
    let pr = precision_recall(&cm);
    let report = EvaluationReport {
        scenes: entries.len(),
        mean_pixel_accuracy: mean_pixel_accuracy(&gt_maps, &pred_maps)?,
        global_pixel_accuracy: global_pixel_accuracy(&gt_maps, &pred_maps)?,
        per_class: pr
            .iter()
            .enumerate()
            .map(|(c, &(p, r))| ClassPr {
                class: rubblemap::imaging::class_name(c as u8).to_string(),
                precision: p.map(|v| 100.0 * v),
                recall: r.map(|v| 100.0 * v),
            })
            .collect(),
        confusion: cm.clone(),
    };
    match format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serialization")
        ),
        Format::Table => {
            println!("scenes: {}", report.scenes);
            println!("mean pixel accuracy (damage classes): {:.2}%", report.mean_pixel_accuracy);
            println!("global pixel accuracy: {:.2}%", report.global_pixel_accuracy);
            for pc in &report.per_class {
                let f = |v: Option<f64>| match v {
                    Some(x) => format!("{x:.2}"),
                    None => "\u{2014}".into(),
                };
                println!(
                    "  {:<10} precision {:>8}  recall {:>8}",
                    pc.class,
                    f(pc.precision),
                    f(pc.recall)
                );
            }
            println!("{}", format_confusion_percent(&cm, false));
        }
    }
    Ok(())
}
