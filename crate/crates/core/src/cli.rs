//! `fcrseg` command line: `train`, `predict`, `eval`, `synth`, `color-check`
//! and `report`.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::activation::alpha_at;
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, four_colorable};
use crate::imgdata::{
    load_bbbc006, normalize, read_dataset, read_image, read_labels, resize_bilinear, resize_labels, synth_blobs,
    write_dataset, write_labels, DatasetSplit, LabelImage, RawImage,
};
use crate::metrics::EvalReport;
use crate::net::{load_checkpoint, save_checkpoint};
use crate::net::{build, forward};
use crate::postprocess::{postprocess, InstanceResult};
use crate::trainer::{train_from, Event};

#[derive(Parser, Debug)]
#[command(name = "fcrseg", version, about = "Four-colour instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network; writes config.txt, train.log and checkpoints to the run directory.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic blob dataset.
    Synth(SynthArgs),
    /// Check whether a label map's adjacency graph is K-colourable.
    ColorCheck(ColorCheckArgs),
    /// Print a results table row from an eval CSV and a checkpoint.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Start from a preset (`desk` or `paper`).
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Flat `key = value` config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dataset root (sets `data_root`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (sets `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config supplying postprocess settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Also write colour overlays to `<out>/overlay`.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 250)]
    n: usize,
    /// Square image side; overridden by --height/--width.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ColorCheckArgs {
    /// Label PNG.
    labels: PathBuf,
    #[arg(long, default_value_t = crate::graph::DEFAULT_RADIUS)]
    radius: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Leave the background pseudo-object out of the graph.
    #[arg(long)]
    no_background: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Eval CSV with a `mean` row.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Runs the CLI and returns the process exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ColorCheck(a) => cmd_color_check(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("fcrseg: {e}");
            1
        }
    }
}

/// `FCRSEG_THREADS` caps the rayon pool.
fn init_threads() {
    if let Some(n) = std::env::var("FCRSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process (tests) finds the pool already built
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k, v)?;
    }
    Ok(())
}

/// Loads the dataset a run config points at.
pub fn load_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    let root = || {
        cfg.data
            .root
            .clone()
            .ok_or_else(|| Error::Config("data_root is not set".into()))
    };
    match cfg.data.source {
        DataSource::Synth => synth_blobs(
            cfg.data.synth_count,
            cfg.net.input_size,
            cfg.data.synth_density,
            cfg.data.synth_seed,
        ),
        DataSource::Manifest => read_dataset(&root()?),
        DataSource::Bbbc006 => load_bbbc006(&root()?, cfg.data.focal_plane),
    }
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::preset(&a.preset)?;
    if let Some(p) = &a.config {
        cfg.apply_file(p)?;
    }
    if let Some(d) = a.data {
        cfg.data.root = Some(d);
        if cfg.data.source == DataSource::Synth {
            cfg.data.source = DataSource::Manifest;
        }
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    apply_sets(&mut cfg, &a.sets)?;
    cfg.net.validate()?;
    cfg.train.validate()?;

    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let data = load_data(&cfg)?;
    eprintln!("data: {} train, {} eval", data.train.len(), data.eval.len());
    let model = match &a.resume {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.config != cfg.net {
                return Err(Error::Config("checkpoint network config differs from run config".into()));
            }
            m
        }
        None => build(&cfg.net, cfg.train.seed)?,
    };
    eprintln!("parameters: {}", model.num_parameters());

    let log_path = out.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let outcome = train_from(model, &data, &cfg.train, &mut |ev| match ev {
        Event::Epoch(e) => {
            if let Err(err) = writeln!(log, "{}", e.line()) {
                io_err.get_or_insert(err);
            }
            eprintln!("epoch {}", e.line());
        }
        Event::Eval(epoch, r) => eprintln!(
            "eval epoch {epoch}: dice2 {:.4} aji {:.4} f1 {:.4} pq {:.4}",
            r.means.dice2, r.means.aji, r.means.f1, r.means.pq
        ),
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    save_checkpoint(&out.join("last.ckpt"), &outcome.last)?;
    if let Some((best, aji)) = &outcome.best {
        save_checkpoint(&out.join("best.ckpt"), best)?;
        let best_epoch = best.epoch.saturating_sub(1);
        if let Some((_, report)) = outcome.evals.iter().find(|(e, _)| *e == best_epoch) {
            report.write_csv(&out.join("eval.csv"))?;
        }
        eprintln!("best eval AJI {aji:.4} at epoch {best_epoch}");
    }
    Ok(0)
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|x| x.to_str()).map(|x| x.to_ascii_lowercase()).as_deref(),
                Some("png" | "tif" | "tiff")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

const OVERLAY_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Grey image with each instance tinted by its channel colour.
fn write_overlay(path: &Path, img: &RawImage, inst: &InstanceResult) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let (lo, hi) = img
        .pixels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = ((img.get(y, x) - lo) / span * 255.0) as f32;
            let id = inst.labels.get(y, x);
            let px = if id == 0 {
                [g as u8; 3]
            } else {
                let c = OVERLAY_COLORS[inst.channel_of[id as usize - 1] % OVERLAY_COLORS.len()];
                c.map(|c| (0.5 * g + 0.5 * c as f32) as u8)
            };
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(path).map_err(|e| Error::image(path, e))
}

fn cmd_predict(a: PredictArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p)?;
    }
    apply_sets(&mut cfg, &a.sets)?;
    // argmax is unchanged by α, so any schedule value gives the same labels
    let alpha = alpha_at(&cfg.train.alpha_schedule, model.epoch.saturating_sub(1));
    let files = image_files(&a.input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no images in {}", a.input.display())));
    }
    let lbl_dir = a.out.join("labels");
    fs::create_dir_all(&lbl_dir).map_err(|e| Error::io(&lbl_dir, e))?;
    let ov_dir = a.out.join("overlay");
    if a.overlay {
        fs::create_dir_all(&ov_dir).map_err(|e| Error::io(&ov_dir, e))?;
    }
    let (h, w) = model.config.input_size;
    for f in &files {
        let img = read_image(f)?;
        let resized = resize_bilinear(&img, h, w);
        let emb = forward(&model, &normalize(&resized), alpha)?;
        let inst = postprocess(&emb, &cfg.train.postprocess);
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = format!("{stem}.png");
        let full = if (img.height(), img.width()) == (h, w) {
            inst.labels.clone()
        } else {
            resize_labels(&inst.labels, img.height(), img.width())
        };
        write_labels(&lbl_dir.join(&name), &full)?;
        if a.overlay {
            write_overlay(&ov_dir.join(&name), &resized, &inst)?;
        }
        println!("{name}: {} instances", full.num_instances());
    }
    Ok(0)
}

fn label_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    Ok(image_files(dir)?
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (stem, p)
        })
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let preds = label_files(&a.pred)?;
    let gts: std::collections::BTreeMap<String, PathBuf> = label_files(&a.gt)?.into_iter().collect();
    let mut pairs: Vec<(String, LabelImage, LabelImage)> = Vec::new();
    for (name, p) in preds {
        let Some(g) = gts.get(&name) else {
            return Err(Error::Data(format!("no ground truth for {name}")));
        };
        pairs.push((name, read_labels(&p)?, crate::imgdata::canonical_labels(&read_labels(g)?)));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no label maps in {}", a.pred.display())));
    }
    let report = EvalReport::evaluate(pairs.iter().map(|(n, p, g)| (n.clone(), p, g)))?;
    if let Some(path) = &a.report {
        report.write_csv(path)?;
    }
    let m = &report.means;
    println!(
        "mean over {} images: dice2 {:.4} aji {:.4} f1 {:.4} pq {:.4}",
        report.per_image.len(),
        m.dice2,
        m.aji,
        m.f1,
        m.pq
    );
    Ok(0)
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let size = (a.height.unwrap_or(a.size), a.width.unwrap_or(a.size));
    let data = synth_blobs(a.n, size, a.density, a.seed)?;
    write_dataset(&a.out, &data)?;
    println!(
        "wrote {} train + {} eval images to {}",
        data.train.len(),
        data.eval.len(),
        a.out.display()
    );
    Ok(0)
}

fn cmd_color_check(a: ColorCheckArgs) -> Result<i32> {
    let lbl = crate::imgdata::canonical_labels(&read_labels(&a.labels)?);
    let g = build_adjacency(&lbl, a.radius, !a.no_background)?;
    println!("objects: {}", lbl.num_instances());
    println!("edges: {}", g.edge_count());
    match four_colorable(&g, a.k)? {
        Some(_) => {
            println!("{}-colourable: yes", a.k);
            Ok(0)
        }
        None => {
            println!("{}-colourable: no", a.k);
            Ok(1)
        }
    }
}

/// Header and one row: Dice2, AJI, F1-score, PQ, #Parameters.
pub fn report_table(report: &EvalReport, num_parameters: usize) -> String {
    let m = &report.means;
    format!(
        "| Dice2 | AJI | F1-score | PQ | #Parameters |\n\
         |---|---|---|---|---|\n\
         | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
        m.dice2, m.aji, m.f1, m.pq, num_parameters
    )
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let report = EvalReport::read_csv(&a.eval)?;
    let model = load_checkpoint(&a.checkpoint)?;
    print!("{}", report_table(&report, model.num_parameters()));
    Ok(0)
}
