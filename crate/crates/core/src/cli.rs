//! `ccdnet` command line: train, eval, fuse, convert, synth, plot.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::cadd::lcm::{extract_nine_regions, patch_grids};
use crate::checkpoint::Checkpoint;
use crate::config::{check_device, parse_overrides, set_path, RunConfig, DEVICE_ENV};
use crate::data::{
    load_split, mask_to_boxes, read_png, read_voc_xml, soft_mask_to_boxes, write_synth_dataset,
    write_voc_xml, BinaryMask, Detection, IrImage, Sample, SynthDatasetConfig, VocDocument,
    VocObject,
};
use crate::error::{Error, Result};
use crate::eval::detect_all;
use crate::metrics::{format_key_values, format_table, match_image, MatchCriterion, MatchReport};
use crate::model::{self, complexity_report, fuse_model, verify_fusion};
use crate::plot;
use crate::train::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OPERATIONAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ccdnet", version, about = "Infrared small-target detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Heatmap,
    Lcm3d,
    Boxes,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a TOML run config; trailing `--key value` pairs override it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint (fused automatically) on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Run config supplying evaluation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        score_thresh: Option<f64>,
        /// IoU needed for a match.
        #[arg(long)]
        iou: Option<f64>,
        /// Match when the detection centre falls inside the GT box.
        #[arg(long, conflicts_with = "iou")]
        center_hit: bool,
        /// Write detections as `image_id,x_min,y_min,x_max,y_max,score`.
        #[arg(long)]
        dets_csv: Option<PathBuf>,
        /// Write one VOC file with scores per image.
        #[arg(long)]
        xml_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        timed_runs: usize,
    },
    /// Fold every WMP block into one 3x3 convolution and verify it.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 64)]
        probe_size: usize,
    },
    /// Convert mask PNGs to VOC annotation files.
    Convert {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Binarise with Otsu's threshold instead of "non-zero".
        #[arg(long)]
        soft: bool,
    },
    /// Generate a synthetic dataset with train/test split.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Render a heatmap, LCM surfaces or a box overlay.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// Feature map for heatmaps.
        #[arg(long, default_value = "backbone.f4")]
        layer: String,
        /// VOC file with ground truth (required for lcm3d).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Pyramid level (1-4) for lcm3d.
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
    },
}

/// Parses arguments, runs the command, and maps errors to exit codes.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_OPERATIONAL,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    if let Ok(dev) = std::env::var(DEVICE_ENV) {
        check_device(&dev)?;
    }
    match cmd {
        Command::Train { config, overrides } => cmd_train(config.as_deref(), &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
            score_thresh,
            iou,
            center_hit,
            dets_csv,
            xml_dir,
            timed_runs,
        } => {
            let mut cfg = RunConfig::load(config.as_deref(), &[])?;
            if let Some(t) = score_thresh {
                cfg.eval.score_thresh = t;
            }
            if center_hit {
                cfg.eval.criterion = MatchCriterion::CenterHit;
            } else if let Some(t) = iou {
                cfg.eval.criterion = MatchCriterion::Iou(t);
            }
            let text = cmd_eval(
                &checkpoint,
                &data,
                &split,
                &cfg,
                dets_csv.as_deref(),
                xml_dir.as_deref(),
                timed_runs,
            )?;
            print!("{text}");
            Ok(())
        }
        Command::Fuse {
            input,
            output,
            tolerance,
            probe_size,
        } => cmd_fuse(&input, &output, tolerance, probe_size).map(|r| print!("{r}")),
        Command::Convert { masks, out, soft } => cmd_convert(&masks, &out, soft),
        Command::Synth {
            config,
            out,
            overrides,
        } => cmd_synth(config.as_deref(), &out, &overrides),
        Command::Plot {
            checkpoint,
            image,
            kind,
            out,
            layer,
            annotations,
            level,
            score_thresh,
        } => cmd_plot(
            &checkpoint,
            &image,
            kind,
            &out,
            &layer,
            annotations.as_deref(),
            level,
            score_thresh,
        ),
    }
}

pub fn cmd_train(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config, &parse_overrides(overrides)?)?;
    let data = load_split(&cfg.data_dir, "train")?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    log::info!(
        "training on {} images for {} epochs",
        data.len(),
        cfg.epochs
    );
    let out = train(&cfg, &data, Some(&cfg.out_dir))?;
    println!(
        "trained {} steps; final epoch loss {:.5}; checkpoint {}",
        out.rows.len(),
        out.epoch_loss.last().copied().unwrap_or(f64::NAN),
        out.final_checkpoint
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

/// Runs fused inference over a split and returns the metric report text.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    cfg: &RunConfig,
    dets_csv: Option<&Path>,
    xml_dir: Option<&Path>,
    timed_runs: usize,
) -> Result<String> {
    let ck = load_checkpoint(checkpoint)?;
    let samples = load_split(data, split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "split {split:?} of {} is empty",
            data.display()
        )));
    }
    let store = if ck.is_fused() {
        ck.store.clone()
    } else {
        eprintln!("notice: checkpoint is in training mode; fusing before evaluation");
        model::fuse_f32(&ck.config, &ck.store)?
    };
    let dets = detect_all(&ck.config, &store, &samples, &cfg.eval)?;
    let mut report = MatchReport::default();
    for (s, d) in samples.iter().zip(&dets) {
        report.merge(&match_image(&s.id, d, &s.boxes, cfg.eval.criterion));
    }
    if let Some(p) = dets_csv {
        write_detections_csv(p, &samples, &dets)?;
    }
    if let Some(dir) = xml_dir {
        fs::create_dir_all(dir)?;
        for (s, d) in samples.iter().zip(&dets) {
            let mut doc = VocDocument::new(format!("{}.png", s.id), s.image.width, s.image.height);
            doc.objects = d
                .iter()
                .map(|d| VocObject {
                    name: crate::data::voc::TARGET_CLASS.into(),
                    bbox: d.bbox,
                    score: Some(d.score),
                })
                .collect();
            write_voc_xml(&doc, &dir.join(format!("{}.xml", s.id)))?;
        }
    }
    let (w, h) = (samples[0].image.width, samples[0].image.height);
    let cx = complexity_report(&ck.config, &store, h, w, 10, timed_runs.max(50))?;
    let mut text = format_table(&report, cfg.eval.criterion);
    text.push('\n');
    text.push_str(&format_key_values(&report, cfg.eval.criterion));
    text.push_str(&format!(
        "images={}\nscore_thresh={}\n",
        samples.len(),
        cfg.eval.score_thresh
    ));
    text.push_str(&cx.key_values());
    Ok(text)
}

pub fn write_detections_csv(
    path: &Path,
    samples: &[Sample],
    dets: &[Vec<Detection>],
) -> Result<()> {
    let mut s = String::from("image_id,x_min,y_min,x_max,y_max,score\n");
    for (sm, ds) in samples.iter().zip(dets) {
        for d in ds {
            let b = d.bbox;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                sm.id, b.x_min, b.y_min, b.x_max, b.y_max, d.score
            );
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Fuses a training checkpoint and checks it against the original; writes
/// `output` only when every deviation is within `tolerance`.
pub fn cmd_fuse(input: &Path, output: &Path, tolerance: f64, probe_size: usize) -> Result<String> {
    let ck = load_checkpoint(input)?;
    if ck.is_fused() {
        return Ok(format!(
            "notice: {} is already fused; nothing to do\n",
            input.display()
        ));
    }
    // exp() in the regression branch magnifies f32 rounding, so the
    // equivalence is checked in f64
    let wide = ck.store.cast::<f64>();
    let fused_wide = fuse_model(&ck.config, &wide)?;
    let report = verify_fusion(&ck.config, &wide, &fused_wide, probe_size, ck.meta.seed)?;
    let fused = fused_wide.cast::<f32>();
    let mut text = String::new();
    for b in &report.blocks {
        let _ = writeln!(
            text,
            "{:<24} max |train - fused| = {:.3e}",
            b.name, b.max_abs
        );
    }
    let _ = writeln!(
        text,
        "{:<24} max |train - fused| = {:.3e}",
        "end-to-end", report.end_to_end
    );
    let _ = writeln!(
        text,
        "params {} -> {}",
        model::param_count(&ck.store),
        model::param_count(&fused)
    );
    if !report.passes(tolerance) {
        return Err(Error::InvalidStructure(format!(
            "fusion deviation above tolerance {tolerance:e}; no checkpoint written\n{text}"
        )));
    }
    Checkpoint::new(ck.config.clone(), ck.meta.clone(), fused).save(output)?;
    let _ = writeln!(text, "wrote {}", output.display());
    Ok(text)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

pub fn mask_boxes(img: &IrImage, soft: bool) -> Result<Vec<crate::data::BBox>> {
    if soft {
        let vals: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
        soft_mask_to_boxes(img.width, img.height, &vals)
    } else {
        let m = BinaryMask::new(
            img.width,
            img.height,
            img.data.iter().map(|&v| v > 0.0).collect(),
        )?;
        Ok(mask_to_boxes(&m))
    }
}

/// Converts every PNG in `masks`; failures are reported per file and make
/// the command fail after the rest are done.
pub fn cmd_convert(masks: &Path, out: &Path, soft: bool) -> Result<()> {
    let files = png_files(masks)?;
    fs::create_dir_all(out)?;
    let mut failed = 0usize;
    for f in &files {
        let res = read_png(f).and_then(|img| {
            let boxes = mask_boxes(&img, soft)?;
            let name = f
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let stem = f
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let doc = VocDocument::with_boxes(name, img.width, img.height, &boxes);
            write_voc_xml(&doc, &out.join(format!("{stem}.xml")))?;
            Ok(boxes.len())
        });
        match res {
            Ok(n) => log::info!("{}: {n} boxes", f.display()),
            Err(e) => {
                eprintln!("error: {}: {e}", f.display());
                failed += 1;
            }
        }
    }
    println!(
        "converted {} of {} masks",
        files.len() - failed,
        files.len()
    );
    if failed > 0 {
        return Err(Error::Data(format!("{failed} mask(s) failed to convert")));
    }
    Ok(())
}

pub fn load_synth_config(
    config: Option<&Path>,
    overrides: &[String],
) -> Result<SynthDatasetConfig> {
    let mut table = match config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for (k, v) in parse_overrides(overrides)? {
        set_path(&mut table, &k, &v)?;
    }
    let cfg: SynthDatasetConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.scene.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(config: Option<&Path>, out: &Path, overrides: &[String]) -> Result<()> {
    let cfg = load_synth_config(config, overrides)?;
    let (tr, te) = write_synth_dataset(&cfg, out)?;
    println!("wrote {tr} train and {te} test images to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_plot(
    checkpoint: &Path,
    image: &Path,
    kind: PlotKind,
    out: &Path,
    layer: &str,
    annotations: Option<&Path>,
    level: usize,
    score_thresh: f64,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let img = read_png(image)?;
    let x = img.to_tensor::<f32>();
    let gts = match annotations {
        Some(p) => read_voc_xml(p)?.boxes(),
        None => Vec::new(),
    };
    let canvas = match kind {
        PlotKind::Heatmap => {
            let f = model::named_feature(&ck.config, &ck.store, &x, layer)?;
            plot::render_heatmap(&f, img.width, img.height)?
        }
        PlotKind::Boxes => {
            let dets = model::detect(&ck.config, &ck.store, &x, score_thresh, 0.5)?;
            plot::render_boxes(&img, &gts, &dets[0])
        }
        PlotKind::Lcm3d => {
            if ck.is_fused() {
                return Err(Error::Config(
                    "lcm3d needs a training-mode checkpoint (CaDD parameters)".into(),
                ));
            }
            if !(1..=4).contains(&level) {
                return Err(Error::Config(format!("level must be 1-4, got {level}")));
            }
            if gts.is_empty() {
                return Err(Error::Config(
                    "lcm3d needs --annotations with at least one box".into(),
                ));
            }
            let f = model::named_feature(&ck.config, &ck.store, &x, &format!("backbone.f{level}"))?;
            let (_, _, fh, fw) = f.dims4();
            let stride = ck.config.strides()[level - 1];
            let patch = extract_nine_regions(
                fh,
                fw,
                &gts,
                0,
                stride,
                level - 1,
                0,
                crate::cadd::LossWeights::default().neighbor_iou,
            )
            .ok_or_else(|| Error::Data("first annotation does not map onto the level".into()))?;
            let (p_in, p_out) = patch_grids(&ck.store, &f, &patch)?;
            plot::render_surfaces(&p_in, &p_out)?
        }
    };
    canvas.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}
