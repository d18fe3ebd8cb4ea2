//! The `fan` command line: corpus generation, training (with λ and
//! annotation-ratio sweeps), evaluation, receptive-field tables and
//! attention overlays.

pub mod checkpoint;
pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adcore::Size2;
use crate::corpus::{self, Dataset};
use crate::encoder::EncoderConfig;
use crate::error::{FanError, Result};
use crate::evalkit::{evaluate, DecodeMode, EvalReport};
use crate::model::FanModel;
use crate::netpbm::{self, GrayImage, RgbImage};
use crate::rfgeom::{Center, LayerStack};
use crate::train::{StepLog, Trainer};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "fan", version, about = "Focusing attention text recognizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus (PGM images plus a manifest).
    Gen(GenArgs),
    /// Train on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Receptive fields and centers of a layer stack.
    Rfcalc(RfcalcArgs),
    /// Draw attention centers over an image.
    Viz(VizArgs),
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `section.key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path (a directory when sweeping).
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Held-out corpus evaluated after training.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// `lambda=v1,v2,...` or `ratio=v1,v2,...`: one run per value.
    #[arg(long)]
    pub sweep: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Word list, one per line; switches to lexicon decoding.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Print the per-sample table as well.
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug)]
pub struct RfcalcArgs {
    /// Layer stack file (`conv|pool KWxKH SWxSH PWxPH` per line).
    #[arg(long, conflicts_with = "preset")]
    pub stack: Option<PathBuf>,
    /// Built-in encoder geometry: `toy` or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Input size `WxH`; overrides the stack file's `input` line.
    #[arg(long)]
    pub input: Option<String>,
    /// Output position `x,y` (1-indexed).
    #[arg(long, conflicts_with = "all")]
    pub pos: Option<String>,
    /// Every output column (full height).
    #[arg(long)]
    pub all: bool,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM image.
    #[arg(long)]
    pub image: PathBuf,
    /// Output PPM.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let result = run(cli.command, &mut stdout.lock());
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

/// Run one command, writing its report to `out`.
pub fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Rfcalc(a) => cmd_rfcalc(&a, out),
        Command::Viz(a) => cmd_viz(&a, out),
    }
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.load()?;
    let data = corpus::make_dataset(&cfg.corpus)?;
    data.write(&a.out)?;
    let annotated = data.samples.iter().filter(|s| s.annotated()).count();
    let _ = writeln!(
        out,
        "wrote {} samples ({annotated} annotated) to {}; crop {}x{} (WxH)",
        data.len(),
        a.out.display(),
        data.crop.w,
        data.crop.h
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let data = Dataset::read(dir)?;
    if data.is_empty() {
        return Err(FanError::Config(format!("{} holds no samples", dir.display())));
    }
    Ok(data)
}

/// Parse `name=v1,v2,...`.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| FanError::invalid(format!("sweep {spec:?} is not name=v1,v2,...")))?;
    if name != "lambda" && name != "ratio" {
        return Err(FanError::invalid(format!("can only sweep lambda or ratio, not {name:?}")));
    }
    let values: Vec<f64> = values
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| FanError::invalid(format!("bad sweep value {v:?}"))))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(FanError::invalid("empty sweep"));
    }
    Ok((name.to_string(), values))
}

/// Outcome of one training run.
pub struct RunSummary {
    pub last: Option<StepLog>,
    pub report: Option<EvalReport>,
}

/// Train from `cfg` (or a resumed checkpoint) on `data`, saving to `ckpt`.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    ckpt: &Path,
    resume: Option<Checkpoint>,
    held_out: Option<&Dataset>,
    out: &mut dyn Write,
) -> Result<RunSummary> {
    let (mut trainer, cfg) = match resume {
        Some(c) => {
            let mut t = Trainer::new(c.model, c.config.train.clone())?;
            if let Some(o) = c.opt {
                t.opt = o;
            }
            t.step = c.step;
            // step budget and logging follow the current command line
            let mut rc = c.config;
            rc.train.steps = cfg.train.steps;
            rc.train.log_every = cfg.train.log_every;
            rc.train.checkpoint_every = cfg.train.checkpoint_every;
            t.config = rc.train.clone();
            (t, rc)
        }
        None => {
            let mut model = FanModel::new(cfg.model.clone(), cfg.train.seed)?;
            if model.config.focus.crop.is_none() {
                model.set_crop(data.crop);
            }
            (Trainer::new(model, cfg.train.clone())?, cfg.clone())
        }
    };
    crate::train::check_dataset(&trainer.model, data)?;
    let mut last = None;
    let steps = cfg.train.steps;
    trainer.run(data, steps, |t, log| {
        let every = t.config.log_every.max(1);
        if log.step % every == 0 || t.step == steps {
            log::info!("{log}");
            let _ = writeln!(out, "{log}");
        }
        let ce = t.config.checkpoint_every;
        if ce > 0 && t.step % ce == 0 {
            checkpoint::save(ckpt, &cfg, &t.model, Some(&t.opt), t.step)?;
        }
        last = Some(*log);
        Ok(())
    })?;
    checkpoint::save(ckpt, &cfg, &trainer.model, Some(&trainer.opt), trainer.step)?;
    let report = match held_out {
        Some(h) => Some(evaluate(&trainer.model, h, &DecodeMode::Free)?),
        None => None,
    };
    Ok(RunSummary { last, report })
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.load()?;
    let data = load_dataset(&a.data)?;
    let held_out = a.eval.as_deref().map(load_dataset).transpose()?;
    let Some(spec) = &a.sweep else {
        let resume = a.resume.as_deref().map(checkpoint::load).transpose()?;
        let s = train_run(&cfg, &data, &a.out, resume, held_out.as_ref(), out)?;
        if let Some(r) = s.report {
            let _ = out.write_all(r.metric_lines().as_bytes());
        }
        return Ok(());
    };
    if a.resume.is_some() {
        return Err(FanError::invalid("--resume cannot be combined with --sweep"));
    }
    let (name, values) = parse_sweep(spec)?;
    fs::create_dir_all(&a.out).map_err(|e| FanError::io(&a.out, e))?;
    let mut rows = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        let run_data = if name == "lambda" {
            c.set("focus.lambda", &v.to_string())?;
            data.clone()
        } else {
            c.set("corpus.ratio", &v.to_string())?;
            reannotate(&data, v)?
        };
        let path = a.out.join(format!("{name}_{v}.ckpt"));
        let _ = writeln!(out, "# {name}={v}");
        let s = train_run(&c, &run_data, &path, None, held_out.as_ref(), out)?;
        rows.push((v, s));
    }
    let _ = out.write_all(sweep_table(&name, &rows).as_bytes());
    Ok(())
}

/// The same corpus with `floor(ratio · N)` samples annotated, regenerated
/// from the corpus settings echoed in its manifest.
pub fn reannotate(data: &Dataset, ratio: f64) -> Result<Dataset> {
    let mut cc = corpus::CorpusConfig::default();
    let mut seen = 0;
    for (k, v) in &data.header {
        if let Some(key) = k.strip_prefix("corpus.") {
            cc.set(key, v)?;
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(FanError::Config(
            "a ratio sweep needs a generated corpus (manifest has no corpus settings)".into(),
        ));
    }
    cc.ratio = ratio;
    let mut fresh = corpus::make_dataset(&cc)?;
    if fresh.samples.iter().map(|s| &s.image).ne(data.samples.iter().map(|s| &s.image)) {
        return Err(FanError::Config("manifest settings do not reproduce the corpus images".into()));
    }
    // keep the crop size of the full corpus so runs stay comparable
    fresh.crop = data.crop;
    Ok(fresh)
}

pub fn sweep_table(name: &str, rows: &[(f64, RunSummary)]) -> String {
    let mut s = format!(
        "{name:>8}  {:>9} {:>9} {:>9}  {:>8} {:>9} {:>10}\n",
        "l_att", "l_focus", "loss", "accuracy", "total_ned", "center_err"
    );
    for (v, r) in rows {
        let (la, lf, lt) = r
            .last
            .map_or((f64::NAN, f64::NAN, f64::NAN), |l| (l.attention, l.focusing, l.total));
        let (acc, ned) = r.report.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.accuracy, r.total_ned));
        // no emitted character overlaps an annotated one: nothing to measure
        let ce = r
            .report
            .as_ref()
            .and_then(|r| r.mean_center_error)
            .map_or("-".to_string(), |e| format!("{e:.3}"));
        let _ = writeln!(
            s,
            "{v:>8}  {la:>9.4} {lf:>9.4} {lt:>9.4}  {acc:>8.4} {ned:>9.3} {ce:>10}"
        );
    }
    s
}

pub fn read_lexicon(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| FanError::io(path, e))?;
    let words: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_ascii_uppercase())
        .filter(|l| !l.is_empty())
        .collect();
    if words.is_empty() {
        return Err(FanError::invalid(format!("lexicon {} is empty", path.display())));
    }
    Ok(words)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let lexicon = a
        .lexicon
        .clone()
        .or(ck.config.eval.lexicon.clone())
        .map(|p| read_lexicon(&p))
        .transpose()?;
    let data = load_dataset(&a.data)?;
    for s in &data.samples {
        if let Err(e) = ck.model.alphabet.encode(&s.text) {
            return Err(FanError::Config(format!("dataset does not fit the checkpoint alphabet: {e}")));
        }
    }
    let size = data.image_size().expect("non-empty");
    if size != ck.model.input_size() {
        return Err(FanError::Config(format!(
            "dataset images are {}x{} (WxH), checkpoint expects {}x{}",
            size.w,
            size.h,
            ck.model.input_size().w,
            ck.model.input_size().h
        )));
    }
    let mode = lexicon.map_or(DecodeMode::Free, DecodeMode::Lexicon);
    let report = evaluate(&ck.model, &data, &mode)?;
    if a.table {
        let _ = out.write_all(report.table().as_bytes());
    } else {
        let _ = out.write_all(report.metric_lines().as_bytes());
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<Size2> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| FanError::invalid(format!("size {s:?} is not WxH")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| FanError::invalid(format!("size {s:?} is not WxH")));
    let size = Size2::new(p(h)?, p(w)?);
    if size.h == 0 || size.w == 0 {
        return Err(FanError::invalid("input size must be positive"));
    }
    Ok(size)
}

pub fn cmd_rfcalc(a: &RfcalcArgs, out: &mut dyn Write) -> Result<()> {
    let (stack, file_input) = match (&a.stack, &a.preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| FanError::io(p, e))?;
            LayerStack::parse(&text)?
        }
        (None, Some(name)) => {
            let e = EncoderConfig::preset(name)?;
            (e.layer_stack(), Some(e.input))
        }
        (None, None) => return Err(FanError::invalid("give --stack FILE or --preset NAME")),
    };
    let input = match &a.input {
        Some(s) => parse_size(s)?,
        None => file_input.ok_or_else(|| FanError::invalid("input size unknown: add an `input WxH` line or --input"))?,
    };
    let output = stack.output_size(input)?;
    let _ = writeln!(
        out,
        "# input {}x{} -> output {}x{}, net stride {}x{}",
        input.w,
        input.h,
        output.w,
        output.h,
        stack.net_stride().w,
        stack.net_stride().h
    );
    let _ = writeln!(out, "{:>5} {:>5}  {:>6} {:>6} {:>6} {:>6}  {:>8} {:>8}", "x", "y", "x_min", "x_max", "y_min", "y_max", "cx", "cy");
    let row = |out: &mut dyn Write, x: String, y: String, b: crate::rfgeom::BBox| {
        let c = b.center();
        let _ = writeln!(
            out,
            "{x:>5} {y:>5}  {:>6} {:>6} {:>6} {:>6}  {:>8} {:>8}",
            b.x_min, b.x_max, b.y_min, b.y_max, c.x, c.y
        );
    };
    if a.all {
        for j in 1..=output.w {
            let b = stack.column_field(j, input)?;
            row(out, j.to_string(), "*".into(), b);
        }
    } else {
        let pos = a.pos.as_deref().ok_or_else(|| FanError::invalid("give --pos X[,Y] or --all"))?;
        let mut it = pos.split(',').map(|v| v.trim().parse::<i64>());
        let x = it.next().and_then(|v| v.ok());
        let y = it.next().map_or(Some(1), |v| v.ok());
        let (Some(x), Some(y), None) = (x, y, it.next()) else {
            return Err(FanError::invalid(format!("position {pos:?} is not X or X,Y")));
        };
        let b = stack.receptive_field(x, y, input)?;
        row(out, x.to_string(), y.to_string(), b);
    }
    Ok(())
}

/// Marker positions (rounded, clipped into the image) for 0-indexed centers.
pub fn marker_positions(centers: &[Center], width: usize, height: usize) -> Vec<(i64, i64)> {
    centers
        .iter()
        .map(|c| {
            (
                crate::rfgeom::round_half_up(c.x).clamp(0, width as i64 - 1),
                crate::rfgeom::round_half_up(c.y).clamp(0, height as i64 - 1),
            )
        })
        .collect()
}

/// The image in gray with a red `+` at each marker; arms beyond the border
/// are dropped.
pub fn draw_overlay(image: &GrayImage, markers: &[(i64, i64)]) -> RgbImage {
    let mut rgb = RgbImage::from_gray(image);
    for &(x, y) in markers {
        for d in -2..=2 {
            rgb.put(x + d, y, [255, 0, 0]);
            rgb.put(x, y + d, [255, 0, 0]);
        }
    }
    rgb
}

pub fn cmd_viz(a: &VizArgs, out: &mut dyn Write) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let image = netpbm::read_pgm(&a.image)?;
    let rec = ck.model.recognize(&image)?;
    let markers = marker_positions(&rec.centers, image.width, image.height);
    netpbm::write_ppm(&a.out, &draw_overlay(&image, &markers))?;
    let _ = writeln!(out, "text={}", rec.text);
    for (i, (c, m)) in rec.centers.iter().zip(&markers).enumerate() {
        let _ = writeln!(out, "step={} center={:.2},{:.2} marker={},{}", i + 1, c.x, c.y, m.0, m.1);
    }
    Ok(())
}
