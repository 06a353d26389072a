//! Command-line surface: `synth`, `mask`, `inpaint`, `eval`, `nullspace`,
//! `gradcheck` and `plot`.
//!
//! [`run`] parses arguments, executes one command and returns the process
//! exit code; output goes to the supplied writers so the whole surface is
//! testable in-process.

mod config;

pub use config::{InpaintOverrides, InpaintSettings, KvConfig, INPAINT_KEYS, META_PREFIX};

use std::ffi::OsString;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::diffcore::gradcheck::op_suite;
use crate::error::{Error, Result};
use crate::hsio::{self, CubeSpec, HsiCube, MaskKind, SpatialMask};
use crate::model::{full_model_gradcheck, save_checkpoint, AttentionMode};
use crate::operators::{apply_mask, nullspace_coverage, CoverageReport, GroupAction, GroupConfig};
use crate::trainer::{loss_gradcheck, train_with_progress, TrainOutcome};
use crate::metrics;
use config::read_input;

/// Exit code when a verification command ran but a check failed.
pub const EXIT_CHECK_FAILED: i32 = 1;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  a verification check failed (gradcheck)
  2  configuration, usage or format error, including missing input files
  3  training diverged (non-finite loss)
  4  I/O error while reading or writing an existing path";

#[derive(Debug, Parser)]
#[command(
    name = "hyperei",
    version,
    about = "Self-supervised hyperspectral inpainting with equivariant imaging",
    after_help = EXIT_CODES
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic low-rank cube.
    Synth(SynthArgs),
    /// Build a spatial mask.
    Mask(MaskArgs),
    /// Train on a masked cube and write the inpainted result.
    Inpaint(Box<InpaintArgs>),
    /// Per-band PSNR/SSIM of a reconstruction against a reference.
    Eval(EvalArgs),
    /// Rank of the stacked virtual operators of a mask under shift actions.
    Nullspace(NullspaceArgs),
    /// Finite-difference gradient checks of every op, the model and the loss.
    Gradcheck(GradcheckArgs),
    /// Render one band (grayscale) or three bands (false color) as PNG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Height in pixels.
    #[arg(long)]
    h: usize,
    /// Width in pixels.
    #[arg(long)]
    w: usize,
    /// Number of bands.
    #[arg(long)]
    c: usize,
    /// Spectral mixing rank (at most the band count).
    #[arg(long)]
    rank: usize,
    /// Gaussian blur sigma of the abundance maps, in pixels.
    #[arg(long, default_value_t = 2.0)]
    smoothness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output cube path.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskKindArg {
    Stripe,
    Rect,
    Random,
}

#[derive(Debug, Args)]
struct MaskArgs {
    /// Mask family.
    kind: MaskKindArg,
    /// Height in pixels (or use --like).
    #[arg(long)]
    h: Option<usize>,
    /// Width in pixels (or use --like).
    #[arg(long)]
    w: Option<usize>,
    /// Take height and width from this cube.
    #[arg(long)]
    like: Option<PathBuf>,
    /// Stripe column ranges START:END (end exclusive), comma separated.
    #[arg(long, value_delimiter = ',')]
    cols: Vec<String>,
    /// Rectangle TOP,LEFT,HEIGHT,WIDTH.
    #[arg(long, value_delimiter = ',')]
    rect: Vec<usize>,
    /// Fraction of pixels to remove for random masks.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output mask path.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InpaintArgs {
    /// Cube to inpaint; the mask is applied to it before training.
    #[arg(long)]
    cube: Option<PathBuf>,
    /// Observation mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Optional clean cube, used only for progress MPSNR.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Directory receiving x_hat.hsc, history.csv, manifest.txt and model.hei.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// key = value config file (a previous manifest works); flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight of the equivariance term [default: 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Adam learning rate [default: 0.01].
    #[arg(long)]
    lr: Option<f64>,
    /// Number of optimization steps [default: 2000].
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed of the group-action sampler [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the weight initialization [default: --seed].
    #[arg(long)]
    model_seed: Option<u64>,
    /// Shift offsets are drawn from 0..T in each direction [default: 7].
    #[arg(long)]
    group_size: Option<usize>,
    /// Record history every N iterations [default: 1].
    #[arg(long)]
    log_every: Option<usize>,
    /// Replace observed pixels of the output by the measurement [default: true].
    #[arg(long)]
    data_consistency: Option<bool>,
    /// Channels of the first encoder stage [default: 32].
    #[arg(long)]
    base_channels: Option<usize>,
    /// Number of encoder stages [default: 3].
    #[arg(long)]
    depth: Option<usize>,
    /// Bottleneck width K of channel attention [default: 4].
    #[arg(long)]
    attention_rank: Option<usize>,
    /// Attention on the skip paths: none, spatial, spectral or both [default: both].
    #[arg(long)]
    attention_mode: Option<AttentionMode>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Reconstructed cube.
    #[arg(long)]
    x_hat: PathBuf,
    /// Ground-truth cube.
    #[arg(long)]
    reference: PathBuf,
    /// Restrict PSNR to the pixels this mask marks missing (SSIM stays full-frame).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Write the per-band CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NullspaceArgs {
    /// Mask file (or use --h/--w/--cols for a stripe mask).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    /// Stripe column ranges START:END, comma separated.
    #[arg(long, value_delimiter = ',')]
    cols: Vec<String>,
    /// Use every non-identity shift with offsets in 0..T [default: 7].
    #[arg(long)]
    group_size: Option<usize>,
    /// Explicit actions "DX,DY;DX,DY;..." instead of the whole group.
    #[arg(long)]
    actions: Option<String>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Cube to render.
    #[arg(long)]
    cube: PathBuf,
    /// Band for a grayscale image.
    #[arg(long, conflicts_with = "rgb", required_unless_present = "rgb")]
    band: Option<usize>,
    /// Bands R,G,B for a false-color image.
    #[arg(long, value_delimiter = ',')]
    rgb: Vec<usize>,
    /// Output PNG path.
    #[arg(short, long)]
    out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors are reported on `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Mask(a) => cmd_mask(&a, out),
        Command::Inpaint(a) => cmd_inpaint(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Nullspace(a) => cmd_nullspace(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Plot(a) => cmd_plot(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn load_cube(path: &Path) -> Result<HsiCube> {
    hsio::decode_cube(&read_input(path)?)
}

fn load_mask(path: &Path) -> Result<SpatialMask> {
    hsio::decode_mask(&read_input(path)?)
}

fn parse_ranges(specs: &[String]) -> Result<Vec<Range<usize>>> {
    specs
        .iter()
        .map(|s| {
            let (a, b) = s
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("column range {s:?} must look like START:END")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("column range {s:?}: {v:?} is not a column index")))
            };
            Ok(parse(a)?..parse(b)?)
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = CubeSpec {
        smoothness: a.smoothness,
        ..CubeSpec::new(a.h, a.w, a.c, a.rank, a.seed)
    };
    let cube = hsio::synth_cube(&spec)?;
    hsio::save_cube(&cube, &a.out)?;
    emit(out, format_args!("wrote {}x{}x{} cube to {}\n", a.h, a.w, a.c, a.out.display()))?;
    Ok(0)
}

fn cmd_mask(a: &MaskArgs, out: &mut dyn Write) -> Result<i32> {
    let (h, w) = match (&a.like, a.h, a.w) {
        (Some(p), None, None) => {
            let c = load_cube(p)?;
            (c.height(), c.width())
        }
        (None, Some(h), Some(w)) => (h, w),
        _ => return Err(Error::Config("give either --h and --w, or --like".into())),
    };
    let kind = match a.kind {
        MaskKindArg::Stripe => {
            if a.cols.is_empty() {
                return Err(Error::Config("stripe masks need --cols START:END".into()));
            }
            MaskKind::Stripe {
                columns: parse_ranges(&a.cols)?,
            }
        }
        MaskKindArg::Rect => match a.rect[..] {
            [top, left, height, width] => MaskKind::Rect {
                top,
                left,
                height,
                width,
            },
            _ => return Err(Error::Config("rect masks need --rect TOP,LEFT,HEIGHT,WIDTH".into())),
        },
        MaskKindArg::Random => MaskKind::Random {
            ratio: a
                .ratio
                .ok_or_else(|| Error::Config("random masks need --ratio".into()))?,
        },
    };
    let mask = hsio::make_mask(&kind, h, w, a.seed)?;
    hsio::save_mask(&mask, &a.out)?;
    emit(
        out,
        format_args!(
            "wrote {h}x{w} mask with {} missing pixels to {}\n",
            mask.missing_count(),
            a.out.display()
        ),
    )?;
    Ok(0)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn cmd_inpaint(a: &InpaintArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let file = match &a.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let flags = InpaintOverrides {
        cube: a.cube.clone(),
        mask: a.mask.clone(),
        reference: a.reference.clone(),
        out_dir: a.out_dir.clone(),
        alpha: a.alpha,
        lr: a.lr,
        iterations: a.iterations,
        seed: a.seed,
        model_seed: a.model_seed,
        group_size: a.group_size,
        log_every: a.log_every,
        data_consistency: a.data_consistency,
        base_channels: a.base_channels,
        depth: a.depth,
        attention_rank: a.attention_rank,
        attention_mode: a.attention_mode,
    };
    let mut cube_bytes = None;
    let mut settings = InpaintSettings::resolve(&flags, &file, |p| {
        let bytes = read_input(p)?;
        let cube = hsio::decode_cube(&bytes)?;
        let bands = cube.bands();
        cube_bytes = Some((bytes, cube));
        Ok(bands)
    })?;
    let (cube_raw, cube) = cube_bytes.expect("resolve reads the cube");
    let mask_raw = read_input(&settings.mask)?;
    let mask = hsio::decode_mask(&mask_raw)?;
    let reference = match &settings.reference {
        Some(p) => {
            let bytes = read_input(p)?;
            Some((hsio::decode_cube(&bytes)?, bytes))
        }
        None => None,
    };
    let y = apply_mask(&cube, &mask)?;
    settings.model.check_input(y.height(), y.width())?;

    std::fs::create_dir_all(&settings.out_dir).map_err(|e| Error::io(&settings.out_dir, e))?;
    settings.cube = absolute(&settings.cube)?;
    settings.mask = absolute(&settings.mask)?;
    settings.reference = settings.reference.as_deref().map(absolute).transpose()?;
    settings.out_dir = absolute(&settings.out_dir)?;

    let mut meta = vec![
        ("version", env!("CARGO_PKG_VERSION").to_string()),
        (
            "label",
            if settings.train.alpha == 0.0 { "mc_only" } else { "ei" }.to_string(),
        ),
        ("cube_sha256", sha256_hex(&cube_raw)),
        ("mask_sha256", sha256_hex(&mask_raw)),
    ];
    if let Some((_, bytes)) = &reference {
        meta.push(("reference_sha256", sha256_hex(bytes)));
    }
    for (key, value) in &meta[2..] {
        if let Some(prev) = file.get_raw(&format!("{META_PREFIX}{key}")) {
            if prev != value {
                let _ = writeln!(err, "warning: {key} differs from the config file; inputs changed");
            }
        }
    }
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    meta.push(("started_unix", started.to_string()));
    let manifest = settings.to_manifest(&meta);
    hsio::write_atomic(&settings.out_dir.join("manifest.txt"), manifest.as_bytes())?;

    let log_every = settings.train.log_every;
    let TrainOutcome {
        params,
        history,
        x_hat,
    } = train_with_progress(
        &y,
        &mask,
        &settings.model,
        &settings.train,
        reference.as_ref().map(|(c, _)| c),
        |r| {
            if r.iteration % (log_every * 100) == 0 || r.iteration == 1 {
                let _ = writeln!(
                    err,
                    "iter {:>6}  mc {:.3e}  ei {:.3e}  total {:.3e}",
                    r.iteration, r.mc_loss, r.ei_loss, r.total_loss
                );
            }
        },
    )?;

    hsio::save_cube(&x_hat, settings.out_dir.join("x_hat.hsc"))?;
    hsio::write_atomic(&settings.out_dir.join("history.csv"), history.to_csv().as_bytes())?;
    save_checkpoint(&params, settings.out_dir.join("model.hei"))?;

    let last = history.last().expect("at least one iteration");
    emit(
        out,
        format_args!(
            "final mc_loss {:.6e} ei_loss {:.6e} total_loss {:.6e}\n",
            last.mc_loss, last.ei_loss, last.total_loss
        ),
    )?;
    if let Some((r, _)) = &reference {
        if mask.missing_count() > 0 {
            emit(
                out,
                format_args!(
                    "masked-region mpsnr: input {:.3} dB, output {:.3} dB\n",
                    metrics::mpsnr(&y, r, Some(&mask))?,
                    metrics::mpsnr(&x_hat, r, Some(&mask))?
                ),
            )?;
        }
    }
    emit(out, format_args!("artifacts in {}\n", settings.out_dir.display()))?;
    Ok(0)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let x_hat = load_cube(&a.x_hat)?;
    let reference = load_cube(&a.reference)?;
    let mask = a.mask.as_deref().map(load_mask).transpose()?;
    let report = metrics::evaluate(&x_hat, &reference, mask.as_ref())?;
    match &a.csv {
        Some(p) => hsio::write_atomic(p, report.to_csv().as_bytes())?,
        None => emit(out, report.to_csv())?,
    }
    emit(out, format_args!("{}\n", report.summary_json()))?;
    Ok(0)
}

fn parse_actions(text: &str) -> Result<Vec<GroupAction>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let bad = || Error::Config(format!("action {pair:?} must look like DX,DY"));
            let (dx, dy) = pair.split_once(',').ok_or_else(bad)?;
            Ok(GroupAction::new(
                dx.trim().parse().map_err(|_| bad())?,
                dy.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn cmd_nullspace(a: &NullspaceArgs, out: &mut dyn Write) -> Result<i32> {
    let (mask, kind) = match (&a.mask, a.h, a.w) {
        (Some(p), None, None) if a.cols.is_empty() => (load_mask(p)?, "file".to_string()),
        (None, Some(h), Some(w)) if !a.cols.is_empty() => {
            let columns = parse_ranges(&a.cols)?;
            let desc = format!("stripe {}", a.cols.join(" "));
            (hsio::make_mask(&MaskKind::Stripe { columns }, h, w, 0)?, desc)
        }
        _ => return Err(Error::Config("give either --mask, or --h, --w and --cols".into())),
    };
    let (actions, desc) = match (&a.actions, a.group_size) {
        (Some(_), Some(_)) => return Err(Error::Config("--actions and --group-size are exclusive".into())),
        (Some(text), None) => {
            let acts = parse_actions(text)?;
            let desc = acts.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(" ");
            (acts, desc)
        }
        (None, size) => {
            let cfg = GroupConfig::shift(size.unwrap_or(GroupConfig::default().size));
            cfg.validate()?;
            (cfg.actions(), format!("shift T={}", cfg.size))
        }
    };
    let report = nullspace_coverage(&mask, &actions, mask.height(), mask.width())?;
    emit(
        out,
        format_args!("{}\n{}\n", CoverageReport::CSV_HEADER, report.csv_line(&kind, &desc)),
    )?;
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let mut rows = op_suite(a.seed)?;
    rows.push(full_model_gradcheck(a.seed)?);
    rows.push(loss_gradcheck(a.seed, 1.0)?);
    let mut text = String::from("op,max_rel_err,status\n");
    for r in &rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    emit(out, text)?;
    Ok(if rows.iter().all(|r| r.passed) { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_plot(a: &PlotArgs, out: &mut dyn Write) -> Result<i32> {
    let cube = load_cube(&a.cube)?;
    let bands: Vec<usize> = match a.band {
        Some(b) => vec![b],
        None => a.rgb.clone(),
    };
    if let Some(&b) = bands.iter().find(|&&b| b >= cube.bands()) {
        return Err(Error::Config(format!("band {b} out of range (cube has {} bands)", cube.bands())));
    }
    let png = render_png(&cube, &bands)?;
    hsio::write_atomic(&a.out, &png)?;
    emit(out, format_args!("wrote {}x{} PNG to {}\n", cube.width(), cube.height(), a.out.display()))?;
    Ok(0)
}

/// 8-bit value of a sample: `[0, 1]` mapped linearly onto `0..=255`, clamped.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PNG bytes of one band (grayscale) or three bands (RGB).
pub fn render_png(cube: &HsiCube, bands: &[usize]) -> Result<Vec<u8>> {
    use image::{ExtendedColorType, ImageEncoder};
    let (h, w) = (cube.height(), cube.width());
    let (pixels, color) = match *bands {
        [b] => (cube.band(b).iter().map(|&v| to_byte(v)).collect::<Vec<u8>>(), ExtendedColorType::L8),
        [r, g, b] => {
            let mut px = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                px.extend([r, g, b].map(|k| to_byte(cube.band(k)[p])));
            }
            (px, ExtendedColorType::Rgb8)
        }
        _ => return Err(Error::Config("plot needs one band or three bands".into())),
    };
    let (hu, wu) = match (u32::try_from(h), u32::try_from(w)) {
        (Ok(hu), Ok(wu)) => (hu, wu),
        _ => return Err(Error::Capacity("image too large for PNG".into())),
    };
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(&pixels, wu, hu, color)
        .map_err(|e| Error::Validation(format!("png encoding failed: {e}")))?;
    Ok(bytes)
}
