//! Command-line frontend tying the calibration pipeline together: chart
//! rendering, capture simulation, kernel-grid estimation, scoring, MTF/SFR
//! export, Wiener restoration, and a static HTML report.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on pipeline errors (which
//! also print a one-line JSON diagnostic to stderr). The log level is
//! controlled by `RUST_LOG`; every command is deterministic given its
//! inputs and `--seed`.

mod plot;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psfcal::chart::{render_chart, AffinePerturbation, CircleGridSpec};
use psfcal::error::Error;
use psfcal::io;
use psfcal::metrics::{kernel_psnr, kernel_ssim, mtf_from_psf, slanted_edge_sfr, MtfCurve};
use psfcal::optics::{add_noise, blur_field, synth_field, AberrationSpec, NoiseSpec};
use psfcal::optim::{calibrate_field_detailed, OptimConfig};
use psfcal::sensor::{demosaic_bilinear, mosaic, CfaPattern};
use psfcal::{deblur, Image};

#[derive(Parser)]
#[command(
    name = "psfcal",
    version,
    about = "Point-spread-function calibration from circle-grid captures"
)]
struct Cli {
    /// Worker threads for grid calibration (default: all logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a circle-grid calibration chart to 16-bit PNG.
    RenderChart {
        /// Chart geometry JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Optional affine perturbation JSON applied to the chart.
        #[arg(long)]
        affine: Option<PathBuf>,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a capture: field-dependent blur, noise, Bayer sampling.
    Simulate {
        /// Sharp chart PNG (grayscale charts are treated as neutral RGB).
        #[arg(long)]
        chart: PathBuf,
        /// Lens model JSON (field-dependent Gaussian mixture).
        #[arg(long)]
        aberration: PathBuf,
        /// Noise model JSON; omit for a noiseless capture.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Color filter layout: RGGB | BGGR | GRBG | GBRG.
        #[arg(long, default_value = "RGGB")]
        cfa: String,
        /// Ground-truth kernel grid as ROWSxCOLS, e.g. 3x3.
        #[arg(long)]
        grid: String,
        /// Noise RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output raw mosaic PNG; a pattern sidecar JSON lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Directory receiving the ground-truth kernel grid.
        #[arg(long)]
        gt_kernels: PathBuf,
        /// Optional path for a bilinear-demosaiced preview.
        #[arg(long)]
        demosaiced: Option<PathBuf>,
    },
    /// Estimate the kernel grid from a captured mosaic.
    Calibrate {
        /// Raw mosaic PNG with its JSON sidecar, or a plain PNG capture.
        #[arg(long)]
        input: PathBuf,
        /// Analysis grid as ROWSxCOLS, e.g. 11x17.
        #[arg(long)]
        grid: String,
        /// Optimizer configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the RNG seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override flow alignment on or off.
        #[arg(long)]
        use_flow: Option<bool>,
        /// Override the demosaicing-aware forward model on or off.
        #[arg(long)]
        demosaic_aware: Option<bool>,
        /// Output directory: kernel grid, latents, flows, loss traces.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimated kernel grid against ground truth.
    Evaluate {
        /// Directory holding the estimated kernel grid.
        #[arg(long)]
        est: PathBuf,
        /// Directory holding the ground-truth kernel grid.
        #[arg(long)]
        gt: PathBuf,
        /// Output CSV with per-cell PSNR/SSIM plus a mean summary row.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export MTF curves (CSV plus plots) for every kernel in a grid.
    Mtf {
        /// Directory holding the kernel grid.
        #[arg(long)]
        kernels: PathBuf,
        /// Frequency samples from 0 to 0.5 cycles/px.
        #[arg(long, default_value_t = 33)]
        freqs: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure the spatial frequency response of a slanted edge.
    Sfr {
        /// Capture PNG containing the edge.
        #[arg(long)]
        image: PathBuf,
        /// Region of interest as X,Y,W,H pixels.
        #[arg(long)]
        roi: String,
        /// Nominal edge tilt from vertical, degrees.
        #[arg(long, default_value_t = 5.0)]
        angle: f64,
        /// Frequency samples from 0 to 0.5 cycles/px.
        #[arg(long, default_value_t = 33)]
        freqs: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Wiener-restore a blurred capture with a calibrated kernel grid.
    Deblur {
        /// Blurred capture PNG.
        #[arg(long)]
        image: PathBuf,
        /// Directory holding the kernel grid.
        #[arg(long)]
        kernels: PathBuf,
        /// Noise-to-signal power ratio of the Wiener filter.
        #[arg(long, default_value_t = 1e-3)]
        nsr: f64,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble a single-file HTML report from a run directory.
    Report {
        /// Directory holding artifacts from earlier subcommands.
        #[arg(long)]
        run: PathBuf,
        /// Output HTML path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Pipeline(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("usage error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("worker pool already initialized: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": error_kind(&e) })
            );
            ExitCode::from(2)
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid-input",
        Error::NoBimodalStructure => "no-bimodal-structure",
        Error::EmptyRoi { .. } => "empty-roi",
        Error::DegenerateKernel => "degenerate-kernel",
        Error::SingularSystem => "singular-system",
        Error::NoEdgeFound => "no-edge-found",
        Error::NonFiniteLoss { .. } => "non-finite-loss",
        Error::DivergentRestoration => "divergent-restoration",
        Error::CalibrationFailed { .. } => "calibration-failed",
        Error::Io(_) => "io",
        Error::Image(_) => "image-codec",
        Error::Json(_) => "json",
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::RenderChart { spec, affine, out } => cmd_render_chart(&spec, affine.as_deref(), &out),
        Command::Simulate {
            chart,
            aberration,
            noise,
            cfa,
            grid,
            seed,
            out,
            gt_kernels,
            demosaiced,
        } => cmd_simulate(
            &chart,
            &aberration,
            noise.as_deref(),
            &cfa,
            &grid,
            seed,
            &out,
            &gt_kernels,
            demosaiced.as_deref(),
        ),
        Command::Calibrate {
            input,
            grid,
            config,
            seed,
            use_flow,
            demosaic_aware,
            out,
        } => cmd_calibrate(
            &input,
            &grid,
            config.as_deref(),
            seed,
            use_flow,
            demosaic_aware,
            &out,
        ),
        Command::Evaluate { est, gt, out } => cmd_evaluate(&est, &gt, &out),
        Command::Mtf { kernels, freqs, out } => cmd_mtf(&kernels, freqs, &out),
        Command::Sfr {
            image,
            roi,
            angle,
            freqs,
            out,
        } => cmd_sfr(&image, &roi, angle, freqs, &out),
        Command::Deblur {
            image,
            kernels,
            nsr,
            out,
        } => cmd_deblur(&image, &kernels, nsr, &out),
        Command::Report { run, out } => cmd_report(&run, &out),
    }
}

fn cmd_render_chart(spec: &Path, affine: Option<&Path>, out: &Path) -> CliResult<()> {
    let spec: CircleGridSpec = io::load_json(spec)?;
    let affine: Option<AffinePerturbation> = affine.map(io::load_json).transpose()?;
    let render = render_chart(&spec, affine.as_ref())?;
    if render.clipped_circles > 0 {
        log::warn!(
            "{} circles clipped by the canvas border",
            render.clipped_circles
        );
    }
    ensure_parent(out)?;
    io::save_png16(&render.image, out)?;
    println!(
        "wrote {} ({}x{} px)",
        out.display(),
        render.image.width(),
        render.image.height()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    chart: &Path,
    aberration: &Path,
    noise: Option<&Path>,
    cfa: &str,
    grid: &str,
    seed: u64,
    out: &Path,
    gt_kernels: &Path,
    demosaiced: Option<&Path>,
) -> CliResult<()> {
    let (rows, cols) = parse_grid(grid)?;
    let pattern = parse_cfa(cfa)?;
    let chart_img = io::load_png16(chart)?;
    let chart_rgb = match chart_img.channels() {
        1 => chart_img.replicate(3)?,
        3 => chart_img,
        c => {
            return Err(Error::invalid(format!("chart must be grayscale or RGB, got {c} channels")).into())
        }
    };
    let ab: AberrationSpec = io::load_json(aberration)?;
    let gt = synth_field(&ab, rows, cols, 3)?;
    let blurred = blur_field(&chart_rgb, &gt)?;
    let observed = match noise {
        Some(path) => {
            let ns: NoiseSpec = io::load_json(path)?;
            add_noise(&blurred, &ns, seed)?
        }
        None => blurred,
    };
    let raw = mosaic(&observed, pattern)?;
    ensure_parent(out)?;
    io::save_raw_mosaic(&raw, out)?;
    io::save_psf_field(&gt, gt_kernels)?;
    if let Some(path) = demosaiced {
        ensure_parent(path)?;
        io::save_png16(&demosaic_bilinear(&raw), path)?;
    }
    println!(
        "wrote {} plus {} ground-truth kernels under {}",
        out.display(),
        rows * cols * 3,
        gt_kernels.display()
    );
    Ok(())
}

fn cmd_calibrate(
    input: &Path,
    grid: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    use_flow: Option<bool>,
    demosaic_aware: Option<bool>,
    out: &Path,
) -> CliResult<()> {
    let (rows, cols) = parse_grid(grid)?;
    // A raw mosaic travels with a sidecar naming its pattern; a plain PNG
    // is taken as the observation itself.
    let sidecar = input.with_extension("json");
    let (img, pattern) = if sidecar.is_file() {
        let raw = io::load_raw_mosaic(input)?;
        (demosaic_bilinear(&raw), Some(raw.pattern))
    } else {
        (io::load_png16(input)?, None)
    };
    let mut cfg: OptimConfig = match config {
        Some(path) => io::load_json(path)?,
        None => OptimConfig::default(),
    };
    if let Some(p) = pattern {
        cfg.cfa = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = use_flow {
        cfg.use_flow = f;
    }
    if let Some(d) = demosaic_aware {
        cfg.demosaic_aware = d;
    }
    if img.channels() == 1 && cfg.demosaic_aware {
        log::info!("plain single-channel capture: disabling the demosaicing-aware forward model");
        cfg.demosaic_aware = false;
    }

    let fc = calibrate_field_detailed(&img, rows, cols, &cfg)?;

    io::save_psf_field(&fc.field, out)?;
    io::save_json(&cfg, out.join("config.json"))?;
    for sub in ["latents", "flows", "traces"] {
        fs::create_dir_all(out.join(sub)).map_err(Error::from)?;
    }
    let mut diag = String::from("row,col,channel,iterations,final_fidelity,final_gradient_loss\n");
    for o in &fc.outcomes {
        let stem = format!("r{:02}_c{:02}_ch{}", o.row, o.col, o.channel);
        io::save_png16(&o.result.latent, out.join("latents").join(format!("{stem}.png")))?;
        io::save_flow_pfm(&o.result.flow, out.join("flows").join(format!("{stem}.pfm")))?;
        io::write_loss_trace_csv(
            &o.result.loss_trace,
            out.join("traces").join(format!("{stem}.csv")),
        )?;
        diag.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.row,
            o.col,
            o.channel,
            o.result.loss_trace.len(),
            o.result.final_fidelity,
            o.result.final_gradient_loss
        ));
    }
    fs::write(out.join("diagnostics.csv"), diag).map_err(Error::from)?;
    println!(
        "calibrated {rows}x{cols} grid ({} holes) into {}",
        fc.field.hole_count(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(est: &Path, gt: &Path, out: &Path) -> CliResult<()> {
    let est = io::load_psf_field(est)?;
    let gt = io::load_psf_field(gt)?;
    if est.grid_rows() != gt.grid_rows()
        || est.grid_cols() != gt.grid_cols()
        || est.channels() != gt.channels()
    {
        return Err(Error::invalid(format!(
            "grid mismatch: estimate {}x{}x{}, ground truth {}x{}x{}",
            est.grid_rows(),
            est.grid_cols(),
            est.channels(),
            gt.grid_rows(),
            gt.grid_cols(),
            gt.channels()
        ))
        .into());
    }
    let mut rows = Vec::new();
    for (r, c, ch, gk) in gt.iter() {
        let Some(ek) = est.kernel(r, c, ch) else {
            log::warn!("estimate missing cell ({r}, {c}) channel {ch}; skipping");
            continue;
        };
        rows.push(io::ScoreRow {
            row: r,
            col: c,
            channel: ch,
            psnr_db: kernel_psnr(ek, gk)?,
            ssim: kernel_ssim(ek, gk)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("no cells present in both grids").into());
    }
    ensure_parent(out)?;
    io::write_scores_csv(&rows, out)?;
    let n = rows.len() as f64;
    println!(
        "mean kernel PSNR {:.2} dB, SSIM {:.4} over {} cells",
        rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.len()
    );
    Ok(())
}

fn curve_series(curve: &MtfCurve, i: usize) -> plot::Series {
    plot::Series {
        points: curve
            .frequencies
            .iter()
            .zip(&curve.modulation)
            .map(|(&f, &m)| (f, m))
            .collect(),
        color: plot::PALETTE[i % plot::PALETTE.len()],
    }
}

fn cmd_mtf(kernels: &Path, freqs: usize, out: &Path) -> CliResult<()> {
    if freqs < 2 {
        return Err(usage("--freqs must be at least 2"));
    }
    let field = io::load_psf_field(kernels)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let mut overlay = Vec::new();
    let mut count = 0usize;
    for (r, c, ch, k) in field.iter() {
        let horiz = mtf_from_psf(k, freqs, 0.0)?;
        let vert = mtf_from_psf(k, freqs, 90.0)?;
        let stem = format!("r{r:02}_c{c:02}_ch{ch}");
        io::write_curve_csv(&horiz, out.join(format!("{stem}_h.csv")))?;
        io::write_curve_csv(&vert, out.join(format!("{stem}_v.csv")))?;
        let img = plot::line_plot(
            &[curve_series(&horiz, 0), curve_series(&vert, 1)],
            480,
            320,
            Some((0.0, 1.05)),
        );
        io::save_png16(&img, out.join(format!("{stem}.png")))?;
        overlay.push(curve_series(&horiz, count));
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("kernel grid holds no kernels").into());
    }
    let img = plot::line_plot(&overlay, 560, 360, Some((0.0, 1.05)));
    io::save_png16(&img, out.join("overlay.png"))?;
    println!("wrote response curves for {count} kernels to {}", out.display());
    Ok(())
}

fn cmd_sfr(image: &Path, roi: &str, angle: f64, freqs: usize, out: &Path) -> CliResult<()> {
    if freqs < 2 {
        return Err(usage("--freqs must be at least 2"));
    }
    let (x, y, w, h) = parse_roi(roi)?;
    let img = io::load_png16(image)?;
    let gray = to_gray(&img);
    let patch = gray.crop_replicated(x as isize, y as isize, w, h);
    let curve = slanted_edge_sfr(&patch, angle, freqs)?;
    ensure_parent(out)?;
    io::write_curve_csv(&curve, out)?;
    println!(
        "edge at {:.2} degrees from vertical; wrote {} samples to {}",
        curve.orientation,
        curve.frequencies.len(),
        out.display()
    );
    Ok(())
}

fn cmd_deblur(image: &Path, kernels: &Path, nsr: f64, out: &Path) -> CliResult<()> {
    let img = io::load_png16(image)?;
    let field = io::load_psf_field(kernels)?;
    let restored = deblur::wiener_deblur(&img, &field, nsr)?;
    ensure_parent(out)?;
    io::save_png16(&restored, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(run: &Path, out: &Path) -> CliResult<()> {
    let html = report::build_report(run)?;
    ensure_parent(out)?;
    fs::write(out, html).map_err(Error::from)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn to_gray(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let mut out = Image::new(img.width(), img.height(), 1);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let mut s = 0.0;
            for c in 0..img.channels() {
                s += img.get(x, y, c);
            }
            out.set(x, y, 0, s / img.channels() as f64);
        }
    }
    out
}

fn parse_grid(s: &str) -> CliResult<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let err = || usage(format!("--grid expects ROWSxCOLS, e.g. 11x17; got '{s}'"));
    if parts.len() != 2 {
        return Err(err());
    }
    let rows: usize = parts[0].trim().parse().map_err(|_| err())?;
    let cols: usize = parts[1].trim().parse().map_err(|_| err())?;
    if rows == 0 || cols == 0 {
        return Err(err());
    }
    Ok((rows, cols))
}

fn parse_roi(s: &str) -> CliResult<(usize, usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    let err = || usage(format!("--roi expects X,Y,W,H in pixels; got '{s}'"));
    if parts.len() != 4 {
        return Err(err());
    }
    let mut v = [0usize; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| err())?;
    }
    if v[2] < 8 || v[3] < 8 {
        return Err(usage("--roi region must be at least 8x8 pixels"));
    }
    Ok((v[0], v[1], v[2], v[3]))
}

fn parse_cfa(s: &str) -> CliResult<CfaPattern> {
    match s.to_ascii_uppercase().as_str() {
        "RGGB" => Ok(CfaPattern::Rggb),
        "BGGR" => Ok(CfaPattern::Bggr),
        "GRBG" => Ok(CfaPattern::Grbg),
        "GBRG" => Ok(CfaPattern::Gbrg),
        _ => Err(usage(format!(
            "--cfa expects RGGB, BGGR, GRBG, or GBRG; got '{s}'"
        ))),
    }
}
