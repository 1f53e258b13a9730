//! Static single-file HTML report assembled from the artifacts earlier
//! subcommands left in a run directory. Every image is inlined as a base64
//! data URI so the file can be mailed around without siblings; nothing is
//! read besides the files named here.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::Engine as _;
use psfcal::error::{Error, Result};
use psfcal::field::PsfField;
use psfcal::io;
use psfcal::{Image, Kernel};

use crate::plot::{self, Series};

/// Builds the report HTML for `run`. Sections appear only when their source
/// files exist; an empty run directory is an error.
pub fn build_report(run: &Path) -> Result<String> {
    if !run.is_dir() {
        return Err(Error::invalid(format!(
            "run directory {} not found",
            run.display()
        )));
    }
    let mut body = String::new();
    let mut sections = 0usize;

    if let Ok(field) = io::load_psf_field(run.join("psf_field")) {
        section_kernels(&mut body, "Estimated kernels", &field)?;
        sections += 1;
    }
    if let Ok(field) = io::load_psf_field(run.join("gt")) {
        section_kernels(&mut body, "Ground-truth kernels", &field)?;
        sections += 1;
    }
    if run.join("mtf").is_dir() {
        sections += section_mtf(&mut body, &run.join("mtf"))?;
    }
    for (title, name) in [
        ("Kernel scores", "scores.csv"),
        ("Calibration diagnostics", "psf_field/diagnostics.csv"),
    ] {
        let path = run.join(name);
        if path.is_file() {
            section_table(&mut body, title, &fs::read_to_string(path)?);
            sections += 1;
        }
    }
    {
        let mut shown = String::new();
        for (caption, name) in [
            ("Chart", "chart.png"),
            ("Raw mosaic", "raw.png"),
            ("Demosaiced capture", "demosaiced.png"),
            ("Restored", "restored.png"),
        ] {
            let path = run.join(name);
            if path.is_file() {
                let img = io::load_png16(&path)?;
                write!(
                    shown,
                    "<figure><img src=\"{}\" style=\"max-width:24rem\">\
                     <figcaption>{}</figcaption></figure>",
                    data_uri(&img)?,
                    esc(caption)
                )
                .unwrap();
            }
        }
        if !shown.is_empty() {
            write!(
                body,
                "<h2>Images</h2><div class=\"imgrow\">{shown}</div>"
            )
            .unwrap();
            sections += 1;
        }
    }
    let config = run.join("psf_field/config.json");
    if config.is_file() {
        write!(
            body,
            "<h2>Effective configuration</h2><pre>{}</pre>",
            esc(fs::read_to_string(config)?.trim_end())
        )
        .unwrap();
        sections += 1;
    }

    if sections == 0 {
        return Err(Error::invalid(format!(
            "no recognizable artifacts under {}",
            run.display()
        )));
    }
    Ok(page(&format!("Calibration run: {}", run.display()), &body))
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!doctype html><html><head><meta charset=\"utf-8\">\
         <title>{t}</title><style>\
         body{{font:14px/1.45 system-ui,sans-serif;margin:2rem auto;max-width:72rem;\
         padding:0 1rem;color:#1a1a1f}}\
         h1{{font-size:1.4rem}}h2{{font-size:1.1rem;margin-top:2rem}}\
         table{{border-collapse:collapse}}td,th{{border:1px solid #ccc;\
         padding:0.2rem 0.6rem;text-align:right}}th{{background:#f0f0f4}}\
         tr.summary{{background:#fbf6e3;font-weight:600}}\
         figure{{display:inline-block;margin:0.4rem;text-align:center}}\
         figcaption{{font-size:0.85rem;color:#555}}\
         img{{image-rendering:pixelated;border:1px solid #ddd}}\
         .imgrow{{display:flex;flex-wrap:wrap;gap:0.5rem}}\
         .swatch{{display:inline-block;width:0.8em;height:0.8em;\
         margin-right:0.3em;border:1px solid #888}}\
         pre{{background:#f6f6f8;padding:0.8rem;overflow-x:auto}}\
         </style></head><body><h1>{t}</h1>{body}</body></html>\n",
        t = esc(title),
        body = body
    )
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn data_uri(img: &Image) -> Result<String> {
    let bytes = io::encode_png16(img)?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Arranges one channel's kernels as a heatmap grid, each normalized to its
/// own peak; holes render as a flat dark cell.
fn kernel_montage(field: &PsfField, channel: usize, scale: usize, gap: usize) -> Image {
    let side = field
        .iter()
        .map(|(_, _, _, k)| k.side())
        .max()
        .unwrap_or(1);
    let cell = side * scale;
    let w = field.grid_cols() * (cell + gap) + gap;
    let h = field.grid_rows() * (cell + gap) + gap;
    let mut out = Image::constant(w, h, 1, 0.12);
    for row in 0..field.grid_rows() {
        for col in 0..field.grid_cols() {
            let x0 = gap + col * (cell + gap);
            let y0 = gap + row * (cell + gap);
            let Some(k) = field.kernel(row, col, channel) else {
                continue;
            };
            out.paste(&heatmap(k, scale), x0, y0);
        }
    }
    out
}

fn heatmap(k: &Kernel, scale: usize) -> Image {
    let peak = k.max_value();
    let side = k.side();
    let mut img = Image::new(side * scale, side * scale, 1);
    for j in 0..side {
        for i in 0..side {
            let v = if peak > 0.0 { k.get(i, j) / peak } else { 0.0 };
            for sy in 0..scale {
                for sx in 0..scale {
                    img.set(i * scale + sx, j * scale + sy, 0, v);
                }
            }
        }
    }
    img
}

fn section_kernels(body: &mut String, title: &str, field: &PsfField) -> Result<()> {
    write!(body, "<h2>{}</h2><div class=\"imgrow\">", esc(title)).unwrap();
    let names = ["red", "green", "blue"];
    for c in 0..field.channels() {
        let caption = if field.channels() == 1 {
            "all channels".to_string()
        } else {
            names.get(c).copied().unwrap_or("?").to_string()
        };
        write!(
            body,
            "<figure><img src=\"{}\"><figcaption>{} ({} holes)</figcaption></figure>",
            data_uri(&kernel_montage(field, c, 5, 2))?,
            esc(&caption),
            field.hole_count()
        )
        .unwrap();
    }
    body.push_str("</div>");
    Ok(())
}

/// Overlays every horizontal-slice curve found in `dir`; returns how many
/// sections were emitted (0 when the directory holds no curves).
fn section_mtf(body: &mut String, dir: &Path) -> Result<usize> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with("_h.csv"))
        .collect();
    if names.is_empty() {
        return Ok(0);
    }
    names.sort();
    let mut series = Vec::new();
    let mut legend = String::new();
    for (i, name) in names.iter().enumerate() {
        let curve = io::read_curve_csv(dir.join(name))?;
        series.push(Series {
            points: curve
                .frequencies
                .iter()
                .zip(&curve.modulation)
                .map(|(&f, &m)| (f, m))
                .collect(),
            color: plot::PALETTE[i % plot::PALETTE.len()],
        });
        if i < 24 {
            write!(
                legend,
                "<span><span class=\"swatch\" style=\"background:{}\"></span>{}</span> ",
                plot::palette_hex(i),
                esc(name.trim_end_matches("_h.csv"))
            )
            .unwrap();
        }
    }
    if names.len() > 24 {
        write!(legend, "<span>... and {} more</span>", names.len() - 24).unwrap();
    }
    let img = plot::line_plot(&series, 560, 360, Some((0.0, 1.05)));
    write!(
        body,
        "<h2>MTF (horizontal slices, frequency 0 to 0.5 cycles/px)</h2>\
         <figure><img src=\"{}\"></figure><p>{}</p>",
        data_uri(&img)?,
        legend
    )
    .unwrap();
    Ok(1)
}

fn section_table(body: &mut String, title: &str, csv: &str) {
    write!(body, "<h2>{}</h2><table>", esc(title)).unwrap();
    for (i, line) in csv.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let tag = if i == 0 { "th" } else { "td" };
        let class = if i > 0 && line.starts_with("mean") {
            " class=\"summary\""
        } else {
            ""
        };
        write!(body, "<tr{class}>").unwrap();
        for cell in line.split(',') {
            write!(body, "<{tag}>{}</{tag}>", esc(cell)).unwrap();
        }
        body.push_str("</tr>");
    }
    body.push_str("</table>");
}
