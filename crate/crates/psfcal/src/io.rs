//! File formats: 16-bit PNG for quantized images, PFM for float-exact
//! intermediates, JSON for kernels/configs/field indexes, and small CSV
//! tables. Every writer is deterministic — identical inputs produce
//! byte-identical files, which downstream reproducibility checks rely on.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PsfField;
use crate::metrics::MtfCurve;
use crate::raster::{FlowField, Image, Kernel};
use crate::sensor::{CfaPattern, RawMosaic};

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Encodes an image as an in-memory 16-bit grayscale or RGB PNG;
/// intensities are clamped to `[0, 1]` and quantized.
pub fn encode_png16(img: &Image) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let data: Vec<u16> = img.data().iter().map(|&v| to_u16(v)).collect();
    let mut out = std::io::Cursor::new(Vec::new());
    match img.channels() {
        1 => {
            let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, data)
                .expect("buffer sized from the image");
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        }
        3 => {
            let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, data)
                .expect("buffer sized from the image");
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        }
        c => {
            return Err(Error::invalid(format!(
                "PNG export supports 1 or 3 channels, got {c}"
            )))
        }
    }
    Ok(out.into_inner())
}

/// Stores an image as 16-bit grayscale or RGB PNG; intensities are clamped
/// to `[0, 1]` and quantized.
pub fn save_png16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), encode_png16(img)?)?;
    Ok(())
}

/// Loads an 8- or 16-bit grayscale/RGB PNG into unit-range intensities.
pub fn load_png16(path: impl AsRef<Path>) -> Result<Image> {
    let dynimg = image::open(path.as_ref())?;
    let to_f = |v: u16| v as f64 / 65535.0;
    let img = match dynimg {
        image::DynamicImage::ImageLuma16(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            Image::from_vec(w, h, 1, b.into_raw().into_iter().map(to_f).collect())?
        }
        image::DynamicImage::ImageRgb16(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            Image::from_vec(w, h, 3, b.into_raw().into_iter().map(to_f).collect())?
        }
        image::DynamicImage::ImageLuma8(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let data = b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Image::from_vec(w, h, 1, data)?
        }
        image::DynamicImage::ImageRgb8(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let data = b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Image::from_vec(w, h, 3, data)?
        }
        other => {
            return Err(Error::invalid(format!(
                "unsupported PNG layout {:?}; expected grayscale or RGB",
                other.color()
            )))
        }
    };
    Ok(img)
}

/// Stores an image as PFM (`Pf` grayscale / `PF` RGB, 32-bit little-endian
/// floats, rows bottom to top, scale -1).
pub fn save_pfm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::invalid(format!(
                "PFM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = Vec::with_capacity(32 + w * h * ch * 4);
    write!(out, "{magic}\n{w} {h}\n-1\n")?;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..ch {
                out.extend_from_slice(&(img.get(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Loads a little- or big-endian PFM file.
pub fn load_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())?;
    let bad = |msg: &str| Error::invalid(format!("malformed PFM: {msg}"));
    // Header: three whitespace-separated tokens after the magic, then a
    // single whitespace byte, then raw samples.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("unknown magic")),
    };
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("height"))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| bad("scale"))?;
    pos += 1; // single whitespace separating header from samples
    let n = w * h * channels;
    if bytes.len() < pos + 4 * n {
        return Err(bad("sample data shorter than header implies"));
    }
    let little = scale < 0.0;
    let mut img = Image::new(w, h, channels);
    let mut at = pos;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                let raw: [u8; 4] = bytes[at..at + 4].try_into().unwrap();
                let v = if little {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                img.set(x, y, c, v as f64);
                at += 4;
            }
        }
    }
    Ok(img)
}

/// Stores a flow field as a 3-channel PFM `(dx, dy, 0)`.
pub fn save_flow_pfm(v: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = (v.width(), v.height());
    let mut img = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = v.get(x, y);
            img.set(x, y, 0, dx);
            img.set(x, y, 1, dy);
        }
    }
    save_pfm(&img, path)
}

/// Loads a flow field stored by [`save_flow_pfm`].
pub fn load_flow_pfm(path: impl AsRef<Path>) -> Result<FlowField> {
    let img = load_pfm(path.as_ref())?;
    if img.channels() != 3 {
        return Err(Error::invalid("flow PFM must have three channels"));
    }
    let mut v = FlowField::zero(img.width(), img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            v.set(x, y, img.get(x, y, 0), img.get(x, y, 1));
        }
    }
    Ok(v)
}

/// Writes a quiver-style CSV `x,y,dx,dy` sampling every `stride` pixels.
pub fn write_flow_quiver_csv(
    v: &FlowField,
    path: impl AsRef<Path>,
    stride: usize,
) -> Result<()> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let mut out = String::from("x,y,dx,dy\n");
    for y in (0..v.height()).step_by(stride) {
        for x in (0..v.width()).step_by(stride) {
            let (dx, dy) = v.get(x, y);
            out.push_str(&format!("{x},{y},{dx},{dy}\n"));
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Serializes any config-like value as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path.as_ref(), text)?;
    Ok(())
}

/// Deserializes a JSON file.
pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&text)?)
}

/// Stores a kernel as compact JSON `{side, data}`. Floats round-trip
/// exactly.
pub fn save_kernel_json(k: &Kernel, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string(k)?;
    text.push('\n');
    fs::write(path.as_ref(), text)?;
    Ok(())
}

/// Loads a kernel, re-validating nonnegativity and unit sum.
pub fn load_kernel_json(path: impl AsRef<Path>) -> Result<Kernel> {
    let text = fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&text)?)
}

/// Renders a kernel as a grayscale heatmap PNG, normalized to its own peak
/// and nearest-neighbor upscaled by `scale`.
pub fn save_kernel_heatmap(k: &Kernel, path: impl AsRef<Path>, scale: usize) -> Result<()> {
    if scale == 0 {
        return Err(Error::invalid("heatmap scale must be at least 1"));
    }
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
    save_png16(&img, path)
}

/// Index file of a kernel-grid directory.
#[derive(Debug, Serialize, Deserialize)]
struct FieldIndex {
    grid_rows: usize,
    grid_cols: usize,
    channels: usize,
    /// Filled cells in row-major, channel-minor order.
    kernels: Vec<FieldEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldEntry {
    row: usize,
    col: usize,
    channel: usize,
    file: String,
}

/// Stores a kernel grid as `dir/field.json` plus one JSON file per filled
/// cell under `dir/kernels/`. Holes are simply absent from the index.
pub fn save_psf_field(field: &PsfField, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("kernels"))?;
    let mut entries = Vec::new();
    for (row, col, channel, k) in field.iter() {
        let file = format!("kernels/r{row:02}_c{col:02}_ch{channel}.json");
        save_kernel_json(k, dir.join(&file))?;
        entries.push(FieldEntry {
            row,
            col,
            channel,
            file,
        });
    }
    let index = FieldIndex {
        grid_rows: field.grid_rows(),
        grid_cols: field.grid_cols(),
        channels: field.channels(),
        kernels: entries,
    };
    save_json(&index, dir.join("field.json"))
}

/// Loads a kernel grid stored by [`save_psf_field`].
pub fn load_psf_field(dir: impl AsRef<Path>) -> Result<PsfField> {
    let dir = dir.as_ref();
    let index: FieldIndex = load_json(dir.join("field.json"))?;
    if index.grid_rows == 0 || index.grid_cols == 0 || index.channels == 0 {
        return Err(Error::invalid("field index has an empty grid"));
    }
    let mut field = PsfField::new(index.grid_rows, index.grid_cols, index.channels);
    for e in &index.kernels {
        if e.row >= index.grid_rows || e.col >= index.grid_cols || e.channel >= index.channels {
            return Err(Error::invalid(format!(
                "field entry ({}, {}, {}) outside the {}x{}x{} grid",
                e.row, e.col, e.channel, index.grid_rows, index.grid_cols, index.channels
            )));
        }
        if field.kernel(e.row, e.col, e.channel).is_some() {
            return Err(Error::invalid(format!(
                "duplicate field entry ({}, {}, {})",
                e.row, e.col, e.channel
            )));
        }
        field.set(e.row, e.col, e.channel, load_kernel_json(dir.join(&e.file))?);
    }
    Ok(field)
}

#[derive(Debug, Serialize, Deserialize)]
struct MosaicSidecar {
    pattern: CfaPattern,
}

fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

/// Stores a raw mosaic as 16-bit grayscale PNG plus a JSON sidecar naming
/// the color filter pattern.
pub fn save_raw_mosaic(raw: &RawMosaic, png_path: impl AsRef<Path>) -> Result<()> {
    let png_path = png_path.as_ref();
    save_png16(&raw.image, png_path)?;
    save_json(
        &MosaicSidecar {
            pattern: raw.pattern,
        },
        sidecar_path(png_path),
    )
}

/// Loads a raw mosaic and its pattern sidecar.
pub fn load_raw_mosaic(png_path: impl AsRef<Path>) -> Result<RawMosaic> {
    let png_path = png_path.as_ref();
    let image = load_png16(png_path)?;
    if image.channels() != 1 {
        return Err(Error::invalid("raw mosaic PNG must be single-channel"));
    }
    let sidecar: MosaicSidecar = load_json(sidecar_path(png_path))?;
    Ok(RawMosaic {
        pattern: sidecar.pattern,
        image,
    })
}

/// Writes an iteration-indexed loss trace as CSV.
pub fn write_loss_trace_csv(trace: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Writes a frequency-response curve as CSV.
pub fn write_curve_csv(curve: &MtfCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("frequency,modulation\n");
    for (f, m) in curve.frequencies.iter().zip(&curve.modulation) {
        out.push_str(&format!("{f},{m}\n"));
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Reads a curve written by [`write_curve_csv`]; the orientation is not
/// stored in CSV and comes back as 0.
pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<MtfCurve> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut frequencies = Vec::new();
    let mut modulation = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let f = parts
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| Error::invalid(format!("bad curve CSV line {}", i + 1)))?;
        let m = parts
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| Error::invalid(format!("bad curve CSV line {}", i + 1)))?;
        frequencies.push(f);
        modulation.push(m);
    }
    if frequencies.is_empty() {
        return Err(Error::invalid("curve CSV has no data rows"));
    }
    Ok(MtfCurve {
        frequencies,
        modulation,
        orientation: 0.0,
    })
}

/// One row of a per-cell kernel score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Writes per-cell scores plus a trailing `mean` summary row.
pub fn write_scores_csv(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("no score rows to write"));
    }
    let mut out = String::from("row,col,channel,psnr_db,ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.row, r.col, r.channel, r.psnr_db, r.ssim
        ));
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    out.push_str(&format!("mean,,,{mean_psnr},{mean_ssim}\n"));
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Reads the per-cell rows of a score table, skipping the summary row.
pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() || line.starts_with("mean") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::invalid(format!("bad score CSV line {}", i + 1)));
        }
        let bad = || Error::invalid(format!("bad score CSV line {}", i + 1));
        rows.push(ScoreRow {
            row: parts[0].parse().map_err(|_| bad())?,
            col: parts[1].parse().map_err(|_| bad())?,
            channel: parts[2].parse().map_err(|_| bad())?,
            psnr_db: parts[3].parse().map_err(|_| bad())?,
            ssim: parts[4].parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("score CSV has no data rows"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimConfig;

    fn test_image(w: usize, h: usize, ch: usize) -> Image {
        let mut img = Image::new(w, h, ch);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 + 11) % 101) as f64 / 100.0;
        }
        img
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        for ch in [1, 3] {
            let img = test_image(9, 7, ch);
            let path = dir.path().join(format!("t{ch}.png"));
            save_png16(&img, &path).unwrap();
            let back = load_png16(&path).unwrap();
            assert!(back.same_shape(&img));
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn png_export_clamps_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 4, 1);
        img.data_mut()[0] = 1.5;
        img.data_mut()[1] = -0.25;
        let path = dir.path().join("clamp.png");
        save_png16(&img, &path).unwrap();
        let back = load_png16(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert_eq!(back.get(1, 0, 0), 0.0);
    }

    #[test]
    fn png_rejects_two_channel_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(4, 4, 2);
        assert!(save_png16(&img, dir.path().join("bad.png")).is_err());
    }

    #[test]
    fn pfm_roundtrip_is_float_exact() {
        let dir = tempfile::tempdir().unwrap();
        for ch in [1, 3] {
            let mut img = test_image(6, 5, ch);
            img.data_mut()[0] = -3.75; // PFM carries out-of-range values
            let path = dir.path().join(format!("t{ch}.pfm"));
            save_pfm(&img, &path).unwrap();
            let back = load_pfm(&path).unwrap();
            assert!(back.same_shape(&img));
            for (a, b) in back.data().iter().zip(img.data()) {
                assert_eq!(*a, (*b as f32) as f64, "exact at 32-bit precision");
            }
        }
    }

    #[test]
    fn pfm_header_is_conventional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.pfm");
        save_pfm(&test_image(5, 3, 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n5 3\n-1\n"));
        assert_eq!(bytes.len(), "Pf\n5 3\n-1\n".len() + 5 * 3 * 4);
    }

    #[test]
    fn flow_pfm_and_quiver_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = FlowField::zero(6, 4);
        for y in 0..4 {
            for x in 0..6 {
                v.set(x, y, x as f64 * 0.25, -(y as f64) * 0.5);
            }
        }
        let path = dir.path().join("flow.pfm");
        save_flow_pfm(&v, &path).unwrap();
        let back = load_flow_pfm(&path).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let (adx, ady) = back.get(x, y);
                let (edx, edy) = v.get(x, y);
                assert_eq!(adx, (edx as f32) as f64);
                assert_eq!(ady, (edy as f32) as f64);
            }
        }

        let csv = dir.path().join("flow.csv");
        write_flow_quiver_csv(&v, &csv, 2).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,dx,dy");
        assert_eq!(lines.len(), 1 + 2 * 3); // 3 x-samples, 2 y-samples
        assert_eq!(lines[1], "0,0,0,-0");
        assert!(write_flow_quiver_csv(&v, &csv, 0).is_err());
    }

    #[test]
    fn kernel_json_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let k = Kernel::gaussian(7, 1.3);
        let path = dir.path().join("k.json");
        save_kernel_json(&k, &path).unwrap();
        let back = load_kernel_json(&path).unwrap();
        assert_eq!(back.side(), 7);
        assert_eq!(back.data(), k.data(), "float text round trip must be exact");

        save_kernel_json(&k, dir.path().join("k2.json")).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("k2.json")).unwrap(),
            "writer must be deterministic"
        );
    }

    #[test]
    fn kernel_json_loader_rejects_invalid_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"side":1,"data":[-1.0]}"#).unwrap();
        assert!(load_kernel_json(&path).is_err());
    }

    #[test]
    fn kernel_heatmap_normalizes_to_peak() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.png");
        save_kernel_heatmap(&Kernel::delta(5), &path, 4).unwrap();
        let img = load_png16(&path).unwrap();
        assert_eq!((img.width(), img.height()), (20, 20));
        assert_eq!(img.get(10, 10, 0), 1.0, "center cell at the peak");
        assert_eq!(img.get(0, 0, 0), 0.0);
    }

    #[test]
    fn psf_field_directory_roundtrip_preserves_holes() {
        let dir = tempfile::tempdir().unwrap();
        let mut field = PsfField::new(2, 3, 2);
        for r in 0..2 {
            for c in 0..3 {
                for ch in 0..2 {
                    if (r, c, ch) == (1, 2, 0) {
                        continue; // deliberate hole
                    }
                    field.set(r, c, ch, Kernel::gaussian(5, 0.6 + c as f64 * 0.3));
                }
            }
        }
        let root = dir.path().join("field");
        save_psf_field(&field, &root).unwrap();
        let back = load_psf_field(&root).unwrap();
        assert_eq!(back.hole_count(), 1);
        assert!(back.kernel(1, 2, 0).is_none());
        for (r, c, ch, k) in field.iter() {
            assert_eq!(back.kernel(r, c, ch).unwrap().data(), k.data());
        }

        let root2 = dir.path().join("field2");
        save_psf_field(&field, &root2).unwrap();
        assert_eq!(
            fs::read(root.join("field.json")).unwrap(),
            fs::read(root2.join("field.json")).unwrap(),
            "index writer must be deterministic"
        );
    }

    #[test]
    fn raw_mosaic_roundtrip_keeps_pattern() {
        let dir = tempfile::tempdir().unwrap();
        let raw = RawMosaic {
            pattern: CfaPattern::Grbg,
            image: test_image(8, 6, 1),
        };
        let path = dir.path().join("raw.png");
        save_raw_mosaic(&raw, &path).unwrap();
        let back = load_raw_mosaic(&path).unwrap();
        assert_eq!(back.pattern, CfaPattern::Grbg);
        assert!(back.image.same_shape(&raw.image));
    }

    #[test]
    fn config_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = OptimConfig {
            kernel_side: 15,
            seed: 42,
            ..OptimConfig::default()
        };
        let path = dir.path().join("optim.json");
        save_json(&cfg, &path).unwrap();
        let back: OptimConfig = load_json(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            serde_json::to_string(&cfg).unwrap()
        );
    }

    #[test]
    fn loss_trace_and_curve_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = vec![0.5, 0.25, 0.1250001];
        let tpath = dir.path().join("trace.csv");
        write_loss_trace_csv(&trace, &tpath).unwrap();
        let text = fs::read_to_string(&tpath).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().nth(1).unwrap(), "0,0.5");

        let curve = MtfCurve {
            frequencies: vec![0.0, 0.25, 0.5],
            modulation: vec![1.0, 0.7071, 0.3],
            orientation: 0.0,
        };
        let cpath = dir.path().join("curve.csv");
        write_curve_csv(&curve, &cpath).unwrap();
        let back = read_curve_csv(&cpath).unwrap();
        assert_eq!(back.frequencies, curve.frequencies);
        assert_eq!(back.modulation, curve.modulation);
    }

    #[test]
    fn scores_csv_roundtrip_with_summary_row() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ScoreRow {
                row: 0,
                col: 0,
                channel: 0,
                psnr_db: 41.25,
                ssim: 0.985,
            },
            ScoreRow {
                row: 0,
                col: 1,
                channel: 0,
                psnr_db: 38.75,
                ssim: 0.978,
            },
        ];
        let path = dir.path().join("scores.csv");
        write_scores_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().last().unwrap().starts_with("mean,,,40,"));
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(back, rows);
        assert!(write_scores_csv(&[], dir.path().join("e.csv")).is_err());
    }
}
