//! Disparity and image file formats: PFM float maps, 16-bit PNG disparity
//! encoding, 8-bit PNG images, and the on-disk dataset layout
//! `{split}/{idx}_left.png, {idx}_right.png, {idx}_disp.png`.

use crate::data::StereoSample;
use crate::error::{Error, Result};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use std::fs;
use std::path::Path;

fn io_err(context: &str, e: std::io::Error) -> Error {
    Error::io(context.to_string(), e)
}

fn img_err(context: &Path, e: image::ImageError) -> Error {
    Error::Format(format!("{}: {e}", context.display()))
}

/// Write a grayscale PFM file (little-endian, bottom-to-top rows, 32-bit
/// floats).
pub fn write_pfm(path: impl AsRef<Path>, data: &[f64], h: usize, w: usize) -> Result<()> {
    let path = path.as_ref();
    if data.len() != h * w || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch {
            op: "write_pfm",
            lhs: vec![data.len()],
            rhs: vec![h, w],
        });
    }
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(4 * data.len());
    for y in (0..h).rev() {
        for x in 0..w {
            bytes.extend_from_slice(&(data[y * w + x] as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(&path.display().to_string(), e))
}

/// Read a grayscale PFM file. Returns the map in top-to-bottom row order
/// along with its height and width. The scale's sign selects endianness;
/// its magnitude is ignored.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(&path.display().to_string(), e))?;
    let malformed = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

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
            return Err(malformed("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err(malformed("color PFM not supported")),
        _ => return Err(malformed("not a PFM file")),
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| malformed("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| malformed("bad height"))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| malformed("bad scale"))?;
    if scale == 0.0 || w == 0 || h == 0 {
        return Err(malformed("bad header values"));
    }
    // Exactly one whitespace byte separates the header from the data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing header terminator"));
    }
    pos += 1;
    let expect = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed("dimensions overflow"))?;
    if bytes.len() - pos != expect {
        return Err(malformed("payload size does not match dimensions"));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let raw: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            // PFM rows run bottom-to-top.
            data[(h - 1 - y) * w + x] = v as f64;
            pos += 4;
        }
    }
    Ok((data, h, w))
}

/// Write a disparity map as 16-bit PNG: stored value `round(d · 256)`, with
/// 0 reserved for invalid pixels. Valid disparities that round to 0 are
/// unrepresentable and read back as invalid; disparities at or above 256
/// overflow and are rejected.
pub fn write_disp_png(
    path: impl AsRef<Path>,
    d: &[f64],
    valid: &[bool],
    h: usize,
    w: usize,
) -> Result<()> {
    let path = path.as_ref();
    if d.len() != h * w || valid.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "write_disp_png",
            lhs: vec![d.len(), valid.len()],
            rhs: vec![h, w],
        });
    }
    let mut buf = Vec::with_capacity(h * w);
    for i in 0..d.len() {
        if !valid[i] {
            buf.push(0u16);
            continue;
        }
        if d[i].is_nan() || d[i] < 0.0 {
            return Err(Error::domain("write_disp_png", "negative or NaN disparity"));
        }
        if d[i] >= 256.0 {
            return Err(Error::domain("write_disp_png", "disparity of 256 px or more overflows"));
        }
        let stored = (d[i] * 256.0).round();
        if stored > 65535.0 {
            return Err(Error::domain("write_disp_png", "encoded disparity overflows 16 bits"));
        }
        buf.push(stored as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    img.save(path).map_err(|e| img_err(path, e))
}

/// Read a 16-bit PNG disparity map; returns disparities, validity, height,
/// width. Stored 0 means invalid.
pub fn read_disp_png(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<bool>, usize, usize)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| img_err(path, e))?;
    let buf = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 16-bit grayscale PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let raw = buf.into_raw();
    let d: Vec<f64> = raw.iter().map(|&v| v as f64 / 256.0).collect();
    let valid: Vec<bool> = raw.iter().map(|&v| v != 0).collect();
    Ok((d, valid, h, w))
}

/// Write a `[C, H, W]` float image in `[0, 1]` as 8-bit grayscale (C=1) or
/// RGB (C=3) PNG.
pub fn write_image_png(
    path: impl AsRef<Path>,
    img: &[f64],
    channels: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    let path = path.as_ref();
    if img.len() != channels * h * w {
        return Err(Error::ShapeMismatch {
            op: "write_image_png",
            lhs: vec![img.len()],
            rhs: vec![channels, h, w],
        });
    }
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match channels {
        1 => {
            let buf: Vec<u8> = img.iter().map(|&v| quant(v)).collect();
            let out: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w as u32, h as u32, buf).expect("sized buffer");
            out.save(path).map_err(|e| img_err(path, e))
        }
        3 => {
            let pixels = h * w;
            let mut buf = Vec::with_capacity(3 * pixels);
            for i in 0..pixels {
                for c in 0..3 {
                    buf.push(quant(img[c * pixels + i]));
                }
            }
            let out: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w as u32, h as u32, buf).expect("sized buffer");
            out.save(path).map_err(|e| img_err(path, e))
        }
        _ => Err(Error::domain("write_image_png", "channels must be 1 or 3")),
    }
}

/// Read an 8-bit grayscale or RGB PNG into a `[C, H, W]` float image in
/// `[0, 1]`; returns the image, channel count, height, width.
pub fn read_image_png(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize, usize)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| img_err(path, e))?;
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let data: Vec<f64> = buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Ok((data, 1, h, w))
        }
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let raw = buf.into_raw();
            let pixels = h * w;
            let mut data = vec![0.0; 3 * pixels];
            for i in 0..pixels {
                for c in 0..3 {
                    data[c * pixels + i] = raw[3 * i + c] as f64 / 255.0;
                }
            }
            Ok((data, 3, h, w))
        }
        other => Err(Error::Format(format!(
            "{}: expected 8-bit grayscale or RGB PNG, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Write samples under `dir/split` as `{idx}_left.png`, `{idx}_right.png`,
/// `{idx}_disp.png`. Images quantize to 8 bits, disparities to 1/256 px.
pub fn save_dataset(dir: impl AsRef<Path>, split: &str, samples: &[StereoSample]) -> Result<()> {
    let root = dir.as_ref().join(split);
    fs::create_dir_all(&root).map_err(|e| io_err(&root.display().to_string(), e))?;
    for (idx, s) in samples.iter().enumerate() {
        write_image_png(root.join(format!("{idx:04}_left.png")), &s.left, s.channels, s.h, s.w)?;
        write_image_png(root.join(format!("{idx:04}_right.png")), &s.right, s.channels, s.h, s.w)?;
        write_disp_png(root.join(format!("{idx:04}_disp.png")), &s.d_gt_dense, &s.valid, s.h, s.w)?;
    }
    Ok(())
}

/// Load every sample under `dir/split`, ordered by index. A sample's seed
/// field is set to its index.
pub fn load_dataset(dir: impl AsRef<Path>, split: &str) -> Result<Vec<StereoSample>> {
    let root = dir.as_ref().join(split);
    let entries = fs::read_dir(&root).map_err(|e| io_err(&root.display().to_string(), e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(&root.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_left.png") {
            let idx: usize = stem.parse().map_err(|_| {
                Error::Format(format!("{}: unparsable sample index", entry.path().display()))
            })?;
            indices.push((idx, stem.to_string()));
        }
    }
    indices.sort_unstable();
    let mut samples = Vec::with_capacity(indices.len());
    for (idx, stem) in indices {
        let name = |kind: &str| root.join(format!("{stem}_{kind}.png"));
        let (left, c_l, h_l, w_l) = read_image_png(name("left"))?;
        let (right, c_r, h_r, w_r) = read_image_png(name("right"))?;
        let (d_gt, valid, h_d, w_d) = read_disp_png(name("disp"))?;
        if (c_l, h_l, w_l) != (c_r, h_r, w_r) || (h_l, w_l) != (h_d, w_d) {
            return Err(Error::Format(format!(
                "{}: mismatched shapes across sample files",
                root.display()
            )));
        }
        samples.push(StereoSample {
            left,
            right,
            d_gt_dense: d_gt,
            valid,
            seed: idx as u64,
            channels: c_l,
            h: h_l,
            w: w_l,
        });
    }
    Ok(samples)
}
