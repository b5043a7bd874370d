//! Image file formats.
//!
//! LDR inputs come in as 8/16-bit PNG (via the `image` crate) or binary PPM
//! (hand-parsed, big-endian 16-bit samples per the netpbm convention). HDR
//! interchange uses PFM: `PF` header, `width height`, scale `-1.0` for
//! little-endian floats, rows stored bottom-to-top. Tonemapped previews are
//! written as 8-bit PNG after μ-law compression.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::pipeline::{self, PipelineError, Raster};

/// Refuse rasters whose float payload would exceed this many samples.
const MAX_SAMPLES: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: unsupported image format (expected {expected})")]
    UnsupportedFormat { path: String, expected: &'static str },
    #[error("{path}: corrupt header: {detail}")]
    CorruptHeader { path: String, detail: String },
    #[error("{path}: image dimensions {width}x{height} overflow the supported range")]
    DimensionOverflow { path: String, width: usize, height: usize },
    #[error("{path}: {detail}")]
    Decode { path: String, detail: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn io_err(path: &Path, source: io::Error) -> ImageIoError {
    ImageIoError::Io { path: path.display().to_string(), source }
}

fn header_err(path: &Path, detail: impl Into<String>) -> ImageIoError {
    ImageIoError::CorruptHeader { path: path.display().to_string(), detail: detail.into() }
}

fn check_dims(path: &Path, width: usize, height: usize) -> Result<(), ImageIoError> {
    let samples = width.checked_mul(height).and_then(|p| p.checked_mul(3));
    match samples {
        Some(s) if s <= MAX_SAMPLES && width > 0 && height > 0 => Ok(()),
        _ => Err(ImageIoError::DimensionOverflow {
            path: path.display().to_string(),
            width,
            height,
        }),
    }
}

/// Reads an LDR image (PNG or binary PPM) and normalizes it to `[0, 1]`,
/// mapping the integer range endpoints to exactly 0 and 1.
pub fn read_ldr(path: impl AsRef<Path>) -> Result<Raster, ImageIoError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => read_png(path),
        "ppm" => read_ppm(path),
        _ => Err(ImageIoError::UnsupportedFormat {
            path: path.display().to_string(),
            expected: "png or ppm",
        }),
    }
}

fn read_png(path: &Path) -> Result<Raster, ImageIoError> {
    use image::DynamicImage;
    let img = image::open(path)
        .map_err(|e| ImageIoError::Decode { path: path.display().to_string(), detail: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    check_dims(path, w, h)?;
    let data: Vec<f32> = match img {
        DynamicImage::ImageRgb8(buf) => buf.into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageRgba8(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|px| px[..3].iter().map(|&v| v as f32 / 255.0).collect::<Vec<_>>())
            .collect(),
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .iter()
            .flat_map(|&v| {
                let f = v as f32 / 255.0;
                [f, f, f]
            })
            .collect(),
        DynamicImage::ImageRgb16(buf) => {
            buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()
        }
        DynamicImage::ImageRgba16(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|px| px[..3].iter().map(|&v| v as f32 / 65535.0).collect::<Vec<_>>())
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .iter()
            .flat_map(|&v| {
                let f = v as f32 / 65535.0;
                [f, f, f]
            })
            .collect(),
        _ => {
            return Err(ImageIoError::UnsupportedFormat {
                path: path.display().to_string(),
                expected: "8/16-bit gray or RGB(A) PNG",
            })
        }
    };
    Ok(Raster::new(w, h, data)?)
}

/// Reads one whitespace-delimited PPM header token, skipping `#` comments.
fn ppm_token(reader: &mut impl Read, path: &Path) -> Result<String, ImageIoError> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if reader.read(&mut byte).map_err(|e| io_err(path, e))? == 0 {
            if token.is_empty() {
                return Err(header_err(path, "unexpected end of header"));
            }
            return Ok(token);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c);
    }
}

fn read_ppm(path: &Path) -> Result<Raster, ImageIoError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);

    let magic = ppm_token(&mut reader, path)?;
    if magic != "P6" {
        return Err(header_err(path, format!("expected binary PPM magic P6, got {magic:?}")));
    }
    let parse = |s: String| -> Result<usize, ImageIoError> {
        s.parse::<usize>().map_err(|_| header_err(path, format!("bad header field {s:?}")))
    };
    let width = parse(ppm_token(&mut reader, path)?)?;
    let height = parse(ppm_token(&mut reader, path)?)?;
    let maxval = parse(ppm_token(&mut reader, path)?)?;
    check_dims(path, width, height)?;
    if maxval == 0 || maxval > 65535 {
        return Err(header_err(path, format!("maxval {maxval} out of range 1..=65535")));
    }

    let samples = width * height * 3;
    let data = if maxval < 256 {
        let mut buf = vec![0u8; samples];
        reader.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        buf.iter().map(|&v| v as f32 / maxval as f32).collect()
    } else {
        // 16-bit samples are big-endian, most significant byte first
        let mut buf = vec![0u8; samples * 2];
        reader.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        buf.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / maxval as f32)
            .collect()
    };
    Ok(Raster::new(width, height, data)?)
}

/// Writes a linear HDR raster as PFM, bit-exact little-endian floats.
pub fn write_pfm(img: &Raster, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(img.data().len() * 4 + 64);
    write!(buf, "PF\n{} {}\n-1.0\n", img.width(), img.height()).expect("in-memory write");
    // rows bottom-to-top
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            for ch in 0..3 {
                buf.extend_from_slice(&img.get(x, y, ch).to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads a PFM image (color `PF` or grayscale `Pf`, either endianness).
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Raster, ImageIoError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);

    let mut magic = String::new();
    reader.read_line(&mut magic).map_err(|e| io_err(path, e))?;
    let channels = match magic.trim() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(header_err(path, format!("expected PF or Pf, got {other:?}"))),
    };

    let mut dims = String::new();
    reader.read_line(&mut dims).map_err(|e| io_err(path, e))?;
    let mut parts = dims.split_whitespace();
    let parse_dim = |s: Option<&str>| -> Result<usize, ImageIoError> {
        s.and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| header_err(path, format!("bad dimensions line {dims:?}")))
    };
    let width = parse_dim(parts.next())?;
    let height = parse_dim(parts.next())?;
    check_dims(path, width, height)?;

    let mut scale_line = String::new();
    reader.read_line(&mut scale_line).map_err(|e| io_err(path, e))?;
    let scale: f32 = scale_line
        .trim()
        .parse()
        .map_err(|_| header_err(path, format!("bad scale line {scale_line:?}")))?;
    let little_endian = scale < 0.0;

    let mut buf = vec![0u8; width * height * channels * 4];
    reader.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    let floats: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| {
            let bytes = [b[0], b[1], b[2], b[3]];
            if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            }
        })
        .collect();

    // undo the bottom-to-top row order
    let mut data = vec![0f32; width * height * 3];
    for y in 0..height {
        let src_y = height - 1 - y;
        for x in 0..width {
            for ch in 0..3 {
                let src = (src_y * width + x) * channels + ch.min(channels - 1);
                data[(y * width + x) * 3 + ch] = floats[src];
            }
        }
    }
    Ok(Raster::new(width, height, data)?)
}

/// Writes an 8-bit PNG from values already in `[0, 1]`.
pub fn write_png8(img: &Raster, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("raster length checked by construction");
    buf.save(path)
        .map_err(|e| ImageIoError::Decode { path: path.display().to_string(), detail: e.to_string() })
}

/// μ-law tone maps a linear HDR raster and writes it as 8-bit PNG
/// (`round(255 * T(H))`).
pub fn write_tonemapped(img: &Raster, path: impl AsRef<Path>, mu: f64) -> Result<(), ImageIoError> {
    let mapped = pipeline::mu_law(img, mu)?;
    write_png8(&mapped, path)
}

/// Reads an exposure file: three lines, one EV float each.
pub fn read_exposures(path: impl AsRef<Path>) -> Result<[f64; 3], ImageIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let values: Vec<f64> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| header_err(path, format!("bad exposure value {l:?}")))
        })
        .collect::<Result<_, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| header_err(path, format!("expected 3 EV lines, found {}", v.len())))
}
