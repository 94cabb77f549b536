//! Lossless grayscale image files: 8/16-bit PNG and binary PGM (P5).
//!
//! Reading normalizes to `[0, 1]` (divide by 255 or 65535). Writing clamps
//! to `[0, 1]` and rounds to the nearest code.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{IoError, Result};
use crate::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_code(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Reads a PNG or PGM file, selected by content rather than extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IoError::os(path, e))?;
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(path, &bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' {
        decode_pgm(path, &bytes)
    } else {
        Err(IoError::Unsupported {
            path: path.into(),
            detail: "neither PNG nor PGM signature".into(),
        }
        .into())
    }
}

/// Writes `img` as PNG or PGM depending on the file extension.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(path, img, depth)?,
        Some("pgm") => encode_pgm(img, depth),
        _ => {
            return Err(IoError::Unsupported {
                path: path.into(),
                detail: "output extension must be .png or .pgm".into(),
            }
            .into())
        }
    };
    let file = fs::File::create(path).map_err(|e| IoError::os(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| IoError::os(path, e))?;
    Ok(())
}

/// Clamped, rounded integer codes for every pixel.
pub fn quantize(img: &GrayImage, depth: BitDepth) -> Vec<u16> {
    let max = depth.max_code();
    img.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * max).round() as u16)
        .collect()
}

fn from_codes(path: &Path, width: usize, height: usize, codes: Vec<f64>) -> Result<GrayImage> {
    GrayImage::new(width, height, codes)
        .map_err(|e| IoError::malformed(path, e.to_string()).into())
}

fn samples_to_unit(raw: &[u8], depth: BitDepth, count: usize) -> Vec<f64> {
    let max = depth.max_code();
    match depth {
        BitDepth::Eight => raw[..count].iter().map(|&b| b as f64 / max).collect(),
        BitDepth::Sixteen => raw[..2 * count]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / max)
            .collect(),
    }
}

fn codes_to_bytes(codes: &[u16], depth: BitDepth) -> Vec<u8> {
    match depth {
        BitDepth::Eight => codes.iter().map(|&c| c as u8).collect(),
        BitDepth::Sixteen => codes.iter().flat_map(|c| c.to_be_bytes()).collect(),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let (color, bit_depth) = reader.output_color_type();
    let channels = color.samples();
    if channels != 1 || color == png::ColorType::Indexed {
        return Err(match color {
            png::ColorType::Indexed => IoError::Unsupported {
                path: path.into(),
                detail: "palette PNG".into(),
            },
            _ => IoError::MultiChannel {
                path: path.into(),
                channels,
            },
        }
        .into());
    }
    let depth = match bit_depth {
        png::BitDepth::Eight => BitDepth::Eight,
        png::BitDepth::Sixteen => BitDepth::Sixteen,
        other => {
            return Err(IoError::Unsupported {
                path: path.into(),
                detail: format!("{other:?} grayscale PNG"),
            }
            .into())
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| IoError::malformed(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    from_codes(path, w, h, samples_to_unit(&buf, depth, w * h))
}

fn png_error(path: &Path, err: png::DecodingError) -> crate::Error {
    match err {
        png::DecodingError::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            IoError::Truncated { path: path.into() }.into()
        }
        png::DecodingError::IoError(e) => IoError::os(path, e).into(),
        other => IoError::malformed(path, other.to_string()).into(),
    }
}

fn encode_png(path: &Path, img: &GrayImage, depth: BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(match depth {
            BitDepth::Eight => png::BitDepth::Eight,
            BitDepth::Sixteen => png::BitDepth::Sixteen,
        });
        let bytes = codes_to_bytes(&quantize(img, depth), depth);
        let mut writer = encoder
            .write_header()
            .map_err(|e| IoError::malformed(path, e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| IoError::malformed(path, e.to_string()))?;
    }
    Ok(out)
}

fn encode_pgm(img: &GrayImage, depth: BitDepth) -> Vec<u8> {
    let mut out = format!(
        "P5\n{} {}\n{}\n",
        img.width(),
        img.height(),
        depth.max_code() as u32
    )
    .into_bytes();
    out.extend(codes_to_bytes(&quantize(img, depth), depth));
    out
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    match &bytes[..2] {
        b"P5" => {}
        b"P6" | b"P3" => {
            return Err(IoError::MultiChannel {
                path: path.into(),
                channels: 3,
            }
            .into())
        }
        _ => {
            return Err(IoError::Unsupported {
                path: path.into(),
                detail: "only binary P5 graymaps are supported".into(),
            }
            .into())
        }
    }

    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(IoError::Truncated { path: path.into() }.into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::malformed(path, "bad PGM header").into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IoError::malformed(path, "bad PGM header"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        None => return Err(IoError::Truncated { path: path.into() }.into()),
        _ => return Err(IoError::malformed(path, "bad PGM header").into()),
    }

    let [w, h, maxval] = fields;
    let depth = match maxval {
        255 => BitDepth::Eight,
        65535 => BitDepth::Sixteen,
        other => {
            return Err(IoError::Unsupported {
                path: path.into(),
                detail: format!("PGM maxval {other}"),
            }
            .into())
        }
    };
    let bps = if depth == BitDepth::Eight { 1 } else { 2 };
    let raster = &bytes[pos..];
    if raster.len() < w * h * bps {
        return Err(IoError::Truncated { path: path.into() }.into());
    }
    from_codes(path, w, h, samples_to_unit(raster, depth, w * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, w: usize, h: usize) -> GrayImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    #[test]
    fn sixteen_bit_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(1, 37, 23);
        for name in ["a.png", "a.pgm"] {
            let path = dir.path().join(name);
            save_image(&img, &path, BitDepth::Sixteen).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.dims(), img.dims());
            let worst = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 0.5 / 65535.0 + 1e-15, "{name}: {worst}");
        }
    }

    #[test]
    fn eight_bit_clamps_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(3, 1, vec![1.3, -0.2, 1.0]).unwrap();
        for name in ["b.png", "b.pgm"] {
            let path = dir.path().join(name);
            save_image(&img, &path, BitDepth::Eight).unwrap();
            assert_eq!(quantize(&img, BitDepth::Eight), vec![255, 0, 255]);
            let back = load_image(&path).unwrap();
            assert_eq!(back.data(), &[1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn rgb_png_is_multichannel_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0; 12]).unwrap();
        }
        fs::write(&path, &buf).unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(matches!(
            err,
            Error::Io(IoError::MultiChannel { channels: 3, .. })
        ));
    }

    #[test]
    fn truncated_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(2, 16, 16);
        for name in ["t.png", "t.pgm"] {
            let path = dir.path().join(name);
            save_image(&img, &path, BitDepth::Sixteen).unwrap();
            let bytes = fs::read(&path).unwrap();
            fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
            let err = load_image(&path).unwrap_err();
            assert!(
                matches!(err, Error::Io(IoError::Truncated { .. })),
                "{name}: {err}"
            );
        }
    }

    #[test]
    fn unknown_formats_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"GIF89a....").unwrap();
        assert!(matches!(
            load_image(&path).unwrap_err(),
            Error::Io(IoError::Unsupported { .. })
        ));
        fs::write(&path, b"P5\n2 2\n1023\n\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            load_image(&path).unwrap_err(),
            Error::Io(IoError::Unsupported { .. })
        ));
        assert!(save_image(&GrayImage::filled(1, 1, 0.0), dir.path().join("x.jpg"), BitDepth::Eight).is_err());
    }

    #[test]
    fn pgm_header_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(load_image(&path).unwrap().data(), &[0.0, 1.0]);
    }
}
