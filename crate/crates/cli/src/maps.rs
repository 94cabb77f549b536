//! Feature maps on disk and scalar formatting for `nuc loss`.
//!
//! A map file is either a grayscale PNG/PGM (one map) or plain text: rows of
//! whitespace-separated reals, with blank lines separating successive maps.

use std::path::Path;

use nuc_core::{load_image, Error, GrayImage, IoError, Result};

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm")
    )
}

pub fn parse_matrices(text: &str, path: &Path) -> Result<Vec<GrayImage>> {
    let mut maps = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let flush = |rows: &mut Vec<Vec<f64>>, maps: &mut Vec<GrayImage>| -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let width = rows[0].len();
        if let Some(bad) = rows.iter().position(|r| r.len() != width) {
            return Err(IoError::Malformed {
                path: path.into(),
                detail: format!("row {} of map {} has {} values, expected {width}", bad + 1, maps.len() + 1, rows[bad].len()),
            }
            .into());
        }
        let height = rows.len();
        let data = rows.drain(..).flatten().collect();
        maps.push(GrayImage::new(width, height, data)?);
        Ok(())
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut rows, &mut maps)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| IoError::Malformed { path: path.into(), detail: format!("line {}: {e}", n + 1) })?;
        rows.push(row);
    }
    flush(&mut rows, &mut maps)?;
    if maps.is_empty() {
        return Err(IoError::Malformed { path: path.into(), detail: "no matrix found".into() }.into());
    }
    Ok(maps)
}

/// All maps in the given files, in order.
pub fn read_maps(paths: &[impl AsRef<Path>]) -> Result<Vec<GrayImage>> {
    let mut out = Vec::new();
    for p in paths {
        let p = p.as_ref();
        if is_image(p) {
            out.push(load_image(p)?);
        } else {
            let text = std::fs::read_to_string(p).map_err(|e| IoError::Os { path: p.into(), source: e })?;
            out.extend(parse_matrices(&text, p)?);
        }
    }
    Ok(out)
}

pub fn read_single(paths: &[impl AsRef<Path>], what: &str) -> Result<GrayImage> {
    let mut maps = read_maps(paths)?;
    if maps.len() != 1 {
        return Err(Error::Param(format!("{what}: expected one map, found {}", maps.len())));
    }
    Ok(maps.remove(0))
}

/// `printf("%.12g")`.
pub fn sig12(v: f64) -> String {
    const DIGITS: i32 = 12;
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if exp < -4 || exp >= DIGITS {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    } else {
        trim(format!("{:.*}", (DIGITS - 1 - exp) as usize, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig12_matches_printf() {
        assert_eq!(sig12(std::f64::consts::LN_2), "0.69314718056");
        assert_eq!(sig12(2.0), "2");
        assert_eq!(sig12(0.0), "0");
        assert_eq!(sig12(-1.5e-7), "-1.5e-07");
        assert_eq!(sig12(123456789012345.0), "1.23456789012e+14");
        assert_eq!(sig12(0.5), "0.5");
        assert_eq!(sig12(99999.99999999999), "100000");
    }

    #[test]
    fn matrices_parse() {
        let p = Path::new("m.txt");
        let maps = parse_matrices("1 2\n3 4\n\n# next\n5 6 7\n", p).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].dims(), (2, 2));
        assert_eq!(maps[1].data(), &[5.0, 6.0, 7.0]);
        assert!(parse_matrices("1 2\n3\n", p).is_err());
        assert!(parse_matrices("1 x\n", p).is_err());
        assert!(parse_matrices("\n\n", p).is_err());
    }
}
