//! Adobe/IRIDAS `.cube` export and import for 3D LUTs. Data lines hold one
//! lattice node as "r g b" with the red index varying fastest, which matches
//! the LUT's internal entry order; seven decimals keep the round trip well
//! inside 1e-6.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::tone::Lut3D;

/// Renders a LUT as `.cube` text.
pub fn write_cube<T: Scalar>(lut: &Lut3D<T>) -> String {
    let v = lut.size();
    let mut out = String::with_capacity(32 + v * v * v * 30);
    out.push_str("# 3D LUT exported by pyrtone\n");
    let _ = writeln!(out, "LUT_3D_SIZE {v}");
    let nodes = v * v * v;
    let entries = lut.entries();
    for i in 0..nodes {
        let _ = writeln!(
            out,
            "{:.7} {:.7} {:.7}",
            entries[i].as_f64(),
            entries[nodes + i].as_f64(),
            entries[2 * nodes + i].as_f64()
        );
    }
    out
}

/// Writes a LUT to a `.cube` file.
pub fn export_cube<T: Scalar>(lut: &Lut3D<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_cube(lut)).map_err(|e| Error::io(path, e))
}

/// Parses `.cube` text back into a LUT. Accepts comments, TITLE, and a unit
/// DOMAIN_MIN/MAX; anything else is rejected.
pub fn import_cube<T: Scalar>(text: &str, path: impl AsRef<Path>) -> Result<Lut3D<T>> {
    let path = path.as_ref();
    let fail = |msg: String| Error::codec(path, msg);
    let mut size = 0usize;
    let mut values: Vec<[f64; 3]> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("TITLE") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("LUT_3D_SIZE") {
            size = rest
                .trim()
                .parse()
                .map_err(|_| fail(format!("line {}: bad LUT_3D_SIZE", lineno + 1)))?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("DOMAIN_MIN") {
            expect_triple(rest, 0.0).map_err(|m| fail(format!("line {}: {m}", lineno + 1)))?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("DOMAIN_MAX") {
            expect_triple(rest, 1.0).map_err(|m| fail(format!("line {}: {m}", lineno + 1)))?;
            continue;
        }
        let mut rgb = [0.0f64; 3];
        let mut parts = line.split_whitespace();
        for slot in &mut rgb {
            *slot = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| fail(format!("line {}: expected three numbers", lineno + 1)))?;
        }
        if parts.next().is_some() {
            return Err(fail(format!("line {}: trailing tokens", lineno + 1)));
        }
        values.push(rgb);
    }
    if size < 2 {
        return Err(fail("missing or undersized LUT_3D_SIZE".into()));
    }
    let nodes = size * size * size;
    if values.len() != nodes {
        return Err(fail(format!("expected {nodes} data lines, got {}", values.len())));
    }
    let mut entries = vec![T::zero(); 3 * nodes];
    for (i, rgb) in values.iter().enumerate() {
        for c in 0..3 {
            entries[c * nodes + i] = T::from_f64(rgb[c]);
        }
    }
    Lut3D::new(size, entries)
}

fn expect_triple(rest: &str, want: f64) -> std::result::Result<(), String> {
    let vals: Vec<f64> = rest
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("bad number {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if vals.len() != 3 || vals.iter().any(|v| *v != want) {
        return Err(format!("only the unit domain is supported, got {rest:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_lut_exports_lattice_coordinates() {
        let lut = Lut3D::<f64>::identity(3);
        let text = write_cube(&lut);
        let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with(['#', 'L'])).collect();
        assert_eq!(lines.len(), 27);
        assert_eq!(lines[0], "0.0000000 0.0000000 0.0000000");
        // Node 1 is red index 1: r = 0.5, g = b = 0.
        assert_eq!(lines[1], "0.5000000 0.0000000 0.0000000");
        assert_eq!(lines[26], "1.0000000 1.0000000 1.0000000");
    }

    #[test]
    fn cube_v9_has_729_data_lines() {
        let lut = Lut3D::<f64>::identity(9);
        let text = write_cube(&lut);
        let data = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#') && !l.starts_with("LUT"))
            .count();
        assert_eq!(data, 729);
    }
}
