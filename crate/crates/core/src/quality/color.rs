//! Color-space conversions backing the color-fidelity metric.
//!
//! All functions work on f64 scalars so the metric side of the crate is
//! independent of the tensor element type. The chain used by `delta_e` is
//! sRGB -> linear RGB -> CIE XYZ (D65) -> CIELAB.

/// D65 reference white in XYZ, the white point of sRGB.
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

/// Rec. 709 / sRGB luminance weights for linear RGB.
pub const LUMA_709: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Inverts the sRGB transfer function for one encoded channel in [0, 1].
pub fn srgb_to_linear(u: f64) -> f64 {
    if u <= 0.04045 {
        u / 12.92
    } else {
        ((u + 0.055) / 1.055).powf(2.4)
    }
}

/// Applies the sRGB transfer function to one linear channel in [0, 1].
pub fn linear_to_srgb(u: f64) -> f64 {
    if u <= 0.0031308 {
        12.92 * u
    } else {
        1.055 * u.powf(1.0 / 2.4) - 0.055
    }
}

/// Linear RGB to CIE XYZ under the D65 white point.
pub fn linear_rgb_to_xyz(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    [
        0.4124564 * r + 0.3575761 * g + 0.1804375 * b,
        0.2126729 * r + 0.7151522 * g + 0.0721750 * b,
        0.0193339 * r + 0.1191920 * g + 0.9503041 * b,
    ]
}

/// CIE XYZ to CIELAB relative to D65.
pub fn xyz_to_lab(xyz: [f64; 3]) -> [f64; 3] {
    // Piecewise cube root with the linear segment below (6/29)^3 that keeps
    // the transform finite-sloped at black.
    fn f(t: f64) -> f64 {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    }
    let fx = f(xyz[0] / D65_WHITE[0]);
    let fy = f(xyz[1] / D65_WHITE[1]);
    let fz = f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Encoded sRGB (clamped to [0, 1]) straight to CIELAB.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = [
        srgb_to_linear(rgb[0].clamp(0.0, 1.0)),
        srgb_to_linear(rgb[1].clamp(0.0, 1.0)),
        srgb_to_linear(rgb[2].clamp(0.0, 1.0)),
    ];
    xyz_to_lab(linear_rgb_to_xyz(lin))
}

/// CIE76 color difference: Euclidean distance in Lab.
pub fn delta_e76(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dl = a[0] - b[0];
    let da = a[1] - b[1];
    let db = a[2] - b[2];
    (dl * dl + da * da + db * db).sqrt()
}

/// Rec. 709 luminance of one linear RGB sample.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    LUMA_709[0] * rgb[0] + LUMA_709[1] * rgb[1] + LUMA_709[2] * rgb[2]
}
