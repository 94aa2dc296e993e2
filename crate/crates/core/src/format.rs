//! Text formatting shared by the JSON and CSV writers.

/// Seventeen significant digits in scientific notation, enough to round-trip
/// any `f64` exactly. The output is a valid JSON number.
pub fn f64_17(x: f64) -> String {
    if x == 0.0 {
        // normalise -0.0 so identical values always print identically
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}
