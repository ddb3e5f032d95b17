//! Decimal formatting shared by every numeric artifact.

/// Formats `x` with 17 significant digits, which round-trips any `f64`
/// exactly through `str::parse`.
pub fn f17(x: f64) -> String {
    format!("{:.16e}", x)
}
