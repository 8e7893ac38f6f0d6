//! Fixed-precision rendering for terminal output.

/// Seven significant digits. Plain notation for magnitudes in [1e-3, 1e7),
/// scientific otherwise.
pub fn sig7(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0.000000".to_string();
    }
    let rounded: f64 = format!("{v:.6e}").parse().unwrap_or(v);
    let exp = rounded.abs().log10().floor() as i32;
    if (-3..7).contains(&exp) {
        format!("{v:.*}", (6 - exp) as usize)
    } else {
        format!("{v:.6e}")
    }
}

pub fn sig7_opt(v: Option<f64>) -> String {
    v.map(sig7).unwrap_or_else(|| "n/a".to_string())
}

pub fn sig7_list(vs: &[f64]) -> String {
    let items: Vec<String> = vs.iter().map(|&v| sig7(v)).collect();
    format!("[{}]", items.join(", "))
}
