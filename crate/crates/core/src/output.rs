//! Number formatting shared by the CSV/JSON writers.

/// Digits used for reported numbers unless raw output is requested.
pub const REPORT_DIGITS: usize = 6;

/// Formats `x` with `digits` significant digits, `%g` style: fixed notation
/// for moderate exponents, scientific otherwise, trailing zeros removed.
pub fn sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

/// Rounds `x` to `digits` significant digits, keeping it a float.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    sig(x, digits).parse().unwrap_or(x)
}

/// Either the shortest round-trip representation or [`sig`] at
/// [`REPORT_DIGITS`].
pub fn number(x: f64, raw: bool) -> String {
    if raw {
        if x.is_finite() {
            format!("{x:?}")
        } else {
            sig(x, REPORT_DIGITS)
        }
    } else {
        sig(x, REPORT_DIGITS)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
