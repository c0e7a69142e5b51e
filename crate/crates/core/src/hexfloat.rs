//! C99-style hexadecimal floating-point text (`0x1.99999ap-4`).
//!
//! Every finite `f64` formats to a string that parses back to the identical
//! bit pattern. The parser also accepts plain decimal literals, `inf`, `-inf`
//! and `nan` so hand-edited files stay readable.

use std::fmt::Write;

pub fn format(value: f64) -> String {
    if value.is_nan() {
        return "nan".to_string();
    }
    if value.is_infinite() {
        return if value > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let bits = value.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let mantissa = bits & ((1u64 << 52) - 1);
    if biased == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if biased == 0 { (0, -1022) } else { (1, biased - 1023) };
    let mut out = String::with_capacity(24);
    let _ = write!(out, "{sign}0x{lead}");
    if mantissa != 0 {
        let digits = format!("{mantissa:013x}");
        let _ = write!(out, ".{}", digits.trim_end_matches('0'));
    }
    let _ = write!(out, "p{exp:+}");
    out
}

/// Parses hexadecimal or decimal floating-point text. Returns `None` on
/// malformed input.
pub fn parse(text: &str) -> Option<f64> {
    let s = text.trim();
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let hex = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"));
    let magnitude = match hex {
        Some(rest) => parse_hex_magnitude(rest)?,
        None => {
            let lower = body.to_ascii_lowercase();
            match lower.as_str() {
                "inf" | "infinity" => f64::INFINITY,
                "nan" => f64::NAN,
                _ => {
                    if !body
                        .bytes()
                        .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'+' | b'-'))
                    {
                        return None;
                    }
                    body.parse::<f64>().ok()?
                }
            }
        }
    };
    Some(if negative { -magnitude } else { magnitude })
}

fn parse_hex_magnitude(rest: &str) -> Option<f64> {
    let (digits, exp_text) = match rest.find(['p', 'P']) {
        Some(pos) => (&rest[..pos], Some(&rest[pos + 1..])),
        None => (rest, None),
    };
    let exponent: i64 = match exp_text {
        Some(t) => t.parse().ok()?,
        None => 0,
    };
    let (int_part, frac_part) = match digits.find('.') {
        Some(pos) => (&digits[..pos], &digits[pos + 1..]),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }

    // Accumulate up to 30 significant hex digits; anything further only
    // feeds the sticky bit used for rounding.
    let mut mantissa: u128 = 0;
    let mut sticky = false;
    let mut scale: i64 = 0;
    let mut significant = 0usize;
    for (i, c) in int_part.chars().chain(frac_part.chars()).enumerate() {
        let d = c.to_digit(16)? as u128;
        let fractional = i >= int_part.len();
        if mantissa == 0 && d == 0 {
            if fractional {
                scale -= 4;
            }
            continue;
        }
        if significant < 30 {
            mantissa = (mantissa << 4) | d;
            significant += 1;
            if fractional {
                scale -= 4;
            }
        } else {
            sticky |= d != 0;
            if !fractional {
                scale += 4;
            }
        }
    }
    if mantissa == 0 {
        return Some(0.0);
    }
    let mut exp2 = exponent.checked_add(scale)?;

    let bit_len = 128 - mantissa.leading_zeros() as i64;
    let top = exp2 + bit_len - 1;
    if top > 1023 {
        return Some(f64::INFINITY);
    }
    let precision = if top >= -1022 { 53 } else { 53 - (-1022 - top) };
    if precision <= 0 {
        // Below half the smallest subnormal, or exactly at it with no sticky
        // bits (ties to even round to zero).
        let half_min = precision == 0 && (mantissa.count_ones() > 1 || sticky);
        return Some(if half_min { f64::from_bits(1) } else { 0.0 });
    }
    let shift = bit_len - precision;
    if shift > 0 {
        let shift = shift as u32;
        let dropped = mantissa & ((1u128 << shift) - 1);
        let half = 1u128 << (shift - 1);
        mantissa >>= shift;
        exp2 += shift as i64;
        let round_up = dropped > half || (dropped == half && (sticky || mantissa & 1 == 1));
        if round_up {
            mantissa += 1;
        }
    }
    // mantissa < 2^54 here, exactly representable; scaling by a power of two
    // is exact because the precision was already fixed above.
    let mut value = mantissa as f64;
    let mut e = exp2;
    while e > 0 {
        let step = e.min(1000);
        value *= 2f64.powi(step as i32);
        e -= step;
    }
    while e < 0 {
        let step = (-e).min(1000);
        value *= 2f64.powi(-(step as i32));
        e += step;
    }
    Some(value)
}
