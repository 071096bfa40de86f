//! Exact decimal parsing of quantities with unit suffixes (`1ms`, `1.0445us`,
//! `3.2G`) and the canonical formatting used when configs are written back.

/// Parses `text` as a non-negative decimal number followed by one of the
/// `(suffix, multiplier)` pairs, returning `number * multiplier / divisor`
/// rounded half-up. Works entirely in integers so results are exact and
/// platform independent.
pub(crate) fn parse_scaled(text: &str, suffixes: &[(&str, u128)], divisor: u128) -> Result<u64, String> {
    let text = text.trim();
    let split = text
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '_'))
        .unwrap_or(text.len());
    let (number, suffix) = text.split_at(split);
    let suffix = suffix.trim();
    let multiplier = suffixes
        .iter()
        .find(|(s, _)| *s == suffix)
        .map(|(_, m)| *m)
        .ok_or_else(|| {
            let known: Vec<&str> = suffixes.iter().map(|(s, _)| *s).collect();
            format!("unknown unit {suffix:?} in {text:?} (expected one of {known:?})")
        })?;

    let number: String = number.chars().filter(|&c| c != '_').collect();
    if number.is_empty() || number == "." {
        return Err(format!("missing number in {text:?}"));
    }
    let (int_part, frac_part) = match number.split_once('.') {
        Some((i, f)) => (i, f),
        None => (number.as_str(), ""),
    };
    if frac_part.contains('.') {
        return Err(format!("malformed number in {text:?}"));
    }
    if frac_part.len() > 18 {
        return Err(format!("too many decimal places in {text:?}"));
    }
    let digits = format!("{int_part}{frac_part}");
    let mantissa: u128 = if digits.is_empty() {
        0
    } else {
        digits.parse().map_err(|_| format!("malformed number in {text:?}"))?
    };
    let scale = 10u128.pow(frac_part.len() as u32) * divisor;
    let numerator = mantissa
        .checked_mul(multiplier)
        .ok_or_else(|| format!("{text:?} is out of range"))?;
    let value = (numerator + scale / 2) / scale;
    u64::try_from(value).map_err(|_| format!("{text:?} is out of range"))
}

/// Formats `value` with the largest suffix that represents it exactly.
/// `suffixes` must be ordered from largest to smallest multiplier and the
/// last entry must have multiplier 1.
pub(crate) fn format_scaled(value: u64, suffixes: &[(&str, u128)]) -> String {
    let v = value as u128;
    for (suffix, mult) in suffixes {
        if *mult == 1 || (v != 0 && v.is_multiple_of(*mult)) {
            return format!("{}{}", v / mult, suffix);
        }
    }
    unreachable!("suffix table must end with a unit multiplier")
}

pub(crate) const DURATION_SUFFIXES: &[(&str, u128)] = &[
    ("s", 1_000_000_000),
    ("ms", 1_000_000),
    ("us", 1_000),
    ("ns", 1),
];

pub(crate) const SI_SUFFIXES: &[(&str, u128)] = &[
    ("G", 1_000_000_000),
    ("M", 1_000_000),
    ("k", 1_000),
    ("", 1),
];

/// Picosecond-resolution suffixes for per-byte costs.
pub(crate) const BYTE_COST_SUFFIXES: &[(&str, u128)] = &[
    ("us", 1_000_000),
    ("ns", 1_000),
    ("ps", 1),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_durations_exactly() {
        assert_eq!(parse_scaled("1ms", DURATION_SUFFIXES, 1), Ok(1_000_000));
        assert_eq!(parse_scaled("100 ms", DURATION_SUFFIXES, 1), Ok(100_000_000));
        assert_eq!(parse_scaled("1.5us", DURATION_SUFFIXES, 1), Ok(1_500));
        // 1044.5 ns rounds half-up to 1045 ns.
        assert_eq!(parse_scaled("1.0445us", DURATION_SUFFIXES, 1), Ok(1_045));
        assert_eq!(parse_scaled("2s", DURATION_SUFFIXES, 1), Ok(2_000_000_000));
    }

    #[test]
    fn parses_si_quantities() {
        assert_eq!(parse_scaled("3.2G", SI_SUFFIXES, 1), Ok(3_200_000_000));
        assert_eq!(parse_scaled("800M", SI_SUFFIXES, 1), Ok(800_000_000));
        assert_eq!(parse_scaled("1_000", SI_SUFFIXES, 1), Ok(1_000));
        assert_eq!(parse_scaled("20k", SI_SUFFIXES, 1), Ok(20_000));
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_scaled("ms", DURATION_SUFFIXES, 1).is_err());
        assert!(parse_scaled("1 parsec", DURATION_SUFFIXES, 1).is_err());
        assert!(parse_scaled("1.2.3ms", DURATION_SUFFIXES, 1).is_err());
        assert!(parse_scaled("-1ms", DURATION_SUFFIXES, 1).is_err());
    }

    #[test]
    fn formats_with_largest_exact_unit() {
        assert_eq!(format_scaled(1_000_000, DURATION_SUFFIXES), "1ms");
        assert_eq!(format_scaled(1_045, DURATION_SUFFIXES), "1045ns");
        assert_eq!(format_scaled(0, DURATION_SUFFIXES), "0ns");
        assert_eq!(format_scaled(3_200_000_000, SI_SUFFIXES), "3200M");
        assert_eq!(format_scaled(250, BYTE_COST_SUFFIXES), "250ps");
    }
}
