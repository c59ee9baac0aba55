//! Numeric serialization: decimal with 17 significant digits for CSV and
//! C99 hexadecimal floats for manifests. Both round-trip bit-exactly.

use std::io::Write;
use std::path::Path;

use wflow_core::dynamics::Trajectory;

use crate::error::{CliError, Result};

/// Scientific notation with 17 significant digits.
pub fn decimal(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn parse_decimal(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}

/// `±0x1.<13 hex digits>p±e`, subnormals as `±0x0.<digits>p-1022`.
pub fn hex(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let digits = format!("{mant:013x}");
    let digits = digits.trim_end_matches('0');
    let frac = if digits.is_empty() { String::new() } else { format!(".{digits}") };
    format!("{sign}0x{lead}{frac}p{e:+}")
}

/// Inverse of [`hex`]. Accepts any `0x<h>[.<h>]p<e>` with at most 53 significant bits.
pub fn parse_hex(s: &str) -> Option<f64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let signed = |v: f64| if neg { -v } else { v };
    match body {
        "nan" => return Some(f64::NAN),
        "inf" => return Some(signed(f64::INFINITY)),
        _ => {}
    }
    let body = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X"))?;
    let (mantissa, exp) = body.split_once(['p', 'P'])?;
    let exp: i64 = exp.parse().ok()?;
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int.is_empty() || frac.len() > 13 {
        return None;
    }
    let int = u64::from_str_radix(int, 16).ok()?;
    let frac_bits = if frac.is_empty() { 0 } else { u64::from_str_radix(frac, 16).ok()? << (4 * (13 - frac.len())) };
    if int > 1 {
        return None;
    }
    let m = (int << 52) | frac_bits;
    if m == 0 {
        return Some(signed(0.0));
    }
    // m · 2^(exp − 52), exact while the result is representable
    let v = if int == 0 {
        if exp != -1022 {
            return None;
        }
        f64::from_bits(frac_bits)
    } else {
        if !(-1022..=1023).contains(&exp) {
            return None;
        }
        f64::from_bits((((exp + 1023) as u64) << 52) | frac_bits)
    };
    Some(signed(v))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Input { path: path.to_path_buf(), reason: e.to_string() }
}

/// Writes a header and numeric rows.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r.iter().map(|x| decimal(*x))).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let row = rec
            .iter()
            .map(|s| parse_decimal(s).ok_or_else(|| CliError::Input { path: path.to_path_buf(), reason: format!("not a number: {s:?}") }))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Columns `member, time, c_1..c_K, energy, <observables>, accepted`.
pub fn trajectory_header(modes: usize, observables: &[String]) -> Vec<String> {
    let mut h = vec!["member".to_string(), "time".to_string()];
    h.extend((1..=modes).map(|k| format!("c_{k}")));
    h.push("energy".into());
    h.extend(observables.iter().cloned());
    h.push("accepted".into());
    h
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory], observables: &[String]) -> Result<()> {
    let modes = trajectories.first().and_then(|t| t.states.first()).map_or(0, Vec::len);
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(trajectory_header(modes, observables)).map_err(csv_err(path))?;
    for t in trajectories {
        for i in 0..t.times.len() {
            let mut rec = vec![t.member.to_string(), decimal(t.times[i])];
            rec.extend(t.states[i].iter().map(|c| decimal(*c)));
            rec.push(decimal(t.energies[i]));
            rec.extend(t.observables[i].iter().map(|v| decimal(*v)));
            rec.push(if t.accepted[i] { "1" } else { "0" }.into());
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    let mut inner = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    inner.flush().map_err(io_err(path))
}

/// Reads trajectories back; chain statistics and square fields are not stored.
pub fn read_trajectories(path: &Path, observables: usize) -> Result<Vec<Trajectory>> {
    let (header, rows) = read_table(path)?;
    let bad = |reason: String| CliError::Input { path: path.to_path_buf(), reason };
    if header.len() < 4 + observables {
        return Err(bad(format!("{} columns cannot hold {observables} observables", header.len())));
    }
    let modes = header.len() - 4 - observables;
    let mut out: Vec<Trajectory> = Vec::new();
    for row in rows {
        if row.len() != header.len() {
            return Err(bad("ragged row".into()));
        }
        let member = row[0] as u64;
        if out.last().map_or(true, |t| t.member != member) {
            out.push(Trajectory {
                member,
                times: Vec::new(),
                states: Vec::new(),
                energies: Vec::new(),
                observables: Vec::new(),
                square_fields: Vec::new(),
                increments: Vec::new(),
                accepted: Vec::new(),
                stats: Default::default(),
            });
        }
        let t = out.last_mut().expect("pushed above");
        t.times.push(row[1]);
        t.states.push(row[2..2 + modes].to_vec());
        t.energies.push(row[2 + modes]);
        t.observables.push(row[3 + modes..3 + modes + observables].to_vec());
        t.accepted.push(row[row.len() - 1] != 0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_known_values() {
        assert_eq!(hex(1.0), "0x1p+0");
        assert_eq!(hex(-2.5), "-0x1.4p+1");
        assert_eq!(hex(0.1), "0x1.999999999999ap-4");
        assert_eq!(hex(f64::MIN_POSITIVE), "0x1p-1022");
        assert_eq!(hex(5e-324), "0x0.0000000000001p-1022");
        assert_eq!(hex(-0.0), "-0x0p+0");
    }

    #[test]
    fn hex_round_trips_special_values() {
        for x in [0.0, -0.0, 1.0, f64::MAX, f64::MIN_POSITIVE, 5e-324, 2.2250738585072e-308, f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(parse_hex(&hex(x)).unwrap().to_bits(), x.to_bits(), "{x:e}");
        }
        assert!(parse_hex(&hex(f64::NAN)).unwrap().is_nan());
        assert!(parse_hex("0x2p+0").is_none());
        assert!(parse_hex("1.0").is_none());
    }

    #[test]
    fn decimal_keeps_seventeen_digits() {
        assert_eq!(decimal(0.1), "1.0000000000000001e-1");
        assert_eq!(parse_decimal(&decimal(0.1)).unwrap(), 0.1);
    }
}
