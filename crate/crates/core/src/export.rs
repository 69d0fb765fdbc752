//! Plain-text CSV helpers shared by every exporter.

use std::io::Write;

use crate::scalar::Scalar;

/// Formats a value with 17 significant digits so `f64` values round-trip.
pub fn fmt_num<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.as_f64())
}

pub(crate) fn write_row<W: Write, T: Scalar>(w: &mut W, values: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            w.write_all(b",")?;
        }
        first = false;
        w.write_all(fmt_num(v).as_bytes())?;
    }
    w.write_all(b"\n")
}

/// Builds `prefix1,...,prefixN`.
pub(crate) fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

pub(crate) fn write_header<W: Write>(w: &mut W, cols: &[String]) -> std::io::Result<()> {
    writeln!(w, "{}", cols.join(","))
}

/// Parses a numeric CSV produced by this crate. Returns the header and rows.
pub fn read_numeric_csv<T: Scalar>(text: &str) -> crate::Result<(Vec<String>, Vec<Vec<T>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| crate::KklError::InvalidInput("empty CSV".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map(T::lit).map_err(|e| {
                    crate::KklError::InvalidInput(format!("CSV row {}: cannot parse {s:?}: {e}", i + 2))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != header.len() {
            return Err(crate::KklError::InvalidInput(format!(
                "CSV row {} has {} fields, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
