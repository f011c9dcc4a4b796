//! Metrics CSV: `iter,cd,mcd,hd,l_r,l_lcd,ms_per_step`, one row per
//! evaluation, six significant digits, empty fields for undefined values.

use std::fs;
use std::path::Path;

use super::MetricsRecord;
use crate::error::{Error, Result};

pub const HEADER: &str = "iter,cd,mcd,hd,l_r,l_lcd,ms_per_step";

/// Six significant digits in the style of C's `%g`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig6).unwrap_or_default()
}

pub fn render(records: &[MetricsRecord], with_timing: bool) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        let ms = if with_timing { opt(r.ms_per_step) } else { String::new() };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            format_sig6(r.cd),
            format_sig6(r.mcd),
            format_sig6(r.hd),
            opt(r.l_r),
            opt(r.l_lcd),
            ms
        ));
    }
    out
}

pub fn write(path: &Path, records: &[MetricsRecord], with_timing: bool) -> Result<()> {
    fs::write(path, render(records, with_timing)).map_err(|e| Error::io(path, e))
}

/// One parsed CSV row; `None` for empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub iteration: usize,
    pub cd: f64,
    pub mcd: f64,
    pub hd: f64,
    pub l_r: Option<f64>,
    pub l_lcd: Option<f64>,
    pub ms_per_step: Option<f64>,
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<CsvRow>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(err(1, format!("expected header `{HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(n, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| err(n, format!("`{s}`: {e}")))
        };
        let maybe = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        rows.push(CsvRow {
            iteration: f[0].parse().map_err(|e| err(n, format!("`{}`: {e}", f[0])))?,
            cd: num(f[1])?,
            mcd: num(f[2])?,
            hd: num(f[3])?,
            l_r: maybe(f[4])?,
            l_lcd: maybe(f[5])?,
            ms_per_step: maybe(f[6])?,
        });
    }
    Ok(rows)
}

pub fn read(path: &Path) -> Result<Vec<CsvRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}
