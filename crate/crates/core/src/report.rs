//! Sweep results: CSV rows, the Pareto front and an SVG scatter plot.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Ran,
    Dnn,
    Noisy,
    DnnResized,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ran, Method::Dnn, Method::Noisy, Method::DnnResized];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ran => "RAN",
            Method::Dnn => "DNN",
            Method::Noisy => "Noisy",
            Method::DnnResized => "DNN(resized)",
        }
    }

    fn colour(self) -> &'static str {
        match self {
            Method::Ran => "#d62728",
            Method::Dnn => "#1f77b4",
            Method::Noisy => "#2ca02c",
            Method::DnnResized => "#9467bd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .or(match s.trim().to_ascii_lowercase().as_str() {
                "dnn_resized" | "resized" => Some(Method::DnnResized),
                _ => None,
            })
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Placeholder written for rows without a setting (the plain DNN).
pub const NO_SETTING: &str = "-";

/// One (method, setting, seed) result.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    /// λ for RAN, the noise factor for the noisy methods.
    pub setting: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
    pub recon_mse: f64,
    /// Natural log of `recon_mse`.
    pub ln_mse: f64,
    pub runtime_s: f64,
    pub config_hash: u64,
}

pub const CSV_HEADER: &str = "method,setting,seed,accuracy,recon_mse,ln_mse,runtime_s,config_hash";

impl ReportRow {
    pub fn key(&self) -> (Method, u64, u64) {
        // total order on settings; None sorts first
        let s = self.setting.map_or(0, |v| v.to_bits() ^ (1 << 63));
        (self.method, s, self.seed)
    }

    pub fn to_csv(&self) -> String {
        let setting = self.setting.map_or_else(|| NO_SETTING.to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{:.3},{:016x}",
            self.method,
            setting,
            self.seed,
            self.accuracy,
            self.recon_mse,
            self.ln_mse,
            self.runtime_s,
            self.config_hash
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::config(format!("line {lineno}: expected 8 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].trim().parse().map_err(|_| Error::config(format!("line {lineno}: bad number `{}`", f[i])))
        };
        let setting = match f[1].trim() {
            NO_SETTING | "" | "\u{2014}" => None,
            _ => Some(num(1)?),
        };
        Ok(ReportRow {
            method: f[0].parse().map_err(|e| Error::config(format!("line {lineno}: {e}")))?,
            setting,
            seed: f[2].trim().parse().map_err(|_| Error::config(format!("line {lineno}: bad seed `{}`", f[2])))?,
            accuracy: num(3)?,
            recon_mse: num(4)?,
            ln_mse: num(5)?,
            runtime_s: num(6)?,
            config_hash: u64::from_str_radix(f[7].trim(), 16)
                .map_err(|_| Error::config(format!("line {lineno}: bad config hash `{}`", f[7])))?,
        })
    }

    /// Equality of every column except the wall-clock runtime.
    pub fn same_numbers(&self, other: &Self) -> bool {
        let bits =
            |r: &Self| (r.setting.map(f64::to_bits), r.accuracy.to_bits(), r.recon_mse.to_bits(), r.ln_mse.to_bits());
        self.method == other.method
            && self.seed == other.seed
            && self.config_hash == other.config_hash
            && bits(self) == bits(other)
    }
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(Error::config(format!("unexpected CSV header `{h}`"))),
        None => return Err(Error::config("empty CSV")),
    }
    lines.map(|(i, l)| ReportRow::parse(l, i + 1)).collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `a` dominates `b` when it is no worse on both accuracy and
/// reconstruction error and strictly better on one.
pub fn dominates(a: &ReportRow, b: &ReportRow) -> bool {
    a.accuracy >= b.accuracy && a.recon_mse >= b.recon_mse && (a.accuracy > b.accuracy || a.recon_mse > b.recon_mse)
}

/// Rows not dominated by any other row, in input order.
pub fn pareto_front(rows: &[ReportRow]) -> Vec<ReportRow> {
    rows.iter().filter(|r| !rows.iter().any(|o| dominates(o, r))).cloned().collect()
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let p = 0.05 * (hi - lo);
        (lo - p, hi + p)
    }
}

/// Scatter of ln reconstruction error against accuracy, one colour per
/// method, front members outlined.
pub fn render_svg(rows: &[ReportRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const L: f64 = 70.0;
    const R: f64 = 150.0;
    const T: f64 = 30.0;
    const B: f64 = 55.0;
    let finite: Vec<&ReportRow> = rows.iter().filter(|r| r.accuracy.is_finite() && r.ln_mse.is_finite()).collect();
    let (x0, x1) = padded(
        finite.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min).min(1.0),
        finite.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max).max(0.0),
    );
    let (y0, y1) = padded(
        finite.iter().map(|r| r.ln_mse).fold(f64::INFINITY, f64::min).min(0.0),
        finite.iter().map(|r| r.ln_mse).fold(f64::NEG_INFINITY, f64::max).max(-1.0),
    );
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let front = pareto_front(rows);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    );
    for (lo, hi, horizontal) in [(x0, x1, true), (y0, y1, false)] {
        let step = nice_step(hi - lo);
        let mut v = (lo / step).ceil() * step;
        while v <= hi + 1e-12 {
            let label = format!("{:.*}", if step < 0.1 { 2 } else { 1 }, v);
            if horizontal {
                let x = px(v);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/>"#,
                    H - B,
                    H - B + 5.0
                );
                let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{label}</text>"#, H - B + 19.0);
            } else {
                let y = py(v);
                let _ = writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{L}" y2="{y:.1}" stroke="black"/>"#, L - 5.0);
                let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#, L - 8.0, y + 4.0);
            }
            v += step;
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">test accuracy</text>"#,
        L + (W - L - R) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">ln(reconstruction MSE)</text>"#,
        T + (H - T - B) / 2.0
    );
    for r in &finite {
        let on_front = front.iter().any(|f| f == *r);
        let stroke = if on_front { r#" stroke="black" stroke-width="1.5""# } else { "" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"{stroke}><title>{} {} seed {}</title></circle>"#,
            px(r.accuracy),
            py(r.ln_mse),
            r.method.colour(),
            r.method,
            r.setting.map_or_else(|| NO_SETTING.to_string(), |v| v.to_string()),
            r.seed
        );
    }
    let mut ly = T + 10.0;
    for m in Method::ALL.into_iter().filter(|m| rows.iter().any(|r| r.method == *m)) {
        let lx = W - R + 15.0;
        let _ = writeln!(s, r#"<circle cx="{lx}" cy="{ly}" r="4" fill="{}"/>"#, m.colour());
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 10.0, ly + 4.0, m);
        ly += 18.0;
    }
    s.push_str("</svg>\n");
    s
}
