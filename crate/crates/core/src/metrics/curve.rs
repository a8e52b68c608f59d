//! Rate-quality curves and their `label,bpp,metric` CSV form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    Psnr,
    MsSsim,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Psnr => "psnr",
            MetricKind::MsSsim => "msssim",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "psnr" => Ok(MetricKind::Psnr),
            "msssim" => Ok(MetricKind::MsSsim),
            _ => Err(Error::Config(format!("unknown metric kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateQualityCurve {
    pub label: String,
    pub kind: MetricKind,
    /// `(bpp, metric)`, sorted by bpp.
    pub points: Vec<(f64, f64)>,
}

impl RateQualityCurve {
    pub fn new(label: impl Into<String>, kind: MetricKind, mut points: Vec<(f64, f64)>) -> Result<Self> {
        let label = label.into();
        for &(r, m) in &points {
            contract!(r.is_finite() && r > 0.0, "curve {label}: bpp {r} is not positive");
            contract!(m.is_finite(), "curve {label}: metric {m} is not finite");
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(RateQualityCurve { label, kind, points })
    }

    /// Quality nondecreasing in rate.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 >= w[0].1)
    }
}

/// CSV with a `# kind=<metric>` comment, a `label,bpp,metric` header and
/// one row per point.
pub fn curves_to_csv(curves: &[RateQualityCurve]) -> String {
    let mut out = String::new();
    if let Some(c) = curves.first() {
        out.push_str(&format!("# kind={}\n", c.kind));
    }
    out.push_str("label,bpp,metric\n");
    for c in curves {
        for (r, m) in &c.points {
            out.push_str(&format!("{},{r},{m}\n", c.label));
        }
    }
    out
}

/// Parses [`curves_to_csv`] output. Curves keep their first-seen order; the
/// kind defaults to accuracy without a `# kind=` line.
pub fn curves_from_csv(text: &str) -> Result<Vec<RateQualityCurve>> {
    let mut kind = MetricKind::Accuracy;
    let mut order: Vec<String> = Vec::new();
    let mut points: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == "label,bpp,metric" {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some(k) = c.trim().strip_prefix("kind=") {
                kind = k.trim().parse()?;
            }
            continue;
        }
        let bad = |what: &str| Error::format(n, format!("line {}: {what}: {line:?}", n + 1));
        let mut f = line.rsplitn(3, ',');
        let m: f64 = f.next().and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("bad metric"))?;
        let r: f64 = f.next().and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("bad bpp"))?;
        let label = f.next().ok_or_else(|| bad("missing label"))?.trim().to_string();
        if !points.contains_key(&label) {
            order.push(label.clone());
        }
        points.entry(label).or_default().push((r, m));
    }
    order
        .into_iter()
        .map(|l| {
            let p = points.remove(&l).unwrap_or_default();
            RateQualityCurve::new(l, kind, p)
        })
        .collect()
}
