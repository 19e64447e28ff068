//! Evaluation report serialization. Reports are JSON with a fixed key order
//! and `Display`-formatted floats so identical results produce identical
//! bytes.

use std::path::Path;

use anomamba_core::metrics::MetricsReport;

use crate::error::{io_err, Result};

#[derive(Clone, Debug)]
pub struct ClassReport {
    pub class: String,
    pub metrics: MetricsReport,
}

const FIELDS: [(&str, fn(&MetricsReport) -> f64); 7] = [
    ("image_auroc", |m| m.image_auroc),
    ("image_ap", |m| m.image_ap),
    ("image_f1max", |m| m.image_f1max),
    ("pixel_auroc", |m| m.pixel_auroc),
    ("pixel_ap", |m| m.pixel_ap),
    ("pixel_f1max", |m| m.pixel_f1max),
    ("pixel_aupro", |m| m.pixel_aupro),
];

fn push_metrics(out: &mut String, indent: &str, m: &MetricsReport) {
    for (i, (name, get)) in FIELDS.iter().enumerate() {
        let comma = if i + 1 == FIELDS.len() { "" } else { "," };
        out.push_str(&format!("{indent}\"{name}\": {}{comma}\n", get(m)));
    }
}

/// Renders per-class metrics plus an unweighted mean across classes.
pub fn render(classes: &[ClassReport]) -> String {
    let mut out = String::from("{\n  \"classes\": {\n");
    for (i, c) in classes.iter().enumerate() {
        out.push_str(&format!("    \"{}\": {{\n", c.class));
        push_metrics(&mut out, "      ", &c.metrics);
        let comma = if i + 1 == classes.len() { "" } else { "," };
        out.push_str(&format!("    }}{comma}\n"));
    }
    out.push_str("  },\n  \"mean\": {\n");
    let n = classes.len().max(1) as f64;
    let mean = MetricsReport {
        image_auroc: classes.iter().map(|c| c.metrics.image_auroc).sum::<f64>() / n,
        image_ap: classes.iter().map(|c| c.metrics.image_ap).sum::<f64>() / n,
        image_f1max: classes.iter().map(|c| c.metrics.image_f1max).sum::<f64>() / n,
        pixel_auroc: classes.iter().map(|c| c.metrics.pixel_auroc).sum::<f64>() / n,
        pixel_ap: classes.iter().map(|c| c.metrics.pixel_ap).sum::<f64>() / n,
        pixel_f1max: classes.iter().map(|c| c.metrics.pixel_f1max).sum::<f64>() / n,
        pixel_aupro: classes.iter().map(|c| c.metrics.pixel_aupro).sum::<f64>() / n,
    };
    push_metrics(&mut out, "    ", &mean);
    out.push_str("  }\n}\n");
    out
}

/// Writes via a temp file and rename so readers never observe a partial
/// report.
pub fn write(path: &Path, classes: &[ClassReport]) -> Result<()> {
    let text = render(classes);
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Pulls one metric back out of a rendered report, for tests and ablation
/// comparisons. `class` is a class name or "mean".
pub fn extract(text: &str, class: &str, field: &str) -> Option<f64> {
    let anchor = format!("\"{class}\"");
    let start = text.find(&anchor)? + anchor.len();
    let section = &text[start..];
    let key = format!("\"{field}\": ");
    let vstart = section.find(&key)? + key.len();
    let rest = &section[vstart..];
    let end = rest.find([',', '\n']).unwrap_or(rest.len());
    rest[..end].trim().parse().ok()
}
