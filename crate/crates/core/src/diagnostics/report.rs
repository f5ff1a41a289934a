use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{SimilarityReport, Stats};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "svg" | "svg-bars" => Ok(ReportFormat::Svg),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

/// Renders `x` with 9 significant digits, like C's `%.9g`, as a JSON number.
/// Non-finite values become `null`.
pub fn format_sig9(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..9).contains(&exp) {
        format!("{}e{}", trim(mantissa), exp)
    } else {
        trim(&format!("{:.*}", (8 - exp) as usize, x))
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn stats_fields(out: &mut String, s: Option<&Stats>) {
    let f = |v: Option<f64>| v.map_or_else(|| "null".to_string(), format_sig9);
    write!(
        out,
        "\"max\":{},\"mean\":{},\"min\":{},\"std\":{}",
        f(s.map(|s| s.max)),
        f(s.map(|s| s.mean)),
        f(s.map(|s| s.min)),
        f(s.map(|s| s.std)),
    )
    .unwrap();
}

/// Canonical JSON: keys sorted, floats at 9 significant digits, one trailing newline.
pub fn render_json(report: &SimilarityReport) -> String {
    let mut out = String::from("{\"entries\":[");
    for (i, e) in report.entries.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(
            out,
            "{{\"cosine\":{},\"elements\":{},\"layer_type\":{},\"name\":{},\"norm_a\":{},\"norm_b\":{}}}",
            e.cosine.map_or_else(|| "null".to_string(), format_sig9),
            e.element_count,
            json_str(&e.layer_type),
            json_str(&e.tensor_name),
            format_sig9(e.norm_a),
            format_sig9(e.norm_b),
        )
        .unwrap();
    }
    out.push_str("],\"global\":{");
    write!(out, "\"count\":{},", report.global.count).unwrap();
    stats_fields(&mut out, Some(&report.global));
    out.push_str("},\"groups\":{");
    for (i, (name, g)) in report.groups.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{}:{{\"count\":{},", json_str(name), g.count).unwrap();
        stats_fields(&mut out, g.stats.as_ref());
        write!(out, ",\"undefined\":{}}}", g.undefined).unwrap();
    }
    writeln!(out, "}},\"undefined_count\":{}}}", report.undefined_count).unwrap();
    out
}

pub fn render_csv(report: &SimilarityReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(["name", "layer_type", "cosine", "norm_a", "norm_b", "elements"])
        .map_err(to_err)?;
    for e in &report.entries {
        w.write_record([
            e.tensor_name.clone(),
            e.layer_type.clone(),
            e.cosine.map(format_sig9).unwrap_or_default(),
            format_sig9(e.norm_a),
            format_sig9(e.norm_b),
            e.element_count.to_string(),
        ])
        .map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One bar per layer type at the group mean, with a whisker from min to max.
/// A summary view of the per-layer distributions, not a full box plot.
pub fn render_svg(report: &SimilarityReport) -> String {
    const BAR_W: f64 = 28.0;
    const GAP: f64 = 12.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 40.0;
    const PLOT_H: f64 = 240.0;
    const LABEL_H: f64 = 220.0;

    let groups: Vec<_> = report.groups.iter().collect();
    let extent = groups
        .iter()
        .filter_map(|(_, g)| g.stats.as_ref())
        .flat_map(|s| [s.min.abs(), s.max.abs()])
        .fold(0.0f64, f64::max);
    let extent = if extent > 0.0 { extent * 1.1 } else { 1.0 };
    let width = LEFT + GAP + groups.len() as f64 * (BAR_W + GAP) + 20.0;
    let height = TOP + PLOT_H + LABEL_H;
    let y_of = |v: f64| TOP + PLOT_H / 2.0 - v / extent * (PLOT_H / 2.0);
    let zero = y_of(0.0);

    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"10\">"
    )
    .unwrap();
    writeln!(
        s,
        "<text x=\"{LEFT}\" y=\"16\" font-size=\"12\">Cosine similarity of task vectors by layer type (bar: mean, whisker: min to max)</text>"
    )
    .unwrap();
    let g = &report.global;
    writeln!(
        s,
        "<text class=\"global\" x=\"{LEFT}\" y=\"30\">all tensors: n={} mean={} std={} min={} max={} undefined={}</text>",
        g.count,
        format_sig9(g.mean),
        format_sig9(g.std),
        format_sig9(g.min),
        format_sig9(g.max),
        report.undefined_count
    )
    .unwrap();
    writeln!(
        s,
        "<line class=\"axis\" x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.2}\" stroke=\"black\"/>",
        TOP + PLOT_H
    )
    .unwrap();
    writeln!(
        s,
        "<line class=\"axis\" x1=\"{LEFT}\" y1=\"{zero:.2}\" x2=\"{:.2}\" y2=\"{zero:.2}\" stroke=\"black\"/>",
        width - 10.0
    )
    .unwrap();
    for (v, label) in [(extent, format_sig9(extent)), (-extent, format_sig9(-extent)), (0.0, "0".into())] {
        writeln!(
            s,
            "<text class=\"tick\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{label}</text>",
            LEFT - 4.0,
            y_of(v) + 3.0
        )
        .unwrap();
    }

    for (i, (name, group)) in groups.iter().enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR_W + GAP);
        let cx = x + BAR_W / 2.0;
        let label = xml_escape(name);
        writeln!(s, "<g class=\"group\">").unwrap();
        if let Some(st) = &group.stats {
            let (y_mean, top) = (y_of(st.mean), y_of(st.mean).min(zero));
            let h = (y_mean - zero).abs().max(0.5);
            writeln!(
                s,
                "<rect class=\"bar\" x=\"{x:.2}\" y=\"{top:.2}\" width=\"{BAR_W}\" height=\"{h:.2}\" fill=\"steelblue\"><title>{label}: mean {}</title></rect>",
                format_sig9(st.mean)
            )
            .unwrap();
            writeln!(
                s,
                "<line class=\"range\" x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                y_of(st.max),
                y_of(st.min)
            )
            .unwrap();
        }
        writeln!(
            s,
            "<text class=\"label\" transform=\"translate({cx:.2},{:.2}) rotate(60)\">{label} (n={})</text>",
            TOP + PLOT_H + 8.0,
            group.count
        )
        .unwrap();
        writeln!(s, "</g>").unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_report(report: &SimilarityReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => render_json(report),
        ReportFormat::Csv => render_csv(report)?,
        ReportFormat::Svg => render_svg(report),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
