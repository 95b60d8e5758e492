//! Hand-emitted SVG charts (no plotting dependency): a bar chart of
//! condition means with SD whiskers and a scatter of contribution
//! proportions. Fixed 800×600 viewBox and 4-significant-digit number
//! formatting keep the output byte-stable for golden-file tests.

use crate::model::NeuronRef;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 60.0;
const MARGIN_BOTTOM: f64 = 110.0;

/// Shortest fixed-point rendering with `sig` significant digits.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Trim trailing zeros (and a dangling dot) for stability.
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub struct BarDatum {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
}

fn axis_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| lo + (hi - lo) * (i as f64) / (n as f64))
        .collect()
}

fn header(title: &str) -> String {
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 600" "#,
            r#"font-family="Helvetica, Arial, sans-serif">"#,
            "\n",
            r#"<rect x="0" y="0" width="800" height="600" fill="white"/>"#,
            "\n",
            r#"<text x="400" y="30" font-size="18" text-anchor="middle">{}</text>"#,
            "\n"
        ),
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Bar chart of per-condition means with ±SD whiskers.
pub fn bar_chart(title: &str, y_label: &str, bars: &[BarDatum]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;

    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for b in bars {
        lo = lo.min(b.mean - b.sd);
        hi = hi.max(b.mean + b.sd);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.08;
    lo -= pad;
    hi += pad;

    let y_of = |v: f64| MARGIN_TOP + plot_h * (hi - v) / (hi - lo);

    let mut out = header(title);
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h
    ));
    for tick in axis_ticks(lo, hi, 5) {
        let y = fmt_sig(y_of(tick), 4);
        out.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
            x1 = MARGIN_LEFT - 5.0,
            x2 = MARGIN_LEFT,
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"11\" text-anchor=\"end\" dy=\"4\">{v}</text>\n",
            x = MARGIN_LEFT - 9.0,
            v = fmt_sig(tick, 4)
        ));
    }
    out.push_str(&format!(
        "<text x=\"18\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {y})\">{t}</text>\n",
        y = MARGIN_TOP + plot_h / 2.0,
        t = xml_escape(y_label)
    ));
    // Zero line.
    if lo < 0.0 && hi > 0.0 {
        out.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>\n",
            x1 = MARGIN_LEFT,
            x2 = MARGIN_LEFT + plot_w,
            y = fmt_sig(y_of(0.0), 4)
        ));
    }

    let slot = plot_w / (bars.len().max(1) as f64);
    let bar_w = (slot * 0.6).min(70.0);
    for (i, b) in bars.iter().enumerate() {
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let x = cx - bar_w / 2.0;
        let (top, bottom) = if b.mean >= 0.0 {
            (y_of(b.mean), y_of(0.0f64.max(lo)))
        } else {
            (y_of(0.0f64.min(hi)), y_of(b.mean))
        };
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"#4472a8\"/>\n",
            x = fmt_sig(x, 4),
            y = fmt_sig(top, 4),
            w = fmt_sig(bar_w, 4),
            h = fmt_sig((bottom - top).abs(), 4)
        ));
        // SD whisker.
        let w_top = y_of(b.mean + b.sd);
        let w_bot = y_of(b.mean - b.sd);
        let cxs = fmt_sig(cx, 4);
        out.push_str(&format!(
            "<line x1=\"{cxs}\" y1=\"{t}\" x2=\"{cxs}\" y2=\"{b}\" stroke=\"black\"/>\n",
            t = fmt_sig(w_top, 4),
            b = fmt_sig(w_bot, 4)
        ));
        for yy in [w_top, w_bot] {
            out.push_str(&format!(
                "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
                x1 = fmt_sig(cx - 8.0, 4),
                x2 = fmt_sig(cx + 8.0, 4),
                y = fmt_sig(yy, 4)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{cxs}\" y=\"{y}\" font-size=\"11\" text-anchor=\"end\" transform=\"rotate(-35 {cxs} {y})\">{l}</text>\n",
            y = fmt_sig(MARGIN_TOP + plot_h + 16.0, 4),
            l = xml_escape(&b.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter of contribution proportions by rank; the first `n_outlined`
/// points carry black circular outlines.
pub fn ledger_scatter(title: &str, points: &[(NeuronRef, f64)], n_outlined: usize) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;

    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for (_, p) in points {
        lo = lo.min(*p);
        hi = hi.max(*p);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.08;
    lo -= pad;
    hi += pad;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (hi - v) / (hi - lo);
    let x_of =
        |rank: usize| MARGIN_LEFT + plot_w * (rank as f64 + 0.5) / (points.len().max(1) as f64);

    let mut out = header(title);
    out.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h
    ));
    out.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        r = MARGIN_LEFT + plot_w,
        b = MARGIN_TOP + plot_h
    ));
    for tick in axis_ticks(lo, hi, 5) {
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"11\" text-anchor=\"end\" dy=\"4\">{v}</text>\n",
            x = MARGIN_LEFT - 9.0,
            y = fmt_sig(y_of(tick), 4),
            v = fmt_sig(tick, 4)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\">neuron rank by accumulative direct effect</text>\n",
        x = MARGIN_LEFT + plot_w / 2.0,
        y = MARGIN_TOP + plot_h + 40.0
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {y})\">contribution proportion</text>\n",
        y = MARGIN_TOP + plot_h / 2.0
    ));
    if lo < 0.0 && hi > 0.0 {
        out.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>\n",
            x1 = MARGIN_LEFT,
            x2 = MARGIN_LEFT + plot_w,
            y = fmt_sig(y_of(0.0), 4)
        ));
    }
    for (rank, (neuron, p)) in points.iter().enumerate() {
        let cx = fmt_sig(x_of(rank), 4);
        let cy = fmt_sig(y_of(*p), 4);
        out.push_str(&format!(
            "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"4\" fill=\"#4472a8\"/>\n"
        ));
        if rank < n_outlined {
            out.push_str(&format!(
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"7\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>\n"
            ));
            out.push_str(&format!(
                "<text x=\"{x}\" y=\"{cy}\" font-size=\"10\" dy=\"4\">{n}</text>\n",
                x = fmt_sig(x_of(rank) + 10.0, 4),
                n = neuron
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_cases() {
        assert_eq!(fmt_sig(0.0, 4), "0");
        assert_eq!(fmt_sig(1.23456, 4), "1.235");
        assert_eq!(fmt_sig(-0.0012345, 4), "-0.001234");
        assert_eq!(fmt_sig(12345.6, 4), "12346");
        assert_eq!(fmt_sig(0.5, 4), "0.5");
        assert_eq!(fmt_sig(1.0, 4), "1");
    }

    #[test]
    fn bar_chart_is_deterministic() {
        let bars = vec![
            BarDatum {
                label: "original/testing".into(),
                mean: 0.6,
                sd: 0.39,
            },
            BarDatum {
                label: "ablate-top5/testing".into(),
                mean: 0.24,
                sd: 0.72,
            },
        ];
        let a = bar_chart("demo", "mean logit difference", &bars);
        let b = bar_chart("demo", "mean logit difference", &bars);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("viewBox=\"0 0 800 600\""));
        assert!(a.ends_with("</svg>\n"));
    }

    #[test]
    fn scatter_outlines_top_points_and_handles_uniform() {
        let points: Vec<(NeuronRef, f64)> = (0..50)
            .map(|i| (NeuronRef::new(0, i), 1.0 / 50.0))
            .collect();
        let svg = ledger_scatter("demo", &points, 5);
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 5);
        assert_eq!(svg.matches("<circle").count(), 55);
    }
}
