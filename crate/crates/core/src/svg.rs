//! Minimal static SVG renderings: line charts for leak curves, bar charts
//! for histograms, heatmaps for confusion matrices. No styling knobs; these
//! exist so every emitted table has a picture next to it.

use std::fmt::Write;

use crate::eval::ConfusionMatrix;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

/// Polyline chart of (x, y) points, axes annotated with data ranges.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut svg = header(title);
    if points.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (x_min, x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (y_min, y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let sx = |x: f64| MARGIN + (x - x_min) / x_span * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_min) / y_span * (HEIGHT - 2.0 * MARGIN);

    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
        .collect();
    let _ = writeln!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
        path.join(" ")
    );
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lbly}\" text-anchor=\"middle\">{xl}</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{yl}</text>\n\
         <text x=\"{m}\" y=\"{lbly}\" text-anchor=\"middle\">{x0:.2}</text>\n\
         <text x=\"{r}\" y=\"{lbly}\" text-anchor=\"middle\">{x1:.2}</text>\n\
         <text x=\"{m}\" y=\"{t}\" text-anchor=\"end\">{y1:.1}</text>\n\
         <text x=\"{m}\" y=\"{b}\" text-anchor=\"end\">{y0:.1}</text>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN,
        cx = WIDTH / 2.0,
        cy = HEIGHT / 2.0,
        lbly = HEIGHT - MARGIN / 3.0,
        xl = escape(x_label),
        yl = escape(y_label),
        x0 = x_min,
        x1 = x_max,
        y0 = y_min,
        y1 = y_max,
    );
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart of labeled counts.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut svg = header(title);
    if bars.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len() as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let h = value / max * (HEIGHT - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * slot;
        let y = HEIGHT - MARGIN - h;
        let _ = write!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#1f77b4\"/>\n\
             <text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            x + slot * 0.1,
            y,
            slot * 0.8,
            h,
            x + slot / 2.0,
            HEIGHT - MARGIN / 2.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Confusion-matrix heatmap: rows truth, columns prediction, cell shade
/// proportional to count, counts printed in each cell.
pub fn confusion_heatmap(title: &str, matrix: &ConfusionMatrix) -> String {
    let mut svg = header(title);
    let n = matrix.classes.len();
    if n == 0 {
        svg.push_str("</svg>\n");
        return svg;
    }
    let cell = ((WIDTH - 2.0 * MARGIN) / n as f64).min((HEIGHT - 2.0 * MARGIN) / n as f64);
    let max = matrix
        .counts
        .iter()
        .flatten()
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    for (i, row) in matrix.counts.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            let x = MARGIN + j as f64 * cell;
            let y = MARGIN + i as f64 * cell;
            let intensity = count as f64 / max;
            let shade = (255.0 - intensity * 175.0) as u8;
            let _ = write!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" \
                 fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/>\n\
                 <text x=\"{cx:.1}\" y=\"{cy:.1}\" text-anchor=\"middle\">{count}</text>\n",
                cx = x + cell / 2.0,
                cy = y + cell / 2.0 + 4.0,
            );
        }
    }
    for (i, class) in matrix.classes.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\" \
             transform=\"rotate(-45 {0:.1} {1:.1})\">{2}</text>\n",
            MARGIN - 6.0,
            MARGIN + i as f64 * cell + cell / 2.0,
            escape(class),
            MARGIN + i as f64 * cell + cell / 2.0,
            MARGIN - 8.0,
        );
    }
    svg.push_str("</svg>\n");
    svg
}
