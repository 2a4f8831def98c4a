//! Minimal hand-rolled SVG output: trajectory overlays and vector-field
//! quiver/heat renderings. No external renderer; files are plain
//! well-formed XML.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 52.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub dashed: bool,
    /// (x, y) samples in data coordinates.
    pub points: &'a [(f64, f64)],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn from_points<'a>(series: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for &(x, y) in series {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() || x1 <= x0 {
            x0 = 0.0;
            x1 = 1.0;
        }
        if !y0.is_finite() || y1 <= y0 {
            y0 -= 0.5;
            y1 = y0 + 1.0;
        }
        // A little vertical headroom.
        let pad = 0.05 * (y1 - y0);
        Frame {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

/// Overlay chart of one or more series with a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let frame = Frame::from_points(series.iter().flat_map(|s| s.points.iter()));
    let mut out = String::with_capacity(4096);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Axes box and tick labels.
    out.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#444\" stroke-width=\"1\"/>\n",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    ));
    for i in 0..=4 {
        let fx = frame.x0 + (frame.x1 - frame.x0) * i as f64 / 4.0;
        let fy = frame.y0 + (frame.y1 - frame.y0) * i as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\" fill=\"#333\">{:.3}</text>\n",
            frame.px(fx),
            HEIGHT - MARGIN + 16.0,
            fx
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\" fill=\"#333\">{:.3}</text>\n",
            MARGIN - 6.0,
            frame.py(fy) + 3.5,
            fy
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    ));

    for (si, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let dash = if s.dashed {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"{}/>\n",
            pts.join(" "),
            s.color,
            dash
        ));
        let ly = MARGIN + 16.0 + 16.0 * si as f64;
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{}\" \
             stroke-width=\"2\"{}/>\n",
            WIDTH - MARGIN - 130.0,
            WIDTH - MARGIN - 104.0,
            s.color,
            dash
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN - 98.0,
            ly + 3.5,
            escape(s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

pub struct QuiverCell {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Blue-to-red ramp on t in [0, 1].
fn magnitude_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * t) as u8;
    let g = (70.0 + 60.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
    let b = (220.0 - 190.0 * t) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heat cells colored by vector magnitude plus direction arrows on a G x G
/// grid of field samples.
pub fn quiver_heat(
    title: &str,
    x_label: &str,
    y_label: &str,
    grid_size: usize,
    cells: &[QuiverCell],
) -> String {
    let frame = {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for c in cells {
            x0 = x0.min(c.x);
            x1 = x1.max(c.x);
            y0 = y0.min(c.y);
            y1 = y1.max(c.y);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        Frame { x0, x1, y0, y1 }
    };
    let max_mag = cells
        .iter()
        .map(|c| (c.dx * c.dx + c.dy * c.dy).sqrt())
        .fold(0.0f64, f64::max);

    let cell_w = (WIDTH - 2.0 * MARGIN) / grid_size as f64;
    let cell_h = (HEIGHT - 2.0 * MARGIN) / grid_size as f64;

    let mut out = String::with_capacity(cells.len() * 160);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    for c in cells {
        let mag = (c.dx * c.dx + c.dy * c.dy).sqrt();
        let t = if max_mag > 0.0 { mag / max_mag } else { 0.0 };
        let cx = frame.px(c.x);
        let cy = frame.py(c.y);
        out.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" \
             fill-opacity=\"0.55\"/>\n",
            cx - cell_w / 2.0,
            cy - cell_h / 2.0,
            cell_w,
            cell_h,
            magnitude_color(t)
        ));
        if mag > 0.0 {
            // Unit-direction arrow scaled to the cell.
            let scale = 0.42 * cell_w.min(cell_h) / mag;
            let (ex, ey) = (cx + c.dx * scale, cy - c.dy * scale);
            out.push_str(&format!(
                "<line x1=\"{cx:.2}\" y1=\"{cy:.2}\" x2=\"{ex:.2}\" y2=\"{ey:.2}\" \
                 stroke=\"black\" stroke-width=\"0.8\"/>\n"
            ));
            out.push_str(&format!(
                "<circle cx=\"{ex:.2}\" cy=\"{ey:.2}\" r=\"1.1\" fill=\"black\"/>\n"
            ));
        }
    }

    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    ));
    out.push_str("</svg>\n");
    out
}

/// Tiny well-formedness check: every opened tag closes in order and
/// attributes are quote-balanced.
pub fn check_well_formed_xml(s: &str) -> Result<(), String> {
    if !s.starts_with("<svg") {
        return Err("must start with <svg".into());
    }
    let mut stack: Vec<String> = Vec::new();
    let mut rest = s;
    while let Some(start) = rest.find('<') {
        rest = &rest[start + 1..];
        let end = rest.find('>').ok_or("unclosed tag")?;
        let tag = &rest[..end];
        rest = &rest[end + 1..];
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().ok_or_else(|| format!("stray closer {name}"))?;
            if open != name {
                return Err(format!("mismatched tag: <{open}> closed by </{name}>"));
            }
        } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
            let name: String = tag.chars().take_while(|c| !c.is_whitespace()).collect();
            if !tag.matches('"').count().is_multiple_of(2) {
                return Err(format!("unbalanced quotes in {tag}"));
            }
            stack.push(name);
        }
    }
    if !stack.is_empty() {
        return Err(format!("unclosed tags: {stack:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_well_formed_xml(s: &str) {
        check_well_formed_xml(s).unwrap();
    }

    #[test]
    fn line_chart_is_well_formed() {
        let pts_a = [(0.0, 1.0), (0.5, 2.0), (1.0, 1.5)];
        let pts_b = [(0.0, 1.2), (0.5, 1.8), (1.0, 1.4)];
        let svg = line_chart(
            "IPP/DMAPP & <friends>",
            "time (normalized)",
            "value",
            &[
                Series {
                    label: "observed",
                    color: "#2b6cb0",
                    dashed: false,
                    points: &pts_a,
                },
                Series {
                    label: "predicted",
                    color: "#c53030",
                    dashed: true,
                    points: &pts_b,
                },
            ],
        );
        assert_well_formed_xml(&svg);
        assert!(svg.contains("&amp;"));
    }

    #[test]
    fn quiver_is_well_formed_and_uniform_for_zero_field() {
        let cells: Vec<QuiverCell> = (0..9)
            .map(|i| QuiverCell {
                x: (i % 3) as f64,
                y: (i / 3) as f64,
                dx: 0.0,
                dy: 0.0,
            })
            .collect();
        let svg = quiver_heat("zero field", "a", "b", 3, &cells);
        assert_well_formed_xml(&svg);
        // All cells share the zero-magnitude color and no arrows are drawn.
        assert_eq!(svg.matches(&magnitude_color(0.0)).count(), 9);
        assert!(!svg.contains("<line"));
    }
}
