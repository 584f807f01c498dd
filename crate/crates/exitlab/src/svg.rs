//! Native SVG rendering for trade-off curves and exit-layer histograms.
//!
//! Charts are plain strings built from fixed geometry: a 720x480 canvas,
//! linear axes with five ticks, a legend column on the right, and a
//! footnote line for provenance. Degenerate ranges are padded so every
//! coordinate stays finite.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 70.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// One named curve.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One named standalone point.
#[derive(Debug, Clone)]
pub struct Marker {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// A multi-series line chart with optional point markers.
#[derive(Debug, Clone, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub footnote: String,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
}

/// A single-series bar chart with one label per bar.
#[derive(Debug, Clone, Default)]
pub struct BarChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub footnote: String,
    pub bars: Vec<(String, f64)>,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Data range padded by 5 percent, widened when flat.
fn padded_range(min: f64, max: f64) -> (f64, f64) {
    let (min, max) = if min <= max { (min, max) } else { (0.0, 1.0) };
    let span = max - min;
    if span < 1e-12 {
        (min - 0.5, max + 0.5)
    } else {
        (min - 0.05 * span, max + 0.05 * span)
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn sx(&self, x: f64) -> f64 {
        let w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        MARGIN_LEFT + (x - self.x_min) / (self.x_max - self.x_min) * w
    }

    fn sy(&self, y: f64) -> f64 {
        let h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        MARGIN_TOP + h - (y - self.y_min) / (self.y_max - self.y_min) * h
    }
}

fn open_svg(out: &mut String, title: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    out.push_str(&format!(
        "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x_min + t * (frame.x_max - frame.x_min);
        let yv = frame.y_min + t * (frame.y_max - frame.y_min);
        let sx = frame.sx(xv);
        let sy = frame.sy(yv);
        out.push_str(&format!(
            "<line x1=\"{sx:.1}\" y1=\"{y0:.1}\" x2=\"{sx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{sx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            y0 + 5.0,
            y0 + 20.0,
            fmt(xv)
        ));
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{sy:.1}\" x2=\"{x0:.1}\" y2=\"{sy:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            x0 - 5.0,
            x0 - 8.0,
            sy + 4.0,
            fmt(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 25.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    ));
}

fn footnote(out: &mut String, text: &str) {
    if !text.is_empty() {
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\" \
             fill=\"#666666\">{}</text>\n",
            WIDTH - 8.0,
            HEIGHT - 8.0,
            escape(text)
        ));
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(self.markers.iter().map(|m| m.x));
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(self.markers.iter().map(|m| m.y));
        let (x_min, x_max) = padded_range(
            xs.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
        );
        let (y_min, y_max) = padded_range(
            ys.clone().fold(f64::INFINITY, f64::min),
            ys.fold(f64::NEG_INFINITY, f64::max),
        );
        let frame = Frame { x_min, x_max, y_min, y_max };

        let mut out = String::new();
        open_svg(&mut out, &self.title);
        axes(&mut out, &frame, &self.x_label, &self.y_label);

        let legend_x = WIDTH - MARGIN_RIGHT + 20.0;
        let mut legend_y = MARGIN_TOP + 10.0;
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if series.points.len() == 1 {
                let (x, y) = series.points[0];
                out.push_str(&format!(
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                    frame.sx(x),
                    frame.sy(y)
                ));
            } else if !series.points.is_empty() {
                let coords: Vec<String> = series
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.1},{:.1}", frame.sx(x), frame.sy(y)))
                    .collect();
                out.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                     stroke-width=\"1.8\"/>\n",
                    coords.join(" ")
                ));
            }
            out.push_str(&format!(
                "<line x1=\"{legend_x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
                 stroke=\"{color}\" stroke-width=\"1.8\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
                legend_y - 4.0,
                legend_x + 22.0,
                legend_y - 4.0,
                legend_x + 28.0,
                legend_y,
                escape(&series.name)
            ));
            legend_y += 18.0;
        }
        for (i, marker) in self.markers.iter().enumerate() {
            let color = PALETTE[(self.series.len() + i) % PALETTE.len()];
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"5\" fill=\"{color}\" \
                 stroke=\"black\"/>\n",
                frame.sx(marker.x),
                frame.sy(marker.y)
            ));
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"5\" fill=\"{color}\" \
                 stroke=\"black\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
                legend_x + 11.0,
                legend_y - 4.0,
                legend_x + 28.0,
                legend_y,
                escape(&marker.name)
            ));
            legend_y += 18.0;
        }
        footnote(&mut out, &self.footnote);
        out.push_str("</svg>\n");
        out
    }
}

impl BarChart {
    pub fn render(&self) -> String {
        let top = self.bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
        let frame = Frame {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: if top > 0.0 { top * 1.05 } else { 1.0 },
        };

        let mut out = String::new();
        open_svg(&mut out, &self.title);
        axes(&mut out, &frame, &self.x_label, &self.y_label);

        let n = self.bars.len().max(1) as f64;
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let slot = plot_w / n;
        let bar_w = slot * 0.6;
        let base_y = HEIGHT - MARGIN_BOTTOM;
        for (i, (label, value)) in self.bars.iter().enumerate() {
            let cx = MARGIN_LEFT + (i as f64 + 0.5) * slot;
            let sy = frame.sy(value.max(0.0));
            out.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{sy:.1}\" width=\"{bar_w:.1}\" height=\"{:.1}\" \
                 fill=\"{}\"/>\n",
                cx - bar_w / 2.0,
                base_y - sy,
                PALETTE[0]
            ));
            out.push_str(&format!(
                "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n\
                 <text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
                base_y + 35.0,
                escape(label),
                sy - 4.0,
                fmt(*value)
            ));
        }
        footnote(&mut out, &self.footnote);
        out.push_str("</svg>\n");
        out
    }
}
