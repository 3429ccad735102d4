//! Minimal SVG heatmaps and line charts.

use std::fmt::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorScale {
    /// Blue through white to red, centred at zero and symmetric in |value|.
    Diverging,
    /// White to dark blue over `[0, max]`, for attention weights.
    Sequential,
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && c != '\t' => {
                let _ = write!(out, "\\x{:02x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn rgb(t: f32, scale: ColorScale) -> String {
    let t = if t.is_finite() { t } else { 0.0 };
    let (r, g, b) = match scale {
        ColorScale::Diverging => {
            let t = t.clamp(-1.0, 1.0);
            if t >= 0.0 {
                (1.0, 1.0 - 0.8 * t, 1.0 - 0.8 * t)
            } else {
                (1.0 + 0.8 * t, 1.0 + 0.8 * t, 1.0)
            }
        }
        ColorScale::Sequential => {
            let t = t.clamp(0.0, 1.0);
            (1.0 - 0.9 * t, 1.0 - 0.7 * t, 1.0 - 0.3 * t)
        }
    };
    let c = |x: f32| (x * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(r), c(g), c(b))
}

fn fmt_value(v: f32) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1000.0) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

pub struct Heatmap<'a> {
    pub title: &'a str,
    pub row_axis: &'a str,
    pub col_axis: &'a str,
    pub row_labels: &'a [String],
    pub col_labels: &'a [String],
    /// Row-major, `row_labels.len() × col_labels.len()`.
    pub values: &'a [f32],
    pub scale: ColorScale,
}

impl Heatmap<'_> {
    pub fn render(&self) -> String {
        let rows = self.row_labels.len();
        let cols = self.col_labels.len();
        assert_eq!(rows * cols, self.values.len(), "heatmap shape");
        let cell = if cols > 30 { 14.0 } else { 26.0 };
        let longest = |ls: &[String]| ls.iter().map(|l| l.chars().count()).max().unwrap_or(1) as f32;
        let left = 40.0 + 7.0 * longest(self.row_labels);
        let top = 50.0;
        let bottom = 30.0 + 6.5 * longest(self.col_labels).min(24.0);
        let width = left + cols as f32 * cell + 110.0;
        let height = top + rows as f32 * cell + bottom;

        let bound = match self.scale {
            ColorScale::Diverging => self.values.iter().fold(0.0f32, |m, v| m.max(v.abs())),
            ColorScale::Sequential => self.values.iter().fold(0.0f32, |m, &v| m.max(v)),
        };
        let norm = if bound > 0.0 { bound } else { 1.0 };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="13">{}</text>"#, escape(self.title));
        let _ = writeln!(
            s,
            r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">{}</text>"#,
            top + rows as f32 * cell / 2.0,
            top + rows as f32 * cell / 2.0,
            escape(self.row_axis)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + cols as f32 * cell / 2.0,
            height - 6.0,
            escape(self.col_axis)
        );
        for (r, label) in self.row_labels.iter().enumerate() {
            let y = top + (r as f32 + 0.5) * cell + 3.5;
            let _ = writeln!(s, r#"<text class="ylabel" x="{:.1}" y="{y:.1}" text-anchor="end">{}</text>"#, left - 4.0, escape(label));
        }
        for (c, label) in self.col_labels.iter().enumerate() {
            let x = left + (c as f32 + 0.5) * cell + 3.5;
            let y = top + rows as f32 * cell + 6.0;
            let _ = writeln!(
                s,
                r#"<text class="xlabel" x="{x:.1}" y="{y:.1}" transform="rotate(90 {x:.1} {y:.1})">{}</text>"#,
                escape(label)
            );
        }
        for r in 0..rows {
            for c in 0..cols {
                let v = self.values[r * cols + c];
                let _ = writeln!(
                    s,
                    r#"<rect class="cell" x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="{}"><title>{} / {}: {}</title></rect>"#,
                    left + c as f32 * cell,
                    top + r as f32 * cell,
                    rgb(v / norm, self.scale),
                    escape(&self.row_labels[r]),
                    escape(&self.col_labels[c]),
                    fmt_value(v)
                );
            }
        }
        // colour bar
        let bar_x = left + cols as f32 * cell + 20.0;
        let bar_h = (rows as f32 * cell).max(60.0);
        let steps = 20;
        for i in 0..steps {
            let t = 1.0 - (i as f32 + 0.5) / steps as f32;
            let t = match self.scale {
                ColorScale::Diverging => 2.0 * t - 1.0,
                ColorScale::Sequential => t,
            };
            let _ = writeln!(
                s,
                r#"<rect x="{bar_x:.1}" y="{:.1}" width="14" height="{:.2}" fill="{}"/>"#,
                top + i as f32 * bar_h / steps as f32,
                bar_h / steps as f32 + 0.2,
                rgb(t, self.scale)
            );
        }
        let low = match self.scale {
            ColorScale::Diverging => -norm,
            ColorScale::Sequential => 0.0,
        };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, bar_x + 18.0, top + 8.0, fmt_value(norm));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, bar_x + 18.0, top + bar_h, fmt_value(low));
        s.push_str("</svg>\n");
        s
    }
}

pub struct LineChart<'a> {
    pub title: &'a str,
    pub y_axis: &'a str,
    pub x_labels: &'a [String],
    pub series: &'a [(String, Vec<f32>)],
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

impl LineChart<'_> {
    pub fn render(&self) -> String {
        let n = self.x_labels.len();
        let (left, top, plot_w, plot_h) = (70.0f32, 40.0f32, (28.0 * n as f32).max(300.0), 260.0f32);
        let width = left + plot_w + 150.0;
        let height = top + plot_h + 90.0;
        let all = self.series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
        let (mut lo, mut hi) = all.fold((0.0f32, 0.0f32), |(a, b), v| (a.min(v), b.max(v)));
        if hi - lo < 1e-6 {
            hi += 1.0;
            lo -= 1.0;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let x = |i: usize| left + if n > 1 { plot_w * i as f32 / (n - 1) as f32 } else { plot_w / 2.0 };
        let y = |v: f32| top + plot_h * (hi - v) / (hi - lo);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{left}" y="22" font-size="13">{}</text>"#, escape(self.title));
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="3 3"/>"##,
            y(0.0),
            left + plot_w,
            y(0.0)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f32 / 4.0;
            let _ = writeln!(
                s,
                r#"<text class="ytick" x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 5.0,
                y(v) + 3.0,
                fmt_value(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
            top + plot_h / 2.0,
            top + plot_h / 2.0,
            escape(self.y_axis)
        );
        for (i, label) in self.x_labels.iter().enumerate() {
            let (tx, ty) = (x(i), top + plot_h + 8.0);
            let _ = writeln!(
                s,
                r#"<text class="xtick" x="{tx:.1}" y="{ty:.1}" transform="rotate(60 {tx:.1} {ty:.1})">{}</text>"#,
                escape(label)
            );
        }
        for (k, (name, values)) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let points: Vec<String> = values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                points.join(" ")
            );
            for (i, &v) in values.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"><title>{}: {}</title></circle>"#,
                    x(i),
                    y(v),
                    escape(&self.x_labels[i]),
                    fmt_value(v)
                );
            }
            let ly = top + 14.0 * k as f32 + 6.0;
            let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="3" fill="{color}"/>"#, left + plot_w + 12.0, ly);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, left + plot_w + 26.0, ly + 4.0, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup_and_control_bytes() {
        assert_eq!(escape("<a & 'b'>"), "&lt;a &amp; &apos;b&apos;&gt;");
        assert_eq!(escape("\n"), "\\x0a");
    }

    #[test]
    fn diverging_scale_is_white_at_zero() {
        assert_eq!(rgb(0.0, ColorScale::Diverging), "#ffffff");
        assert_eq!(rgb(1.0, ColorScale::Diverging), "#ff3333");
        assert_eq!(rgb(-1.0, ColorScale::Diverging), "#3333ff");
        assert_eq!(rgb(f32::NAN, ColorScale::Diverging), "#ffffff");
    }

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let rows: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let cols: Vec<String> = ["a", "<b>"].iter().map(|s| s.to_string()).collect();
        let svg = Heatmap {
            title: "t",
            row_axis: "r",
            col_axis: "c",
            row_labels: &rows,
            col_labels: &cols,
            values: &[1.0, -1.0, 0.0, 0.5, 0.25, -0.25],
            scale: ColorScale::Diverging,
        }
        .render();
        assert_eq!(svg.matches(r#"class="cell""#).count(), 6);
        assert!(svg.contains("&lt;b&gt;"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
