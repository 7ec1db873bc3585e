//! Minimal SVG line charts: a 2x2 grid of loss and accuracy curves for
//! the two comparison arms, written without an external renderer.

use lesionlab::pipeline::EpochLog;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 36.0;
const GUTTER: f64 = 24.0;

const TRAIN_COLOR: &str = "#1f6fb4";
const VAL_COLOR: &str = "#d9662c";

struct Panel<'a> {
    title: String,
    train: Vec<(usize, f64)>,
    val: Vec<(usize, f64)>,
    y_label: &'a str,
}

/// Curves for both arms in a fixed grid: losses on the top row, accuracy
/// on the bottom, arm A down the left column and arm B down the right.
pub fn compare_panels_svg(log_a: &EpochLog, log_b: &EpochLog) -> String {
    let name =
        |log: &EpochLog, fallback: &str| -> String { log.run_id().unwrap_or(fallback).to_string() };
    let panels = [
        Panel {
            title: format!("Loss A ({})", name(log_a, "arm a")),
            train: log_a.train_loss_series(),
            val: log_a.val_loss_series(),
            y_label: "loss",
        },
        Panel {
            title: format!("Loss B ({})", name(log_b, "arm b")),
            train: log_b.train_loss_series(),
            val: log_b.val_loss_series(),
            y_label: "loss",
        },
        Panel {
            title: format!("Accuracy A ({})", name(log_a, "arm a")),
            train: log_a.train_acc_series(),
            val: log_a.val_acc_series(),
            y_label: "accuracy",
        },
        Panel {
            title: format!("Accuracy B ({})", name(log_b, "arm b")),
            train: log_b.train_acc_series(),
            val: log_b.val_acc_series(),
            y_label: "accuracy",
        },
    ];

    let total_w = 2.0 * PANEL_W + GUTTER + 2.0 * GUTTER;
    let total_h = 2.0 * PANEL_H + GUTTER + 2.0 * GUTTER;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{total_h}\" \
         viewBox=\"0 0 {total_w} {total_h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, panel) in panels.iter().enumerate() {
        let col = (i % 2) as f64;
        let row = (i / 2) as f64;
        let x0 = GUTTER + col * (PANEL_W + GUTTER);
        let y0 = GUTTER + row * (PANEL_H + GUTTER);
        svg.push_str(&render_panel(panel, x0, y0));
    }
    svg.push_str("</svg>\n");
    svg
}

fn render_panel(panel: &Panel, x0: f64, y0: f64) -> String {
    let plot_x = x0 + MARGIN_L;
    let plot_y = y0 + MARGIN_T;
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;

    let all: Vec<f64> = panel
        .train
        .iter()
        .chain(panel.val.iter())
        .map(|&(_, v)| v)
        .collect();
    let mut y_min = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut y_max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !y_min.is_finite() || !y_max.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;
    let x_max = panel
        .train
        .iter()
        .chain(panel.val.iter())
        .map(|&(e, _)| e)
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let sx = move |e: f64| plot_x + e / x_max * plot_w;
    let sy = move |v: f64| plot_y + (y_max - v) / (y_max - y_min) * plot_h;

    let polyline = |series: &[(usize, f64)], color: &str| -> String {
        let pts: Vec<String> = series
            .iter()
            .map(|&(e, v)| format!("{:.2},{:.2}", sx(e as f64), sy(v)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        )
    };

    let mut s = String::new();
    s.push_str(&format!(
        "<rect x=\"{plot_x}\" y=\"{plot_y}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        plot_x + plot_w / 2.0,
        y0 + 18.0,
        panel.title
    ));
    // y extremes, x extent and axis names
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>\n",
        plot_x - 4.0,
        plot_y + 10.0,
        y_max
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>\n",
        plot_x - 4.0,
        plot_y + plot_h,
        y_min
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">epoch</text>\n",
        plot_x + plot_w / 2.0,
        plot_y + plot_h + 26.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
        plot_x + plot_w,
        plot_y + plot_h + 26.0,
        x_max as usize
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" transform=\"rotate(-90 {:.2} {:.2})\" \
         text-anchor=\"middle\">{}</text>\n",
        x0 + 14.0,
        plot_y + plot_h / 2.0,
        x0 + 14.0,
        plot_y + plot_h / 2.0,
        panel.y_label
    ));

    s.push_str(&polyline(&panel.train, TRAIN_COLOR));
    s.push_str(&polyline(&panel.val, VAL_COLOR));

    // legend in the top-right corner of the plot area
    let lx = plot_x + plot_w - 86.0;
    let ly = plot_y + 8.0;
    s.push_str(&format!(
        "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{TRAIN_COLOR}\" stroke-width=\"2\"/>\n\
         <text x=\"{}\" y=\"{}\">train</text>\n",
        lx + 18.0,
        lx + 22.0,
        ly + 4.0
    ));
    s.push_str(&format!(
        "<line x1=\"{lx}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{VAL_COLOR}\" stroke-width=\"2\"/>\n\
         <text x=\"{}\" y=\"{}\">val</text>\n",
        ly + 14.0,
        lx + 18.0,
        ly + 14.0,
        lx + 22.0,
        ly + 18.0
    ));
    s
}
