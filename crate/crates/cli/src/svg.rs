//! Minimal static SVG emission for 2-D regions and trajectories.

use nalgebra::DVector;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;

pub struct Canvas {
    min: [f64; 2],
    max: [f64; 2],
    body: String,
}

impl Canvas {
    /// World-coordinate bounds, padded slightly so strokes stay visible.
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Canvas {
        let pad = [
            0.05 * (max[0] - min[0]).max(1e-9),
            0.05 * (max[1] - min[1]).max(1e-9),
        ];
        Canvas {
            min: [min[0] - pad[0], min[1] - pad[1]],
            max: [max[0] + pad[0], max[1] + pad[1]],
            body: String::new(),
        }
    }

    fn map(&self, p: &DVector<f64>) -> (f64, f64) {
        let sx = (SIZE - 2.0 * MARGIN) / (self.max[0] - self.min[0]);
        let sy = (SIZE - 2.0 * MARGIN) / (self.max[1] - self.min[1]);
        let x = MARGIN + (p[0] - self.min[0]) * sx;
        // SVG y grows downward.
        let y = SIZE - MARGIN - (p[1] - self.min[1]) * sy;
        (x, y)
    }

    fn points_attr(&self, pts: &[DVector<f64>]) -> String {
        pts.iter()
            .map(|p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn polygon(&mut self, vertices: &[DVector<f64>], color: &str, label: &str) {
        if vertices.len() < 3 {
            return;
        }
        self.body.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.12\" \
             stroke=\"{color}\" stroke-width=\"1.5\"><title>{label}</title></polygon>\n",
            self.points_attr(vertices)
        ));
    }

    pub fn polyline(&mut self, points: &[DVector<f64>], color: &str, label: &str) {
        if points.len() < 2 {
            return;
        }
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.2\"><title>{label}</title></polyline>\n",
            self.points_attr(points)
        ));
    }

    pub fn marker(&mut self, p: &DVector<f64>, color: &str) {
        let (x, y) = self.map(p);
        self.body
            .push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n"));
    }

    pub fn legend(&mut self, entries: &[(String, String)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN + 16.0 * i as f64;
            self.body.push_str(&format!(
                "<rect x=\"{x}\" y=\"{ry}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\
                 <text x=\"{tx}\" y=\"{ty}\" font-size=\"12\" font-family=\"sans-serif\">{label}</text>\n",
                x = MARGIN,
                ry = y - 10.0,
                tx = MARGIN + 16.0,
                ty = y,
            ));
        }
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" \
             viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}
