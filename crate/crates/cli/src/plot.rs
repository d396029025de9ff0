//! Grayscale attention heatmaps: binary PGM raster, text legend and an
//! optional SVG with token labels. Weight 0 is black, 1 is white.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nmt_core::NmtError;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Target rows by source columns, each weight mapped to 0..=255.
    pub levels: Vec<Vec<u8>>,
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    /// Pixels per cell side.
    pub cell: usize,
}

pub fn level(weight: f64) -> u8 {
    (weight.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn plot_attn(weights: &[Vec<f64>], columns: &[String], rows: &[String], cell: usize) -> Result<Heatmap, NmtError> {
    if cell == 0 {
        return Err(NmtError::InvalidArgument("cell size must be at least 1".into()));
    }
    if weights.len() != rows.len() {
        return Err(NmtError::InvalidArgument(format!(
            "{} weight rows but {} target tokens",
            weights.len(),
            rows.len()
        )));
    }
    if let Some(bad) = weights.iter().position(|r| r.len() != columns.len()) {
        return Err(NmtError::InvalidArgument(format!(
            "row {bad} has {} weights but there are {} source tokens",
            weights[bad].len(),
            columns.len()
        )));
    }
    Ok(Heatmap {
        levels: weights.iter().map(|r| r.iter().map(|&w| level(w)).collect()).collect(),
        columns: columns.to_vec(),
        rows: rows.to_vec(),
        cell,
    })
}

impl Heatmap {
    pub fn width(&self) -> usize {
        self.columns.len() * self.cell
    }

    pub fn height(&self) -> usize {
        self.rows.len() * self.cell
    }

    pub fn pgm(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.reserve(w * h);
        for row in &self.levels {
            let line: Vec<u8> = row.iter().flat_map(|&v| std::iter::repeat_n(v, self.cell)).collect();
            for _ in 0..self.cell {
                out.extend_from_slice(&line);
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), NmtError> {
        fs::write(path, self.pgm()).map_err(|e| NmtError::io(path, e))
    }

    /// Column and row labels in image order.
    pub fn legend(&self) -> String {
        let mut out = String::from("columns (source):\n");
        for (i, c) in self.columns.iter().enumerate() {
            let _ = writeln!(out, "  {i}\t{c}");
        }
        out.push_str("rows (target):\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "  {i}\t{r}");
        }
        out
    }

    pub fn svg(&self) -> String {
        const CELL: usize = 24;
        const MARGIN: usize = 80;
        let w = MARGIN + self.columns.len() * CELL;
        let h = MARGIN + self.rows.len() * CELL;
        let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-size=\"10\" font-family=\"monospace\">\n");
        for (j, c) in self.columns.iter().enumerate() {
            let x = MARGIN + j * CELL + CELL / 2;
            let _ = writeln!(
                out,
                "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-60 {x} {})\">{}</text>",
                MARGIN - 4,
                MARGIN - 4,
                escape(c)
            );
        }
        for (i, (label, row)) in self.rows.iter().zip(&self.levels).enumerate() {
            let y = MARGIN + i * CELL;
            let _ = writeln!(out, "<text x=\"4\" y=\"{}\">{}</text>", y + CELL / 2 + 3, escape(label));
            for (j, &v) in row.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({v},{v},{v})\"/>",
                    MARGIN + j * CELL
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn identity_is_white_diagonal() {
        let w: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let img = plot_attn(&w, &labels(3), &labels(3), 1).unwrap();
        let bytes = img.pgm();
        assert!(bytes.starts_with(b"P5\n3 3\n255\n"));
        let pixels = &bytes[bytes.len() - 9..];
        assert_eq!(pixels, &[255, 0, 0, 0, 255, 0, 0, 0, 255]);
    }

    #[test]
    fn uniform_rows_are_mid_gray() {
        let w = vec![vec![0.5, 0.5]; 2];
        let img = plot_attn(&w, &labels(2), &labels(2), 2).unwrap();
        assert_eq!(img.width(), 4);
        let bytes = img.pgm();
        assert!(bytes[bytes.len() - 16..].iter().all(|&v| v == 128));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(plot_attn(&[vec![1.0]], &labels(2), &labels(1), 1).is_err());
        assert!(plot_attn(&[vec![1.0]], &labels(1), &labels(2), 1).is_err());
    }

    #[test]
    fn svg_escapes_labels() {
        let img = plot_attn(&[vec![1.0]], &["</s>".to_string()], &["a".to_string()], 1).unwrap();
        assert!(img.svg().contains("&lt;/s&gt;"));
        assert!(img.legend().contains("</s>"));
    }
}
