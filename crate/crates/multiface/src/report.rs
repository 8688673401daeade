//! Report emission: CSV tables, bar charts and comparison strips.

use std::path::Path;

use multiface_core::capture::Rgb8Image;
use multiface_core::protocol::{EvalReport, EvalRow, Protocol};
use multiface_core::train::LossRecord;

use crate::store::{write_atomic, write_png, Result, StoreError};

fn csv_err(path: &Path, e: csv::Error) -> StoreError {
    StoreError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) }
}

pub fn report_csv(report: &EvalReport) -> std::result::Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_report_csv(text: &str) -> std::result::Result<EvalReport, csv::Error> {
    let rows =
        csv::Reader::from_reader(text.as_bytes()).deserialize::<EvalRow>().collect::<std::result::Result<_, _>>()?;
    Ok(EvalReport { rows })
}

pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let text = report_csv(report).map_err(|e| csv_err(path, e))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    parse_report_csv(&crate::store::read_text(path)?).map_err(|e| csv_err(path, e))
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut s = String::from("iteration,total,screen,geometry,kl\n");
    for r in curve {
        let t = &r.terms;
        s.push_str(&format!("{},{},{},{},{}\n", r.iteration, t.total, t.screen, t.geometry, t.kl));
    }
    write_atomic(path, s.as_bytes())
}

/// Bar colors by variant order in the report.
pub const PALETTE: [[u8; 3]; 6] =
    [[70, 110, 180], [220, 130, 50], [90, 160, 90], [190, 70, 70], [140, 110, 180], [120, 120, 120]];

const BAR: usize = 14;
const GAP: usize = 10;
const MARGIN: usize = 12;
const PLOT_H: usize = 160;

/// Grouped bar chart of MSE for one protocol: one group per split, in
/// first-seen order, one bar per variant. Horizontal lines mark tenths of
/// the tallest bar.
pub fn bar_chart(report: &EvalReport, protocol: Protocol) -> Rgb8Image {
    let rows: Vec<&EvalRow> = report.rows.iter().filter(|r| r.protocol == protocol).collect();
    let mut splits: Vec<&str> = Vec::new();
    let mut variants: Vec<&str> = Vec::new();
    for r in &rows {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let group = variants.len().max(1) * BAR;
    let width = 2 * MARGIN + splits.len().max(1) * (group + GAP);
    let height = PLOT_H + 2 * MARGIN;
    let mut img = Rgb8Image { width, height, pixels: vec![[255; 3]; width * height] };
    let max = rows.iter().map(|r| r.mse).fold(0.0, f64::max);
    let base = MARGIN + PLOT_H;
    let mut fill = |x0: usize, x1: usize, y0: usize, y1: usize, c: [u8; 3]| {
        for y in y0..y1.min(height) {
            for x in x0..x1.min(width) {
                img.pixels[y * width + x] = c;
            }
        }
    };
    for k in 1..=10 {
        let y = base - k * PLOT_H / 10;
        fill(MARGIN, width - MARGIN, y, y + 1, [225; 3]);
    }
    for r in &rows {
        let s = splits.iter().position(|s| *s == r.split).unwrap();
        let v = variants.iter().position(|v| *v == r.variant).unwrap();
        let h = if max > 0.0 { ((r.mse / max) * PLOT_H as f64).round() as usize } else { 0 };
        let x = MARGIN + GAP / 2 + s * (group + GAP) + v * BAR;
        fill(x + 1, x + BAR - 1, base - h, base, PALETTE[v % PALETTE.len()]);
    }
    fill(MARGIN, width - MARGIN, base, base + 1, [0; 3]);
    fill(MARGIN, MARGIN + 1, MARGIN, base + 1, [0; 3]);
    img
}

/// Images side by side on a gray background, top-aligned.
pub fn image_strip(images: &[Rgb8Image]) -> Rgb8Image {
    const SEP: usize = 2;
    let width = images.iter().map(|i| i.width).sum::<usize>() + SEP * (images.len() + 1);
    let height = images.iter().map(|i| i.height).max().unwrap_or(0) + 2 * SEP;
    let mut out = Rgb8Image { width, height, pixels: vec![[128; 3]; width * height] };
    let mut x0 = SEP;
    for img in images {
        for y in 0..img.height {
            let dst = (y + SEP) * width + x0;
            out.pixels[dst..dst + img.width].copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
        }
        x0 += img.width + SEP;
    }
    out
}

/// `report.csv` plus one `chart_<protocol>.png` per protocol present.
pub fn emit_report(dir: &Path, report: &EvalReport) -> Result<()> {
    report.validate()?;
    write_report_csv(&dir.join("report.csv"), report)?;
    for p in Protocol::ALL {
        if report.rows.iter().any(|r| r.protocol == p) {
            write_png(&dir.join(format!("chart_{}.png", p.name())), &bar_chart(report, p))?;
        }
    }
    Ok(())
}
