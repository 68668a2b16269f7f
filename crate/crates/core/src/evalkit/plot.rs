use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::simkit::TrajectorySample;
use crate::{Error, Result};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn check(sample: &TrajectorySample, pred: &[Vec<[f64; 4]>], cond: usize) -> Result<()> {
    if pred.len() != sample.n_objects {
        return Err(Error::shape("emit_plots", format!("{} predicted objects, sample has {}", pred.len(), sample.n_objects)));
    }
    if pred.iter().any(|p| cond + p.len() > sample.n_frames) {
        return Err(Error::Config("prediction window runs past the recorded frames".into()));
    }
    Ok(())
}

/// One row per object and frame; prediction columns are empty outside the
/// predicted window.
pub fn write_csv(sample: &TrajectorySample, pred: &[Vec<[f64; 4]>], cond: usize) -> Result<String> {
    check(sample, pred, cond)?;
    let mut out = String::from("object,frame,qx,qy,vx,vy,pred_qx,pred_qy,pred_vx,pred_vy\n");
    for (i, p) in pred.iter().enumerate() {
        for t in 0..sample.n_frames {
            let x = sample.features(i, t);
            let _ = write!(out, "{i},{t},{},{},{},{}", x[0], x[1], x[2], x[3]);
            match t.checked_sub(cond).and_then(|k| p.get(k)) {
                Some(y) => {
                    let _ = writeln!(out, ",{},{},{},{}", y[0], y[1], y[2], y[3]);
                }
                None => out.push_str(",,,,\n"),
            }
        }
    }
    Ok(out)
}

fn polyline(points: &[[f64; 2]], map: &dyn Fn([f64; 2]) -> (f64, f64), style: &str) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|&q| {
            let (x, y) = map(q);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    format!("  <polyline points=\"{}\" fill=\"none\" {style}/>\n", pts.join(" "))
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Per-object paths: the observed window semi-transparent, the true future
/// dashed, the predicted future solid.
pub fn write_svg(sample: &TrajectorySample, pred: &[Vec<[f64; 4]>], cond: usize) -> Result<String> {
    check(sample, pred, cond)?;
    let (size, pad) = (480.0, 20.0);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let all = sample
        .positions
        .iter()
        .flatten()
        .copied()
        .chain(pred.iter().flatten().map(|y| [y[0], y[1]]));
    for q in all {
        for c in 0..2 {
            lo[c] = lo[c].min(q[c]);
            hi[c] = hi[c].max(q[c]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let s = (size - 2.0 * pad) / span;
    let map = move |q: [f64; 2]| (pad + (q[0] - lo[0]) * s, size - pad - (q[1] - lo[1]) * s);

    let mut svg = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n  <title>{}</title>\n  \
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        escape(&sample.id)
    );
    for (i, p) in pred.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let q = &sample.positions[i];
        let end = cond + p.len();
        svg += &polyline(
            &q[..cond.min(q.len())],
            &map,
            &format!("stroke=\"{color}\" stroke-width=\"2\" stroke-opacity=\"0.35\""),
        );
        if !p.is_empty() {
            svg += &polyline(
                &q[cond.saturating_sub(1)..end],
                &map,
                &format!("stroke=\"{color}\" stroke-width=\"1\" stroke-dasharray=\"4 3\""),
            );
            let mut path: Vec<[f64; 2]> = Vec::with_capacity(p.len() + 1);
            if cond > 0 {
                path.push(q[cond - 1]);
            }
            path.extend(p.iter().map(|y| [y[0], y[1]]));
            svg += &polyline(&path, &map, &format!("stroke=\"{color}\" stroke-width=\"2\""));
        }
        let (x, y) = map(q[0]);
        let _ = writeln!(svg, "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.35\"/>");
    }
    svg += "</svg>\n";
    Ok(svg)
}

/// Writes `<stem>.svg` and `<stem>.csv` and returns both paths.
pub fn emit_plots(
    sample: &TrajectorySample,
    pred: &[Vec<[f64; 4]>],
    cond: usize,
    out_dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let svg = write_svg(sample, pred, cond)?;
    let csv = write_csv(sample, pred, cond)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let svg_path = out_dir.join(format!("{stem}.svg"));
    let csv_path = out_dir.join(format!("{stem}.csv"));
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok((svg_path, csv_path))
}
