//! Tables and plots from a finished run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::RunDir;
use crate::metrics::{average_recall, forgetting, Direction, EvalMatrix};

const DIRECTIONS: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

/// `j,direction,ar,f` for every complete row; `f` is blank where undefined.
pub fn ar_f_csv(m: &EvalMatrix) -> String {
    let mut s = String::from("j,direction,ar,f\n");
    for j in 0..m.n_tasks() {
        for dir in DIRECTIONS {
            if !m.row_complete(j, dir) {
                continue;
            }
            let Ok(ar) = average_recall(m, j, dir) else { continue };
            let f = forgetting(m, j, dir).map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{j},{dir},{ar},{f}");
        }
    }
    s
}

/// A polyline chart with one series per `(label, points)`.
pub fn line_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x0:.3}</text>"#, PAD, H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, W - PAD, H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#, PAD - 4.0, PAD + 4.0);
    for (k, (label, points)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, coords.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD + 4.0,
            PAD + 14.0 * k as f64,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Numeric columns of a small CSV with a header row.
fn columns(path: &Path, text: &str, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header.iter().position(|h| h == n).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("missing column `{n}`"),
            })
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); names.len()];
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        for (col, &i) in out.iter_mut().zip(&idx) {
            let v = fields.get(i).and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 2,
                msg: format!("bad value in column {i}"),
            })?;
            col.push(v);
        }
    }
    Ok(out)
}

fn write(out: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Write the report of the run at `run` into `out` and return the files written.
pub fn write_report(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = RunDir::new(run);
    let matrix_path = dir.eval_matrix();
    if !matrix_path.exists() {
        return Err(Error::MissingArtifact(matrix_path));
    }
    let m = EvalMatrix::load(&matrix_path)?;
    let diag = dir.diagnostics();
    let fisher_path = diag.join("fisher.csv");
    let fisher = read(&fisher_path)?;
    let curve_path = diag.join("loss_curve.csv");
    let curve = read(&curve_path)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    write(out, "eval_matrix.csv", &m.to_csv(), &mut written)?;
    let ar_f = ar_f_csv(&m);
    write(out, "ar_f.csv", &ar_f, &mut written)?;
    write(out, "fisher.csv", &fisher, &mut written)?;
    write(out, "loss_curve.csv", &curve, &mut written)?;
    for name in ["dist_stats.csv", "end_of_run.csv"] {
        if let Ok(text) = read(&diag.join(name)) {
            write(out, name, &text, &mut written)?;
        }
    }
    let mut ted: Vec<(usize, String)> = Vec::new();
    for entry in fs::read_dir(&diag).map_err(|e| Error::io(&diag, e))? {
        let entry = entry.map_err(|e| Error::io(&diag, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(t) = name.strip_prefix("ted_task").and_then(|r| r.strip_suffix(".csv")).and_then(|t| t.parse().ok()) {
            ted.push((t, name));
        }
    }
    if ted.is_empty() {
        return Err(Error::MissingArtifact(diag.join("ted_task0.csv")));
    }
    ted.sort();
    for (_, name) in &ted {
        write(out, name, &read(&diag.join(name))?, &mut written)?;
    }

    let mut ar_series = Vec::new();
    for dir in DIRECTIONS {
        let pts: Vec<(f64, f64)> = (0..m.n_tasks())
            .filter_map(|j| average_recall(&m, j, dir).ok().map(|a| (j as f64, a)))
            .collect();
        ar_series.push((format!("AR {dir}"), pts));
    }
    write(out, "ar.svg", &line_svg("average recall@1", "task", &ar_series), &mut written)?;
    let f = columns(&fisher_path, &fisher, &["task", "fisher_trace"])?;
    let pts = f[0].iter().copied().zip(f[1].iter().copied()).collect();
    write(out, "fisher.svg", &line_svg("Fisher trace", "task", &[("trace".into(), pts)]), &mut written)?;
    let c = columns(&curve_path, &curve, &["task", "mean_loss"])?;
    let mut by_task: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (&t, &l) in c[0].iter().zip(&c[1]) {
        let label = format!("task {t}");
        match by_task.last_mut() {
            Some((last, pts)) if *last == label => pts.push((pts.len() as f64, l)),
            _ => by_task.push((label, vec![(0.0, l)])),
        }
    }
    write(out, "loss_curve.svg", &line_svg("training loss", "epoch", &by_task), &mut written)?;
    Ok(written)
}
