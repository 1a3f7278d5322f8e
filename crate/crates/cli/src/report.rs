//! Aggregated charts and tables over every run below an output directory.
//!
//! Medians are taken over rng seeds. Outputs land in `<out>/report/`:
//!
//! - `map50-spc<n>.svg`, `map-spc<n>.svg`: mAP vs iteration, one line per variant
//! - `curves-<variant>-spc<n>-seed-<s>.svg`: precision vs mined count, one line per iteration
//! - `seed-sweep.svg`: iteration-0 and final mAP@0.5 against seeds per category
//! - `table1.txt`, `table1.csv`: mined boxes and precision per iteration and variant
//! - `summary.csv`: the medians behind the charts

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use notercnn::trainer::Schedule;

use crate::error::{io_err, CliError, Result};
use crate::pipeline::{write_file, Layout};
use crate::svg::LineChart;

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub map_50: f64,
    pub map_50_95: f64,
    pub mined_count: usize,
    pub mined_precision: f64,
    pub mined_recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub theta: f64,
    pub count: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub variant: String,
    pub seeds_per_category: usize,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub curves: Vec<CurveRow>,
}

/// A CSV file read by column name.
struct Table {
    path: PathBuf,
    columns: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let columns = match lines.next() {
            Some((_, header)) => header.split(',').map(str::to_string).collect(),
            None => {
                return Err(CliError::Table {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "empty file".into(),
                })
            }
        };
        let rows = lines
            .map(|(i, l)| (i + 1, l.split(',').map(str::to_string).collect()))
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            columns,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    fn parse<T: std::str::FromStr>(&self, line: usize, row: &[String], col: usize) -> Result<T> {
        let raw = row.get(col).map(String::as_str).unwrap_or("");
        raw.parse().map_err(|_| CliError::Table {
            path: self.path.clone(),
            line,
            message: format!("column {:?}: cannot parse {raw:?}", self.columns[col]),
        })
    }
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let t = Table::read(path)?;
    let cols = [
        t.column("iteration")?,
        t.column("mAP@0.5")?,
        t.column("mAP@[0.5:0.95]")?,
        t.column("mined_count")?,
        t.column("mined_precision")?,
        t.column("mined_recall")?,
    ];
    t.rows
        .iter()
        .map(|(line, r)| {
            Ok(MetricsRow {
                iteration: t.parse(*line, r, cols[0])?,
                map_50: t.parse(*line, r, cols[1])?,
                map_50_95: t.parse(*line, r, cols[2])?,
                mined_count: t.parse(*line, r, cols[3])?,
                mined_precision: t.parse(*line, r, cols[4])?,
                mined_recall: t.parse(*line, r, cols[5])?,
            })
        })
        .collect()
}

fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let t = Table::read(path)?;
    let cols = [
        t.column("iteration")?,
        t.column("theta")?,
        t.column("count")?,
        t.column("precision")?,
    ];
    t.rows
        .iter()
        .map(|(line, r)| {
            Ok(CurveRow {
                iteration: t.parse(*line, r, cols[0])?,
                theta: t.parse(*line, r, cols[1])?,
                count: t.parse(*line, r, cols[2])?,
                precision: t.parse(*line, r, cols[3])?,
            })
        })
        .collect()
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Display order: the named variants in their canonical order, then the rest.
fn variant_rank(name: &str) -> (usize, String) {
    let pos = Schedule::NAMED.iter().position(|n| *n == name).unwrap_or(Schedule::NAMED.len());
    (pos, name.to_string())
}

/// Reads every run below `<root>/runs`.
pub fn collect_runs(root: &Path) -> Result<Vec<RunMetrics>> {
    let runs_dir = root.join("runs");
    let mut runs = Vec::new();
    for (variant, vdir) in sorted_subdirs(&runs_dir)? {
        for (spc_name, sdir) in sorted_subdirs(&vdir)? {
            let Some(spc) = spc_name.strip_prefix("spc").and_then(|s| s.parse().ok()) else {
                continue;
            };
            for (seed_name, rdir) in sorted_subdirs(&sdir)? {
                let Some(seed) = seed_name.strip_prefix("seed-").and_then(|s| s.parse().ok()) else {
                    continue;
                };
                let rows = read_metrics(&rdir.join("metrics.csv"))?;
                let curves_path = rdir.join("curves.csv");
                let curves = if curves_path.is_file() {
                    read_curves(&curves_path)?
                } else {
                    Vec::new()
                };
                runs.push(RunMetrics {
                    variant: variant.clone(),
                    seeds_per_category: spc,
                    seed,
                    rows,
                    curves,
                });
            }
        }
    }
    runs.sort_by(|a, b| {
        (variant_rank(&a.variant), a.seeds_per_category, a.seed).cmp(&(
            variant_rank(&b.variant),
            b.seeds_per_category,
            b.seed,
        ))
    });
    Ok(runs)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-iteration medians over the seeds of one (variant, seed count) group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub variant: String,
    pub seeds_per_category: usize,
    pub runs: usize,
    /// Indexed by iteration, over the iterations every run reached.
    pub map_50: Vec<f64>,
    pub map_50_95: Vec<f64>,
    pub mined_count: Vec<f64>,
    pub mined_precision: Vec<f64>,
}

pub fn summarize(runs: &[RunMetrics]) -> Vec<GroupSummary> {
    let mut groups: Vec<((String, usize), Vec<&RunMetrics>)> = Vec::new();
    for r in runs {
        let key = (r.variant.clone(), r.seeds_per_category);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((variant, spc), members)| {
            let depth = members.iter().map(|r| r.rows.len()).min().unwrap_or(0);
            let column = |f: &dyn Fn(&MetricsRow) -> f64| -> Vec<f64> {
                (0..depth)
                    .map(|t| median(&members.iter().map(|r| f(&r.rows[t])).collect::<Vec<_>>()))
                    .collect()
            };
            GroupSummary {
                variant,
                seeds_per_category: spc,
                runs: members.len(),
                map_50: column(&|r| r.map_50),
                map_50_95: column(&|r| r.map_50_95),
                mined_count: column(&|r| r.mined_count as f64),
                mined_precision: column(&|r| r.mined_precision),
            }
        })
        .collect()
}

fn indexed(values: &[f64]) -> Vec<(f64, f64)> {
    values.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect()
}

/// Table of mined boxes and precision per iteration, one column pair per
/// variant, at one seed count. Iteration 0 mines nothing and is omitted.
pub fn mined_table(groups: &[GroupSummary], seeds_per_category: usize) -> (String, String) {
    let arms: Vec<&GroupSummary> = groups
        .iter()
        .filter(|g| g.seeds_per_category == seeds_per_category)
        .collect();
    let depth = arms.iter().map(|g| g.mined_count.len()).max().unwrap_or(0);
    let mut text = String::new();
    let mut csv = String::from("iter");
    let _ = write!(text, "{:<6}", "iter");
    for g in &arms {
        let _ = write!(text, "  {:>28}", g.variant);
        let _ = write!(csv, ",{0} # boxes,{0} prec(%)", g.variant);
    }
    text.push('\n');
    csv.push('\n');
    let _ = write!(text, "{:<6}", "");
    for _ in &arms {
        let _ = write!(text, "  {:>18}{:>10}", "# boxes", "prec(%)");
    }
    text.push('\n');
    for t in 1..depth {
        let _ = write!(text, "{t:<6}");
        let _ = write!(csv, "{t}");
        for g in &arms {
            match (g.mined_count.get(t), g.mined_precision.get(t)) {
                (Some(c), Some(p)) => {
                    let _ = write!(text, "  {:>18}{:>10.1}", format_count(*c), 100.0 * p);
                    let _ = write!(csv, ",{},{:.1}", format_count(*c), 100.0 * p);
                }
                _ => {
                    let _ = write!(text, "  {:>18}{:>10}", "-", "-");
                    csv.push_str(",,");
                }
            }
        }
        text.push('\n');
        csv.push('\n');
    }
    (text, csv)
}

fn format_count(c: f64) -> String {
    if c.fract() == 0.0 {
        format!("{c:.0}")
    } else {
        format!("{c:.1}")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

/// Writes every chart and table for the runs below `root`.
pub fn report(root: &Path) -> Result<ReportFiles> {
    let layout = Layout::new(root);
    let runs = collect_runs(root)?;
    if runs.is_empty() {
        return Err(CliError::Invalid(format!("no runs found under {}", root.join("runs").display())));
    }
    let groups = summarize(&runs);
    let dir = layout.report_dir();
    let mut files = Vec::new();
    let mut emit = |name: String, contents: String| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, contents.as_bytes())?;
        files.push(path);
        Ok(())
    };

    let mut counts: Vec<usize> = groups.iter().map(|g| g.seeds_per_category).collect();
    counts.sort_unstable();
    counts.dedup();
    for &n in &counts {
        let mut map50 = LineChart::new(
            &format!("mAP@0.5 per iteration ({n} seed images per category)"),
            "iteration",
            "mAP@0.5",
        );
        let mut map = LineChart::new(
            &format!("mAP@[0.5:0.95] per iteration ({n} seed images per category)"),
            "iteration",
            "mAP@[0.5:0.95]",
        );
        for g in groups.iter().filter(|g| g.seeds_per_category == n) {
            map50.push(&g.variant, indexed(&g.map_50));
            map.push(&g.variant, indexed(&g.map_50_95));
        }
        emit(format!("map50-spc{n}.svg"), map50.render())?;
        emit(format!("map-spc{n}.svg"), map.render())?;
        let (text, csv) = mined_table(&groups, n);
        let suffix = if counts.len() == 1 { String::new() } else { format!("-spc{n}") };
        emit(format!("table1{suffix}.txt"), text)?;
        emit(format!("table1{suffix}.csv"), csv)?;
    }

    for r in &runs {
        let mut chart = LineChart::new(
            &format!("box precision vs mined boxes: {} seed {}", r.variant, r.seed),
            "mined boxes",
            "precision",
        );
        let mut by_iter: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for c in &r.curves {
            by_iter.entry(c.iteration).or_default().push((c.count as f64, c.precision));
        }
        if by_iter.is_empty() {
            continue;
        }
        for (t, points) in by_iter {
            chart.push(&format!("iteration {t}"), points);
        }
        emit(
            format!("curves-{}-spc{}-seed-{}.svg", r.variant, r.seeds_per_category, r.seed),
            chart.render(),
        )?;
    }

    let mut sweep = LineChart::new("mAP@0.5 by seed images per category", "seed images per category", "mAP@0.5");
    let mut variants: Vec<&str> = groups.iter().map(|g| g.variant.as_str()).collect();
    variants.dedup();
    for v in variants {
        let members: Vec<&GroupSummary> = groups.iter().filter(|g| g.variant == v).collect();
        let first: Vec<(f64, f64)> = members
            .iter()
            .filter_map(|g| g.map_50.first().map(|m| (g.seeds_per_category as f64, *m)))
            .collect();
        let last: Vec<(f64, f64)> = members
            .iter()
            .filter_map(|g| g.map_50.last().map(|m| (g.seeds_per_category as f64, *m)))
            .collect();
        sweep.push(&format!("{v} iteration 0"), first);
        sweep.push(&format!("{v} final"), last);
    }
    emit("seed-sweep.svg".to_string(), sweep.render())?;

    let mut summary = String::from("variant,seeds_per_category,runs,iteration,mAP@0.5,mAP@[0.5:0.95],mined_count,mined_precision\n");
    for g in &groups {
        for t in 0..g.map_50.len() {
            let _ = writeln!(
                summary,
                "{},{},{},{t},{:.6},{:.6},{},{:.6}",
                g.variant,
                g.seeds_per_category,
                g.runs,
                g.map_50[t],
                g.map_50_95[t],
                format_count(g.mined_count[t]),
                g.mined_precision[t]
            );
        }
    }
    emit("summary.csv".to_string(), summary)?;
    Ok(ReportFiles { files })
}
