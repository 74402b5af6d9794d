//! Comparison tables and bar plots over saved evaluation reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::{csv_field, EvalReport};

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub mode: String,
    pub tags: Vec<String>,
    pub n: usize,
    /// `(mean, std)` per region, in table column order.
    pub scores: Vec<(f64, f64)>,
    pub vs_direct: Option<Vec<f64>>,
    pub vs_oracle: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub dataset_id: String,
    pub regions: Vec<String>,
    pub rows: Vec<Row>,
}

fn mode_rank(mode: &str) -> (usize, &str) {
    let rank = match mode {
        "direct" => 0,
        "stage1" => 1,
        "stage2" => 2,
        "stage1->stage2" => 3,
        "stage2->stage1" => 4,
        "oracle" => 6,
        _ => 5,
    };
    (rank, mode)
}

/// Builds the table. All reports must score the same dataset.
pub fn compare(reports: &[EvalReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| Error::Config("no reports to compare".into()))?;
    let ids: BTreeSet<&str> = reports.iter().map(|r| r.meta.dataset_id.as_str()).collect();
    if ids.len() > 1 {
        return Err(Error::Incompatible(format!(
            "reports cover different datasets: {}",
            ids.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let regions: Vec<String> = first.aggregate.keys().cloned().collect();
    for r in reports {
        let have: Vec<&String> = r.aggregate.keys().collect();
        if have != regions.iter().collect::<Vec<_>>() {
            return Err(Error::Incompatible(format!("report '{}' has regions {have:?}, expected {regions:?}", r.meta.mode)));
        }
    }
    let means = |r: &EvalReport| -> Vec<f64> { regions.iter().map(|g| r.aggregate[g].mean).collect() };
    let reference = |mode: &str| reports.iter().find(|r| r.meta.mode == mode).map(means);
    let direct = reference("direct");
    let oracle = reference("oracle");
    let delta = |m: &[f64], base: &Option<Vec<f64>>| base.as_ref().map(|b| m.iter().zip(b).map(|(a, b)| a - b).collect());

    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| mode_rank(&a.meta.mode).cmp(&mode_rank(&b.meta.mode)));
    let rows = sorted
        .into_iter()
        .map(|r| {
            let m = means(r);
            Row {
                mode: r.meta.mode.clone(),
                tags: r.meta.tags.clone(),
                n: r.aggregate.values().next().map_or(0, |s| s.n),
                scores: regions.iter().map(|g| (r.aggregate[g].mean, r.aggregate[g].std)).collect(),
                vs_direct: delta(&m, &direct),
                vs_oracle: delta(&m, &oracle),
            }
        })
        .collect();
    Ok(ComparisonTable { dataset_id: first.meta.dataset_id.clone(), regions, rows })
}

fn signed(v: f64) -> String {
    format!("{:+.4}", v)
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("Dice on `{}`\n\n| mode |", self.dataset_id);
        for g in &self.regions {
            write!(s, " {g} |").unwrap();
        }
        let has_direct = self.rows.iter().any(|r| r.vs_direct.is_some());
        let has_oracle = self.rows.iter().any(|r| r.vs_oracle.is_some());
        if has_direct {
            s.push_str(" vs direct |");
        }
        if has_oracle {
            s.push_str(" vs oracle |");
        }
        s.push_str(" n | tags |\n|---|");
        let extra = self.regions.len() + usize::from(has_direct) + usize::from(has_oracle) + 2;
        s.push_str(&"---|".repeat(extra));
        s.push('\n');
        for r in &self.rows {
            write!(s, "| {} |", r.mode).unwrap();
            for (m, sd) in &r.scores {
                write!(s, " {m:.4} ± {sd:.4} |").unwrap();
            }
            for (flag, d) in [(has_direct, &r.vs_direct), (has_oracle, &r.vs_oracle)] {
                if flag {
                    let cell = d.as_ref().map_or_else(String::new, |d| d.iter().map(|&v| signed(v)).collect::<Vec<_>>().join(" / "));
                    write!(s, " {cell} |").unwrap();
                }
            }
            writeln!(s, " {} | {} |", r.n, r.tags.join("; ")).unwrap();
        }
        s
    }

    /// Long format: one line per mode and region.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,region,mean,std,n,delta_direct,delta_oracle,tags\n");
        for r in &self.rows {
            for (j, g) in self.regions.iter().enumerate() {
                let d = |v: &Option<Vec<f64>>| v.as_ref().map_or_else(String::new, |v| format!("{:.6}", v[j]));
                writeln!(
                    s,
                    "{},{},{:.6},{:.6},{},{},{},{}",
                    csv_field(&r.mode),
                    csv_field(g),
                    r.scores[j].0,
                    r.scores[j].1,
                    r.n,
                    d(&r.vs_direct),
                    d(&r.vs_oracle),
                    csv_field(&r.tags.join("; "))
                )
                .unwrap();
            }
        }
        s
    }

    /// Bar chart of one region: a bar per row with a whisker of one
    /// standard deviation and light grid lines every 0.1 Dice.
    pub fn bar_plot(&self, region: usize) -> RgbImage {
        let (bar, gap, height, margin) = (40u32, 16u32, 300u32, 20u32);
        let n = self.rows.len() as u32;
        let width = 2 * margin + n * bar + n.saturating_sub(1) * gap;
        let mut img = RgbImage::from_pixel(width.max(1), height + 2 * margin, Rgb([255, 255, 255]));
        let y_of = |v: f64| margin + height - (v.clamp(0.0, 1.0) * f64::from(height)).round() as u32;
        for t in 0..=10 {
            let y = y_of(f64::from(t) / 10.0).min(margin + height - 1);
            for x in margin..width - margin {
                img.put_pixel(x, y, Rgb([225, 225, 225]));
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            let x0 = margin + i as u32 * (bar + gap);
            let (mean, sd) = r.scores[region];
            let color = match r.mode.as_str() {
                "direct" => Rgb([150, 150, 150]),
                "oracle" => Rgb([60, 60, 60]),
                _ => Rgb([70, 110, 180]),
            };
            for x in x0..x0 + bar {
                for y in y_of(mean)..margin + height {
                    img.put_pixel(x, y, color);
                }
            }
            let cx = x0 + bar / 2;
            for y in y_of(mean + sd)..=y_of(mean - sd).min(margin + height - 1) {
                img.put_pixel(cx, y, Rgb([0, 0, 0]));
            }
        }
        img
    }

    /// Writes `report.md`, `report.csv` and one `report_<region>.png` each.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.md", self.to_markdown()), ("report.csv", self.to_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        for (j, g) in self.regions.iter().enumerate() {
            let p = dir.join(format!("report_{g}.png"));
            self.bar_plot(j).save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
        }
        Ok(())
    }
}

/// Loads every `.json` report in `dir`.
pub fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| EvalReport::load(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::score_labels;
    use crate::tensor::{BinaryMask, Label};

    fn report(mode: &str, dataset: &str, pred: &[u8]) -> EvalReport {
        let gt = Label::Binary(BinaryMask::new(vec![4], vec![1u8, 1, 0, 0]).unwrap());
        let p = Label::Binary(BinaryMask::new(vec![4], pred.to_vec()).unwrap());
        let mut r = score_labels([("a".to_string(), &p, &gt)], false).unwrap();
        r.meta.mode = mode.into();
        r.meta.dataset_id = dataset.into();
        r
    }

    #[test]
    fn rows_are_ordered_and_deltas_use_references() {
        let reports = vec![
            report("oracle", "t", &[1, 1, 0, 0]),
            report("stage1->stage2", "t", &[1, 1, 1, 0]),
            report("direct", "t", &[1, 0, 0, 0]),
        ];
        let t = compare(&reports).unwrap();
        let modes: Vec<&str> = t.rows.iter().map(|r| r.mode.as_str()).collect();
        assert_eq!(modes, ["direct", "stage1->stage2", "oracle"]);
        let d = t.rows[1].vs_direct.as_ref().unwrap()[0];
        assert!((d - (0.8 - 2.0 / 3.0)).abs() < 1e-12);
        let o = t.rows[1].vs_oracle.as_ref().unwrap()[0];
        assert!((o + 0.2).abs() < 1e-12);
        assert!(t.to_markdown().contains("| stage1->stage2 |"));
        assert_eq!(t.to_csv().lines().count(), 4);
    }

    #[test]
    fn mixed_datasets_are_rejected() {
        let reports = vec![report("direct", "a", &[1, 0, 0, 0]), report("stage1", "b", &[1, 0, 0, 0])];
        assert!(matches!(compare(&reports), Err(Error::Incompatible(_))));
    }

    #[test]
    fn plot_has_one_bar_per_row() {
        let t = compare(&[report("direct", "t", &[1, 0, 0, 0]), report("oracle", "t", &[1, 1, 0, 0])]).unwrap();
        let img = t.bar_plot(0);
        assert_eq!(img.width(), 2 * 20 + 2 * 40 + 16);
        // Bottom row inside each bar is coloured.
        let y = img.height() - 21;
        assert_ne!(img.get_pixel(20, y), &Rgb([255, 255, 255]));
        assert_ne!(img.get_pixel(20 + 56, y), &Rgb([255, 255, 255]));
    }
}
