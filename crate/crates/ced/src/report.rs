//! Human-readable rendering of an evaluation report.

use std::fmt::Write;

use ced_core::eval::{DatasetMeans, EvalReport, PolicyRow};
use ced_core::gradcheck::GradcheckReport;

use crate::store::Header;

const NAME_WIDTH: usize = 26;
const MIN_COL_WIDTH: usize = 10;

struct Table<'a> {
    out: &'a mut String,
    width: usize,
}

impl Table<'_> {
    fn header(&mut self, first: &str, cols: &[String]) {
        let w = self.width;
        let _ = write!(self.out, "{first:<NAME_WIDTH$}");
        for c in cols {
            let _ = write!(self.out, "{c:>w$}");
        }
        self.out.push('\n');
    }

    fn row(&mut self, name: &str, values: impl IntoIterator<Item = Option<f64>>, precision: usize) {
        let w = self.width;
        let _ = write!(self.out, "{name:<NAME_WIDTH$}");
        for v in values {
            let _ = match v {
                Some(v) => write!(self.out, "{v:>w$.precision$}"),
                None => write!(self.out, "{:>w$}", "-"),
            };
        }
        self.out.push('\n');
    }
}

fn means(m: &DatasetMeans, datasets: &[String]) -> Vec<Option<f64>> {
    datasets
        .iter()
        .map(|d| m.per_dataset.get(d).copied())
        .chain(std::iter::once(Some(m.macro_avg)))
        .collect()
}

fn section(out: &mut String, title: &str) {
    let _ = writeln!(out, "\n{title}\n{}", "-".repeat(title.len()));
}

/// Table layout: metric per dataset, average rank, domain composition, and
/// the gradient-alignment check when available.
pub fn render_text(header: &Header, report: &EvalReport, grad: Option<&GradcheckReport>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "CED demonstration selection report\nconfig_hash {}  seeds sample={} cluster={} policy={} bootstrap={} gradcheck={}",
        header.config_hash,
        header.seeds.sample,
        header.seeds.cluster,
        header.seeds.policy,
        header.seeds.bootstrap,
        header.seeds.gradcheck
    );
    let _ = writeln!(
        out,
        "{} candidates, {} tests, {} datasets, bootstrap over {} resamples",
        report.candidates,
        report.tests,
        report.datasets.len(),
        report.bootstrap_resamples
    );

    let mut cols: Vec<String> = report.datasets.clone();
    cols.push("macro".into());
    let mut metric_cols = cols.clone();
    metric_cols.extend(["micro".to_string(), "boot_std".to_string()]);

    let width = cols.iter().map(|c| c.chars().count() + 2).max().unwrap_or(0).max(MIN_COL_WIDTH);

    section(&mut out, "Task metric");
    let mut t = Table { out: &mut out, width };
    t.header("policy", &metric_cols);
    for row in &report.rows {
        let mut vals = means(&row.metric, &report.datasets);
        vals.extend([Some(row.micro_avg), Some(row.bootstrap_std)]);
        t.row(&row.policy, vals, 3);
    }

    let ranked: Vec<&PolicyRow> = report.rows.iter().filter(|r| r.avg_rank.is_some()).collect();
    if !ranked.is_empty() {
        section(&mut out, "Average rank of the selected demonstration (0 = best)");
        let mut t = Table { out: &mut out, width };
        t.header("policy", &cols);
        for row in &ranked {
            let m = row.avg_rank.as_ref().expect("filtered");
            t.row(&row.policy, means(m, &report.datasets), 2);
        }
    }

    let domains: Vec<&PolicyRow> = report.rows.iter().filter(|r| r.domain.is_some()).collect();
    if !domains.is_empty() {
        section(&mut out, "Selected demonstrations in-domain / in-task");
        let mut t = Table { out: &mut out, width };
        t.header("policy", &cols);
        for row in &domains {
            let d = row.domain.as_ref().expect("filtered");
            t.row(&format!("{} in-domain", row.policy), means(&d.in_domain, &report.datasets), 2);
            t.row(&format!("{} in-task", row.policy), means(&d.in_task, &report.datasets), 2);
        }
    }

    if let Some(g) = grad {
        section(&mut out, "Gradient alignment");
        let _ = writeln!(out, "finite-difference max relative error {:.3e}  pass {}", g.fd_max_relative_error, g.fd_pass);
        for s in &g.sweep {
            let _ = writeln!(
                out,
                "eta {:.0e}  n {}  spearman {:.4}  pearson {:.4}  sign agreement {:.3}  first-order error {:.3e}",
                s.eta, s.n, s.spearman, s.pearson, s.sign_agreement, s.first_order_error
            );
        }
        let _ = writeln!(
            out,
            "at eta {:.0e}: spearman pass {}  sign agreement pass {}  error shrinks with eta {}  overall {}",
            g.alignment.eta, g.spearman_pass, g.sign_agreement_pass, g.sweep_decreasing, g.pass
        );
    }
    out
}
