//! Ranking metrics and seed-aggregated reports.

use std::fmt::{self, Display};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Metric(format!("label {y} is outside {{0, 1}}")));
    }
    Ok(())
}

/// Indices of `scores` in ascending order, split into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (the Mann–Whitney statistic).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    // Twice the Mann–Whitney U, kept integral so equal inputs give equal bits.
    let (mut twice_u, mut neg_below) = (0u128, 0u128);
    for group in tie_groups(scores) {
        let p = group.iter().filter(|&&i| labels[i] == 1).count() as u128;
        let n = group.len() as u128 - p;
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over descending score
/// thresholds, tied scores forming a single threshold.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let total_pos = labels.iter().filter(|&&y| y == 1).count();
    if total_pos == 0 {
        return Err(Error::Metric("AUPRC needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for group in tie_groups(scores).into_iter().rev() {
        let p = group.iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        seen += group.len();
        if p > 0 {
            ap += (p as f64 / total_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed AUROC/AUPRC with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: String,
    pub seeds: Vec<u64>,
    pub auroc: Vec<f64>,
    pub auprc: Vec<f64>,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            seeds: Vec::new(),
            auroc: Vec::new(),
            auprc: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, auroc: f64, auprc: f64) {
        self.seeds.push(seed);
        self.auroc.push(auroc);
        self.auprc.push(auprc);
    }

    /// Evaluates one run and appends it.
    pub fn record(&mut self, seed: u64, scores: &[f64], labels: &[u8]) -> Result<()> {
        let roc = auroc(scores, labels)?;
        let pr = auprc(scores, labels)?;
        self.push(seed, roc, pr);
        Ok(())
    }

    pub fn auroc_summary(&self) -> Result<(f64, f64)> {
        self.summary(&self.auroc)
    }

    pub fn auprc_summary(&self) -> Result<(f64, f64)> {
        self.summary(&self.auprc)
    }

    fn summary(&self, values: &[f64]) -> Result<(f64, f64)> {
        if values.is_empty() {
            return Err(Error::Metric(format!("report `{}` has no runs", self.task)));
        }
        Ok(mean_std(values))
    }

    /// `mean(std)` with four and three decimals, e.g. `0.7712(0.011)`.
    pub fn cell(mean: f64, std: f64) -> String {
        format!("{mean:.4}({std:.3})")
    }

    /// One row per seed, then a `mean(std)` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("task,seed,auroc,auprc\n");
        for k in 0..self.seeds.len() {
            s.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                self.task, self.seeds[k], self.auroc[k], self.auprc[k]
            ));
        }
        let (rm, rs) = self.auroc_summary()?;
        let (pm, ps) = self.auprc_summary()?;
        s.push_str(&format!(
            "{},mean(std),{},{}\n",
            self.task,
            Self::cell(rm, rs),
            Self::cell(pm, ps)
        ));
        Ok(s)
    }
}

impl Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Ok((rm, rs)), Ok((pm, ps))) = (self.auroc_summary(), self.auprc_summary()) else {
            return write!(f, "{}: no runs", self.task);
        };
        let w = self.task.len().max(4);
        writeln!(f, "{:<w$}  {:<14}  {:<14}", "task", "AUROC", "AUPRC")?;
        writeln!(
            f,
            "{:<w$}  {:<14}  {:<14}",
            self.task,
            Self::cell(rm, rs),
            Self::cell(pm, ps)
        )
    }
}
