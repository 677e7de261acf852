//! Winrate protocols, majority voting, temperature diagnostics, and
//! report emission.
//!
//! Every winrate uses the same tie rule — half a point each — so
//! w(A, B) + w(B, A) = 1 exactly.

use crate::data::EOS;
use crate::decoding::GenerationRecord;
use crate::error::{Error, Result};
use crate::rewards::canonical_answer;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

fn check_len<T, U>(a: &[T], b: &[U]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "winrate inputs must align: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract("winrate over an empty sample set".into()));
    }
    Ok(())
}

/// Correctness winrate of A over B: the sole correct method takes the
/// point; both or neither correct splits it.
pub fn winrate_correctness(a: &[bool], b: &[bool]) -> Result<f64> {
    check_len(a, b)?;
    let points: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            (true, false) => 1.0,
            (false, true) => 0.0,
            _ => 0.5,
        })
        .sum();
    Ok(points / a.len() as f64)
}

/// Scalar-score winrate: higher score wins, exact ties split.
pub fn winrate_score(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    let points: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x > y {
                1.0
            } else if x < y {
                0.0
            } else {
                0.5
            }
        })
        .sum();
    Ok(points / a.len() as f64)
}

/// Constrained-task winrate over (constraint rate, score) pairs: the
/// constraint rate dominates; the score breaks ties; full ties split.
pub fn winrate_constrained(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    check_len(a, b)?;
    let points: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x > y {
                1.0
            } else if x < y {
                0.0
            } else {
                0.5
            }
        })
        .sum();
    Ok(points / a.len() as f64)
}

/// Most frequent canonical answer; ties break toward the answer seen
/// earliest.
pub fn majority_vote(answers: &[String]) -> Result<String> {
    if answers.is_empty() {
        return Err(Error::Contract("majority vote needs at least one answer".into()));
    }
    let canon: Vec<String> = answers.iter().map(|s| canonical_answer(s)).collect();
    let mut best = 0usize;
    let mut best_count = 0usize;
    for (i, c) in canon.iter().enumerate() {
        let count = canon.iter().filter(|x| *x == c).count();
        if count > best_count {
            best = i;
            best_count = count;
        }
    }
    Ok(answers[best].clone())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TempHistogram {
    pub grid: Vec<f64>,
    pub mass: Vec<f64>,
}

impl TempHistogram {
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.mass.len() {
            return Err(Error::Contract("histogram grid/mass mismatch".into()));
        }
        let total: f64 = self.mass.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("histogram mass sums to {total}")));
        }
        Ok(())
    }

    /// Expected temperature under the histogram.
    pub fn mean(&self) -> f64 {
        self.grid.iter().zip(&self.mass).map(|(t, m)| t * m).sum()
    }
}

/// Positional temperature diagnostics for adaptive records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionalTempStats {
    pub histogram: TempHistogram,
    /// Mean selected temperature at sentence-initial response positions
    /// (position 0 or right after the separator); 0 when no such position.
    pub first_token_mean: f64,
    /// Mean selected temperature everywhere else; 0 when no such position.
    pub rest_mean: f64,
}

/// Histogram of selected temperatures plus sentence-position means. Only
/// per-token records contribute to the positional split; sequence-level
/// records still count in the histogram.
pub fn temp_stats(records: &[GenerationRecord], grid: &[f64], sentence_sep: u32) -> Result<PositionalTempStats> {
    let mut counts = vec![0usize; grid.len()];
    let mut first_sum = 0.0;
    let mut first_n = 0usize;
    let mut rest_sum = 0.0;
    let mut rest_n = 0usize;
    for r in records {
        if r.temp_index.is_empty() {
            return Err(Error::Contract("temp_stats requires adaptive records".into()));
        }
        for &i in &r.temp_index {
            *counts
                .get_mut(i)
                .ok_or_else(|| Error::IndexOutOfRange(format!("temp index {i} >= grid size {}", grid.len())))? += 1;
        }
        if r.temp_index.len() == r.response.len() {
            for (pos, &i) in r.temp_index.iter().enumerate() {
                if r.response[pos] == EOS {
                    continue;
                }
                let initial = pos == 0 || r.response[pos - 1] == sentence_sep;
                if initial {
                    first_sum += grid[i];
                    first_n += 1;
                } else {
                    rest_sum += grid[i];
                    rest_n += 1;
                }
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("no temperature decisions to aggregate".into()));
    }
    let histogram = TempHistogram {
        grid: grid.to_vec(),
        mass: counts.iter().map(|&c| c as f64 / total as f64).collect(),
    };
    histogram.validate()?;
    Ok(PositionalTempStats {
        histogram,
        first_token_mean: if first_n == 0 { 0.0 } else { first_sum / first_n as f64 },
        rest_mean: if rest_n == 0 { 0.0 } else { rest_sum / rest_n as f64 },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub run_seed: u64,
    pub config_hash: String,
    /// e.g. "diverse_vs_fixed_0.6" → winrate of the adaptive policy.
    pub winrates: BTreeMap<String, f64>,
    pub accuracies: BTreeMap<String, f64>,
    pub histograms: BTreeMap<String, TempHistogram>,
    pub positional: BTreeMap<String, PositionalTempStats>,
    pub notes: BTreeMap<String, String>,
}

pub const REPORT_VERSION: u32 = 1;

impl EvalReport {
    pub fn new(run_seed: u64, config_hash: &str) -> Self {
        EvalReport {
            version: REPORT_VERSION,
            run_seed,
            config_hash: config_hash.to_string(),
            winrates: BTreeMap::new(),
            accuracies: BTreeMap::new(),
            histograms: BTreeMap::new(),
            positional: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &w) in self.winrates.iter().chain(self.accuracies.iter()) {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Contract(format!("{k} = {w} outside [0, 1]")));
            }
        }
        for h in self.histograms.values().chain(self.positional.values().map(|p| &p.histogram)) {
            h.validate()?;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        report.validate()?;
        Ok(report)
    }

    /// One CSV row per winrate/accuracy entry.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "metric,value")?;
        for (k, v) in &self.winrates {
            writeln!(f, "winrate/{k},{v}")?;
        }
        for (k, v) in &self.accuracies {
            writeln!(f, "accuracy/{k},{v}")?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn write_histogram_csv(path: &Path, hist: &TempHistogram) -> Result<()> {
    hist.validate()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "temperature,mass")?;
    for (t, m) in hist.grid.iter().zip(&hist.mass) {
        writeln!(f, "{t},{m}")?;
    }
    f.flush()?;
    Ok(())
}

/// Minimal standalone SVG bar chart for a temperature histogram.
pub fn render_histogram_svg(hist: &TempHistogram, title: &str) -> Result<String> {
    hist.validate()?;
    let (w, h, pad) = (420.0, 260.0, 40.0);
    let k = hist.grid.len() as f64;
    let bar_w = (w - 2.0 * pad) / k;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        w / 2.0,
        title,
        h - pad,
        w - pad,
        h - pad
    );
    for (i, (&t, &m)) in hist.grid.iter().zip(&hist.mass).enumerate() {
        let bh = m * (h - 2.0 * pad);
        let x = pad + i as f64 * bar_w;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"steelblue\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{t}</text>\n",
            x + bar_w * 0.1,
            h - pad - bh,
            bar_w * 0.8,
            bh,
            x + bar_w / 2.0,
            h - pad + 14.0,
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
