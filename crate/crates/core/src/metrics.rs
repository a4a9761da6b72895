//! Ranking, rating and text-overlap metrics, and the per-template report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskFamily;
use crate::entity_pool::EntityId;
use crate::error::{Error, Result};

/// One leave-one-out ranking: exactly one relevant id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingCase<I = EntityId> {
    pub ranked: Vec<I>,
    pub truth: I,
}

impl<I: PartialEq> RankingCase<I> {
    /// 1-based rank of the truth, if present.
    pub fn rank(&self) -> Option<usize> {
        self.ranked.iter().position(|x| *x == self.truth).map(|p| p + 1)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

pub fn hr_at_k<I: PartialEq>(cases: &[RankingCase<I>], k: usize) -> Result<f64> {
    check_k(k)?;
    if cases.is_empty() {
        return Err(Error::EmptyCases);
    }
    let hits = cases.iter().filter(|c| c.rank().is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` for ranks within `k`, else 0.
pub fn ndcg_at_k<I: PartialEq>(cases: &[RankingCase<I>], k: usize) -> Result<f64> {
    check_k(k)?;
    if cases.is_empty() {
        return Err(Error::EmptyCases);
    }
    let sum: f64 = cases
        .iter()
        .filter_map(|c| c.rank().filter(|&r| r <= k))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .fold(0.0, |a, b| a + b);
    Ok(sum / cases.len() as f64)
}

fn check_pairs(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyCases);
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

fn ngram_counts<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed corpus-free BLEU-n in percent: geometric mean of clipped
/// n-gram precisions 1..=n times the brevity penalty against the closest
/// reference length. An empty candidate scores 0.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = ngram_counts(candidate, order);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, order) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len();
    // closest reference length, shorter on ties
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (log_sum / n as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rouge {
    One,
    Two,
    L,
}

impl Rouge {
    pub fn name(self) -> &'static str {
        match self {
            Rouge::One => "ROUGE-1",
            Rouge::Two => "ROUGE-2",
            Rouge::L => "ROUGE-L",
        }
    }
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len<S: AsRef<str>, R: AsRef<str>>(a: &[S], b: &[R]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE F1 in percent.
pub fn rouge<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], reference: &[R], variant: Rouge) -> f64 {
    let n = match variant {
        Rouge::One => 1,
        Rouge::Two => 2,
        Rouge::L => return 100.0 * f1(lcs_len(candidate, reference), candidate.len(), reference.len()),
    };
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    100.0 * f1(overlap, c.values().sum(), r.values().sum())
}

/// Substituted for unparseable rating generations.
pub const RATING_FALLBACK: f64 = 3.0;

/// First token that reads as a number in 1..=5.
pub fn parse_rating(text: &str) -> Option<f64> {
    text.split_whitespace()
        .filter_map(|t| t.parse::<f64>().ok())
        .find(|v| (1.0..=5.0).contains(v))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Generated rating text.
    Rating(String),
    Ranking(Vec<EntityId>),
    Text(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Rating(f64),
    Item(EntityId),
    Text(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseMeta {
    pub doc_id: String,
    pub family: TaskFamily,
    pub template_id: String,
    /// Whether the template was used in training.
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub family: TaskFamily,
    pub template_id: String,
    pub seen: bool,
    pub metrics: BTreeMap<String, f64>,
    pub n: usize,
}

pub const HR_KS: [usize; 3] = [1, 5, 10];
pub const NDCG_KS: [usize; 2] = [5, 10];

/// Groups cases by (family, template, seen) and computes the family's metrics.
pub fn evaluate(
    cases: &[CaseMeta],
    outputs: &HashMap<String, Prediction>,
    truth: &HashMap<String, Truth>,
) -> Result<Vec<MetricReport>> {
    let mut missing: Vec<String> = cases
        .iter()
        .filter(|c| !outputs.contains_key(&c.doc_id) || !truth.contains_key(&c.doc_id))
        .map(|c| c.doc_id.clone())
        .collect();
    let known: std::collections::HashSet<&str> = cases.iter().map(|c| c.doc_id.as_str()).collect();
    let mut extra: Vec<String> = outputs.keys().filter(|k| !known.contains(k.as_str())).cloned().collect();
    extra.sort();
    missing.extend(extra);
    if !missing.is_empty() {
        missing.truncate(10);
        return Err(Error::Misaligned(missing));
    }

    let mut groups: BTreeMap<(TaskFamily, String, bool), Vec<&CaseMeta>> = BTreeMap::new();
    for c in cases {
        groups.entry((c.family, c.template_id.clone(), c.seen)).or_default().push(c);
    }
    let mut reports = Vec::with_capacity(groups.len());
    for ((family, template_id, seen), members) in groups {
        let mut metrics = BTreeMap::new();
        let pairs: Vec<(&Prediction, &Truth)> = members.iter().map(|c| (&outputs[&c.doc_id], &truth[&c.doc_id])).collect();
        let kind = |m: &str| Error::Shape(format!("{family} case with mismatched {m}"));
        match family {
            TaskFamily::Rating => {
                let (mut pred, mut gold, mut failures) = (Vec::new(), Vec::new(), 0usize);
                for (p, t) in pairs {
                    let (Prediction::Rating(text), Truth::Rating(v)) = (p, t) else { return Err(kind("rating")) };
                    pred.push(parse_rating(text).unwrap_or_else(|| {
                        failures += 1;
                        RATING_FALLBACK
                    }));
                    gold.push(*v);
                }
                metrics.insert("RMSE".into(), rmse(&pred, &gold)?);
                metrics.insert("MAE".into(), mae(&pred, &gold)?);
                metrics.insert("parse_failures".into(), failures as f64);
            }
            TaskFamily::Sequential | TaskFamily::Direct => {
                let mut rc = Vec::new();
                for (p, t) in pairs {
                    let (Prediction::Ranking(r), Truth::Item(id)) = (p, t) else { return Err(kind("ranking")) };
                    rc.push(RankingCase { ranked: r.clone(), truth: *id });
                }
                for k in HR_KS {
                    metrics.insert(format!("HR@{k}"), hr_at_k(&rc, k)?);
                }
                for k in NDCG_KS {
                    metrics.insert(format!("NDCG@{k}"), ndcg_at_k(&rc, k)?);
                }
            }
            TaskFamily::Explanation | TaskFamily::Review => {
                let mut sums: BTreeMap<String, f64> = BTreeMap::new();
                let mut empty = 0usize;
                let count = pairs.len() as f64;
                for (p, t) in pairs {
                    let (Prediction::Text(c), Truth::Text(r)) = (p, t) else { return Err(kind("text")) };
                    if c.is_empty() {
                        empty += 1;
                    }
                    let refs = std::slice::from_ref(r);
                    *sums.entry("BLEU-2".into()).or_default() += bleu(c, refs, 2);
                    *sums.entry("BLEU-4".into()).or_default() += bleu(c, refs, 4);
                    for v in [Rouge::One, Rouge::Two, Rouge::L] {
                        *sums.entry(v.name().into()).or_default() += rouge(c, r, v);
                    }
                }
                metrics.extend(sums.into_iter().map(|(k, v)| (k, v / count)));
                metrics.insert("empty_outputs".into(), empty as f64);
            }
        }
        reports.push(MetricReport {
            family,
            template_id,
            seen,
            metrics,
            n: members.len(),
        });
    }
    Ok(reports)
}

#[derive(Serialize)]
struct ReportLine<'a> {
    family: TaskFamily,
    template_id: &'a str,
    split: &'a str,
    metric: &'a str,
    value: f64,
    n: usize,
}

fn split_name(seen: bool) -> &'static str {
    if seen {
        "seen"
    } else {
        "unseen"
    }
}

/// One JSON line per (family, template, seen|unseen, metric).
pub fn write_report<W: Write>(mut w: W, reports: &[MetricReport]) -> Result<()> {
    for r in reports {
        for (metric, &value) in &r.metrics {
            let line = ReportLine {
                family: r.family,
                template_id: &r.template_id,
                split: split_name(r.seen),
                metric,
                value,
                n: r.n,
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
    }
    Ok(())
}

/// Plain-text table for terminals.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{:<12} {:<14} {:<7} {:>6}  metrics\n", "family", "template", "split", "n");
    for r in reports {
        let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        let _ = writeln!(
            out,
            "{:<12} {:<14} {:<7} {:>6}  {}",
            r.family.as_str(),
            r.template_id,
            split_name(r.seen),
            r.n,
            metrics.join(" ")
        );
    }
    out
}
