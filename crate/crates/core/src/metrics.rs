// SPDX-License-Identifier: MIT OR Apache-2.0

//! Group-robustness and fairness metrics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locate::GroupedSample;
use crate::store::{SampleMeta, Split};
use crate::tensor::check_len;

/// Accuracy of one `(class, spurious)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    /// Class index.
    pub class_index: usize,
    /// Spurious index.
    pub spurious_index: usize,
    /// Samples in the cell.
    pub size: usize,
    /// Correct predictions in the cell.
    pub correct: usize,
    /// `correct / size`.
    pub accuracy: f64,
}

/// Worst-group, average and gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Non-empty cells in `(class, spurious)` order.
    pub per_group: Vec<CellAccuracy>,
    /// Cells with no samples, as `(class, spurious)`.
    pub absent: Vec<(usize, usize)>,
    /// Minimum cell accuracy; `None` when no cell is reported.
    pub worst_group: Option<f64>,
    /// Overall accuracy.
    pub average: f64,
    /// `average − worst_group`.
    pub gap: Option<f64>,
}

fn accuracy(correct: usize, size: usize) -> f64 {
    if size == 0 {
        0.0
    } else {
        correct as f64 / size as f64
    }
}

/// Accuracy per `(class, spurious)` cell over `n_classes × n_spurious` cells.
pub fn group_metrics(
    samples: &[SampleMeta],
    predicted: &[usize],
    n_classes: usize,
    n_spurious: usize,
) -> Result<GroupMetrics> {
    check_len("predictions", predicted.len(), samples.len())?;
    if samples.is_empty() {
        return Err(Error::Empty("samples for group metrics".into()));
    }
    let mut cells = vec![(0usize, 0usize); n_classes * n_spurious];
    let mut total_correct = 0;
    for (s, &p) in samples.iter().zip(predicted) {
        if s.class_index >= n_classes || s.spurious_index >= n_spurious {
            return Err(Error::InvalidInput(format!(
                "sample {} outside the cell grid",
                s.sample_id
            )));
        }
        let c = &mut cells[s.class_index * n_spurious + s.spurious_index];
        c.0 += 1;
        if p == s.class_index {
            c.1 += 1;
            total_correct += 1;
        }
    }
    let mut per_group = Vec::new();
    let mut absent = Vec::new();
    for (i, &(size, correct)) in cells.iter().enumerate() {
        let key = (i / n_spurious, i % n_spurious);
        if size == 0 {
            absent.push(key);
        } else {
            per_group.push(CellAccuracy {
                class_index: key.0,
                spurious_index: key.1,
                size,
                correct,
                accuracy: accuracy(correct, size),
            });
        }
    }
    if !absent.is_empty() {
        log::warn!(
            "{} empty group cells excluded from the worst group",
            absent.len()
        );
    }
    let average = accuracy(total_correct, samples.len());
    let worst_group = per_group.iter().map(|c| c.accuracy).min_by(f64::total_cmp);
    Ok(GroupMetrics {
        per_group,
        absent,
        worst_group,
        average,
        gap: worst_group.map(|w| average - w),
    })
}

/// Easy/hard split metrics: average on the hard split, gap between splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Accuracy on the easy split.
    pub easy_accuracy: f64,
    /// Accuracy on the hard split (reported as the average).
    pub average: f64,
    /// `easy_accuracy − average`.
    pub gap: f64,
    /// Easy samples.
    pub n_easy: usize,
    /// Hard samples.
    pub n_hard: usize,
}

/// Metrics for benchmarks with an easy and a hard split.
pub fn split_metrics(samples: &[SampleMeta], predicted: &[usize]) -> Result<SplitMetrics> {
    check_len("predictions", predicted.len(), samples.len())?;
    let count = |split: Split| {
        let (mut n, mut c) = (0, 0);
        for (s, &p) in samples.iter().zip(predicted) {
            if s.split == split {
                n += 1;
                c += usize::from(p == s.class_index);
            }
        }
        (n, c)
    };
    let (ne, ce) = count(Split::Easy);
    let (nh, ch) = count(Split::Hard);
    if ne == 0 || nh == 0 {
        return Err(Error::Empty(
            "two-split mode needs easy and hard samples".into(),
        ));
    }
    let (easy, hard) = (accuracy(ce, ne), accuracy(ch, nh));
    Ok(SplitMetrics {
        easy_accuracy: easy,
        average: hard,
        gap: easy - hard,
        n_easy: ne,
        n_hard: nh,
    })
}

/// Accuracy gap between two groups per occupation, on a 0 to 100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// Evaluated occupations (class index → bias).
    pub per_occupation_bias: BTreeMap<usize, f64>,
    /// Mean over evaluated occupations.
    pub overall_bias: f64,
    /// The `k` most biased occupations, most biased first.
    pub top_k_occupations: Vec<usize>,
    /// Mean over `top_k_occupations`.
    pub top_k_bias: f64,
    /// Occupations skipped because a group had no samples.
    pub excluded: Vec<usize>,
}

/// `100 · |Acc(o | g = 0) − Acc(o | g = 1)|` per occupation. The occupation is
/// the class and the group the spurious index.
pub fn bias_metric(
    samples: &[SampleMeta],
    predicted: &[usize],
    n_occupations: usize,
    top_k: usize,
) -> Result<BiasReport> {
    check_len("predictions", predicted.len(), samples.len())?;
    // [occupation][group] = (size, correct)
    let mut cells = vec![[(0usize, 0usize); 2]; n_occupations];
    for (s, &p) in samples.iter().zip(predicted) {
        if s.class_index >= n_occupations || s.spurious_index > 1 {
            return Err(Error::InvalidInput(format!(
                "sample {} must have an occupation below {n_occupations} and group 0 or 1",
                s.sample_id
            )));
        }
        let c = &mut cells[s.class_index][s.spurious_index];
        c.0 += 1;
        c.1 += usize::from(p == s.class_index);
    }
    let mut per_occupation_bias = BTreeMap::new();
    let mut excluded = Vec::new();
    for (o, [g0, g1]) in cells.iter().enumerate() {
        if g0.0 == 0 || g1.0 == 0 {
            excluded.push(o);
            continue;
        }
        per_occupation_bias.insert(
            o,
            100.0 * (accuracy(g0.1, g0.0) - accuracy(g1.1, g1.0)).abs(),
        );
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} occupations lack one group and were excluded",
            excluded.len()
        );
    }
    if per_occupation_bias.is_empty() {
        return Err(Error::Empty("no occupation has both groups".into()));
    }
    let overall_bias = per_occupation_bias.values().sum::<f64>() / per_occupation_bias.len() as f64;
    let mut ranked: Vec<(usize, f64)> = per_occupation_bias.iter().map(|(&o, &b)| (o, b)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(top_k);
    let top_k_bias = if ranked.is_empty() {
        0.0
    } else {
        ranked.iter().map(|r| r.1).sum::<f64>() / ranked.len() as f64
    };
    Ok(BiasReport {
        per_occupation_bias,
        overall_bias,
        top_k_occupations: ranked.into_iter().map(|r| r.0).collect(),
        top_k_bias,
        excluded,
    })
}

/// Retrieval skew per query, on a `100 · ln` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    /// One value per query, in input order.
    pub per_query_skew: Vec<f64>,
    /// Mean over queries.
    pub mean_skew: f64,
    /// Cut-off.
    pub k: usize,
}

/// `100 · max_g ln(r_g · n_groups)` where `r_g` is group `g`'s share of the
/// top `k`; groups absent from the top `k` are ignored.
pub fn max_skew(
    ranked_ids: &[Vec<String>],
    group_of: &HashMap<String, usize>,
    k: usize,
    n_groups: usize,
) -> Result<SkewReport> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    if n_groups == 0 {
        return Err(Error::InvalidInput("need at least one group".into()));
    }
    let per_query_skew = ranked_ids
        .iter()
        .enumerate()
        .map(|(q, ids)| {
            if ids.len() < k {
                return Err(Error::InvalidInput(format!(
                    "query {q} ranks {} items, fewer than k = {k}",
                    ids.len()
                )));
            }
            let mut counts = vec![0usize; n_groups];
            for id in &ids[..k] {
                let g = *group_of
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown id {id:?}")))?;
                if g >= n_groups {
                    return Err(Error::InvalidInput(format!(
                        "id {id:?} has group {g} ≥ {n_groups}"
                    )));
                }
                counts[g] += 1;
            }
            let top = *counts.iter().max().expect("n_groups ≥ 1");
            Ok(100.0 * (top as f64 / k as f64 * n_groups as f64).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_skew = if per_query_skew.is_empty() {
        0.0
    } else {
        per_query_skew.iter().sum::<f64>() / per_query_skew.len() as f64
    };
    Ok(SkewReport {
        per_query_skew,
        mean_skew,
        k,
    })
}

/// Margin histograms for positively and negatively associated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginHistograms {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    /// Counts over positively associated samples.
    pub positive: Vec<usize>,
    /// Counts over negatively associated samples.
    pub negative: Vec<usize>,
}

/// Bin of a margin in `[0, 1]`; 1.0 falls in the last bin.
pub fn margin_bin(margin: f64, bins: usize) -> usize {
    ((margin.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

/// Histogram margins separately for the two association signs. Samples with
/// an unknown subgroup are skipped.
pub fn margin_histogram(
    margins: &[f64],
    samples: &[GroupedSample],
    bins: usize,
) -> Result<MarginHistograms> {
    check_len("margins", margins.len(), samples.len())?;
    if bins == 0 {
        return Err(Error::InvalidInput("bins must be positive".into()));
    }
    let mut positive = vec![0; bins];
    let mut negative = vec![0; bins];
    for (&m, s) in margins.iter().zip(samples) {
        if !m.is_finite() {
            return Err(Error::Numeric(format!(
                "margin of {} is not finite",
                s.sample_id
            )));
        }
        match s.subgroup.is_positive() {
            Some(true) => positive[margin_bin(m, bins)] += 1,
            Some(false) => negative[margin_bin(m, bins)] += 1,
            None => {}
        }
    }
    Ok(MarginHistograms {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        positive,
        negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(cells: &[(usize, usize)]) -> Vec<SampleMeta> {
        cells
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| SampleMeta {
                sample_id: format!("{i}"),
                class_index: c,
                spurious_index: s,
                split: Split::Test,
            })
            .collect()
    }

    #[test]
    fn group_examples() {
        let s = meta(&[(0, 0), (0, 0), (1, 1), (1, 1)]);
        let m = group_metrics(&s, &[0, 0, 1, 1], 2, 2).unwrap();
        assert_eq!(
            (m.worst_group, m.average, m.gap),
            (Some(1.0), 1.0, Some(0.0))
        );
        let m = group_metrics(&s, &[0, 0, 1, 0], 2, 2).unwrap();
        assert_eq!(
            (m.worst_group, m.average, m.gap),
            (Some(0.5), 0.75, Some(0.25))
        );
        assert_eq!(m.absent, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn bias_examples() {
        // occupation 0: 9/10 vs 5/10; occupation 1: 7/10 vs 7/10
        let mut cells = Vec::new();
        let mut preds = Vec::new();
        for (occ, g, correct) in [(0, 0, 9), (0, 1, 5), (1, 0, 7), (1, 1, 7)] {
            for i in 0..10 {
                cells.push((occ, g));
                preds.push(if i < correct { occ } else { 1 - occ });
            }
        }
        let r = bias_metric(&meta(&cells), &preds, 2, 10).unwrap();
        assert!((r.per_occupation_bias[&0] - 40.0).abs() < 1e-9);
        assert_eq!(r.per_occupation_bias[&1], 0.0);
        assert!((r.overall_bias - 20.0).abs() < 1e-9);
        assert_eq!(r.top_k_occupations, vec![0, 1]);

        let r = bias_metric(&meta(&[(0, 0), (0, 1)]), &[0, 1], 2, 10).unwrap();
        assert_eq!(r.overall_bias, 100.0);
        assert_eq!(r.excluded, vec![1]);
    }

    #[test]
    fn skew_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("{i}")).collect();
        let split = |n0: usize| -> HashMap<String, usize> {
            ids.iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), usize::from(i >= n0)))
                .collect()
        };
        let q = vec![ids.clone()];
        assert_eq!(max_skew(&q, &split(5), 10, 2).unwrap().mean_skew, 0.0);
        assert!(
            (max_skew(&q, &split(10), 10, 2).unwrap().mean_skew - 100.0 * 2f64.ln()).abs() < 1e-9
        );
        assert!(
            (max_skew(&q, &split(8), 10, 2).unwrap().mean_skew - 100.0 * 1.6f64.ln()).abs() < 1e-9
        );
        assert!(max_skew(&q, &split(8), 0, 2).is_err());
        assert!(max_skew(&q, &split(8), 11, 2).is_err());
    }

    #[test]
    fn margin_examples() {
        use crate::locate::{Correctness, Subgroup};
        let g = |sub| GroupedSample {
            sample_id: String::new(),
            class_index: 0,
            spurious_index: 0,
            a_sy: 1,
            correctness: Correctness::Correct,
            subgroup: sub,
        };
        let s = vec![g(Subgroup::PositiveCorrect), g(Subgroup::PositiveWrong)];
        let h = margin_histogram(&[1.0, 1.0], &s, 4).unwrap();
        assert_eq!(h.positive, vec![0, 0, 0, 2]);
        assert_eq!(h.negative, vec![0; 4]);
        assert_eq!(margin_bin(0.25, 4), 1);
        assert_eq!(margin_bin(0.0, 4), 0);
    }
}
