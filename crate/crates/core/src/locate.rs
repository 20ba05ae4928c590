// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head localization by contrasting importance maps of wrongly and correctly
//! classified negatively associated samples.
//!
//! Per sample, each head's logit-lens difference between the conditioning
//! class and its rival is one-hot sparsified at the argmax (ties to the
//! smallest `(layer, head)`). Maps are averaged within a subgroup and
//! normalized to sum 1. Heads whose normalized share is larger on wrong
//! samples by more than `γ` are spurious; the reverse are class heads.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correct::Prediction;
use crate::error::{Error, Result};
use crate::store::{ActivationRecord, DatasetManifest, TextBank};
use crate::tensor::{check_len, dot, Position};

/// Raw inner product of a projected state with a text embedding.
pub fn logit_lens(state: &[f32], text: &[f32]) -> Result<f64> {
    check_len("text embedding", text.len(), state.len())?;
    Ok(dot(state, text))
}

/// How a [`ContributionMap`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-head logit differences.
    Raw,
    /// A single 1 at the argmax.
    OneHot,
    /// Mean of one-hot maps; non-negative, sums to 1.
    DatasetMeanNormalized,
}

/// `[L, H]` importance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionMap {
    /// Layers.
    pub layers: usize,
    /// Heads per layer.
    pub heads: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    /// Provenance of the values.
    pub normalization: Normalization,
}

impl ContributionMap {
    /// Value at `pos`.
    pub fn get(&self, (l, h): Position) -> f64 {
        self.values[l * self.heads + h]
    }

    /// Position of the largest value, ties to the smallest `(layer, head)`.
    pub fn argmax(&self) -> Position {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.heads, best % self.heads)
    }

    /// The one-hot map at [`argmax`](Self::argmax).
    pub fn one_hot(&self) -> Self {
        let (l, h) = self.argmax();
        let mut values = vec![0.0; self.values.len()];
        values[l * self.heads + h] = 1.0;
        Self {
            layers: self.layers,
            heads: self.heads,
            values,
            normalization: Normalization::OneHot,
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.layers, self.heads) != (other.layers, other.heads) {
            return Err(Error::Dimension(format!(
                "maps are [{}, {}] and [{}, {}]",
                self.layers, self.heads, other.layers, other.heads
            )));
        }
        Ok(())
    }
}

/// Per-head `LL(state, text_y) − LL(state, text_ybar)`.
pub fn raw_importance(
    record: &ActivationRecord,
    text_y: &[f32],
    text_ybar: &[f32],
) -> Result<ContributionMap> {
    let c = &record.contributions;
    check_len("text embedding", text_y.len(), c.dim())?;
    check_len("text embedding", text_ybar.len(), c.dim())?;
    let diff: Vec<f32> = text_y.iter().zip(text_ybar).map(|(a, b)| a - b).collect();
    let values = c.iter().map(|(_, s)| dot(s, &diff)).collect();
    Ok(ContributionMap {
        layers: c.layers(),
        heads: c.heads(),
        values,
        normalization: Normalization::Raw,
    })
}

/// One-hot importance of one record.
pub fn importance_map(
    record: &ActivationRecord,
    text_y: &[f32],
    text_ybar: &[f32],
) -> Result<ContributionMap> {
    Ok(raw_importance(record, text_y, text_ybar)?.one_hot())
}

/// Entrywise mean of one-hot maps, renormalized to sum 1.
pub fn aggregate_importance(maps: &[ContributionMap]) -> Result<ContributionMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Empty("importance maps".into()))?;
    let mut acc = vec![0.0f64; first.values.len()];
    for m in maps {
        first.same_shape(m)?;
        acc.iter_mut().zip(&m.values).for_each(|(a, v)| *a += v);
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("importance maps carry no mass".into()));
    }
    Ok(ContributionMap {
        layers: first.layers,
        heads: first.heads,
        values: acc.into_iter().map(|a| a / total).collect(),
        normalization: Normalization::DatasetMeanNormalized,
    })
}

/// Whether a prediction matched the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correctness {
    /// Prediction equals the label.
    Correct,
    /// Prediction differs from the label.
    Wrong,
    /// No prediction available.
    Unknown,
}

/// Association sign × correctness cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subgroup {
    /// Positively associated, correct.
    #[serde(rename = "G_PC")]
    PositiveCorrect,
    /// Positively associated, wrong.
    #[serde(rename = "G_PW")]
    PositiveWrong,
    /// Negatively associated, correct.
    #[serde(rename = "G_NC")]
    NegativeCorrect,
    /// Negatively associated, wrong.
    #[serde(rename = "G_NW")]
    NegativeWrong,
    /// Prediction unknown.
    #[serde(rename = "unknown")]
    Unknown,
}

impl Subgroup {
    /// `Some(true)` for positive cells, `Some(false)` for negative ones.
    pub fn is_positive(self) -> Option<bool> {
        match self {
            Subgroup::PositiveCorrect | Subgroup::PositiveWrong => Some(true),
            Subgroup::NegativeCorrect | Subgroup::NegativeWrong => Some(false),
            Subgroup::Unknown => None,
        }
    }
}

/// A manifest row with its association sign and subgroup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedSample {
    /// Identifier.
    pub sample_id: String,
    /// True class.
    pub class_index: usize,
    /// Spurious attribute (true or inferred).
    pub spurious_index: usize,
    /// `+1` when the attribute is positively paired with the class, else `−1`.
    pub a_sy: i8,
    /// Prediction outcome.
    pub correctness: Correctness,
    /// Derived cell.
    pub subgroup: Subgroup,
}

/// Assign subgroups. `positive_pairs[s]` is the class positively associated
/// with spurious attribute `s`; `predictions[i]` is `None` when unknown.
pub fn partition_groups(
    manifest: &DatasetManifest,
    predictions: &[Option<usize>],
    positive_pairs: &[usize],
) -> Result<Vec<GroupedSample>> {
    let spurious: Vec<usize> = manifest.samples.iter().map(|s| s.spurious_index).collect();
    partition_with_spurious(manifest, &spurious, predictions, positive_pairs)
}

/// [`partition_groups`] with the spurious labels replaced, e.g. by zero-shot
/// predictions of the attribute.
pub fn partition_with_spurious(
    manifest: &DatasetManifest,
    spurious: &[usize],
    predictions: &[Option<usize>],
    positive_pairs: &[usize],
) -> Result<Vec<GroupedSample>> {
    check_len("predictions", predictions.len(), manifest.samples.len())?;
    check_len("spurious labels", spurious.len(), manifest.samples.len())?;
    check_len(
        "positive pairs",
        positive_pairs.len(),
        manifest.spurious_names.len(),
    )?;
    manifest
        .samples
        .iter()
        .zip(spurious)
        .zip(predictions)
        .map(|((m, &s), &pred)| {
            let pair = *positive_pairs.get(s).ok_or_else(|| {
                Error::InvalidInput(format!("spurious index {s} has no positive pair"))
            })?;
            let positive = pair == m.class_index;
            let correctness = match pred {
                Some(p) if p == m.class_index => Correctness::Correct,
                Some(_) => Correctness::Wrong,
                None => Correctness::Unknown,
            };
            let subgroup = match (positive, correctness) {
                (_, Correctness::Unknown) => Subgroup::Unknown,
                (true, Correctness::Correct) => Subgroup::PositiveCorrect,
                (true, Correctness::Wrong) => Subgroup::PositiveWrong,
                (false, Correctness::Correct) => Subgroup::NegativeCorrect,
                (false, Correctness::Wrong) => Subgroup::NegativeWrong,
            };
            Ok(GroupedSample {
                sample_id: m.sample_id.clone(),
                class_index: m.class_index,
                spurious_index: s,
                a_sy: if positive { 1 } else { -1 },
                correctness,
                subgroup,
            })
        })
        .collect()
}

/// Identity pairing `s → s`, valid when every attribute index is a class.
pub fn identity_pairs(manifest: &DatasetManifest) -> Result<Vec<usize>> {
    let k = manifest.class_names.len();
    if manifest.spurious_names.len() > k {
        return Err(Error::InvalidInput(
            "identity pairing needs at least as many classes as spurious attributes".into(),
        ));
    }
    Ok((0..manifest.spurious_names.len()).collect())
}

/// Role of a [`HeadSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSetKind {
    /// Support of an aggregated importance map.
    PStar,
    /// Heads carrying class information.
    Target,
    /// Heads carrying spurious information.
    Spurious,
    /// Ground truth from a generator.
    Planted,
}

/// Ordered, duplicate-free `(layer, head)` positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    /// Role.
    pub kind: HeadSetKind,
    /// Positions in significance order.
    pub positions: Vec<Position>,
}

impl HeadSet {
    /// Validated constructor.
    pub fn new(
        kind: HeadSetKind,
        positions: Vec<Position>,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        let s = Self { kind, positions };
        s.check_bounds(layers, heads)?;
        let unique: BTreeSet<_> = s.positions.iter().collect();
        if unique.len() != s.positions.len() {
            return Err(Error::InvalidInput(
                "head set has duplicate positions".into(),
            ));
        }
        Ok(s)
    }

    /// Empty set.
    pub fn empty(kind: HeadSetKind) -> Self {
        Self {
            kind,
            positions: Vec::new(),
        }
    }

    /// Every position is inside `[0, layers) × [0, heads)`.
    pub fn check_bounds(&self, layers: usize, heads: usize) -> Result<()> {
        match self
            .positions
            .iter()
            .find(|&&(l, h)| l >= layers || h >= heads)
        {
            Some(p) => Err(Error::InvalidInput(format!(
                "head {p:?} outside a {layers}×{heads} model"
            ))),
            None => Ok(()),
        }
    }

    /// Number of positions.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// `true` when there are no positions.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Membership test.
    pub fn contains(&self, pos: Position) -> bool {
        self.positions.contains(&pos)
    }

    /// Keep only the first position.
    pub fn top1(mut self) -> Self {
        self.positions.truncate(1);
        self
    }
}

fn ranked(
    map: &ContributionMap,
    keep: impl Fn(f64) -> bool,
    score: impl Fn(Position) -> f64,
) -> Vec<Position> {
    let mut out: Vec<Position> = (0..map.layers)
        .flat_map(|l| (0..map.heads).map(move |h| (l, h)))
        .filter(|&p| keep(score(p)))
        .collect();
    // stable sort keeps lexicographic order among equal scores
    out.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
    out
}

/// Positions with a strictly positive share, by descending value.
pub fn select_pstar(aggregated: &ContributionMap) -> HeadSet {
    HeadSet {
        kind: HeadSetKind::PStar,
        positions: ranked(aggregated, |v| v > 0.0, |p| aggregated.get(p)),
    }
}

/// `1 / |a ∪ b|`.
pub fn gamma_threshold(pstar_nw: &HeadSet, pstar_nc: &HeadSet) -> Result<f64> {
    let union: BTreeSet<_> = pstar_nw
        .positions
        .iter()
        .chain(&pstar_nc.positions)
        .collect();
    if union.is_empty() {
        return Err(Error::Empty(
            "both P* sets are empty; threshold undefined".into(),
        ));
    }
    Ok(1.0 / union.len() as f64)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "threshold must be positive, got {gamma}"
        )))
    }
}

/// `(p_s, p_y)`: positions where `v_nw − v_nc > γ`, and where `v_nc − v_nw > γ`.
pub fn locate_states(
    v_nw: &ContributionMap,
    v_nc: &ContributionMap,
    gamma: f64,
) -> Result<(HeadSet, HeadSet)> {
    check_gamma(gamma)?;
    v_nw.same_shape(v_nc)?;
    let d = |p: Position| v_nw.get(p) - v_nc.get(p);
    let p_s = ranked(v_nw, |x| x > gamma, d);
    let p_y = ranked(v_nw, |x| x > gamma, |p| -d(p));
    Ok((
        HeadSet {
            kind: HeadSetKind::Spurious,
            positions: p_s,
        },
        HeadSet {
            kind: HeadSetKind::Target,
            positions: p_y,
        },
    ))
}

/// Positions whose value on the spurious-attribute task exceeds `γ`.
pub fn locate_spurious_direct(v_c: &ContributionMap, gamma: f64) -> Result<HeadSet> {
    check_gamma(gamma)?;
    Ok(HeadSet {
        kind: HeadSetKind::Spurious,
        positions: ranked(v_c, |x| x > gamma, |p| v_c.get(p)),
    })
}

/// Which class the per-sample importance is measured for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// The predicted class against its runner-up.
    #[default]
    Predicted,
    /// The true class against the most probable other class.
    TrueClass,
}

/// Options for [`locate_heads`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocateOptions {
    /// Keep only the top position of each set.
    pub top1: bool,
    /// Fraction of negatively associated samples used, in `(0, 1]`.
    pub fraction: f64,
    /// Seed for subsampling.
    pub seed: u64,
    /// Conditioning class.
    pub conditioning: Conditioning,
}

impl Default for LocateOptions {
    fn default() -> Self {
        Self {
            top1: false,
            fraction: 1.0,
            seed: 0,
            conditioning: Conditioning::Predicted,
        }
    }
}

/// A head with its contrast value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    /// Layer.
    pub layer: usize,
    /// Head.
    pub head: usize,
    /// `v_nw − v_nc` (or the spurious-task share).
    pub difference: f64,
}

/// Output of [`locate_heads`], serialized as `heads.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Spurious heads.
    pub p_s: HeadSet,
    /// Class heads.
    pub p_y: HeadSet,
    /// Threshold used.
    pub gamma: f64,
    /// Contrast value of every head with a non-zero share in either map.
    pub differences: Vec<PositionScore>,
    /// Aggregated map on wrong samples (spurious-task map in that mode).
    pub v_nw: ContributionMap,
    /// Aggregated map on correct samples (absent in spurious-task mode).
    pub v_nc: Option<ContributionMap>,
    /// Samples behind each map.
    pub n_wrong: usize,
    /// Samples behind `v_nc`.
    pub n_correct: usize,
    /// Options echo.
    pub options: LocateOptions,
}

fn check_aligned(
    records: &[ActivationRecord],
    groups: &[GroupedSample],
    predictions: &[Prediction],
) -> Result<()> {
    check_len("groups", groups.len(), records.len())?;
    check_len("predictions", predictions.len(), records.len())?;
    for ((r, g), p) in records.iter().zip(groups).zip(predictions) {
        if r.sample_id != g.sample_id || r.sample_id != p.sample_id {
            return Err(Error::InvalidInput(format!(
                "records, groups and predictions are not aligned at {}",
                r.sample_id
            )));
        }
    }
    Ok(())
}

fn subsample(mut indices: Vec<usize>, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction < 1.0 {
        let keep = ((fraction * indices.len() as f64).round() as usize).min(indices.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, indices.len(), keep)
            .into_iter()
            .map(|i| indices[i])
            .collect();
        picked.sort_unstable();
        indices = picked;
    }
    Ok(indices)
}

fn conditioned_pair(
    p: &Prediction,
    true_class: usize,
    conditioning: Conditioning,
) -> Result<(usize, usize)> {
    let y = match conditioning {
        Conditioning::Predicted => p.predicted,
        Conditioning::TrueClass => true_class,
    };
    let ybar = p
        .best_other_than(y)
        .ok_or_else(|| Error::InvalidInput("importance needs at least two classes".into()))?;
    Ok((y, ybar))
}

fn subgroup_map(
    records: &[ActivationRecord],
    predictions: &[Prediction],
    bank: &TextBank,
    indices: &[usize],
    true_class: impl Fn(usize) -> usize + Sync,
    conditioning: Conditioning,
) -> Result<ContributionMap> {
    let maps = indices
        .par_iter()
        .map(|&i| {
            let (y, ybar) = conditioned_pair(&predictions[i], true_class(i), conditioning)?;
            importance_map(&records[i], bank.vector(y), bank.vector(ybar))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_importance(&maps)
}

/// Locate spurious and class heads from negatively associated samples.
///
/// Records, groups and zero-shot predictions must share one order.
pub fn locate_heads(
    records: &[ActivationRecord],
    groups: &[GroupedSample],
    predictions: &[Prediction],
    class_bank: &TextBank,
    opts: LocateOptions,
) -> Result<Localization> {
    check_aligned(records, groups, predictions)?;
    let negative: Vec<usize> = (0..groups.len())
        .filter(|&i| groups[i].subgroup.is_positive() == Some(false))
        .collect();
    let chosen = subsample(negative, opts.fraction, opts.seed)?;
    let (wrong, correct): (Vec<usize>, Vec<usize>) = chosen
        .into_iter()
        .partition(|&i| groups[i].subgroup == Subgroup::NegativeWrong);
    if wrong.is_empty() || correct.is_empty() {
        return Err(Error::Empty(format!(
            "need both wrong and correct negatively associated samples (got {} wrong, {} correct); check group inference",
            wrong.len(),
            correct.len()
        )));
    }
    let y_true = |i: usize| groups[i].class_index;
    let v_nw = subgroup_map(
        records,
        predictions,
        class_bank,
        &wrong,
        y_true,
        opts.conditioning,
    )?;
    let v_nc = subgroup_map(
        records,
        predictions,
        class_bank,
        &correct,
        y_true,
        opts.conditioning,
    )?;
    let gamma = gamma_threshold(&select_pstar(&v_nw), &select_pstar(&v_nc))?;
    let (mut p_s, mut p_y) = locate_states(&v_nw, &v_nc, gamma)?;
    if opts.top1 {
        p_s = p_s.top1();
        p_y = p_y.top1();
    }
    let differences = ranked(&v_nw, |_| true, |p| (v_nw.get(p) - v_nc.get(p)).abs())
        .into_iter()
        .filter(|&p| v_nw.get(p) > 0.0 || v_nc.get(p) > 0.0)
        .map(|(layer, head)| PositionScore {
            layer,
            head,
            difference: v_nw.get((layer, head)) - v_nc.get((layer, head)),
        })
        .collect();
    Ok(Localization {
        p_s,
        p_y,
        gamma,
        differences,
        v_nw,
        v_nc: Some(v_nc),
        n_wrong: wrong.len(),
        n_correct: correct.len(),
        options: opts,
    })
}

/// Locate heads encoding the spurious attribute itself by classifying the
/// attribute on negatively associated samples it is predicted correctly for.
///
/// The threshold is `1 / (|P*| + 1)` so that a unanimous single head is kept.
pub fn locate_spurious_heads(
    records: &[ActivationRecord],
    groups: &[GroupedSample],
    spurious_predictions: &[Prediction],
    spurious_bank: &TextBank,
    opts: LocateOptions,
) -> Result<Localization> {
    check_aligned(records, groups, spurious_predictions)?;
    let negative: Vec<usize> = (0..groups.len())
        .filter(|&i| groups[i].subgroup.is_positive() == Some(false))
        .collect();
    let correct: Vec<usize> = subsample(negative, opts.fraction, opts.seed)?
        .into_iter()
        .filter(|&i| spurious_predictions[i].predicted == groups[i].spurious_index)
        .collect();
    if correct.is_empty() {
        return Err(Error::Empty(
            "no negatively associated sample has its spurious attribute predicted correctly".into(),
        ));
    }
    let s_true = |i: usize| groups[i].spurious_index;
    let v_c = subgroup_map(
        records,
        spurious_predictions,
        spurious_bank,
        &correct,
        s_true,
        opts.conditioning,
    )?;
    let pstar = select_pstar(&v_c);
    let gamma = 1.0 / (pstar.len() + 1) as f64;
    let mut p_s = locate_spurious_direct(&v_c, gamma)?;
    if opts.top1 {
        p_s = p_s.top1();
    }
    let differences = pstar
        .positions
        .iter()
        .map(|&(layer, head)| PositionScore {
            layer,
            head,
            difference: v_c.get((layer, head)),
        })
        .collect();
    Ok(Localization {
        p_s,
        p_y: HeadSet::empty(HeadSetKind::Target),
        gamma,
        differences,
        v_nw: v_c,
        v_nc: None,
        n_wrong: 0,
        n_correct: correct.len(),
        options: opts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{SampleMeta, Split};
    use crate::tensor::HeadTensor;

    fn map(layers: usize, heads: usize, values: Vec<f64>) -> ContributionMap {
        ContributionMap {
            layers,
            heads,
            values,
            normalization: Normalization::DatasetMeanNormalized,
        }
    }

    fn one_hot(layers: usize, heads: usize, at: Position) -> ContributionMap {
        let mut v = vec![0.0; layers * heads];
        v[at.0 * heads + at.1] = 1.0;
        ContributionMap {
            layers,
            heads,
            values: v,
            normalization: Normalization::OneHot,
        }
    }

    fn record_with(diffs: &[f32], layers: usize, heads: usize) -> ActivationRecord {
        // state (x, 0) against texts (1, 0) and (0, 0) has difference x
        let data = diffs.iter().flat_map(|&x| [x, 0.0]).collect();
        let contributions = HeadTensor::from_vec(layers, heads, 2, data).unwrap();
        ActivationRecord {
            sample_id: "r".into(),
            contributions,
            token_contributions: None,
            residual_base: vec![0.0; 2],
            full_embedding: vec![1.0, 0.0],
        }
    }

    #[test]
    fn logit_lens_examples() {
        assert_eq!(logit_lens(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(logit_lens(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(
            logit_lens(&[0.5, -2.0, 1.0], &[2.0, 1.0, 3.0]).unwrap(),
            2.0
        );
        assert!(logit_lens(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn importance_examples() {
        let r = record_with(&[0.1, 0.0, 0.9, 0.05], 2, 2);
        assert_eq!(
            importance_map(&r, &[1.0, 0.0], &[0.0, 0.0])
                .unwrap()
                .argmax(),
            (1, 0)
        );
        let r = record_with(&[0.3; 4], 2, 2);
        assert_eq!(
            importance_map(&r, &[1.0, 0.0], &[0.0, 0.0]).unwrap(),
            one_hot(2, 2, (0, 0))
        );
        let r = record_with(&[-7.0], 1, 1);
        assert_eq!(
            importance_map(&r, &[1.0, 0.0], &[0.0, 0.0])
                .unwrap()
                .argmax(),
            (0, 0)
        );
    }

    #[test]
    fn aggregation_examples() {
        let a = aggregate_importance(&vec![one_hot(3, 4, (2, 3)); 4]).unwrap();
        assert_eq!(a.get((2, 3)), 1.0);
        let a = aggregate_importance(&[
            one_hot(2, 2, (0, 0)),
            one_hot(2, 2, (0, 0)),
            one_hot(2, 2, (1, 1)),
            one_hot(2, 2, (1, 1)),
        ])
        .unwrap();
        assert_eq!((a.get((0, 0)), a.get((1, 1))), (0.5, 0.5));
        let a = aggregate_importance(&[
            one_hot(2, 2, (0, 0)),
            one_hot(2, 2, (0, 0)),
            one_hot(2, 2, (0, 0)),
            one_hot(2, 2, (1, 1)),
        ])
        .unwrap();
        assert_eq!((a.get((0, 0)), a.get((1, 1))), (0.75, 0.25));
        assert!(aggregate_importance(&[]).is_err());
    }

    #[test]
    fn pstar_orders_by_value() {
        let m = map(2, 2, vec![0.2, 0.0, 0.5, 0.3]);
        assert_eq!(select_pstar(&m).positions, vec![(1, 0), (1, 1), (0, 0)]);
        assert_eq!(select_pstar(&map(2, 2, vec![0.25; 4])).len(), 4);
        assert_eq!(select_pstar(&one_hot(2, 2, (1, 0))).positions, vec![(1, 0)]);
    }

    #[test]
    fn gamma_examples() {
        let s = |p: Vec<Position>| HeadSet::new(HeadSetKind::PStar, p, 4, 4).unwrap();
        assert_eq!(
            gamma_threshold(&s(vec![(0, 0), (1, 1)]), &s(vec![(2, 2), (3, 3)])).unwrap(),
            0.25
        );
        assert_eq!(
            gamma_threshold(&s(vec![(0, 0)]), &s(vec![(1, 1)])).unwrap(),
            0.5
        );
        let three = vec![(0, 0), (1, 1), (2, 2)];
        assert_eq!(
            gamma_threshold(&s(three.clone()), &s(three)).unwrap(),
            1.0 / 3.0
        );
        assert!(gamma_threshold(&s(vec![]), &s(vec![])).is_err());
    }

    #[test]
    fn locate_states_examples() {
        let (l, h) = (12, 12);
        let mut nw = vec![0.0; l * h];
        nw[10 * h + 10] = 0.8;
        nw[11 * h + 5] = 0.1;
        nw[1] = 0.1;
        let mut nc = vec![0.0; l * h];
        nc[11 * h + 5] = 0.7;
        nc[10 * h + 10] = 0.1;
        nc[0] = 0.2;
        let (ps, py) = locate_states(&map(l, h, nw.clone()), &map(l, h, nc), 0.5).unwrap();
        assert_eq!(ps.positions, vec![(10, 10)]);
        assert_eq!(py.positions, vec![(11, 5)]);
        let (ps, py) = locate_states(&map(l, h, nw.clone()), &map(l, h, nw), 0.1).unwrap();
        assert!(ps.is_empty() && py.is_empty());
        assert!(locate_states(&map(1, 1, vec![1.0]), &map(1, 1, vec![0.0]), 0.0).is_err());
    }

    #[test]
    fn spurious_direct_examples() {
        let m = map(2, 2, vec![0.0, 0.9, 0.1, 0.0]);
        assert_eq!(
            locate_spurious_direct(&m, 0.5).unwrap().positions,
            vec![(0, 1)]
        );
        assert!(locate_spurious_direct(&map(2, 2, vec![0.25; 4]), 0.5)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn partition_examples() {
        let samples = vec![(1, 1), (1, 0), (0, 1)]
            .into_iter()
            .enumerate()
            .map(|(i, (y, s))| SampleMeta {
                sample_id: format!("{i}"),
                class_index: y,
                spurious_index: s,
                split: Split::Test,
            })
            .collect();
        let m = DatasetManifest::new(
            samples,
            vec!["landbird".into(), "waterbird".into()],
            vec!["land".into(), "water".into()],
        )
        .unwrap();
        let g = partition_groups(&m, &[Some(1), Some(0), Some(0)], &[0, 1]).unwrap();
        let cells: Vec<_> = g.iter().map(|s| s.subgroup).collect();
        assert_eq!(
            cells,
            vec![
                Subgroup::PositiveCorrect,
                Subgroup::NegativeWrong,
                Subgroup::NegativeCorrect
            ]
        );
        assert_eq!(g[1].a_sy, -1);
        assert!(partition_groups(&m, &[Some(1)], &[0, 1]).is_err());
        assert!(partition_groups(&m, &[None, None, None], &[0]).is_err());
        let g = partition_groups(&m, &[None, Some(1), Some(0)], &[0, 1]).unwrap();
        assert_eq!(g[0].subgroup, Subgroup::Unknown);
        assert_eq!(g[0].correctness, Correctness::Unknown);
    }

    #[test]
    fn head_sets_reject_bad_positions() {
        assert!(HeadSet::new(HeadSetKind::Planted, vec![(0, 0), (0, 0)], 1, 1).is_err());
        assert!(HeadSet::new(HeadSetKind::Planted, vec![(1, 0)], 1, 1).is_err());
        assert!(HeadSet::new(HeadSetKind::Planted, vec![(0, 1), (0, 0)], 1, 2).is_ok());
    }
}
