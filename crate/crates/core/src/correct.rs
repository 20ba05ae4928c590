// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-shot classification and the two corrections applied to located heads:
//! mean-ablation of spurious heads and knowledge injection into class heads.
//!
//! Corrected embeddings are rebuilt as `full + Σ (new_state − old_state)`, so
//! an empty plan leaves every embedding bit-identical.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locate::{HeadSet, HeadSetKind};
use crate::store::{ActivationRecord, DatasetManifest, TextBank};
use crate::tensor::{check_len, Position};

/// Softmax temperature used for margins unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Outcome of classifying one embedding against a text bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Record identifier.
    pub sample_id: String,
    /// Cosine similarity per bank entry.
    pub logits: Vec<f64>,
    /// `argmax(logits)`, ties to the lower index.
    pub predicted: usize,
    /// Best entry other than `predicted`; `None` for a one-entry bank.
    pub runner_up: Option<usize>,
    /// `p(predicted) − p(runner_up)` under `softmax(logits / t)`; always ≥ 0.
    pub margin: f64,
}

impl Prediction {
    /// Highest-logit entry other than `class`, ties to the lower index.
    pub fn best_other_than(&self, class: usize) -> Option<usize> {
        argmax_excluding(&self.logits, Some(class))
    }
}

fn argmax_excluding(values: &[f64], skip: Option<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Cosine similarity of `embedding` with every bank entry.
pub fn cosine_logits(embedding: &[f64], bank: &TextBank) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::Empty("text bank".into()));
    }
    check_len("embedding", embedding.len(), bank.dim())?;
    let en = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if en == 0.0 || !en.is_finite() {
        return Err(Error::Numeric(
            "embedding has zero or non-finite norm".into(),
        ));
    }
    Ok((0..bank.len())
        .map(|i| {
            let t = bank.vector(i);
            let (mut dot, mut tn) = (0.0, 0.0);
            for (&a, &b) in embedding.iter().zip(t) {
                let b = f64::from(b);
                dot += a * b;
                tn += b * b;
            }
            dot / (en * tn.sqrt())
        })
        .collect())
}

/// Softmax of `logits / temperature`, shifted by the maximum for stability.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - m) / temperature).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Zero-shot classification of an `f64` embedding.
pub fn classify_f64(
    sample_id: &str,
    embedding: &[f64],
    bank: &TextBank,
    temperature: f64,
) -> Result<Prediction> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = cosine_logits(embedding, bank)?;
    let predicted = argmax_excluding(&logits, None).expect("bank is non-empty");
    let runner_up = argmax_excluding(&logits, Some(predicted));
    let p = softmax(&logits, temperature);
    let margin = runner_up.map_or(1.0, |r| p[predicted] - p[r]);
    Ok(Prediction {
        sample_id: sample_id.to_owned(),
        logits,
        predicted,
        runner_up,
        margin,
    })
}

/// Zero-shot classification of a stored embedding.
pub fn classify(
    sample_id: &str,
    embedding: &[f32],
    bank: &TextBank,
    temperature: f64,
) -> Result<Prediction> {
    let e: Vec<f64> = embedding.iter().map(|&x| f64::from(x)).collect();
    classify_f64(sample_id, &e, bank, temperature)
}

/// Most similar spurious prompt, ties to the lower index.
pub fn predict_spurious(embedding: &[f32], spurious_bank: &TextBank) -> Result<usize> {
    Ok(classify("", embedding, spurious_bank, DEFAULT_TEMPERATURE)?.predicted)
}

/// Zero-shot predictions for every record, in record order.
pub fn zero_shot(
    records: &[ActivationRecord],
    bank: &TextBank,
    temperature: f64,
) -> Result<Vec<Prediction>> {
    records
        .par_iter()
        .map(|r| classify(&r.sample_id, &r.full_embedding, bank, temperature))
        .collect()
}

/// Unit-norm class-discriminative directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeVectors {
    /// `‖u_i‖ = 1`.
    pub vectors: Vec<Vec<f64>>,
    /// `(positive, negative)` label of the texts each vector came from.
    pub source_labels: Vec<(String, String)>,
}

impl DiscriminativeVectors {
    /// Number of vectors.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    /// `true` when there are no vectors.
    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// `u_i = (a_i − b_i) / ‖a_i − b_i‖` for every pair.
pub fn build_discriminative_vectors(
    pairs: &[(Vec<f32>, Vec<f32>)],
) -> Result<DiscriminativeVectors> {
    let labels = (0..pairs.len())
        .map(|i| (format!("{i}:pos"), format!("{i}:neg")))
        .collect();
    build_labelled(
        pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())),
        labels,
    )
}

fn build_labelled<'a>(
    pairs: impl Iterator<Item = (&'a [f32], &'a [f32])>,
    source_labels: Vec<(String, String)>,
) -> Result<DiscriminativeVectors> {
    let mut vectors = Vec::new();
    for (i, (a, b)) in pairs.enumerate() {
        check_len("concept pair", b.len(), a.len())?;
        let diff: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| f64::from(x) - f64::from(y))
            .collect();
        let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegeneratePair(format!(
                "pair {} has identical members",
                source_labels[i].0
            )));
        }
        vectors.push(diff.into_iter().map(|x| x / n).collect());
    }
    Ok(DiscriminativeVectors {
        vectors,
        source_labels,
    })
}

/// Every `:pos`/`:neg` pair of a concept bank, in bank order.
pub fn vectors_from_bank(concepts: &TextBank) -> Result<DiscriminativeVectors> {
    let pairs = concepts.concept_pairs()?;
    let labels = pairs
        .iter()
        .map(|(stem, _, _)| (format!("{stem}:pos"), format!("{stem}:neg")))
        .collect();
    build_labelled(
        pairs.iter().map(|(_, a, b)| (a.as_slice(), b.as_slice())),
        labels,
    )
}

/// Per-position dataset means of the states at `positions`, `[|positions|, d]`.
pub fn compute_mean_states(
    records: &[ActivationRecord],
    positions: &HeadSet,
) -> Result<Vec<Vec<f32>>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("records for mean states".into()))?;
    let c = &first.contributions;
    positions.check_bounds(c.layers(), c.heads())?;
    positions
        .positions
        .iter()
        .map(|&p| {
            let mut acc = vec![0.0f64; c.dim()];
            for r in records {
                check_len(
                    "contributions",
                    r.contributions.as_slice().len(),
                    c.as_slice().len(),
                )?;
                for (a, &x) in acc.iter_mut().zip(r.contributions.get(p)) {
                    *a += f64::from(x);
                }
            }
            let m = records.len() as f64;
            Ok(acc.into_iter().map(|a| (a / m) as f32).collect())
        })
        .collect()
}

/// Multi-class concept vectors keyed by pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLibrary {
    /// Vectors to inject for samples predicted as the key class.
    pub by_class: BTreeMap<usize, DiscriminativeVectors>,
}

impl ConceptLibrary {
    /// Select, for every class with a counter class, the concept pairs whose
    /// stem is `"<class>><counter>"` (optionally followed by `#k`).
    pub fn build(
        confusion: &BTreeMap<usize, usize>,
        class_names: &[String],
        concepts: &TextBank,
    ) -> Result<Self> {
        let pairs = concepts.concept_pairs()?;
        let mut by_class = BTreeMap::new();
        for (&class, &counter) in confusion {
            let (Some(a), Some(b)) = (class_names.get(class), class_names.get(counter)) else {
                return Err(Error::InvalidInput(format!(
                    "confusion entry {class}->{counter} out of range"
                )));
            };
            let want = format!("{a}>{b}");
            let chosen: Vec<_> = pairs
                .iter()
                .filter(|(stem, _, _)| stem.split('#').next() == Some(want.as_str()))
                .collect();
            if chosen.is_empty() {
                log::warn!(
                    "no concept pair for {want}; knowledge injection skipped for that class"
                );
                continue;
            }
            let labels = chosen
                .iter()
                .map(|(s, _, _)| (format!("{s}:pos"), format!("{s}:neg")))
                .collect();
            let v = build_labelled(
                chosen.iter().map(|(_, p, n)| (p.as_slice(), n.as_slice())),
                labels,
            )?;
            by_class.insert(class, v);
        }
        Ok(Self { by_class })
    }
}

/// Counter class of every target class: its most frequent wrong prediction,
/// ties to the lower index. Classes never misclassified are absent.
pub fn build_confusion_map(
    predictions: &[Prediction],
    manifest: &DatasetManifest,
) -> Result<BTreeMap<usize, usize>> {
    check_len("predictions", predictions.len(), manifest.samples.len())?;
    let k = manifest.class_names.len();
    let mut counts = vec![vec![0usize; k]; k];
    for (p, s) in predictions.iter().zip(&manifest.samples) {
        if p.predicted >= k {
            return Err(Error::InvalidInput(format!(
                "prediction {} out of class range",
                p.predicted
            )));
        }
        if p.predicted != s.class_index {
            counts[s.class_index][p.predicted] += 1;
        }
    }
    let mut map = BTreeMap::new();
    for (class, row) in counts.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (j, &c) in row.iter().enumerate() {
            if c > 0 && best.is_none_or(|b| c > row[b]) {
                best = Some(j);
            }
        }
        match best {
            Some(b) => {
                map.insert(class, b);
            }
            None => log::info!("class {class} never misclassified; no counter class"),
        }
    }
    Ok(map)
}

/// Everything needed to correct records at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPlan {
    /// Heads to mean-ablate.
    pub p_s: HeadSet,
    /// Heads to receive knowledge injection.
    pub p_y: HeadSet,
    /// One row per `p_s` position.
    pub mean_states: Vec<Vec<f32>>,
    /// Vectors injected into every `p_y` state, applied in order.
    pub vectors: DiscriminativeVectors,
    /// Per-pseudo-label vectors; when set, they replace `vectors`.
    #[serde(default)]
    pub library: Option<ConceptLibrary>,
}

impl CorrectionPlan {
    /// Build a plan, computing mean states over `mean_source`.
    pub fn new(
        p_s: HeadSet,
        p_y: HeadSet,
        mean_source: &[ActivationRecord],
        vectors: DiscriminativeVectors,
    ) -> Result<Self> {
        let mean_states = if p_s.is_empty() {
            Vec::new()
        } else {
            compute_mean_states(mean_source, &p_s)?
        };
        Ok(Self {
            p_s,
            p_y,
            mean_states,
            vectors,
            library: None,
        })
    }

    /// Replace mean states with zeros.
    pub fn zero_ablated(mut self) -> Self {
        for row in &mut self.mean_states {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
        self
    }

    fn validate(&self, record: &ActivationRecord) -> Result<()> {
        let c = &record.contributions;
        self.p_s.check_bounds(c.layers(), c.heads())?;
        self.p_y.check_bounds(c.layers(), c.heads())?;
        check_len("mean states", self.mean_states.len(), self.p_s.len())?;
        for row in &self.mean_states {
            check_len("mean state", row.len(), c.dim())?;
        }
        for u in &self.vectors.vectors {
            check_len("discriminative vector", u.len(), c.dim())?;
        }
        Ok(())
    }

    fn vectors_for(&self, pseudo_label: Option<usize>) -> Option<&DiscriminativeVectors> {
        match (&self.library, pseudo_label) {
            (Some(lib), Some(y)) => lib.by_class.get(&y),
            (Some(_), None) => None,
            (None, _) => Some(&self.vectors),
        }
    }
}

/// Which parts of a plan to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtcMode {
    /// Mean-ablation only.
    MaOnly,
    /// Knowledge injection only.
    KiOnly,
    /// Mean-ablation followed by knowledge injection.
    Full,
    /// Both corrections on uniformly drawn positions of the same total size.
    RandomControl,
}

impl LtcMode {
    fn ablates(self) -> bool {
        !matches!(self, LtcMode::KiOnly)
    }

    fn injects(self) -> bool {
        !matches!(self, LtcMode::MaOnly)
    }
}

impl std::str::FromStr for LtcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ma" | "ma_only" => Ok(LtcMode::MaOnly),
            "ki" | "ki_only" => Ok(LtcMode::KiOnly),
            "full" => Ok(LtcMode::Full),
            "random" | "random_control" => Ok(LtcMode::RandomControl),
            other => Err(Error::InvalidInput(format!(
                "unknown correction mode {other:?}"
            ))),
        }
    }
}

/// Corrected head states of one record, with the embedding delta they imply.
struct Edit {
    states: BTreeMap<Position, Vec<f64>>,
}

impl Edit {
    fn new() -> Self {
        Self {
            states: BTreeMap::new(),
        }
    }

    fn state<'a>(&'a mut self, record: &ActivationRecord, pos: Position) -> &'a mut Vec<f64> {
        self.states.entry(pos).or_insert_with(|| {
            record
                .contributions
                .get(pos)
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
    }

    fn ablate(&mut self, record: &ActivationRecord, plan: &CorrectionPlan) {
        for (&pos, mean) in plan.p_s.positions.iter().zip(&plan.mean_states) {
            let s = self.state(record, pos);
            s.iter_mut().zip(mean).for_each(|(x, &m)| *x = f64::from(m));
        }
    }

    fn inject(
        &mut self,
        record: &ActivationRecord,
        positions: &[Position],
        vectors: &DiscriminativeVectors,
    ) {
        for u in &vectors.vectors {
            let uu: f64 = u.iter().map(|x| x * x).sum();
            for &pos in positions {
                let s = self.state(record, pos);
                let coef = s.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / uu;
                s.iter_mut().zip(u).for_each(|(x, &ui)| *x += coef * ui);
            }
        }
    }

    fn embedding(&self, record: &ActivationRecord) -> Vec<f64> {
        let mut e: Vec<f64> = record
            .full_embedding
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        for (&pos, new) in &self.states {
            for ((acc, &old), &n) in e.iter_mut().zip(record.contributions.get(pos)).zip(new) {
                *acc += n - f64::from(old);
            }
        }
        e
    }

    fn into_record(self, record: &ActivationRecord) -> ActivationRecord {
        let embedding = self.embedding(record);
        let mut out = record.clone();
        for (pos, new) in self.states {
            out.contributions
                .get_mut(pos)
                .iter_mut()
                .zip(new)
                .for_each(|(x, n)| *x = n as f32);
        }
        out.full_embedding = embedding.into_iter().map(|x| x as f32).collect();
        out
    }
}

/// Replace every `p_s` state by its mean state.
pub fn mean_ablate(record: &ActivationRecord, plan: &CorrectionPlan) -> Result<ActivationRecord> {
    plan.validate(record)?;
    let mut e = Edit::new();
    e.ablate(record, plan);
    Ok(e.into_record(record))
}

/// Add to every `p_y` state its projection on each discriminative vector in
/// turn: `z ← z + u ⟨z, u⟩ / ⟨u, u⟩`.
pub fn knowledge_inject(
    record: &ActivationRecord,
    plan: &CorrectionPlan,
) -> Result<ActivationRecord> {
    plan.validate(record)?;
    let mut e = Edit::new();
    e.inject(record, &plan.p_y.positions, &plan.vectors);
    Ok(e.into_record(record))
}

/// Positions for the random control: `|p_s| + |p_y|` distinct uniform draws;
/// the first `|p_s|` are ablated and the rest injected.
pub fn random_positions(
    plan: &CorrectionPlan,
    layers: usize,
    heads: usize,
    seed: u64,
) -> Result<(HeadSet, HeadSet)> {
    let total = layers * heads;
    let (ns, ny) = (plan.p_s.len(), plan.p_y.len());
    if ns + ny > total {
        return Err(Error::InvalidInput(format!(
            "cannot draw {} positions from {total}",
            ns + ny
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Position> = sample(&mut rng, total, ns + ny)
        .into_iter()
        .map(|i| (i / heads, i % heads))
        .collect();
    Ok((
        HeadSet::new(HeadSetKind::Spurious, picks[..ns].to_vec(), layers, heads)?,
        HeadSet::new(HeadSetKind::Target, picks[ns..].to_vec(), layers, heads)?,
    ))
}

/// Options for [`apply_ltc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtcOptions {
    /// Which corrections to apply.
    pub mode: LtcMode,
    /// Softmax temperature for margins.
    pub temperature: f64,
    /// Seed for the random control.
    pub seed: u64,
}

impl Default for LtcOptions {
    fn default() -> Self {
        Self {
            mode: LtcMode::Full,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// Correct every record and classify the corrected embedding.
///
/// `pseudo_labels` selects per-class vectors when the plan carries a concept
/// library; records whose label has no entry are left uninjected.
pub fn apply_ltc(
    records: &[ActivationRecord],
    plan: &CorrectionPlan,
    class_bank: &TextBank,
    pseudo_labels: Option<&[usize]>,
    opts: LtcOptions,
) -> Result<Vec<Prediction>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    if let Some(p) = pseudo_labels {
        check_len("pseudo labels", p.len(), records.len())?;
    }
    let randomized;
    let plan = if opts.mode == LtcMode::RandomControl {
        let c = &first.contributions;
        let (p_s, p_y) = random_positions(plan, c.layers(), c.heads(), opts.seed)?;
        let mut r = CorrectionPlan::new(p_s, p_y, records, plan.vectors.clone())?;
        r.library = plan.library.clone();
        randomized = r;
        &randomized
    } else {
        plan
    };
    let skipped = std::sync::atomic::AtomicUsize::new(0);
    let out = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            plan.validate(r)?;
            let mut e = Edit::new();
            if opts.mode.ablates() {
                e.ablate(r, plan);
            }
            if opts.mode.injects() {
                match plan.vectors_for(pseudo_labels.map(|p| p[i])) {
                    Some(v) => e.inject(r, &plan.p_y.positions, v),
                    None => {
                        skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    }
                }
            }
            classify_f64(&r.sample_id, &e.embedding(r), class_bank, opts.temperature)
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = skipped.into_inner();
    if skipped > 0 {
        log::info!("knowledge injection skipped for {skipped} samples without a concept pair");
    }
    Ok(out)
}
