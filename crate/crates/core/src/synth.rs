// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic activations with planted class, spurious and association heads.
//!
//! Directions `e_y` (class) and `f_s` (spurious) are orthonormal. Class
//! prompts lean toward the spurious directions positively paired with them,
//! `t_y ∝ e_y + β Σ_{pair(s) = y} f_s`, which is what makes the spurious
//! heads harmful on negatively associated samples. Head states:
//!
//! * class heads: `A · e_{y*}`
//! * spurious heads: `κ A · f_s`
//! * association heads: `A · e_{pair(s)}`
//! * every other head: `ξ · signal · f_s` plus noise
//!
//! with `A = signal · U(1 − jitter, 1 + jitter)` and isotropic Gaussian noise
//! of expected norm `σ` on every head and on the residual. The residual also
//! carries `ζ · signal · U(0.5, 1.5) · f_s`. Embeddings are explicit sums.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::correct::{
    apply_ltc, build_confusion_map, vectors_from_bank, zero_shot, ConceptLibrary, CorrectionPlan,
    LtcMode, LtcOptions, Prediction, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::locate::{
    locate_heads, partition_groups, HeadSet, HeadSetKind, Localization, LocateOptions,
};
use crate::metrics::{group_metrics, GroupMetrics};
use crate::store::{
    write_store, ActivationRecord, BankKind, DatasetManifest, ModelSpec, SampleMeta, Split,
    TextBank,
};
use crate::tensor::{HeadTensor, Position, TokenTensor};

fn default_spec() -> ModelSpec {
    ModelSpec {
        n_layers: 6,
        n_heads: 8,
        n_tokens: 16,
        embed_dim: 64,
        joint_dim: 32,
    }
}

fn default_planted_y() -> Vec<Position> {
    vec![(5, 0), (5, 3)]
}

fn default_planted_s() -> Vec<Position> {
    vec![(4, 5)]
}

/// Generator configuration. Every field has a default, so `{}` is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Model shape.
    pub model_spec: ModelSpec,
    /// Number of classes.
    pub n_classes: usize,
    /// Number of spurious attributes; attribute `s` pairs with class `s mod n_classes`.
    pub n_spurious: usize,
    /// Class heads.
    pub planted_y: Vec<Position>,
    /// Spurious heads.
    pub planted_s: Vec<Position>,
    /// Association heads.
    pub planted_sy: Vec<Position>,
    /// Samples per `(class, spurious)` cell, row-major; one value broadcasts.
    pub cell_counts: Vec<usize>,
    /// Scale of planted contributions.
    pub signal_strength: f64,
    /// Expected norm of per-head and residual noise.
    pub noise_sigma: f64,
    /// Spurious-head magnitude relative to class heads.
    pub spurious_scale: f64,
    /// Relative half-width of the per-sample amplitude draw.
    pub amplitude_jitter: f64,
    /// Weight of the paired spurious direction inside class prompts.
    pub text_entanglement: f64,
    /// Spurious component carried by every unplanted head.
    pub background_leakage: f64,
    /// Spurious component of the residual.
    pub residual_spurious: f64,
    /// Concept pairs per class pair.
    pub concept_pairs: usize,
    /// Noise added to the positive concept text, relative to unit norm.
    pub concept_jitter: f64,
    /// Emit per-token contributions.
    pub with_tokens: bool,
    /// Seed.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            model_spec: default_spec(),
            n_classes: 2,
            n_spurious: 2,
            planted_y: default_planted_y(),
            planted_s: default_planted_s(),
            planted_sy: Vec::new(),
            cell_counts: vec![200],
            signal_strength: 1.0,
            noise_sigma: 0.2,
            spurious_scale: 1.0,
            amplitude_jitter: 0.5,
            text_entanglement: 1.0,
            background_leakage: 0.027,
            residual_spurious: 0.1,
            concept_pairs: 2,
            concept_jitter: 0.3,
            with_tokens: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Default configuration with another seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn cells(&self) -> usize {
        self.n_classes * self.n_spurious
    }

    fn cell_count(&self, cell: usize) -> usize {
        if self.cell_counts.len() == 1 {
            self.cell_counts[0]
        } else {
            self.cell_counts[cell]
        }
    }

    /// Check the invariants.
    pub fn validate(&self) -> Result<()> {
        let spec = &self.model_spec;
        spec.validate()?;
        if self.n_classes < 2 || self.n_spurious < 1 {
            return Err(Error::InvalidInput(
                "need at least two classes and one spurious attribute".into(),
            ));
        }
        if spec.joint_dim < self.n_classes + self.n_spurious {
            return Err(Error::InvalidInput(format!(
                "joint_dim {} cannot host {} orthonormal directions",
                spec.joint_dim,
                self.n_classes + self.n_spurious
            )));
        }
        if self.cell_counts.len() != 1 && self.cell_counts.len() != self.cells() {
            return Err(Error::InvalidInput(format!(
                "cell_counts needs 1 or {} entries, got {}",
                self.cells(),
                self.cell_counts.len()
            )));
        }
        let sets = [&self.planted_y, &self.planted_s, &self.planted_sy];
        let mut all = Vec::new();
        for (set, kind) in sets.iter().zip([
            HeadSetKind::Target,
            HeadSetKind::Spurious,
            HeadSetKind::Planted,
        ]) {
            HeadSet::new(kind, set.to_vec(), spec.n_layers, spec.n_heads)?;
            all.extend(set.iter().copied());
        }
        let unique: std::collections::BTreeSet<_> = all.iter().collect();
        if unique.len() != all.len() {
            return Err(Error::InvalidInput(
                "planted head sets must be disjoint".into(),
            ));
        }
        let non_negative = [
            self.noise_sigma,
            self.spurious_scale,
            self.text_entanglement,
            self.background_leakage,
            self.residual_spurious,
            self.concept_jitter,
        ];
        let negative = |x: f64| x.is_nan() || x < 0.0;
        if negative(self.signal_strength) || non_negative.iter().any(|&x| negative(x)) {
            return Err(Error::InvalidInput(
                "strengths and noise levels must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.amplitude_jitter) {
            return Err(Error::InvalidInput(
                "amplitude_jitter must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Class positively associated with each spurious attribute.
    pub fn positive_pairs(&self) -> Vec<usize> {
        (0..self.n_spurious).map(|s| s % self.n_classes).collect()
    }
}

/// Planted head roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Class heads.
    pub planted_y: HeadSet,
    /// Spurious heads.
    pub planted_s: HeadSet,
    /// Association heads.
    pub planted_sy: HeadSet,
}

/// A generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Records, sorted by sample id.
    pub records: Vec<ActivationRecord>,
    /// Labels, in record order.
    pub manifest: DatasetManifest,
    /// One prompt per class.
    pub class_bank: TextBank,
    /// One prompt per spurious attribute.
    pub spurious_bank: TextBank,
    /// Concept pairs `"<class>><counter>#k:pos|neg"`.
    pub concept_bank: TextBank,
    /// Planted roles.
    pub ground_truth: GroundTruth,
    /// `positive_pairs[s]` = class paired with attribute `s`.
    pub positive_pairs: Vec<usize>,
    /// Configuration used.
    pub config: SynthConfig,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn orthonormal(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, d, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}

/// Class `c`'s display name.
pub fn class_name(c: usize) -> String {
    format!("class_{c}")
}

/// Spurious attribute `s`'s display name.
pub fn spurious_name(s: usize) -> String {
    format!("attr_{s}")
}

/// Generate a dataset. Same configuration, same bits.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let spec = config.model_spec;
    let d = spec.joint_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dirs = orthonormal(&mut rng, config.n_classes + config.n_spurious, d);
    let (e, f) = dirs.split_at(config.n_classes);
    let pairs = config.positive_pairs();

    let texts: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|y| {
            let mut t = e[y].clone();
            for s in (0..config.n_spurious).filter(|&s| pairs[s] == y) {
                axpy(&mut t, config.text_entanglement, &f[s]);
            }
            normalize(&mut t);
            t
        })
        .collect();
    let class_bank = TextBank::new(
        BankKind::ClassPrompt,
        texts
            .iter()
            .enumerate()
            .map(|(y, t)| (class_name(y), to_f32(t)))
            .collect(),
    )?;
    let spurious_bank = TextBank::new(
        BankKind::SpuriousPrompt,
        f.iter()
            .enumerate()
            .map(|(s, v)| (spurious_name(s), to_f32(v)))
            .collect(),
    )?;

    let mut concepts = Vec::new();
    let ordered: Vec<(usize, usize)> = if config.n_classes == 2 {
        vec![(1, 0)]
    } else {
        (0..config.n_classes)
            .flat_map(|a| {
                (0..config.n_classes)
                    .filter(move |&b| b != a)
                    .map(move |b| (a, b))
            })
            .collect()
    };
    let jitter_scale = config.concept_jitter / (d as f64).sqrt();
    for (a, b) in ordered {
        for k in 0..config.concept_pairs {
            let mut pos = texts[a].clone();
            axpy(&mut pos, 1.0, &gaussian(&mut rng, d, jitter_scale));
            let stem = format!("{}>{}#{k}", class_name(a), class_name(b));
            concepts.push((format!("{stem}:pos"), to_f32(&pos)));
            concepts.push((format!("{stem}:neg"), to_f32(&texts[b])));
        }
    }
    let concept_bank = TextBank::new(BankKind::ConceptPair, concepts)?;

    let noise_scale = config.noise_sigma / (d as f64).sqrt();
    let signal = config.signal_strength;
    let amplitude = |rng: &mut ChaCha8Rng| {
        signal * rng.random_range(1.0 - config.amplitude_jitter..=1.0 + config.amplitude_jitter)
    };
    let role = |p: Position| {
        if config.planted_y.contains(&p) {
            1
        } else if config.planted_s.contains(&p) {
            2
        } else if config.planted_sy.contains(&p) {
            3
        } else {
            0
        }
    };

    let (layers, heads) = (spec.n_layers, spec.n_heads);
    let mut records = Vec::new();
    let mut samples = Vec::new();
    for cell in 0..config.cells() {
        let (y, s) = (cell / config.n_spurious, cell % config.n_spurious);
        for _ in 0..config.cell_count(cell) {
            let id = format!("s{:06}", records.len());
            let mut contributions = HeadTensor::zeros(layers, heads, d);
            let mut total = vec![0.0f64; d];
            for l in 0..layers {
                for h in 0..heads {
                    let mut state = gaussian(&mut rng, d, noise_scale);
                    match role((l, h)) {
                        1 => axpy(&mut state, amplitude(&mut rng), &e[y]),
                        2 => axpy(
                            &mut state,
                            config.spurious_scale * amplitude(&mut rng),
                            &f[s],
                        ),
                        3 => axpy(&mut state, amplitude(&mut rng), &e[pairs[s]]),
                        _ => axpy(&mut state, config.background_leakage * signal, &f[s]),
                    }
                    let stored = to_f32(&state);
                    total
                        .iter_mut()
                        .zip(&stored)
                        .for_each(|(t, &x)| *t += f64::from(x));
                    contributions.get_mut((l, h)).copy_from_slice(&stored);
                }
            }
            let mut residual = gaussian(&mut rng, d, noise_scale);
            let r_amp = config.residual_spurious * signal * rng.random_range(0.5..=1.5);
            axpy(&mut residual, r_amp, &f[s]);
            let residual = to_f32(&residual);
            total
                .iter_mut()
                .zip(&residual)
                .for_each(|(t, &x)| *t += f64::from(x));
            let token_contributions = config
                .with_tokens
                .then(|| split_tokens(&mut rng, &contributions, spec.n_tokens + 1));
            records.push(ActivationRecord {
                sample_id: id.clone(),
                contributions,
                token_contributions,
                residual_base: residual,
                full_embedding: to_f32(&total),
            });
            samples.push(SampleMeta {
                sample_id: id,
                class_index: y,
                spurious_index: s,
                split: Split::Test,
            });
        }
    }
    let manifest = DatasetManifest::new(
        samples,
        (0..config.n_classes).map(class_name).collect(),
        (0..config.n_spurious).map(spurious_name).collect(),
    )?;
    let set = |kind, p: &Vec<Position>| HeadSet::new(kind, p.clone(), layers, heads);
    Ok(SynthDataset {
        records,
        manifest,
        class_bank,
        spurious_bank,
        concept_bank,
        ground_truth: GroundTruth {
            planted_y: set(HeadSetKind::Planted, &config.planted_y)?,
            planted_s: set(HeadSetKind::Planted, &config.planted_s)?,
            planted_sy: set(HeadSetKind::Planted, &config.planted_sy)?,
        },
        positive_pairs: pairs,
        config: config.clone(),
    })
}

/// Spread each head state over tokens with random softmax weights; the CLS
/// slot takes the remainder so token sums match in `f32`.
fn split_tokens(rng: &mut ChaCha8Rng, contributions: &HeadTensor, tokens: usize) -> TokenTensor {
    let (layers, heads, d) = (
        contributions.layers(),
        contributions.heads(),
        contributions.dim(),
    );
    let mut out = TokenTensor::zeros(layers, heads, tokens, d);
    for (pos, state) in contributions.iter() {
        let logits = gaussian(rng, tokens, 2.0);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut used = vec![0.0f64; d];
        for (t, &wt) in w.iter().enumerate().skip(1) {
            let slot = out.get_mut(pos, t);
            for ((o, &x), u) in slot.iter_mut().zip(state).zip(used.iter_mut()) {
                *o = (f64::from(x) * wt / z) as f32;
                *u += f64::from(*o);
            }
        }
        let cls = out.get_mut(pos, 0);
        for ((o, &x), u) in cls.iter_mut().zip(state).zip(&used) {
            *o = (f64::from(x) - u) as f32;
        }
    }
    out
}

impl SynthDataset {
    /// Write the store, manifest, banks, truth and config under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_store(&self.records, &self.config.model_spec, &dir.join(STORE_DIR))?;
        self.manifest.write(&dir.join(MANIFEST_FILE))?;
        self.class_bank.write(&dir.join(CLASS_BANK_FILE))?;
        self.spurious_bank.write(&dir.join(SPURIOUS_BANK_FILE))?;
        self.concept_bank.write(&dir.join(CONCEPT_BANK_FILE))?;
        crate::store::blob::write_json(&dir.join(TRUTH_FILE), &self.ground_truth)?;
        crate::store::blob::write_json(&dir.join(CONFIG_FILE), &self.config)
    }
}

/// Store directory written by [`SynthDataset::write`].
pub const STORE_DIR: &str = "store";
/// Dataset manifest file.
pub const MANIFEST_FILE: &str = "manifest.csv";
/// Class prompt bank.
pub const CLASS_BANK_FILE: &str = "class_bank.json";
/// Spurious prompt bank.
pub const SPURIOUS_BANK_FILE: &str = "spurious_bank.json";
/// Concept pair bank.
pub const CONCEPT_BANK_FILE: &str = "concepts.json";
/// Planted roles.
pub const TRUTH_FILE: &str = "truth.json";
/// Configuration echo.
pub const CONFIG_FILE: &str = "config.json";

/// Precision and recall of one located set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    /// `|found ∩ truth| / |found|`, 0 when nothing was found.
    pub precision: f64,
    /// `|found ∩ truth| / |truth|`, 0 when the truth is empty.
    pub recall: f64,
    /// `false` when `found` was empty and precision is a placeholder.
    pub precision_defined: bool,
}

fn set_score(found: &HeadSet, truth: &[Position]) -> SetScore {
    let hits = found.positions.iter().filter(|p| truth.contains(p)).count() as f64;
    SetScore {
        precision: if found.is_empty() {
            0.0
        } else {
            hits / found.len() as f64
        },
        recall: if truth.is_empty() {
            0.0
        } else {
            hits / truth.len() as f64
        },
        precision_defined: !found.is_empty(),
    }
}

/// Recovery of both sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// Spurious heads against planted spurious ∪ association heads.
    pub spurious: SetScore,
    /// Class heads against planted class heads.
    pub target: SetScore,
}

/// Score located sets against the planted roles.
pub fn recovery_score(p_s: &HeadSet, p_y: &HeadSet, truth: &GroundTruth) -> Recovery {
    let mut s_truth = truth.planted_s.positions.clone();
    s_truth.extend(&truth.planted_sy.positions);
    Recovery {
        spurious: set_score(p_s, &s_truth),
        target: set_score(p_y, &truth.planted_y.positions),
    }
}

/// WG, average and gap of one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    /// Worst-group accuracy.
    pub worst_group: f64,
    /// Overall accuracy.
    pub average: f64,
    /// `average − worst_group`.
    pub gap: f64,
}

impl From<&GroupMetrics> for MethodScores {
    fn from(m: &GroupMetrics) -> Self {
        let wg = m.worst_group.unwrap_or(0.0);
        Self {
            worst_group: wg,
            average: m.average,
            gap: m.gap.unwrap_or(m.average - wg),
        }
    }
}

/// Options for [`run_benchmark`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkOptions {
    /// Locator options.
    pub locate: LocateOptions,
    /// Softmax temperature.
    pub temperature: f64,
    /// Seed for the random control.
    pub random_seed: u64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            locate: LocateOptions::default(),
            temperature: DEFAULT_TEMPERATURE,
            random_seed: 0,
        }
    }
}

/// End-to-end results on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    /// Locator output.
    pub localization: Localization,
    /// Recovery against the planted roles.
    pub recovery: Recovery,
    /// Zero-shot.
    pub zero_shot: MethodScores,
    /// Mean-ablation only.
    pub ma_only: MethodScores,
    /// Knowledge injection only.
    pub ki_only: MethodScores,
    /// Both corrections.
    pub full: MethodScores,
    /// Both corrections on random heads.
    pub random_control: MethodScores,
}

fn scores(ds: &SynthDataset, preds: &[Prediction]) -> Result<MethodScores> {
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let m = group_metrics(
        &ds.manifest.samples,
        &predicted,
        ds.config.n_classes,
        ds.config.n_spurious,
    )?;
    Ok(MethodScores::from(&m))
}

/// Correction plan for a dataset: means over all records and either shared
/// concept vectors (two classes) or a per-class library.
pub fn plan_for(
    ds: &SynthDataset,
    loc: &Localization,
    zs: &[Prediction],
) -> Result<(CorrectionPlan, Option<Vec<usize>>)> {
    let mut plan = CorrectionPlan::new(
        loc.p_s.clone(),
        loc.p_y.clone(),
        &ds.records,
        vectors_from_bank(&ds.concept_bank)?,
    )?;
    if ds.config.n_classes == 2 {
        return Ok((plan, None));
    }
    let confusion = build_confusion_map(zs, &ds.manifest)?;
    plan.library = Some(ConceptLibrary::build(
        &confusion,
        &ds.manifest.class_names,
        &ds.concept_bank,
    )?);
    Ok((plan, Some(zs.iter().map(|p| p.predicted).collect())))
}

/// Locate, correct in every mode, and score.
pub fn run_benchmark(ds: &SynthDataset, opts: BenchmarkOptions) -> Result<BenchmarkResult> {
    let zs = zero_shot(&ds.records, &ds.class_bank, opts.temperature)?;
    let predicted: Vec<Option<usize>> = zs.iter().map(|p| Some(p.predicted)).collect();
    let groups = partition_groups(&ds.manifest, &predicted, &ds.positive_pairs)?;
    let loc = locate_heads(&ds.records, &groups, &zs, &ds.class_bank, opts.locate)?;
    let (plan, labels) = plan_for(ds, &loc, &zs)?;
    let run = |mode| -> Result<MethodScores> {
        let o = LtcOptions {
            mode,
            temperature: opts.temperature,
            seed: opts.random_seed,
        };
        scores(
            ds,
            &apply_ltc(&ds.records, &plan, &ds.class_bank, labels.as_deref(), o)?,
        )
    };
    Ok(BenchmarkResult {
        recovery: recovery_score(&loc.p_s, &loc.p_y, &ds.ground_truth),
        zero_shot: scores(ds, &zs)?,
        ma_only: run(LtcMode::MaOnly)?,
        ki_only: run(LtcMode::KiOnly)?,
        full: run(LtcMode::Full)?,
        random_control: run(LtcMode::RandomControl)?,
        localization: loc,
    })
}

/// Swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Fraction of negatively associated samples used for locating.
    Fraction,
    /// `signal_strength` (noise held fixed).
    Signal,
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Swept parameter.
    pub parameter: SweepParameter,
    /// Its value.
    pub value: f64,
    /// Dataset seed.
    pub seed: u64,
    /// `false` when locating failed (e.g. an empty subgroup).
    pub valid: bool,
    /// Spurious-set recall.
    pub recall_s: f64,
    /// Spurious-set precision.
    pub precision_s: f64,
    /// Class-set recall.
    pub recall_y: f64,
    /// Class-set precision.
    pub precision_y: f64,
    /// Zero-shot worst group.
    pub wg_zero_shot: f64,
    /// Corrected worst group.
    pub wg_full: f64,
    /// Corrected average.
    pub avg_full: f64,
}

/// Rerun the benchmark over a grid of values and seeds. Subsampling seeds
/// follow the dataset seed.
pub fn sweep(
    base: &SynthConfig,
    parameter: SweepParameter,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(
            "a sweep needs at least two grid points".into(),
        ));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let fixed = (parameter == SweepParameter::Fraction)
            .then(|| generate(&cfg))
            .transpose()?;
        for &value in values {
            let mut opts = BenchmarkOptions::default();
            opts.locate.seed = seed;
            let owned;
            let ds = match parameter {
                SweepParameter::Fraction => {
                    opts.locate.fraction = value;
                    fixed.as_ref().expect("generated above")
                }
                SweepParameter::Signal => {
                    let mut c = cfg.clone();
                    c.signal_strength = value;
                    owned = generate(&c)?;
                    &owned
                }
            };
            let mut row = SweepRow {
                parameter,
                value,
                seed,
                valid: false,
                recall_s: 0.0,
                precision_s: 0.0,
                recall_y: 0.0,
                precision_y: 0.0,
                wg_zero_shot: 0.0,
                wg_full: 0.0,
                avg_full: 0.0,
            };
            match run_benchmark(ds, opts) {
                Ok(r) => {
                    row.valid = true;
                    row.recall_s = r.recovery.spurious.recall;
                    row.precision_s = r.recovery.spurious.precision;
                    row.recall_y = r.recovery.target.recall;
                    row.precision_y = r.recovery.target.precision;
                    row.wg_zero_shot = r.zero_shot.worst_group;
                    row.wg_full = r.full.worst_group;
                    row.avg_full = r.full.average;
                }
                Err(e) if matches!(e, Error::Empty(_)) => {
                    log::warn!("grid point {value} seed {seed}: {e}")
                }
                Err(e) => return Err(e),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Write sweep rows as CSV.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Delimited {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Delimited {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correct::classify;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            cell_counts: vec![20],
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_seeded_and_reconstructs() {
        let a = generate(&small(3)).unwrap();
        assert_eq!(a, generate(&small(3)).unwrap());
        assert_ne!(a.records, generate(&small(4)).unwrap().records);
        assert_eq!(a.records.len(), 80);
        for r in &a.records {
            assert!(r.reconstruction_error() < 1e-6);
        }
        let ids: Vec<_> = a.records.iter().map(|r| &r.sample_id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tokens_sum_to_head_states() {
        let cfg = SynthConfig {
            with_tokens: true,
            ..small(1)
        };
        for r in generate(&cfg).unwrap().records.iter().take(5) {
            assert!(r.token_sum_error().unwrap() < 1e-5);
        }
    }

    #[test]
    fn noiseless_dominant_spurious_heads_flip_negatives() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            amplitude_jitter: 0.0,
            spurious_scale: 2.0,
            ..small(0)
        };
        let ds = generate(&cfg).unwrap();
        for (r, m) in ds.records.iter().zip(&ds.manifest.samples) {
            let p = classify(&r.sample_id, &r.full_embedding, &ds.class_bank, 1.0).unwrap();
            let positive = ds.positive_pairs[m.spurious_index] == m.class_index;
            assert_eq!(p.predicted == m.class_index, positive, "{}", r.sample_id);
        }
    }

    #[test]
    fn configuration_errors() {
        let bad = SynthConfig {
            planted_s: vec![(5, 0)],
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let mut tiny = SynthConfig::default();
        tiny.model_spec.joint_dim = 3;
        assert!(generate(&tiny).is_err());
        let parsed: SynthConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, SynthConfig::default());
        assert!(serde_json::from_str::<SynthConfig>(r#"{"sigal": 1}"#).is_err());
    }

    #[test]
    fn recovery_examples() {
        let truth = GroundTruth {
            planted_y: HeadSet::new(HeadSetKind::Planted, vec![(0, 0)], 2, 2).unwrap(),
            planted_s: HeadSet::new(HeadSetKind::Planted, vec![(1, 1)], 2, 2).unwrap(),
            planted_sy: HeadSet::empty(HeadSetKind::Planted),
        };
        let r = recovery_score(&truth.planted_s.clone(), &truth.planted_y.clone(), &truth);
        assert_eq!((r.spurious.precision, r.spurious.recall), (1.0, 1.0));
        let none = HeadSet::empty(HeadSetKind::Spurious);
        let r = recovery_score(&none, &none, &truth);
        assert_eq!(
            (
                r.target.precision,
                r.target.recall,
                r.target.precision_defined
            ),
            (0.0, 0.0, false)
        );
        let extra = HeadSet::new(HeadSetKind::Target, vec![(0, 0), (0, 1)], 2, 2).unwrap();
        let r = recovery_score(&none, &extra, &truth);
        assert_eq!((r.target.precision, r.target.recall), (0.5, 1.0));
    }
}
