// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand bodies. Each returns the paths it read and wrote plus the seed
//! it used, for the run manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use headlens::correct::{
    apply_ltc, build_confusion_map, vectors_from_bank, zero_shot, ConceptLibrary, CorrectionPlan,
    LtcOptions, Prediction,
};
use headlens::interpret::{
    head_state_sum, shapley_text, spatial_heatmap, ShapleyMethod, ShapleyOptions, StateKind,
    TableProvider,
};
use headlens::locate::{
    identity_pairs, locate_heads, locate_spurious_heads, partition_groups, Conditioning,
    Localization, LocateOptions,
};
use headlens::metrics::{bias_metric, group_metrics, margin_histogram, max_skew, split_metrics};
use headlens::store::blob::{read_json, write_json};
use headlens::synth::{generate, sweep, write_sweep_csv, SweepParameter, SynthConfig};
use headlens::vit::{forward_decomposed, read_patches, read_weights};
use headlens::{
    read_store, write_store, DatasetManifest, Error, HeadSet, HeadSetKind, LtcMode, ModelSpec,
    ReadOptions, Result, Split, TextBank,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::*;

/// Files touched by a run.
#[derive(Default)]
pub struct Touched {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

impl Touched {
    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }
}

/// Contents of a predictions file.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionFile {
    pub mode: ModeArg,
    pub class_names: Vec<String>,
    pub predictions: Vec<Prediction>,
}

impl<'de> Deserialize<'de> for ModeArg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        <ModeArg as clap::ValueEnum>::from_str(&s, true).map_err(serde::de::Error::custom)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn load_store(args: &StoreArgs, t: &mut Touched) -> Result<headlens::LoadedStore> {
    t.input(&args.store);
    let loaded = read_store(
        &args.store,
        ReadOptions {
            strict: args.strict,
            ..ReadOptions::default()
        },
    )?;
    for v in &loaded.violations {
        warn!(
            "{}: {:?} relative error {:.3e}",
            v.sample_id, v.kind, v.relative_error
        );
    }
    Ok(loaded)
}

fn load_bank(path: &Path, t: &mut Touched) -> Result<TextBank> {
    t.input(path);
    TextBank::read(path)
}

fn load_manifest(path: &Path, ids: &[String], t: &mut Touched) -> Result<DatasetManifest> {
    t.input(path);
    DatasetManifest::read(path)?.aligned_to(ids)
}

fn load_heads(path: &Path, t: &mut Touched) -> Result<Localization> {
    t.input(path);
    read_json(path)
}

fn pairs_or_identity(pairs: &Option<Vec<usize>>, manifest: &DatasetManifest) -> Result<Vec<usize>> {
    match pairs {
        Some(p) => Ok(p.clone()),
        None => identity_pairs(manifest),
    }
}

fn ids_of(store: &headlens::LoadedStore) -> Vec<String> {
    store.records.iter().map(|r| r.sample_id.clone()).collect()
}

pub fn decompose(a: &DecomposeArgs, t: &mut Touched) -> Result<()> {
    t.input(&a.weights);
    t.input(&a.patches);
    let weights = read_weights(&a.weights)?;
    let set = read_patches(&a.patches)?;
    let cfg = *weights.config();
    let n_tokens = set.patches.first().map_or(0, |p| p.n);
    let records = set
        .sample_ids
        .par_iter()
        .zip(&set.patches)
        .map(|(id, p)| forward_decomposed(&weights, p, id, a.with_tokens).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        n_tokens,
        embed_dim: cfg.d_model,
        joint_dim: cfg.joint_dim,
    };
    write_store(&records, &spec, &a.out)?;
    info!(
        "decomposed {} images into {}",
        records.len(),
        a.out.display()
    );
    t.outputs.push(a.out.clone());
    Ok(())
}

pub fn locate(a: &LocateArgs, t: &mut Touched) -> Result<()> {
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "--fraction must lie in (0, 1], got {}",
            a.fraction
        )));
    }
    let store = load_store(&a.store, t)?;
    let manifest = load_manifest(&a.manifest, &ids_of(&store), t)?;
    let class_bank = load_bank(&a.class_bank, t)?;
    let pairs = pairs_or_identity(&a.pairs, &manifest)?;
    let opts = LocateOptions {
        top1: a.top1,
        fraction: a.fraction,
        seed: a.seed,
        conditioning: match a.conditioning {
            ConditioningArg::Predicted => Conditioning::Predicted,
            ConditioningArg::TrueClass => Conditioning::TrueClass,
        },
    };
    let zs = zero_shot(&store.records, &class_bank, 1.0)?;
    let predicted: Vec<Option<usize>> = zs.iter().map(|p| Some(p.predicted)).collect();
    let groups = partition_groups(&manifest, &predicted, &pairs)?;
    let loc = if a.spurious_task {
        let path = a
            .spurious_bank
            .as_deref()
            .expect("enforced by the argument parser");
        let bank = load_bank(path, t)?;
        let sp = zero_shot(&store.records, &bank, 1.0)?;
        locate_spurious_heads(&store.records, &groups, &sp, &bank, opts)?
    } else {
        locate_heads(&store.records, &groups, &zs, &class_bank, opts)?
    };
    info!(
        "spurious heads {:?}, class heads {:?}, threshold {:.4}",
        loc.p_s.positions, loc.p_y.positions, loc.gamma
    );
    create_parent(&a.out)?;
    write_json(&a.out, &loc)?;
    t.outputs.push(a.out.clone());
    t.seed = Some(a.seed);
    Ok(())
}

pub fn correct(a: &CorrectArgs, t: &mut Touched) -> Result<()> {
    let store = load_store(&a.store, t)?;
    let class_bank = load_bank(&a.class_bank, t)?;
    let predictions = if a.mode == ModeArg::Zs {
        zero_shot(&store.records, &class_bank, a.temperature)?
    } else {
        let loc = load_heads(
            a.heads.as_deref().expect("enforced by the argument parser"),
            t,
        )?;
        let mean_store;
        let mean_source = match &a.mean_store {
            Some(p) => {
                mean_store = load_store(
                    &StoreArgs {
                        store: p.clone(),
                        strict: a.store.strict,
                    },
                    t,
                )?;
                &mean_store.records
            }
            None => &store.records,
        };
        let vectors = match &a.concept_bank {
            Some(p) => vectors_from_bank(&load_bank(p, t)?)?,
            None => headlens::correct::DiscriminativeVectors {
                vectors: Vec::new(),
                source_labels: Vec::new(),
            },
        };
        let mut plan = CorrectionPlan::new(loc.p_s, loc.p_y, mean_source, vectors)?;
        if a.zero_ablate {
            plan = plan.zero_ablated();
        }
        let mut labels = None;
        if class_bank.len() > 2 {
            if let (Some(m), Some(c)) = (&a.manifest, &a.concept_bank) {
                let manifest = load_manifest(m, &ids_of(&store), t)?;
                let zs = zero_shot(&store.records, &class_bank, a.temperature)?;
                let confusion = build_confusion_map(&zs, &manifest)?;
                plan.library = Some(ConceptLibrary::build(
                    &confusion,
                    &manifest.class_names,
                    &TextBank::read(c)?,
                )?);
                labels = Some(zs.iter().map(|p| p.predicted).collect::<Vec<_>>());
            }
        }
        let mode = match a.mode {
            ModeArg::Ma => LtcMode::MaOnly,
            ModeArg::Ki => LtcMode::KiOnly,
            ModeArg::Full => LtcMode::Full,
            ModeArg::Random => LtcMode::RandomControl,
            ModeArg::Zs => unreachable!("handled above"),
        };
        let opts = LtcOptions {
            mode,
            temperature: a.temperature,
            seed: a.seed,
        };
        apply_ltc(&store.records, &plan, &class_bank, labels.as_deref(), opts)?
    };
    let file = PredictionFile {
        mode: a.mode,
        class_names: class_bank.labels().to_vec(),
        predictions,
    };
    create_parent(&a.out)?;
    write_json(&a.out, &file)?;
    t.outputs.push(a.out.clone());
    t.seed = Some(a.seed);
    Ok(())
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    metric: MetricArg,
    config: &'a EvaluateArgs,
    mode: ModeArg,
    n_samples: usize,
    result: T,
}

pub fn evaluate(a: &EvaluateArgs, t: &mut Touched) -> Result<()> {
    t.input(&a.preds);
    let file: PredictionFile = read_json(&a.preds)?;
    let ids: Vec<String> = file
        .predictions
        .iter()
        .map(|p| p.sample_id.clone())
        .collect();
    let manifest = load_manifest(&a.manifest, &ids, t)?;
    let predicted: Vec<usize> = file.predictions.iter().map(|p| p.predicted).collect();
    let n_classes = manifest.class_names.len();
    let n_spurious = manifest.spurious_names.len();
    let result = match a.metric {
        MetricArg::Wg => {
            let two_split = manifest
                .samples
                .iter()
                .any(|s| matches!(s.split, Split::Easy | Split::Hard));
            if two_split {
                serde_json::to_value(split_metrics(&manifest.samples, &predicted)?)
            } else {
                serde_json::to_value(group_metrics(
                    &manifest.samples,
                    &predicted,
                    n_classes,
                    n_spurious,
                )?)
            }
        }
        MetricArg::Bias => serde_json::to_value(bias_metric(
            &manifest.samples,
            &predicted,
            n_classes,
            a.top,
        )?),
        MetricArg::Skew => {
            // one retrieval query per class: samples ranked by that class's logit
            let rankings: Vec<Vec<String>> = (0..n_classes)
                .map(|c| {
                    let mut order: Vec<&Prediction> = file.predictions.iter().collect();
                    order.sort_by(|x, y| {
                        y.logits[c]
                            .total_cmp(&x.logits[c])
                            .then_with(|| x.sample_id.cmp(&y.sample_id))
                    });
                    order.into_iter().map(|p| p.sample_id.clone()).collect()
                })
                .collect();
            let group_of: HashMap<String, usize> = manifest
                .samples
                .iter()
                .map(|s| (s.sample_id.clone(), s.spurious_index))
                .collect();
            serde_json::to_value(max_skew(&rankings, &group_of, a.k, n_spurious)?)
        }
        MetricArg::Margins => {
            let pairs = pairs_or_identity(&a.pairs, &manifest)?;
            let known: Vec<Option<usize>> = predicted.iter().map(|&p| Some(p)).collect();
            let groups = partition_groups(&manifest, &known, &pairs)?;
            let margins: Vec<f64> = file.predictions.iter().map(|p| p.margin).collect();
            serde_json::to_value(margin_histogram(&margins, &groups, a.bins)?)
        }
    }
    .map_err(|e| Error::Json {
        path: a.out.clone(),
        source: e,
    })?;
    info!("{}", result);
    let report = Report {
        metric: a.metric,
        config: a,
        mode: file.mode,
        n_samples: predicted.len(),
        result,
    };
    create_parent(&a.out)?;
    write_json(&a.out, &report)?;
    t.outputs.push(a.out.clone());
    Ok(())
}

fn head_set(
    loc: &Localization,
    which: HeadSetArg,
    spec: &ModelSpec,
) -> Result<(HeadSet, StateKind)> {
    Ok(match which {
        // without a correct-sample map the spurious set came from the attribute task
        HeadSetArg::Spurious if loc.v_nc.is_none() => (loc.p_s.clone(), StateKind::Spurious),
        HeadSetArg::Spurious => (loc.p_s.clone(), StateKind::Association),
        HeadSetArg::Target => (loc.p_y.clone(), StateKind::Target),
        HeadSetArg::All => {
            let all = (0..spec.n_layers)
                .flat_map(|l| (0..spec.n_heads).map(move |h| (l, h)))
                .collect();
            (
                HeadSet::new(HeadSetKind::Planted, all, spec.n_layers, spec.n_heads)?,
                StateKind::Full,
            )
        }
    })
}

pub fn heatmap(a: &HeatmapArgs, t: &mut Touched) -> Result<()> {
    let store = load_store(&a.store, t)?;
    let loc = load_heads(&a.heads, t)?;
    let bank = load_bank(&a.text_bank, t)?;
    let text = bank.get(&a.label).ok_or_else(|| {
        Error::InvalidInput(format!(
            "label {:?} is not in {}",
            a.label,
            a.text_bank.display()
        ))
    })?;
    let (heads, kind) = head_set(&loc, a.set, &store.spec)?;
    let selected: Vec<_> = match &a.samples {
        Some(ids) => ids
            .iter()
            .map(|id| {
                store
                    .records
                    .iter()
                    .find(|r| &r.sample_id == id)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("sample {id:?} is not in the store"))
                    })
            })
            .collect::<Result<_>>()?,
        None => store.records.iter().collect(),
    };
    let maps = selected
        .par_iter()
        .map(|r| spatial_heatmap(r, &heads, text, kind))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    for m in &maps {
        let csv = a.out.join(format!("{}.csv", m.sample_id));
        fs::write(&csv, m.to_csv()).map_err(|e| Error::Io {
            path: csv,
            source: e,
        })?;
        if a.pgm {
            let pgm = a.out.join(format!("{}.pgm", m.sample_id));
            fs::write(&pgm, m.to_pgm()).map_err(|e| Error::Io {
                path: pgm,
                source: e,
            })?;
        }
    }
    write_json(&a.out.join("heatmaps.json"), &maps)?;
    t.outputs.push(a.out.clone());
    Ok(())
}

pub fn shap(a: &ShapArgs, t: &mut Touched) -> Result<()> {
    let store = load_store(&a.store, t)?;
    let loc = load_heads(&a.heads, t)?;
    t.input(&a.provider);
    let provider = TableProvider::read(&a.provider)?;
    let (heads, kind) = head_set(&loc, a.set, &store.spec)?;
    let record = store
        .records
        .iter()
        .find(|r| r.sample_id == a.sample)
        .ok_or_else(|| Error::InvalidInput(format!("sample {:?} is not in the store", a.sample)))?;
    let state = head_state_sum(record, &heads)?;
    let opts = ShapleyOptions {
        method: match a.method {
            MethodArg::Auto => ShapleyMethod::Auto,
            MethodArg::Exact => ShapleyMethod::Exact,
            MethodArg::Sampled => ShapleyMethod::Sampled,
        },
        n_permutations: a.permutations,
        seed: a.seed,
    };
    let mut attribution = shapley_text(&a.sample, &state, &provider, kind, opts)?;
    attribution.caption_tokens = provider.tokens().to_vec();
    create_parent(&a.out)?;
    write_json(&a.out, &attribution)?;
    t.outputs.push(a.out.clone());
    t.seed = Some(a.seed);
    Ok(())
}

fn load_config(path: &Option<PathBuf>, t: &mut Touched) -> Result<SynthConfig> {
    match path {
        Some(p) => {
            t.input(p);
            read_json(p)
        }
        None => Ok(SynthConfig::default()),
    }
}

pub fn synth(a: &SynthArgs, t: &mut Touched) -> Result<()> {
    let mut cfg = load_config(&a.config, t)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg)?;
    ds.write(&a.out)?;
    info!("wrote {} samples to {}", ds.records.len(), a.out.display());
    t.outputs.push(a.out.clone());
    t.seed = Some(cfg.seed);
    Ok(())
}

pub fn sweep_cmd(a: &SweepArgs, t: &mut Touched) -> Result<()> {
    let cfg = load_config(&a.config, t)?;
    let parameter = match a.parameter {
        SweepParameterArg::Fraction => SweepParameter::Fraction,
        SweepParameterArg::Signal => SweepParameter::Signal,
    };
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let rows = sweep(&cfg, parameter, &a.values, &seeds)?;
    create_parent(&a.out)?;
    write_sweep_csv(&rows, &a.out)?;
    t.outputs.push(a.out.clone());
    t.seed = Some(a.first_seed);
    Ok(())
}
