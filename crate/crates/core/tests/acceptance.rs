// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::time::Instant;

use headlens::correct::{
    apply_ltc, classify, knowledge_inject, mean_ablate, vectors_from_bank, zero_shot,
    CorrectionPlan, LtcMode, LtcOptions,
};
use headlens::interpret::{
    shapley_text, EmbeddingProvider, LinearProvider, ShapleyMethod, ShapleyOptions, StateKind,
};
use headlens::locate::{
    locate_heads, partition_groups, raw_importance, HeadSet, HeadSetKind, Subgroup,
};
use headlens::metrics::{bias_metric, group_metrics, margin_histogram, max_skew};
use headlens::synth::{generate, run_benchmark, BenchmarkOptions, SynthConfig};
use headlens::vit::{forward_decomposed, forward_plain, Patches, ViTConfig, ViTWeights};
use headlens::{GroupedSample, Result, SampleMeta, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(f64::MIN_POSITIVE)
}

fn decomposition_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_rec, mut worst_tok, mut worst_eq, mut worst_attn) = (0f64, 0f64, 0f64, 0f64);
    let models = 120;
    for m in 0..models {
        let heads = rng.random_range(1..=4);
        let head_dim = rng.random_range(1..=32 / heads).min(8);
        let cfg = ViTConfig {
            n_layers: rng.random_range(1..=4),
            n_heads: heads,
            d_model: heads * head_dim,
            d_ff: rng.random_range(2..=32),
            patch_dim: rng.random_range(1..=8),
            joint_dim: rng.random_range(2..=16),
            layer_norm: m % 10 != 0,
        };
        let w = ViTWeights::random(cfg, &mut rng);
        let n = rng.random_range(1..=9);
        let p = Patches::random(n, cfg.patch_dim, &mut rng);
        let (trace, record) = forward_decomposed(&w, &p, &format!("m{m}"), true)?;
        let plain = forward_plain(&w, &p)?;
        worst_rec = worst_rec.max(rel(&record.reconstructed(), &plain));
        worst_tok = worst_tok.max(record.token_sum_error().unwrap_or(f64::INFINITY));
        for l in 0..cfg.n_layers {
            // Σ_h Σ_i token terms must equal the attention update of the CLS row
            let mut msa = vec![0.0; cfg.d_model];
            for h in 0..cfg.n_heads {
                for (a, x) in msa.iter_mut().zip(trace.head_contribution(l, h)) {
                    *a += x;
                }
                let s: f64 = trace.attention_row(l, h).iter().sum();
                worst_attn = worst_attn.max((s - 1.0).abs());
            }
            let before = trace.cls(&trace.z[l]);
            let after = trace.cls(&trace.z_hat[l]);
            for ((a, b), x) in after.iter().zip(before).zip(&msa) {
                worst_eq = worst_eq.max((a - b - x).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: worst_rec <= 1e-4 && worst_tok <= 1e-5 && worst_eq <= 1e-5 && worst_attn <= 1e-6 && secs < 30.0,
        detail: format!(
            "{models} models: reconstruction {worst_rec:.2e} (≤1e-4), token sum {worst_tok:.2e} / residual update {worst_eq:.2e} (≤1e-5), attention rows {worst_attn:.1e}, {secs:.1}s"
        ),
    })
}

/// Per-seed spurious recall, spurious precision, class recall, class precision.
type RecoveryColumns = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn recovery_at(fraction: f64, seeds: u64) -> Result<RecoveryColumns> {
    let (mut rs, mut ps, mut ry, mut py) = (vec![], vec![], vec![], vec![]);
    for seed in 0..seeds {
        let ds = generate(&SynthConfig::with_seed(seed))?;
        let mut opts = BenchmarkOptions::default();
        opts.locate.fraction = fraction;
        opts.locate.seed = seed;
        let zs = zero_shot(&ds.records, &ds.class_bank, 1.0)?;
        let pred: Vec<_> = zs.iter().map(|p| Some(p.predicted)).collect();
        let groups = partition_groups(&ds.manifest, &pred, &ds.positive_pairs)?;
        let loc = locate_heads(&ds.records, &groups, &zs, &ds.class_bank, opts.locate)?;
        let r = headlens::synth::recovery_score(&loc.p_s, &loc.p_y, &ds.ground_truth);
        rs.push(r.spurious.recall);
        ps.push(r.spurious.precision);
        ry.push(r.target.recall);
        py.push(r.target.precision);
    }
    Ok((rs, ps, ry, py))
}

fn locator_recovery() -> Result<Outcome> {
    let start = Instant::now();
    let (rs, ps, ry, py) = recovery_at(1.0, 20)?;
    let secs = start.elapsed().as_secs_f64();
    let (rs, ps, ry, py) = (median(rs), median(ps), median(ry), median(py));
    Ok(Outcome {
        pass: rs == 1.0 && ry == 1.0 && ps >= 0.9 && py >= 0.9 && secs < 60.0,
        detail: format!(
            "20 seeds, medians: spurious recall {rs} precision {ps}, class recall {ry} precision {py}, {secs:.1}s"
        ),
    })
}

fn sample_efficiency() -> Result<Outcome> {
    let (rs, _, ry, _) = recovery_at(0.2, 20)?;
    let (rs, ry) = (median(rs), median(ry));
    Ok(Outcome {
        pass: rs >= 0.9 && ry >= 0.9,
        detail: format!("20% of negatively associated samples, 20 seeds: median recall spurious {rs}, class {ry}"),
    })
}

fn end_to_end() -> Result<Outcome> {
    let mut cols: [Vec<f64>; 5] = Default::default();
    let mut gaps = (vec![], vec![]);
    let mut random_never_above = true;
    for seed in 0..10 {
        let ds = generate(&SynthConfig::with_seed(seed))?;
        let opts = BenchmarkOptions {
            random_seed: 1000 + seed,
            ..BenchmarkOptions::default()
        };
        let r = run_benchmark(&ds, opts)?;
        for (c, m) in
            cols.iter_mut()
                .zip([r.full, r.ki_only, r.ma_only, r.zero_shot, r.random_control])
        {
            c.push(m.worst_group);
        }
        gaps.0.push(r.zero_shot.gap);
        gaps.1.push(r.full.gap);
        random_never_above &= r.random_control.worst_group <= r.full.worst_group;
    }
    let [ltc, ki, ma, zs, rnd] = cols.map(median);
    let (gap_zs, gap_ltc) = (median(gaps.0), median(gaps.1));
    let ordered = ltc >= ki && ki >= ma && ma >= zs && zs >= rnd;
    Ok(Outcome {
        pass: zs <= 0.40 && ltc - zs >= 0.20 && gap_ltc < gap_zs && random_never_above && ordered,
        detail: format!(
            "10 seeds, median WG: full {ltc:.3} ≥ KI {ki:.3} ≥ MA {ma:.3} ≥ ZS {zs:.3} ≥ R {rnd:.3}; gap {gap_zs:.3} → {gap_ltc:.3}; random ≤ full on every seed: {random_never_above}"
        ),
    })
}

fn correction_algebra() -> Result<Outcome> {
    let ds = generate(&SynthConfig {
        cell_counts: vec![10],
        ..SynthConfig::with_seed(5)
    })?;
    let (layers, heads) = (6, 8);
    let p_s = HeadSet::new(HeadSetKind::Spurious, vec![(4, 5), (0, 1)], layers, heads)?;
    let p_y = HeadSet::new(
        HeadSetKind::Target,
        vec![(5, 0), (5, 3), (2, 2)],
        layers,
        heads,
    )?;
    let mut vectors = vectors_from_bank(&ds.concept_bank)?;
    vectors.vectors.truncate(1);
    vectors.source_labels.truncate(1);
    let u = vectors.vectors[0].clone();
    let plan = CorrectionPlan::new(p_s.clone(), p_y.clone(), &ds.records, vectors.clone())?;

    // KI: component along u doubles, orthogonal part preserved, other heads bit-identical
    let (mut worst_par, mut worst_orth, mut locality) = (0f64, 0f64, true);
    for r in &ds.records {
        let out = knowledge_inject(r, &plan)?;
        for (pos, before) in r.contributions.iter() {
            let after = out.contributions.get(pos);
            if !p_y.contains(pos) {
                locality &= before == after;
                continue;
            }
            let b: Vec<f64> = before.iter().map(|&x| f64::from(x)).collect();
            let a: Vec<f64> = after.iter().map(|&x| f64::from(x)).collect();
            let cb: f64 = b.iter().zip(&u).map(|(x, y)| x * y).sum();
            let ca: f64 = a.iter().zip(&u).map(|(x, y)| x * y).sum();
            let scale = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst_par = worst_par.max((ca - 2.0 * cb).abs() / scale);
            for ((x, y), ui) in a.iter().zip(&b).zip(&u) {
                worst_orth = worst_orth.max(((x - ca * ui) - (y - cb * ui)).abs() / scale);
            }
        }
    }
    // f32 storage rounds each entry once
    let ki_ok = worst_par <= 4.0 * f64::from(f32::EPSILON)
        && worst_orth <= 4.0 * f64::from(f32::EPSILON)
        && locality;

    // MA: zero cross-sample variance at ablated heads
    let ablated: Vec<_> = ds
        .records
        .iter()
        .map(|r| mean_ablate(r, &plan))
        .collect::<Result<_>>()?;
    let mut variance_zero = true;
    for &pos in &p_s.positions {
        let first = ablated[0].contributions.get(pos);
        variance_zero &= ablated.iter().all(|r| r.contributions.get(pos) == first);
    }

    // empty plan reproduces zero-shot bit for bit in every mode
    let empty = CorrectionPlan::new(
        HeadSet::empty(HeadSetKind::Spurious),
        HeadSet::empty(HeadSetKind::Target),
        &ds.records,
        vectors,
    )?;
    let zs = zero_shot(&ds.records, &ds.class_bank, 1.0)?;
    let mut identical = true;
    for mode in [LtcMode::MaOnly, LtcMode::KiOnly, LtcMode::Full] {
        let opts = LtcOptions {
            mode,
            ..LtcOptions::default()
        };
        let got = apply_ltc(&ds.records, &empty, &ds.class_bank, None, opts)?;
        identical &= got == zs;
    }
    let direct: Vec<_> = ds
        .records
        .iter()
        .map(|r| classify(&r.sample_id, &r.full_embedding, &ds.class_bank, 1.0))
        .collect::<Result<_>>()?;
    identical &= direct == zs;
    Ok(Outcome {
        pass: ki_ok && variance_zero && identical,
        detail: format!(
            "KI parallel error {worst_par:.1e}, orthogonal error {worst_orth:.1e} (f32 rounding), locality {locality}; MA zero variance {variance_zero}; empty plan = zero-shot {identical}"
        ),
    })
}

fn brute_group(samples: &[SampleMeta], pred: &[usize]) -> (Option<f64>, f64) {
    let mut cells: HashMap<(usize, usize), Vec<bool>> = HashMap::new();
    for (s, &p) in samples.iter().zip(pred) {
        cells
            .entry((s.class_index, s.spurious_index))
            .or_default()
            .push(p == s.class_index);
    }
    let acc = |v: &Vec<bool>| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
    let wg = cells
        .values()
        .map(acc)
        .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.min(a))));
    let all: Vec<bool> = samples
        .iter()
        .zip(pred)
        .map(|(s, &p)| p == s.class_index)
        .collect();
    (wg, acc(&all))
}

fn brute_bias(samples: &[SampleMeta], pred: &[usize], k: usize) -> (f64, f64) {
    let mut per = Vec::new();
    for o in 0..k {
        let acc = |g: usize| {
            let v: Vec<bool> = samples
                .iter()
                .zip(pred)
                .filter(|(s, _)| s.class_index == o && s.spurious_index == g)
                .map(|(s, &p)| p == s.class_index)
                .collect();
            (!v.is_empty()).then(|| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64)
        };
        if let (Some(a), Some(b)) = (acc(0), acc(1)) {
            per.push(100.0 * (a - b).abs());
        }
    }
    let overall = per.iter().sum::<f64>() / per.len() as f64;
    per.sort_by(|a, b| b.total_cmp(a));
    let top: Vec<f64> = per.into_iter().take(3).collect();
    (overall, top.iter().sum::<f64>() / top.len() as f64)
}

fn metric_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f64;
    let mut counts_match = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let (nc, ns) = (rng.random_range(2..=4), 2);
        let samples: Vec<SampleMeta> = (0..n)
            .map(|i| SampleMeta {
                sample_id: format!("{i}"),
                class_index: rng.random_range(0..nc),
                spurious_index: rng.random_range(0..ns),
                split: Split::Test,
            })
            .collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..nc)).collect();

        let m = group_metrics(&samples, &pred, nc, ns)?;
        let (wg, avg) = brute_group(&samples, &pred);
        worst = worst.max((m.average - avg).abs());
        worst = worst.max((m.worst_group.unwrap() - wg.unwrap()).abs());
        worst = worst.max((m.gap.unwrap() - (avg - wg.unwrap())).abs());

        if let Ok(b) = bias_metric(&samples, &pred, nc, 3) {
            let (overall, top) = brute_bias(&samples, &pred, nc);
            worst = worst
                .max((b.overall_bias - overall).abs())
                .max((b.top_k_bias - top).abs());
        }

        let k = rng.random_range(1..=n);
        let groups = rng.random_range(1..=3);
        let group_of: HashMap<String, usize> = samples
            .iter()
            .map(|s| (s.sample_id.clone(), rng.random_range(0..groups)))
            .collect();
        let mut ranked: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
        for i in (1..ranked.len()).rev() {
            ranked.swap(i, rng.random_range(0..=i));
        }
        let sk = max_skew(std::slice::from_ref(&ranked), &group_of, k, groups)?;
        let brute = (0..groups)
            .map(|g| ranked[..k].iter().filter(|id| group_of[*id] == g).count())
            .filter(|&c| c > 0)
            .map(|c| 100.0 * ((c as f64 / k as f64) / (1.0 / groups as f64)).ln())
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((sk.mean_skew - brute).abs());

        let margins: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let grouped: Vec<GroupedSample> = samples
            .iter()
            .map(|s| {
                let sub = [
                    Subgroup::PositiveCorrect,
                    Subgroup::NegativeWrong,
                    Subgroup::Unknown,
                ][rng.random_range(0..3)];
                GroupedSample {
                    sample_id: s.sample_id.clone(),
                    class_index: s.class_index,
                    spurious_index: s.spurious_index,
                    a_sy: 1,
                    correctness: headlens::locate::Correctness::Correct,
                    subgroup: sub,
                }
            })
            .collect();
        let bins = rng.random_range(1..=10);
        let h = margin_histogram(&margins, &grouped, bins)?;
        for (b, (&pc, &nc_)) in h.positive.iter().zip(&h.negative).enumerate() {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let inside = |m: f64| m >= lo && (m < hi || (b == bins - 1 && m <= 1.0));
            let count = |want: Option<bool>| {
                margins
                    .iter()
                    .zip(&grouped)
                    .filter(|(&m, g)| g.subgroup.is_positive() == want && inside(m))
                    .count()
            };
            counts_match &= pc == count(Some(true)) && nc_ == count(Some(false));
        }
    }
    let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let uniform: HashMap<String, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i % 2))
        .collect();
    let total: HashMap<String, usize> = ids.iter().map(|s| (s.clone(), 0)).collect();
    let u = max_skew(std::slice::from_ref(&ids), &uniform, 10, 2)?.mean_skew;
    let t = max_skew(std::slice::from_ref(&ids), &total, 10, 2)?.mean_skew;
    let fixed = u == 0.0 && (t - 100.0 * 2f64.ln()).abs() <= 1e-6;
    Ok(Outcome {
        pass: worst <= 1e-9 && counts_match && fixed,
        detail: format!(
            "200 instances: worst deviation {worst:.1e}, histogram counts match {counts_match}; skew fixed points uniform {u}, total {t:.6}"
        ),
    })
}

struct FnProvider<F: Fn(u64) -> Vec<f64>> {
    n: usize,
    dim: usize,
    f: F,
}

impl<F: Fn(u64) -> Vec<f64>> EmbeddingProvider for FnProvider<F> {
    fn n_tokens(&self) -> usize {
        self.n
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed(&self, mask: u64) -> Result<Vec<f64>> {
        Ok((self.f)(mask))
    }
}

fn shapley_axioms() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut eff, mut sym, mut dummy) = (0f64, 0f64, 0f64);
    let exact = ShapleyOptions {
        method: ShapleyMethod::Exact,
        ..ShapleyOptions::default()
    };
    for n in 2..=8usize {
        let dim = 4;
        let table: Vec<Vec<f64>> = (0..1u64 << n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        // tokens 0 and 1 are interchangeable; the last token is a dummy
        let dummy_bit = if n > 2 { 1u64 << (n - 1) } else { 0 };
        let canon = move |mut m: u64| {
            m &= !dummy_bit;
            if m & 0b11 == 0b01 {
                m = (m & !0b11) | 0b10;
            }
            m
        };
        let t = table.clone();
        let p = FnProvider {
            n,
            dim,
            f: move |m| t[canon(m) as usize].clone(),
        };
        let state: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = shapley_text("x", &state, &p, StateKind::Full, exact)?;
        eff = eff.max((a.phi.iter().sum::<f64>() - (a.value_full - a.value_empty)).abs());
        sym = sym.max((a.phi[0] - a.phi[1]).abs());
        if n > 2 {
            dummy = dummy.max(a.phi[n - 1].abs());
        }
    }
    let n = 6;
    let tokens: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let state: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lp = LinearProvider {
        token_vectors: tokens,
    };
    let ex = shapley_text("fixture", &state, &lp, StateKind::Target, exact)?;
    let sampled = shapley_text(
        "fixture",
        &state,
        &lp,
        StateKind::Target,
        ShapleyOptions {
            method: ShapleyMethod::Sampled,
            n_permutations: 2000,
            seed: 3,
        },
    )?;
    let gap = ex
        .phi
        .iter()
        .zip(&sampled.phi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Outcome {
        pass: eff <= 1e-9 && sym <= 1e-9 && dummy <= 1e-9 && gap <= 0.02,
        detail: format!(
            "exact (2..8 tokens): efficiency {eff:.1e}, symmetry {sym:.1e}, dummy {dummy:.1e}; 2000 permutations vs exact {gap:.1e}"
        ),
    })
}

fn sign_structure() -> Result<Outcome> {
    let ds = generate(&SynthConfig::default())?;
    let zs = zero_shot(&ds.records, &ds.class_bank, 1.0)?;
    let pred: Vec<_> = zs.iter().map(|p| Some(p.predicted)).collect();
    let groups = partition_groups(&ds.manifest, &pred, &ds.positive_pairs)?;
    let mut sums: HashMap<Subgroup, (f64, f64, usize)> = HashMap::new();
    for ((r, g), p) in ds.records.iter().zip(&groups).zip(&zs) {
        let ybar = p.runner_up.expect("two classes");
        let v = raw_importance(
            r,
            ds.class_bank.vector(p.predicted),
            ds.class_bank.vector(ybar),
        )?;
        let vy: f64 = ds
            .ground_truth
            .planted_y
            .positions
            .iter()
            .map(|&q| v.get(q))
            .sum();
        let vs: f64 = ds
            .ground_truth
            .planted_s
            .positions
            .iter()
            .map(|&q| v.get(q))
            .sum();
        let e = sums.entry(g.subgroup).or_default();
        e.0 += vy;
        e.1 += vs;
        e.2 += 1;
    }
    let mean = |s: Subgroup| {
        sums.get(&s)
            .map(|&(y, s_, n)| (y / n as f64, s_ / n as f64))
            .unwrap_or((f64::NAN, f64::NAN))
    };
    let (nc_y, nc_s) = mean(Subgroup::NegativeCorrect);
    let (nw_y, nw_s) = mean(Subgroup::NegativeWrong);
    Ok(Outcome {
        pass: nc_y > 0.0 && nc_s < 0.0 && nw_y < 0.0 && nw_s > 0.0,
        detail: format!("correct negatives: V_Y {nc_y:+.3}, V_S {nc_s:+.3}; wrong negatives: V_Y {nw_y:+.3}, V_S {nw_s:+.3}"),
    })
}

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("decomposition fidelity", decomposition_fidelity),
        ("locator recovery", locator_recovery),
        ("sample efficiency", sample_efficiency),
        ("end-to-end correction", end_to_end),
        ("correction algebra", correction_algebra),
        ("metric oracles", metric_oracles),
        ("shapley axioms", shapley_axioms),
        ("sign structure on negatives", sign_structure),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
