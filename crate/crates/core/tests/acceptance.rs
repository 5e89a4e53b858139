//! Acceptance suite: one PASS/FAIL line per criterion, numbered 1 to 10.
//!
//! Runs without the libtest harness so the lines come out in order and are
//! never captured. Any failing criterion makes the process exit non-zero.
//! Criteria 7 to 9 share one set of training runs on the default synergy
//! dataset and take tens of minutes on a single core. Numeric arguments
//! restrict the run to those criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptfuse::augment::{build_pair, EmbeddingTable, PromptMode, SequenceLayout, TokenSequence};
use promptfuse::data::{generate_synthetic, SplitSizes, SynthConfig, MASK_ID};
use promptfuse::encoder::{encode_augmented, encode_normal, Encoder, EncoderDims};
use promptfuse::layers::Linear;
use promptfuse::losses::{cls_loss, nt_xent};
use promptfuse::prompt::{generate_prompt, PromptGenerator};
use promptfuse::sbma::{
    length_normalize, run_sbma, similarity_matrix, AlignedTriple, LengthNormalizer, Sbma, SbmaDims, SequenceInput,
};
use promptfuse::substrate::{grad_check, Graph, Initializer, Matrix, ParamStore, RngSeed, Var};
use promptfuse::train::{
    compute_metrics, predict, read_history, summarize, write_history, Setting, SummaryRow, TclMap,
};
use promptfuse::{
    evaluate, read_feature_archive, train, write_feature_archive, Checkpoint, Dataset, MetricsReport, TrainConfig,
};

// Tolerances and budgets.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_PROBES: usize = 32;
const GRAD_MIN_PROBES: usize = 20;
/// Finite differences at coordinates with an exactly zero analytic gradient.
const GRAD_ZERO_TOL: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const NTXENT_TOL: f64 = 1e-6;
const NTXENT_LIMIT_TOL: f64 = 1e-3;
const SOFTMAX_SUM_TOL: f64 = 1e-6;
const PADDING_TOL: f64 = 1e-12;
const BRANCH_TOL: f64 = 1e-6;
const FULL_ACC_MIN: f64 = 0.90;
const TEXT_ONLY_ACC_MAX: f64 = 0.55;
const SEED_BUDGET: Duration = Duration::from_secs(300);
const ORDER_FLOOR: f64 = -0.01;
const SEEDS: usize = 5;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;
type GradCase = fn(&mut ChaCha8Rng) -> Result<GradLine, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    Initializer::new(RngSeed(rng.random())).normal(rows, cols, std)
}

fn weighted_sum(g: &mut Graph<'_, f64>, x: Var, w: &Matrix<f64>) -> promptfuse::Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

// ---------------------------------------------------------------- 1

struct GradLine {
    name: &'static str,
    max_rel: f64,
    probes: usize,
    zero_abs: f64,
}

fn run_grad_check<F>(name: &'static str, store: &mut ParamStore<f64>, seed: u64, f: F) -> Result<GradLine, String>
where
    F: Fn(&mut Graph<'_, f64>) -> promptfuse::Result<Var>,
{
    let r = grad_check(store, f, GRAD_STEP, GRAD_PROBES, RngSeed(seed)).map_err(|e| format!("{name}: {e}"))?;
    Ok(GradLine {
        name,
        max_rel: r.max_rel_error,
        probes: r.probes,
        zero_abs: r.zero_grad_max_abs,
    })
}

fn grad_sbma(rng: &mut ChaCha8Rng) -> Result<GradLine, String> {
    let dims = SbmaDims {
        token_width: 8,
        video_width: 6,
        audio_width: 5,
        video_len: 5,
        audio_len: 7,
        prompt_len: 3,
        hidden: 8,
    };
    let mut store = ParamStore::new();
    let mut init = Initializer::new(RngSeed(rng.random()));
    let sbma = Sbma::new(&mut store, &mut init, dims, 1.0, 1.0).map_err(|e| e.to_string())?;
    // randomize the positional logits so they are exercised away from zero
    for n in [&sbma.standardizer.token.normalizer, &sbma.standardizer.video.normalizer, &sbma.standardizer.audio.normalizer] {
        let (r, c) = store.value(n.position).shape();
        *store.value_mut(n.position) = randn(rng, r, c, 0.5);
    }
    let video = store.add("in.video", randn(rng, 2 * 5, 6, 1.0));
    let audio = store.add("in.audio", randn(rng, 2 * 7, 5, 1.0));
    let (wt, wv, wa) = (randn(rng, 3, 8, 1.0), randn(rng, 6, 8, 1.0), randn(rng, 6, 8, 1.0));
    run_grad_check("run_sbma", &mut store, rng.random(), |g| {
        let v = SequenceInput {
            var: g.param(video),
            max_len: 5,
            lens: vec![5, 3],
        };
        let a = SequenceInput {
            var: g.param(audio),
            max_len: 7,
            lens: vec![4, 7],
        };
        let out = run_sbma(g, &sbma, &v, &a, true)?;
        let parts = [weighted_sum(g, out.t_hat, &wt)?, weighted_sum(g, out.v_hat, &wv)?, weighted_sum(g, out.a_hat, &wa)?];
        let s = g.add(parts[0], parts[1])?;
        g.add(s, parts[2])
    })
}

fn grad_prompt(rng: &mut ChaCha8Rng) -> Result<GradLine, String> {
    let (l, h, dt, batch) = (3, 8, 12, 2);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(RngSeed(rng.random()));
    let gen = PromptGenerator::new(&mut store, &mut init, h, 2, dt, false).map_err(|e| e.to_string())?;
    let t_hat = store.add("in.t_hat", randn(rng, l, h, 1.0));
    let v_hat = store.add("in.v_hat", randn(rng, batch * l, h, 1.0));
    let a_hat = store.add("in.a_hat", randn(rng, batch * l, h, 1.0));
    let w = randn(rng, batch * l, dt, 1.0);
    run_grad_check("generate_prompt", &mut store, rng.random(), |g| {
        let t = g.param(t_hat);
        let v = g.param(v_hat);
        let a = g.param(a_hat);
        let aligned = AlignedTriple {
            t,
            v,
            a,
            t_hat: t,
            v_hat: v,
            a_hat: a,
            batch,
            len: l,
        };
        let p = generate_prompt(g, &gen, &aligned)?;
        weighted_sum(g, p, &w)
    })
}

/// `[CLS] text.. special` masks with a random valid text length per sample.
fn random_mask(rng: &mut ChaCha8Rng, batch: usize, len: usize) -> Vec<bool> {
    let text_len = len - 2;
    let mut mask = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let valid = rng.random_range(1..=text_len);
        mask.push(true);
        mask.extend((0..text_len).map(|i| i < valid));
        mask.push(true);
    }
    mask
}

fn sequence(embeddings: Var, batch: usize, len: usize, attention_mask: Vec<bool>) -> TokenSequence {
    TokenSequence {
        embeddings,
        batch,
        len,
        special_pos: len - 1,
        prompt_range: None,
        attention_mask,
    }
}

fn grad_encoder(rng: &mut ChaCha8Rng) -> Result<GradLine, String> {
    let (batch, len, width, h, l) = (2, 6, 8, 4, 3);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(RngSeed(rng.random()));
    let enc = Encoder::new(
        &mut store,
        &mut init,
        EncoderDims {
            width,
            layers: 2,
            heads: 2,
            gate_index: 0,
            gate_beta: 0.5,
            nonverbal_width: h,
        },
    )
    .map_err(|e| e.to_string())?;
    let x = store.add("in.tokens", randn(rng, batch * len, width, 1.0));
    let v_hat = store.add("in.v_hat", randn(rng, batch * l, h, 1.0));
    let a_hat = store.add("in.a_hat", randn(rng, batch * l, h, 1.0));
    let w = randn(rng, batch * len, width, 1.0);
    let mask = random_mask(rng, batch, len);
    run_grad_check("adaptation_gate+encoder", &mut store, rng.random(), |g| {
        let seq = sequence(g.param(x), batch, len, mask.clone());
        let v = g.param(v_hat);
        let a = g.param(a_hat);
        let out = encode_normal(g, &enc, &seq, v, a, l)?;
        weighted_sum(g, out.tokens, &w)
    })
}

fn grad_nt_xent(rng: &mut ChaCha8Rng) -> Result<GradLine, String> {
    let mut store = ParamStore::new();
    let z = store.add("in.z", randn(rng, 8, 6, 1.0));
    run_grad_check("nt_xent", &mut store, rng.random(), |g| {
        let z = g.param(z);
        nt_xent(g, z, 0.5)
    })
}

fn grad_cls(rng: &mut ChaCha8Rng) -> Result<GradLine, String> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(RngSeed(rng.random()));
    let classifier = Linear::new(&mut store, &mut init, "cls", 8, 4, true);
    let pooled = store.add("in.pooled", randn(rng, 6, 8, 1.0));
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    run_grad_check("cls_loss", &mut store, rng.random(), |g| {
        let p = g.param(pooled);
        cls_loss(g, p, &labels, &classifier)
    })
}

fn grad_full(rng: &mut ChaCha8Rng) -> Result<GradLine, String> {
    let ds = generate_synthetic(&SynthConfig {
        split_sizes: SplitSizes {
            train: 4,
            val: 0,
            test: 0,
        },
        seed: rng.random(),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?
    .dataset;
    let cfg = TrainConfig {
        seed: rng.random(),
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let model = TclMap::new(&cfg, &ds.manifest, &mut store).map_err(|e| e.to_string())?;
    let batch: Vec<_> = ds.train.iter().collect();
    run_grad_check("full loss", &mut store, rng.random(), |g| Ok(model.loss(g, &batch)?.total))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let checks: [GradCase; 6] =
        [grad_sbma, grad_prompt, grad_encoder, grad_nt_xent, grad_cls, grad_full];
    let mut ok = true;
    let mut parts = Vec::new();
    for f in checks {
        match f(&mut rng) {
            Ok(line) => {
                ok &= line.max_rel <= GRAD_REL_TOL && line.probes >= GRAD_MIN_PROBES && line.zero_abs <= GRAD_ZERO_TOL;
                parts.push(format!(
                    "{} rel {:.1e} over {} probes (zero-grad fd {:.1e})",
                    line.name, line.max_rel, line.probes, line.zero_abs
                ));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("error: {e}"));
            }
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed <= GRAD_BUDGET;
    check(ok, format!("{}; {:.1}s", parts.join("; "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

/// The loss written out as two nested loops over anchors and candidates.
fn nt_xent_oracle(z: &Matrix<f64>, tau: f64) -> f64 {
    let n2 = z.rows();
    let cos = |i: usize, k: usize| {
        let (a, b) = (z.row(i), z.row(k));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..n2 {
        let j = i ^ 1;
        let mut denom = 0.0;
        for k in 0..n2 {
            if k != i {
                denom += (cos(i, k) / tau).exp();
            }
        }
        total += -((cos(i, j) / tau).exp() / denom).ln();
    }
    total / n2 as f64
}

fn nt_xent_value(z: &Matrix<f64>, tau: f64) -> Result<f64, String> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let v = g.constant(z.clone());
    let l = nt_xent(&mut g, v, tau).map_err(|e| e.to_string())?;
    Ok(g.scalar(l))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut oracle_err, mut scale_err, mut limit_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut n1_exact = true;
    for trial in 0..50 {
        let n = [1, 2, 4, 8][trial % 4];
        let d = rng.random_range(2..=10);
        let tau = rng.random_range(0.05..2.0);
        let std = rng.random_range(0.5..3.0);
        let z = randn(&mut rng, 2 * n, d, std);
        let got = nt_xent_value(&z, tau)?;
        oracle_err = oracle_err.max((got - nt_xent_oracle(&z, tau)).abs());
        if n == 1 && got != 0.0 {
            n1_exact = false;
        }
        for c in [0.1, 10.0] {
            let scaled = z.map(|x| x * c);
            scale_err = scale_err.max((nt_xent_value(&scaled, tau)? - got).abs());
        }
        let hot = nt_xent_value(&z, 1e6)?;
        limit_err = limit_err.max((hot - ((2 * n - 1) as f64).ln()).abs());
    }
    check(
        oracle_err <= NTXENT_TOL && n1_exact && scale_err <= NTXENT_TOL && limit_err <= NTXENT_LIMIT_TOL,
        format!(
            "50 batches: oracle diff {oracle_err:.1e}, N=1 exact zero {n1_exact}, scale diff {scale_err:.1e}, \
             large-temperature diff {limit_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut bound_excess, mut sum_err, mut pad_err) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    let store = ParamStore::<f64>::new();
    for _ in 0..200 {
        let d = rng.random_range(1..=8);
        let (l, n) = (rng.random_range(1..=6), rng.random_range(1..=12));
        let alpha = rng.random_range(0.1..10.0);
        let (st, sx) = (10f64.powf(rng.random_range(-3.0..3.0)), 10f64.powf(rng.random_range(-3.0..3.0)));
        let t = randn(&mut rng, l, d, st);
        let x = randn(&mut rng, n, d, sx);
        let mut g = Graph::new(&store);
        let (tv, xv) = (g.constant(t), g.constant(x));
        let m = similarity_matrix(&mut g, tv, xv, alpha).map_err(|e| e.to_string())?;
        for &v in g.value(m).as_slice() {
            bound_excess = bound_excess.max(v.abs() - alpha);
        }
        let w = g.softmax_rows(m);
        for r in 0..l {
            sum_err = sum_err.max((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs());
        }

        let width = rng.random_range(1..=6);
        let max_len = rng.random_range(2..=12);
        let true_len = rng.random_range(1..max_len);
        let target = rng.random_range(1..=6);
        let mut nstore = ParamStore::<f64>::new();
        let mut init = Initializer::new(RngSeed(rng.random()));
        let norm = LengthNormalizer::new(&mut nstore, &mut init, "n", width, max_len, target);
        *nstore.value_mut(norm.position) = randn(&mut rng, max_len, target, 1.0);
        let base = randn(&mut rng, max_len, width, 1.0);
        let mut padded = base.clone();
        for r in true_len..max_len {
            for c in 0..width {
                padded.set(r, c, rng.random_range(-1e3..1e3));
            }
        }
        let mut g = Graph::new(&nstore);
        let (a, b) = (g.constant(base), g.constant(padded));
        let oa = length_normalize(&mut g, a, true_len, &norm).map_err(|e| e.to_string())?;
        let ob = length_normalize(&mut g, b, true_len, &norm).map_err(|e| e.to_string())?;
        pad_err = pad_err.max(g.value(oa).max_abs_diff(g.value(ob)));
    }
    check(
        bound_excess <= 0.0 && sum_err <= SOFTMAX_SUM_TOL && pad_err <= PADDING_TOL,
        format!(
            "200 trials: max(|M|-alpha) {bound_excess:.1e}, softmax row-sum error {sum_err:.1e}, \
             padding sensitivity {pad_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for trial in 0..200 {
        let lt = rng.random_range(1..=8);
        let with_prompt = trial % 2 == 0;
        let d = rng.random_range(1..=4);
        let batch = rng.random_range(1..=3);
        let width = rng.random_range(2..=6);
        let num_labels = rng.random_range(2..=5);
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(RngSeed(rng.random()));
        let table = EmbeddingTable::new(&mut store, &mut init, 8 + num_labels, width, lt + d + 2);
        let label_words: Vec<Vec<u32>> = (0..num_labels).map(|y| vec![(8 + y) as u32]).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..num_labels)).collect();
        let lens: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=lt)).collect();
        let layout = SequenceLayout {
            text_len: lt,
            prompt_len: with_prompt.then_some(d),
        };
        let z_text = randn(&mut rng, batch * (lt + 1), width, 1.0);
        let prompt = randn(&mut rng, batch * d, width, 1.0);

        let mut g = Graph::new(&store);
        let zt = g.constant(z_text);
        let p = with_prompt.then(|| g.constant(prompt));
        let (z, za) = build_pair(&mut g, &table, layout, zt, &lens, p, &label_words, &labels).map_err(|e| e.to_string())?;
        let expected_len = if with_prompt { lt + 1 + d + 1 } else { lt + 2 };
        let (zv, zav) = (g.value(z.embeddings), g.value(za.embeddings));
        let mut ok = z.len == expected_len
            && za.len == expected_len
            && zv.shape() == (batch * expected_len, width)
            && zav.shape() == zv.shape()
            && z.special_pos == expected_len - 1
            && z.attention_mask == za.attention_mask;
        for b in 0..batch {
            for pos in 0..expected_len {
                let row = b * expected_len + pos;
                let same = zv.row(row) == zav.row(row);
                ok &= if pos == z.special_pos { !same } else { same };
            }
            let mask_row: Vec<f64> = (0..width)
                .map(|c| store.value(table.table).get(MASK_ID as usize, c) + store.value(table.position).get(expected_len - 1, c))
                .collect();
            ok &= zv.row(b * expected_len + expected_len - 1) == mask_row.as_slice();
        }
        if !ok {
            failures.push(trial);
        }
    }
    check(
        failures.is_empty(),
        format!("200 trials, {} violating: {:?}", failures.len(), &failures[..failures.len().min(5)]),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let heads = rng.random_range(1..=3);
        let width = heads * rng.random_range(2..=4);
        let layers = rng.random_range(1..=3);
        let h = rng.random_range(2..=6);
        let l = rng.random_range(1..=4);
        let batch = rng.random_range(1..=3);
        let len = rng.random_range(3..=9);
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(RngSeed(rng.random()));
        let enc = Encoder::new(
            &mut store,
            &mut init,
            EncoderDims {
                width,
                layers,
                heads,
                gate_index: rng.random_range(0..layers),
                gate_beta: 0.5,
                nonverbal_width: h,
            },
        )
        .map_err(|e| e.to_string())?;
        enc.gate.fusion.zero(&mut store);
        let x = randn(&mut rng, batch * len, width, 1.0).cast::<f32>();
        let v = randn(&mut rng, batch * l, h, 5.0).cast::<f32>();
        let a = randn(&mut rng, batch * l, h, 5.0).cast::<f32>();
        let mut g = Graph::new(&store);
        let mask = random_mask(&mut rng, batch, len);
        let seq = sequence(g.constant(x), batch, len, mask);
        let (vv, av) = (g.constant(v), g.constant(a));
        let normal = encode_normal(&mut g, &enc, &seq, vv, av, l).map_err(|e| e.to_string())?;
        let augmented = encode_augmented(&mut g, &enc, &seq).map_err(|e| e.to_string())?;
        worst = worst.max(g.value(normal.tokens).max_abs_diff(g.value(augmented.tokens)));
    }
    check(
        f64::from(worst) <= BRANCH_TOL,
        format!("50 sequences, max token difference {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 6

/// Metrics counted straight from label/prediction pairs.
fn metrics_oracle(pairs: &[(usize, usize)], classes: usize) -> (f64, f64, f64, f64) {
    let total = pairs.len() as f64;
    let correct = pairs.iter().filter(|(y, p)| y == p).count() as f64;
    let (mut wf1, mut wp, mut recall_sum) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = pairs.iter().filter(|&&(y, p)| y == c && p == c).count() as f64;
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
        let support = pairs.iter().filter(|&&(y, _)| y == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        wf1 += (support / total) * f1;
        wp += (support / total) * precision;
        recall_sum += recall;
    }
    (correct / total, wf1, wp, recall_sum / classes as f64)
}

fn confusion_from_pairs(pairs: &[(usize, usize)], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for &(y, p) in pairs {
        m[y][p] += 1;
    }
    m
}

fn same_metrics(report: &MetricsReport, oracle: (f64, f64, f64, f64)) -> bool {
    (report.acc, report.wf1, report.wp, report.r) == oracle
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(1..=60);
        // skewed draws so that empty rows and columns show up
        let skip_pred = rng.random_range(0..classes);
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let y = rng.random_range(0..classes);
                let mut p = if rng.random_bool(0.5) { y } else { rng.random_range(0..classes) };
                if p == skip_pred && rng.random_bool(0.7) {
                    p = (p + 1) % classes;
                }
                (y, p)
            })
            .collect();
        let report = compute_metrics(&confusion_from_pairs(&pairs, classes)).map_err(|e| e.to_string())?;
        if !same_metrics(&report, metrics_oracle(&pairs, classes)) {
            mismatches += 1;
        }
    }

    let perfect: Vec<(usize, usize)> = (0..12).map(|i| (i % 4, i % 4)).collect();
    let p = compute_metrics(&confusion_from_pairs(&perfect, 4)).map_err(|e| e.to_string())?;
    let perfect_ok = (p.acc, p.wf1, p.wp, p.r) == (1.0, 1.0, 1.0, 1.0);
    let constant: Vec<(usize, usize)> = (0..12).map(|i| (i % 4, 2)).collect();
    let c = compute_metrics(&confusion_from_pairs(&constant, 4)).map_err(|e| e.to_string())?;
    // class 2 has P = 1/4 and R = 1, so F1 = 0.4; every other class scores 0
    let constant_ok = (c.acc, c.wf1, c.wp, c.r) == (0.25, 0.1, 0.0625, 0.25) && same_metrics(&c, metrics_oracle(&constant, 4));
    check(
        mismatches == 0 && perfect_ok && constant_ok,
        format!("100 random matrices, {mismatches} mismatches; perfect exact {perfect_ok}; constant predictor exact {constant_ok}"),
    )
}

// ---------------------------------------------------------------- 7 to 9

struct Runs {
    rows: Vec<(String, SummaryRow)>,
    slowest: Duration,
    errors: Vec<String>,
}

impl Runs {
    fn acc(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, r)| r.acc)
    }

    fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

fn synergy_runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let data = generate_synthetic(&SynthConfig::default()).expect("synthetic data").dataset;
        let base = TrainConfig::default();
        let mut settings: Vec<(String, TrainConfig)> = [Setting::Full, Setting::TextOnly, Setting::NoSbma, Setting::NoMap, Setting::NoTcl]
            .iter()
            .map(|s| (s.name().to_string(), s.apply(&base)))
            .collect();
        for mode in [PromptMode::Handcraft1, PromptMode::Handcraft2, PromptMode::Mask] {
            settings.push((
                mode.name().to_string(),
                TrainConfig {
                    prompt_mode: mode,
                    ..base.clone()
                },
            ));
        }
        let mut runs = Runs {
            rows: Vec::new(),
            slowest: Duration::ZERO,
            errors: Vec::new(),
        };
        for (name, cfg) in settings {
            let mut reports = Vec::new();
            for i in 0..SEEDS as u64 {
                let run = TrainConfig {
                    seed: cfg.seed + i,
                    ..cfg.clone()
                };
                let start = Instant::now();
                match train(&run, &data).and_then(|o| evaluate(&o.checkpoint, &data.test)) {
                    Ok(m) => reports.push(m),
                    Err(e) => runs.errors.push(format!("{name} seed {}: {e}", run.seed)),
                }
                runs.slowest = runs.slowest.max(start.elapsed());
            }
            let accs: Vec<String> = reports.iter().map(|m| format!("{:.3}", m.acc)).collect();
            eprintln!("  {name:<14} per-seed test acc [{}]", accs.join(", "));
            if let Ok(row) = summarize(&name, &reports) {
                runs.rows.push((name, row));
            }
        }
        runs
    })
}

fn criterion_7() -> Outcome {
    let runs = synergy_runs();
    let (Some(full), Some(text)) = (runs.row("full"), runs.row("text_only")) else {
        return Err(format!("missing runs: {:?}", runs.errors));
    };
    check(
        runs.errors.is_empty() && full.acc >= FULL_ACC_MIN && text.acc <= TEXT_ONLY_ACC_MAX && runs.slowest <= SEED_BUDGET,
        format!(
            "full acc {:.4} ± {:.4} (need >= {FULL_ACC_MIN}), text-only acc {:.4} ± {:.4} (need <= {TEXT_ONLY_ACC_MAX}), \
             slowest seed {:.0}s",
            full.acc,
            full.acc_std,
            text.acc,
            text.acc_std,
            runs.slowest.as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    let runs = synergy_runs();
    let table: Vec<&SummaryRow> = Setting::ABLATIONS.iter().filter_map(|s| runs.row(s.name())).collect();
    let Some(full) = runs.acc("full") else {
        return Err("no full-model runs".into());
    };
    let mut ok = table.len() == 4 && table.iter().all(|r| r.seeds == SEEDS);
    let mut parts = vec![format!("full {full:.4}")];
    for r in table.iter().skip(1) {
        let margin = full - r.acc;
        ok &= margin >= ORDER_FLOOR;
        parts.push(format!("{} {:.4} (margin {margin:+.4})", r.setting, r.acc));
    }
    check(ok, format!("{} rows: {}", table.len(), parts.join(", ")))
}

fn criterion_9() -> Outcome {
    let runs = synergy_runs();
    let (Some(aware), Some(h1), Some(h2), Some(mask)) =
        (runs.acc("full"), runs.acc("handcraft_1"), runs.acc("handcraft_2"), runs.acc("mask"))
    else {
        return Err(format!("missing runs: {:?}", runs.errors));
    };
    let ok = [h1, h2].iter().all(|&h| aware - h >= ORDER_FLOOR && h - mask >= ORDER_FLOOR);
    check(
        ok,
        format!("modality_aware {aware:.4}, handcraft_1 {h1:.4}, handcraft_2 {h2:.4}, mask {mask:.4}"),
    )
}

// ---------------------------------------------------------------- 10

fn small_dataset() -> Result<Dataset, String> {
    Ok(generate_synthetic(&SynthConfig {
        split_sizes: SplitSizes {
            train: 48,
            val: 16,
            test: 16,
        },
        seed: 10,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?
    .dataset)
}

fn criterion_10() -> Outcome {
    let data = small_dataset()?;
    let cfg = TrainConfig {
        epochs: 3,
        seed: 10,
        ..Default::default()
    };
    let a = train(&cfg, &data).map_err(|e| e.to_string())?;
    let b = train(&cfg, &data).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let hist_path = dir.path().join("history.jsonl");
    write_history(&a.history, &hist_path).map_err(|e| e.to_string())?;
    let history_ok = a.history == b.history
        && read_history(&hist_path).map_err(|e| e.to_string())? == a.history
        && a.checkpoint.params.iter().zip(b.checkpoint.params.iter()).all(|(x, y)| x.value == y.value);

    let ckpt_dir = dir.path().join("ckpt");
    a.checkpoint.save(&ckpt_dir).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&ckpt_dir).map_err(|e| e.to_string())?;
    let before = evaluate(&a.checkpoint, &data.test).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded, &data.test).map_err(|e| e.to_string())?;
    let preds_before = predict(&a.checkpoint, &data.test).map_err(|e| e.to_string())?;
    let preds_after = predict(&loaded, &data.test).map_err(|e| e.to_string())?;
    let eval_ok = before == after && preds_before == preds_after;

    let archive = dir.path().join("archive");
    write_feature_archive(&data, &archive).map_err(|e| e.to_string())?;
    let archive_ok = read_feature_archive(&archive).map_err(|e| e.to_string())? == data;
    check(
        history_ok && eval_ok && archive_ok,
        format!(
            "same-seed history identical {history_ok}; reloaded checkpoint evaluates identically {eval_ok}; \
             archive round trip exact {archive_ok}"
        ),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient checks", criterion_1),
        ("contrastive loss oracle", criterion_2),
        ("alignment invariants", criterion_3),
        ("pair construction", criterion_4),
        ("branch consistency", criterion_5),
        ("metrics oracle", criterion_6),
        ("synthetic learning", criterion_7),
        ("ablation ordering", criterion_8),
        ("prompt-mode ordering", criterion_9),
        ("determinism and persistence", criterion_10),
    ];
    // `cargo test --test acceptance -- 2 5` runs only the listed criteria
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} [{name}]: PASS  {detail}"),
            Err(detail) => {
                println!("criterion {n:>2} [{name}]: FAIL  {detail}");
                failed.push(n);
            }
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
