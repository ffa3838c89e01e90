//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sscl_core::cocalibration::{calibrate, SelfPaced};
use sscl_core::data::{Dataset, EpochBatches};
use sscl_core::encoder::{
    backward, forward, init_params, init_with_shape, momentum_update, EncoderParams, KeyEntry, KeyQueue,
};
use sscl_core::losses::{
    contrastive_logit_grads, contrastive_loss, contrastive_loss_margin_on_negatives,
    contrastive_loss_margin_on_positives, cross_entropy, pseudo_label_loss, sup_loss, ContrastiveInputs,
};
use sscl_core::math::{dot, lse, neg_lse, softmax, softplus, Distribution};
use sscl_core::trainer::{cosine_lr, sgd_step, write_metrics_csv, EpochMetrics, OptimizerState, TrainConfig};
use sscl_core::{Result, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_inputs(r: &mut ChaCha8Rng, max_pos: usize, negatives: usize, s_max: f64) -> ContrastiveInputs<f64> {
    let np = r.random_range(1..=max_pos);
    ContrastiveInputs {
        s_p: (0..np).map(|_| r.random_range(-s_max..=s_max)).collect(),
        alpha_p: (0..np).map(|_| r.random_range(0.0..=1.0)).collect(),
        s_n: (0..negatives).map(|_| r.random_range(-s_max..=s_max)).collect(),
        gamma: r.random_range(0.5..=50.0),
        margin: r.random_range(-0.5..=0.5),
    }
}

// ---------------------------------------------------------------- 1

fn loss_form_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut violations, mut single_violations, mut singles) = (0, 0, 0);
    let mut worst: (f64, usize) = (0.0, 0);
    for _ in 0..1000 {
        let inp = random_inputs(&mut r, 8, 256, 1.0);
        let a = contrastive_loss(&inp).unwrap().value;
        let b = contrastive_loss_margin_on_positives(&inp).unwrap();
        let c = contrastive_loss_margin_on_negatives(&inp).unwrap();
        let gap = (a - b).abs().max((a - c).abs()).max((b - c).abs());
        let bad = gap > 1e-9;
        violations += usize::from(bad);
        if inp.s_p.len() == 1 {
            singles += 1;
            single_violations += usize::from(bad);
        }
        if gap > worst.0 {
            worst = (gap, inp.s_p.len());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs < 1.0,
        format!(
            "{violations}/1000 instances disagree beyond 1e-9 (worst gap {:.3e} with {} positives); \
             single-positive subset: {single_violations}/{singles}; {secs:.3}s",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- 2

/// `|a - n| / max(|a| + |n|, 1e-4)`.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

const H: f64 = 1e-5;

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn random_dist(r: &mut ChaCha8Rng, n: usize) -> Distribution<f64> {
    let logits: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    softmax(&logits).unwrap()
}

fn fd_cross_entropy(r: &mut ChaCha8Rng) -> f64 {
    let n = r.random_range(2..=10);
    let target = random_dist(r, n);
    let logits: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
    let (_, g) = cross_entropy(target.probs(), &logits).unwrap();
    (0..n)
        .map(|i| {
            let mut f = |v: f64| {
                let mut l = logits.clone();
                l[i] = v;
                cross_entropy(target.probs(), &l).unwrap().0
            };
            rel_err(g[i], central(&mut f, logits[i]))
        })
        .fold(0.0, f64::max)
}

fn fd_pseudo_label(r: &mut ChaCha8Rng) -> f64 {
    let (rows, c) = (r.random_range(2..=8), r.random_range(2..=6));
    let pseudo: Vec<Distribution<f64>> = (0..rows)
        .map(|_| {
            let logits: Vec<f64> = (0..c).map(|_| r.random_range(-6.0..6.0)).collect();
            softmax(&logits).unwrap()
        })
        .collect();
    let tau = 0.6;
    let logits: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..c).map(|_| r.random_range(-3.0..3.0)).collect())
        .collect();
    let g = pseudo_label_loss(&pseudo, tau, &logits).unwrap().loss.grads;
    let mut worst: f64 = 0.0;
    for i in 0..rows {
        for j in 0..c {
            let mut f = |v: f64| {
                let mut l = logits.clone();
                l[i][j] = v;
                pseudo_label_loss(&pseudo, tau, &l).unwrap().loss.value
            };
            worst = worst.max(rel_err(g[i][j], central(&mut f, logits[i][j])));
        }
    }
    worst
}

fn fd_contrastive(r: &mut ChaCha8Rng) -> f64 {
    let negatives = r.random_range(1..=64);
    let inp = random_inputs(r, 8, negatives, 0.99);
    let out = contrastive_loss(&inp).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..inp.s_p.len() {
        let mut f = |v: f64| {
            let mut x = inp.clone();
            x.s_p[i] = v;
            contrastive_loss(&x).unwrap().value
        };
        worst = worst.max(rel_err(out.grad_sp[i], central(&mut f, inp.s_p[i])));
    }
    for i in 0..inp.s_n.len() {
        let mut f = |v: f64| {
            let mut x = inp.clone();
            x.s_n[i] = v;
            contrastive_loss(&x).unwrap().value
        };
        worst = worst.max(rel_err(out.grad_sn[i], central(&mut f, inp.s_n[i])));
    }
    worst
}

/// Backward of `Σ c·logits + Σ d·embeddings` against central differences of
/// every parameter, skipping steps that cross a ReLU kink.
fn fd_encoder(r: &mut ChaCha8Rng, seed: u64) -> (f64, usize) {
    let mut p: EncoderParams<f64> = init_params(&[4, 6, 5], 3, 3, seed).unwrap();
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let c: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let d: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let loss = |q: &EncoderParams<f64>| -> (f64, Vec<bool>) {
        let out = forward(q, &xs).unwrap();
        let mut v = 0.0;
        for (row, cr) in out.logits.iter().zip(&c) {
            v += dot(row, cr);
        }
        for (row, dr) in out.embeddings.iter().zip(&d) {
            v += dot(row, dr);
        }
        (v, out.cache.relu_pattern())
    };
    let out = forward(&p, &xs).unwrap();
    let pattern = out.cache.relu_pattern();
    let g = backward(&p, &out.cache, &c, &d).unwrap().flatten();
    let n = p.num_params();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for (k, &gk) in g.iter().enumerate().take(n) {
        let mut plus = p.clone();
        let mut minus = p.clone();
        set_flat(&mut plus, k, H);
        set_flat(&mut minus, k, -H);
        let (lp, pp) = loss(&plus);
        let (lm, pm) = loss(&minus);
        if pp != pattern || pm != pattern {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel_err(gk, (lp - lm) / (2.0 * H)));
    }
    (worst, skipped)
}

fn set_flat(p: &mut EncoderParams<f64>, mut k: usize, delta: f64) {
    for t in p.tensors_mut() {
        if k < t.len() {
            t[k] += delta;
            return;
        }
        k -= t.len();
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let ce = (0..100).map(|_| fd_cross_entropy(&mut r)).fold(0.0, f64::max);
    let pl = (0..100).map(|_| fd_pseudo_label(&mut r)).fold(0.0, f64::max);
    let ctr = (0..100).map(|_| fd_contrastive(&mut r)).fold(0.0, f64::max);
    let (mut enc, mut skipped) = (0.0f64, 0);
    for i in 0..100 {
        let (w, s) = fd_encoder(&mut r, i);
        enc = enc.max(w);
        skipped += s;
    }
    let secs = start.elapsed().as_secs_f64();
    let tol = 1e-5;
    outcome(
        ce <= tol && pl <= tol && ctr <= tol && enc <= tol && secs < 30.0,
        format!(
            "max rel err: cross_entropy {ce:.2e}, pseudo_label {pl:.2e}, contrastive {ctr:.2e}, \
             encoder {enc:.2e} ({skipped} kink-crossing coords skipped); {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_equilibrium() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let negatives = r.random_range(1..=512);
        let mut inp = random_inputs(&mut r, 32, negatives, 1.0);
        let np = r.random_range(1..=32);
        inp.s_p.resize(np, 0.3);
        inp.alpha_p.resize(np, 0.7);
        let (ga, gb) = contrastive_logit_grads(&inp).unwrap();
        let sum: f64 = ga.iter().sum::<f64>() + gb.iter().sum::<f64>();
        worst = worst.max(sum.abs());
    }
    outcome(
        worst <= 1e-10,
        format!("max |Σ∂L/∂a + Σ∂L/∂b| = {worst:.2e} over 1000 instances"),
    )
}

// ---------------------------------------------------------------- 4

fn approximation_bounds() -> Outcome {
    let mut r = rng(4);
    let slack = |v: f64| 1e-12 * (1.0 + v.abs());
    let mut violations: HashMap<&str, usize> = HashMap::new();
    let mut bump = |k: &'static str, bad: bool| {
        if bad {
            *violations.entry(k).or_default() += 1;
        }
    };
    for _ in 0..10_000 {
        let n = r.random_range(1..=64);
        let gamma: f64 = r.random_range(0.5..=50.0);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mn = x.iter().copied().fold(f64::INFINITY, f64::min);
        let l = lse(&x, gamma).unwrap();
        bump(
            "lse",
            l < mx - slack(mx) || l > mx + (n as f64).ln() / gamma + slack(mx),
        );
        let nl = neg_lse(&x, gamma).unwrap();
        bump(
            "neg_lse",
            nl > mn + slack(mn) || nl < mn - (n as f64).ln() / gamma - slack(mn),
        );
        let z: f64 = r.random_range(-40.0..40.0);
        let sp = softplus(z);
        bump(
            "softplus",
            sp < z.max(0.0) - slack(z) || sp > z.max(0.0) + 2f64.ln() + slack(z),
        );

        let negatives = r.random_range(1..=256);
        let inp = random_inputs(&mut r, 8, negatives, 1.0);
        let loss = contrastive_loss(&inp).unwrap().value;
        let max_sn = inp.s_n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_asp = inp
            .s_p
            .iter()
            .zip(&inp.alpha_p)
            .map(|(s, a)| s * a)
            .fold(f64::INFINITY, f64::min);
        let gd = inp.gamma * (max_sn + inp.margin - min_asp);
        let kk = (inp.s_p.len() * inp.s_n.len()) as f64;
        bump("sandwich lower", loss < gd.max(0.0) - slack(gd));
        bump("sandwich upper", loss > (gd + kk.ln()).max(0.0) + 2f64.ln() + slack(gd));
    }
    let total: usize = violations.values().sum();
    outcome(
        total == 0,
        if total == 0 {
            "0 violations of the LSE, -LSE, softplus and sandwich bounds on 10000 instances".to_string()
        } else {
            format!("violations: {violations:?}")
        },
    )
}

// ---------------------------------------------------------------- 5

fn reduction_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        epochs: 5,
        refresh_period: 2,
        ..TrainConfig::default()
    }
}

fn bits(p: &EncoderParams<f64>) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

/// Trajectory of the trainer's query encoder, one snapshot per epoch.
fn trainer_trajectory(cfg: TrainConfig, ds: Dataset) -> Result<Vec<Vec<u64>>> {
    let mut t = Trainer::with_dataset(cfg, ds)?;
    let mut out = vec![bits(t.query())];
    while t.epoch() < t.config().epochs {
        t.train_epoch()?;
        out.push(bits(t.query()));
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq)]
enum Reference {
    Supervised,
    PseudoLabel,
    Moco,
}

/// Plain training loops written directly against the primitives.
fn reference_trajectory(cfg: &TrainConfig, ds: &Dataset, kind: Reference) -> Result<Vec<Vec<u64>>> {
    let shape = cfg.model.shape(ds.dim(), ds.num_classes());
    let mut q: EncoderParams<f64> = init_with_shape(&shape, cfg.seed)?;
    let mut k = q.clone();
    let mut opt = OptimizerState::new(&q, cfg.lr0, cfg.sgd_momentum, cfg.weight_decay)?;
    let mut queue = KeyQueue::new(cfg.queue_size, shape.embed_dim)?;
    if kind == Reference::Moco {
        use rand::seq::SliceRandom;
        use sscl_core::rng::{stream_rng, Stream};
        let mut order: Vec<usize> = (0..ds.unlabeled().len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::QueueFill, 0));
        order.truncate(cfg.queue_size);
        let xs: Vec<Vec<f64>> = order.iter().map(|&i| ds.unlabeled()[i].x.clone()).collect();
        let mut keys = Vec::new();
        for chunk in xs.chunks(256) {
            keys.extend(forward(&k, chunk)?.embeddings);
        }
        queue.push(
            order
                .iter()
                .zip(keys)
                .map(|(&i, embedding)| KeyEntry {
                    embedding,
                    assigned_class: None,
                    source_id: ds.unlabeled()[i].id,
                })
                .collect(),
        )?;
    }
    let bcfg = cfg.batch_config();
    let mut out = vec![bits(&q)];
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        for batch in EpochBatches::new(ds, &bcfg, cfg.seed, epoch as u64)? {
            let lx: Vec<Vec<f64>> = batch.labeled.iter().map(|s| s.x.clone()).collect();
            let ly: Vec<usize> = batch.labeled.iter().map(|s| s.y.unwrap()).collect();
            let lo = forward(&q, &lx)?;
            let sup = sup_loss(&ly, &lo.logits)?;
            let mut grads = backward(&q, &lo.cache, &sup.grads, &[])?;
            let weak: Vec<Vec<f64>> = batch.unlabeled.iter().map(|u| u.weak.clone()).collect();
            let strong: Vec<Vec<f64>> = batch.unlabeled.iter().map(|u| u.strong.clone()).collect();
            match kind {
                Reference::Supervised => {}
                Reference::PseudoLabel => {
                    let targets = forward(&q, &weak)?
                        .logits
                        .iter()
                        .map(|l| softmax(l))
                        .collect::<Result<Vec<_>>>()?;
                    let so = forward(&q, &strong)?;
                    let pl = pseudo_label_loss(&targets, cfg.tau, &so.logits)?;
                    let g = backward(&q, &so.cache, &pl.loss.grads, &[])?;
                    grads.add_scaled(&g, 1.0)?;
                }
                Reference::Moco => {
                    let so = forward(&q, &strong)?;
                    let keys = forward(&k, &weak)?.embeddings;
                    let mut ge = vec![vec![0.0; shape.embed_dim]; so.embeddings.len()];
                    let mut scored = 0usize;
                    for (i, (qe, u)) in so.embeddings.iter().zip(&batch.unlabeled).enumerate() {
                        let negs: Vec<&[f64]> = queue
                            .entries()
                            .filter(|e| e.source_id != u.id)
                            .map(|e| e.embedding.as_slice())
                            .collect();
                        let clamp = |s: f64| s.clamp(-1.0, 1.0);
                        let inp = ContrastiveInputs {
                            s_p: vec![clamp(dot(qe, &keys[i]))],
                            alpha_p: vec![1.0],
                            s_n: negs.iter().map(|n| clamp(dot(qe, n))).collect(),
                            gamma: cfg.gamma,
                            margin: cfg.margin,
                        };
                        let lo = contrastive_loss(&inp)?;
                        for (gj, kj) in ge[i].iter_mut().zip(&keys[i]) {
                            *gj += lo.grad_sp[0] * kj;
                        }
                        for (n, w) in negs.iter().zip(&lo.grad_sn) {
                            for (gj, kj) in ge[i].iter_mut().zip(n.iter()) {
                                *gj += w * kj;
                            }
                        }
                        scored += 1;
                    }
                    let scale = 1.0 / scored as f64;
                    ge.iter_mut().flatten().for_each(|v| *v *= scale);
                    let g = backward(&q, &so.cache, &[], &ge)?;
                    grads.add_scaled(&g, 1.0)?;
                    sgd_step(&mut q, &grads, &mut opt, lr)?;
                    momentum_update(&mut k, &q, cfg.key_momentum)?;
                    queue.push(
                        batch
                            .unlabeled
                            .iter()
                            .zip(keys)
                            .map(|(u, embedding)| KeyEntry {
                                embedding,
                                assigned_class: None,
                                source_id: u.id,
                            })
                            .collect(),
                    )?;
                    continue;
                }
            }
            sgd_step(&mut q, &grads, &mut opt, lr)?;
        }
        out.push(bits(&q));
    }
    Ok(out)
}

fn reduction_fidelity() -> Outcome {
    let base = reduction_config();
    let ds = base.data.build(base.seed).unwrap();
    let cases = [
        (
            "supervised-only",
            TrainConfig {
                lambda_pl: 0.0,
                lambda_ctr: 0.0,
                ..base.clone()
            },
            Reference::Supervised,
        ),
        (
            "pseudo-label-only",
            TrainConfig {
                lambda_ctr: 0.0,
                calibration: false,
                ..base.clone()
            },
            Reference::PseudoLabel,
        ),
        (
            "moco-style",
            TrainConfig {
                lambda_pl: 0.0,
                n_pos: 0,
                calibration: false,
                ..base.clone()
            },
            Reference::Moco,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg, kind) in cases {
        let got = trainer_trajectory(cfg.clone(), ds.clone());
        let want = reference_trajectory(&cfg, &ds, kind);
        let ok = match (&got, &want) {
            (Ok(a), Ok(b)) => a == b && a.first() != a.last(),
            _ => false,
        };
        pass &= ok;
        parts.push(format!("{name} {}", if ok { "bit-identical" } else { "DIVERGED" }));
    }
    outcome(pass, format!("{} over 5 epochs", parts.join(", ")))
}

// ---------------------------------------------------------------- 6 & 7

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn variant(name: &str, seed: u64) -> TrainConfig {
    let base = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    match name {
        "full" => base,
        "pl_only" => TrainConfig {
            lambda_ctr: 0.0,
            calibration: false,
            ..base
        },
        "alpha_off" => TrainConfig {
            self_paced: SelfPaced::Off,
            ..base
        },
        "npos0" => TrainConfig { n_pos: 0, ..base },
        "cal_off" => TrainConfig {
            calibration: false,
            ..base
        },
        "mix_off" => TrainConfig { mixture: false, ..base },
        _ => unreachable!(),
    }
}

fn run_benchmark() -> HashMap<(String, u64), Vec<EpochMetrics>> {
    let names = ["full", "pl_only", "alpha_off", "npos0", "cal_off", "mix_off"];
    let jobs: Vec<(String, u64)> = names
        .iter()
        .flat_map(|n| SEEDS.iter().map(move |&s| (n.to_string(), s)))
        .collect();
    jobs.into_par_iter()
        .map(|(n, s)| {
            let mut t = Trainer::new(variant(&n, s)).expect("benchmark config");
            t.run().expect("benchmark run");
            ((n, s), t.history().to_vec())
        })
        .collect()
}

/// Mean and standard error of paired differences.
fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Pre-build paired differences (mean, standard error) of final top-1,
/// measured on the default benchmark with seeds 0..5.
const FROZEN: [(&str, &str, &str, bool, f64, f64); 4] = [
    (
        "full SsCL > pseudo-label-only",
        "full",
        "pl_only",
        true,
        -0.0232,
        0.0200,
    ),
    ("alpha_p on >= off", "full", "alpha_off", false, -0.0020, 0.0036),
    ("n_pos=3 > n_pos=0", "full", "npos0", true, -0.0038, 0.0068),
    ("calibration on > off", "full", "cal_off", true, -0.0230, 0.0218),
];

fn method_benefit(runs: &HashMap<(String, u64), Vec<EpochMetrics>>) -> Outcome {
    let top1 = |n: &str| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| runs[&(n.to_string(), s)].last().unwrap().top1)
            .collect()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, a, b, strict, frozen_mean, frozen_se) in FROZEN {
        let (ta, tb) = (top1(a), top1(b));
        let (d, se) = paired(&ta, &tb);
        let direction = if strict { d > 0.0 } else { d >= 0.0 };
        let reproduced = d >= frozen_mean - frozen_se;
        pass &= direction && reproduced;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        parts.push(format!(
            "{label}: {:.4} vs {:.4}, diff {d:+.4} (se {se:.4}, frozen {frozen_mean:+.4}±{frozen_se:.4}) {}",
            mean(&ta),
            mean(&tb),
            if direction && reproduced { "ok" } else { "FAIL" }
        ));
    }
    outcome(pass, parts.join("; "))
}

fn mixture_effect(runs: &HashMap<(String, u64), Vec<EpochMetrics>>) -> Outcome {
    let avg = |n: &str| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| {
                let h = &runs[&(n.to_string(), s)];
                let tail: Vec<f64> = h.iter().filter(|m| m.epoch >= 10).map(|m| m.pos_sel_acc).collect();
                tail.iter().sum::<f64>() / tail.len() as f64
            })
            .collect()
    };
    let (on, off) = (avg("full"), avg("mix_off"));
    let (d, se) = paired(&on, &off);
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    outcome(
        d > 0.0,
        format!(
            "positive-selection accuracy over epochs 10-60: on {:.4}, off {:.4}, paired diff {d:+.4} (se {se:.4})",
            m(&on),
            m(&off)
        ),
    )
}

fn mask_trend(runs: &HashMap<(String, u64), Vec<EpochMetrics>>) -> Outcome {
    let (mut first, mut last) = (0.0, 0.0);
    for &s in &SEEDS {
        let h = &runs[&("full".to_string(), s)];
        let q = h.len() / 4;
        first += h[..q].iter().map(|m| m.kept_frac).sum::<f64>() / q as f64;
        last += h[h.len() - q..].iter().map(|m| m.kept_frac).sum::<f64>() / q as f64;
    }
    let n = SEEDS.len() as f64;
    outcome(
        last >= first,
        format!(
            "mean kept fraction first quartile {:.4}, last quartile {:.4}",
            first / n,
            last / n
        ),
    )
}

// ---------------------------------------------------------------- 8

fn csv_bytes(h: &[EpochMetrics]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(h, &mut buf).unwrap();
    buf
}

fn determinism_and_persistence() -> Outcome {
    let cfg = TrainConfig {
        seed: 8,
        epochs: 6,
        refresh_period: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run().unwrap();
        t
    };
    let a = run();
    let b = run();
    let same_csv = csv_bytes(a.history()) == csv_bytes(b.history());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.json");
    let mut c = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..3 {
        c.train_epoch().unwrap();
    }
    c.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    let reloaded_same =
        serde_json::to_string(&resumed.checkpoint()).unwrap() == serde_json::to_string(&c.checkpoint()).unwrap();
    resumed.run().unwrap();
    let final_same =
        serde_json::to_string(&resumed.checkpoint()).unwrap() == serde_json::to_string(&a.checkpoint()).unwrap();
    let resumed_csv = csv_bytes(resumed.history()) == csv_bytes(a.history());
    outcome(
        same_csv && reloaded_same && final_same && resumed_csv,
        format!(
            "repeat run CSV identical: {same_csv}; checkpoint reload exact: {reloaded_same}; \
             resumed run final state identical: {final_same}; resumed CSV identical: {resumed_csv}"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn calibration_algebra() -> Outcome {
    let mut r = rng(9);
    let (mut sum_violations, mut identity_violations) = (0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let c = r.random_range(2..=16);
        let p = random_dist(&mut r, c);
        let s = random_dist(&mut r, c);
        let out = calibrate(&p, &s).unwrap();
        let dev = (out.probs().iter().sum::<f64>() - 1.0).abs();
        worst = worst.max(dev);
        sum_violations += usize::from(dev > 1e-9 || out.probs().iter().any(|v| *v < 0.0));
        let id = calibrate(&p, &Distribution::uniform(c)).unwrap();
        identity_violations += usize::from(id.probs() != p.probs());
    }
    outcome(
        sum_violations == 0 && identity_violations == 0,
        format!(
            "sum-to-one violations {sum_violations} (max |Σ-1| {worst:.2e}), uniform-identity violations \
             {identity_violations}, over 10000 pairs"
        ),
    )
}

fn main() {
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut report = |label: &str, o: Outcome| {
        println!("{label}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((label.to_string(), o));
    };
    report("criterion 1 [loss-form equivalence]", loss_form_equivalence());
    report("criterion 2 [gradient correctness]", gradient_correctness());
    report("criterion 3 [gradient equilibrium]", gradient_equilibrium());
    report("criterion 4 [approximation bounds]", approximation_bounds());
    report("criterion 5 [reduction fidelity]", reduction_fidelity());
    let start = Instant::now();
    let runs = run_benchmark();
    let secs = start.elapsed().as_secs_f64() / runs.len() as f64;
    report("criterion 6 [method benefit]", method_benefit(&runs));
    report("criterion 7 [prototype-mixture effect]", mixture_effect(&runs));
    report(
        "criterion 8 [determinism and persistence]",
        determinism_and_persistence(),
    );
    report("criterion 9 [calibration algebra]", calibration_algebra());
    let extra = mask_trend(&runs);
    println!(
        "supplementary [mask fraction trend]: {} ({}); benchmark {:.1}s per run",
        if extra.pass { "PASS" } else { "FAIL" },
        extra.detail,
        secs
    );
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(l, _)| l.as_str())
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
