//! Seeded property suites behind `sscl verify`.
//!
//! The loss and backward implementations under test are injected through
//! [`Implementations`], which lets the sensitivity of each suite be checked
//! against deliberately broken variants.

// `!(e <= tol)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscl_core::cocalibration::calibrate;
use sscl_core::data::{read_snapshot, write_snapshot};
use sscl_core::encoder::{backward, forward, init_params, EncoderParams, ForwardCache};
use sscl_core::losses::{
    contrastive_loss, contrastive_loss_margin_on_negatives, contrastive_loss_margin_on_positives, cross_entropy,
    pseudo_label_loss, ContrastiveInputs, LossOutput,
};
use sscl_core::math::{dot, lse, neg_lse, softmax, softplus, Distribution};
use sscl_core::trainer::{write_metrics_csv, Checkpoint, DataConfig, ModelConfig, TrainConfig};
use sscl_core::{Result, Trainer};

type Contrastive = fn(&ContrastiveInputs<f64>) -> Result<LossOutput<f64>>;
type CrossEntropy = fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>)>;
type Backward = fn(&EncoderParams<f64>, &ForwardCache<f64>, &[Vec<f64>], &[Vec<f64>]) -> Result<EncoderParams<f64>>;

#[derive(Clone, Copy)]
pub struct Implementations {
    pub contrastive: Contrastive,
    pub cross_entropy: CrossEntropy,
    pub backward: Backward,
}

impl Default for Implementations {
    fn default() -> Self {
        Self {
            contrastive: contrastive_loss,
            cross_entropy,
            backward,
        }
    }
}

pub struct SuiteResult {
    pub pass: bool,
    pub detail: String,
    /// Inputs of the first failing case.
    pub counterexample: Option<String>,
}

impl SuiteResult {
    fn ok(detail: impl Into<String>) -> Self {
        Self {
            pass: true,
            detail: detail.into(),
            counterexample: None,
        }
    }

    fn fail(detail: impl Into<String>, counterexample: impl Into<String>) -> Self {
        Self {
            pass: false,
            detail: detail.into(),
            counterexample: Some(counterexample.into()),
        }
    }
}

pub struct Suite {
    pub name: &'static str,
    pub run: fn(&Implementations) -> SuiteResult,
}

pub fn suites() -> Vec<Suite> {
    vec![
        Suite {
            name: "loss-form relations",
            run: loss_forms,
        },
        Suite {
            name: "finite-difference gradients",
            run: finite_differences,
        },
        Suite {
            name: "gradient equilibrium",
            run: equilibrium,
        },
        Suite {
            name: "approximation bounds",
            run: bounds,
        },
        Suite {
            name: "calibration algebra",
            run: calibration,
        },
        Suite {
            name: "dataset snapshot round-trip",
            run: snapshot,
        },
        Suite {
            name: "training determinism",
            run: determinism,
        },
        Suite {
            name: "checkpoint resume",
            run: checkpoint_resume,
        },
    ]
}

/// Runs every suite, printing one line each. True iff all pass.
pub fn run_verify<W: Write>(impls: &Implementations, out: &mut W) -> std::io::Result<bool> {
    let mut all = true;
    for s in suites() {
        let r = (s.run)(impls);
        all &= r.pass;
        writeln!(
            out,
            "{:<30} {}  {}",
            s.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        )?;
        if let Some(c) = r.counterexample {
            writeln!(out, "    counterexample: {c}")?;
        }
    }
    writeln!(
        out,
        "{}",
        if all {
            "all suites passed"
        } else {
            "verification FAILED"
        }
    )?;
    Ok(all)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn contrastive_case(
    r: &mut ChaCha8Rng,
    max_pos: usize,
    max_neg: usize,
    s_max: f64,
    alpha_min: f64,
) -> ContrastiveInputs<f64> {
    let np = r.random_range(1..=max_pos);
    let nn = r.random_range(1..=max_neg);
    ContrastiveInputs {
        s_p: (0..np).map(|_| r.random_range(-s_max..=s_max)).collect(),
        alpha_p: (0..np).map(|_| r.random_range(alpha_min..=1.0)).collect(),
        s_n: (0..nn).map(|_| r.random_range(-s_max..=s_max)).collect(),
        gamma: r.random_range(0.5..=50.0),
        margin: r.random_range(-0.5..=0.5),
    }
}

fn show(inp: &ContrastiveInputs<f64>) -> String {
    format!(
        "gamma={} margin={} s_p={:?} alpha_p={:?} s_n={:?}",
        inp.gamma, inp.margin, inp.s_p, inp.alpha_p, inp.s_n
    )
}

/// The two ratio forms coincide; the softplus form equals them with one
/// positive and is never below them.
fn loss_forms(im: &Implementations) -> SuiteResult {
    let mut r = rng(11);
    for _ in 0..500 {
        let inp = contrastive_case(&mut r, 8, 256, 1.0, 0.0);
        let (Ok(a), Ok(b), Ok(c)) = (
            (im.contrastive)(&inp),
            contrastive_loss_margin_on_positives(&inp),
            contrastive_loss_margin_on_negatives(&inp),
        ) else {
            return SuiteResult::fail("evaluation error", show(&inp));
        };
        let a = a.value;
        let tol = 1e-9 * (1.0 + b.abs());
        let single = inp.s_p.len() == 1;
        if (b - c).abs() > tol || a < b - tol || (single && (a - b).abs() > tol) {
            return SuiteResult::fail(format!("forms {a} / {b} / {c}"), show(&inp));
        }
    }
    SuiteResult::ok("500 cases")
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

const H: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

fn fd(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn finite_differences(im: &Implementations) -> SuiteResult {
    let mut r = rng(12);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..=8);
        let t: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let target = softmax(&t).expect("finite logits");
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        let Ok((_, g)) = (im.cross_entropy)(target.probs(), &z) else {
            return SuiteResult::fail("cross entropy errored", format!("{z:?}"));
        };
        for i in 0..n {
            let mut f = |v: f64| {
                let mut zz = z.clone();
                zz[i] = v;
                (im.cross_entropy)(target.probs(), &zz).map(|x| x.0).unwrap_or(f64::NAN)
            };
            let e = rel_err(g[i], fd(&mut f, z[i]));
            worst = worst.max(e);
            if !(e <= FD_TOL) {
                return SuiteResult::fail(
                    format!("cross entropy rel err {e:.2e}"),
                    format!("target={:?} logits={z:?} coord {i}", target.probs()),
                );
            }
        }
    }
    for _ in 0..30 {
        let rows = r.random_range(2..=5);
        let pseudo: Vec<Distribution<f64>> = (0..rows)
            .map(|_| softmax(&(0..3).map(|_| r.random_range(-6.0..6.0)).collect::<Vec<f64>>()).expect("finite"))
            .collect();
        let z: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..3).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let g = pseudo_label_loss(&pseudo, 0.6, &z).expect("valid").loss.grads;
        for i in 0..rows {
            for j in 0..3 {
                let mut f = |v: f64| {
                    let mut zz = z.clone();
                    zz[i][j] = v;
                    pseudo_label_loss(&pseudo, 0.6, &zz).expect("valid").loss.value
                };
                let e = rel_err(g[i][j], fd(&mut f, z[i][j]));
                worst = worst.max(e);
                if !(e <= FD_TOL) {
                    return SuiteResult::fail(
                        format!("pseudo-label rel err {e:.2e}"),
                        format!("logits={z:?} coord ({i},{j})"),
                    );
                }
            }
        }
    }
    for _ in 0..50 {
        let inp = contrastive_case(&mut r, 8, 32, 0.99, 0.0);
        let Ok(out) = (im.contrastive)(&inp) else {
            return SuiteResult::fail("contrastive errored", show(&inp));
        };
        let value = |x: &ContrastiveInputs<f64>| (im.contrastive)(x).map(|o| o.value).unwrap_or(f64::NAN);
        for (is_pos, len) in [(true, inp.s_p.len()), (false, inp.s_n.len())] {
            for i in 0..len {
                let mut f = |v: f64| {
                    let mut x = inp.clone();
                    if is_pos {
                        x.s_p[i] = v
                    } else {
                        x.s_n[i] = v
                    }
                    value(&x)
                };
                let (g, x0) = if is_pos {
                    (out.grad_sp[i], inp.s_p[i])
                } else {
                    (out.grad_sn[i], inp.s_n[i])
                };
                let e = rel_err(g, fd(&mut f, x0));
                worst = worst.max(e);
                if !(e <= FD_TOL) {
                    let which = if is_pos { "s_p" } else { "s_n" };
                    return SuiteResult::fail(format!("contrastive rel err {e:.2e} at {which}[{i}]"), show(&inp));
                }
            }
        }
    }
    for seed in 0..20 {
        if let Err((e, what)) = fd_encoder(im, &mut r, seed) {
            return SuiteResult::fail(format!("encoder backward rel err {e:.2e}"), what);
        }
    }
    SuiteResult::ok(format!("max rel err {worst:.2e}"))
}

fn fd_encoder(im: &Implementations, r: &mut ChaCha8Rng, seed: u64) -> std::result::Result<(), (f64, String)> {
    let mut p: EncoderParams<f64> = init_params(&[3, 5, 4], 3, 3, seed).expect("valid shape");
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    let xs: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let c: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let d: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let loss = |q: &EncoderParams<f64>| {
        let out = forward(q, &xs).expect("finite forward");
        let v: f64 = out.logits.iter().zip(&c).map(|(a, b)| dot(a, b)).sum::<f64>()
            + out.embeddings.iter().zip(&d).map(|(a, b)| dot(a, b)).sum::<f64>();
        (v, out.cache.relu_pattern())
    };
    let out = forward(&p, &xs).expect("finite forward");
    let pattern = out.cache.relu_pattern();
    let g = (im.backward)(&p, &out.cache, &c, &d)
        .map_err(|e| (f64::NAN, e.to_string()))?
        .flatten();
    for (k, &gk) in g.iter().enumerate() {
        let (mut plus, mut minus) = (p.clone(), p.clone());
        nudge(&mut plus, k, H);
        nudge(&mut minus, k, -H);
        let ((lp, pp), (lm, pm)) = (loss(&plus), loss(&minus));
        if pp != pattern || pm != pattern {
            continue;
        }
        let e = rel_err(gk, (lp - lm) / (2.0 * H));
        if !(e <= FD_TOL) {
            return Err((e, format!("init seed {seed}, parameter {k}, inputs {xs:?}")));
        }
    }
    Ok(())
}

fn nudge(p: &mut EncoderParams<f64>, mut k: usize, delta: f64) {
    for t in p.tensors_mut() {
        if k < t.len() {
            t[k] += delta;
            return;
        }
        k -= t.len();
    }
}

/// Logit gradients recovered from similarity gradients must cancel.
fn equilibrium(im: &Implementations) -> SuiteResult {
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let inp = contrastive_case(&mut r, 16, 256, 1.0, 0.05);
        let Ok(out) = (im.contrastive)(&inp) else {
            return SuiteResult::fail("contrastive errored", show(&inp));
        };
        let pos: f64 = out
            .grad_sp
            .iter()
            .zip(&inp.alpha_p)
            .map(|(g, a)| g / (inp.gamma * a))
            .sum();
        let neg: f64 = out.grad_sn.iter().map(|g| g / inp.gamma).sum();
        let gap = (pos + neg).abs();
        worst = worst.max(gap);
        if gap > 1e-10 {
            return SuiteResult::fail(format!("imbalance {gap:.2e}"), show(&inp));
        }
    }
    SuiteResult::ok(format!("500 cases, max imbalance {worst:.1e}"))
}

fn bounds(im: &Implementations) -> SuiteResult {
    let mut r = rng(14);
    let slack = |v: f64| 1e-12 * (1.0 + v.abs());
    for _ in 0..2000 {
        let n = r.random_range(1..=32);
        let g: f64 = r.random_range(0.5..=50.0);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let (mx, mn) = (sscl_core::math::max(&x), sscl_core::math::min(&x));
        let (l, nl) = (lse(&x, g).expect("nonempty"), neg_lse(&x, g).expect("nonempty"));
        let ln = (n as f64).ln() / g;
        if l < mx - slack(mx) || l > mx + ln + slack(mx) || nl > mn + slack(mn) || nl < mn - ln - slack(mn) {
            return SuiteResult::fail("LSE bound", format!("gamma={g} x={x:?}"));
        }
        let z: f64 = r.random_range(-40.0..40.0);
        let sp = softplus(z);
        if sp < z.max(0.0) - slack(z) || sp > z.max(0.0) + 2f64.ln() + slack(z) {
            return SuiteResult::fail("softplus bound", format!("z={z}"));
        }
        let inp = contrastive_case(&mut r, 8, 128, 1.0, 0.0);
        let Ok(out) = (im.contrastive)(&inp) else {
            return SuiteResult::fail("contrastive errored", show(&inp));
        };
        let asp: Vec<f64> = inp.s_p.iter().zip(&inp.alpha_p).map(|(s, a)| s * a).collect();
        let gd = inp.gamma * (sscl_core::math::max(&inp.s_n) + inp.margin - sscl_core::math::min(&asp));
        let kk = ((inp.s_p.len() * inp.s_n.len()) as f64).ln();
        if out.value < gd.max(0.0) - slack(gd) || out.value > (gd + kk).max(0.0) + 2f64.ln() + slack(gd) {
            return SuiteResult::fail(format!("sandwich bound, loss {}", out.value), show(&inp));
        }
    }
    SuiteResult::ok("2000 cases")
}

fn calibration(_: &Implementations) -> SuiteResult {
    let mut r = rng(15);
    let dist = |r: &mut ChaCha8Rng, n: usize| {
        softmax(&(0..n).map(|_| r.random_range(-4.0..4.0)).collect::<Vec<f64>>()).expect("finite")
    };
    for _ in 0..2000 {
        let c = r.random_range(2..=12);
        let (p, s) = (dist(&mut r, c), dist(&mut r, c));
        let Ok(out) = calibrate(&p, &s) else {
            return SuiteResult::fail("calibration errored", format!("p={:?} s={:?}", p.probs(), s.probs()));
        };
        let total: f64 = out.probs().iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return SuiteResult::fail(format!("sum {total}"), format!("p={:?} s={:?}", p.probs(), s.probs()));
        }
        match calibrate(&p, &Distribution::uniform(c)) {
            Ok(id) if id.probs() == p.probs() => {}
            _ => return SuiteResult::fail("uniform is not the identity", format!("p={:?}", p.probs())),
        }
    }
    SuiteResult::ok("2000 pairs")
}

fn tiny() -> TrainConfig {
    TrainConfig {
        seed: 3,
        epochs: 3,
        batch_size: 4,
        mu: 2,
        queue_size: 32,
        refresh_period: 2,
        t_window: 8,
        data: DataConfig {
            classes: 3,
            dim: 4,
            samples_per_class: 60,
            labels_per_class: 4,
            ..DataConfig::default()
        },
        model: ModelConfig {
            hidden: vec![12],
            feature_dim: 8,
            embed_dim: 6,
        },
        ..TrainConfig::default()
    }
}

fn snapshot(_: &Implementations) -> SuiteResult {
    let ds = match tiny().data.build(5) {
        Ok(d) => d,
        Err(e) => return SuiteResult::fail(e.to_string(), "seed 5"),
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    let ok = write_snapshot(&ds, &mut a).is_ok()
        && read_snapshot(a.as_slice())
            .and_then(|back| write_snapshot(&back, &mut b))
            .is_ok()
        && a == b;
    if ok {
        SuiteResult::ok(format!("{} bytes", a.len()))
    } else {
        SuiteResult::fail("snapshot differs after reload", "tiny dataset, seed 5")
    }
}

fn csv_of(t: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(t.history(), &mut buf).expect("in-memory write");
    buf
}

fn determinism(_: &Implementations) -> SuiteResult {
    let run = || -> Result<Vec<u8>> {
        let mut t = Trainer::new(tiny())?;
        t.run()?;
        Ok(csv_of(&t))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) if a == b => SuiteResult::ok("identical metrics CSV on rerun"),
        (Err(e), _) | (_, Err(e)) => SuiteResult::fail(e.to_string(), "tiny config"),
        _ => SuiteResult::fail("metrics differ between identical runs", "tiny config"),
    }
}

fn checkpoint_resume(_: &Implementations) -> SuiteResult {
    let go = || -> Result<bool> {
        let mut full = Trainer::new(tiny())?;
        full.run()?;
        let mut part = Trainer::new(tiny())?;
        part.train_epoch()?;
        let text = serde_json::to_string(&part.checkpoint())?;
        let ck: Checkpoint<f64> = serde_json::from_str(&text)?;
        let exact = serde_json::to_string(&ck)? == text;
        let mut resumed = Trainer::from_checkpoint(ck, part.dataset().clone())?;
        resumed.run()?;
        Ok(exact
            && serde_json::to_string(&resumed.checkpoint())? == serde_json::to_string(&full.checkpoint())?
            && csv_of(&resumed) == csv_of(&full))
    };
    match go() {
        Ok(true) => SuiteResult::ok("resumed run matches uninterrupted run"),
        Ok(false) => SuiteResult::fail("resumed run diverged", "tiny config, checkpoint after epoch 1"),
        Err(e) => SuiteResult::fail(e.to_string(), "tiny config"),
    }
}
