//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use crex_core::config::{Ablation, Component, EncoderConfig, RunConfig};
use crex_core::data::{RelationId, RelationVocab, Sample, Span, SyntheticSpec, Task, TaskSequence};
use crex_core::encoder::TokenVocab;
use crex_core::eval::{
    analogous_subset_metrics, combine, forgetting_report, sudden_drop_table, AccuracyMatrix, DropBin, Predictor,
    RunMetadata, SimilarityBin, SubsetRule, Tally, TaskEvaluation,
};
use crex_core::experiment::{resume, run_experiment, ExperimentSpec, RunOptions, RunOutcome, SeedResult};
use crex_core::memory::{augment, select_typical, Exemplar, MemoryStore, PrototypeStore};
use crex_core::model::{BoundModel, Frozen, Model, Prototypes};
use crex_core::tape::{Graph, Var};
use crex_core::tensor::Tensor;
use crex_core::training::losses::{self, distillation, focal_weights, info_nce_triplet, new_task_loss, replay_loss};
use crex_core::training::{Learner, LossBreakdown, LossParams, Phase, ReplayInputs, StepRecord, TeacherOutput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("formula oracles", formula_oracles),
        ("memory algebra", memory_algebra),
        ("prototype endpoints", prototype_endpoints),
        ("forgetting mitigation", forgetting_mitigation),
        ("analogous-relation benefit", analogous_benefit),
        ("ablation switch fidelity", ablation_fidelity),
        ("determinism", determinism),
        ("evaluation analytics", evaluation_analytics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n} {name}: FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// toy fixtures

fn toy_sample(id: &str, words: [&str; 5], r: u32) -> Sample {
    let tokens = words.iter().map(|w| w.to_string()).collect();
    Sample::new(id, tokens, Span::new(0, 1), Span::new(3, 5), RelationId(r)).unwrap()
}

fn toy_samples() -> Vec<Sample> {
    vec![
        toy_sample("a", ["ada", "founded", "the", "acme", "corp"], 0),
        toy_sample("b", ["bob", "joined", "the", "blue", "team"], 1),
        toy_sample("c", ["cy", "born", "in", "old", "town"], 2),
        toy_sample("d", ["dee", "founded", "a", "big", "lab"], 0),
    ]
}

fn toy_vocab(samples: &[Sample]) -> TokenVocab {
    TokenVocab::build(samples.iter().flat_map(|s| s.tokens.clone()))
}

fn toy_encoder_config(d: usize) -> EncoderConfig {
    EncoderConfig {
        hidden_dim: d,
        projection_dim: d,
        ..EncoderConfig::default()
    }
}

/// Student over three relations, a teacher over the first `old` of them, and prototypes.
struct Toy {
    student: Model,
    teacher: Model,
    old: Vec<RelationId>,
    prototypes: Prototypes,
    samples: Vec<Sample>,
}

fn toy(old: usize, seed: u64) -> Toy {
    let samples = toy_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(toy_vocab(&samples), &toy_encoder_config(8), &mut rng).unwrap();
    let all: Vec<RelationId> = (0..3).map(RelationId).collect();
    let old_rel = all[..old].to_vec();
    model.classifier.expand(&old_rel, &mut rng).unwrap();
    let teacher = model.clone();
    model.classifier.expand(&all[old..], &mut rng).unwrap();
    let mut student = model;
    // move the student away from the teacher so distillation is not at its optimum
    for t in student.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    let prototypes = all
        .iter()
        .map(|r| (*r, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    Toy {
        student,
        teacher,
        old: old_rel,
        prototypes,
        samples,
    }
}

fn teacher_outputs(toy: &Toy) -> HashMap<String, TeacherOutput> {
    let old_protos: Prototypes = toy.old.iter().map(|r| (*r, toy.prototypes[r].clone())).collect();
    let frozen = Frozen::new(toy.teacher.clone(), old_protos).unwrap();
    toy.samples
        .iter()
        .map(|s| {
            let out = frozen.teacher(s).unwrap();
            (
                s.id.clone(),
                TeacherOutput {
                    linear: out.linear,
                    contrastive: out.contrastive.unwrap(),
                },
            )
        })
        .collect()
}

fn toy_params(gamma: f64) -> LossParams {
    let mut c = RunConfig::fewrel();
    c.gamma = gamma;
    LossParams::from_config(&c)
}

// ---------------------------------------------------------------------------
// 1. gradients

const EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

type LossFn<'a> = dyn Fn(&mut Graph, &Model, &BoundModel) -> Var + 'a;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest per-tensor relative error between the backward pass of `analytic`
/// and central differences of `numeric`.
fn gradient_error(model: &Model, analytic: &LossFn<'_>, numeric: &LossFn<'_>) -> f64 {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = analytic(&mut g, model, &bound);
    let grads = g.backward(loss);
    let exact: Vec<Tensor> = bound.vars().iter().map(|v| grads.get(*v)).collect();
    let value = |m: &Model| {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let l = numeric(&mut g, m, &b);
        g.scalar(l)
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (t, a) in exact.iter().enumerate() {
        let mut fd = vec![0.0; a.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = probe.tensors_mut()[t].data()[j];
            probe.tensors_mut()[t].data_mut()[j] = orig + EPS;
            let up = value(&probe);
            probe.tensors_mut()[t].data_mut()[j] = orig - EPS;
            let down = value(&probe);
            probe.tensors_mut()[t].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * EPS);
        }
        let diff: Vec<f64> = a.data().iter().zip(&fd).map(|(x, y)| x - y).collect();
        let scale = l2(a.data()).max(l2(&fd));
        let err = if scale < 1e-9 { l2(&diff) } else { l2(&diff) / scale };
        worst = worst.max(err);
    }
    worst
}

/// Focal-distillation terms with the weights frozen at the current parameters.
fn frozen_fkd_targets(toy: &Toy, params: &LossParams) -> Vec<(Vec<f64>, Vec<f64>)> {
    let teacher = teacher_outputs(toy);
    let olds: Vec<&[f64]> = toy.old.iter().map(|r| toy.prototypes[r].as_slice()).collect();
    toy.samples
        .iter()
        .map(|s| {
            let h = toy.student.encoder.encode(s).unwrap();
            let y = toy.student.classifier.row_of(s.relation).unwrap();
            let p_true = toy.student.classifier.probs(&h).unwrap()[y];
            let w = focal_weights(&h, &olds, p_true, params.tau2, params.gamma).unwrap();
            let t = &teacher[&s.id];
            (
                w.iter().zip(&t.linear).map(|(w, p)| w * p).collect(),
                w.iter().zip(&t.contrastive).map(|(w, p)| w * p).collect(),
            )
        })
        .collect()
}

fn fkd_surrogate(
    g: &mut Graph,
    m: &Model,
    b: &BoundModel,
    toy: &Toy,
    targets: &[(Vec<f64>, Vec<f64>)],
    weights: (f64, f64),
) -> Var {
    let protos = losses::projected_prototypes(g, m, b, &toy.prototypes).unwrap();
    let mut lin = Vec::new();
    let mut con = Vec::new();
    for (s, (a_lin, a_con)) in toy.samples.iter().zip(targets) {
        let h = m.encoder.encode_in(g, &b.encoder, s).unwrap();
        let logits = g.matvec(b.classifier, h);
        let lp = g.log_softmax(logits);
        lin.push(distillation(g, lp, a_lin));
        let z = m.projector.project_in(g, &b.projector, h).unwrap();
        let sims: Vec<Var> = protos.iter().map(|p| g.dot(z, *p)).collect();
        let sims = g.concat(&sims);
        let lp = g.log_softmax(sims);
        con.push(distillation(g, lp, a_con));
    }
    let c = g.mean(&con);
    let l = g.mean(&lin);
    let c = g.scale(c, weights.0);
    let l = g.scale(l, weights.1);
    g.add(c, l)
}

fn gradients() -> Outcome {
    let mut report = Vec::new();
    let mut check = |label: &str, err: f64| -> Result<(), String> {
        report.push(format!("{label} {err:.1e}"));
        ensure!(err < GRAD_TOL, "{label}: relative error {err:.3e}");
        Ok(())
    };

    let toy2 = toy(2, 11);
    let batch: Vec<&Sample> = toy2.samples.iter().collect();
    let base = toy_params(1.25);

    // new-task cross-entropy
    let f = |g: &mut Graph, m: &Model, b: &BoundModel| new_task_loss(g, m, b, &batch, &base, None).unwrap().0;
    check("new-task", gradient_error(&toy2.student, &f, &f))?;

    let teacher = teacher_outputs(&toy2);
    let replay_with = |params: LossParams, toy: &Toy, teacher: &HashMap<String, TeacherOutput>| {
        let protos = toy.prototypes.clone();
        let old = toy.old.clone();
        let teacher = teacher.clone();
        let batch: Vec<Sample> = toy.samples.clone();
        move |g: &mut Graph, m: &Model, b: &BoundModel| {
            let refs: Vec<&Sample> = batch.iter().collect();
            let inputs = ReplayInputs {
                params,
                prototypes: &protos,
                old_relations: &old,
                teacher: &teacher,
            };
            replay_loss(g, m, b, &refs, &inputs).unwrap().0
        }
    };

    // contrastive InfoNCE + triplet alone
    let mut p = base;
    p.linear = false;
    p.fkd = false;
    let f = replay_with(p, &toy2, &teacher);
    check("contrastive", gradient_error(&toy2.student, &f, &f))?;

    // linear classification alone
    let mut p = base;
    p.contrastive = false;
    p.fkd = false;
    let f = replay_with(p, &toy2, &teacher);
    check("linear", gradient_error(&toy2.student, &f, &f))?;

    // focal distillation with weights held constant
    let targets = frozen_fkd_targets(&toy2, &base);
    let f = |g: &mut Graph, m: &Model, b: &BoundModel| fkd_surrogate(g, m, b, &toy2, &targets, (1.0, 1.0));
    check("fkd", gradient_error(&toy2.student, &f, &f))?;

    // full replay objective; weights are constant when there is one old relation and gamma = 0
    let toy1 = toy(1, 12);
    let teacher1 = teacher_outputs(&toy1);
    let f = replay_with(toy_params(0.0), &toy1, &teacher1);
    check("replay", gradient_error(&toy1.student, &f, &f))?;

    // general replay: backward pass must equal the detached-weight surrogate
    let full = replay_with(base, &toy2, &teacher);
    let mut cls_only = base;
    cls_only.fkd = false;
    let cls = replay_with(cls_only, &toy2, &teacher);
    let surrogate = |g: &mut Graph, m: &Model, b: &BoundModel| {
        let c = cls(g, m, b);
        let d = fkd_surrogate(g, m, b, &toy2, &targets, (base.lambda1, base.lambda2));
        g.add(c, d)
    };
    let value = |f: &LossFn<'_>| {
        let mut g = Graph::new();
        let b = toy2.student.bind(&mut g);
        let l = f(&mut g, &toy2.student, &b);
        g.scalar(l)
    };
    let (v_full, v_sur) = (value(&full), value(&surrogate));
    ensure!((v_full - v_sur).abs() < 1e-12, "replay value {v_full} differs from surrogate {v_sur}");
    check("replay-focal", gradient_error(&toy2.student, &full, &surrogate))?;

    Ok(report.join(", "))
}

// ---------------------------------------------------------------------------
// 2. formula oracles

const ORACLE_TOL: f64 = 1e-6;

fn oracle_log_softmax(x: &[f64]) -> Vec<f64> {
    let z: f64 = x.iter().map(|v| v.exp()).sum::<f64>().ln();
    x.iter().map(|v| v - z).collect()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn oracle_info_nce(sims: &[f64], y: usize, tau: f64, mu: f64, omega: f64) -> f64 {
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let ce = -oracle_log_softmax(&scaled)[y];
    let hardest = sims
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let triplet = if hardest.is_finite() { (omega - sims[y] + hardest).max(0.0) } else { 0.0 };
    ce + mu * triplet
}

fn oracle_focal(h: &[f64], protos: &[Vec<f64>], p_true: f64, tau2: f64, gamma: f64) -> Vec<f64> {
    let e: Vec<f64> = protos.iter().map(|p| (oracle_cos(h, p) / tau2).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z * (1.0 - p_true).powf(gamma)).collect()
}

fn formula_oracles() -> Outcome {
    // InfoNCE + triplet
    let cases: [(&[f64], usize); 4] = [
        (&[0.3, 0.8, -0.2, 0.75], 1),
        (&[0.3, 0.8, -0.2, 0.75], 0),
        (&[0.9, -0.4, 0.1], 0),
        (&[0.42], 0),
    ];
    for (sims, y) in cases {
        for (tau, mu, omega) in [(0.1, 0.5, 0.1), (0.1, 0.8, 0.15)] {
            let mut g = Graph::new();
            let s = g.constant_vec(sims);
            let l = info_nce_triplet(&mut g, s, y, tau, mu, omega);
            let got = g.scalar(l);
            let want = oracle_info_nce(sims, y, tau, mu, omega);
            ensure!((got - want).abs() < ORACLE_TOL, "info-nce {sims:?} y={y}: {got} vs {want}");
        }
    }
    // with the hinge active: 0.1 - 0.3 + 0.8 = 0.6 on top of the cross-entropy
    let ce = -oracle_log_softmax(&[3.0, 8.0, -2.0, 7.5])[0];
    ensure!(
        (oracle_info_nce(&[0.3, 0.8, -0.2, 0.75], 0, 0.1, 0.5, 0.1) - (ce + 0.3)).abs() < 1e-12,
        "info-nce oracle self-check"
    );

    // focal weights
    let protos = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.6, 0.8, 0.0]];
    let refs: Vec<&[f64]> = protos.iter().map(Vec::as_slice).collect();
    for (h, p_true, tau2, gamma) in [
        (vec![1.0, 0.0, 0.0], 0.6, 0.5, 1.25),
        (vec![0.2, -0.7, 0.4], 0.1, 0.5, 2.0),
        (vec![3.0, 4.0, 0.0], 0.99, 0.5, 1.25),
    ] {
        let got = focal_weights(&h, &refs, p_true, tau2, gamma).map_err(|e| e.to_string())?;
        let want = oracle_focal(&h, &protos, p_true, tau2, gamma);
        for (a, b) in got.iter().zip(&want) {
            ensure!((a - b).abs() < ORACLE_TOL, "focal weights {got:?} vs {want:?}");
        }
    }
    // hand value: cosines (1, 0, 0.6), softmax over (2, 0, 1.2), focal factor 0.4^1.25
    let z = 2f64.exp() + 1.0 + 1.2f64.exp();
    let hand = [2f64.exp() / z, 1.0 / z, 1.2f64.exp() / z].map(|s| s * 0.4f64.powf(1.25));
    let got = focal_weights(&[1.0, 0.0, 0.0], &refs, 0.6, 0.5, 1.25).unwrap();
    for (a, b) in got.iter().zip(&hand) {
        ensure!((a - b).abs() < 1e-12, "focal hand case {got:?} vs {hand:?}");
    }

    // distillation on constant logits, targets padded with zeros
    let logits = [0.5, -1.0, 2.0, 0.1];
    let a = [0.3, 0.05];
    let mut g = Graph::new();
    let lv = g.constant_vec(&logits);
    let lp = g.log_softmax(lv);
    let d = distillation(&mut g, lp, &a);
    let logp = oracle_log_softmax(&logits);
    let want = -(a[0] * logp[0] + a[1] * logp[1]);
    ensure!((g.scalar(d) - want).abs() < ORACLE_TOL, "distillation {} vs {want}", g.scalar(d));

    // focal distillation inside the replay objective
    let toy = toy(2, 21);
    let params = toy_params(1.25);
    let teacher = teacher_outputs(&toy);
    let batch: Vec<&Sample> = toy.samples.iter().collect();
    let mut g = Graph::new();
    let bound = toy.student.bind(&mut g);
    let inputs = ReplayInputs {
        params,
        prototypes: &toy.prototypes,
        old_relations: &toy.old,
        teacher: &teacher,
    };
    let (_, br) = replay_loss(&mut g, &toy.student, &bound, &batch, &inputs).map_err(|e| e.to_string())?;
    let (want_c, want_l, want_ccls, want_lcls) = replay_oracle(&toy, &teacher, &params);
    for (name, got, want) in [
        ("c_fkd", br.c_fkd, want_c),
        ("l_fkd", br.l_fkd, want_l),
        ("c_cls", br.c_cls, want_ccls),
        ("l_cls", br.l_cls, want_lcls),
    ] {
        ensure!((got - want).abs() < ORACLE_TOL, "{name}: {got} vs oracle {want}");
    }
    let total = want_ccls + want_lcls + params.lambda1 * want_c + params.lambda2 * want_l;
    ensure!((br.replay - total).abs() < ORACLE_TOL, "replay total {} vs {total}", br.replay);

    // combined prediction
    let c = [0.6, 0.3, 0.1];
    let l = [0.1, 0.5, 0.4];
    for alpha in [0.0, 0.3, 0.5, 0.6, 1.0] {
        let got = combine(&c, &l, alpha);
        for j in 0..3 {
            let want = (1.0 - alpha) * c[j] + alpha * l[j];
            ensure!((got[j] - want).abs() < 1e-12, "combine alpha={alpha}");
        }
    }
    let predictor_alpha = 0.6;
    let predictor = Predictor::new(&toy.student, &toy.prototypes, predictor_alpha).map_err(|e| e.to_string())?;
    let projected: Vec<Vec<f64>> = toy
        .student
        .classifier
        .relations
        .iter()
        .map(|r| toy.student.projector.project(&toy.prototypes[r]).unwrap())
        .collect();
    for s in &toy.samples {
        let h = toy.student.encoder.encode(s).unwrap();
        let w = &toy.student.classifier.weights;
        let logits: Vec<f64> = (0..w.rows()).map(|i| w.row(i).iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
        let p_l: Vec<f64> = oracle_log_softmax(&logits).iter().map(|v| v.exp()).collect();
        let z = toy.student.projector.project(&h).unwrap();
        let sims: Vec<f64> = projected.iter().map(|p| p.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        let p_c: Vec<f64> = oracle_log_softmax(&sims).iter().map(|v| v.exp()).collect();
        let want: Vec<f64> = p_c.iter().zip(&p_l).map(|(c, l)| (1.0 - predictor_alpha) * c + predictor_alpha * l).collect();
        let got = predictor.scores(s).map_err(|e| e.to_string())?;
        for (a, b) in got.iter().zip(&want) {
            ensure!((a - b).abs() < ORACLE_TOL, "prediction scores {got:?} vs {want:?}");
        }
        let best = (0..want.len()).max_by(|&i, &j| want[i].total_cmp(&want[j]).then(j.cmp(&i))).unwrap();
        let predicted = predictor.predict(s).map_err(|e| e.to_string())?;
        ensure!(predicted == toy.student.classifier.relations[best], "prediction for {}", s.id);
    }
    Ok("info-nce, focal weights, distillation, replay terms and combined prediction".into())
}

/// Replay components evaluated directly from model outputs.
fn replay_oracle(toy: &Toy, teacher: &HashMap<String, TeacherOutput>, p: &LossParams) -> (f64, f64, f64, f64) {
    let m = &toy.student;
    let projected = m.project_prototypes(&toy.prototypes).unwrap();
    let old_protos: Vec<Vec<f64>> = toy.old.iter().map(|r| toy.prototypes[r].clone()).collect();
    let (mut c_fkd, mut l_fkd, mut c_cls, mut l_cls) = (0.0, 0.0, 0.0, 0.0);
    for s in &toy.samples {
        let out = m.probabilities(s, Some(&projected)).unwrap();
        let y = m.classifier.row_of(s.relation).unwrap();
        let lin = &out.linear;
        let con = out.contrastive.as_ref().unwrap();
        let w = oracle_focal(&out.representation, &old_protos, lin[y], p.tau2, p.gamma);
        let t = &teacher[&s.id];
        for j in 0..toy.old.len() {
            l_fkd -= w[j] * t.linear[j] * lin[j].ln();
            c_fkd -= w[j] * t.contrastive[j] * con[j].ln();
        }
        l_cls -= lin[y].ln();
        let z = m.projector.project(&out.representation).unwrap();
        let sims: Vec<f64> = projected.iter().map(|q| q.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        c_cls += oracle_info_nce(&sims, y, p.tau1, p.mu, p.omega);
    }
    let n = toy.samples.len() as f64;
    (c_fkd / n, l_fkd / n, c_cls / n, l_cls / n)
}

// ---------------------------------------------------------------------------
// 3. memory algebra

fn memory_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let words = ["kim", "met", "the", "red", "fox", "near", "a", "big", "tree", "today"];
    let mut trials = 0;
    for trial in 0..200 {
        let relations = rng.random_range(2..=5u32);
        let mut memory = MemoryStore::new();
        for r in 0..relations {
            let size = rng.random_range(2..=6);
            let exemplars = (0..size)
                .map(|i| {
                    let len = rng.random_range(4..=8);
                    let tokens: Vec<String> = (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
                    let head = rng.random_range(0..len - 2);
                    let tail = rng.random_range(head + 1..len);
                    let s = Sample::new(format!("t{trial}-r{r}-{i}"), tokens, Span::new(head, head + 1), Span::new(tail, tail + 1), RelationId(r))
                        .unwrap();
                    Exemplar::new(s).unwrap()
                })
                .collect();
            memory.insert(RelationId(r), exemplars).map_err(|e| e.to_string())?;
        }
        let augmented = augment(&memory, &mut rng).map_err(|e| e.to_string())?;
        ensure!(augmented.len() == 4 * memory.len(), "trial {trial}: {} != 4 * {}", augmented.len(), memory.len());
        let originals = augmented.iter().filter(|s| s.is_original()).count();
        ensure!(originals == memory.len(), "trial {trial}: {originals} originals");
        for r in memory.relations() {
            let per = augmented.iter().filter(|s| s.relation == r).count();
            ensure!(per == 4 * memory.get(r).unwrap().len(), "trial {trial}: relation {r} has {per}");
        }
        trials += 1;

        // guards: augmented samples never reach memory, selection or static prototypes
        let aug = augmented.iter().find(|s| !s.is_original()).unwrap().clone();
        ensure!(Exemplar::new(aug.clone()).is_err(), "augmented sample became an exemplar");
        let json = serde_json::to_string(&aug).unwrap();
        ensure!(serde_json::from_str::<Exemplar>(&json).is_err(), "augmented exemplar deserialized");
        if trial == 0 {
            let vocab = TokenVocab::build(words.iter().map(|w| w.to_string()).chain(["[SEP]".to_string()]));
            let model = Model::new(vocab, &toy_encoder_config(8), &mut rng).unwrap();
            let same: Vec<&Sample> = augmented.iter().filter(|s| s.relation == aug.relation).collect();
            ensure!(select_typical(&model.encoder, &same, 2, 0).is_err(), "selection accepted augmented samples");
            let mut protos = PrototypeStore::new(0.5).unwrap();
            ensure!(
                protos.capture_static(&model.encoder, aug.relation, &same).is_err(),
                "static prototype accepted augmented samples"
            );
            let originals: Vec<&Sample> = same.iter().copied().filter(|s| s.is_original()).collect();
            ensure!(select_typical(&model.encoder, &originals, 2, 0).is_ok(), "selection rejected originals");
        }
    }
    let mut single = MemoryStore::new();
    let s = Sample::new("x", vec!["a".into(), "b".into()], Span::new(0, 1), Span::new(1, 2), RelationId(0)).unwrap();
    single.insert(RelationId(0), vec![Exemplar::new(s).unwrap()]).unwrap();
    ensure!(augment(&single, &mut rng).is_err(), "augmentation with one relation must fail");
    Ok(format!("{trials} random stores, |M^| = 4|M~|, guards hold"))
}

// ---------------------------------------------------------------------------
// 4. prototype endpoints

fn prototype_endpoints() -> Outcome {
    let samples = toy_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::new(toy_vocab(&samples), &toy_encoder_config(8), &mut rng).unwrap();
    let r = RelationId(0);
    let firsts: Vec<&Sample> = samples.iter().filter(|s| s.relation == r).collect();
    let mut memory = MemoryStore::new();
    memory
        .insert(r, vec![Exemplar::new(samples[3].clone()).unwrap(), Exemplar::new(samples[0].clone()).unwrap()])
        .unwrap();
    let reprs = model.encoder.encode_all(firsts.iter().copied()).unwrap();
    let static_mean: Vec<f64> = (0..8).map(|i| (reprs[0][i] + reprs[1][i]) / 2.0).collect();

    let mut zero = PrototypeStore::new(0.0).unwrap();
    zero.capture_static(&model.encoder, r, &firsts).unwrap();
    let stat = zero.static_of(r).unwrap().clone();
    for (a, b) in stat.iter().zip(&static_mean) {
        ensure!((a - b).abs() < 1e-12, "static prototype is not the training mean");
    }
    // the dynamic side is arbitrary here; beta = 0 must ignore it bitwise
    let noise: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    ensure!(zero.blend(r, &noise).unwrap() == stat, "beta=0 blend differs from the static prototype");
    ensure!(zero.combined(&model.encoder, &memory, r).unwrap() == stat, "beta=0 combined differs from static");

    let mut one = PrototypeStore::new(1.0).unwrap();
    one.insert_static(r, noise[0].clone()).unwrap();
    let dynamic = model.encoder.encode_all(memory.get(r).unwrap().iter().map(Exemplar::sample)).unwrap();
    let dyn_mean: Vec<f64> = (0..8).map(|i| dynamic.iter().map(|d| d[i]).sum::<f64>() / dynamic.len() as f64).collect();
    let got = one.combined(&model.encoder, &memory, r).unwrap();
    for (a, b) in got.iter().zip(&dyn_mean) {
        ensure!((a - b).abs() < 1e-6, "beta=1 prototype is not the exemplar mean");
    }

    ensure!(zero.insert_static(r, noise[1].clone()).is_err(), "second insert_static accepted");
    ensure!(zero.capture_static(&model.encoder, r, &firsts).is_err(), "second capture_static accepted");
    ensure!(zero.static_of(r).unwrap() == &stat, "failed write changed the static prototype");
    Ok("beta=0 bitwise, beta=1 within 1e-6, second write rejected".into())
}

// ---------------------------------------------------------------------------
// 5. forgetting mitigation

const SEEDS: [u64; 3] = [0, 1, 2];

fn synthetic_run(run: RunConfig, data: SyntheticSpec, dir: &Path) -> Result<Vec<SeedResult>, String> {
    let mut spec = ExperimentSpec::synthetic(run, data, SEEDS.len());
    spec.seeds = SEEDS.to_vec();
    match run_experiment(&spec, dir, RunOptions::default()).map_err(|e| e.to_string())? {
        RunOutcome::Finished(_, results) => Ok(results),
        other => Err(format!("run did not finish: {other:?}")),
    }
}

fn system_config() -> RunConfig {
    let mut run = RunConfig::fewrel();
    run.encoder.hidden_dim = 32;
    run.encoder.projection_dim = 32;
    run
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn forgetting_mitigation() -> Outcome {
    let data = SyntheticSpec::default();
    ensure!(data.tasks == 5 && data.relations == 10, "synthetic default is not 5 x 2");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = synthetic_run(system_config(), data.clone(), &tmp.path().join("replay"))?;
    let mut base = system_config();
    base.replay = false;
    let seq = synthetic_run(base, data, &tmp.path().join("sequential"))?;
    let finals = |r: &[SeedResult]| -> Vec<f64> { r.iter().map(|x| x.matrix.final_accuracy().unwrap()).collect() };
    let (a, b) = (finals(&full), finals(&seq));
    let gap = 100.0 * (mean(&a) - mean(&b));
    let detail = format!(
        "replay {:.1} vs sequential {:.1} (gap {gap:.1} points; per seed {:?} / {:?})",
        100.0 * mean(&a),
        100.0 * mean(&b),
        a.iter().map(|v| (100.0 * v).round()).collect::<Vec<_>>(),
        b.iter().map(|v| (100.0 * v).round()).collect::<Vec<_>>()
    );
    ensure!(gap >= 15.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6. analogous benefit

fn anchor_drops(results: &[SeedResult]) -> Result<Vec<f64>, String> {
    results
        .iter()
        .map(|r| {
            let anchors: Vec<RelationId> = r.analogous_pairs.iter().map(|p| p.0).collect();
            ensure!(!anchors.is_empty(), "seed {} has no analogous pair", r.seed);
            let report = r.report.as_ref().ok_or("missing forgetting report")?;
            let m = analogous_subset_metrics(report, r.history.last().unwrap(), &r.sequence, &SubsetRule::Explicit(anchors));
            m.drop.ok_or_else(|| "empty analogous subset".to_string())
        })
        .collect()
}

fn analogous_benefit() -> Outcome {
    let data = SyntheticSpec {
        samples_per_relation: 100,
        analogous_pairs: vec![[0, 9]],
        ..SyntheticSpec::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let with = synthetic_run(system_config(), data.clone(), &tmp.path().join("fkd"))?;
    let mut without = system_config();
    without.ablation = Ablation::without(Component::Fkd);
    let wo = synthetic_run(without, data, &tmp.path().join("wo-fkd"))?;
    let (a, b) = (anchor_drops(&with)?, anchor_drops(&wo)?);
    let detail = format!(
        "anchor drop with FKD {:.1} vs without {:.1} (per seed {:?} / {:?})",
        100.0 * mean(&a),
        100.0 * mean(&b),
        a.iter().map(|v| (100.0 * v).round()).collect::<Vec<_>>(),
        b.iter().map(|v| (100.0 * v).round()).collect::<Vec<_>>()
    );
    ensure!(mean(&a) < mean(&b), "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. ablation fidelity

fn small_sequence() -> TaskSequence {
    let spec = SyntheticSpec {
        relations: 6,
        tasks: 3,
        samples_per_relation: 20,
        ..SyntheticSpec::default()
    };
    crex_core::data::generate_synthetic_sequence(&spec).unwrap().sequence
}

fn small_config(ablation: Ablation) -> RunConfig {
    let mut c = RunConfig::fewrel();
    c.encoder.hidden_dim = 8;
    c.encoder.projection_dim = 8;
    c.optimizer.new_task_epochs = 2;
    c.optimizer.replay_epochs = 2;
    c.memory_size = 3;
    c.ablation = ablation;
    c
}

struct Trace {
    learner: Learner,
    steps: Vec<Vec<StepRecord>>,
}

fn trace(seq: &TaskSequence, ablation: Ablation, tasks: usize) -> Result<Trace, String> {
    let mut learner = ok(Learner::new(small_config(ablation), TokenVocab::from_sequence(seq)), "learner")?;
    let mut steps = Vec::new();
    for t in &seq.tasks()[..tasks] {
        steps.push(ok(learner.run_task(t), "run_task")?.steps);
    }
    Ok(Trace { learner, steps })
}

fn replay_steps(steps: &[StepRecord]) -> impl Iterator<Item = &LossBreakdown> {
    steps.iter().filter(|s| s.phase == Phase::Replay).map(|s| &s.losses)
}

fn new_task_steps(steps: &[StepRecord]) -> Vec<&StepRecord> {
    steps.iter().filter(|s| s.phase == Phase::NewTask).collect()
}

fn all_replay(t: &Trace, task: usize, f: impl Fn(&LossBreakdown) -> bool) -> bool {
    let mut any = false;
    for b in replay_steps(&t.steps[task]) {
        any = true;
        if !f(b) {
            return false;
        }
    }
    any
}

fn ablation_fidelity() -> Outcome {
    let seq = small_sequence();
    let intact = trace(&seq, Ablation::intact(), 2)?;
    ensure!(all_replay(&intact, 1, |b| b.c_cls > 0.0 && b.l_cls > 0.0 && b.c_fkd > 0.0 && b.l_fkd > 0.0), "intact replay is missing a term");
    ensure!(all_replay(&intact, 0, |b| b.c_fkd == 0.0 && b.l_fkd == 0.0), "first task cannot distill");
    let mem0 = 2 * 3;
    ensure!(intact.steps[0].iter().filter(|s| s.phase == Phase::Replay).all(|s| s.pool_size == 4 * mem0), "intact pool is not augmented");

    for c in Component::ALL {
        let t = trace(&seq, Ablation::without(c), 2)?;
        // new-task training of the first task never involves the switched component
        ensure!(new_task_steps(&t.steps[0]) == new_task_steps(&intact.steps[0]), "w/o {c:?} changed first new-task training");
        match c {
            Component::Fkd => {
                ensure!(t.steps[0] == intact.steps[0], "w/o FKD changed the first task");
                ensure!(all_replay(&t, 1, |b| b.c_fkd == 0.0 && b.l_fkd == 0.0 && b.c_cls > 0.0 && b.l_cls > 0.0), "w/o FKD still distills");
            }
            Component::Lm => {
                ensure!(all_replay(&t, 1, |b| b.l_cls == 0.0 && b.l_fkd == 0.0 && b.c_cls > 0.0 && b.c_fkd > 0.0), "w/o LM still trains the linear head");
                ensure!(t.learner.alpha() == 0.0, "w/o LM predicts with the linear head");
            }
            Component::Cm => {
                ensure!(all_replay(&t, 1, |b| b.c_cls == 0.0 && b.c_fkd == 0.0 && b.l_cls > 0.0 && b.l_fkd > 0.0), "w/o CM still trains the contrastive head");
                ensure!(t.learner.alpha() == 1.0, "w/o CM predicts with prototypes");
            }
            Component::Ma => {
                ensure!(t.steps[0].iter().filter(|s| s.phase == Phase::Replay).all(|s| s.pool_size == mem0), "w/o MA replays augmented samples");
                ensure!(all_replay(&t, 1, |b| b.c_fkd > 0.0 && b.l_fkd > 0.0), "w/o MA lost distillation");
            }
            Component::Dp => {
                ensure!(&t.learner.final_prototypes == t.learner.prototypes.statics(), "w/o DP prototypes differ from static ones");
                ensure!(&intact.learner.final_prototypes != intact.learner.prototypes.statics(), "intact prototypes equal static ones");
            }
            Component::Sp => {
                let l = &t.learner;
                for (r, p) in &l.final_prototypes {
                    let enc = l.model.encoder.encode_all(l.memory.get(*r).unwrap().iter().map(Exemplar::sample)).unwrap();
                    let m: Vec<f64> = (0..p.len()).map(|i| enc.iter().map(|e| e[i]).sum::<f64>() / enc.len() as f64).collect();
                    ensure!(p.iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-12), "w/o SP prototype of {r} is not the exemplar mean");
                    ensure!(p != &l.prototypes.statics()[r], "w/o SP prototype of {r} equals the static one");
                }
            }
        }
    }
    let both = small_config(Ablation {
        disabled: [Component::Lm, Component::Cm].into(),
    });
    ensure!(matches!(both.validate(), Err(crex_core::Error::Config(_))), "LM+CM accepted by validation");
    ensure!(Learner::new(both, TokenVocab::from_sequence(&seq)).is_err(), "LM+CM accepted by the learner");
    Ok("six switches checked against intact step logs and prototypes; LM+CM rejected".into())
}

// ---------------------------------------------------------------------------
// 8. determinism

fn determinism() -> Outcome {
    let mut run = small_config(Ablation::intact());
    run.encoder.hidden_dim = 16;
    run.encoder.projection_dim = 16;
    let data = SyntheticSpec {
        relations: 8,
        tasks: 4,
        samples_per_relation: 20,
        ..SyntheticSpec::default()
    };
    let spec = ExperimentSpec::synthetic(run, data, 2);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs = ["a", "b", "c"].map(|d| tmp.path().join(d));
    ok(run_experiment(&spec, &dirs[0], RunOptions::default()), "first run")?;
    ok(run_experiment(&spec, &dirs[1], RunOptions::default()), "second run")?;
    let stopped = ok(run_experiment(&spec, &dirs[2], RunOptions { stop_after_task: Some(1) }), "interrupted run")?;
    ensure!(matches!(stopped, RunOutcome::Interrupted), "run did not stop");
    ok(resume(&dirs[2], Some(&spec)), "resume")?;
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
    let mut files = 0;
    for seed in spec.permutation_seeds() {
        for f in [format!("seed-{seed}/accuracy.json"), format!("seed-{seed}/accuracy.csv"), format!("seed-{seed}/task-3/model.json")] {
            let a = read(&dirs[0], &f)?;
            ensure!(a == read(&dirs[1], &f)?, "{f} differs between identical runs");
            ensure!(a == read(&dirs[2], &f)?, "{f} differs after resume");
            files += 1;
        }
    }
    Ok(format!("{files} artifacts bitwise equal across two runs and a resumed run"))
}

// ---------------------------------------------------------------------------
// 9. evaluation analytics

fn unit(d: usize, parts: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for (i, x) in parts {
        v[*i] = *x;
    }
    v
}

fn evaluation_analytics() -> Outcome {
    let names: Vec<String> = (0..6).map(|i| format!("rel{i}")).collect();
    let vocab = RelationVocab::from_names(names).unwrap();
    let r = RelationId;
    let sample = |id: usize, rel: u32| {
        Sample::new(format!("s{id}"), vec!["x".into(), "y".into()], Span::new(0, 1), Span::new(1, 2), r(rel)).unwrap()
    };
    let order = [[0, 2], [4, 1], [3, 5]];
    let tasks = order
        .iter()
        .enumerate()
        .map(|(k, rels)| Task {
            index: k,
            relations: rels.iter().map(|x| r(*x)).collect(),
            train: rels.iter().map(|x| sample(10 + *x as usize, *x)).collect(),
            valid: vec![],
            test: rels.iter().map(|x| sample(20 + *x as usize, *x)).collect(),
        })
        .collect();
    let seq = TaskSequence::new(tasks, vocab).unwrap();

    // correct answers out of 20 per relation after each task
    let script: [&[(u32, usize)]; 3] = [
        &[(0, 18), (2, 16)],
        &[(0, 15), (2, 16), (4, 18), (1, 20)],
        &[(0, 8), (2, 11), (4, 16), (1, 11), (3, 14), (5, 20)],
    ];
    let mut matrix = AccuracyMatrix::new(RunMetadata::from_sequence(0, "fixture", &seq));
    for (k, row) in script.iter().enumerate() {
        let per_relation: BTreeMap<RelationId, Tally> = row.iter().map(|(x, c)| (r(*x), Tally { correct: *c, total: 20 })).collect();
        let per_task = (0..=k)
            .map(|j| {
                let mut t = Tally::default();
                for x in order[j] {
                    t.add(per_relation[&r(x)]);
                }
                t
            })
            .collect();
        matrix
            .push(TaskEvaluation {
                after_task: k,
                per_task,
                per_relation,
            })
            .map_err(|e| e.to_string())?;
    }

    let s = |c: f64| (1.0 - c * c).sqrt();
    let h0: Prototypes = [(r(0), unit(6, &[(0, 1.0)])), (r(2), unit(6, &[(0, 0.6), (2, 0.8)]))].into();
    let h1: Prototypes = [
        (r(0), unit(6, &[(0, 1.0)])),
        (r(1), unit(6, &[(0, 0.95), (1, s(0.95))])),
        (r(2), unit(6, &[(2, 1.0)])),
        (r(4), unit(6, &[(4, 1.0)])),
    ]
    .into();
    let h2: Prototypes = [
        (r(0), unit(6, &[(0, 1.0)])),
        (r(1), unit(6, &[(0, 0.9), (1, s(0.9))])),
        (r(2), unit(6, &[(2, 1.0)])),
        (r(3), unit(6, &[(2, 0.8), (3, 0.6)])),
        (r(4), unit(6, &[(4, 1.0)])),
        (r(5), unit(6, &[(4, 0.5), (5, s(0.5))])),
    ]
    .into();
    let history = vec![h0, h1, h2];

    // Table-1 style bins, by hand: final max similarity 0.9 / 0.8 / 0.5 per pair
    let report = forgetting_report(&history, &matrix, &seq).map_err(|e| e.to_string())?;
    let expected_drop = [0.5, 0.45, 0.25, 0.0, 0.1, 0.0];
    let expected_bin = [
        SimilarityBin::High,
        SimilarityBin::High,
        SimilarityBin::Medium,
        SimilarityBin::Medium,
        SimilarityBin::Low,
        SimilarityBin::Low,
    ];
    ensure!(report.relations.len() == 6, "report covers {} relations", report.relations.len());
    for row in &report.relations {
        let i = row.relation.index();
        ensure!(row.bin == expected_bin[i], "relation {i} in bin {:?}", row.bin);
        ensure!((row.drop - expected_drop[i]).abs() < 1e-12, "relation {i} drop {}", row.drop);
    }
    let expected_bins = [(SimilarityBin::High, 2, 0.475), (SimilarityBin::Medium, 2, 0.125), (SimilarityBin::Low, 2, 0.05)];
    for (bin, count, drop) in expected_bins {
        let b = report.bins.iter().find(|b| b.bin == bin).ok_or("missing bin")?;
        ensure!(b.count == count, "bin {bin:?} count {}", b.count);
        ensure!((b.mean_drop.unwrap() - drop).abs() < 1e-12, "bin {bin:?} mean drop {:?}", b.mean_drop);
    }

    // sudden drops against brute force
    let table = sudden_drop_table(&history, &matrix).map_err(|e| e.to_string())?;
    let brute = brute_force_sudden_drops(&history, script.as_slice());
    for bin in DropBin::ALL {
        let row = table.iter().find(|x| x.bin == bin).ok_or("missing drop bin")?;
        let events = brute.get(&bin).cloned().unwrap_or_default();
        ensure!(row.count == events.len(), "{bin:?}: {} events vs {}", row.count, events.len());
        if events.is_empty() {
            ensure!(row.mean_before.is_none() && row.mean_after.is_none(), "{bin:?} has means without events");
            continue;
        }
        let before = mean(&events.iter().map(|e| e.0).collect::<Vec<_>>());
        let after = mean(&events.iter().map(|e| e.1).collect::<Vec<_>>());
        ensure!((row.mean_before.unwrap() - before).abs() < 1e-12, "{bin:?} mean before");
        ensure!((row.mean_after.unwrap() - after).abs() < 1e-12, "{bin:?} mean after");
    }
    // and by hand for the smallest bin: r0 at task 1 (0.6 -> 0.95), r4 at task 2 (0 -> 0.5)
    let small = table.iter().find(|x| x.bin == DropBin::Small).unwrap();
    ensure!(small.count == 2, "small drops {}", small.count);
    ensure!((small.mean_before.unwrap() - 0.3).abs() < 1e-12, "small mean before");
    ensure!((small.mean_after.unwrap() - 0.725).abs() < 1e-12, "small mean after");
    let counts: Vec<usize> = table.iter().map(|x| x.count).collect();
    Ok(format!("bins and drops match by hand; sudden-drop counts {counts:?} match brute force"))
}

fn brute_force_sudden_drops(history: &[Prototypes], script: &[&[(u32, usize)]]) -> BTreeMap<DropBin, Vec<(f64, f64)>> {
    let max_sim = |protos: &Prototypes, r: RelationId| -> f64 {
        let p = &protos[&r];
        protos
            .iter()
            .filter(|(o, _)| **o != r)
            .map(|(_, q)| oracle_cos(p, q))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut out: BTreeMap<DropBin, Vec<(f64, f64)>> = BTreeMap::new();
    for k in 1..script.len() {
        for &(rel, prev) in script[k - 1] {
            let Some(&(_, cur)) = script[k].iter().find(|(x, _)| *x == rel) else {
                continue;
            };
            let points = 100.0 * (prev as f64 / 20.0 - cur as f64 / 20.0);
            let bin = match points {
                p if p <= 0.0 => continue,
                p if p < 20.0 => DropBin::Small,
                p if p < 40.0 => DropBin::Medium,
                _ => DropBin::Large,
            };
            let rid = RelationId(rel);
            out.entry(bin).or_default().push((max_sim(&history[k - 1], rid), max_sim(&history[k], rid)));
        }
    }
    out
}
