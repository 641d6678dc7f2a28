//! Acceptance suite. Runs every criterion (or those named on the command
//! line, e.g. `cargo test --test acceptance -- 1 4`) and prints one
//! PASS/FAIL line each; exits non-zero if any fails.
//!
//! Criteria 5, 6 and 8 train on the seeds 0..5 of the default desk config.
//! Default settings were tuned on seeds 100 and up only.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use dac_core::action::{ActionTriple, ChangeClass, Setting, NUM_ACTIONS};
use dac_core::adaptation::{AdaptedPolicy, DynamicsModel, Transition};
use dac_core::bins::DiscreteEvent;
use dac_core::config::RunConfig;
use dac_core::encoder::{positional_code, EmbeddingConfig};
use dac_core::evaluation::{acc_metrics, wis, WeightedTrajectory};
use dac_core::experiment::{ablation_variants, adaptation_study, alpha_variants, SourceRun};
use dac_core::model::{batch_gradient as head_gradient, EncoderHead, PreparedPatient};
use dac_core::nn::{argmax, gradcheck};
use dac_core::pipeline::PreparedCohort;
use dac_core::rewards::{
    clone_loss, combined_reward, iptw_weights, short_term_reward, step_reward, BehaviorClone, NumeratorModel,
    WeightClip, INITIAL_CLASS,
};
use dac_core::risk::{binary_cross_entropy, risk_loss, sample_balanced_batch, train_risk_model, PatientPools, RiskModel};
use dac_core::stats::{chi_square_independence, ks_statistic, mean, sign_test_p, total_variation};
use dac_core::synthetic::{simulate_cohort, SyntheticConfig};
use dac_core::trainer::{batch_gradient, td_target, DacModel, TrainConfig, WeightedPatient};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances
const FORMULA_REL_TOL: f64 = 1e-9;
const FORMULA_INSTANCES: usize = 1_000;
const GRAD_REL_TOL: f64 = 1e-4;
const KS_MAX: f64 = 0.15;
const BALANCE_BATCHES: usize = 100;
const BALANCE_BATCH_SIZE: usize = 256;
const ACC1_MARGIN: f64 = 0.03;
const SIGN_TEST_P: f64 = 0.05;
const NULL_TV_MAX: f64 = 0.1;
const NULL_CHI2_P: f64 = 0.01;
const ALPHA_SPREAD_MAX: f64 = 0.02;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

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

fn progress(msg: &str) {
    let _ = writeln!(std::io::stderr(), "    {msg}");
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= FORMULA_REL_TOL * a.abs().max(b.abs())
}

fn close_all(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y))
}

// ── criterion 1 ─────────────────────────────────────────────────────────

fn naive_code(v: usize, subranges: usize, k: usize) -> Vec<f64> {
    let mut sines = Vec::new();
    let mut cosines = Vec::new();
    for j in 0..k {
        let angle = (v as f64 / subranges as f64) * (j as f64 / k as f64);
        sines.push(angle.sin());
        cosines.push(angle.cos());
    }
    sines.extend(cosines);
    sines
}

fn naive_weights(num: &[f64], den: &[f64], clip: &WeightClip) -> Vec<f64> {
    (0..num.len())
        .map(|t| {
            let mut product = 1.0;
            for tau in 0..=t {
                product *= num[tau].max(clip.floor) / den[tau].max(clip.floor);
            }
            product.max(clip.min).min(clip.max)
        })
        .collect()
}

fn naive_wis(trajs: &[(Vec<f64>, Vec<f64>)], gamma: f64) -> f64 {
    let mut rho = Vec::new();
    let mut ret = Vec::new();
    for (ratios, rewards) in trajs {
        let mut r = 1.0;
        for x in ratios {
            r *= x;
        }
        let mut g = 0.0;
        for (t, x) in rewards.iter().enumerate() {
            g += gamma.powi(t as i32) * x;
        }
        rho.push(r);
        ret.push(g);
    }
    let w = rho.iter().sum::<f64>() / rho.len() as f64;
    let mut total = 0.0;
    for i in 0..rho.len() {
        total += rho[i] / w * ret[i];
    }
    total / rho.len() as f64
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |name: &'static str, ok: bool| {
        if !ok {
            *failures.entry(name).or_default() += 1;
        }
    };
    let clip = WeightClip::default();
    for _ in 0..FORMULA_INSTANCES {
        let subranges = rng.gen_range(1..=30);
        let k = rng.gen_range(1..=16);
        let v = rng.gen_range(1..=subranges);
        fail("positional code", close_all(&positional_code(v, subranges, k).unwrap(), &naive_code(v, subranges, k)));

        let t = rng.gen_range(1..=8);
        let num: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0) * rng.gen_range(0.0..1.0)).collect();
        let den: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0) * rng.gen_range(0.0..1.0)).collect();
        fail("weight products", close_all(&iptw_weights(&num, &den, &clip).unwrap(), &naive_weights(&num, &den, &clip)));

        let n = rng.gen_range(2..=12);
        let policy = random_probs(&mut rng, n);
        let mortality: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = rng.gen_range(0..n);
        let mut expected = 0.0;
        for i in 0..n {
            expected += policy[i] * mortality[i];
        }
        fail("short-term reward", close(short_term_reward(&policy, &mortality, a), expected - mortality[a]));

        let (w, l, s, alpha) = (rng.gen_range(0.1..10.0), rng.gen_range(-15.0..15.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..=1.0));
        fail("combined reward", close(combined_reward(w, l, s, alpha), w * (alpha * l + (1.0 - alpha) * s)));

        let gamma = rng.gen_range(0.5..=1.0);
        let r = [0.0, 15.0, -15.0][rng.gen_range(0..3)];
        let next: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let mut best = f64::NEG_INFINITY;
        for x in &next {
            if *x > best {
                best = *x;
            }
        }
        let terminal = rng.gen_bool(0.3);
        let naive = if terminal { r } else { r + gamma * best };
        fail("TD target", close(td_target(r, (!terminal).then_some(&next[..]), gamma), naive));

        let trajs: Vec<(Vec<f64>, Vec<f64>)> = (0..rng.gen_range(1..=6))
            .map(|_| {
                let len = rng.gen_range(1..=5);
                let ratios = (0..len).map(|_| rng.gen_range(0.05..3.0)).collect();
                let died = rng.gen_bool(0.5);
                let rewards = (0..len).map(|t| step_reward(u8::from(died), t, len).unwrap()).collect();
                (ratios, rewards)
            })
            .collect();
        let weighted: Vec<WeightedTrajectory> = trajs
            .iter()
            .map(|(ratios, rewards)| WeightedTrajectory {
                ratios: ratios.clone(),
                rewards: rewards.clone(),
            })
            .collect();
        fail("WIS", close(wis(&weighted, gamma).unwrap(), naive_wis(&trajs, gamma)));

        let steps = rng.gen_range(1..=20);
        let draw = |rng: &mut ChaCha8Rng| ActionTriple::from_flat_index(rng.gen_range(0..NUM_ACTIONS)).unwrap();
        let oracle: Vec<ActionTriple> = (0..steps).map(|_| draw(&mut rng)).collect();
        let rec: Vec<ActionTriple> = oracle
            .iter()
            .map(|o| if rng.gen_bool(0.4) { *o } else { draw(&mut rng) })
            .collect();
        let (mut all, mut each) = (0usize, 0usize);
        for i in 0..steps {
            let mut hits = 0;
            for p in 0..3 {
                if rec[i].levels()[p] == oracle[i].levels()[p] {
                    hits += 1;
                }
            }
            each += hits;
            all += usize::from(hits == 3);
        }
        let (acc3, acc1) = acc_metrics(&rec, &oracle).unwrap();
        fail("ACC-3/ACC-1", close(acc3, all as f64 / steps as f64) && close(acc1, each as f64 / (3 * steps) as f64));
    }
    outcome(
        failures.is_empty(),
        format!("7 formulas x {FORMULA_INSTANCES} instances, mismatches {failures:?}"),
    )
}

// ── criterion 2 ─────────────────────────────────────────────────────────

fn toy_patient(rng: &mut ChaCha8Rng, id: u64, config: EmbeddingConfig, len: usize) -> PreparedPatient {
    let actions: Vec<usize> = (0..len).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
    let mut prev = None;
    let classes = actions
        .iter()
        .map(|&a| {
            let cur = ActionTriple::from_flat_index(a).unwrap();
            let c = ChangeClass::between(prev, cur).index();
            prev = Some(cur);
            c
        })
        .collect();
    let mut steps = Vec::new();
    for _ in 0..len {
        let mut events = Vec::new();
        for variable in 0..config.num_variables as u32 {
            if variable == 0 || rng.gen_bool(0.8) {
                let subrange = rng.gen_range(1..=config.subranges as u16);
                events.push(DiscreteEvent { variable, subrange });
            }
        }
        steps.push(events);
    }
    PreparedPatient {
        patient_id: id,
        outcome: u8::from(rng.gen_bool(0.5)),
        steps,
        actions,
        classes,
    }
}

fn dac_gradient_error(rng: &mut ChaCha8Rng, config: EmbeddingConfig) -> f64 {
    let model = DacModel::new(config, rng.gen()).unwrap();
    let mut target = model.long_term.clone();
    target.b.data.iter_mut().for_each(|b| *b += rng.gen_range(-0.5..0.5));
    let ps: Vec<PreparedPatient> = (0..2)
        .map(|i| {
            let len = rng.gen_range(1..=3);
            toy_patient(rng, i, config, len)
        })
        .collect();
    let ws: Vec<Vec<f64>> = ps.iter().map(|p| (0..p.len()).map(|_| rng.gen_range(0.1..10.0)).collect()).collect();
    let batch: Vec<WeightedPatient> = ps
        .iter()
        .zip(&ws)
        .map(|(p, w)| WeightedPatient { patient: p, weights: w })
        .collect();
    let train = TrainConfig {
        alpha: rng.gen_range(0.0..=1.0),
        ..TrainConfig::default()
    };
    let (_, grad) = batch_gradient(&model, &target, &batch, &train).unwrap();
    // rewards and bootstrapped targets are constants of the update: freeze them
    let mut frozen = Vec::new();
    for (p, w) in ps.iter().zip(&ws) {
        let states = model.encoder.encode_states(&p.steps).unwrap();
        let mut per_step = Vec::new();
        for t in 0..p.len() {
            let o = model.heads(&states[t]);
            let a = p.actions[t];
            let rs = short_term_reward(&o.policy, &o.mortality, a);
            let q = combined_reward(w[t], o.long_term[a], rs, train.alpha);
            let next = (t + 1 < p.len()).then(|| target.forward(&states[t + 1]));
            let z = td_target(step_reward(p.outcome, t, p.len()).unwrap(), next.as_deref(), train.gamma);
            per_step.push((q, z));
        }
        frozen.push(per_step);
    }
    let n: usize = ps.iter().map(|p| p.len()).sum();
    let loss = |m: &DacModel| {
        let mut total = 0.0;
        for (i, p) in ps.iter().enumerate() {
            let states = m.encoder.encode_states(&p.steps).unwrap();
            for t in 0..p.len() {
                let o = m.heads(&states[t]);
                let a = p.actions[t];
                let (q, z) = frozen[i][t];
                total -= q * o.policy[a].ln();
                total += (o.long_term[a] - z).powi(2);
                total += binary_cross_entropy(o.mortality[a], f64::from(p.outcome));
            }
        }
        total / n as f64
    };
    gradcheck::max_rel_error(&model, &grad, loss, 1e-5, 1e-4)
}

fn head_error(
    net: &EncoderHead,
    batch: &[&PreparedPatient],
    loss: &(impl Fn(&PreparedPatient, &dac_core::model::HeadPass, &mut [f64]) -> f64 + Sync),
) -> f64 {
    let (_, grad) = head_gradient(net, batch, loss);
    gradcheck::max_rel_error(net, &grad, |m| head_gradient(m, batch, loss).0, 1e-6, 1e-4)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..3 {
        let config = EmbeddingConfig {
            dim: rng.gen_range(2..=8),
            subranges: rng.gen_range(2..=6),
            num_variables: rng.gen_range(1..=3),
        };
        // actor surrogate, critic TD loss and mortality BCE each own one
        // head, so checking the summed objective checks each term there
        note("actor + critic + mortality", dac_gradient_error(&mut rng, config));

        let ps: Vec<PreparedPatient> = (0..3)
            .map(|i| {
                let len = rng.gen_range(1..=3);
                toy_patient(&mut rng, i, config, len)
            })
            .collect();
        let batch: Vec<&PreparedPatient> = ps.iter().collect();
        let risk = RiskModel::new(config, rng.gen()).unwrap();
        note("risk BCE", head_error(&risk.net, &batch, &risk_loss));
        let clone = BehaviorClone::new(config, rng.gen()).unwrap();
        note("clone likelihood", head_error(&clone.net, &batch, &clone_loss));

        let numerator = NumeratorModel::new(rng.gen_range(2..=8), rng.gen());
        let seqs: Vec<&[usize]> = ps.iter().map(|p| p.classes.as_slice()).collect();
        assert!(seqs.iter().all(|s| s[0] == INITIAL_CLASS));
        let (_, grad) = numerator.batch_gradient(&seqs);
        note(
            "numerator likelihood",
            gradcheck::max_rel_error(&numerator, &grad, |m| m.batch_gradient(&seqs).0, 1e-6, 1e-4),
        );

        let k = config.dim;
        let outputs = rng.gen_range(1..=3);
        let dynamics = DynamicsModel::new(k, rng.gen_range(2..=8), outputs, rng.gen()).unwrap();
        let data: Vec<Transition> = (0..3)
            .map(|_| Transition {
                state: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: rng.gen_range(0..NUM_ACTIONS),
                next: (0..outputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let refs: Vec<&Transition> = data.iter().collect();
        let (_, grad) = dynamics.loss_and_gradient(&refs);
        note(
            "dynamics loss",
            gradcheck::max_rel_error(&dynamics, &grad, |m| m.loss_and_gradient(&refs).0, 1e-6, 1e-4),
        );
    }
    let pass = worst.values().all(|&e| e <= GRAD_REL_TOL);
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(pass, format!("worst relative error: {}", detail.join(", ")))
}

// ── criterion 3 ─────────────────────────────────────────────────────────

fn identity_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let clip = WeightClip::default();
    let mut broken = Vec::new();

    let unit_weights = (0..1000).all(|_| {
        let p: Vec<f64> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(1e-6..1.0)).collect();
        iptw_weights(&p, &p, &clip).unwrap().iter().all(|&w| w == 1.0)
    });
    if !unit_weights {
        broken.push("weights");
    }

    let gamma = 0.99;
    let trajs: Vec<WeightedTrajectory> = (0..200)
        .map(|_| {
            let len = rng.gen_range(1..=8);
            let died = u8::from(rng.gen_bool(0.5));
            WeightedTrajectory {
                ratios: vec![1.0; len],
                rewards: (0..len).map(|t| step_reward(died, t, len).unwrap()).collect(),
            }
        })
        .collect();
    let average = trajs.iter().map(|t| t.discounted_return(gamma)).sum::<f64>() / trajs.len() as f64;
    if !close(wis(&trajs, gamma).unwrap(), average) {
        broken.push("WIS");
    }

    let deterministic = (0..1000).all(|_| {
        let mut policy = vec![0.0; NUM_ACTIONS];
        let a = rng.gen_range(0..NUM_ACTIONS);
        policy[a] = 1.0;
        let mortality: Vec<f64> = (0..NUM_ACTIONS).map(|_| rng.gen_range(0.0..1.0)).collect();
        short_term_reward(&policy, &mortality, a) == 0.0
    });
    if !deterministic {
        broken.push("short-term reward");
    }

    let config = EmbeddingConfig {
        dim: 8,
        subranges: 5,
        num_variables: 3,
    };
    let mut source = DacModel::new(config, 5).unwrap();
    for x in source.actor.w.data.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let dynamics = DynamicsModel::new(8, 8, 4, 6).unwrap();
    let adapted = AdaptedPolicy::new(source.clone(), dynamics.clone(), dynamics).unwrap();
    let pointwise = (0..1000).all(|_| {
        let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        adapted.decide(&s).action == argmax(&source.actor.forward(&s))
    });
    if !pointwise {
        broken.push("adaptation");
    }

    let small = SyntheticConfig {
        n_survivors: 50,
        n_nonsurvivors: 50,
        ..SyntheticConfig::default()
    };
    let (cohort, _) = simulate_cohort(&small).unwrap();
    let terminal = cohort.iter().all(|t| {
        let len = t.len();
        (0..len).all(|s| {
            let r = step_reward(t.outcome, s, len).unwrap();
            if s + 1 < len {
                r == 0.0
            } else {
                r == if t.died() { -15.0 } else { 15.0 }
            }
        })
    });
    if !terminal {
        broken.push("terminal rewards");
    }
    outcome(broken.is_empty(), format!("violated: {broken:?}"))
}

// ── criterion 4 ─────────────────────────────────────────────────────────

fn balance_properties() -> Outcome {
    let config = RunConfig::default().resolved();
    let (trajs, _) = simulate_cohort(&config.synthetic).unwrap();
    let cohort = PreparedCohort::new(&trajs, &config.pipeline).unwrap();
    let train = cohort.subset(&cohort.train);
    let (risk, _) = train_risk_model(&train, cohort.embedding, &config.pipeline.risk).unwrap();
    let pools = PatientPools::from_model(&risk, &train).unwrap();
    let died: HashMap<u64, bool> = train.iter().map(|p| (p.patient_id, p.died())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut unbalanced, mut worst_ks) = (0usize, 0.0f64);
    for _ in 0..BALANCE_BATCHES {
        let pairs = sample_balanced_batch(&pools, BALANCE_BATCH_SIZE, &mut rng).unwrap();
        let deaths = pairs
            .iter()
            .flat_map(|p| [p.nonsurvivor.patient_id, p.survivor.patient_id])
            .filter(|id| died[id])
            .count();
        if 2 * deaths != BALANCE_BATCH_SIZE || pairs.len() * 2 != BALANCE_BATCH_SIZE {
            unbalanced += 1;
        }
        let ns: Vec<f64> = pairs.iter().map(|p| p.nonsurvivor.max_risk).collect();
        let sv: Vec<f64> = pairs.iter().map(|p| p.survivor.max_risk).collect();
        worst_ks = worst_ks.max(ks_statistic(&ns, &sv).unwrap());
    }
    outcome(
        unbalanced == 0 && worst_ks <= KS_MAX,
        format!(
            "{unbalanced} unbalanced of {BALANCE_BATCHES} batches, largest per-batch KS {worst_ks:.3} (limit {KS_MAX})"
        ),
    )
}

// ── shared source runs for criteria 5, 6 and 8 ──────────────────────────

#[derive(Default)]
struct Lab {
    sources: HashMap<u64, SourceRun>,
    scores: HashMap<(u64, String), f64>,
    models: HashMap<u64, DacModel>,
}

impl Lab {
    fn source(&mut self, seed: u64) -> &SourceRun {
        self.sources.entry(seed).or_insert_with(|| {
            let start = Instant::now();
            let c = RunConfig {
                seed,
                ..RunConfig::default()
            }
            .resolved();
            let run = SourceRun::simulate(&c.synthetic, &c.pipeline).unwrap();
            progress(&format!("seed {seed}: cohort simulated and estimators pre-trained in {:.0?}", start.elapsed()));
            run
        })
    }

    /// ACC-1 of one labelled variant on one seed.
    fn acc1(&mut self, seed: u64, label: &str, train: &TrainConfig) -> f64 {
        if let Some(v) = self.scores.get(&(seed, label.to_string())) {
            return *v;
        }
        let run = self.source(seed);
        let state = run.train(train).unwrap();
        let (_, acc1) = run.dac_acc(state.best_model()).unwrap();
        if label == "dac" {
            self.models.insert(seed, state.best_model().clone());
        }
        progress(&format!("seed {seed}: {label} ACC-1 {acc1:.3}"));
        self.scores.insert((seed, label.to_string()), acc1);
        acc1
    }

    fn clone_acc1(&mut self, seed: u64) -> f64 {
        let key = (seed, "clone".to_string());
        if let Some(v) = self.scores.get(&key) {
            return *v;
        }
        let acc1 = self.source(seed).clone_acc().unwrap().1;
        progress(&format!("seed {seed}: clone ACC-1 {acc1:.3}"));
        self.scores.insert(key, acc1);
        acc1
    }

    fn dac_model(&mut self, seed: u64) -> DacModel {
        let train = self.source(seed).config.train;
        self.acc1(seed, "dac", &train);
        self.models[&seed].clone()
    }
}

// ── criterion 5 ─────────────────────────────────────────────────────────

fn relative_ordering(lab: &mut Lab) -> Outcome {
    let base = RunConfig::default().resolved().pipeline.train;
    let clone = mean(&SEEDS.iter().map(|&s| lab.clone_acc1(s)).collect::<Vec<_>>());
    let mut means = BTreeMap::new();
    for (label, _) in ablation_variants(&base) {
        let per_seed: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let train = lab.source(s).config.train;
                let variant = ablation_variants(&train).into_iter().find(|v| v.0 == label).unwrap().1;
                lab.acc1(s, &label, &variant)
            })
            .collect();
        means.insert(label, mean(&per_seed));
    }
    let dac = means["dac"];
    let beats_clone = dac - clone >= ACC1_MARGIN;
    let dominated: Vec<&String> = means.iter().filter(|(l, m)| *l != "dac" && **m > dac).map(|(l, _)| l).collect();
    let detail: Vec<String> = means.iter().map(|(l, m)| format!("{l} {m:.3}")).collect();
    outcome(
        beats_clone && dominated.is_empty(),
        format!(
            "mean ACC-1 clone {clone:.3}, {}; DAC - clone {:+.3} (need >= {ACC1_MARGIN}); ablations above DAC: {dominated:?}",
            detail.join(", "),
            dac - clone
        ),
    )
}

// ── criterion 6 ─────────────────────────────────────────────────────────

fn adaptation_trend(lab: &mut Lab) -> Outcome {
    let defaults = RunConfig::default();
    let fractions = defaults.adaptation.fractions.clone();
    let mut above_zero_shot = vec![0u64; fractions.len()];
    let mut widening = vec![0u64; fractions.len() - 1];
    for &seed in &SEEDS {
        let c = RunConfig { seed, ..defaults.clone() }.resolved();
        let model = lab.dac_model(seed);
        let start = Instant::now();
        let study = adaptation_study(lab.source(seed), &model, &c.synthetic, &c.adaptation).unwrap();
        let pts = &study.points;
        let line: Vec<String> = pts
            .iter()
            .map(|p| {
                format!(
                    "f={} adapted {:.3} zero-shot {:.3} scratch {:.3}",
                    p.fraction,
                    p.adapted,
                    p.zero_shot,
                    p.scratch.unwrap()
                )
            })
            .collect();
        progress(&format!("seed {seed}: {} ({:.0?})", line.join("; "), start.elapsed()));
        for (i, p) in pts.iter().enumerate() {
            above_zero_shot[i] += u64::from(p.adapted > p.zero_shot);
        }
        // fractions ascend, so a wider gap at the smaller fraction is gap[i] > gap[i + 1]
        for i in 0..pts.len() - 1 {
            widening[i] += u64::from(pts[i].gap_to_scratch().unwrap() > pts[i + 1].gap_to_scratch().unwrap());
        }
    }
    let n = SEEDS.len() as u64;
    let p_zero: Vec<f64> = above_zero_shot.iter().map(|&k| sign_test_p(k, n).unwrap()).collect();
    let p_wide: Vec<f64> = widening.iter().map(|&k| sign_test_p(k, n).unwrap()).collect();
    let pass = p_zero.iter().chain(&p_wide).all(|&p| p <= SIGN_TEST_P);
    outcome(
        pass,
        format!(
            "adapted > zero-shot in {above_zero_shot:?} of {n} seeds at fractions {fractions:?} (p {p_zero:.3?}); \
             gap to scratch wider at the smaller fraction in {widening:?} (p {p_wide:.3?}); need p <= {SIGN_TEST_P}"
        ),
    )
}

// ── criterion 7 ─────────────────────────────────────────────────────────

fn null_confounding() -> Outcome {
    let mut c = RunConfig::default();
    c.synthetic.kappa = 0.0;
    c.synthetic.treatment_sd = 0.0;
    let c = c.resolved();
    let run = SourceRun::simulate(&c.synthetic, &c.pipeline).unwrap();

    let mut p_values = Vec::new();
    for (i, _) in Setting::ALL.iter().enumerate() {
        let mut table = vec![vec![0u64; 2]; 7];
        for t in &run.trajectories {
            for a in t.actions() {
                table[usize::from(a.levels()[i]) - 1][usize::from(t.died())] += 1;
            }
        }
        p_values.push(chi_square_independence(&table).unwrap().2);
    }

    let state = run.train(&c.pipeline.train).unwrap();
    let model = state.best_model();
    let uniform = vec![1.0 / NUM_ACTIONS as f64; NUM_ACTIONS];
    let mut tv = Vec::new();
    for p in run.test_patients() {
        for pi in model.policy(p).unwrap() {
            tv.push(total_variation(&pi, &uniform));
        }
    }
    let mean_tv = mean(&tv);
    let worst_tv = tv.iter().copied().fold(0.0, f64::max);
    let min_p = p_values.iter().copied().fold(1.0, f64::min);
    outcome(
        mean_tv <= NULL_TV_MAX && min_p > NULL_CHI2_P,
        format!(
            "mean per-state TV from uniform {mean_tv:.4} (largest {worst_tv:.4}, limit {NULL_TV_MAX}); \
             level/outcome chi-square p {p_values:.3?} (need > {NULL_CHI2_P})"
        ),
    )
}

// ── criterion 8 ─────────────────────────────────────────────────────────

fn alpha_sensitivity(lab: &mut Lab) -> Outcome {
    let mut means = BTreeMap::new();
    for alpha in [0.05, 0.1, 0.2, 0.0, 1.0] {
        let per_seed: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let train = lab.source(s).config.train;
                // the default weight is the full method itself
                if alpha == train.alpha {
                    return lab.acc1(s, "dac", &train);
                }
                let (label, variant) = alpha_variants(&train, &[alpha]).remove(0);
                lab.acc1(s, &label, &variant)
            })
            .collect();
        means.insert(format!("{alpha}"), mean(&per_seed));
    }
    let band = [means["0.05"], means["0.1"], means["0.2"]];
    let spread = band.iter().copied().fold(f64::NEG_INFINITY, f64::max) - band.iter().copied().fold(f64::INFINITY, f64::min);
    let ends_lower = means["0"] < means["0.1"] && means["1"] < means["0.1"];
    let detail: Vec<String> = means.iter().map(|(a, m)| format!("alpha={a} {m:.3}")).collect();
    outcome(
        spread <= ALPHA_SPREAD_MAX && ends_lower,
        format!(
            "mean ACC-1 {}; spread over 0.05..0.2 {spread:.3} (limit {ALPHA_SPREAD_MAX}); alpha 0 and 1 below 0.1: {ends_lower}",
            detail.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let requested: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let lab = RefCell::new(Lab::default());
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "formula oracles", Box::new(formula_oracles)),
        (2, "gradient checks", Box::new(gradient_checks)),
        (3, "identity invariants", Box::new(identity_invariants)),
        (4, "balance properties", Box::new(balance_properties)),
        (5, "relative ordering", Box::new(|| relative_ordering(&mut lab.borrow_mut()))),
        (6, "adaptation trend", Box::new(|| adaptation_trend(&mut lab.borrow_mut()))),
        (7, "null confounding", Box::new(null_confounding)),
        (8, "alpha sensitivity", Box::new(|| alpha_sensitivity(&mut lab.borrow_mut()))),
    ];
    let mut failed = Vec::new();
    for (n, name, run) in &criteria {
        if !requested.is_empty() && !requested.contains(n) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} ({name}): {verdict} in {:.1?}: {}", start.elapsed(), o.detail);
        if !o.pass {
            failed.push(*n);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
