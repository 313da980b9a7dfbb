//! End-to-end acceptance checks, one test per criterion.
//!
//! Each test prints a single `criterion N: PASS|FAIL ...` line to stderr
//! (bypassing the harness capture) before asserting. Criteria 7, 9 and 10
//! share one model trained at desk scale on first use.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use nope_core::config::RunConfig;
use nope_core::encoder::GraphStructure;
use nope_core::geometry::{chordal_rotation_loss, normalize_quat};
use nope_core::graph::{build_graph, ObjectNode, SceneGraph};
use nope_core::matcher::{assign, combined_scores, consensus_difference, high_loss, refine_threshold, similarity};
use nope_core::metrics::{evaluate, f1_score, mean_pose_baseline, sweep_tau, InstanceRow, MetricsReport};
use nope_core::model::{NopeModel, Switches};
use nope_core::nn::{Binding, ForwardCtx};
use nope_core::pose::low_loss;
use nope_core::synth::{generate_pair, kabsch_pose, make_dataset, make_split, InstancePair, SynthConfig};
use nope_core::tensor::{grad_check_many, Tape, Tensor, TensorError, Var};
use nope_core::train::{train, EpochLog, Phase};
use nope_core::wire::{decode, encode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "criterion {n:>2}: {verdict}  {detail}").unwrap();
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_graph(n: usize, width: usize, rng: &mut ChaCha8Rng) -> SceneGraph {
    build_graph(
        (0..n)
            .map(|k| {
                let p = [rng.gen_range(-40.0..40.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..40.0)];
                ObjectNode::new(k as u32, p, (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect(),
    )
    .unwrap()
}

/// Mate node `j` is ego node `perm[j]`.
fn permuted(s: &GraphStructure, perm: &[usize]) -> GraphStructure {
    let n = perm.len();
    let pick = |t: &Tensor| Tensor::new(vec![n, n], (0..n * n).map(|k| t.at(perm[k / n], perm[k % n])).collect()).unwrap();
    GraphStructure {
        adjacency: pick(&s.adjacency),
        mask: pick(&s.mask),
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_rows(&perm.iter().map(|&p| t.row(p).to_vec()).collect::<Vec<_>>()).unwrap()
}

// ---------------------------------------------------------------- 1

const SMALL: &str = "width = 8
heads = 2
consensus_width = 8
signature_width = 4
high_layers = 2
low_layers = 2
feature_width = 6
objects_per_view = 6
max_nodes = 24
";

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(tape.shape(y), &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// A small model, an overlapping pair and its structures for one seed.
fn grad_fixture(seed: u64) -> (NopeModel, InstancePair) {
    let cfg = RunConfig {
        seed,
        ..RunConfig::parse_str(SMALL).unwrap()
    };
    let model = NopeModel::new(&cfg).unwrap();
    let pair = (seed * 31..)
        .map(|s| generate_pair(s, &cfg.synth()).unwrap())
        .find(|p| p.overlap && p.ego.len() >= 2 && p.mate.len() >= 2)
        .unwrap();
    (model, pair)
}

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let mut worst = [0.0f64; 6];
    let names = ["encoder", "matcher", "consensus", "pose", "L_high", "L_low"];
    let mut coords = 0;
    for seed in 0..20u64 {
        let (model, pair) = grad_fixture(seed);
        let c = &model.config;
        let count = model.params.len();
        let (es, ms) = (GraphStructure::from_graph(&pair.ego), GraphStructure::from_graph(&pair.mate));
        let embed = |g: &SceneGraph| model.encoder.encode(&model.params, g).unwrap();
        let (he, hm) = (embed(&pair.ego), embed(&pair.mate));
        let params = model.params.values().to_vec();
        let with = |extra: &[Tensor]| -> Vec<Tensor> { params.iter().chain(extra).cloned().collect() };
        let probes = Some(4);
        let mut check = |k: usize, r: nope_core::tensor::GradCheckReport| {
            worst[k] = worst[k].max(r.max_rel_error);
            coords += r.coords_checked;
        };

        // encoder forward, through parameters and node features
        check(
            0,
            grad_check_many(
                |t, v| {
                    let b = Binding::from_vars(v[..count].to_vec());
                    let h = model.encoder.forward(t, &b, v[count], &es, &mut ForwardCtx::inference()).unwrap();
                    weighted_sum(t, h, seed)
                },
                &with(&[pair.ego.features()]),
                1e-5,
                probes,
                seed,
            )
            .unwrap(),
        );
        // similarity and combined scores as functions of the embeddings
        let j = Tensor::new(vec![pair.ego.len(), c.signature_width], model.signature.data()[..pair.ego.len() * c.signature_width].to_vec()).unwrap();
        check(
            1,
            grad_check_many(
                |t, v| {
                    let s = similarity(t, v[0], v[1]).unwrap();
                    weighted_sum(t, s, seed + 1)
                },
                &[he.clone(), hm.clone()],
                1e-5,
                None,
                seed,
            )
            .unwrap(),
        );
        // consensus difference through S and the consensus encoder
        check(
            2,
            grad_check_many(
                |t, v| {
                    let b = Binding::from_vars(v[..count].to_vec());
                    let s = similarity(t, v[count], v[count + 1]).unwrap();
                    let jv = t.constant(j.clone());
                    let d = consensus_difference(t, &b, &model.consensus, s, jv, &es, &ms, &mut ForwardCtx::inference()).unwrap();
                    let sc = combined_scores(t, s, d).unwrap();
                    weighted_sum(t, sc, seed + 2)
                },
                &with(&[he.clone(), hm.clone()]),
                1e-5,
                probes,
                seed,
            )
            .unwrap(),
        );
        // pose network forward
        check(
            3,
            grad_check_many(
                |t, v| {
                    let b = Binding::from_vars(v[..count].to_vec());
                    let out = model.pose.forward(t, &b, v[count], v[count + 1], &mut ForwardCtx::inference()).unwrap();
                    let a = weighted_sum(t, out.position, seed + 3)?;
                    let q = weighted_sum(t, out.orientation, seed + 4)?;
                    t.add(a, q)
                },
                &with(&[he.clone(), hm.clone()]),
                1e-5,
                probes,
                seed,
            )
            .unwrap(),
        );
        // composed high-level loss
        check(
            4,
            grad_check_many(
                |t, v| {
                    let b = Binding::from_vars(v.to_vec());
                    let out = model.high_forward(t, &b, &pair.ego, &pair.mate, &es, &ms, &mut ForwardCtx::inference(), true).unwrap();
                    Ok(high_loss(t, out.scores, c.tau, &pair.truth).unwrap())
                },
                &params,
                1e-5,
                probes,
                seed,
            )
            .unwrap(),
        );
        // composed low-level loss
        check(
            5,
            grad_check_many(
                |t, v| {
                    let b = Binding::from_vars(v[..count].to_vec());
                    let out = model.pose.forward(t, &b, v[count], v[count + 1], &mut ForwardCtx::inference()).unwrap();
                    Ok(low_loss(t, out.position, out.orientation, &pair.pose).unwrap().0)
                },
                &with(&[he.clone(), hm.clone()]),
                1e-5,
                probes,
                seed,
            )
            .unwrap(),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let detail: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n}={w:.1e}")).collect();
    let pass = max <= 1e-4 && secs <= 120.0;
    report(1, pass, &format!("max rel err {max:.2e} ({}), {coords} coords, {secs:.1}s", detail.join(" ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_consensus_vanishes_on_permuted_copies() {
    let model = NopeModel::new(&RunConfig::default()).unwrap();
    let r = model.config.signature_width;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let g = GraphStructure::from_graph(&random_graph(n, 2, &mut rng));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut s = Tensor::zeros(&[n, n]);
        for (j, &i) in perm.iter().enumerate() {
            s.data_mut()[i * n + j] = 1.0;
        }
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, false);
        let sv = tape.constant(s);
        let j = tape.constant(Tensor::new(vec![n, r], model.signature.data()[..n * r].to_vec()).unwrap());
        let d = consensus_difference(&mut tape, &b, &model.consensus, sv, j, &g, &permuted(&g, &perm), &mut ForwardCtx::inference()).unwrap();
        worst = worst.max(tape.value(d).max_abs());
    }
    let pass = worst <= 1e-9;
    report(2, pass, &format!("max |D| over 100 permuted copies = {worst:.2e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn brute_force(scores: &Tensor, allowed: &Tensor) -> f64 {
    fn go(i: usize, used: &mut Vec<bool>, s: &Tensor, a: &Tensor) -> f64 {
        if i == s.rows() {
            return 0.0;
        }
        let mut best = go(i + 1, used, s, a);
        for j in 0..s.cols() {
            if !used[j] && a.at(i, j) == 1.0 {
                used[j] = true;
                best = best.max(s.at(i, j) + go(i + 1, used, s, a));
                used[j] = false;
            }
        }
        best
    }
    go(0, &mut vec![false; scores.cols()], scores, allowed)
}

/// Scores are multiples of 1/64 so every partial sum is exact and the
/// comparison needs no tolerance.
#[test]
fn criterion_03_assignment_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let scores = Tensor::new(vec![n, m], (0..n * m).map(|_| rng.gen_range(0..=64) as f64 / 64.0).collect()).unwrap();
        let refined = refine_threshold(&scores, rng.gen_range(0.1..0.9));
        let y = assign(&refined, &scores);
        let got: f64 = y.data().iter().zip(scores.data()).map(|(a, b)| a * b).sum();
        let feasible = (0..n).all(|i| y.row(i).iter().sum::<f64>() <= 1.0)
            && (0..m).all(|j| (0..n).map(|i| y.at(i, j)).sum::<f64>() <= 1.0)
            && y.data().iter().zip(refined.data()).all(|(a, b)| a <= b);
        if !feasible || got != brute_force(&scores, &refined) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(3, pass, &format!("{mismatches} of 500 instances differ from brute force"));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_encoder_permutation_equivariance() {
    let model = NopeModel::new(&RunConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let run = |x: &Tensor, s: &GraphStructure| {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let h = model.encoder.forward(&mut tape, &b, x, s, &mut ForwardCtx::inference()).unwrap();
        tape.value(h).clone()
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..=20);
        let g = random_graph(n, model.config.feature_width, &mut rng);
        let s = GraphStructure::from_graph(&g);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = run(&g.features(), &s);
        let moved = run(&permute_rows(&g.features(), &perm), &permuted(&s, &perm));
        worst = worst.max(moved.max_abs_diff(&permute_rows(&base, &perm)));
    }
    let pass = worst <= 1e-10;
    report(4, pass, &format!("max deviation over 50 graphs = {worst:.2e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_rotation_loss_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = |rng: &mut ChaCha8Rng| normalize_quat([0; 4].map(|_: i32| rng.gen_range(-1.0..1.0)));
    let neg = |q: [f64; 4]| q.map(|v| -v);
    let (mut self_max, mut sign_max, mut lo, mut hi) = (0.0f64, 0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let (p, q) = (unit(&mut rng), unit(&mut rng));
        self_max = self_max.max(chordal_rotation_loss(&q, &q).abs()).max(chordal_rotation_loss(&neg(q), &q).abs());
        let l = chordal_rotation_loss(&p, &q);
        sign_max = sign_max.max((l - chordal_rotation_loss(&p, &neg(q))).abs());
        lo = lo.min(l);
        hi = hi.max(l);
    }
    let pass = self_max == 0.0 && sign_max <= 1e-12 && lo >= 0.0 && hi <= 8.0;
    report(
        5,
        pass,
        &format!("L(q,±q) max {self_max:.1e}, sign gap {sign_max:.1e}, range [{lo:.3}, {hi:.3}]"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_pose_oracle_closure() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..SynthConfig::default()
    };
    let (mut angle, mut pos, mut used) = (0.0f64, 0.0f64, 0);
    for seed in 0..100 {
        let p = generate_pair(seed, &cfg).unwrap();
        let (ego, mate) = (p.ego.positions(), p.mate.positions());
        let (e, m): (Vec<_>, Vec<_>) = p.matches().into_iter().map(|(i, j)| (ego[i], mate[j])).unzip();
        let fit = kabsch_pose(&e, &m).unwrap_or_else(|err| panic!("seed {seed}: {err}"));
        angle = angle.max(fit.angle_to(&p.pose));
        pos = pos.max(fit.position_error(&p.pose));
        used += 1;
    }
    let pass = used == 100 && angle <= 1e-9 && pos <= 1e-9;
    report(6, pass, &format!("{used} seeds, max angle {angle:.1e} rad, max position {pos:.1e} m"));
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_wire_format() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut size_ok, mut pos_ok, mut feat_ok, mut worst_ratio) = (true, true, true, 0.0f64);
    for k in 0..1000 {
        let n = rng.gen_range(0..=24);
        let df = rng.gen_range(1..=64);
        let g = build_graph(
            (0..n)
                .map(|i| {
                    let p = [0; 3].map(|_: i32| rng.gen_range(-50.0f32..50.0) as f64);
                    ObjectNode::new(i as u32, p, (0..df).map(|_| rng.gen_range(-4.0..4.0)).collect())
                })
                .collect(),
        )
        .unwrap();
        let bytes = encode(&g).unwrap();
        size_ok &= bytes.len() == 17 + n * (12 + df);
        let back = decode(&bytes).unwrap();
        pos_ok &= back.positions().iter().zip(g.positions()).all(|(a, b)| a.map(f64::to_bits) == b.map(f64::to_bits));
        if n > 0 {
            let scale = f32::from_le_bytes(bytes[9..13].try_into().unwrap()) as f64;
            let err = back.features().max_abs_diff(&g.features());
            if scale > 0.0 {
                worst_ratio = worst_ratio.max(err / scale);
            }
            feat_ok &= err <= scale / 2.0 * (1.0 + 1e-6);
        }
        if k == 0 {
            // the reference case
            let g30 = build_graph((0..30).map(|i| ObjectNode::new(i, [i as f64, 0.0, i as f64 * 0.5], vec![0.5; 256])).collect()).unwrap();
            size_ok &= encode(&g30).unwrap().len() == 8057;
        }
    }
    let pass = size_ok && pos_ok && feat_ok;
    report(
        8,
        pass,
        &format!("size formula {size_ok}, positions bit-exact {pos_ok}, max feature error {worst_ratio:.3} steps, n=30 d_f=256 packet 8057 B"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_metric_self_consistency() {
    let published = f1_score(0.8224, 0.8429);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let rows = (0..rng.gen_range(0..30))
            .map(|index| {
                let t = rng.gen_range(0..8);
                let p = rng.gen_range(0..8);
                let c = rng.gen_range(0..=t.min(p));
                InstanceRow {
                    index,
                    overlap_true: t > 0,
                    overlap_pred: p > 0,
                    true_matches: t,
                    pred_matches: p,
                    correct_matches: c,
                    pe: (p > 0).then(|| rng.gen_range(0.0..20.0)),
                    re: (p > 0).then(|| rng.gen_range(0.0..8.0)),
                    ps: 17,
                }
            })
            .collect();
        let r = MetricsReport::from_rows(rows);
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        worst = worst.max((f1_score(back.precision, back.recall) - back.f1).abs());
    }
    let pass = (published - 0.8325).abs() <= 5e-4 && worst <= 5e-4;
    report(11, pass, &format!("F1(0.8224, 0.8429) = {published:.4}; max stored-vs-recomputed gap {worst:.1e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- shared model

struct Desk {
    config: RunConfig,
    model: NopeModel,
    log: Vec<EpochLog>,
    seconds: f64,
    train: Vec<InstancePair>,
    test: Vec<InstancePair>,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let config = RunConfig::default();
        let (train_set, test) = make_split(
            config.seed,
            config.train_size,
            config.test_size,
            config.non_overlap_mix,
            &config.synth(),
        )
        .unwrap();
        let start = Instant::now();
        let out = train(&config, &train_set, |e| {
            let mut err = std::io::stderr().lock();
            writeln!(err, "  [desk] {:?} epoch {:>2} loss {:.5} ({:.1}s)", e.phase, e.epoch, e.loss, e.seconds).unwrap();
        })
        .unwrap();
        Desk {
            config,
            model: out.model,
            log: out.log,
            seconds: start.elapsed().as_secs_f64(),
            train: train_set,
            test,
        }
    })
}

fn cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[test]
fn criterion_07_desk_scale_learning() {
    let d = desk();
    let r = evaluate(&d.model, &d.test, d.config.tau, Switches::default()).unwrap();
    let high: Vec<f64> = d.log.iter().filter(|e| e.phase == Phase::High).map(|e| e.loss).collect();
    let drop = 1.0 - high.last().unwrap() / high[0];
    // the budget is stated for four cores; scale the measured time by the
    // cores actually available (capped at four)
    let used = cores().min(4);
    let four_core = d.seconds * used as f64 / 4.0;
    let (base_pe, base_re) = mean_pose_baseline(&d.train, &d.test);
    // same model on seen pairs, to separate fitting from generalisation
    let seen = evaluate(&d.model, &d.train[..d.test.len()], d.config.tau, Switches::default()).unwrap();
    let checks = [
        ("time", four_core <= 1800.0),
        ("F1", r.f1 >= 0.85),
        ("NDA", r.nda >= 0.90),
        ("medianPE", r.median_pe <= 10.0),
        ("RE", r.mean_re <= 1.0),
        ("phase1 drop", drop >= 0.5),
    ];
    let pass = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        7,
        pass,
        &format!(
            "F1={:.4} NDA={:.4} medianPE={:.2} m meanRE={:.4}; phase-1 loss drop {:.0}%; train {:.0}s on {} core(s), {:.0}s at 4 cores; mean-pose baseline medianPE={:.2} RE={:.4}; training-subset medianPE={:.2}{}",
            r.f1,
            r.nda,
            r.median_pe,
            r.mean_re,
            drop * 100.0,
            d.seconds,
            cores(),
            four_core,
            base_pe,
            base_re,
            seen.median_pe,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    );
    assert!(pass, "{}", r.summary());
}

#[test]
fn criterion_09_ablation_direction() {
    let d = desk();
    let mut lines = Vec::new();
    let mut pass = true;
    for k in 0..3u64 {
        let test = make_dataset(d.config.seed + 1000 + k, d.config.test_size, d.config.non_overlap_mix, &d.config.synth()).unwrap();
        let full = evaluate(&d.model, &test, d.config.tau, Switches::default()).unwrap();
        let no_d = evaluate(&d.model, &test, d.config.tau, Switches { consensus: false, gating: true }).unwrap();
        let ungated = evaluate(&d.model, &test, d.config.tau, Switches { consensus: true, gating: false }).unwrap();
        pass &= full.f1 > no_d.f1 && ungated.mean_pe_emitted > full.mean_pe_emitted;
        lines.push(format!(
            "seed {k}: F1 {:.4} vs noD {:.4}, PE {:.2} vs ungated {:.2}",
            full.f1, no_d.f1, full.mean_pe_emitted, ungated.mean_pe_emitted
        ));
    }
    report(9, pass, &lines.join("; "));
    assert!(pass);
}

#[test]
fn criterion_10_tau_sweep_interior_maximum() {
    let d = desk();
    let grid: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let rows = sweep_tau(&d.model, &d.test, &grid, true).unwrap();
    let best = rows.iter().map(|r| r.nda).fold(f64::NEG_INFINITY, f64::max);
    let (first, last) = (rows[0].nda, rows[rows.len() - 1].nda);
    let arg = rows.iter().find(|r| r.nda == best).unwrap().tau;
    let pass = best > first && best > last;
    let curve: Vec<String> = rows.iter().map(|r| format!("{:.1}:{:.3}", r.tau, r.nda)).collect();
    report(10, pass, &format!("NDA max {best:.3} at tau {arg:.1}; curve {}", curve.join(" ")));
    assert!(pass);
}

/// Features quantized by the wire format cost at most 0.02 F1.
#[test]
fn quantized_features_keep_f1() {
    let d = desk();
    let wire = |g: &SceneGraph| decode(&encode(g).unwrap()).unwrap();
    let quantized: Vec<InstancePair> = d
        .test
        .iter()
        .map(|p| InstancePair {
            ego: wire(&p.ego),
            mate: wire(&p.mate),
            ..p.clone()
        })
        .collect();
    let base = evaluate(&d.model, &d.test, d.config.tau, Switches::default()).unwrap();
    let q = evaluate(&d.model, &quantized, d.config.tau, Switches::default()).unwrap();
    let mut err = std::io::stderr().lock();
    writeln!(err, "  [wire] F1 {:.4} raw vs {:.4} quantized", base.f1, q.f1).unwrap();
    assert!(base.f1 - q.f1 <= 0.02);
}

/// Inference on generator fixtures: disjoint scenes and a graph paired with itself.
#[test]
fn inference_fixtures() {
    let d = desk();
    let clean = SynthConfig {
        noise_sigma: 0.0,
        disjoint: true,
        ..d.config.synth()
    };
    let mut disjoint_overlaps = 0;
    let mut worst_self_pe = 0.0f64;
    let mut self_misses = 0;
    for seed in 0..20 {
        let p = generate_pair(9000 + seed, &clean).unwrap();
        let r = d.model.infer(&p.ego, &p.mate, d.config.tau, Switches::default()).unwrap();
        if r.correspondence.overlap || r.pose.is_some() {
            disjoint_overlaps += 1;
        }
        let s = d.model.infer(&p.ego, &p.ego, d.config.tau, Switches::default()).unwrap();
        match s.pose {
            Some(pose) if s.correspondence.overlap => {
                worst_self_pe = worst_self_pe.max(pose.position.iter().map(|v| v * v).sum::<f64>().sqrt())
            }
            _ => self_misses += 1,
        }
    }
    let mut err = std::io::stderr().lock();
    writeln!(
        err,
        "  [infer] disjoint pairs declared overlapping: {disjoint_overlaps}/20; self pairs missed: {self_misses}/20, worst self PE {worst_self_pe:.3} m"
    )
    .unwrap();
    assert_eq!(disjoint_overlaps, 0);
    assert_eq!(self_misses, 0);
    assert!(worst_self_pe <= d.config.noise_sigma, "self-pair PE {worst_self_pe}");
}
