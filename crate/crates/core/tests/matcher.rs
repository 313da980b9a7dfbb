use nope_core::encoder::{EncoderConfig, GraphEncoder, GraphStructure};
use nope_core::graph::{build_graph, ObjectNode, SceneGraph};
use nope_core::matcher::{
    assign, combined_scores, consensus_difference, decide, detect_overlap, hard_high_loss, high_loss, refine_threshold,
    similarity, CorrespondenceResult,
};
use nope_core::nn::{ForwardCtx, ParamSet};
use nope_core::tensor::{grad_check_many, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn sim(a: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let s = similarity(&mut tape, a, b).unwrap();
    tape.value(s).clone()
}

#[test]
fn orthonormal_rows_give_identity() {
    let h = Tensor::from_rows(&[vec![0.6, 0.8, 0.0], vec![-0.8, 0.6, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert!(sim(&h, &h).max_abs_diff(&Tensor::identity(3)) < 1e-15);
}

#[test]
fn sixty_degrees_gives_one_half() {
    let a = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.5, 0.5 * 3f64.sqrt()]]).unwrap();
    assert!((sim(&a, &b).data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn random_similarity_matches_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&[4, 16], &mut rng), random(&[5, 16], &mut rng));
    let s = sim(&a, &b);
    for i in 0..4 {
        for j in 0..5 {
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            let na = a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            let v = s.at(i, j);
            assert!((-1.0..=1.0).contains(&v));
            assert!((v - dot / (na * nb)).abs() < 1e-14);
        }
    }
}

#[test]
fn similarity_width_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(similarity(&mut tape, a, b).is_err());
}

struct Consensus {
    params: ParamSet,
    encoder: GraphEncoder,
}

fn consensus_encoder(r: usize, seed: u64) -> Consensus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let cfg = EncoderConfig { input_width: r, width: 16, heads: 2, layers: 2 };
    let encoder = GraphEncoder::new(&mut params, "cons", cfg, &mut rng).unwrap();
    Consensus { params, encoder }
}

fn difference(c: &Consensus, s: &Tensor, j: &Tensor, ego: &GraphStructure, mate: &GraphStructure) -> Tensor {
    let mut tape = Tape::new();
    let b = c.params.bind(&mut tape, false);
    let (s, j) = (tape.constant(s.clone()), tape.constant(j.clone()));
    let d = consensus_difference(&mut tape, &b, &c.encoder, s, j, ego, mate, &mut ForwardCtx::inference()).unwrap();
    tape.value(d).clone()
}

fn random_graph(n: usize, width: usize, rng: &mut ChaCha8Rng) -> SceneGraph {
    build_graph(
        (0..n)
            .map(|k| {
                let p = [rng.gen_range(-10.0..10.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..20.0)];
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

fn permutation_matrix(perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut s = Tensor::zeros(&[n, n]);
    for (j, &i) in perm.iter().enumerate() {
        s.data_mut()[i * n + j] = 1.0;
    }
    s
}

#[test]
fn consensus_vanishes_on_identity() {
    let c = consensus_encoder(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = GraphStructure::from_graph(&random_graph(7, 2, &mut rng));
    let j = random(&[7, 4], &mut rng);
    assert!(difference(&c, &Tensor::identity(7), &j, &g, &g).max_abs() <= 1e-9);
}

#[test]
fn consensus_vanishes_on_hundred_permuted_copies() {
    let c = consensus_encoder(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let g = GraphStructure::from_graph(&random_graph(n, 2, &mut rng));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let j = random(&[n, 4], &mut rng);
        let d = difference(&c, &permutation_matrix(&perm), &j, &g, &permuted(&g, &perm));
        assert!(d.max_abs() <= 1e-9, "n={n}: {}", d.max_abs());
    }
}

/// One-hot embeddings make the clean copy's `S` the identity, so `D`
/// starts at zero and only the noise moves it.
#[test]
fn consensus_grows_with_feature_noise() {
    let c = consensus_encoder(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_graph(8, 2, &mut rng);
    let structure = GraphStructure::from_graph(&g);
    let j = random(&[8, 4], &mut rng);
    let noise = random(&[8, 256], &mut rng);
    let h = Tensor::new(vec![8, 256], (0..8 * 256).map(|k| f64::from(k % 256 == k / 256)).collect()).unwrap();
    assert!(difference(&c, &sim(&h, &h), &j, &structure, &structure).max_abs() <= 1e-12);
    let mut last = 0.0;
    for sigma in [0.1, 0.3, 1.0] {
        let data = h.data().iter().zip(noise.data()).map(|(a, e)| a + sigma * e).collect();
        let noisy = Tensor::new(vec![8, 256], data).unwrap();
        let d = difference(&c, &sim(&h, &noisy), &j, &structure, &structure).max_abs();
        assert!(d > last, "sigma {sigma}: {d} <= {last}");
        last = d;
    }
}

#[test]
fn threshold_examples() {
    let scores = Tensor::from_rows(&[vec![0.55, 0.65, 0.72]]).unwrap();
    assert_eq!(refine_threshold(&scores, 0.6).data(), &[0.0, 1.0, 1.0]);
    assert_eq!(refine_threshold(&scores, 0.9).data(), &[0.0, 0.0, 0.0]);
    assert_eq!(refine_threshold(&scores, -1e9).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn assign_examples() {
    let scores = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.7]]).unwrap();
    assert_eq!(assign(&Tensor::identity(2), &scores), Tensor::identity(2));
    assert_eq!(assign(&Tensor::zeros(&[2, 2]), &scores), Tensor::zeros(&[2, 2]));
    assert_eq!(assign(&Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3])).shape(), &[0, 3]);
}

/// Best total over every partial one-to-one assignment inside `allowed`.
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

fn objective(y: &Tensor, scores: &Tensor) -> f64 {
    y.data().iter().zip(scores.data()).map(|(a, b)| a * b).sum()
}

fn check_assignment(y: &Tensor, refined: &Tensor) {
    for i in 0..y.rows() {
        assert!(y.row(i).iter().sum::<f64>() <= 1.0);
    }
    for j in 0..y.cols() {
        assert!((0..y.rows()).map(|i| y.at(i, j)).sum::<f64>() <= 1.0);
    }
    for (a, b) in y.data().iter().zip(refined.data()) {
        assert!(a <= b);
    }
}

#[test]
fn assign_matches_brute_force_on_500_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let scores = Tensor::new(vec![6, 6], (0..36).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let refined = refine_threshold(&scores, rng.gen_range(0.2..0.9));
        let y = assign(&refined, &scores);
        check_assignment(&y, &refined);
        assert!((objective(&y, &scores) - brute_force(&scores, &refined)).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn assign_optimal_on_rectangular_masks(seed in any::<u64>(), n in 0usize..=6, m in 0usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = Tensor::new(vec![n, m], (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let refined = Tensor::new(vec![n, m], (0..n * m).map(|_| f64::from(rng.gen_bool(0.5))).collect()).unwrap();
        let y = assign(&refined, &scores);
        check_assignment(&y, &refined);
        prop_assert!((objective(&y, &scores) - brute_force(&scores, &refined)).abs() < 1e-9);
    }

    #[test]
    fn overlap_is_monotone_in_assignment(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Tensor::new(vec![n, m], (0..n * m).map(|_| f64::from(rng.gen_bool(0.2))).collect()).unwrap();
        let before = detect_overlap(&y);
        let k = rng.gen_range(0..n * m);
        y.data_mut()[k] = 1.0;
        prop_assert!(!before || detect_overlap(&y));
    }
}

#[test]
fn overlap_examples() {
    assert!(!detect_overlap(&Tensor::zeros(&[3, 3])));
    let mut y = Tensor::zeros(&[3, 3]);
    y.data_mut()[4] = 1.0;
    assert!(detect_overlap(&y));
    assert!(!detect_overlap(&Tensor::zeros(&[0, 4])));
}

#[test]
fn decide_combines_stages() {
    let s = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.3]]).unwrap();
    let r = decide(s.clone(), Tensor::zeros(&[2, 2]), 0.65);
    assert_eq!(r.pairs(), vec![(0, 0)]);
    assert!(r.overlap);
    let r = decide(s, Tensor::filled(&[2, 2], -0.5), 0.65);
    assert!(!r.overlap);
}

#[test]
fn large_difference_is_shrunk() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::zeros(&[1, 2]));
    let d = tape.constant(Tensor::from_rows(&[vec![-3.0, 1.0]]).unwrap());
    let c = combined_scores(&mut tape, s, d).unwrap();
    assert_eq!(tape.value(c).data(), &[-0.75, 0.25]);
}

#[test]
fn loss_at_threshold_is_quarter() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::filled(&[3, 4], 0.65));
    let l = high_loss(&mut tape, s, 0.65, &Tensor::zeros(&[3, 4])).unwrap();
    assert!((tape.value(l).data()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn saturated_predictions_have_tiny_loss() {
    let truth = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let scores = Tensor::from_rows(&[vec![0.6 + 10.0, 0.6 - 10.0], vec![0.6 - 10.0, 0.6 + 10.0]]).unwrap();
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let l = high_loss(&mut tape, s, 0.6, &truth).unwrap();
    assert!(tape.value(l).data()[0] <= 1e-4);
    assert_eq!(hard_high_loss(&refine_threshold(&scores, 0.6), &truth), 0.0);
}

#[test]
fn loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random(&[4, 5], &mut rng);
    let d = random(&[4, 5], &mut rng);
    let truth = Tensor::new(vec![4, 5], (0..20).map(|_| f64::from(rng.gen_bool(0.3))).collect()).unwrap();
    let report = grad_check_many(
        |t, v| {
            let sc = combined_scores(t, v[0], v[1])?;
            high_loss(t, sc, 0.4, &truth)
        },
        &[s, d],
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn correspondence_json_round_trip() {
    let r = decide(
        Tensor::from_rows(&[vec![0.9, 0.1, 0.3], vec![0.2, 0.8, 0.7]]).unwrap(),
        Tensor::zeros(&[2, 3]),
        0.65,
    );
    let text = serde_json::to_string(&r).unwrap();
    assert!(text.contains("\"overlap\":true"));
    assert!(text.contains("[[0.9,0.1,0.3],[0.2,0.8,0.7]]"));
    assert_eq!(serde_json::from_str::<CorrespondenceResult>(&text).unwrap(), r);
    let empty = decide(Tensor::zeros(&[0, 3]), Tensor::zeros(&[0, 3]), 0.65);
    let back: CorrespondenceResult = serde_json::from_str(&serde_json::to_string(&empty).unwrap()).unwrap();
    assert_eq!(back.assignment.shape(), &[0, 3]);
    assert!(!back.overlap);
}
