mod common;

use ehpc::pilot::{accumulate_evidence, build_matrix, select_heads, EvidenceScoreMatrix};
use ehpc::reference::{fabricate_trace, ConcentratedCell, FabricationSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_subset<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    (0..n).filter(|_| rng.gen_bool(0.4)).collect()
}

proptest! {
    #[test]
    fn matches_naive_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = common::random_trace(&mut rng, 16);
        let evidence = random_subset(&mut rng, trace.seq_len);
        let m = accumulate_evidence(&trace, &evidence).unwrap();
        let oracle = common::naive_evidence(&trace, &evidence);
        for h in 0..trace.num_heads {
            for l in 0..trace.num_layers {
                match (m.get(h, l), oracle[h][l]) {
                    (Some(a), Some(b)) => {
                        prop_assert!((a - b).abs() <= 1e-12);
                        prop_assert!((0.0..=1.0 + 1e-4).contains(&a));
                    }
                    (None, None) => {}
                    other => prop_assert!(false, "coverage differs: {:?}", other),
                }
            }
        }
    }

    #[test]
    fn enlarging_evidence_never_decreases(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = common::random_trace(&mut rng, 16);
        let small = random_subset(&mut rng, trace.seq_len);
        let mut large = small.clone();
        large.extend(random_subset(&mut rng, trace.seq_len));
        let a = accumulate_evidence(&trace, &small).unwrap();
        let b = accumulate_evidence(&trace, &large).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn planted_head_is_recovered(
        layers in 1usize..6,
        heads in 1usize..6,
        n in 4usize..40,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = rng.gen_range(0..layers);
        let head = rng.gen_range(0..heads);
        let size = rng.gen_range(1..n);
        let mut targets: Vec<usize> = (0..n).collect();
        for i in 0..size {
            let j = rng.gen_range(i..n);
            targets.swap(i, j);
        }
        targets.truncate(size);
        let background = size as f64 / n as f64;
        let mass = rng.gen_range((background + 1e-3).min(1.0)..=1.0);
        prop_assume!(mass > background);
        let spec = FabricationSpec {
            num_layers: layers,
            num_heads: heads,
            seq_len: n,
            window: rng.gen_range(1..=n),
            cells: vec![ConcentratedCell { layer, head, targets: targets.clone(), mass }],
            background: Default::default(),
            token_ids: None,
        };
        let trace = fabricate_trace(&spec).unwrap();
        let s = build_matrix(&[accumulate_evidence(&trace, &targets).unwrap()]).unwrap();
        let set = select_heads(&s, 1).unwrap();
        prop_assert_eq!((set.layer, set.heads), (layer, vec![head]));
    }

    #[test]
    fn selection_ignores_positive_scaling(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..6),
        exp in -30i32..30,
        k in 1usize..6,
    ) {
        let s = EvidenceScoreMatrix::from_rows(&rows).unwrap();
        prop_assume!(k <= s.num_heads);
        let a = select_heads(&s, k).unwrap();
        let b = select_heads(&s.scaled(2f64.powi(exp)), k).unwrap();
        prop_assert_eq!((a.layer, a.heads), (b.layer, b.heads));
    }

    #[test]
    fn selection_is_deterministic_under_ties(
        grid in prop::collection::vec(prop::collection::vec(0u8..3, 3), 2..5),
        k in 1usize..3,
    ) {
        let rows: Vec<Vec<f64>> = grid.iter().map(|r| r.iter().map(|&v| v as f64 / 2.0).collect()).collect();
        let s = EvidenceScoreMatrix::from_rows(&rows).unwrap();
        let a = select_heads(&s, k).unwrap();
        prop_assert_eq!(&a, &select_heads(&s.clone(), k).unwrap());
        // Descending scores, ties by ascending head index.
        let score = |h: usize| rows[h][a.layer];
        for w in a.heads.windows(2) {
            prop_assert!(score(w[0]) > score(w[1]) || (score(w[0]) == score(w[1]) && w[0] < w[1]));
        }
    }
}

#[test]
fn general_scaling_on_separated_scores() {
    let s = EvidenceScoreMatrix::from_rows(&[vec![0.1, 0.5, 0.2], vec![0.3, 0.05, 0.6], vec![0.2, 0.4, 0.1]]).unwrap();
    let base = select_heads(&s, 2).unwrap();
    for c in [1e-6, 0.37, 3.7, 1e6] {
        let scaled = select_heads(&s.scaled(c), 2).unwrap();
        assert_eq!((scaled.layer, &scaled.heads), (base.layer, &base.heads));
    }
}
