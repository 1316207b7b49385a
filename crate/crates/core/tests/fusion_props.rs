use mmvb::autodiff::Tape;
use mmvb::distributions::DiagonalGaussian;
use mmvb::fusion::{enumerate_subsets, mopoe_posteriors, poe_fuse, ExpertSet};
use proptest::prelude::*;

type Params = (Vec<f64>, Vec<f64>);

fn expert(tape: &mut Tape, rows: usize, dim: usize, p: &Params) -> DiagonalGaussian {
    let m = tape.constant(&[rows, dim], p.0.clone());
    let l = tape.constant(&[rows, dim], p.1.clone());
    DiagonalGaussian::new(tape, m, l).unwrap()
}

fn fuse(rows: usize, dim: usize, experts: &[Params], prior: bool) -> Params {
    let mut tape = Tape::new();
    let e: Vec<_> = experts.iter().map(|p| Some(expert(&mut tape, rows, dim, p))).collect();
    let set = ExpertSet::new(&tape, e).unwrap();
    let q = poe_fuse(&mut tape, &set, prior).unwrap();
    (tape.value(q.mean()).to_vec(), tape.value(q.log_variance()).to_vec())
}

fn expert_sets() -> impl Strategy<Value = (usize, usize, Vec<Params>)> {
    (1usize..4, 1usize..5, 1usize..6).prop_flat_map(|(rows, dim, k)| {
        let n = rows * dim;
        let one = (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(-3.0f64..3.0, n));
        (Just(rows), Just(dim), prop::collection::vec(one, k))
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn precisions_add((rows, dim, experts) in expert_sets(), prior in any::<bool>()) {
        let (mean, logvar) = fuse(rows, dim, &experts, prior);
        for i in 0..rows * dim {
            // oracle: precision-weighted average, written out directly
            let mut precision = if prior { 1.0 } else { 0.0 };
            let mut weighted = 0.0;
            for (m, l) in &experts {
                precision += (-l[i]).exp();
                weighted += m[i] * (-l[i]).exp();
            }
            let var = logvar[i].exp();
            prop_assert!(close(1.0 / var, precision, 1e-12));
            prop_assert!(close(mean[i], weighted / precision, 1e-12));
            let smallest = experts.iter().map(|(_, l)| l[i].exp()).fold(f64::INFINITY, f64::min);
            prop_assert!(var <= smallest * (1.0 + 1e-12));
        }
    }

    #[test]
    fn permutation_invariant((rows, dim, experts) in expert_sets(), rotate in 0usize..6, prior in any::<bool>()) {
        let mut permuted = experts.clone();
        permuted.reverse();
        let r = rotate % permuted.len();
        permuted.rotate_left(r);
        let (a, b) = (fuse(rows, dim, &experts, prior), fuse(rows, dim, &permuted, prior));
        for i in 0..rows * dim {
            prop_assert!(close(a.0[i], b.0[i], 1e-12) && close(a.1[i], b.1[i], 1e-12));
        }
    }

    #[test]
    fn identical_experts_divide_the_variance((rows, dim, experts) in expert_sets(), k in 1usize..9) {
        let copies = vec![experts[0].clone(); k];
        let (mean, logvar) = fuse(rows, dim, &copies, false);
        for i in 0..rows * dim {
            prop_assert!(close(mean[i], experts[0].0[i], 1e-12));
            prop_assert!(close(logvar[i].exp(), experts[0].1[i].exp() / k as f64, 1e-12));
        }
    }

    #[test]
    fn mopoe_singletons_are_poe_with_prior((rows, dim, experts) in expert_sets()) {
        let experts = &experts[..experts.len().min(4)];
        let mut tape = Tape::new();
        let e: Vec<_> = experts.iter().map(|p| Some(expert(&mut tape, rows, dim, p))).collect();
        let set = ExpertSet::new(&tape, e).unwrap();
        let lattice = enumerate_subsets(experts.len()).unwrap();
        let posteriors = mopoe_posteriors(&mut tape, &set, &lattice, true).unwrap();
        prop_assert_eq!(posteriors.len(), (1 << experts.len()) - 1);
        for (s, q) in lattice.subsets.iter().zip(&posteriors) {
            if let [m] = s.as_slice() {
                let direct = fuse(rows, dim, &experts[*m..=*m], true);
                prop_assert_eq!(tape.value(q.mean()), direct.0.as_slice());
                prop_assert_eq!(tape.value(q.log_variance()), direct.1.as_slice());
            }
        }
    }
}
