use proptest::prelude::*;
use swingnet::{QGrid, VolumeConstraints};

fn constraints() -> impl Strategy<Value = VolumeConstraints> {
    (0i64..3, 1i64..4, 1usize..25)
        .prop_flat_map(|(q_min, extra, n)| {
            let q_max = q_min + extra;
            let lo = q_min * n as i64;
            let hi = q_max * n as i64;
            (Just(q_min), Just(q_max), Just(n), lo..=hi)
                .prop_flat_map(move |(a, b, n, t_min)| (Just(a), Just(b), Just(n), Just(t_min), 0i64..=(hi - t_min) / extra))
        })
        .prop_map(|(q_min, q_max, n, t_min, steps)| {
            VolumeConstraints::firm(q_min, q_max, t_min, t_min + steps * (q_max - q_min), n)
        })
}

proptest! {
    #[test]
    fn grid_is_closed_under_admissible_controls(v in constraints()) {
        prop_assert!(v.validate().is_empty(), "{:?}", v.validate());
        let g = QGrid::new(v).unwrap();
        prop_assert_eq!(g.bounds(0), (0, 0));
        let (lo_n, hi_n) = g.bounds(v.n);
        prop_assert!(lo_n >= v.total_min && hi_n <= v.total_max);
        for k in 0..v.n {
            let (next_lo, next_hi) = g.bounds(k + 1);
            let mut reached_lo = i64::MAX;
            let mut reached_hi = i64::MIN;
            for q in g.levels(k) {
                let (a, b) = g.admissible(k, q).unwrap();
                prop_assert!(v.q_min <= a && a <= b && b <= v.q_max);
                prop_assert!(next_lo <= q + a && q + b <= next_hi);
                prop_assert_eq!(g.is_trivial(k, q).unwrap(), a == b);
                reached_lo = reached_lo.min(q + a);
                reached_hi = reached_hi.max(q + b);
            }
            prop_assert_eq!((reached_lo, reached_hi), (next_lo, next_hi));
            let tasks = g.tasks(k);
            prop_assert!(tasks.iter().all(|q| !g.is_trivial(k, *q).unwrap()));
            prop_assert_eq!(tasks.len(), g.levels(k).filter(|q| !g.is_trivial(k, *q).unwrap()).count());
        }
    }

    #[test]
    fn capacity_feature_is_a_unit_interval(v in constraints(), level in -10i64..100) {
        let m = v.remaining_capacity(level);
        prop_assert!((0.0..=1.0).contains(&m));
    }
}
