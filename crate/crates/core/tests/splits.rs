mod common;

use std::collections::BTreeSet;

use common::reference::missing_by_enumeration as brute_force;
use p2i_core::dataset::{make_split, missing_frame_ids, Setting};
use p2i_core::Error;
use proptest::prelude::*;

#[test]
fn setting_a_matches_enumeration() {
    for (length, n) in [(500, 1), (500, 3), (250, 20), (101, 1)] {
        let ds = common::reference::id_only_dataset(&[length]);
        let plan = make_split(&ds, Setting::A, n, &[]).unwrap();
        let test: BTreeSet<u32> = plan.test.iter().map(|r| r.1).collect();
        assert_eq!(test, brute_force(length, n), "length {length}, N {n}");
        assert_eq!(plan.train.len() + plan.test.len(), length as usize);
    }
    assert_eq!(missing_frame_ids(500, 1), vec![101, 201, 301, 401]);
    let expect: Vec<u32> = (101..=120).chain(201..=220).collect();
    assert_eq!(missing_frame_ids(250, 20), expect);
}

#[test]
fn setting_a_short_sequence_is_empty_test() {
    let ds = common::reference::id_only_dataset(&[100]);
    assert!(matches!(make_split(&ds, Setting::A, 1, &[]), Err(Error::EmptyTest(_))));
}

#[test]
fn setting_b_and_c() {
    let ds = common::reference::id_only_dataset(&[5, 6, 7]);
    let b = make_split(&ds, Setting::B, 0, &[1]).unwrap();
    assert!(b.train.iter().all(|r| r.0 == 0) && b.train.len() == 5);
    assert!(b.test.iter().all(|r| r.0 == 1) && b.test.len() == 6);
    let b0 = make_split(&ds, Setting::B, 0, &[0]).unwrap();
    assert!(b0.train.iter().all(|r| r.0 == 1));
    let c = make_split(&ds, Setting::C, 0, &[0, 2]).unwrap();
    assert_eq!((c.train.len(), c.test.len()), (6, 12));
    assert!(matches!(make_split(&ds, Setting::C, 0, &[0, 1, 2]), Err(Error::InvalidSplit(_))));
    assert!(make_split(&ds, Setting::B, 0, &[3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn splits_are_disjoint_and_cover(
        lengths in prop::collection::vec(1u32..450, 1..4),
        n in 1u32..25,
        setting in 0usize..3,
        pick in 0usize..4,
    ) {
        let ds = common::reference::id_only_dataset(&lengths);
        let held = pick % lengths.len();
        let (setting, seqs) = match setting {
            0 => (Setting::A, vec![]),
            1 => (Setting::B, vec![held]),
            _ => (Setting::C, vec![held]),
        };
        match make_split(&ds, setting, n, &seqs) {
            Ok(plan) => {
                let train: BTreeSet<_> = plan.train.iter().copied().collect();
                let test: BTreeSet<_> = plan.test.iter().copied().collect();
                prop_assert!(train.is_disjoint(&test));
                prop_assert_eq!(train.len(), plan.train.len());
                prop_assert!(!test.is_empty());
                if setting == Setting::A {
                    prop_assert_eq!(train.len() + test.len(), ds.len());
                    for (s, f) in &test {
                        prop_assert!(brute_force(lengths[*s], n).contains(f));
                    }
                }
                if setting != Setting::A {
                    let train_seqs: BTreeSet<_> = train.iter().map(|r| r.0).collect();
                    prop_assert!(!train_seqs.contains(&held));
                }
            }
            Err(e) => {
                let legit = match setting {
                    Setting::A => lengths.iter().all(|l| *l < 100 + n),
                    _ => lengths.len() == 1,
                };
                prop_assert!(legit, "unexpected error {e}");
            }
        }
    }
}
