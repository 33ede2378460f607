mod support;

use mammoseg_core::datasplit::{exam_density, stratified_split, Ratios, SplitRecord, Subset};
use mammoseg_core::{DensityClass, View};
use proptest::prelude::*;
use support::corpora::{check_split, random_records};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn disjoint_grouped_and_deterministic(seed in any::<u64>(), exams in 1usize..80, split_seed in any::<u64>()) {
        let records = random_records(seed, exams);
        let split = stratified_split(&records, Ratios::default(), split_seed).unwrap();
        prop_assert_eq!(check_split(&records, &split), Ok(()));
        prop_assert_eq!(&split, &stratified_split(&records, Ratios::default(), split_seed).unwrap());
    }

    #[test]
    fn row_totals_are_column_sums(seed in any::<u64>(), exams in 1usize..40) {
        let records = random_records(seed, exams);
        let split = stratified_split(&records, Ratios::default(), 1).unwrap();
        for view in View::ALL {
            let t = split.summary.view(view);
            for s in Subset::ALL {
                prop_assert_eq!(t.row_total(s), t.counts[s as usize].iter().sum::<usize>());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    /// With at least 20 exams per class, each known class's test share is
    /// within one exam's worth of images of its target.
    #[test]
    fn test_share_within_one_exam(seed in any::<u64>(), split_seed in any::<u64>()) {
        let records = random_records(seed, 200);
        let split = stratified_split(&records, Ratios::default(), split_seed).unwrap();
        let mut by_exam: std::collections::BTreeMap<&str, Vec<&SplitRecord>> = Default::default();
        for r in &records {
            by_exam.entry(r.exam_id.as_str()).or_default().push(r);
        }
        for class in DensityClass::KNOWN {
            let members: Vec<&Vec<&SplitRecord>> = by_exam
                .values()
                .filter(|imgs| exam_density(imgs.iter().map(|r| r.density)) == class)
                .collect();
            if members.len() < 20 {
                continue;
            }
            let total: usize = members.iter().map(|m| m.len()).sum();
            let largest = members.iter().map(|m| m.len()).max().unwrap();
            let test: usize = members
                .iter()
                .filter(|m| split.subset_of(&m[0].exam_id) == Some(Subset::Test))
                .map(|m| m.len())
                .sum();
            let target = Ratios::default().test * total as f64;
            prop_assert!((test as f64 - target).abs() <= largest as f64, "{class:?}: {test} vs {target}");
        }
    }
}

#[test]
fn same_seed_same_split_different_seed_differs() {
    let records = random_records(3, 120);
    let a = stratified_split(&records, Ratios::default(), 42).unwrap();
    let b = stratified_split(&records, Ratios::default(), 43).unwrap();
    assert_ne!(a.exams, b.exams);
}
