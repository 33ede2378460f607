//! Random split fixtures and the grouping/disjointness checker.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mammoseg_core::datasplit::{SplitAssignment, SplitRecord, Subset};
use mammoseg_core::{DensityClass, View};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exams with 1-4 images each. Every exam gets a class drawn uniformly from
/// the five density values; images occasionally carry a different known class.
pub fn random_records(seed: u64, exams: usize) -> Vec<SplitRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for e in 0..exams {
        let class = DensityClass::ALL[rng.random_range(0..5)];
        for i in 0..rng.random_range(1..=4) {
            let density = if class.is_known() && rng.random_bool(0.1) {
                DensityClass::KNOWN[rng.random_range(0..4)]
            } else {
                class
            };
            out.push(SplitRecord {
                image_id: format!("e{e}_{i}"),
                exam_id: format!("e{e}"),
                view: if i % 2 == 0 { View::Mlo } else { View::Cc },
                density,
            });
        }
    }
    out
}

/// Every exam assigned exactly once, all images of an exam in one subset,
/// summary totals equal to the record count.
pub fn check_split(records: &[SplitRecord], split: &SplitAssignment) -> Result<(), String> {
    let exams: BTreeSet<&str> = records.iter().map(|r| r.exam_id.as_str()).collect();
    let assigned: BTreeSet<&str> = split.exams.keys().map(String::as_str).collect();
    if exams != assigned {
        return Err(format!("assigned exams {} differ from record exams {}", assigned.len(), exams.len()));
    }
    let mut seen: BTreeMap<&str, BTreeSet<Subset>> = BTreeMap::new();
    for r in records {
        let s = split.subset_of(&r.exam_id).ok_or_else(|| format!("{} unassigned", r.exam_id))?;
        seen.entry(&r.exam_id).or_default().insert(s);
    }
    if let Some((exam, subsets)) = seen.iter().find(|(_, s)| s.len() != 1) {
        return Err(format!("exam {exam} spans {subsets:?}"));
    }
    let mut pairwise = Vec::new();
    for s in Subset::ALL {
        pairwise.push(split.exams_in(s).collect::<BTreeSet<_>>());
    }
    for i in 0..3 {
        for j in i + 1..3 {
            if !pairwise[i].is_disjoint(&pairwise[j]) {
                return Err(format!("subsets {i} and {j} overlap"));
            }
        }
    }
    let total = split.summary.mlo.total() + split.summary.cc.total();
    if total != records.len() {
        return Err(format!("summary counts {total} images, records hold {}", records.len()));
    }
    Ok(())
}
