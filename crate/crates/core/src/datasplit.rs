//! Exam-grouped, density-balanced train/validation/test assignment.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{DensityClass, View};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("EmptyDataset: no records to split")]
    EmptyDataset,
    #[error("InvalidRatios: {0}")]
    InvalidRatios(String),
    #[error("UnknownExam: {0}")]
    UnknownExam(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Validation, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Subset::Train),
            "validation" | "val" => Ok(Subset::Validation),
            "test" => Ok(Subset::Test),
            _ => Err(format!("unknown subset {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Self {
            train: 0.66,
            validation: 0.23,
            test: 0.11,
        }
    }
}

impl Ratios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, SplitError> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        let all = self.as_array();
        if all.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(SplitError::InvalidRatios(format!("ratios must be positive, got {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SplitError::InvalidRatios(format!("ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

impl std::str::FromStr for Ratios {
    type Err = SplitError;

    /// Parses `"0.66,0.23,0.11"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SplitError::InvalidRatios(format!("{s:?}: {e}")))?;
        match parts[..] {
            [a, b, c] => Ratios::new(a, b, c),
            _ => Err(SplitError::InvalidRatios(format!("expected three values, got {s:?}"))),
        }
    }
}

/// The per-image facts the splitter needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub image_id: String,
    pub exam_id: String,
    pub view: View,
    pub density: DensityClass,
}

/// Image counts per subset and density for one view, plus row totals.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ViewTable {
    /// `counts[subset][density]`, densities in `DensityClass::ALL` order.
    pub counts: [[usize; 5]; 3],
}

impl ViewTable {
    pub fn row_total(&self, subset: Subset) -> usize {
        self.counts[subset as usize].iter().sum()
    }

    pub fn total(&self) -> usize {
        Subset::ALL.iter().map(|&s| self.row_total(s)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mlo: ViewTable,
    pub cc: ViewTable,
}

impl SplitSummary {
    pub fn view(&self, view: View) -> &ViewTable {
        match view {
            View::Mlo => &self.mlo,
            View::Cc => &self.cc,
        }
    }

    fn view_mut(&mut self, view: View) -> &mut ViewTable {
        match view {
            View::Mlo => &mut self.mlo,
            View::Cc => &mut self.cc,
        }
    }

    /// Subset-by-density table with an MLO block followed by a CC block.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| View | Subset | A | B | C | D | N/D | Total |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for view in [View::Mlo, View::Cc] {
            let table = self.view(view);
            for subset in Subset::ALL {
                let c = &table.counts[subset as usize];
                out.push_str(&format!(
                    "| {view} | {subset} | {} | {} | {} | {} | {} | {} |\n",
                    c[0],
                    c[1],
                    c[2],
                    c[3],
                    c[4],
                    table.row_total(subset)
                ));
            }
        }
        out
    }
}

/// Contents of `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: Ratios,
    pub exams: BTreeMap<String, Subset>,
    pub summary: SplitSummary,
}

impl SplitAssignment {
    pub fn subset_of(&self, exam_id: &str) -> Option<Subset> {
        self.exams.get(exam_id).copied()
    }

    pub fn exams_in(&self, subset: Subset) -> impl Iterator<Item = &str> {
        self.exams
            .iter()
            .filter(move |(_, s)| **s == subset)
            .map(|(e, _)| e.as_str())
    }
}

/// Most frequent known density among an exam's images; `ND` if none is
/// known. Ties go to the lower class.
pub fn exam_density(densities: impl IntoIterator<Item = DensityClass>) -> DensityClass {
    let mut counts = [0usize; 4];
    for d in densities {
        if d.is_known() {
            counts[d.index()] += 1;
        }
    }
    let mut best = (0usize, DensityClass::Nd);
    for d in DensityClass::KNOWN {
        if counts[d.index()] > best.0 {
            best = (counts[d.index()], d);
        }
    }
    best.1
}

/// Subset with the largest relative deficit `(target - assigned) / target`;
/// the lowest subset index wins ties.
fn neediest(targets: [f64; 3], assigned: [usize; 3]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for s in 0..3 {
        let deficit = (targets[s] - assigned[s] as f64) / targets[s];
        if deficit > best.0 {
            best = (deficit, s);
        }
    }
    best.1
}

/// Groups images by exam and assigns whole exams to subsets.
///
/// Exams of each known density class are shuffled with the seed and dealt,
/// one at a time, to the subset whose image count for that class lags its
/// target share the most. ND exams are then dealt the same way against the
/// overall image totals.
pub fn stratified_split(records: &[SplitRecord], ratios: Ratios, seed: u64) -> Result<SplitAssignment, SplitError> {
    ratios.validate()?;
    if records.is_empty() {
        return Err(SplitError::EmptyDataset);
    }
    let mut exams: BTreeMap<&str, Vec<&SplitRecord>> = BTreeMap::new();
    for r in records {
        exams.entry(r.exam_id.as_str()).or_default().push(r);
    }
    let mut by_class: [Vec<(&str, usize)>; 5] = Default::default();
    for (exam, imgs) in &exams {
        let d = exam_density(imgs.iter().map(|r| r.density));
        by_class[d.index()].push((exam, imgs.len()));
    }

    let shares = ratios.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: BTreeMap<String, Subset> = BTreeMap::new();
    let mut overall = [0usize; 3];
    for class in DensityClass::ALL {
        let members = &mut by_class[class.index()];
        members.shuffle(&mut rng);
        let pool_total: usize = if class.is_known() {
            members.iter().map(|(_, n)| n).sum()
        } else {
            records.len()
        };
        let targets = shares.map(|s| s * pool_total as f64);
        let mut assigned = if class.is_known() { [0; 3] } else { overall };
        for &(exam, n) in members.iter() {
            let s = neediest(targets, assigned);
            assigned[s] += n;
            overall[s] += n;
            assignment.insert(exam.to_string(), Subset::ALL[s]);
        }
    }

    let mut out = SplitAssignment {
        seed,
        ratios,
        exams: assignment,
        summary: SplitSummary::default(),
    };
    out.summary = summarize_split(&out, records)?;
    Ok(out)
}

/// Image counts per view, subset and density.
pub fn summarize_split(assignment: &SplitAssignment, records: &[SplitRecord]) -> Result<SplitSummary, SplitError> {
    let mut summary = SplitSummary::default();
    for r in records {
        let subset = assignment
            .subset_of(&r.exam_id)
            .ok_or_else(|| SplitError::UnknownExam(r.exam_id.clone()))?;
        summary.view_mut(r.view).counts[subset as usize][r.density.index()] += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(image: &str, exam: &str, view: View, density: DensityClass) -> SplitRecord {
        SplitRecord {
            image_id: image.into(),
            exam_id: exam.into(),
            view,
            density,
        }
    }

    #[test]
    fn exams_stay_together() {
        let records = vec![
            rec("a1", "a", View::Cc, DensityClass::A),
            rec("a2", "a", View::Mlo, DensityClass::A),
            rec("b1", "b", View::Cc, DensityClass::B),
            rec("b2", "b", View::Mlo, DensityClass::B),
        ];
        let split = stratified_split(&records, Ratios::new(0.5, 0.25, 0.25).unwrap(), 0).unwrap();
        assert_eq!(split.exams.len(), 2);
        let t = split.summary.cc.total() + split.summary.mlo.total();
        assert_eq!(t, 4);
    }

    #[test]
    fn twelve_exams_deal_one_per_class_per_subset() {
        let mut records = Vec::new();
        for (k, d) in DensityClass::KNOWN.iter().enumerate() {
            for j in 0..3 {
                let exam = format!("e{k}{j}");
                records.push(rec(&format!("{exam}-cc"), &exam, View::Cc, *d));
                records.push(rec(&format!("{exam}-mlo"), &exam, View::Mlo, *d));
            }
        }
        let third = 1.0 / 3.0;
        let split = stratified_split(&records, Ratios::new(third, third, 1.0 - 2.0 * third).unwrap(), 0).unwrap();
        for subset in Subset::ALL {
            for d in DensityClass::KNOWN {
                let n = records
                    .iter()
                    .filter(|r| r.density == d && r.view == View::Cc && split.subset_of(&r.exam_id) == Some(subset))
                    .count();
                assert_eq!(n, 1, "{subset} {d}");
            }
            assert_eq!(split.summary.cc.row_total(subset), 4);
            assert_eq!(split.summary.mlo.row_total(subset), 4);
        }
    }

    #[test]
    fn empty_and_bad_ratios_are_rejected() {
        assert_eq!(stratified_split(&[], Ratios::default(), 1), Err(SplitError::EmptyDataset));
        assert!(matches!(Ratios::new(0.5, 0.5, 0.0), Err(SplitError::InvalidRatios(_))));
        assert!(matches!(Ratios::new(0.5, 0.3, 0.3), Err(SplitError::InvalidRatios(_))));
        assert!(matches!("0.5,0.5".parse::<Ratios>(), Err(SplitError::InvalidRatios(_))));
        assert_eq!("0.66,0.23,0.11".parse::<Ratios>().unwrap(), Ratios::default());
    }

    #[test]
    fn single_exam_fills_one_cell() {
        let records = vec![rec("x", "e", View::Mlo, DensityClass::C)];
        let split = stratified_split(&records, Ratios::default(), 3).unwrap();
        let nonzero: usize = [&split.summary.mlo, &split.summary.cc]
            .iter()
            .flat_map(|t| t.counts.iter().flatten())
            .filter(|&&c| c > 0)
            .count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn exam_density_prefers_majority_known_class() {
        use DensityClass::*;
        assert_eq!(exam_density([Nd, B, B, C]), B);
        assert_eq!(exam_density([Nd, Nd]), Nd);
        assert_eq!(exam_density([D, C]), C);
    }

    #[test]
    fn markdown_lists_both_views() {
        let records = vec![rec("x", "e", View::Mlo, DensityClass::C)];
        let split = stratified_split(&records, Ratios::default(), 3).unwrap();
        let md = split.summary.to_markdown();
        assert!(md.contains("| A | B | C | D | N/D | Total |"));
        assert_eq!(md.lines().count(), 8);
    }

    #[test]
    fn json_round_trip() {
        let records = vec![rec("x", "e", View::Mlo, DensityClass::C), rec("y", "f", View::Cc, DensityClass::Nd)];
        let split = stratified_split(&records, Ratios::default(), 3).unwrap();
        let json = serde_json::to_string(&split).unwrap();
        assert!(json.contains("\"exams\""));
        let back: SplitAssignment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, split);
    }
}
