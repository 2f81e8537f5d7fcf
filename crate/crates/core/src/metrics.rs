//! Verification error rates over mated / non-mated score sets.
//!
//! The accept rule everywhere is `score >= threshold`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Pairing};
use crate::embedding::{cosine_from_parts, cosine_similarity, dot, Embedding};
use crate::error::{Error, Result};

/// Threshold above every possible cosine score; accepts nothing.
pub const REJECT_ALL: f64 = 1.0 + 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub mated: Vec<f64>,
    pub non_mated: Vec<f64>,
    pub config_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fmr: f64,
    /// `None` when the score set has no mated scores.
    pub fnmr: Option<f64>,
    pub target_fmr: Option<f64>,
}

impl OperatingPoint {
    /// An operating point known only by its threshold.
    pub fn at_threshold(threshold: f64) -> Self {
        OperatingPoint {
            threshold,
            fmr: f64::NAN,
            fnmr: None,
            target_fmr: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    s
}

/// Number of elements of ascending `s` that are `< t`.
fn count_below(s: &[f64], t: f64) -> usize {
    s.partition_point(|&x| x < t)
}

impl ScoreSet {
    pub fn new(mated: Vec<f64>, non_mated: Vec<f64>, config_label: impl Into<String>) -> Self {
        ScoreSet {
            mated,
            non_mated,
            config_label: config_label.into(),
        }
    }

    fn require_mated(&self) -> Result<()> {
        if self.mated.is_empty() {
            return Err(Error::EmptyScoreList("mated"));
        }
        Ok(())
    }

    fn require_non_mated(&self) -> Result<()> {
        if self.non_mated.is_empty() {
            return Err(Error::EmptyScoreList("non-mated"));
        }
        Ok(())
    }

    /// Fraction of non-mated scores accepted at `t`.
    pub fn fmr_at(&self, t: f64) -> Result<f64> {
        self.require_non_mated()?;
        let accepted = self.non_mated.iter().filter(|&&s| s >= t).count();
        Ok(accepted as f64 / self.non_mated.len() as f64)
    }

    /// Fraction of mated scores rejected at `t`.
    pub fn fnmr_at(&self, t: f64) -> Result<f64> {
        self.require_mated()?;
        let rejected = self.mated.iter().filter(|&&s| s < t).count();
        Ok(rejected as f64 / self.mated.len() as f64)
    }

    /// Smallest candidate threshold (unique non-mated scores plus [`REJECT_ALL`])
    /// whose FMR does not exceed `target`.
    pub fn threshold_at_fmr(&self, target: f64) -> Result<OperatingPoint> {
        self.require_non_mated()?;
        if !(target > 0.0 && target <= 1.0) {
            return Err(Error::InvalidRate(target));
        }
        let non = sorted(&self.non_mated);
        let n = non.len();
        let mut threshold = REJECT_ALL;
        let mut accepted = 0;
        // Unique values ascending; acceptance count at the first occurrence of each.
        let mut i = 0;
        while i < n {
            let count = n - i;
            if count as f64 / n as f64 <= target {
                threshold = non[i];
                accepted = count;
                break;
            }
            let v = non[i];
            while i < n && non[i] == v {
                i += 1;
            }
        }
        let fnmr = if self.mated.is_empty() {
            None
        } else {
            Some(self.fnmr_at(threshold)?)
        };
        Ok(OperatingPoint {
            threshold,
            fmr: accepted as f64 / n as f64,
            fnmr,
            target_fmr: Some(target),
        })
    }

    /// Operating point at a fixed threshold.
    pub fn operating_point(&self, threshold: f64) -> Result<OperatingPoint> {
        Ok(OperatingPoint {
            threshold,
            fmr: self.fmr_at(threshold)?,
            fnmr: Some(self.fnmr_at(threshold)?),
            target_fmr: None,
        })
    }

    /// Equal error rate from the empirical step functions. Among all observed
    /// scores used as thresholds, picks the one minimizing `|FMR - FNMR|`
    /// (lowest threshold on ties) and reports `(FMR + FNMR) / 2` there.
    pub fn eer(&self) -> Result<EerPoint> {
        self.require_mated()?;
        self.require_non_mated()?;
        let mated = sorted(&self.mated);
        let non = sorted(&self.non_mated);
        let (nm, nn) = (mated.len() as u128, non.len() as u128);
        let mut candidates: Vec<f64> = mated.iter().chain(&non).copied().collect();
        candidates.sort_unstable_by(f64::total_cmp);
        candidates.dedup();

        let mut best: Option<(u128, f64, usize, usize)> = None;
        let (mut below_mated, mut below_non) = (0, 0);
        for &t in &candidates {
            while below_mated < mated.len() && mated[below_mated] < t {
                below_mated += 1;
            }
            while below_non < non.len() && non[below_non] < t {
                below_non += 1;
            }
            let false_accepts = non.len() - below_non;
            let false_rejects = below_mated;
            // |fa/nn - fr/nm| compared exactly as |fa*nm - fr*nn|.
            let gap = (false_accepts as u128 * nm).abs_diff(false_rejects as u128 * nn);
            if best.is_none_or(|(g, ..)| gap < g) {
                best = Some((gap, t, false_accepts, false_rejects));
            }
        }
        let (_, threshold, fa, fr) = best.expect("candidate set is non-empty");
        let fmr = fa as f64 / non.len() as f64;
        let fnmr = fr as f64 / mated.len() as f64;
        Ok(EerPoint {
            eer: (fmr + fnmr) / 2.0,
            threshold,
            fmr,
            fnmr,
        })
    }

    /// One point per unique observed score plus [`REJECT_ALL`], by ascending threshold.
    pub fn det_curve(&self) -> Result<Vec<DetPoint>> {
        self.require_mated()?;
        self.require_non_mated()?;
        let mated = sorted(&self.mated);
        let non = sorted(&self.non_mated);
        let mut candidates: Vec<f64> = mated.iter().chain(&non).copied().collect();
        candidates.push(REJECT_ALL);
        candidates.sort_unstable_by(f64::total_cmp);
        candidates.dedup();
        Ok(candidates
            .into_iter()
            .map(|t| DetPoint {
                threshold: t,
                fmr: (non.len() - count_below(&non, t)) as f64 / non.len() as f64,
                fnmr: count_below(&mated, t) as f64 / mated.len() as f64,
            })
            .collect())
    }
}

/// Writes DET points as CSV with header `threshold,fmr,fnmr`.
pub fn write_det_csv<W: Write>(points: &[DetPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "fmr", "fnmr"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fmr.to_string(), p.fnmr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Similarity function used to score pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Comparator {
    #[default]
    Cosine,
}

impl Comparator {
    pub fn compare(&self, a: &Embedding, b: &Embedding) -> Result<f64> {
        match self {
            Comparator::Cosine => cosine_similarity(a, b),
        }
    }
}

/// Scores every pair of `pairing` against `dataset`, keeping pairing order
/// within the mated and non-mated lists.
pub fn score_protocol(
    dataset: &Dataset,
    pairing: &Pairing,
    comparator: Comparator,
) -> Result<ScoreSet> {
    let resolved = pairing.resolve(dataset)?;
    let records = dataset.records();
    for (&(a, b), pair) in resolved.iter().zip(pairing.pairs()) {
        let same = records[a].identity == records[b].identity;
        if same != pair.mated {
            return Err(Error::LabelContradiction {
                a: pair.id_a.clone(),
                b: pair.id_b.clone(),
                mated: pair.mated,
            });
        }
    }
    let scores: Vec<f64> = match comparator {
        Comparator::Cosine => {
            let self_dots: Vec<f64> = records
                .par_iter()
                .map(|r| dot(r.embedding.as_slice(), r.embedding.as_slice()))
                .collect();
            resolved
                .par_iter()
                .map(|&(a, b)| {
                    let (ea, eb) = (&records[a].embedding, &records[b].embedding);
                    cosine_from_parts(dot(ea.as_slice(), eb.as_slice()), self_dots[a], self_dots[b])
                })
                .collect::<Result<_>>()?
        }
    };
    let mut set = ScoreSet::new(Vec::new(), Vec::new(), dataset.manifest().label());
    for (score, pair) in scores.into_iter().zip(pairing.pairs()) {
        if pair.mated {
            set.mated.push(score);
        } else {
            set.non_mated.push(score);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Pair, SynthSpec};
    use crate::permutation::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn tenths() -> Vec<f64> {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }

    /// Independent scan: every candidate threshold, counted directly.
    fn oracle_threshold(non: &[f64], target: f64) -> f64 {
        let mut cands: Vec<f64> = non.to_vec();
        cands.push(REJECT_ALL);
        cands
            .into_iter()
            .filter(|&t| non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64 <= target)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn fmr_fnmr_examples() {
        let s = ScoreSet::new(vec![1.0; 5], tenths(), "t");
        assert_eq!(s.fmr_at(0.95).unwrap(), 0.1);
        assert_eq!(s.fmr_at(-1.0).unwrap(), 1.0);
        assert_eq!(s.fnmr_at(0.5).unwrap(), 0.0);
        let empty = ScoreSet::new(vec![], vec![], "e");
        assert!(matches!(empty.fmr_at(0.0), Err(Error::EmptyScoreList("non-mated"))));
        assert!(matches!(empty.fnmr_at(0.0), Err(Error::EmptyScoreList("mated"))));
    }

    #[test]
    fn threshold_examples() {
        let s = ScoreSet::new(vec![], tenths(), "t");
        let op = s.threshold_at_fmr(0.10).unwrap();
        assert_eq!((op.threshold, op.fmr), (1.0, 0.1));
        assert_eq!(op.fnmr, None);
        let op = s.threshold_at_fmr(0.25).unwrap();
        assert_eq!((op.threshold, op.fmr), (0.9, 0.2));
        let op = s.threshold_at_fmr(1.0).unwrap();
        assert_eq!((op.threshold, op.fmr), (0.1, 1.0));
        assert_eq!(op.threshold, oracle_threshold(&s.non_mated, 1.0));
        let tiny = s.threshold_at_fmr(0.01).unwrap();
        assert_eq!((tiny.threshold, tiny.fmr), (REJECT_ALL, 0.0));
        assert!(matches!(s.threshold_at_fmr(0.0), Err(Error::InvalidRate(_))));
        assert!(matches!(s.threshold_at_fmr(1.5), Err(Error::InvalidRate(_))));
        let json = serde_json::to_value(ScoreSet::new(vec![0.95], tenths(), "t").threshold_at_fmr(0.25).unwrap()).unwrap();
        assert_eq!(json, serde_json::json!({"threshold": 0.9, "fmr": 0.2, "fnmr": 0.0, "target_fmr": 0.25}));
    }

    #[test]
    fn eer_examples() {
        let sep = ScoreSet::new(vec![0.9, 0.8, 0.7], vec![0.1, 0.2, 0.3], "s");
        assert_eq!(sep.eer().unwrap().eer, 0.0);
        let same = ScoreSet::new(vec![0.1, 0.4, 0.4, 0.9], vec![0.1, 0.4, 0.4, 0.9], "s");
        assert_eq!(same.eer().unwrap().eer, 0.5);
        // t = 0.5: FMR 1/3 (0.5), FNMR 1/3 (0.4) -> gap 0, lowest such threshold.
        let s = ScoreSet::new(vec![0.9, 0.8, 0.4], vec![0.5, 0.3, 0.2], "s");
        let e = s.eer().unwrap();
        assert_eq!(e.threshold, 0.5);
        assert_eq!(e.eer, 1.0 / 3.0);
    }

    #[test]
    fn det_small_and_monotone() {
        let s = ScoreSet::new(vec![0.7], vec![0.2], "s");
        let det = s.det_curve().unwrap();
        assert!(det.len() <= 3);
        assert!(det.windows(2).all(|w| w[0].fmr >= w[1].fmr && w[0].threshold < w[1].threshold));
        assert_eq!(det.last().unwrap().fmr, 0.0);

        let mut rng = seeded_rng(4);
        let s = ScoreSet::new(
            (0..500).map(|_| rng.random_range(-0.2..1.0)).collect(),
            (0..500).map(|_| rng.random_range(-1.0..0.5)).collect(),
            "r",
        );
        let det = s.det_curve().unwrap();
        assert!(det.windows(2).all(|w| w[0].fmr >= w[1].fmr && w[0].fnmr <= w[1].fnmr));
        for p in &det {
            assert_eq!(p.fmr, s.fmr_at(p.threshold).unwrap());
            assert_eq!(p.fnmr, s.fnmr_at(p.threshold).unwrap());
        }
        let mut out = Vec::new();
        write_det_csv(&det[..1], &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("threshold,fmr,fnmr\n"));
    }

    fn two_identity_dataset() -> Dataset {
        use crate::data::{Manifest, Record};
        let rec = |id: &str, v: Vec<f32>, identity| Record {
            id: id.into(),
            embedding: Embedding::new(v).unwrap(),
            identity,
            attribute: Some(0),
        };
        Dataset::new(
            vec![
                rec("a", vec![1.0, 0.0], 0),
                rec("a2", vec![2.0, 0.0], 0),
                rec("b", vec![0.0, 1.0], 1),
            ],
            Manifest::imported(2, false, "mem"),
        )
        .unwrap()
    }

    fn pair(a: &str, b: &str, mated: bool) -> Pair {
        Pair {
            id_a: a.into(),
            id_b: b.into(),
            mated,
        }
    }

    #[test]
    fn protocol_examples_and_errors() {
        let d = two_identity_dataset();
        let p = Pairing::new(vec![pair("a", "a", true), pair("a", "a2", true), pair("a", "b", false)]);
        let s = score_protocol(&d, &p, Comparator::Cosine).unwrap();
        assert_eq!(s.mated, vec![1.0, 1.0]);
        assert_eq!(s.non_mated, vec![0.0]);
        let unknown = Pairing::new(vec![pair("a", "zz", false)]);
        assert!(matches!(score_protocol(&d, &unknown, Comparator::Cosine), Err(Error::UnknownRecord(id)) if id == "zz"));
        let contradiction = Pairing::new(vec![pair("a", "b", true)]);
        assert!(matches!(
            score_protocol(&d, &contradiction, Comparator::Cosine),
            Err(Error::LabelContradiction { .. })
        ));
    }

    #[test]
    fn protocol_matches_direct_recomputation() {
        let d = generate(&SynthSpec {
            n_identities: 30,
            ..SynthSpec::reference()
        })
        .unwrap();
        let recs = d.records();
        let mut rng = seeded_rng(1);
        let pairs: Vec<Pair> = (0..100)
            .map(|_| {
                let (i, j) = (rng.random_range(0..recs.len()), rng.random_range(0..recs.len()));
                pair(&recs[i].id, &recs[j].id, recs[i].identity == recs[j].identity)
            })
            .collect();
        let pairing = Pairing::new(pairs.clone());
        let s = score_protocol(&d, &pairing, Comparator::Cosine).unwrap();
        let (mut m, mut n) = (s.mated.iter(), s.non_mated.iter());
        for p in &pairs {
            let direct = cosine_similarity(&d.get(&p.id_a).unwrap().embedding, &d.get(&p.id_b).unwrap().embedding).unwrap();
            let got = if p.mated { m.next() } else { n.next() };
            assert_eq!(got.unwrap().to_bits(), direct.to_bits());
        }
    }

    fn score_set() -> impl Strategy<Value = ScoreSet> {
        let score = (-100i32..=100).prop_map(|x| x as f64 / 100.0);
        (
            prop::collection::vec(score.clone(), 1..60),
            prop::collection::vec(score, 1..60),
        )
            .prop_map(|(m, n)| ScoreSet::new(m, n, "p"))
    }

    proptest! {
        #[test]
        fn rates_are_monotone(s in score_set(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.fmr_at(lo).unwrap() >= s.fmr_at(hi).unwrap());
            prop_assert!(s.fnmr_at(lo).unwrap() <= s.fnmr_at(hi).unwrap());
        }

        #[test]
        fn calibration_is_tight(s in score_set(), target in 0.001f64..=1.0) {
            let op = s.threshold_at_fmr(target).unwrap();
            prop_assert!(op.fmr <= target);
            prop_assert_eq!(op.threshold, oracle_threshold(&s.non_mated, target));
            for &c in s.non_mated.iter().filter(|&&c| c < op.threshold) {
                prop_assert!(s.fmr_at(c).unwrap() > target);
            }
        }

        // Ties can move a rate by more than 1/n in one step, so the bound is
        // checked on continuous (tie-free) scores.
        #[test]
        fn eer_gap_bound(
            mated in prop::collection::vec(-1.0f64..1.0, 1..60),
            non_mated in prop::collection::vec(-1.0f64..1.0, 1..60),
        ) {
            let s = ScoreSet::new(mated, non_mated, "c");
            let e = s.eer().unwrap();
            let bound = 1.0 / s.mated.len().min(s.non_mated.len()) as f64;
            prop_assert!((e.fmr - e.fnmr).abs() <= bound + 1e-12);
        }

        #[test]
        fn order_invariant(s in score_set(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = seeded_rng(seed);
            let mut t = s.clone();
            t.mated.shuffle(&mut rng);
            t.non_mated.shuffle(&mut rng);
            prop_assert_eq!(s.eer().unwrap(), t.eer().unwrap());
            prop_assert_eq!(s.det_curve().unwrap(), t.det_curve().unwrap());
            prop_assert_eq!(s.threshold_at_fmr(0.1).unwrap(), t.threshold_at_fmr(0.1).unwrap());
        }
    }
}
