//! Concordance index, median-risk stratification, Kaplan–Meier curves and
//! the two-group log-rank test.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::TieRule;
use crate::error::{Error, Result};
use crate::head::SurvivalRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    /// `c ∈ [0, 1]`.
    pub index: f64,
    /// Number of comparable pairs `M`.
    pub comparable_pairs: usize,
    /// Concordant pair credit (ties add 1/2 under [`TieRule::Half`]).
    pub concordant: f64,
}

/// Harrell-style concordance: pairs `(i, j)` with `δ_i = 1` and `s_j > s_i`
/// are comparable, and count as concordant when `f_i > f_j`.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord], tie: TieRule) -> Result<Concordance> {
    if risks.len() != records.len() {
        return Err(Error::dim("c_index", &[risks.len()], &[records.len()]));
    }
    if risks.len() < 2 {
        return Err(Error::Input(format!("c_index needs at least 2 patients, got {}", risks.len())));
    }
    let mut pairs = 0usize;
    let mut concordant = 0.0;
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        for (j, rj) in records.iter().enumerate() {
            if rj.time > ri.time {
                pairs += 1;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] && tie == TieRule::Half {
                    concordant += 0.5;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedConcordance);
    }
    Ok(Concordance {
        index: concordant / pairs as f64,
        comparable_pairs: pairs,
        concordant,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

/// Lower-middle order statistic.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(sorted.len() - 1) / 2])
}

/// `Low` when the risk is at most the (lower) median, `High` otherwise.
pub fn stratify_by_median(risks: &[f64]) -> Vec<RiskGroup> {
    let Some(m) = lower_median(risks) else {
        return Vec::new();
    };
    risks
        .iter()
        .map(|&f| if f <= m { RiskGroup::Low } else { RiskGroup::High })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    /// Subjects at risk just before `time`.
    pub at_risk: usize,
}

/// Product-limit estimator. The curve starts at `(0, 1, n)` and has one
/// point per distinct event time.
pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<Vec<KmPoint>> {
    if records.is_empty() {
        return Err(Error::Input("kaplan_meier of an empty group".into()));
    }
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut curve = Vec::with_capacity(sorted.len() + 1);
    curve.push(KmPoint {
        time: 0.0,
        survival: 1.0,
        at_risk: sorted.len(),
    });
    let mut survival = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let at_risk = sorted.len() - i;
        let mut deaths = 0usize;
        while i < sorted.len() && sorted[i].time == t {
            deaths += usize::from(sorted[i].event);
            i += 1;
        }
        if deaths > 0 {
            survival *= 1.0 - deaths as f64 / at_risk as f64;
            curve.push(KmPoint { time: t, survival, at_risk });
        }
    }
    Ok(curve)
}

/// Right-continuous evaluation of a Kaplan–Meier step function.
pub fn survival_at(curve: &[KmPoint], t: f64) -> f64 {
    curve
        .iter()
        .take_while(|p| p.time <= t)
        .last()
        .map_or(1.0, |p| p.survival)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
    /// Set when the variance vanishes (no informative event times); the
    /// statistic is then reported as 0 with `p = 1`.
    pub zero_variance: bool,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1dof(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    libm::erfc(libm::sqrt(x / 2.0))
}

pub fn log_rank(a: &[SurvivalRecord], b: &[SurvivalRecord]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("log_rank needs two non-empty groups".into()));
    }
    let mut times: Vec<f64> = a.iter().chain(b).filter(|r| r.event).map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let count = |g: &[SurvivalRecord], t: f64| {
        let at_risk = g.iter().filter(|r| r.time >= t).count() as f64;
        let deaths = g.iter().filter(|r| r.event && r.time == t).count() as f64;
        (at_risk, deaths)
    };
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for &t in &times {
        let (na, da) = count(a, t);
        let (nb, db) = count(b, t);
        let n = na + nb;
        let d = da + db;
        observed += da;
        expected += na * d / n;
        if n > 1.0 {
            variance += na * nb * d * (n - d) / (n * n * (n - 1.0));
        }
    }
    if !(variance > 0.0) {
        return Ok(LogRank {
            statistic: 0.0,
            p_value: 1.0,
            observed_a: observed,
            expected_a: expected,
            variance: 0.0,
            zero_variance: true,
        });
    }
    let diff = observed - expected;
    let statistic = diff * diff / variance;
    Ok(LogRank {
        statistic,
        p_value: chi2_sf_1dof(statistic),
        observed_a: observed,
        expected_a: expected,
        variance,
        zero_variance: false,
    })
}

/// Everything reported for one set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortEvaluation {
    /// `None` when the cohort has no comparable pairs.
    pub concordance: Option<Concordance>,
    pub groups: Vec<RiskGroup>,
    pub km_low: Vec<KmPoint>,
    /// Empty when no patient lands in the high-risk group.
    pub km_high: Vec<KmPoint>,
    /// `None` unless both groups are non-empty.
    pub log_rank: Option<LogRank>,
}

pub fn split_by_group(records: &[SurvivalRecord], groups: &[RiskGroup]) -> (Vec<SurvivalRecord>, Vec<SurvivalRecord>) {
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (r, g) in records.iter().zip(groups) {
        match g {
            RiskGroup::Low => low.push(r.clone()),
            RiskGroup::High => high.push(r.clone()),
        }
    }
    (low, high)
}

pub fn evaluate_cohort(risks: &[f64], records: &[SurvivalRecord], tie: TieRule) -> Result<CohortEvaluation> {
    let concordance = match c_index(risks, records, tie) {
        Ok(c) => Some(c),
        Err(Error::UndefinedConcordance) => None,
        Err(e) => return Err(e),
    };
    let groups = stratify_by_median(risks);
    let (low, high) = split_by_group(records, &groups);
    let km_low = if low.is_empty() { Vec::new() } else { kaplan_meier(&low)? };
    let km_high = if high.is_empty() { Vec::new() } else { kaplan_meier(&high)? };
    let log_rank = if low.is_empty() || high.is_empty() {
        None
    } else {
        Some(log_rank(&high, &low)?)
    };
    Ok(CohortEvaluation {
        concordance,
        groups,
        km_low,
        km_high,
        log_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn recs(v: &[(f64, bool)]) -> Vec<SurvivalRecord> {
        v.iter()
            .enumerate()
            .map(|(i, &(t, e))| SurvivalRecord::new(format!("p{i}"), t, e).unwrap())
            .collect()
    }

    #[test]
    fn anti_ordered_risks_are_perfectly_concordant() {
        let r = recs(&[(1.0, true), (2.0, true), (3.0, true), (4.0, true)]);
        let c = c_index(&[4.0, 3.0, 2.0, 1.0], &r, TieRule::Strict).unwrap();
        assert_eq!(c.index, 1.0);
        assert_eq!(c.comparable_pairs, 6);
    }

    #[test]
    fn equal_risks_score_zero_strict_and_half_otherwise() {
        let r = recs(&[(1.0, true), (2.0, true), (3.0, false)]);
        assert_eq!(c_index(&[0.5; 3], &r, TieRule::Strict).unwrap().index, 0.0);
        assert_eq!(c_index(&[0.5; 3], &r, TieRule::Half).unwrap().index, 0.5);
    }

    #[test]
    fn three_patient_fixture() {
        let r = recs(&[(2.0, true), (5.0, true), (7.0, false)]);
        let c = c_index(&[0.9, 0.5, 0.7], &r, TieRule::Strict).unwrap();
        assert_eq!(c.comparable_pairs, 3);
        assert_eq!(c.concordant, 2.0);
        assert_eq!(c.index, 2.0 / 3.0);
    }

    #[test]
    fn no_comparable_pairs_is_an_error() {
        let r = recs(&[(2.0, false), (5.0, false)]);
        assert_eq!(c_index(&[0.1, 0.2], &r, TieRule::Strict), Err(Error::UndefinedConcordance));
        assert!(c_index(&[0.1], &r[..1], TieRule::Strict).is_err());
        assert!(c_index(&[0.1, 0.2, 0.3], &r, TieRule::Strict).is_err());
    }

    #[test]
    fn median_stratification() {
        assert_eq!(stratify_by_median(&[0.1, 0.9]), vec![RiskGroup::Low, RiskGroup::High]);
        assert!(stratify_by_median(&[0.4; 5]).iter().all(|&g| g == RiskGroup::Low));
        let r = [0.31, 0.05, 0.77, 0.52, 0.18];
        // Sorted: 0.05 0.18 0.31 0.52 0.77 -> median 0.31.
        use RiskGroup::*;
        assert_eq!(stratify_by_median(&r), vec![Low, Low, High, High, Low]);
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
    }

    #[test]
    fn km_all_censored_stays_at_one() {
        let c = kaplan_meier(&recs(&[(1.0, false), (3.0, false)])).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(survival_at(&c, 100.0), 1.0);
    }

    #[test]
    fn km_three_deaths() {
        let c = kaplan_meier(&recs(&[(1.0, true), (2.0, true), (3.0, true)])).unwrap();
        let s: Vec<f64> = c.iter().map(|p| p.survival).collect();
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[2] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn km_mixed_fixture() {
        let c = kaplan_meier(&recs(&[(1.0, false), (2.0, true), (2.0, true), (3.0, false), (4.0, true)])).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!((c[1].time, c[1].at_risk), (2.0, 4));
        assert!((survival_at(&c, 2.0) - 0.5).abs() < 1e-12);
        assert!((survival_at(&c, 3.5) - 0.5).abs() < 1e-12);
        assert_eq!(survival_at(&c, 4.0), 0.0);
        assert_eq!(survival_at(&c, 1.9), 1.0);
    }

    #[test]
    fn log_rank_identical_groups() {
        let a = recs(&[(1.0, true), (2.0, false), (3.0, true)]);
        let lr = log_rank(&a, &a).unwrap();
        assert_eq!(lr.statistic, 0.0);
        assert_eq!(lr.p_value, 1.0);
    }

    #[test]
    fn log_rank_six_patient_table() {
        // Exact rational table: O_A = 2, E_A = 26/15, V = 433/450, X = 32/433.
        let a = recs(&[(1.0, true), (3.0, true), (5.0, false)]);
        let b = recs(&[(2.0, true), (4.0, true), (6.0, true)]);
        let lr = log_rank(&a, &b).unwrap();
        assert_eq!(lr.observed_a, 2.0);
        assert!((lr.expected_a - 26.0 / 15.0).abs() < 1e-12);
        assert!((lr.variance - 433.0 / 450.0).abs() < 1e-12);
        assert!((lr.statistic - 32.0 / 433.0).abs() < 1e-9);
        assert!((lr.p_value - 0.785_736_537_959_912_856_4).abs() < 1e-9);
        let swapped = log_rank(&b, &a).unwrap();
        assert!((swapped.statistic - lr.statistic).abs() < 1e-12);
    }

    #[test]
    fn log_rank_separated_groups() {
        let mut a = vec![(1.0, true); 10];
        a.extend(vec![(2.0, true); 10]);
        let b = vec![(12.0, false); 20];
        let lr = log_rank(&recs(&a), &recs(&b)).unwrap();
        assert!((lr.statistic - 2639.0 / 67.0).abs() < 1e-9);
        assert!(lr.p_value < 1e-3);
    }

    #[test]
    fn log_rank_without_events_is_flagged() {
        let a = recs(&[(1.0, false)]);
        let lr = log_rank(&a, &a).unwrap();
        assert!(lr.zero_variance);
        assert_eq!((lr.statistic, lr.p_value), (0.0, 1.0));
        assert!(log_rank(&a, &[]).is_err());
    }

    #[test]
    fn evaluation_bundles_everything() {
        let r = recs(&[(1.0, true), (2.0, true), (5.0, false), (9.0, true)]);
        let e = evaluate_cohort(&[0.9, 0.8, 0.2, 0.1], &r, TieRule::Strict).unwrap();
        assert_eq!(e.concordance.unwrap().index, 1.0);
        assert_eq!(e.groups, vec![RiskGroup::High, RiskGroup::High, RiskGroup::Low, RiskGroup::Low]);
        assert!(e.log_rank.is_some());
        let flat = evaluate_cohort(&[0.5; 4], &r, TieRule::Strict).unwrap();
        assert!(flat.log_rank.is_none() && flat.km_high.is_empty());
    }
}
