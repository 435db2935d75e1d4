//! Crowd-vote aggregation: reliability-weighted age, baseline statistics,
//! gender by qualified majority, and annotator scoring on control tasks.

use crate::config::VoteConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Age aggregation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mean,
    Median,
    InterquartileMean,
    Mode,
    MaxLikelihood,
    WinsorizedMean,
    TruncatedMean,
    WeightedMean,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Mean,
        Method::Median,
        Method::InterquartileMean,
        Method::Mode,
        Method::MaxLikelihood,
        Method::WinsorizedMean,
        Method::TruncatedMean,
        Method::WeightedMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Median => "median",
            Method::InterquartileMean => "interquartile_mean",
            Method::Mode => "mode",
            Method::MaxLikelihood => "max_likelihood",
            Method::WinsorizedMean => "winsorized_mean",
            Method::TruncatedMean => "truncated_mean",
            Method::WeightedMean => "weighted_mean",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown aggregation method {s:?}")))
    }
}

fn non_empty(votes: &[f64]) -> Result<()> {
    if votes.is_empty() {
        return Err(Error::Input("no votes".into()));
    }
    if votes.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite vote".into()));
    }
    Ok(())
}

fn sorted(votes: &[f64]) -> Vec<f64> {
    let mut v = votes.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `Σ vᵢ e^{1/MAEᵢ} / Σ e^{1/MAEᵢ}` with each MAE floored at `mae_floor`.
pub fn weighted_mean_age(votes: &[f64], user_maes: &[f64], mae_floor: f64) -> Result<f64> {
    non_empty(votes)?;
    if votes.len() != user_maes.len() {
        return Err(Error::Input(format!("{} votes but {} user MAEs", votes.len(), user_maes.len())));
    }
    if user_maes.iter().any(|m| !(*m >= 0.0)) {
        return Err(Error::Input("user MAE must be non-negative".into()));
    }
    let expo: Vec<f64> = user_maes.iter().map(|m| 1.0 / m.max(mae_floor)).collect();
    // shifting every exponent by the maximum leaves the ratio unchanged
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (v, e) in votes.iter().zip(&expo) {
        let w = (e - top).exp();
        num += v * w;
        den += w;
    }
    Ok(num / den)
}

pub fn median(votes: &[f64]) -> Result<f64> {
    non_empty(votes)?;
    let v = sorted(votes);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Mean after dropping `floor(fraction * n)` votes from each end; the median
/// if nothing would remain.
pub fn truncated_mean(votes: &[f64], fraction: f64) -> Result<f64> {
    non_empty(votes)?;
    let v = sorted(votes);
    let k = (fraction * v.len() as f64).floor() as usize;
    if 2 * k >= v.len() {
        return median(votes);
    }
    Ok(mean_of(&v[k..v.len() - k]))
}

/// Mean after replacing the `floor(fraction * n)` smallest and largest votes
/// with the nearest retained order statistic.
pub fn winsorized_mean(votes: &[f64], fraction: f64) -> Result<f64> {
    non_empty(votes)?;
    let mut v = sorted(votes);
    let n = v.len();
    let k = (fraction * n as f64).floor() as usize;
    if 2 * k >= n {
        return median(votes);
    }
    let (lo, hi) = (v[k], v[n - 1 - k]);
    for x in v.iter_mut() {
        *x = x.clamp(lo, hi);
    }
    Ok(mean_of(&v))
}

/// Most frequent value; ties go to the smallest.
pub fn mode(votes: &[f64]) -> Result<f64> {
    non_empty(votes)?;
    let v = sorted(votes);
    let (mut best, mut best_n) = (v[0], 0);
    let mut i = 0;
    while i < v.len() {
        let j = v[i..].iter().take_while(|&&x| x == v[i]).count();
        if j > best_n {
            best = v[i];
            best_n = j;
        }
        i += j;
    }
    Ok(best)
}

/// Peak of a Gaussian kernel density estimate evaluated on a grid from the
/// smallest to the largest vote; ties go to the lowest grid point.
pub fn kde_mode(votes: &[f64], bandwidth: f64, step: f64) -> Result<f64> {
    non_empty(votes)?;
    if !(bandwidth > 0.0) || !(step > 0.0) {
        return Err(Error::Input("KDE bandwidth and grid step must be positive".into()));
    }
    let v = sorted(votes);
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let points = ((hi - lo) / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 0..=points {
        let x = lo + k as f64 * step;
        let d: f64 = v.iter().map(|&vi| (-0.5 * ((x - vi) / bandwidth).powi(2)).exp()).sum();
        if d > best.0 {
            best = (d, x);
        }
    }
    Ok(best.1)
}

/// Aggregates one task's age votes. `user_maes` is needed only by the
/// weighted mean.
pub fn aggregate_age(votes: &[f64], user_maes: Option<&[f64]>, method: Method, cfg: &VoteConfig) -> Result<f64> {
    non_empty(votes)?;
    match method {
        Method::Mean => Ok(mean_of(votes)),
        Method::Median => median(votes),
        Method::InterquartileMean => truncated_mean(votes, 0.25),
        Method::Mode => mode(votes),
        Method::MaxLikelihood => kde_mode(votes, cfg.kde_bandwidth, cfg.kde_grid_step),
        Method::WinsorizedMean => winsorized_mean(votes, cfg.winsor_fraction),
        Method::TruncatedMean => truncated_mean(votes, cfg.truncate_fraction),
        Method::WeightedMean => {
            let maes = user_maes.ok_or_else(|| Error::Input("weighted mean needs user MAEs".into()))?;
            weighted_mean_age(votes, maes, cfg.mae_floor)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    /// Class index used by the model: 0 male, 1 female.
    pub fn index(self) -> usize {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Gender::Male),
            1 => Ok(Gender::Female),
            _ => Err(Error::Input(format!("gender index {i} is not 0 or 1"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenderVerdict {
    Male,
    Female,
    Rejected,
}

/// Majority gender, rejected when its share is below `min_frequency`.
pub fn aggregate_gender(votes: &[Gender], min_frequency: f64) -> Result<GenderVerdict> {
    if votes.is_empty() {
        return Err(Error::Input("no gender votes".into()));
    }
    let male = votes.iter().filter(|&&g| g == Gender::Male).count();
    let female = votes.len() - male;
    let (winner, n) = if male >= female { (GenderVerdict::Male, male) } else { (GenderVerdict::Female, female) };
    // counts compared exactly: n / len >= f  <=>  n >= f * len
    if (n as f64) < min_frequency * votes.len() as f64 - 1e-12 {
        return Ok(GenderVerdict::Rejected);
    }
    Ok(winner)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStat {
    pub user: String,
    pub mae: f64,
    pub controls: usize,
    /// Share of control answers within 3 years, in percent.
    pub cs3: f64,
}

/// Control-task answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlRecord {
    pub user: String,
    pub voted: f64,
    pub truth: f64,
}

/// Per-user MAE and CS@3 over control answers, ordered by user id.
pub fn score_users(controls: &[ControlRecord]) -> Vec<UserStat> {
    let mut by_user: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for c in controls {
        by_user.entry(&c.user).or_default().push((c.voted - c.truth).abs());
    }
    by_user
        .into_iter()
        .map(|(user, errs)| UserStat {
            user: user.to_string(),
            mae: mean_of(&errs),
            controls: errs.len(),
            cs3: 100.0 * errs.iter().filter(|&&e| e <= 3.0).count() as f64 / errs.len() as f64,
        })
        .collect()
}

/// One annotation of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteRecord {
    pub task: String,
    pub user: String,
    pub age: Option<f64>,
    pub gender: Option<Gender>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedTask {
    pub task: String,
    pub age: Option<f64>,
    pub gender: Option<GenderVerdict>,
    pub votes: usize,
}

/// Groups votes by task (in first-seen order) and aggregates each.
pub fn aggregate_tasks(
    votes: &[VoteRecord],
    users: &[UserStat],
    method: Method,
    cfg: &VoteConfig,
) -> Result<Vec<AggregatedTask>> {
    let mae: BTreeMap<&str, f64> = users.iter().map(|u| (u.user.as_str(), u.mae)).collect();
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&VoteRecord>> = BTreeMap::new();
    for v in votes {
        let g = groups.entry(&v.task).or_default();
        if g.is_empty() {
            order.push(&v.task);
        }
        if g.iter().any(|o| o.user == v.user) {
            return Err(Error::Input(format!("user {} voted twice on task {}", v.user, v.task)));
        }
        g.push(v);
    }
    let mut out = Vec::new();
    for task in order {
        let g = &groups[task];
        let ages: Vec<(f64, &str)> = g.iter().filter_map(|v| v.age.map(|a| (a, v.user.as_str()))).collect();
        let age = if ages.is_empty() {
            None
        } else {
            let values: Vec<f64> = ages.iter().map(|a| a.0).collect();
            let maes = if method == Method::WeightedMean {
                let m = ages
                    .iter()
                    .map(|(_, u)| {
                        mae.get(u).copied().ok_or_else(|| Error::Input(format!("user {u} has no control answers")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Some(m)
            } else {
                None
            };
            Some(aggregate_age(&values, maes.as_deref(), method, cfg)?)
        };
        let genders: Vec<Gender> = g.iter().filter_map(|v| v.gender).collect();
        let gender =
            if genders.is_empty() { None } else { Some(aggregate_gender(&genders, cfg.gender_min_frequency)?) };
        out.push(AggregatedTask { task: task.to_string(), age, gender, votes: g.len() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> VoteConfig {
        VoteConfig::default()
    }

    #[test]
    fn weighted_examples() {
        assert!((weighted_mean_age(&[20.0, 30.0], &[3.0, 3.0], 0.5).unwrap() - 25.0).abs() < 1e-12);
        let v = weighted_mean_age(&[20.0, 30.0], &[0.5, 2.0], 0.5).unwrap();
        // value from a separate evaluation of the formula in Python
        assert!((v - 21.82425523806356).abs() < 1e-9);
        assert_eq!(weighted_mean_age(&[42.0], &[1.0], 0.5).unwrap(), 42.0);
        // a perfect user is treated like one at the floor
        let a = weighted_mean_age(&[20.0, 30.0], &[0.0, 2.0], 0.5).unwrap();
        assert_eq!(a, v);
        assert!(weighted_mean_age(&[], &[], 0.5).is_err());
    }

    #[test]
    fn baseline_examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 100.0];
        assert_eq!(median(&v).unwrap(), 3.0);
        assert_eq!(truncated_mean(&v, 0.3).unwrap(), 3.0);
        assert_eq!(mode(&[3.0, 1.0, 3.0, 1.0, 7.0]).unwrap(), 1.0);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        // three replaced per tail: 4,4,4,4,5,6,7,7,7,7
        assert_eq!(winsorized_mean(&ten, 0.3).unwrap(), 5.5);
        let skew = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 100.0];
        assert_eq!(winsorized_mean(&skew, 0.3).unwrap(), 5.5);
        assert_eq!(truncated_mean(&[5.0], 0.3).unwrap(), 5.0);
        for m in Method::ALL {
            let maes = [1.0; 4];
            let got = aggregate_age(&[33.0; 4], Some(&maes), m, &cfg()).unwrap();
            assert!((got - 33.0).abs() < 1e-12, "{m}");
        }
    }

    #[test]
    fn kde_peak_sits_in_cluster() {
        let m = kde_mode(&[20.0, 21.0, 22.0, 60.0], 2.0, 0.1).unwrap();
        assert!((m - 21.0).abs() < 0.1 + 1e-9, "{m}");
    }

    #[test]
    fn gender_rule() {
        use Gender::*;
        assert_eq!(aggregate_gender(&[Male, Male, Male, Female], 0.75).unwrap(), GenderVerdict::Male);
        assert_eq!(aggregate_gender(&[Male, Male, Female, Female], 0.75).unwrap(), GenderVerdict::Rejected);
        assert_eq!(aggregate_gender(&[Female; 10], 0.75).unwrap(), GenderVerdict::Female);
    }

    #[test]
    fn users_scored() {
        let rec = |u: &str, v: f64, t: f64| ControlRecord { user: u.into(), voted: v, truth: t };
        let stats = score_users(&[
            rec("a", 30.0, 30.0),
            rec("a", 40.0, 44.0),
            rec("b", 10.0, 12.0),
            rec("b", 10.0, 13.0),
            rec("b", 10.0, 14.0),
        ]);
        assert_eq!(stats[0].mae, 2.0);
        assert_eq!(stats[0].controls, 2);
        assert!((stats[1].cs3 - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tasks_grouped_in_order() {
        let v = |t: &str, u: &str, a: f64, g: Gender| VoteRecord {
            task: t.into(),
            user: u.into(),
            age: Some(a),
            gender: Some(g),
        };
        let votes =
            [v("t2", "a", 20.0, Gender::Male), v("t1", "a", 50.0, Gender::Female), v("t2", "b", 30.0, Gender::Male)];
        let users = score_users(&[
            ControlRecord { user: "a".into(), voted: 1.0, truth: 1.0 },
            ControlRecord { user: "b".into(), voted: 1.0, truth: 3.0 },
        ]);
        let out = aggregate_tasks(&votes, &users, Method::WeightedMean, &cfg()).unwrap();
        assert_eq!(out[0].task, "t2");
        assert!((out[0].age.unwrap() - 21.82425523806356).abs() < 1e-9);
        assert_eq!(out[0].gender, Some(GenderVerdict::Male));
        assert_eq!(out[1].votes, 1);
        let dup = [v("t", "a", 1.0, Gender::Male), v("t", "a", 2.0, Gender::Male)];
        assert!(aggregate_tasks(&dup, &users, Method::Mean, &cfg()).is_err());
        let stranger = [v("t", "zed", 1.0, Gender::Male)];
        assert!(aggregate_tasks(&stranger, &users, Method::WeightedMean, &cfg()).is_err());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("average".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn weighted_is_convex(votes in prop::collection::vec(0.0f64..100.0, 1..12), seed in 0.0f64..10.0) {
            let maes: Vec<f64> = (0..votes.len()).map(|i| (i as f64 * 1.7 + seed) % 9.0).collect();
            let a = weighted_mean_age(&votes, &maes, 0.5).unwrap();
            let lo = votes.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = votes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
        }

        #[test]
        fn lower_mae_pulls_closer(m1 in 0.5f64..10.0, dm in 0.01f64..5.0, m2 in 0.5f64..10.0) {
            let far = weighted_mean_age(&[20.0, 40.0], &[m1 + dm, m2], 0.5).unwrap();
            let near = weighted_mean_age(&[20.0, 40.0], &[m1, m2], 0.5).unwrap();
            prop_assert!(near < far);
        }

        #[test]
        fn gender_permutation_invariant(bits in prop::collection::vec(any::<bool>(), 1..15), rot in 0usize..15) {
            let votes: Vec<Gender> = bits.iter().map(|&b| if b { Gender::Male } else { Gender::Female }).collect();
            let mut shifted = votes.clone();
            shifted.rotate_left(rot % votes.len());
            shifted.reverse();
            prop_assert_eq!(aggregate_gender(&votes, 0.75).unwrap(), aggregate_gender(&shifted, 0.75).unwrap());
        }
    }
}
