//! Micro-randomized trial logs: row schema, covariate scaling, the
//! context/moderator feature map, CSV I/O and a synthetic log generator.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::count_models::{FeatureVector, ModelParams};
use crate::environments::{draw_outcome, EnvError, EnvFamily, EnvSpec, FeatureMode};
use crate::scalar::Scalar;

pub const MRT_COLUMNS: [&str; 9] = [
    "user_id",
    "day",
    "age",
    "gender",
    "audit",
    "days_since_download",
    "action",
    "propensity",
    "outcome",
];

/// Context `x = (1, age, gender, audit, days)` and moderators `s = (1, days)`.
pub const CONTEXT_DIM: usize = 5;
pub const MODERATOR_DIM: usize = 2;
/// Dimension of `φ = (x, a·s)`.
pub const MRT_FEATURE_DIM: usize = CONTEXT_DIM + MODERATOR_DIM;

/// Lowest AUDIT score for trial eligibility.
pub const AUDIT_ELIGIBLE: u32 = 8;

#[derive(Debug, thiserror::Error)]
pub enum MrtError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("unknown columns: {}", .0.join(", "))]
    UnknownColumns(Vec<String>),
    #[error("line {line}: malformed `{column}` value `{value}`")]
    Malformed {
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate row for user `{user}` on day {day}")]
    Duplicate { user: String, day: u32 },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T> = std::result::Result<T, MrtError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrtRow {
    pub user_id: String,
    pub day: u32,
    pub age: u32,
    pub gender: u8,
    pub audit: u32,
    pub days_since_download: u32,
    pub action: u8,
    pub propensity: f64,
    pub outcome: u64,
}

/// All rows of one user, sorted by day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLog {
    pub user_id: String,
    pub rows: Vec<MrtRow>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MrtLog {
    /// Users sorted by id.
    pub users: Vec<UserLog>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl MrtLog {
    pub fn from_rows(rows: Vec<MrtRow>) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<MrtRow>> = BTreeMap::new();
        for row in rows {
            grouped.entry(row.user_id.clone()).or_default().push(row);
        }
        let mut users = Vec::with_capacity(grouped.len());
        for (user_id, mut rows) in grouped {
            rows.sort_by_key(|r| r.day);
            if let Some(w) = rows.windows(2).find(|w| w[0].day == w[1].day) {
                return Err(MrtError::Duplicate {
                    user: user_id,
                    day: w[0].day,
                });
            }
            users.push(UserLog { user_id, rows });
        }
        Ok(Self {
            users,
            warnings: Vec::new(),
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = &MrtRow> {
        self.users.iter().flat_map(|u| u.rows.iter())
    }

    pub fn len(&self) -> usize {
        self.users.iter().map(|u| u.rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Min–max scaling of the numeric covariates to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateScaler {
    pub age: (f64, f64),
    pub audit: (f64, f64),
    pub days: (f64, f64),
}

fn unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

impl CovariateScaler {
    /// Ranges observed in `rows`; `None` when there are no rows.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a MrtRow>) -> Option<Self> {
        let mut it = rows.into_iter();
        let first = it.next()?;
        let pt = |r: &MrtRow| (r.age as f64, r.audit as f64, r.days_since_download as f64);
        let (a, u, d) = pt(first);
        let mut s = Self {
            age: (a, a),
            audit: (u, u),
            days: (d, d),
        };
        for r in it {
            let (a, u, d) = pt(r);
            s.age = (s.age.0.min(a), s.age.1.max(a));
            s.audit = (s.audit.0.min(u), s.audit.1.max(u));
            s.days = (s.days.0.min(d), s.days.1.max(d));
        }
        Some(s)
    }

    /// Scaled context `x` and moderators `s` of a row.
    pub fn context<T: Scalar>(&self, row: &MrtRow) -> (Vec<T>, Vec<T>) {
        let days = unit(row.days_since_download as f64, self.days);
        let x = vec![
            T::one(),
            T::of(unit(row.age as f64, self.age)),
            T::of(row.gender as f64),
            T::of(unit(row.audit as f64, self.audit)),
            T::of(days),
        ];
        let s = vec![T::one(), T::of(days)];
        (x, s)
    }

    /// `φ(a)` for a row, projected onto the unit ball.
    pub fn features<T: Scalar>(&self, row: &MrtRow, action: usize) -> FeatureVector<T> {
        let (x, s) = self.context(row);
        feature_map(&x, &s, action).project_to_unit_ball()
    }

    /// `[φ(0), φ(1)]` for a row.
    pub fn action_features<T: Scalar>(&self, row: &MrtRow) -> Vec<FeatureVector<T>> {
        vec![self.features(row, 0), self.features(row, 1)]
    }
}

/// `φ = (x, a·s)`.
pub fn feature_map<T: Scalar>(x: &[T], s: &[T], a: usize) -> FeatureVector<T> {
    let a = T::of_usize(a);
    let mut v = Vec::with_capacity(x.len() + s.len());
    v.extend_from_slice(x);
    v.extend(s.iter().map(|&si| a * si));
    FeatureVector::new(v)
}

fn parse<V: std::str::FromStr>(field: &str, column: &'static str, line: usize) -> Result<V> {
    field.trim().parse().map_err(|_| MrtError::Malformed {
        line,
        column,
        value: field.to_string(),
    })
}

/// Reads and validates an MRT log. Rows are grouped by user and sorted by day.
pub fn read_mrt_csv<R: Read>(reader: R) -> Result<MrtLog> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let missing: Vec<String> = MRT_COLUMNS
        .iter()
        .filter(|c| !names.contains(c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(MrtError::MissingColumns(missing));
    }
    let unknown: Vec<String> = names
        .iter()
        .filter(|n| !MRT_COLUMNS.contains(n))
        .map(|n| n.to_string())
        .collect();
    if !unknown.is_empty() {
        return Err(MrtError::UnknownColumns(unknown));
    }
    let idx: Vec<usize> = MRT_COLUMNS
        .iter()
        .map(|c| names.iter().position(|n| n == c).expect("checked above"))
        .collect();

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |k: usize| rec.get(idx[k]).unwrap_or("");
        let row = MrtRow {
            user_id: f(0).trim().to_string(),
            day: parse(f(1), "day", line)?,
            age: parse(f(2), "age", line)?,
            gender: parse(f(3), "gender", line)?,
            audit: parse(f(4), "audit", line)?,
            days_since_download: parse(f(5), "days_since_download", line)?,
            action: parse(f(6), "action", line)?,
            propensity: parse(f(7), "propensity", line)?,
            outcome: parse(f(8), "outcome", line)?,
        };
        let invalid = |message: &str| MrtError::Invalid {
            line,
            message: message.to_string(),
        };
        if row.user_id.is_empty() {
            return Err(invalid("empty user_id"));
        }
        if row.gender > 1 {
            return Err(invalid("gender must be 0 or 1"));
        }
        if row.action > 1 {
            return Err(invalid("action must be 0 or 1"));
        }
        if !(row.propensity > 0.0 && row.propensity < 1.0) {
            return Err(invalid("propensity must lie in (0, 1)"));
        }
        if !seen.insert((row.user_id.clone(), row.day)) {
            return Err(MrtError::Duplicate {
                user: row.user_id,
                day: row.day,
            });
        }
        if row.audit < AUDIT_ELIGIBLE {
            let w = format!(
                "line {line}: audit {} below eligibility threshold {AUDIT_ELIGIBLE}",
                row.audit
            );
            log::warn!("{w}");
            warnings.push(w);
        }
        rows.push(row);
    }
    let mut log = MrtLog::from_rows(rows)?;
    log.warnings = warnings;
    Ok(log)
}

pub fn load_mrt_csv(path: impl AsRef<Path>) -> Result<MrtLog> {
    read_mrt_csv(std::fs::File::open(path)?)
}

pub fn write_mrt_csv<W: Write>(writer: W, log: &MrtLog) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(MRT_COLUMNS)?;
    for r in log.rows() {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_mrt_csv(path: impl AsRef<Path>, log: &MrtLog) -> Result<()> {
    write_mrt_csv(std::fs::File::create(path)?, log)
}

/// Settings for [`gen_mrt_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrtGenConfig {
    pub n_users: usize,
    pub t_days: usize,
    pub family: EnvFamily,
    pub omega: f64,
    /// Standard deviation of per-user truths around the population center.
    pub heterogeneity: f64,
    /// Logging probability of intervening.
    pub logging_p: f64,
}

impl Default for MrtGenConfig {
    fn default() -> Self {
        Self {
            n_users: 50,
            t_days: 30,
            family: EnvFamily::Ziop,
            omega: 1.0,
            heterogeneity: 0.1,
            logging_p: 0.6,
        }
    }
}

/// Static per-user covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserCovariates {
    pub age: u32,
    pub gender: u8,
    pub audit: u32,
}

/// Age uniform on 18–65, gender Bernoulli(1/2), AUDIT uniform on 8–40.
pub fn gen_covariates<R: Rng + ?Sized>(rng: &mut R) -> UserCovariates {
    UserCovariates {
        age: rng.random_range(18..=65),
        gender: u8::from(rng.random::<bool>()),
        audit: rng.random_range(AUDIT_ELIGIBLE..=40),
    }
}

/// Scaler for a synthetic cohort: the same min/max the loader would derive
/// from the generated rows.
pub fn cohort_scaler(covariates: &[UserCovariates], t_days: usize) -> CovariateScaler {
    let span = |f: fn(&UserCovariates) -> u32| {
        let lo = covariates.iter().map(f).min().unwrap_or(0) as f64;
        let hi = covariates.iter().map(f).max().unwrap_or(0) as f64;
        (lo, hi)
    };
    CovariateScaler {
        age: span(|c| c.age),
        audit: span(|c| c.audit),
        days: (0.0, t_days.saturating_sub(1) as f64),
    }
}

/// Population parameters for synthetic MRT studies, in feature order
/// `(1, age, gender, audit, days, a, a·days)`. Notifications raise the
/// expected count and lower the chance of a structural zero, and the boost
/// fades with days since download; zero-inflated families also get `γ`.
pub fn reference_center(family: EnvFamily) -> ModelParams<f64> {
    ModelParams {
        beta: vec![0.2, -0.1, 0.0, 0.1, -0.2, 0.8, -0.4],
        gamma: family
            .is_zero_inflated()
            .then(|| vec![0.3, 0.0, 0.0, 0.0, 0.3, -0.3, 0.0]),
        r: None,
    }
}

/// Per-user truth: population center plus `N(0, scale²·I)`, projected onto
/// the unit ball.
pub fn perturb_truth<R: Rng + ?Sized>(rng: &mut R, center: &ModelParams<f64>, scale: f64) -> ModelParams<f64> {
    let mut jitter = |v: &[f64]| {
        let w: Vec<f64> = v
            .iter()
            .map(|&c| c + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        FeatureVector::new(w).project_to_unit_ball().0
    };
    let beta = jitter(&center.beta);
    let gamma = center.gamma.as_ref().map(|g| jitter(g));
    ModelParams { beta, gamma, r: None }
}

/// Environment of one MRT user.
pub fn user_env(family: EnvFamily, omega: f64, truth: ModelParams<f64>) -> EnvSpec<f64> {
    EnvSpec {
        family,
        omega,
        truth,
        k: 2,
        d: MRT_FEATURE_DIM,
        feature_mode: FeatureMode::FromLog,
    }
}

pub fn row_for(user_id: &str, cov: &UserCovariates, day: usize) -> MrtRow {
    MrtRow {
        user_id: user_id.to_string(),
        day: day as u32,
        age: cov.age,
        gender: cov.gender,
        audit: cov.audit,
        days_since_download: day as u32,
        action: 0,
        propensity: 0.0,
        outcome: 0,
    }
}

pub fn user_id(n: usize) -> String {
    format!("u{n:04}")
}

/// A synthetic MRT log with its per-user truths.
#[derive(Debug, Clone, PartialEq)]
pub struct MrtDataset {
    pub log: MrtLog,
    pub truths: Vec<ModelParams<f64>>,
    pub scaler: CovariateScaler,
}

/// Generates a log under constant-probability randomization. Outcomes use
/// per-user truths around `center` and the scaled feature map.
pub fn gen_mrt_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    config: &MrtGenConfig,
    center: &ModelParams<f64>,
) -> Result<MrtDataset> {
    let covs: Vec<UserCovariates> = (0..config.n_users).map(|_| gen_covariates(rng)).collect();
    let scaler = cohort_scaler(&covs, config.t_days);
    let mut users = Vec::with_capacity(config.n_users);
    let mut truths = Vec::with_capacity(config.n_users);
    for (n, cov) in covs.iter().enumerate() {
        let truth = perturb_truth(rng, center, config.heterogeneity);
        let env = user_env(config.family, config.omega, truth.clone());
        let id = user_id(n);
        let mut rows = Vec::with_capacity(config.t_days);
        for day in 0..config.t_days {
            let mut row = row_for(&id, cov, day);
            let a = usize::from(rng.random::<f64>() < config.logging_p);
            let phi: FeatureVector<f64> = scaler.features(&row, a);
            row.action = a as u8;
            row.propensity = config.logging_p;
            row.outcome = draw_outcome(&env, &phi, rng)?;
            rows.push(row);
        }
        users.push(UserLog { user_id: id, rows });
        truths.push(truth);
    }
    Ok(MrtDataset {
        log: MrtLog {
            users,
            warnings: Vec::new(),
        },
        truths,
        scaler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_examples() {
        let x = [1.0, 30.0, 1.0, 12.0, 5.0];
        let s = [1.0, 5.0];
        assert_eq!(feature_map(&x, &s, 1).0, vec![1.0, 30.0, 1.0, 12.0, 5.0, 1.0, 5.0]);
        assert_eq!(feature_map(&x, &s, 0).0, vec![1.0, 30.0, 1.0, 12.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let text = "user_id,day,age,gender,audit,days_since_download,action,propensity,outcome\n\
                    a,0,30,1,12,0,1,0.6,2\n\
                    a,0,30,1,12,0,0,0.6,1\n";
        assert!(matches!(read_mrt_csv(text.as_bytes()), Err(MrtError::Duplicate { .. })));
    }

    #[test]
    fn low_audit_is_a_warning() {
        let text = "user_id,day,age,gender,audit,days_since_download,action,propensity,outcome\n\
                    a,0,30,1,7,0,1,0.6,2\n";
        let log = read_mrt_csv(text.as_bytes()).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.warnings.len(), 1);
    }

    #[test]
    fn missing_and_malformed_fields_are_reported() {
        let text = "user_id,day,age,gender,audit,action,propensity,outcome\na,0,30,1,12,1,0.6,2\n";
        match read_mrt_csv(text.as_bytes()) {
            Err(MrtError::MissingColumns(c)) => assert_eq!(c, vec!["days_since_download"]),
            other => panic!("{other:?}"),
        }
        let text = "user_id,day,age,gender,audit,days_since_download,action,propensity,outcome\n\
                    a,0,30,1,12,0,1,0.6,2\n\
                    a,1,thirty,1,12,1,1,0.6,2\n";
        match read_mrt_csv(text.as_bytes()) {
            Err(MrtError::Malformed { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "age");
            }
            other => panic!("{other:?}"),
        }
    }
}
