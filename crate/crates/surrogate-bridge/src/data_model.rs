//! Harmonized two-study data structure and design-based sampling weights.
//!
//! One dataset pools an observational study (`z = 1`, everyone untreated) with
//! a phase 3 trial (`z = 0`, randomized to `a ∈ {0,1}`). The surrogate `S` is
//! measured on a designed subset (`eps_s = 1`): all cases plus a control
//! sample in the observational study, and per-arm simple random samples in the
//! trial. [`compute_design_weights`] turns that design into per-record
//! inverse-probability-of-sampling weights `1/π`; records without a measured
//! surrogate get weight 0 so dataset indices stay stable across modules.
//!
//! All types are immutable after construction and the operations are pure.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("dataset failed validation with {0} violation(s); first: {1}")]
    Invalid(usize, String),
    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },
    #[error("outcome derivation requires an observational (z=1) record with follow-up fields")]
    OutcomeUndefined,
    #[error("no cases (y=1) among observational records; case-control weights undefined")]
    NoCases,
    #[error("no controls (y=0) among observational records")]
    NoControls,
    #[error("case-control design wants {wanted} sampled controls but only {available} exist")]
    ControlsExhausted { wanted: usize, available: usize },
    #[error("zero sampled records declared for phase 3 arm {arm}")]
    EmptyArmSample { arm: u8 },
    #[error("phase 3 arm {arm} has no records")]
    EmptyArm { arm: u8 },
    #[error("observational record {id} has no derivable outcome at t0 (censored before t0)")]
    CensoredOutcome { id: String },
    #[error("cannot infer sampling design: {0}")]
    DesignInference(String),
    #[error("csv parse error at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One subject from either study.
///
/// Invariants (enforced by [`validate_dataset`]): observational records have
/// `a = 0`; `s` is present iff `eps_s` is set; phase 3 records carry no
/// follow-up fields (`t_tilde`, `delta`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantRecord {
    pub id: String,
    /// Baseline covariates X.
    pub x: Vec<f64>,
    /// Study indicator: 1 = observational, 0 = phase 3.
    pub z: u8,
    /// Treatment indicator.
    pub a: u8,
    /// Whether the surrogate was measured.
    pub eps_s: bool,
    /// Surrogate S, present iff `eps_s`.
    pub s: Option<Vec<f64>>,
    /// Follow-up time in days (observational records only).
    pub t_tilde: Option<f64>,
    /// Event indicator (observational records only).
    pub delta: Option<u8>,
    /// Binary target outcome, derived from `(t_tilde, delta)` at `t0`.
    pub y: Option<u8>,
}

/// Result of applying the outcome rule at horizon `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeStatus {
    Event,
    NoEvent,
    /// Censored before `t0`; the outcome is not determined.
    Unknown,
}

impl OutcomeStatus {
    pub fn as_binary(self) -> Option<u8> {
        match self {
            OutcomeStatus::Event => Some(1),
            OutcomeStatus::NoEvent => Some(0),
            OutcomeStatus::Unknown => None,
        }
    }
}

/// Derive the binary outcome `Y = I(T ≤ t0)` from follow-up fields.
///
/// The value is known when the event was observed by `t0` (`delta = 1`,
/// `t_tilde ≤ t0`) or follow-up reached `t0` without an event (`delta = 0`,
/// `t_tilde = t0`); anything else is censored and returns
/// [`OutcomeStatus::Unknown`].
pub fn derive_outcome(record: &ParticipantRecord, t0: f64) -> Result<OutcomeStatus, DataError> {
    if record.z != 1 {
        return Err(DataError::OutcomeUndefined);
    }
    let (t, d) = match (record.t_tilde, record.delta) {
        (Some(t), Some(d)) => (t, d),
        _ => return Err(DataError::OutcomeUndefined),
    };
    Ok(if d == 1 && t <= t0 {
        OutcomeStatus::Event
    } else if d == 0 && t == t0 {
        OutcomeStatus::NoEvent
    } else {
        OutcomeStatus::Unknown
    })
}

/// Pooled records from both studies plus schema and design metadata.
#[derive(Debug, Clone)]
pub struct HarmonizedDataset {
    pub records: Vec<ParticipantRecord>,
    /// Time horizon in days for the target outcome.
    pub t0: f64,
    pub covariate_names: Vec<String>,
    pub surrogate_names: Vec<String>,
    pub n_obs: usize,
    pub n_rct: usize,
    /// Carry records whose outcome is censored before `t0`. Estimators refuse
    /// such records either way; the flag only affects validation.
    pub allow_censored: bool,
}

impl HarmonizedDataset {
    /// Assemble a dataset, deriving `y` for observational records where the
    /// follow-up fields determine it. Structural invariants are checked by
    /// [`validate_dataset`], not here.
    pub fn new(
        mut records: Vec<ParticipantRecord>,
        t0: f64,
        covariate_names: Vec<String>,
        surrogate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        let mut n_obs = 0;
        let mut n_rct = 0;
        for r in &mut records {
            if r.z == 1 {
                n_obs += 1;
                if r.y.is_none() {
                    if let Ok(status) = derive_outcome(r, t0) {
                        r.y = status.as_binary();
                    }
                }
            } else {
                n_rct += 1;
            }
        }
        Ok(Self {
            records,
            t0,
            covariate_names,
            surrogate_names,
            n_obs,
            n_rct,
            allow_censored: false,
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Read the CSV interchange format (see [`write_csv`](Self::write_csv)).
    pub fn read_csv<R: Read>(reader: R, t0: f64) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| DataError::Csv {
                line: 1,
                reason: e.to_string(),
            })?
            .clone();
        let names: Vec<String> = headers.iter().map(str::to_string).collect();
        let mut surrogate_cols = Vec::new();
        let mut covariate_cols = Vec::new();
        let mut fixed = std::collections::HashMap::new();
        for (idx, name) in names.iter().enumerate() {
            match name.as_str() {
                "id" | "z" | "a" | "eps_s" | "t_tilde" | "delta" => {
                    fixed.insert(name.clone(), idx);
                }
                _ if name.starts_with("s_") => surrogate_cols.push((idx, name.clone())),
                _ if name.starts_with("x_") => covariate_cols.push((idx, name.clone())),
                other => {
                    return Err(DataError::Csv {
                        line: 1,
                        reason: format!("unrecognized column '{other}'"),
                    })
                }
            }
        }
        for required in ["id", "z", "a", "eps_s"] {
            if !fixed.contains_key(required) {
                return Err(DataError::Csv {
                    line: 1,
                    reason: format!("missing required column '{required}'"),
                });
            }
        }

        let parse_f64 = |field: &str, line: usize| -> Result<f64, DataError> {
            field.trim().parse::<f64>().map_err(|_| DataError::Csv {
                line,
                reason: format!("not a number: '{field}'"),
            })
        };
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| DataError::Csv {
                line,
                reason: e.to_string(),
            })?;
            let get = |key: &str| row.get(fixed[key]).unwrap_or("");
            let z = parse_f64(get("z"), line)? as u8;
            let a = parse_f64(get("a"), line)? as u8;
            let eps_s = parse_f64(get("eps_s"), line)? != 0.0;
            let s = if eps_s {
                let mut vals = Vec::with_capacity(surrogate_cols.len());
                for (idx, _) in &surrogate_cols {
                    vals.push(parse_f64(row.get(*idx).unwrap_or(""), line)?);
                }
                Some(vals)
            } else {
                None
            };
            let mut x = Vec::with_capacity(covariate_cols.len());
            for (idx, _) in &covariate_cols {
                x.push(parse_f64(row.get(*idx).unwrap_or(""), line)?);
            }
            let opt = |key: &str| -> Result<Option<f64>, DataError> {
                match fixed.get(key) {
                    Some(&idx) => {
                        let field = row.get(idx).unwrap_or("").trim();
                        if field.is_empty() {
                            Ok(None)
                        } else {
                            Ok(Some(parse_f64(field, line)?))
                        }
                    }
                    None => Ok(None),
                }
            };
            records.push(ParticipantRecord {
                id: get("id").to_string(),
                x,
                z,
                a,
                eps_s,
                s,
                t_tilde: opt("t_tilde")?,
                delta: opt("delta")?.map(|d| d as u8),
                y: None,
            });
        }
        let covariate_names = covariate_cols.into_iter().map(|(_, n)| n).collect();
        let surrogate_names = surrogate_cols.into_iter().map(|(_, n)| n).collect();
        Self::new(records, t0, covariate_names, surrogate_names)
    }

    pub fn read_csv_path(path: &Path, t0: f64) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), t0)
    }

    /// Write one row per participant: `id, z, a, eps_s, s_1..s_q, x_1..x_p,
    /// t_tilde, delta`, with blank surrogate cells when `eps_s = 0` and blank
    /// follow-up cells for phase 3 records. Numbers use shortest
    /// round-trippable formatting, so re-ingesting reproduces values
    /// bit-for-bit.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "z".into(), "a".into(), "eps_s".into()];
        header.extend(self.surrogate_names.iter().cloned());
        header.extend(self.covariate_names.iter().cloned());
        header.push("t_tilde".into());
        header.push("delta".into());
        wtr.write_record(&header).map_err(csv_io)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for r in &self.records {
            row.clear();
            row.push(r.id.clone());
            row.push(r.z.to_string());
            row.push(r.a.to_string());
            row.push(u8::from(r.eps_s).to_string());
            match &r.s {
                Some(s) => row.extend(s.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), self.surrogate_names.len())),
            }
            row.extend(r.x.iter().map(|v| v.to_string()));
            row.push(r.t_tilde.map(|v| v.to_string()).unwrap_or_default());
            row.push(r.delta.map(|v| v.to_string()).unwrap_or_default());
            wtr.write_record(row.iter()).map_err(csv_io)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Csv {
        line: 0,
        reason: e.to_string(),
    }
}

/// Two-phase sampling design for measuring the surrogate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingDesign {
    pub obs: ObsDesign,
    pub rct: RctDesign,
}

/// Observational-study design for measuring S.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObsDesign {
    /// All cases plus `control_ratio` times as many sampled controls.
    CaseControl { control_ratio: u32 },
    /// S measured on everyone.
    Complete,
}

/// Phase 3 design for measuring S.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RctDesign {
    /// Per-arm simple random samples of fixed size (arm 0, arm 1).
    Srs { sampled_per_arm: [usize; 2] },
    /// S measured on everyone.
    Complete,
}

impl SamplingDesign {
    /// Reconstruct the design from realized sampling counts: complete when
    /// every record in a stratum is measured, otherwise case-control /
    /// per-arm SRS with the realized counts. The realized control sample must
    /// be an integer multiple of the case count.
    pub fn infer(d: &HarmonizedDataset) -> Result<Self, DataError> {
        let mut n_cases = 0usize;
        let mut sampled_controls = 0usize;
        let mut all_obs_sampled = true;
        let mut arm_total = [0usize; 2];
        let mut arm_sampled = [0usize; 2];
        for r in &d.records {
            if r.z == 1 {
                match r.y {
                    Some(1) => n_cases += 1,
                    Some(0) => {
                        if r.eps_s {
                            sampled_controls += 1;
                        }
                    }
                    _ => {
                        return Err(DataError::DesignInference(format!(
                            "record {} has no derivable outcome",
                            r.id
                        )))
                    }
                }
                all_obs_sampled &= r.eps_s;
            } else {
                let arm = (r.a == 1) as usize;
                arm_total[arm] += 1;
                if r.eps_s {
                    arm_sampled[arm] += 1;
                }
            }
        }
        let obs = if all_obs_sampled {
            ObsDesign::Complete
        } else {
            if n_cases == 0 {
                return Err(DataError::NoCases);
            }
            if sampled_controls == 0 || sampled_controls % n_cases != 0 {
                return Err(DataError::DesignInference(format!(
                    "{sampled_controls} sampled controls is not an integer multiple of \
                     {n_cases} cases; specify the design explicitly"
                )));
            }
            ObsDesign::CaseControl {
                control_ratio: (sampled_controls / n_cases) as u32,
            }
        };
        let rct = if arm_sampled == arm_total {
            RctDesign::Complete
        } else {
            RctDesign::Srs {
                sampled_per_arm: arm_sampled,
            }
        };
        Ok(SamplingDesign { obs, rct })
    }
}

/// Sampling stratum of a record, the unit of the stratified bootstrap and of
/// the sampling-probability model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    ObsCase,
    ObsControl,
    RctArm0,
    RctArm1,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [
        Stratum::ObsCase,
        Stratum::ObsControl,
        Stratum::RctArm0,
        Stratum::RctArm1,
    ];

    pub fn index(self) -> usize {
        match self {
            Stratum::ObsCase => 0,
            Stratum::ObsControl => 1,
            Stratum::RctArm0 => 2,
            Stratum::RctArm1 => 3,
        }
    }
}

/// Per-record design weights `1/π` plus the sampling probabilities and strata
/// they came from.
#[derive(Debug, Clone)]
pub struct DesignWeights {
    /// `1/π` for S-measured records, 0 for `eps_s = 0` records.
    pub weight: Vec<f64>,
    /// Design sampling probability π of each record's stratum (also for
    /// records that happened not to be sampled).
    pub pi: Vec<f64>,
    pub stratum: Vec<Stratum>,
    pub n_cases: usize,
    pub n_controls: usize,
    pub arm_totals: [usize; 2],
    pub arm_sampled: [usize; 2],
}

/// Design-based weights for the two-phase measurement of S.
///
/// Cases get weight 1; sampled controls get `n_controls / (k · n_cases)`;
/// phase 3 records in arm `a` get `n_arm / n_sampled`; records with
/// `eps_s = 0` get weight 0 but keep their stratum's π.
pub fn compute_design_weights(
    d: &HarmonizedDataset,
    design: &SamplingDesign,
) -> Result<DesignWeights, DataError> {
    let n = d.records.len();
    let mut stratum = Vec::with_capacity(n);
    let mut n_cases = 0usize;
    let mut n_controls = 0usize;
    let mut arm_totals = [0usize; 2];
    let mut arm_sampled = [0usize; 2];
    for r in &d.records {
        let s = if r.z == 1 {
            match r.y {
                Some(1) => {
                    n_cases += 1;
                    Stratum::ObsCase
                }
                Some(0) => {
                    n_controls += 1;
                    Stratum::ObsControl
                }
                _ => {
                    return Err(DataError::CensoredOutcome { id: r.id.clone() });
                }
            }
        } else {
            let arm = (r.a == 1) as usize;
            arm_totals[arm] += 1;
            if r.eps_s {
                arm_sampled[arm] += 1;
            }
            if arm == 0 {
                Stratum::RctArm0
            } else {
                Stratum::RctArm1
            }
        };
        stratum.push(s);
    }

    // π per stratum.
    let pi_control = match design.obs {
        ObsDesign::Complete => 1.0,
        ObsDesign::CaseControl { control_ratio } => {
            if n_cases == 0 {
                return Err(DataError::NoCases);
            }
            if n_controls == 0 {
                return Err(DataError::NoControls);
            }
            let wanted = control_ratio as usize * n_cases;
            if wanted > n_controls {
                return Err(DataError::ControlsExhausted {
                    wanted,
                    available: n_controls,
                });
            }
            wanted as f64 / n_controls as f64
        }
    };
    let mut pi_arm = [1.0f64; 2];
    if let RctDesign::Srs { sampled_per_arm } = design.rct {
        for arm in 0..2 {
            if arm_totals[arm] == 0 {
                return Err(DataError::EmptyArm { arm: arm as u8 });
            }
            if sampled_per_arm[arm] == 0 {
                return Err(DataError::EmptyArmSample { arm: arm as u8 });
            }
            pi_arm[arm] = sampled_per_arm[arm] as f64 / arm_totals[arm] as f64;
        }
    }

    let mut weight = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    for (r, &s) in d.records.iter().zip(&stratum) {
        let record_pi = match s {
            Stratum::ObsCase => 1.0,
            Stratum::ObsControl => pi_control,
            Stratum::RctArm0 => pi_arm[0],
            Stratum::RctArm1 => pi_arm[1],
        };
        pi.push(record_pi);
        weight.push(if r.eps_s { 1.0 / record_pi } else { 0.0 });
    }
    Ok(DesignWeights {
        weight,
        pi,
        stratum,
        n_cases,
        n_controls,
        arm_totals,
        arm_sampled,
    })
}

/// One violated invariant, with the offending record when applicable.
#[derive(Debug, Clone)]
pub struct Violation {
    pub record_id: Option<String>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.record_id {
            Some(id) => write!(f, "record {id}: {}", self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

/// Outcome of [`validate_dataset`].
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Convert to an error when any invariant is violated.
    pub fn into_result(self) -> Result<(), DataError> {
        if self.passed() {
            Ok(())
        } else {
            let first = self.violations[0].to_string();
            Err(DataError::Invalid(self.violations.len(), first))
        }
    }
}

/// Check every structural invariant of the harmonized dataset and report all
/// violations with record ids.
pub fn validate_dataset(d: &HarmonizedDataset) -> ValidationReport {
    let mut v = Vec::new();
    let mut push = |id: Option<&str>, rule: String| {
        v.push(Violation {
            record_id: id.map(str::to_string),
            rule,
        })
    };
    if d.records.is_empty() {
        push(None, "dataset is empty".into());
        return ValidationReport { violations: v };
    }
    if d.n_obs == 0 {
        push(None, "no observational (z=1) records".into());
    }
    if d.n_rct == 0 {
        push(None, "no phase 3 (z=0) records".into());
    }
    if d.n_obs + d.n_rct != d.records.len() {
        push(
            None,
            format!(
                "n_obs + n_rct = {} does not match record count {}",
                d.n_obs + d.n_rct,
                d.records.len()
            ),
        );
    }
    let p = d.covariate_names.len();
    let q = d.surrogate_names.len();
    let mut ids = HashSet::with_capacity(d.records.len());
    for r in &d.records {
        if !ids.insert(r.id.as_str()) {
            push(Some(&r.id), "duplicate id".into());
        }
        if r.z > 1 {
            push(Some(&r.id), format!("study indicator z={} not in {{0,1}}", r.z));
        }
        if r.a > 1 {
            push(Some(&r.id), format!("treatment a={} not in {{0,1}}", r.a));
        }
        if r.z == 1 && r.a != 0 {
            push(Some(&r.id), "observational record treated".into());
        }
        if r.x.len() != p {
            push(
                Some(&r.id),
                format!("covariate dimension {} != {}", r.x.len(), p),
            );
        }
        match (&r.s, r.eps_s) {
            (Some(s), true) => {
                if s.len() != q {
                    push(
                        Some(&r.id),
                        format!("surrogate dimension {} != {}", s.len(), q),
                    );
                }
            }
            (None, true) => push(Some(&r.id), "surrogate missing".into()),
            (Some(_), false) => push(Some(&r.id), "surrogate present but eps_s = 0".into()),
            (None, false) => {}
        }
        if r.z == 1 {
            match derive_outcome(r, d.t0) {
                Ok(status) => {
                    if let (Some(y), Some(derived)) = (r.y, status.as_binary()) {
                        if y != derived {
                            push(
                                Some(&r.id),
                                format!("y={y} inconsistent with follow-up fields (derive {derived})"),
                            );
                        }
                    }
                    if status == OutcomeStatus::Unknown && r.eps_s && !d.allow_censored {
                        push(
                            Some(&r.id),
                            "S-measured record censored before t0 (unsupported without IPCW)"
                                .into(),
                        );
                    }
                }
                Err(_) => push(Some(&r.id), "observational record lacks follow-up fields".into()),
            }
        }
    }
    ValidationReport { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn obs_record(id: &str, t_tilde: f64, delta: u8, eps: bool, s: f64) -> ParticipantRecord {
        ParticipantRecord {
            id: id.into(),
            x: vec![0.0, 25.0, 0.1],
            z: 1,
            a: 0,
            eps_s: eps,
            s: eps.then(|| vec![s]),
            t_tilde: Some(t_tilde),
            delta: Some(delta),
            y: None,
        }
    }

    pub(crate) fn rct_record(id: &str, a: u8, eps: bool, s: f64) -> ParticipantRecord {
        ParticipantRecord {
            id: id.into(),
            x: vec![1.0, 30.0, -0.4],
            z: 0,
            a,
            eps_s: eps,
            s: eps.then(|| vec![s]),
            t_tilde: None,
            delta: None,
            y: None,
        }
    }

    fn small_dataset() -> HarmonizedDataset {
        let records = vec![
            obs_record("c1", 30.0, 1, true, -2.0),
            obs_record("n1", 90.0, 0, true, -1.4),
            obs_record("n2", 90.0, 0, false, 0.0),
            obs_record("n3", 90.0, 0, false, 0.0),
            rct_record("p1", 0, true, -1.5),
            rct_record("p2", 0, false, 0.0),
            rct_record("v1", 1, true, -1.2),
            rct_record("v2", 1, false, 0.0),
        ];
        HarmonizedDataset::new(
            records,
            90.0,
            vec!["x_1".into(), "x_2".into(), "x_3".into()],
            vec!["s_1".into()],
        )
        .unwrap()
    }

    #[test]
    fn derive_outcome_rules() {
        let r = obs_record("a", 30.0, 1, false, 0.0);
        assert_eq!(derive_outcome(&r, 90.0).unwrap(), OutcomeStatus::Event);
        let r = obs_record("b", 90.0, 0, false, 0.0);
        assert_eq!(derive_outcome(&r, 90.0).unwrap(), OutcomeStatus::NoEvent);
        let r = obs_record("c", 45.0, 0, false, 0.0);
        assert_eq!(derive_outcome(&r, 90.0).unwrap(), OutcomeStatus::Unknown);
        let r = rct_record("d", 0, false, 0.0);
        assert!(derive_outcome(&r, 90.0).is_err());
    }

    #[test]
    fn validate_flags_treated_observational() {
        let mut d = small_dataset();
        d.records[0].a = 1;
        let report = validate_dataset(&d);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule.contains("observational record treated")));
    }

    #[test]
    fn validate_flags_missing_surrogate() {
        let mut d = small_dataset();
        d.records[1].s = None;
        let report = validate_dataset(&d);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule.contains("surrogate missing")));
    }

    #[test]
    fn validate_passes_clean_data() {
        assert!(validate_dataset(&small_dataset()).passed());
    }

    #[test]
    fn weights_match_design() {
        let d = small_dataset();
        let design = SamplingDesign {
            obs: ObsDesign::CaseControl { control_ratio: 1 },
            rct: RctDesign::Srs {
                sampled_per_arm: [1, 1],
            },
        };
        let w = compute_design_weights(&d, &design).unwrap();
        assert_eq!(w.n_cases, 1);
        assert_eq!(w.n_controls, 3);
        // case
        assert_abs_diff_eq!(w.weight[0], 1.0);
        // sampled control: n_controls / (k * n_cases) = 3
        assert_abs_diff_eq!(w.weight[1], 3.0);
        // unsampled records carry weight 0 but keep the stratum π
        assert_abs_diff_eq!(w.weight[2], 0.0);
        assert_abs_diff_eq!(w.pi[2], 1.0 / 3.0);
        // phase 3 arms: 2 enrolled, 1 sampled → weight 2
        assert_abs_diff_eq!(w.weight[4], 2.0);
        assert_abs_diff_eq!(w.weight[6], 2.0);
    }

    #[test]
    fn complete_design_gives_unit_weights() {
        let records = vec![
            obs_record("c1", 30.0, 1, true, -2.0),
            obs_record("n1", 90.0, 0, true, -1.4),
            rct_record("p1", 0, true, -1.5),
            rct_record("v1", 1, true, -1.2),
        ];
        let d = HarmonizedDataset::new(
            records,
            90.0,
            vec!["x_1".into(), "x_2".into(), "x_3".into()],
            vec!["s_1".into()],
        )
        .unwrap();
        let design = SamplingDesign {
            obs: ObsDesign::Complete,
            rct: RctDesign::Complete,
        };
        let w = compute_design_weights(&d, &design).unwrap();
        assert!(w.weight.iter().all(|&v| v == 1.0));
        assert!(w.pi.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_cases_is_an_error() {
        let records = vec![
            obs_record("n1", 90.0, 0, true, -1.4),
            obs_record("n2", 90.0, 0, false, 0.0),
            rct_record("p1", 0, true, -1.5),
            rct_record("v1", 1, true, -1.2),
        ];
        let d = HarmonizedDataset::new(
            records,
            90.0,
            vec!["x_1".into(), "x_2".into(), "x_3".into()],
            vec!["s_1".into()],
        )
        .unwrap();
        let design = SamplingDesign {
            obs: ObsDesign::CaseControl { control_ratio: 1 },
            rct: RctDesign::Complete,
        };
        assert!(matches!(
            compute_design_weights(&d, &design),
            Err(DataError::NoCases)
        ));
    }

    #[test]
    fn halving_samples_doubles_weights() {
        // 2 cases, 8 controls. k=4 samples all 8; k=2 samples 4.
        let mut records = vec![
            obs_record("c1", 10.0, 1, true, -2.0),
            obs_record("c2", 20.0, 1, true, -2.1),
        ];
        for i in 0..8 {
            records.push(obs_record(&format!("n{i}"), 90.0, 0, i < 4, -1.4));
        }
        records.push(rct_record("p1", 0, true, -1.5));
        records.push(rct_record("p2", 0, false, 0.0));
        records.push(rct_record("v1", 1, true, -1.2));
        records.push(rct_record("v2", 1, false, 0.0));
        let d = HarmonizedDataset::new(
            records,
            90.0,
            vec!["x_1".into(), "x_2".into(), "x_3".into()],
            vec!["s_1".into()],
        )
        .unwrap();
        let full = SamplingDesign {
            obs: ObsDesign::CaseControl { control_ratio: 4 },
            rct: RctDesign::Srs {
                sampled_per_arm: [2, 2],
            },
        };
        let half = SamplingDesign {
            obs: ObsDesign::CaseControl { control_ratio: 2 },
            rct: RctDesign::Srs {
                sampled_per_arm: [1, 1],
            },
        };
        let wf = compute_design_weights(&d, &full).unwrap();
        let wh = compute_design_weights(&d, &half).unwrap();
        for i in 0..d.records.len() {
            if d.records[i].eps_s && wf.stratum[i] != Stratum::ObsCase {
                assert_abs_diff_eq!(wh.weight[i], 2.0 * wf.weight[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weight_sum_identity_case_control() {
        // When exactly k·n_cases controls are sampled, weights over S-measured
        // z=1 records sum to n_obs.
        let mut records = vec![obs_record("c1", 10.0, 1, true, -2.0)];
        for i in 0..10 {
            records.push(obs_record(&format!("n{i}"), 90.0, 0, i < 5, -1.4));
        }
        records.push(rct_record("p1", 0, true, -1.5));
        records.push(rct_record("v1", 1, true, -1.2));
        let d = HarmonizedDataset::new(
            records,
            90.0,
            vec!["x_1".into(), "x_2".into(), "x_3".into()],
            vec!["s_1".into()],
        )
        .unwrap();
        let design = SamplingDesign {
            obs: ObsDesign::CaseControl { control_ratio: 5 },
            rct: RctDesign::Complete,
        };
        let w = compute_design_weights(&d, &design).unwrap();
        let total: f64 = d
            .records
            .iter()
            .zip(&w.weight)
            .filter(|(r, _)| r.z == 1)
            .map(|(_, wt)| wt)
            .sum();
        assert_abs_diff_eq!(total, d.n_obs as f64, epsilon = 1e-9);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let d = small_dataset();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = HarmonizedDataset::read_csv(buf.as_slice(), d.t0).unwrap();
        assert_eq!(back.records.len(), d.records.len());
        for (a, b) in d.records.iter().zip(&back.records) {
            assert_eq!(a, b);
        }
        assert_eq!(back.covariate_names, d.covariate_names);
        assert_eq!(back.surrogate_names, d.surrogate_names);
    }

    #[test]
    fn design_inference_recovers_case_control() {
        let mut records = vec![obs_record("c1", 10.0, 1, true, -2.0)];
        for i in 0..10 {
            records.push(obs_record(&format!("n{i}"), 90.0, 0, i < 5, -1.4));
        }
        records.push(rct_record("p1", 0, true, -1.5));
        records.push(rct_record("p2", 0, false, 0.0));
        records.push(rct_record("v1", 1, true, -1.2));
        let d = HarmonizedDataset::new(
            records,
            90.0,
            vec!["x_1".into(), "x_2".into(), "x_3".into()],
            vec!["s_1".into()],
        )
        .unwrap();
        let design = SamplingDesign::infer(&d).unwrap();
        assert_eq!(design.obs, ObsDesign::CaseControl { control_ratio: 5 });
        assert_eq!(
            design.rct,
            RctDesign::Srs {
                sampled_per_arm: [1, 1]
            }
        );
    }
}
