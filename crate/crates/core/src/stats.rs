//! Analysis of multi-select preference judgments.
//!
//! A [`JudgmentTable`] holds one row per judgment block (a participant's
//! answer to one task) and one binary column per option. Cochran's Q tests
//! whether the options are chosen at different rates; pairwise McNemar tests
//! with Bonferroni correction locate the differences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
use thiserror::Error;

/// Largest discordant count for which McNemar uses the exact binomial test.
pub const EXACT_MCNEMAR_MAX: u64 = 25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("unknown option {0:?}")]
    UnknownOption(String),
    #[error("a selection must contain at least one option")]
    EmptySelection,
    #[error("every row of the table is constant; the statistic is undefined")]
    DegenerateTable,
    #[error("judgment table needs at least {min} {what}, got {got}")]
    TooSmall { what: &'static str, min: usize, got: usize },
    #[error("row {row} has {got} entries, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("record {record}: {message}")]
    Input { record: usize, message: String },
}

/// The five box scalings shown in the scaling study, ordered by area factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScalingOption {
    Half,
    TwoThirds,
    Original,
    OneAndHalf,
    Double,
}

impl ScalingOption {
    pub const ALL: [ScalingOption; 5] = [
        ScalingOption::Half,
        ScalingOption::TwoThirds,
        ScalingOption::Original,
        ScalingOption::OneAndHalf,
        ScalingOption::Double,
    ];

    pub fn factor(self) -> f64 {
        match self {
            ScalingOption::Half => 0.5,
            ScalingOption::TwoThirds => 0.67,
            ScalingOption::Original => 1.0,
            ScalingOption::OneAndHalf => 1.5,
            ScalingOption::Double => 2.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScalingOption::Half => "0.5",
            ScalingOption::TwoThirds => "0.67",
            ScalingOption::Original => "1.0",
            ScalingOption::OneAndHalf => "1.5",
            ScalingOption::Double => "2.0",
        }
    }
}

impl FromStr for ScalingOption {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let value: f64 = trimmed
            .parse()
            .map_err(|_| StatsError::UnknownOption(trimmed.to_string()))?;
        ScalingOption::ALL
            .into_iter()
            .find(|o| o.factor() == value)
            .ok_or_else(|| StatsError::UnknownOption(trimmed.to_string()))
    }
}

impl fmt::Display for ScalingOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Non-empty set of chosen scaling options.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSet(BTreeSet<ScalingOption>);

impl SelectionSet {
    pub fn new(options: impl IntoIterator<Item = ScalingOption>) -> Result<Self, StatsError> {
        let set: BTreeSet<_> = options.into_iter().collect();
        if set.is_empty() {
            return Err(StatsError::EmptySelection);
        }
        Ok(Self(set))
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self, StatsError> {
        let opts = labels
            .iter()
            .map(|l| l.as_ref().parse())
            .collect::<Result<Vec<ScalingOption>, _>>()?;
        Self::new(opts)
    }

    pub fn options(&self) -> &BTreeSet<ScalingOption> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceGroup {
    Smaller,
    Larger,
    Original,
    NoPreference,
}

impl PreferenceGroup {
    pub const ALL: [PreferenceGroup; 4] = [
        PreferenceGroup::Smaller,
        PreferenceGroup::Larger,
        PreferenceGroup::Original,
        PreferenceGroup::NoPreference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PreferenceGroup::Smaller => "smaller",
            PreferenceGroup::Larger => "larger",
            PreferenceGroup::Original => "original",
            PreferenceGroup::NoPreference => "no_preference",
        }
    }
}

/// Smaller if only downscaled boxes were chosen, Larger if only upscaled
/// ones, Original if only the unscaled box, otherwise NoPreference.
pub fn group_preference(s: &SelectionSet) -> PreferenceGroup {
    use ScalingOption::*;
    let opts = s.options();
    if opts.iter().all(|o| matches!(o, Half | TwoThirds)) {
        PreferenceGroup::Smaller
    } else if opts.iter().all(|o| matches!(o, OneAndHalf | Double)) {
        PreferenceGroup::Larger
    } else if opts.len() == 1 && opts.contains(&Original) {
        PreferenceGroup::Original
    } else {
        PreferenceGroup::NoPreference
    }
}

/// Binary judgment matrix: rows are judgment blocks, columns are options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentTable {
    options: Vec<String>,
    rows: Vec<Vec<bool>>,
}

impl JudgmentTable {
    pub fn new(options: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self, StatsError> {
        if options.len() < 2 {
            return Err(StatsError::TooSmall {
                what: "options",
                min: 2,
                got: options.len(),
            });
        }
        if rows.len() < 2 {
            return Err(StatsError::TooSmall {
                what: "rows",
                min: 2,
                got: rows.len(),
            });
        }
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != options.len()) {
            return Err(StatsError::Ragged {
                row,
                got: r.len(),
                expected: options.len(),
            });
        }
        Ok(Self { options, rows })
    }

    /// Builds a table from 0/1 integers.
    pub fn from_bits(options: &[&str], rows: &[Vec<u8>]) -> Result<Self, StatsError> {
        Self::new(
            options.iter().map(|s| s.to_string()).collect(),
            rows.iter().map(|r| r.iter().map(|&v| v != 0).collect()).collect(),
        )
    }

    /// Builds one row per record; the option order is taken from the first
    /// record and every record must list the same options.
    pub fn from_labeled(records: &[LabeledJudgment]) -> Result<Self, StatsError> {
        let first = records.first().ok_or(StatsError::TooSmall {
            what: "rows",
            min: 2,
            got: 0,
        })?;
        let options = first.options.clone();
        let mut rows = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.options != options {
                return Err(StatsError::Input {
                    record: i,
                    message: "option list differs from the first record".into(),
                });
            }
            if rec.selected.is_empty() {
                return Err(StatsError::Input {
                    record: i,
                    message: "empty selection".into(),
                });
            }
            let mut row = vec![false; options.len()];
            for s in &rec.selected {
                let j = options.iter().position(|o| o == s).ok_or_else(|| StatsError::Input {
                    record: i,
                    message: format!("selected option {s:?} is not offered"),
                })?;
                row[j] = true;
            }
            rows.push(row);
        }
        Self::new(options, rows)
    }

    /// Parses CSV with a header of option labels and 0/1 cells. Columns
    /// named `participant`, `participant_id` or `task_id` are skipped.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, StatsError> {
        const ID_COLUMNS: [&str; 3] = ["participant", "participant_id", "task_id"];
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| StatsError::Input {
            record: 0,
            message: e.to_string(),
        })?;
        let keep: Vec<(usize, String)> = header
            .iter()
            .enumerate()
            .filter(|(_, h)| !ID_COLUMNS.contains(h))
            .map(|(i, h)| (i, h.to_string()))
            .collect();
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| StatsError::Input {
                record: r + 1,
                message: e.to_string(),
            })?;
            let row = keep
                .iter()
                .map(|(i, name)| match rec.get(*i) {
                    Some("1") => Ok(true),
                    Some("0") => Ok(false),
                    other => Err(StatsError::Input {
                        record: r + 1,
                        message: format!("column {name}: expected 0 or 1, got {other:?}"),
                    }),
                })
                .collect::<Result<Vec<bool>, _>>()?;
            rows.push(row);
        }
        Self::new(keep.into_iter().map(|(_, h)| h).collect(), rows)
    }

    pub fn options(&self) -> &[String] {
        &self.options
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.options.len())
            .map(|j| self.rows.iter().filter(|r| r[j]).count())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iter().filter(|&&v| v).count()).collect()
    }

    /// Share of all selections that went to each option.
    pub fn selection_shares(&self) -> Vec<(String, f64)> {
        let sums = self.column_sums();
        let total: usize = sums.iter().sum();
        self.options
            .iter()
            .zip(sums)
            .map(|(o, c)| (o.clone(), if total == 0 { 0.0 } else { c as f64 / total as f64 }))
            .collect()
    }

    /// Per-row preference group, if every option is a scaling-study label.
    pub fn preference_groups(&self) -> Result<Vec<PreferenceGroup>, StatsError> {
        let opts = self
            .options
            .iter()
            .map(|o| o.parse::<ScalingOption>())
            .collect::<Result<Vec<_>, _>>()?;
        self.rows
            .iter()
            .map(|row| {
                let chosen = row.iter().zip(&opts).filter(|(&v, _)| v).map(|(_, &o)| o);
                SelectionSet::new(chosen).map(|s| group_preference(&s))
            })
            .collect()
    }
}

/// One de-anonymized judgment: the offered option labels and the chosen ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledJudgment {
    pub participant_id: String,
    pub task_id: String,
    pub options: Vec<String>,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CochranQ {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
}

/// `Q = (k-1) [k sum C_j^2 - (sum C_j)^2] / (k sum R_i - sum R_i^2)`.
pub fn cochran_q(t: &JudgmentTable) -> Result<CochranQ, StatsError> {
    let k = t.num_options() as f64;
    let cols = t.column_sums();
    let rows = t.row_sums();
    let total: f64 = cols.iter().map(|&c| c as f64).sum();
    let col_sq: f64 = cols.iter().map(|&c| (c * c) as f64).sum();
    let row_sq: f64 = rows.iter().map(|&r| (r * r) as f64).sum();
    let denom = k * total - row_sq;
    if denom == 0.0 {
        return Err(StatsError::DegenerateTable);
    }
    let numer = (k - 1.0) * (k * col_sq - total * total);
    Ok(CochranQ {
        statistic: numer / denom,
        degrees_of_freedom: t.num_options() - 1,
    })
}

/// Upper-tail chi-square probability.
pub fn p_value_chi2(q: f64, df: usize) -> f64 {
    assert!(df >= 1, "chi-square needs at least one degree of freedom");
    if q <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    dist.sf(q).clamp(0.0, 1.0)
}

/// Bonferroni adjustment for `m` comparisons, capped at 1.
pub fn bonferroni(raw: f64, m: usize) -> f64 {
    (raw * m as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseMethod {
    /// Exact binomial for small discordant counts, chi-square otherwise.
    #[default]
    McNemar,
    McNemarExact,
    McNemarChiSquare,
}

/// Two-sided McNemar p-value from the discordant counts.
pub fn mcnemar_p(only_first: u64, only_second: u64, method: PairwiseMethod) -> f64 {
    let n = only_first + only_second;
    if n == 0 {
        return 1.0;
    }
    let exact = match method {
        PairwiseMethod::McNemar => n <= EXACT_MCNEMAR_MAX,
        PairwiseMethod::McNemarExact => true,
        PairwiseMethod::McNemarChiSquare => false,
    };
    if exact {
        let k = only_first.min(only_second);
        let binom = Binomial::new(0.5, n).expect("valid binomial");
        (2.0 * binom.cdf(k)).min(1.0)
    } else {
        let d = only_first as f64 - only_second as f64;
        p_value_chi2(d * d / n as f64, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseComparison {
    pub first: String,
    pub second: String,
    /// Rows choosing the first option but not the second.
    pub only_first: u64,
    pub only_second: u64,
    pub raw_p: f64,
    pub adjusted_p: f64,
}

/// All `k(k-1)/2` column pairs in lexicographic index order.
pub fn pairwise_posthoc(t: &JudgmentTable, method: PairwiseMethod) -> Vec<PairwiseComparison> {
    let k = t.num_options();
    let m = k * (k - 1) / 2;
    let mut out = Vec::with_capacity(m);
    for a in 0..k {
        for b in a + 1..k {
            let only_first = t.rows().iter().filter(|r| r[a] && !r[b]).count() as u64;
            let only_second = t.rows().iter().filter(|r| !r[a] && r[b]).count() as u64;
            let raw_p = mcnemar_p(only_first, only_second, method);
            out.push(PairwiseComparison {
                first: t.options()[a].clone(),
                second: t.options()[b].clone(),
                only_first,
                only_second,
                raw_p,
                adjusted_p: bonferroni(raw_p, m),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub rows: usize,
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub method: PairwiseMethod,
    pub pairwise: Vec<PairwiseComparison>,
    /// Percentage of all selections per option.
    pub selection_percentages: BTreeMap<String, f64>,
    /// Percentage of rows per preference group (scaling studies only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_percentages: Option<BTreeMap<PreferenceGroup, f64>>,
}

/// Runs Cochran's Q and the pairwise post-hoc tests. A table where every
/// row is constant yields Q = 0 and p = 1.
pub fn analyze(t: &JudgmentTable, method: PairwiseMethod) -> TestReport {
    let (statistic, degrees_of_freedom) = match cochran_q(t) {
        Ok(q) => (q.statistic, q.degrees_of_freedom),
        Err(_) => (0.0, t.num_options() - 1),
    };
    let selection_percentages = t
        .selection_shares()
        .into_iter()
        .map(|(o, s)| (o, 100.0 * s))
        .collect();
    let group_percentages = t.preference_groups().ok().map(|groups| {
        let n = groups.len() as f64;
        PreferenceGroup::ALL
            .iter()
            .map(|&g| (g, 100.0 * groups.iter().filter(|&&x| x == g).count() as f64 / n))
            .collect()
    });
    TestReport {
        rows: t.num_rows(),
        statistic,
        degrees_of_freedom,
        p_value: p_value_chi2(statistic, degrees_of_freedom),
        method,
        pairwise: pairwise_posthoc(t, method),
        selection_percentages,
        group_percentages,
    }
}

impl TestReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "Cochran's Q = {:.4} (df = {}, p = {:.4e}, n = {})\n",
            self.statistic, self.degrees_of_freedom, self.p_value, self.rows
        );
        s.push_str("selections:\n");
        for (o, pct) in &self.selection_percentages {
            s.push_str(&format!("  {o:>12}  {pct:5.1}%\n"));
        }
        if let Some(groups) = &self.group_percentages {
            s.push_str("preference groups:\n");
            for (g, pct) in groups {
                s.push_str(&format!("  {:>13}  {pct:5.1}%\n", g.as_str()));
            }
        }
        s.push_str("pairwise (Bonferroni-adjusted):\n");
        for c in &self.pairwise {
            s.push_str(&format!(
                "  {} vs {}: b = {}, c = {}, p = {:.4e}\n",
                c.first, c.second, c.only_first, c.only_second, c.adjusted_p
            ));
        }
        s
    }
}
