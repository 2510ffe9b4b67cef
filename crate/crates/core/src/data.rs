//! Interaction ingestion, temporal splitting, and sparse binary matrices.
//!
//! Raw implicit-feedback events are `(user, item, timestamp)` rows. They are
//! split into train/validation/test by a global time cut and collapsed into
//! a binary [`FeedbackMatrix`]; a recency filter produces the windowed
//! history views used for group characterization.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// One implicit-feedback event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_key: String,
    pub item_key: String,
    /// Seconds since epoch; non-negative.
    pub timestamp: i64,
}

/// Column names expected in the header of an interaction file.
#[derive(Clone, Debug)]
pub struct FormatConfig {
    pub user_column: String,
    pub item_column: String,
    pub time_column: String,
}

impl Default for FormatConfig {
    fn default() -> Self {
        FormatConfig {
            user_column: "user".to_string(),
            item_column: "item".to_string(),
            time_column: "timestamp".to_string(),
        }
    }
}

/// Train/validation/test fractions; must sum to 1 within `1e-12`.
#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    train: f64,
    valid: f64,
    test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self, DataError> {
        for (name, value) in [("train", train), ("valid", valid), ("test", test)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(DataError::InvalidFraction { name, value });
            }
        }
        let sum = train + valid + test;
        if math::abs(sum - 1.0) > 1e-12 {
            return Err(DataError::FractionsDoNotSumToOne { sum });
        }
        Ok(SplitSpec { train, valid, test })
    }

    pub fn train_fraction(&self) -> f64 {
        self.train
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid
    }

    pub fn test_fraction(&self) -> f64 {
        self.test
    }
}

/// History window for recency filtering; `Unbounded` keeps everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecencyWindow {
    Unbounded,
    /// Keep events with `reference - seconds < t <= reference`; must be > 0.
    Seconds(i64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    /// A data line that could not be parsed; `line` is 1-based (header is line 1).
    Malformed {
        line: usize,
        message: String,
    },
    /// The header does not declare a required column.
    MissingColumn {
        column: String,
    },
    /// The input has no header line.
    MissingHeader,
    EmptyInput,
    InvalidFraction {
        name: &'static str,
        value: f64,
    },
    FractionsDoNotSumToOne {
        sum: f64,
    },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Malformed { line, message } => {
                write!(f, "line {line}: {message}")
            }
            DataError::MissingColumn { column } => {
                write!(f, "header does not declare column '{column}'")
            }
            DataError::MissingHeader => write!(f, "input has no header line"),
            DataError::EmptyInput => write!(f, "no records to split"),
            DataError::InvalidFraction { name, value } => {
                write!(f, "{name} fraction {value} is outside (0, 1)")
            }
            DataError::FractionsDoNotSumToOne { sum } => {
                write!(f, "split fractions sum to {sum}, expected 1")
            }
        }
    }
}

impl core::error::Error for DataError {}

/// Detects the field delimiter from the header line: tab if the header
/// contains one, comma otherwise.
pub fn detect_delimiter(input: &str) -> char {
    match input.lines().next() {
        Some(header) if header.contains('\t') => '\t',
        _ => ',',
    }
}

/// Parses delimiter-separated interaction text. The first line must be a
/// header declaring the configured column names; input order is preserved.
pub fn parse_interactions(
    input: &str,
    config: &FormatConfig,
) -> Result<Vec<InteractionRecord>, DataError> {
    let input = input.strip_prefix('\u{feff}').unwrap_or(input);
    let mut lines = input.lines();
    let header = lines.next().ok_or(DataError::MissingHeader)?;
    let header = header.trim_end_matches('\r');
    let delim = if header.contains('\t') { '\t' } else { ',' };

    let columns: Vec<&str> = header.split(delim).map(str::trim).collect();
    let position = |name: &str| -> Result<usize, DataError> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| DataError::MissingColumn {
                column: name.to_string(),
            })
    };
    let user_at = position(&config.user_column)?;
    let item_at = position(&config.item_column)?;
    let time_at = position(&config.time_column)?;
    let width = user_at.max(item_at).max(time_at) + 1;

    let mut records = Vec::new();
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let line = line.trim_end_matches('\r');
        let fields: Vec<&str> = line.split(delim).collect();
        if fields.len() < width {
            return Err(DataError::Malformed {
                line: line_no,
                message: format!("expected at least {width} fields, found {}", fields.len()),
            });
        }
        let user_key = fields[user_at];
        let item_key = fields[item_at];
        if user_key.is_empty() {
            return Err(DataError::Malformed {
                line: line_no,
                message: "empty user key".to_string(),
            });
        }
        if item_key.is_empty() {
            return Err(DataError::Malformed {
                line: line_no,
                message: "empty item key".to_string(),
            });
        }
        let raw_time = fields[time_at].trim();
        let timestamp: i64 = raw_time.parse().map_err(|_| DataError::Malformed {
            line: line_no,
            message: format!("invalid timestamp '{raw_time}'"),
        })?;
        if timestamp < 0 {
            return Err(DataError::Malformed {
                line: line_no,
                message: format!("negative timestamp {timestamp}"),
            });
        }
        records.push(InteractionRecord {
            user_key: user_key.to_string(),
            item_key: item_key.to_string(),
            timestamp,
        });
    }
    Ok(records)
}

/// Renders records back to delimiter-separated text with a header, the
/// inverse of [`parse_interactions`] for the three configured columns.
pub fn format_interactions(
    records: &[InteractionRecord],
    config: &FormatConfig,
    delimiter: char,
) -> String {
    let mut out = String::new();
    out.push_str(&config.user_column);
    out.push(delimiter);
    out.push_str(&config.item_column);
    out.push(delimiter);
    out.push_str(&config.time_column);
    out.push('\n');
    for r in records {
        out.push_str(&r.user_key);
        out.push(delimiter);
        out.push_str(&r.item_key);
        out.push(delimiter);
        out.push_str(&format!("{}", r.timestamp));
        out.push('\n');
    }
    out
}

/// Splits records into train/validation/test by a global time cut.
///
/// Records are stably sorted by timestamp (ties keep input order) and cut at
/// `floor(n * train)` and `floor(n * (train + valid))`; the three parts
/// partition the input and every train timestamp <= every validation
/// timestamp <= every test timestamp.
#[allow(clippy::type_complexity)]
pub fn temporal_split(
    mut records: Vec<InteractionRecord>,
    spec: &SplitSpec,
) -> Result<
    (
        Vec<InteractionRecord>,
        Vec<InteractionRecord>,
        Vec<InteractionRecord>,
    ),
    DataError,
> {
    if records.is_empty() {
        return Err(DataError::EmptyInput);
    }
    records.sort_by_key(|r| r.timestamp);
    let n = records.len();
    let cut1 = (math::floor(n as f64 * spec.train) as usize).min(n);
    let cut2 = (math::floor(n as f64 * (spec.train + spec.valid)) as usize).clamp(cut1, n);
    let test = records.split_off(cut2);
    let valid = records.split_off(cut1);
    Ok((records, valid, test))
}

/// Keeps records with timestamp in `(reference - window, reference]`; an
/// unbounded window is the identity.
pub fn recency_filter(
    records: &[InteractionRecord],
    window: RecencyWindow,
    reference_time: i64,
) -> Vec<InteractionRecord> {
    match window {
        RecencyWindow::Unbounded => records.to_vec(),
        RecencyWindow::Seconds(w) => {
            debug_assert!(w > 0, "window must be positive");
            records
                .iter()
                .filter(|r| r.timestamp > reference_time - w && r.timestamp <= reference_time)
                .cloned()
                .collect()
        }
    }
}

/// Events dropped while building a matrix against a fixed index. An event
/// with an unknown user counts only as `unknown_user`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropCounts {
    pub unknown_user: usize,
    pub unknown_item: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.unknown_user + self.unknown_item
    }
}

/// Sparse binary user-item matrix with key <-> index bijections.
///
/// Rows hold strictly increasing item indices (repeated events collapse to
/// one entry); immutable after construction and shareable across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackMatrix {
    rows: Vec<Vec<u32>>,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    user_index: BTreeMap<String, u32>,
    item_index: BTreeMap<String, u32>,
}

/// Builds a binary matrix from records. Without `align_to`, users and items
/// are indexed in first-appearance order. With `align_to`, the template's
/// index maps are reused and events with unknown keys are dropped and
/// counted, so validation/test matrices line up with the train matrix.
pub fn build_matrix(
    records: &[InteractionRecord],
    align_to: Option<&FeedbackMatrix>,
) -> (FeedbackMatrix, DropCounts) {
    let mut drops = DropCounts::default();
    let (user_keys, item_keys, user_index, item_index) = match align_to {
        Some(template) => (
            template.user_keys.clone(),
            template.item_keys.clone(),
            template.user_index.clone(),
            template.item_index.clone(),
        ),
        None => {
            let mut user_keys = Vec::new();
            let mut item_keys = Vec::new();
            let mut user_index = BTreeMap::new();
            let mut item_index = BTreeMap::new();
            for r in records {
                if !user_index.contains_key(&r.user_key) {
                    user_index.insert(r.user_key.clone(), user_keys.len() as u32);
                    user_keys.push(r.user_key.clone());
                }
                if !item_index.contains_key(&r.item_key) {
                    item_index.insert(r.item_key.clone(), item_keys.len() as u32);
                    item_keys.push(r.item_key.clone());
                }
            }
            (user_keys, item_keys, user_index, item_index)
        }
    };

    let mut rows: Vec<Vec<u32>> = core::iter::repeat_with(Vec::new)
        .take(user_keys.len())
        .collect();
    for r in records {
        let Some(&u) = user_index.get(&r.user_key) else {
            drops.unknown_user += 1;
            continue;
        };
        let Some(&i) = item_index.get(&r.item_key) else {
            drops.unknown_item += 1;
            continue;
        };
        rows[u as usize].push(i);
    }
    for row in &mut rows {
        row.sort_unstable();
        row.dedup();
    }

    (
        FeedbackMatrix {
            rows,
            user_keys,
            item_keys,
            user_index,
            item_index,
        },
        drops,
    )
}

impl FeedbackMatrix {
    pub fn num_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    /// Strictly increasing item indices consumed by `user`.
    pub fn row(&self, user: u32) -> &[u32] {
        &self.rows[user as usize]
    }

    /// Membership query: did `user` consume `item`? Logarithmic in row length.
    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.rows[user as usize].binary_search(&item).is_ok()
    }

    pub fn user_key(&self, user: u32) -> &str {
        &self.user_keys[user as usize]
    }

    pub fn item_key(&self, item: u32) -> &str {
        &self.item_keys[item as usize]
    }

    pub fn user_id(&self, key: &str) -> Option<u32> {
        self.user_index.get(key).copied()
    }

    pub fn item_id(&self, key: &str) -> Option<u32> {
        self.item_index.get(key).copied()
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    /// Number of users that consumed `item`.
    pub fn item_count(&self, item: u32) -> usize {
        self.rows
            .iter()
            .filter(|r| r.binary_search(&item).is_ok())
            .count()
    }

    /// Total number of stored (user, item) entries.
    pub fn num_entries(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}
