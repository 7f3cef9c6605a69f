//! Band-gap CSV ingestion, dedup/balancing and seeded train/test splits.
//!
//! Files carry a `composition,target[,source]` header. For regression the
//! target is the band gap in eV and must be positive. For classification the
//! label is `target > 0`, so either 0/1 labels or raw gap values work.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, TableTensor};
use crate::error::{Error, LineDiagnostic, Result};
use crate::formula::{parse_formula, Composition, Representation};
use crate::layers::Task;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Experimental,
    Computed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub composition_text: String,
    pub composition: Composition,
    /// Gap in eV (regression) or 1.0 / 0.0 gapped label (classification).
    pub target: f64,
    pub source: Source,
}

/// Records that loaded plus the lines that were skipped.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub records: Vec<SampleRecord>,
    pub skipped: Vec<LineDiagnostic>,
}

pub fn load_csv(path: impl AsRef<Path>, task: Task, skip_bad: bool) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file, task, skip_bad).map_err(|e| match e {
        Error::Csv { diagnostics, .. } => Error::Csv { path: path.display().to_string(), diagnostics },
        other => other,
    })
}

/// Parses CSV from any reader. Without `skip_bad`, any bad line is an error
/// listing every diagnostic.
pub fn read_csv<R: Read>(reader: R, task: Task, skip_bad: bool) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut rows = rdr.records();
    let fail = |diagnostics| Error::Csv { path: "<input>".into(), diagnostics };

    let header_ok = match rows.next() {
        Some(Ok(h)) => {
            let cols: Vec<&str> = h.iter().collect();
            matches!(cols[..], ["composition", "target"] | ["composition", "target", "source"])
        }
        _ => false,
    };
    if !header_ok {
        return Err(fail(vec![LineDiagnostic {
            line: 1,
            reason: "header must be `composition,target[,source]`".into(),
        }]));
    }

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for row in rows {
        let (line, parsed) = match row {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line() as usize);
                (line, parse_row(&rec, task))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                (line, Err(e.to_string()))
            }
        };
        match parsed {
            Ok(Some(r)) => records.push(r),
            Ok(None) => {}
            Err(reason) => skipped.push(LineDiagnostic { line, reason }),
        }
    }
    if !skip_bad && !skipped.is_empty() {
        return Err(fail(skipped));
    }
    Ok(LoadedCsv { records, skipped })
}

fn parse_row(rec: &csv::StringRecord, task: Task) -> std::result::Result<Option<SampleRecord>, String> {
    if rec.iter().all(str::is_empty) {
        return Ok(None);
    }
    if !(2..=3).contains(&rec.len()) {
        return Err(format!("expected 2 or 3 fields, got {}", rec.len()));
    }
    let text = &rec[0];
    let composition = parse_formula(text).map_err(|e| e.to_string())?;
    let value: f64 = rec[1].parse().map_err(|_| format!("target `{}` is not a number", &rec[1]))?;
    if !value.is_finite() || value < 0.0 {
        return Err(format!("target {value} must be finite and non-negative"));
    }
    let target = match task {
        Task::Regress if value <= 0.0 => return Err(format!("regression target must be > 0 eV, got {value}")),
        Task::Regress => value,
        Task::Classify => f64::from(u8::from(value > 0.0)),
    };
    let source = match rec.get(2).map(str::to_ascii_lowercase).as_deref() {
        None | Some("") | Some("experimental") => Source::Experimental,
        Some("computed") => Source::Computed,
        Some(other) => return Err(format!("unknown source `{other}`")),
    };
    Ok(Some(SampleRecord { composition_text: text.to_string(), composition, target, source }))
}

/// Counts reported alongside a prepared dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub task: String,
    pub gapped_in: usize,
    pub gapped_unique: usize,
    pub gapped_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nongapped_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nongapped_unique: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nongapped_used: Option<usize>,
    pub duplicates_removed: usize,
    pub subsampled_away: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub records: Vec<SampleRecord>,
    pub stats: DatasetStats,
}

/// First occurrence of each distinct composition, in input order.
fn dedup(records: &[SampleRecord]) -> Vec<SampleRecord> {
    let mut seen = HashSet::new();
    records.iter().filter(|r| seen.insert(r.composition.canonical_key())).cloned().collect()
}

/// Dedups each class, subsamples the larger one to the size of the smaller
/// and labels gapped 1 / non-gapped 0. Output is gapped records then non-gapped.
pub fn prepare_classification(gapped: &[SampleRecord], nongapped: &[SampleRecord], seed: u64) -> Result<Prepared> {
    if gapped.is_empty() {
        return Err(Error::EmptyClass("gapped"));
    }
    if nongapped.is_empty() {
        return Err(Error::EmptyClass("non-gapped"));
    }
    let mut pos = dedup(gapped);
    let mut neg = dedup(nongapped);
    let (pos_unique, neg_unique) = (pos.len(), neg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = pos.len().min(neg.len());
    for class in [&mut pos, &mut neg] {
        if class.len() > target {
            let mut keep = index::sample(&mut rng, class.len(), target).into_vec();
            keep.sort_unstable();
            *class = keep.into_iter().map(|i| class[i].clone()).collect();
        }
    }
    let label = |mut r: SampleRecord, y: f64| {
        r.target = y;
        r
    };
    let stats = DatasetStats {
        task: Task::Classify.to_string(),
        gapped_in: gapped.len(),
        gapped_unique: pos_unique,
        gapped_used: pos.len(),
        nongapped_in: Some(nongapped.len()),
        nongapped_unique: Some(neg_unique),
        nongapped_used: Some(neg.len()),
        duplicates_removed: (gapped.len() - pos_unique) + (nongapped.len() - neg_unique),
        subsampled_away: (pos_unique - pos.len()) + (neg_unique - neg.len()),
        total: pos.len() + neg.len(),
    };
    let records = pos.into_iter().map(|r| label(r, 1.0)).chain(neg.into_iter().map(|r| label(r, 0.0))).collect();
    Ok(Prepared { records, stats })
}

/// Regression keeps every record, repeated compositions included.
pub fn prepare_regression(gapped: &[SampleRecord]) -> Prepared {
    let unique = gapped.iter().map(|r| r.composition.canonical_key()).collect::<HashSet<_>>().len();
    Prepared {
        records: gapped.to_vec(),
        stats: DatasetStats {
            task: Task::Regress.to_string(),
            gapped_in: gapped.len(),
            gapped_unique: unique,
            gapped_used: gapped.len(),
            total: gapped.len(),
            ..DatasetStats::default()
        },
    }
}

/// An encoded sample; `index` points back into the prepared record list.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub tensor: TableTensor,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
    pub fractions: (f64, f64),
}

/// Number of training records for an 80/20 split of `n`, rounded to nearest.
pub fn train_len(n: usize) -> usize {
    (n * 4 + 2) / 5
}

pub fn encode_record(r: &SampleRecord, index: usize, repr: Representation) -> Result<Sample> {
    let comp = match repr {
        Representation::Absolute => r.composition.clone(),
        Representation::Relative => r.composition.to_relative()?,
    };
    Ok(Sample { index, tensor: encode(&comp)?, target: r.target })
}

/// Seeded shuffle, then the first 80% train and the rest test.
pub fn split(records: &[SampleRecord], seed: u64, repr: Representation) -> Result<SplitDataset> {
    if records.len() < 5 {
        return Err(Error::TooFewRecords(records.len()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let samples = order.iter().map(|&i| encode_record(&records[i], i, repr)).collect::<Result<Vec<_>>>()?;
    let mut train = samples;
    let test = train.split_off(train_len(records.len()));
    Ok(SplitDataset { train, test, seed, fractions: (TRAIN_FRACTION, 1.0 - TRAIN_FRACTION) })
}
