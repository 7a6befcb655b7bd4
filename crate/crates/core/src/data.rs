//! Sequence containers, synthetic generators, CSV ingestion and result files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KcsrError, Result};
use crate::segmenter::SegmentationResult;

/// A time-ordered sequence of samples.
///
/// `samples` has one row per time step and one column per feature, so row
/// `j` is sample `x_{j+1}` of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSequence {
    pub samples: Array2<f64>,
    /// Ground-truth segment labels in `1..=k`, one per sample.
    pub truth_labels: Option<Vec<usize>>,
    pub name: String,
}

impl DataSequence {
    pub fn new(samples: Array2<f64>, name: impl Into<String>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(KcsrError::input("a sequence needs at least one sample"));
        }
        Ok(Self {
            samples,
            truth_labels: None,
            name: name.into(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(KcsrError::input(format!(
                "{} labels for {} samples",
                labels.len(),
                self.len()
            )));
        }
        self.truth_labels = Some(labels);
        Ok(self)
    }

    /// Builds a sequence from a flat list of scalar observations (`d = 1`).
    pub fn from_scalars(values: &[f64], name: impl Into<String>) -> Result<Self> {
        let samples =
            Array2::from_shape_vec((values.len(), 1), values.to_vec()).map_err(|e| KcsrError::input(e.to_string()))?;
        Self::new(samples, name)
    }

    /// Number of samples `n`.
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample(&self, j: usize) -> ArrayView1<'_, f64> {
        self.samples.row(j)
    }
}

/// Several sequences concatenated end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSequence {
    pub blocks: Vec<DataSequence>,
    pub lengths: Vec<usize>,
    /// The concatenation of all blocks, in order.
    pub joined: DataSequence,
}

impl MultiSequence {
    pub fn len(&self) -> usize {
        self.joined.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joined.is_empty()
    }

    /// Index of the first sample of every block in the joined sequence.
    pub fn offsets(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .scan(0, |acc, &len| {
                let start = *acc;
                *acc += len;
                Some(start)
            })
            .collect()
    }
}

/// Concatenates sequences in order. Truth labels survive only if every block
/// carries them.
pub fn concat_sequences(blocks: Vec<DataSequence>) -> Result<MultiSequence> {
    let first = blocks
        .first()
        .ok_or_else(|| KcsrError::input("no sequences to concatenate"))?;
    let d = first.dim();
    if let Some(bad) = blocks.iter().find(|b| b.dim() != d) {
        return Err(KcsrError::input(format!(
            "sequence `{}` has {} features, expected {d}",
            bad.name,
            bad.dim()
        )));
    }
    let lengths: Vec<usize> = blocks.iter().map(DataSequence::len).collect();
    let views: Vec<_> = blocks.iter().map(|b| b.samples.view()).collect();
    let samples = ndarray::concatenate(Axis(0), &views).map_err(|e| KcsrError::input(e.to_string()))?;

    let labelled = blocks.iter().filter(|b| b.truth_labels.is_some()).count();
    let truth_labels = if labelled == blocks.len() {
        Some(
            blocks
                .iter()
                .flat_map(|b| b.truth_labels.as_deref().unwrap_or_default().iter().copied())
                .collect(),
        )
    } else {
        if labelled > 0 {
            warn!(
                "only {labelled} of {} sequences carry labels; dropping labels of the concatenation",
                blocks.len()
            );
        }
        None
    };
    let name = blocks.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join("+");
    let joined = DataSequence {
        samples,
        truth_labels,
        name,
    };
    Ok(MultiSequence {
        blocks,
        lengths,
        joined,
    })
}

/// Parameters of the concentric-circles generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CirclesConfig {
    pub counts: Vec<usize>,
    pub radii: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl CirclesConfig {
    pub const DEFAULT_RADII: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
    pub const DEFAULT_NOISE: f64 = 0.1;

    /// Draws pairwise-distinct circle sizes uniformly from `[lo, hi]`.
    pub fn random_counts(circles: usize, lo: usize, hi: usize, seed: u64) -> Vec<usize> {
        assert!(
            hi >= lo && hi - lo + 1 >= circles,
            "range too narrow for distinct counts"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts: Vec<usize> = Vec::with_capacity(circles);
        while counts.len() < circles {
            let c = rng.random_range(lo..=hi);
            if !counts.contains(&c) {
                counts.push(c);
            }
        }
        counts
    }
}

/// Points on concentric circles, one contiguous segment per circle.
///
/// Angles are uniform on `[0, 2π)`; radii get additive Gaussian noise.
pub fn generate_circles(config: &CirclesConfig) -> Result<DataSequence> {
    let CirclesConfig {
        counts,
        radii,
        noise_sd,
        seed,
    } = config;
    if counts.len() != radii.len() || counts.is_empty() {
        return Err(KcsrError::input(format!(
            "{} counts for {} radii",
            counts.len(),
            radii.len()
        )));
    }
    if counts.contains(&0) {
        return Err(KcsrError::input("every circle needs at least one point"));
    }
    if radii.iter().any(|&r| r.is_nan() || r <= 0.0) || noise_sd.is_nan() || *noise_sd < 0.0 {
        return Err(KcsrError::input("radii must be positive and noise non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
    let noise = Normal::new(0.0, *noise_sd).map_err(|e| KcsrError::input(e.to_string()))?;
    let n: usize = counts.iter().sum();
    let mut flat = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (c, (&count, &radius)) in counts.iter().zip(radii).enumerate() {
        for _ in 0..count {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let r = radius + noise.sample(&mut rng);
            flat.push(r * theta.cos());
            flat.push(r * theta.sin());
            labels.push(c + 1);
        }
    }
    let samples = Array2::from_shape_vec((n, 2), flat).map_err(|e| KcsrError::input(e.to_string()))?;
    DataSequence::new(samples, "circles")?.with_labels(labels)
}

/// Piecewise-constant Gaussian data: segment `c` has `lengths[c]` samples
/// drawn from `N(means[c], sd² I)`.
pub fn generate_mean_shift(lengths: &[usize], means: &[Vec<f64>], sd: f64, seed: u64) -> Result<DataSequence> {
    if lengths.len() != means.len() || lengths.is_empty() {
        return Err(KcsrError::input("one mean per segment is required"));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d) {
        return Err(KcsrError::input("segment means must share a non-zero dimension"));
    }
    let noise = Normal::new(0.0, sd).map_err(|e| KcsrError::input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = lengths.iter().sum();
    let mut flat = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, (&len, mean)) in lengths.iter().zip(means).enumerate() {
        for _ in 0..len {
            flat.extend(mean.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c + 1);
        }
    }
    let samples = Array2::from_shape_vec((n, d), flat).map_err(|e| KcsrError::input(e.to_string()))?;
    DataSequence::new(samples, "mean-shift")?.with_labels(labels)
}

/// Which column of a CSV file holds the ground-truth labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub has_header: bool,
    pub label_column: Option<LabelColumn>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: false,
            label_column: None,
        }
    }
}

/// Reads a sequence with one sample per row. Numbers use `.` as the decimal
/// separator regardless of locale.
pub fn read_csv_sequence(path: impl AsRef<Path>, options: &CsvOptions) -> Result<DataSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| KcsrError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let parse_err = |line: usize, column: usize, message: String| KcsrError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };

    let label_idx = match &options.label_column {
        None => None,
        Some(LabelColumn::Index(i)) => Some(*i),
        Some(LabelColumn::Name(name)) => {
            if !options.has_header {
                return Err(KcsrError::input(format!(
                    "label column `{name}` selected by name but the file has no header"
                )));
            }
            let headers = reader.headers().map_err(|e| parse_err(1, 1, e.to_string()))?;
            let idx = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| KcsrError::input(format!("no column named `{name}` in {}", path.display())))?;
            Some(idx)
        }
    };

    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(row + 1, |p| p.line() as usize);
            parse_err(line, 1, e.to_string())
        })?;
        let line = record
            .position()
            .map_or(row + 1 + usize::from(options.has_header), |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        match width {
            None => {
                if let Some(li) = label_idx {
                    if li >= record.len() {
                        return Err(parse_err(
                            line,
                            li + 1,
                            format!("label column {} out of range ({} columns)", li + 1, record.len()),
                        ));
                    }
                }
                width = Some(record.len());
            }
            Some(w) if w != record.len() => {
                return Err(parse_err(
                    line,
                    record.len().min(w) + 1,
                    format!("expected {w} columns, found {}", record.len()),
                ));
            }
            Some(_) => {}
        }
        for (col, cell) in record.iter().enumerate() {
            if Some(col) == label_idx {
                let label: usize = cell
                    .parse()
                    .ok()
                    .filter(|&l| l >= 1)
                    .ok_or_else(|| parse_err(line, col + 1, format!("`{cell}` is not a label >= 1")))?;
                labels.push(label);
            } else {
                let value: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| parse_err(line, col + 1, format!("`{cell}` is not a finite number")))?;
                flat.push(value);
            }
        }
    }
    let width = width.ok_or_else(|| KcsrError::input(format!("{} contains no samples", path.display())))?;
    let d = width - usize::from(label_idx.is_some());
    if d == 0 {
        return Err(KcsrError::input(format!("{} has no feature columns", path.display())));
    }
    let n = flat.len() / d;
    let samples = Array2::from_shape_vec((n, d), flat).map_err(|e| KcsrError::input(e.to_string()))?;
    let name = path
        .file_stem()
        .map_or_else(|| "sequence".to_string(), |s| s.to_string_lossy().into_owned());
    let seq = DataSequence::new(samples, name)?;
    if label_idx.is_some() {
        seq.with_labels(labels)
    } else {
        Ok(seq)
    }
}

/// Writes samples (and labels as a trailing `label` column, when present)
/// with a header row.
pub fn write_csv_sequence(seq: &DataSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| KcsrError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut header: Vec<String> = (1..=seq.dim()).map(|c| format!("x{c}")).collect();
    if seq.truth_labels.is_some() {
        header.push("label".into());
    }
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for (j, row) in seq.samples.outer_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = &seq.truth_labels {
            cells.push(labels[j].to_string());
        }
        writeln!(out, "{}", cells.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_result_json(result: &SegmentationResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| KcsrError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer_pretty(&mut out, result)?;
    writeln!(out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn read_result_json(path: impl AsRef<Path>) -> Result<SegmentationResult> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| KcsrError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
