//! Datasets: synthetic sparse generators, IDX and CSV ingestion, and a
//! shuffled batch stream.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{DataBatch, ScaleMode, ScaleSpec};
use crate::error::{Result, SddError};
use crate::io::{self, ByteReader};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Images on a `√d × √d` grid with a few compact blobs of energy.
    #[default]
    ClusteredDeposits,
    /// Independent per-dimension activity masks with log-normal magnitudes.
    SparseMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub d: usize,
    pub target_sparsity: f64,
    /// Clustered: each image has between 1 and this many clusters.
    pub cluster_count: usize,
    /// Median peak intensity (clustered) or median magnitude (mixture).
    pub intensity: f64,
    /// Minimum Gaussian profile width, in grid cells.
    pub cluster_width: f64,
    /// Mixture: per-dimension sparsity, overriding `target_sparsity`.
    pub feature_sparsity: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            kind: SyntheticKind::ClusteredDeposits,
            d: 256,
            target_sparsity: 0.9,
            cluster_count: 3,
            intensity: 1.0,
            cluster_width: 1.5,
            feature_sparsity: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SddError::Spec(msg));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return bad(format!("target sparsity {} must lie in (0, 1)", self.target_sparsity));
        }
        if !(self.intensity > 0.0 && self.intensity.is_finite()) {
            return bad(format!("intensity {} must be positive", self.intensity));
        }
        if !(self.cluster_width > 0.0 && self.cluster_width.is_finite()) {
            return bad(format!("cluster width {} must be positive", self.cluster_width));
        }
        if self.kind == SyntheticKind::ClusteredDeposits {
            grid_side(self.d)?;
        }
        if let Some(s) = &self.feature_sparsity {
            if s.len() != self.d {
                return bad(format!("{} feature sparsities for d={}", s.len(), self.d));
            }
            if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return bad(format!("feature sparsity {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

fn grid_side(d: usize) -> Result<usize> {
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(SddError::Spec(format!("d={d} is not a perfect square")));
    }
    Ok(side)
}

/// Generates `n` samples from `spec` using `Rng::new(spec.seed)`.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<DataBatch> {
    let mut rng = Rng::new(spec.seed);
    match spec.kind {
        SyntheticKind::ClusteredDeposits => gen_clustered(spec, n, &mut rng),
        SyntheticKind::SparseMixture => gen_sparse_mixture(spec, n, &mut rng),
    }
}

/// Clustered images. Each image draws an active-cell budget uniformly around
/// `(1 − target)·d`, places 1..=`cluster_count` centers, and switches on the
/// cells nearest to any center until the budget is spent. Active cells carry
/// a Gaussian profile around their center; every other cell is exactly 0.
pub fn gen_clustered(spec: &SyntheticSpec, n: usize, rng: &mut Rng) -> Result<DataBatch> {
    spec.validate()?;
    let side = grid_side(spec.d)?;
    let d = spec.d;
    let mut out = Matrix::zeros(n, d);
    if spec.cluster_count == 0 {
        return DataBatch::new(out);
    }
    let mean_active = (1.0 - spec.target_sparsity) * d as f64;
    let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(d);
    for i in 0..n {
        // Uniform on [m/2, 3m/2] has mean m.
        let active = (mean_active * (0.5 + rng.next_f64())).round().clamp(1.0, d as f64) as usize;
        let k = 1 + rng.below(spec.cluster_count as u64) as usize;
        let centers: Vec<(f64, f64, f64)> = (0..k)
            .map(|_| {
                let cy = rng.next_f64() * side as f64;
                let cx = rng.next_f64() * side as f64;
                let amp = spec.intensity * (0.5 * rng.normal()).exp();
                (cy, cx, amp)
            })
            .collect();
        cells.clear();
        for p in 0..d {
            let (y, x) = ((p / side) as f64 + 0.5, (p % side) as f64 + 0.5);
            let (mut best, mut which) = (f64::INFINITY, 0);
            for (c, &(cy, cx, _)) in centers.iter().enumerate() {
                let dist2 = (y - cy).powi(2) + (x - cx).powi(2);
                if dist2 < best {
                    best = dist2;
                    which = c;
                }
            }
            cells.push((best, which, p));
        }
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let width = spec
            .cluster_width
            .max((active as f64 / (k as f64 * std::f64::consts::PI)).sqrt());
        let row = out.row_mut(i);
        for &(dist2, c, p) in &cells[..active] {
            let profile = (-dist2 / (2.0 * width * width)).exp();
            let jitter = (0.1 * rng.normal()).exp();
            // The floor keeps active cells well away from zero.
            row[p] = centers[c].2 * jitter * (0.05 + 0.95 * profile);
        }
    }
    DataBatch::new(out)
}

/// Per-dimension Bernoulli(1 − s_j) activity times log-normal magnitudes.
/// Dimension `j` has median magnitude `intensity·e^{μ_j}` with
/// `μ_j ~ N(0, 0.5²)` drawn first.
pub fn gen_sparse_mixture(spec: &SyntheticSpec, n: usize, rng: &mut Rng) -> Result<DataBatch> {
    spec.validate()?;
    let d = spec.d;
    let sparsity = spec
        .feature_sparsity
        .clone()
        .unwrap_or_else(|| vec![spec.target_sparsity; d]);
    let log_mean: Vec<f64> = (0..d).map(|_| spec.intensity.ln() + 0.5 * rng.normal()).collect();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let row = out.row_mut(i);
        for j in 0..d {
            if rng.next_f64() >= sparsity[j] {
                row[j] = (log_mean[j] + 0.5 * rng.normal()).exp();
            }
        }
    }
    DataBatch::new(out)
}

/// A loaded dataset with its scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    batch: DataBatch,
    scale: ScaleSpec,
}

impl DatasetHandle {
    pub fn new(name: impl Into<String>, batch: DataBatch, scale: ScaleSpec) -> Result<Self> {
        scale.check_width(batch.d())?;
        Ok(DatasetHandle {
            name: name.into(),
            batch,
            scale,
        })
    }

    /// Fits the scaling to the data itself.
    pub fn fitted(name: impl Into<String>, batch: DataBatch, mode: ScaleMode) -> Self {
        let scale = ScaleSpec::fit(&batch, mode);
        DatasetHandle {
            name: name.into(),
            batch,
            scale,
        }
    }

    pub fn n(&self) -> usize {
        self.batch.n()
    }

    pub fn d(&self) -> usize {
        self.batch.d()
    }

    pub fn batch(&self) -> &DataBatch {
        &self.batch
    }

    pub fn scale(&self) -> &ScaleSpec {
        &self.scale
    }

    pub fn fingerprint(&self) -> u64 {
        io::matrix_fingerprint(self.batch.values())
    }

    /// Endless stream of `batch_size` rows, reshuffled every epoch with
    /// `Rng::stream(seed, 2)`. A partial tail is dropped.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
        if batch_size == 0 || self.n() == 0 {
            return Err(SddError::arg("batch stream needs a positive batch size and data"));
        }
        Ok(BatchStream {
            data: &self.batch,
            order: (0..self.n()).collect(),
            pos: usize::MAX,
            size: batch_size.min(self.n()),
            rng: Rng::stream(seed, 2),
        })
    }
}

pub struct BatchStream<'a> {
    data: &'a DataBatch,
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Iterator for BatchStream<'_> {
    type Item = DataBatch;

    fn next(&mut self) -> Option<DataBatch> {
        if self.pos.saturating_add(self.size) > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        Some(self.data.select_rows(idx))
    }
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Parses an IDX3 unsigned-byte image file into `n × (rows·cols)` values in
/// `[0, 255]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<DataBatch> {
    let mut r = ByteReader::new(bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(SddError::format(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(SddError::format(8, "zero image dimension"));
    }
    let d = rows * cols;
    let pixels = r.take(n.saturating_mul(d), "pixel data")?;
    r.finish("IDX image data")?;
    let data = pixels.iter().map(|&p| p as f64).collect();
    DataBatch::new(Matrix::new(n, d, data)?)
}

/// Loads an IDX image file scaled globally from `[0, 255]`.
pub fn load_idx_images(path: &Path) -> Result<DatasetHandle> {
    let batch = parse_idx_images(&std::fs::read(path)?)?;
    DatasetHandle::new(display_name(path), batch, ScaleSpec::global(0.0, 255.0)?)
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn csv_fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(',').map(|f| {
        let f = f.trim();
        f.strip_prefix('"').and_then(|f| f.strip_suffix('"')).unwrap_or(f)
    })
}

fn parse_field(f: &str) -> Option<f64> {
    f.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses numeric CSV. The first row is a header if any of its fields is not
/// a finite number. Returns the header (if any) and the values.
pub fn parse_csv_matrix(text: &str) -> Result<(Option<Vec<String>>, DataBatch)> {
    let mut header = None;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = csv_fields(line).collect();
        if let Some(w) = width {
            if fields.len() != w {
                return Err(SddError::FormatLine {
                    line: line_no,
                    msg: format!("expected {w} fields, found {}", fields.len()),
                });
            }
        }
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| parse_field(f)).collect();
        match parsed {
            Some(vals) => data.extend(vals),
            None if width.is_none() => {
                header = Some(fields.iter().map(|s| s.to_string()).collect());
                width = Some(fields.len());
                continue;
            }
            None => {
                let bad = fields.iter().find(|f| parse_field(f).is_none()).unwrap();
                return Err(SddError::FormatLine {
                    line: line_no,
                    msg: format!("non-numeric field {bad:?}"),
                });
            }
        }
        width = Some(fields.len());
        rows += 1;
    }
    let batch = DataBatch::new(Matrix::new(rows, width.unwrap_or(0), data)?)?;
    Ok((header, batch))
}

pub fn load_csv_matrix(path: &Path, mode: ScaleMode) -> Result<DatasetHandle> {
    let (_, batch) = parse_csv_matrix(&std::fs::read_to_string(path)?)?;
    Ok(DatasetHandle::fitted(display_name(path), batch, mode))
}

pub fn write_csv_matrix(path: &Path, m: &Matrix, header: Option<&[String]>) -> Result<()> {
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(&h.join(","));
        text.push('\n');
    }
    text.push_str(&io::matrix_to_csv(m));
    io::write_atomic(path, text.as_bytes())
}

/// Loads IDX, `SDDMAT1` or CSV data, chosen by the file's leading bytes.
/// IDX images keep their `[0, 255]` scaling; other formats are fitted.
pub fn load_dataset(path: &Path, mode: ScaleMode) -> Result<DatasetHandle> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(SddError::format(0, "empty file"));
    }
    // Every IDX magic starts with two zero bytes, which no CSV text does.
    if bytes.starts_with(&[0, 0]) {
        let batch = parse_idx_images(&bytes)?;
        return DatasetHandle::new(display_name(path), batch, ScaleSpec::global(0.0, 255.0)?);
    }
    let batch = if bytes.starts_with(io::MATRIX_MAGIC) {
        DataBatch::new(io::decode_matrix(&bytes)?)?
    } else {
        let text = String::from_utf8(bytes).map_err(|e| {
            SddError::format(e.utf8_error().valid_up_to() as u64, "file is neither IDX, SDDMAT1 nor UTF-8 CSV")
        })?;
        parse_csv_matrix(&text)?.1
    };
    if batch.n() == 0 || batch.d() == 0 {
        return Err(SddError::format(0, "dataset has no values"));
    }
    Ok(DatasetHandle::fitted(display_name(path), batch, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SyntheticKind, d: usize, s: f64) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            d,
            target_sparsity: s,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn clustered_hits_target_sparsity() {
        let b = generate(&spec(SyntheticKind::ClusteredDeposits, 1024, 0.95), 2000).unwrap();
        let s = b.mean_sparsity();
        assert!((0.93..=0.97).contains(&s), "{s}");
        assert!(b.values().as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn clustered_sparsity_varies_between_images() {
        let b = generate(&spec(SyntheticKind::ClusteredDeposits, 256, 0.9), 500).unwrap();
        let s = b.sparsity_per_row();
        let (lo, hi) = s.iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo > 0.05, "{lo}..{hi}");
    }

    #[test]
    fn zero_clusters_give_empty_images() {
        let mut sp = spec(SyntheticKind::ClusteredDeposits, 64, 0.9);
        sp.cluster_count = 0;
        let b = generate(&sp, 10).unwrap();
        assert_eq!(b.mean_sparsity(), 1.0);
    }

    #[test]
    fn clustered_needs_square_d() {
        let err = generate(&spec(SyntheticKind::ClusteredDeposits, 250, 0.9), 1).unwrap_err();
        assert!(matches!(err, SddError::Spec(_)));
        assert!(generate(&spec(SyntheticKind::SparseMixture, 250, 0.9), 1).is_ok());
    }

    #[test]
    fn spec_validation() {
        for s in [0.0, 1.0, -0.1] {
            assert!(spec(SyntheticKind::SparseMixture, 4, s).validate().is_err());
        }
        let mut sp = spec(SyntheticKind::SparseMixture, 4, 0.5);
        sp.feature_sparsity = Some(vec![0.5; 3]);
        assert!(sp.validate().is_err());
    }

    #[test]
    fn mixture_all_sparse_is_zero() {
        let mut sp = spec(SyntheticKind::SparseMixture, 5, 0.5);
        sp.feature_sparsity = Some(vec![1.0; 5]);
        assert_eq!(generate(&sp, 100).unwrap().mean_sparsity(), 1.0);
    }

    #[test]
    fn mixture_per_dimension_sparsity() {
        let b = generate(&spec(SyntheticKind::SparseMixture, 100, 0.9), 10_000).unwrap();
        let m = b.values();
        for j in 0..100 {
            let zeros = (0..m.rows()).filter(|&i| m[(i, j)] == 0.0).count() as f64 / m.rows() as f64;
            assert!((zeros - 0.9).abs() < 0.02, "dim {j}: {zeros}");
        }
    }

    #[test]
    fn mixture_masks_independent_across_dims() {
        // 2x2 contingency table on the activity of dims 0 and 1; chi-square
        // with one degree of freedom, 0.1% critical value 10.83.
        let b = generate(&spec(SyntheticKind::SparseMixture, 2, 0.6), 20_000).unwrap();
        let mut t = [[0.0f64; 2]; 2];
        for r in b.values().row_iter() {
            t[(r[0] != 0.0) as usize][(r[1] != 0.0) as usize] += 1.0;
        }
        let n: f64 = t.iter().flatten().sum();
        let mut chi2 = 0.0;
        for a in 0..2 {
            for c in 0..2 {
                let e = (t[a][0] + t[a][1]) * (t[0][c] + t[1][c]) / n;
                chi2 += (t[a][c] - e).powi(2) / e;
            }
        }
        assert!(chi2 < 10.83, "chi2 = {chi2}");
    }

    #[test]
    fn generators_are_seeded() {
        for kind in [SyntheticKind::ClusteredDeposits, SyntheticKind::SparseMixture] {
            let sp = spec(kind, 64, 0.8);
            assert_eq!(generate(&sp, 50).unwrap(), generate(&sp, 50).unwrap());
            let other = SyntheticSpec { seed: 1, ..sp.clone() };
            assert_ne!(generate(&sp, 50).unwrap(), generate(&other, 50).unwrap());
        }
    }

    fn idx_bytes(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn idx_parse() {
        let b = parse_idx_images(&idx_bytes(2, 1, 2, &[0, 255, 7, 0])).unwrap();
        assert_eq!(b.values().as_slice(), &[0.0, 255.0, 7.0, 0.0]);
        assert_eq!(b.sparsity_per_row(), vec![0.5, 0.5]);
    }

    #[test]
    fn idx_format_errors() {
        let good = idx_bytes(2, 1, 2, &[0, 255, 7, 0]);
        let mut magic = good.clone();
        magic[3] = 0x01;
        assert!(matches!(parse_idx_images(&magic), Err(SddError::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&good[..6]), Err(SddError::Format { offset: 4, .. })));
        assert!(matches!(parse_idx_images(&good[..18]), Err(SddError::Format { offset: 16, .. })));
        let mut extra = good.clone();
        extra.push(1);
        assert!(matches!(parse_idx_images(&extra), Err(SddError::Format { offset: 20, .. })));
        assert!(matches!(
            parse_idx_images(&idx_bytes(1, 0, 5, &[])),
            Err(SddError::Format { .. })
        ));
    }

    #[test]
    fn csv_sparsity_example() {
        let (h, b) = parse_csv_matrix("0,1.5\n2,0\n0,0").unwrap();
        assert!(h.is_none());
        assert_eq!(b.sparsity_per_row(), vec![0.5, 0.5, 1.0]);
        assert!(b.values().as_slice().iter().all(|v| v.to_bits() != (-0.0f64).to_bits()));
    }

    #[test]
    fn csv_header_and_quotes() {
        let (h, b) = parse_csv_matrix("\"gene a\",gene_b\n\"1\",2\n3,4\n").unwrap();
        assert_eq!(h.unwrap(), vec!["gene a".to_string(), "gene_b".to_string()]);
        assert_eq!(b.values().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_errors_name_lines() {
        assert!(matches!(
            parse_csv_matrix("1,2\n3\n"),
            Err(SddError::FormatLine { line: 2, .. })
        ));
        assert!(matches!(
            parse_csv_matrix("a,b\n1,2\n3,x\n"),
            Err(SddError::FormatLine { line: 3, .. })
        ));
        assert!(matches!(
            parse_csv_matrix("1,2\nnan,2\n"),
            Err(SddError::FormatLine { line: 2, .. })
        ));
    }

    #[test]
    fn csv_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let m = generate(&spec(SyntheticKind::SparseMixture, 6, 0.5), 20).unwrap();
        let header: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
        write_csv_matrix(&p, m.values(), Some(&header)).unwrap();
        let h = load_csv_matrix(&p, ScaleMode::Global).unwrap();
        assert_eq!(h.batch(), &m);
        assert_eq!(load_dataset(&p, ScaleMode::Global).unwrap().batch(), &m);
    }

    #[test]
    fn load_dataset_rejects_empty_and_misidentified_files() {
        let dir = tempfile::tempdir().unwrap();
        let cases: [(&str, &[u8]); 4] = [
            ("empty", b""),
            ("header only", b"a,b,c\n"),
            ("idx label file", &[0, 0, 8, 1, 0, 0, 0, 0]),
            ("binary junk", &[0, 0, 9, 3, 1, 2, 3]),
        ];
        for (name, bytes) in cases {
            let p = dir.path().join("f");
            std::fs::write(&p, bytes).unwrap();
            let err = load_dataset(&p, ScaleMode::Global).unwrap_err();
            assert!(matches!(err, SddError::Format { offset: 0, .. }), "{name}: {err:?}");
        }
    }

    #[test]
    fn batch_stream_covers_epoch_and_is_seeded() {
        let b = DataBatch::new(Matrix::from_fn(10, 1, |i, _| i as f64)).unwrap();
        let h = DatasetHandle::fitted("x", b, ScaleMode::Global);
        let mut seen: Vec<f64> = h
            .batches(5, 3)
            .unwrap()
            .take(2)
            .flat_map(|b| b.values().as_slice().to_vec())
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let a: Vec<_> = h.batches(4, 3).unwrap().take(6).collect();
        let c: Vec<_> = h.batches(4, 3).unwrap().take(6).collect();
        assert_eq!(a, c);
        assert!(a.iter().all(|b| b.n() == 4));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = generate(&spec(SyntheticKind::SparseMixture, 4, 0.5), 10).unwrap();
        let h1 = DatasetHandle::fitted("a", a.clone(), ScaleMode::Global);
        let h2 = DatasetHandle::fitted("b", a, ScaleMode::Global);
        assert_eq!(h1.fingerprint(), h2.fingerprint());
        let other = generate(&SyntheticSpec { seed: 9, ..spec(SyntheticKind::SparseMixture, 4, 0.5) }, 10).unwrap();
        assert_ne!(h1.fingerprint(), DatasetHandle::fitted("c", other, ScaleMode::Global).fingerprint());
    }
}
