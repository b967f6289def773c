//! Conversion between sparse data and the extended `[dense | sparsity bits]`
//! representation that the diffusion process operates on.
//!
//! A data row `x ∈ R^d` becomes a `2d` row: the first `d` columns hold `x`
//! affinely scaled to `[-1, 1]`, the last `d` hold `+1` where `x ≠ 0` and
//! `-1` where `x == 0`. Bits are read from the unscaled values, so an entry
//! that happens to scale to `0.0` still gets the bit of its original value.
//!
//! Decoding clamps to `[-1, 1]`, inverts the scale, and keeps a dense value
//! only where its bit logit is strictly positive. Everything else becomes an
//! exact `0.0`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SddError};
use crate::numerics::Matrix;

/// An `n × d` batch of data points in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch(Matrix);

impl DataBatch {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            let i = values.as_slice().iter().position(|v| !v.is_finite()).unwrap();
            return Err(SddError::NonFinite {
                row: i / values.cols().max(1),
                col: i % values.cols().max(1),
            });
        }
        Ok(DataBatch(values))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn d(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn select_rows(&self, idx: &[usize]) -> DataBatch {
        DataBatch(self.0.select_rows(idx))
    }

    pub fn sparsity_per_row(&self) -> Vec<f64> {
        sparsity_per_row(self)
    }

    pub fn mean_sparsity(&self) -> f64 {
        let s = self.sparsity_per_row();
        if s.is_empty() {
            return 0.0;
        }
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// An `n × 2d` matrix: dense channel in columns `[0, d)`, sparsity bits (or
/// their logits) in `[d, 2d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState(Matrix);

impl ExtendedState {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.cols().is_multiple_of(2) {
            return Err(SddError::shape(format!(
                "extended state needs an even column count, got {}",
                values.cols()
            )));
        }
        Ok(ExtendedState(values))
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        ExtendedState(Matrix::zeros(n, 2 * d))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    /// Data dimension (half the column count).
    pub fn d(&self) -> usize {
        self.0.cols() / 2
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn dense(&self) -> Matrix {
        self.0.split_cols(self.d()).expect("even split").0
    }

    pub fn bits(&self) -> Matrix {
        self.0.split_cols(self.d()).expect("even split").1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    #[default]
    Global,
    PerFeature,
}

/// Affine map from original units `[lo, hi]` onto `[-1, 1]`, either one
/// range for the whole dataset or one per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ScaleSpec {
    pub fn global(lo: f64, hi: f64) -> Result<Self> {
        Self::per_feature(vec![lo], vec![hi])
    }

    pub fn per_feature(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(SddError::shape("scale bounds must be non-empty and of equal length"));
        }
        for (&l, &h) in lo.iter().zip(&hi) {
            if !(l < h) || !l.is_finite() || !h.is_finite() {
                return Err(SddError::InvalidRange { lo: l, hi: h });
            }
        }
        Ok(ScaleSpec { lo, hi })
    }

    /// Fits `[min(0, data min), data max]`, so original zeros map to `-1` for
    /// non-negative data. Degenerate ranges are widened to unit length.
    pub fn fit(batch: &DataBatch, mode: ScaleMode) -> Self {
        let range = |vals: &mut dyn Iterator<Item = f64>| {
            let (mut lo, mut hi) = (0.0f64, f64::NEG_INFINITY);
            for v in vals {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !(hi > lo) {
                hi = lo + 1.0;
            }
            (lo, hi)
        };
        let m = batch.values();
        match mode {
            ScaleMode::Global => {
                let (lo, hi) = range(&mut m.as_slice().iter().copied());
                ScaleSpec {
                    lo: vec![lo],
                    hi: vec![hi],
                }
            }
            ScaleMode::PerFeature => {
                let (lo, hi) = (0..m.cols())
                    .map(|j| range(&mut (0..m.rows()).map(|i| m[(i, j)])))
                    .unzip();
                ScaleSpec { lo, hi }
            }
        }
    }

    pub fn mode(&self) -> ScaleMode {
        if self.lo.len() == 1 {
            ScaleMode::Global
        } else {
            ScaleMode::PerFeature
        }
    }

    pub fn bounds(&self, feature: usize) -> (f64, f64) {
        let j = if self.lo.len() == 1 { 0 } else { feature };
        (self.lo[j], self.hi[j])
    }

    /// Largest `hi - lo` over features.
    pub fn span(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .fold(0.0, |m, (l, h)| m.max(h - l))
    }

    pub fn check_width(&self, d: usize) -> Result<()> {
        if self.lo.len() != 1 && self.lo.len() != d {
            return Err(SddError::shape(format!(
                "per-feature scale of width {} applied to {d} features",
                self.lo.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, feature: usize, x: f64) -> f64 {
        let (lo, hi) = self.bounds(feature);
        2.0 * (x - lo) / (hi - lo) - 1.0
    }

    pub fn inverse(&self, feature: usize, y: f64) -> f64 {
        let (lo, hi) = self.bounds(feature);
        lo + (y + 1.0) * 0.5 * (hi - lo)
    }

    /// Scales a data matrix onto `[-1, 1]`, rejecting values outside the range.
    pub fn apply(&self, values: &Matrix) -> Result<Matrix> {
        self.check_width(values.cols())?;
        let mut out = Matrix::zeros(values.rows(), values.cols());
        for i in 0..values.rows() {
            for j in 0..values.cols() {
                let x = values[(i, j)];
                let (lo, hi) = self.bounds(j);
                if !(lo..=hi).contains(&x) {
                    return Err(SddError::OutOfRange {
                        row: i,
                        col: j,
                        value: x,
                        lo,
                        hi,
                    });
                }
                out[(i, j)] = self.forward(j, x);
            }
        }
        Ok(out)
    }

    /// Clamps to `[-1, 1]` and maps back to original units.
    pub fn invert_clamped(&self, scaled: &Matrix) -> Result<Matrix> {
        self.check_width(scaled.cols())?;
        Ok(Matrix::from_fn(scaled.rows(), scaled.cols(), |i, j| {
            self.inverse(j, scaled[(i, j)].clamp(-1.0, 1.0))
        }))
    }
}

/// `x ↦ [scale(x) | 2·1[x≠0] − 1]`.
pub fn encode(batch: &DataBatch, scale: &ScaleSpec) -> Result<ExtendedState> {
    let x = batch.values();
    let dense = scale.apply(x)?;
    let bits = x.map(|v| if v != 0.0 { 1.0 } else { -1.0 });
    ExtendedState::new(dense.hcat(&bits)?)
}

/// Clamp, unscale, and zero every entry whose bit logit is `<= 0`.
pub fn decode(state: &ExtendedState, scale: &ScaleSpec) -> Result<DataBatch> {
    let d = state.d();
    scale.check_width(d)?;
    let m = state.matrix();
    let mut out = Matrix::zeros(state.n(), d);
    for i in 0..state.n() {
        let row = m.row(i);
        for j in 0..d {
            // Strict: a logit of exactly 0 counts as "zero".
            if row[d + j].clamp(-1.0, 1.0) > 0.0 {
                out[(i, j)] = scale.inverse(j, row[j].clamp(-1.0, 1.0));
            }
        }
    }
    DataBatch::new(out)
}

/// Scaled values only, for models without sparsity bits.
pub fn encode_dense(batch: &DataBatch, scale: &ScaleSpec) -> Result<Matrix> {
    scale.apply(batch.values())
}

/// Clamp and unscale without sparsification.
pub fn decode_dense(values: &Matrix, scale: &ScaleSpec) -> Result<DataBatch> {
    DataBatch::new(scale.invert_clamped(values)?)
}

/// Fraction of exact zeros in each row.
pub fn sparsity_per_row(batch: &DataBatch) -> Vec<f64> {
    let d = batch.d();
    batch
        .values()
        .row_iter()
        .map(|row| {
            if d == 0 {
                return 0.0;
            }
            row.iter().filter(|&&v| v == 0.0).count() as f64 / d as f64
        })
        .collect()
}
