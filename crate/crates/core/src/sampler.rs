//! Reverse diffusion: DDIM and DDPM step rules, the full sampling loop with
//! self-conditioning carry-over, and the post-hoc threshold baseline.

use serde::{Deserialize, Serialize};

use crate::codec::{decode, decode_dense, DataBatch, ExtendedState, ScaleSpec};
use crate::denoiser::DenoiserParams;
use crate::error::{Result, SddError};
use crate::numerics::{Matrix, Rng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = SddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(SddError::arg(format!("unknown sampler kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub kind: SamplerKind,
    pub seed: u64,
    pub batch: usize,
    pub use_ema: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 1000,
            kind: SamplerKind::Ddim,
            seed: 0,
            batch: 1000,
            use_ema: true,
        }
    }
}

/// Rows are sampled in chunks of this size; chunk `k` draws from
/// `Rng::stream(seed, k)`.
pub const SAMPLE_CHUNK: usize = 1024;

fn step_alphas(schedule: &NoiseSchedule, t_now: f64, t_next: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t_now) {
        return Err(SddError::Domain(t_now));
    }
    if !(0.0..=1.0).contains(&t_next) {
        return Err(SddError::Domain(t_next));
    }
    if !(t_next < t_now) {
        return Err(SddError::arg(format!(
            "step must go backward in time: t_next={t_next} >= t_now={t_now}"
        )));
    }
    let a_now = schedule.alpha(t_now)?;
    if a_now >= 1.0 {
        return Err(SddError::DegenerateStep { t: t_now });
    }
    Ok((a_now, schedule.alpha(t_next)?))
}

fn check_pair(x_t: &Matrix, x0_pred: &Matrix) -> Result<()> {
    if x_t.shape() != x0_pred.shape() {
        return Err(SddError::shape(format!(
            "state {}x{} vs prediction {}x{}",
            x_t.rows(),
            x_t.cols(),
            x0_pred.rows(),
            x0_pred.cols()
        )));
    }
    Ok(())
}

/// Deterministic DDIM update: re-noise the prediction with the implied noise
/// `ε̂ = (x_t − √α_now·x̂_0) / √(1−α_now)`.
pub fn ddim_step(
    x_t: &Matrix,
    x0_pred: &Matrix,
    t_now: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
) -> Result<Matrix> {
    check_pair(x_t, x0_pred)?;
    let (a_now, a_next) = step_alphas(schedule, t_now, t_next)?;
    let (s_now, n_now) = (a_now.sqrt(), (1.0 - a_now).sqrt());
    let (s_next, n_next) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
    for ((o, &x), &x0) in out.as_mut_slice().iter_mut().zip(x_t.as_slice()).zip(x0_pred.as_slice()) {
        let eps = (x - s_now * x0) / n_now;
        *o = s_next * x0 + n_next * eps;
    }
    Ok(out)
}

/// Coefficients of the Gaussian posterior `q(x_next | x_t, x̂_0)`:
/// `(coef_x0, coef_xt, variance)`.
pub fn ddpm_posterior(schedule: &NoiseSchedule, t_now: f64, t_next: f64) -> Result<(f64, f64, f64)> {
    let (a_now, a_next) = step_alphas(schedule, t_now, t_next)?;
    let beta = 1.0 - a_now / a_next;
    let coef_x0 = a_next.sqrt() * beta / (1.0 - a_now);
    let coef_xt = (a_now / a_next).sqrt() * (1.0 - a_next) / (1.0 - a_now);
    let var = ((1.0 - a_next) / (1.0 - a_now) * beta).max(0.0);
    Ok((coef_x0, coef_xt, var))
}

/// Ancestral DDPM update with explicit standard-normal `noise`.
pub fn ddpm_step_with_noise(
    x_t: &Matrix,
    x0_pred: &Matrix,
    t_now: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
    noise: &Matrix,
) -> Result<Matrix> {
    check_pair(x_t, x0_pred)?;
    check_pair(x_t, noise)?;
    let (cx0, cxt, var) = ddpm_posterior(schedule, t_now, t_next)?;
    let sigma = if t_next == 0.0 { 0.0 } else { var.sqrt() };
    let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
    for (k, o) in out.as_mut_slice().iter_mut().enumerate() {
        *o = cx0 * x0_pred.as_slice()[k] + cxt * x_t.as_slice()[k] + sigma * noise.as_slice()[k];
    }
    Ok(out)
}

/// Ancestral DDPM update; no noise is drawn for the final step to `t = 0`.
pub fn ddpm_step(
    x_t: &Matrix,
    x0_pred: &Matrix,
    t_now: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Matrix> {
    let noise = if t_next == 0.0 {
        Matrix::zeros(x_t.rows(), x_t.cols())
    } else {
        rng.gaussian(x_t.rows(), x_t.cols())
    };
    ddpm_step_with_noise(x_t, x0_pred, t_now, t_next, schedule, &noise)
}

/// The time grid walked by the sampler: `t_now = 1 − k/steps`,
/// `t_next = max(1 − (k+1)/steps, 0)`.
pub fn time_pairs(steps: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..steps).map(move |k| {
        let t_now = 1.0 - k as f64 / steps as f64;
        let t_next = (1.0 - (k + 1) as f64 / steps as f64).max(0.0);
        (t_now, t_next)
    })
}

fn sample_chunk(
    params: &DenoiserParams,
    n: usize,
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Matrix> {
    let c = params.arch().channels;
    let mut x_t = rng.gaussian(n, c);
    let mut x_pred = Matrix::zeros(n, c);
    // Clamped copy of the prediction: drives the step and is fed back as the
    // self-conditioning input.
    let mut x0_hat = Matrix::zeros(n, c);
    let mut t = vec![0.0; n];
    for (t_now, t_next) in time_pairs(cfg.steps) {
        t.fill(t_now);
        x_pred = params.forward(&x_t, &t, &x0_hat)?;
        x0_hat = x_pred.clamp(-1.0, 1.0);
        x_t = match cfg.kind {
            SamplerKind::Ddim => ddim_step(&x_t, &x0_hat, t_now, t_next, schedule)?,
            SamplerKind::Ddpm => ddpm_step(&x_t, &x0_hat, t_now, t_next, schedule, rng)?,
        };
    }
    Ok(x_pred)
}

/// Runs the reverse chain from pure noise and returns the final `x̂_0`
/// prediction, unclamped (`cfg.batch × channels`). Each step uses the
/// prediction clamped to `[-1, 1]`; the bit half is otherwise a raw logit.
pub fn sample_raw(params: &DenoiserParams, cfg: &SampleConfig, schedule: &NoiseSchedule) -> Result<Matrix> {
    if cfg.steps == 0 {
        return Err(SddError::arg("sampling needs at least one step"));
    }
    let c = params.arch().channels;
    let mut out = Matrix::zeros(0, c);
    let mut start = 0;
    let mut chunk = 0u64;
    while start < cfg.batch {
        let n = SAMPLE_CHUNK.min(cfg.batch - start);
        let mut rng = Rng::stream(cfg.seed, chunk);
        out = out.vcat(&sample_chunk(params, n, cfg, schedule, &mut rng)?)?;
        start += n;
        chunk += 1;
    }
    Ok(out)
}

/// Samples sparse data points from a sparsity-bit model.
pub fn sample(
    params: &DenoiserParams,
    d: usize,
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    scale: &ScaleSpec,
) -> Result<DataBatch> {
    if params.arch().channels != 2 * d {
        return Err(SddError::shape(format!(
            "model has {} channels, expected 2*{d}",
            params.arch().channels
        )));
    }
    let raw = sample_raw(params, cfg, schedule)?;
    decode(&ExtendedState::new(raw)?, scale)
}

/// Samples from a dense (no sparsity bit) model: clamp and unscale only.
pub fn sample_dense_baseline(
    params: &DenoiserParams,
    d: usize,
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    scale: &ScaleSpec,
) -> Result<DataBatch> {
    if params.arch().channels != d {
        return Err(SddError::shape(format!(
            "dense model has {} channels, expected {d}",
            params.arch().channels
        )));
    }
    let raw = sample_raw(params, cfg, schedule)?;
    decode_dense(&raw, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub achieved_sparsity: f64,
    pub target_sparsity: f64,
    /// Index of the chosen threshold on the grid.
    pub grid_index: usize,
    pub grid_size: usize,
    /// Sparsity at the previous grid threshold (equal to `achieved_sparsity`
    /// when the first threshold was chosen).
    pub previous_sparsity: f64,
    /// `achieved_sparsity − target_sparsity <= 1 / grid_size`.
    pub converged: bool,
}

pub const DEFAULT_THRESHOLD_GRID: usize = 1000;

/// Zeroes every entry with `|v| <= τ` for the smallest `τ` on the grid
/// `k·max|v|/(grid_size−1)` whose pooled sparsity reaches `target`.
pub fn threshold_to_sparsity(batch: &DataBatch, target: f64, grid_size: usize) -> Result<(DataBatch, ThresholdResult)> {
    if !(0.0..=1.0).contains(&target) {
        return Err(SddError::arg(format!("target sparsity {target} outside [0, 1]")));
    }
    if grid_size < 2 {
        return Err(SddError::arg("threshold grid needs at least two points"));
    }
    let values = batch.values().as_slice();
    if values.is_empty() {
        return Err(SddError::arg("cannot threshold an empty batch"));
    }
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let max = *mags.last().unwrap();
    let total = mags.len() as f64;
    let threshold_at = |k: usize| {
        if k + 1 == grid_size {
            max
        } else {
            max * k as f64 / (grid_size - 1) as f64
        }
    };
    let sparsity_at = |tau: f64| mags.partition_point(|&m| m <= tau) as f64 / total;

    let mut previous = sparsity_at(threshold_at(0));
    let mut chosen = (grid_size - 1, threshold_at(grid_size - 1), 1.0);
    for k in 0..grid_size {
        let tau = threshold_at(k);
        let s = sparsity_at(tau);
        if s >= target {
            chosen = (k, tau, s);
            break;
        }
        previous = s;
    }
    let (grid_index, threshold, achieved) = chosen;
    let out = batch
        .values()
        .map(|v| if v.abs() <= threshold { 0.0 } else { v });
    let result = ThresholdResult {
        threshold,
        achieved_sparsity: achieved,
        target_sparsity: target,
        grid_index,
        grid_size,
        previous_sparsity: if grid_index == 0 { achieved } else { previous },
        converged: achieved - target <= 1.0 / grid_size as f64,
    };
    Ok((DataBatch::new(out)?, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    const SCHED: NoiseSchedule = NoiseSchedule::Cosine { offset: 0.008 };

    #[test]
    fn ddim_recovers_consistent_trajectory() {
        let mut rng = Rng::new(41);
        let x0 = rng.gaussian(4, 6);
        let eps = rng.gaussian(4, 6);
        for (t_now, t_next) in [(0.9, 0.5), (0.5, 0.1), (1.0, 0.0), (0.3, 0.29)] {
            let x_t = SCHED.forward_diffuse(&x0, t_now, &eps).unwrap();
            let expected = SCHED.forward_diffuse(&x0, t_next, &eps).unwrap();
            let got = ddim_step(&x_t, &x0, t_now, t_next, &SCHED).unwrap();
            for (a, b) in got.as_slice().iter().zip(expected.as_slice()) {
                assert!((a - b).abs() < 1e-10, "{t_now}->{t_next}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ddim_near_zero_noise_limit() {
        // x̂_0 = x_t at a time where α is almost 1: the step just rescales.
        let mut rng = Rng::new(42);
        let x = rng.gaussian(2, 3);
        let t_now = 1e-4;
        let got = ddim_step(&x, &x, t_now, 0.0, &SCHED).unwrap();
        for (a, b) in got.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_and_invalid_steps() {
        let x = Matrix::zeros(1, 2);
        assert!(matches!(
            ddim_step(&x, &x, 0.0, 0.0, &SCHED),
            Err(SddError::Argument(_))
        ));
        // A schedule that is still exactly 1 at t_now.
        let flat = NoiseSchedule::Cosine { offset: 0.0 };
        assert!(matches!(
            ddim_step(&x, &x, 1e-12, 0.0, &flat),
            Err(SddError::DegenerateStep { .. })
        ));
        assert!(matches!(ddim_step(&x, &x, 1.5, 0.0, &SCHED), Err(SddError::Domain(_))));
        assert!(matches!(
            ddim_step(&x, &Matrix::zeros(1, 3), 0.5, 0.0, &SCHED),
            Err(SddError::Shape(_))
        ));
    }

    #[test]
    fn posterior_variance_nonnegative_on_grid() {
        for i in 1..=100 {
            for j in 0..i {
                let (t_now, t_next) = (i as f64 / 100.0, j as f64 / 100.0);
                let (_, _, var) = ddpm_posterior(&SCHED, t_now, t_next).unwrap();
                assert!(var >= 0.0);
            }
        }
    }

    #[test]
    fn zero_noise_ddpm_is_posterior_mean() {
        let mut rng = Rng::new(43);
        let x_t = rng.gaussian(3, 4);
        let x0 = rng.gaussian(3, 4);
        let (cx0, cxt, _) = ddpm_posterior(&SCHED, 0.7, 0.4).unwrap();
        let got = ddpm_step_with_noise(&x_t, &x0, 0.7, 0.4, &SCHED, &Matrix::zeros(3, 4)).unwrap();
        for k in 0..12 {
            let mean = cx0 * x0.as_slice()[k] + cxt * x_t.as_slice()[k];
            assert!((got.as_slice()[k] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_ddpm_equals_full_variance_ddim_form() {
        // √α_next·x̂_0 + √(1−α_next−σ²)·ε̂ is the η = 1 member of the DDIM family.
        let mut rng = Rng::new(44);
        let x_t = rng.gaussian(3, 4);
        let x0 = rng.gaussian(3, 4);
        let (t_now, t_next) = (0.8, 0.35);
        let (a_now, a_next) = (SCHED.alpha(t_now).unwrap(), SCHED.alpha(t_next).unwrap());
        let (_, _, var) = ddpm_posterior(&SCHED, t_now, t_next).unwrap();
        let got = ddpm_step_with_noise(&x_t, &x0, t_now, t_next, &SCHED, &Matrix::zeros(3, 4)).unwrap();
        for k in 0..12 {
            let eps = (x_t.as_slice()[k] - a_now.sqrt() * x0.as_slice()[k]) / (1.0 - a_now).sqrt();
            let expect = a_next.sqrt() * x0.as_slice()[k] + (1.0 - a_next - var).sqrt() * eps;
            assert!((got.as_slice()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn final_step_is_the_prediction() {
        let mut rng = Rng::new(45);
        let x_t = rng.gaussian(2, 5);
        let x0 = rng.gaussian(2, 5);
        let a = ddim_step(&x_t, &x0, 0.01, 0.0, &SCHED).unwrap();
        let b = ddpm_step(&x_t, &x0, 0.01, 0.0, &SCHED, &mut rng).unwrap();
        for ((p, q), r) in a.as_slice().iter().zip(b.as_slice()).zip(x0.as_slice()) {
            assert!((p - r).abs() < 1e-12 && (q - r).abs() < 1e-12);
        }
    }

    #[test]
    fn time_grid_matches_sampling_loop() {
        let pairs: Vec<_> = time_pairs(4).collect();
        assert_eq!(pairs, vec![(1.0, 0.75), (0.75, 0.5), (0.5, 0.25), (0.25, 0.0)]);
        assert_eq!(time_pairs(1).collect::<Vec<_>>(), vec![(1.0, 0.0)]);
    }

    fn batch(rows: &[&[f64]]) -> DataBatch {
        DataBatch::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn threshold_at_existing_sparsity_is_zero() {
        let b = batch(&[&[0.0, 1.0, 2.0, 0.0]]);
        let (out, r) = threshold_to_sparsity(&b, 0.5, 1000).unwrap();
        assert_eq!(r.threshold, 0.0);
        assert_eq!(r.grid_index, 0);
        assert_eq!(out, b);
        assert!(r.converged);
    }

    /// Walks every grid threshold and returns the first meeting the target.
    fn exhaustive(values: &[f64], target: f64, grid: usize) -> (f64, Vec<f64>) {
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..grid {
            let tau = if k + 1 == grid { max } else { max * k as f64 / (grid - 1) as f64 };
            let out: Vec<f64> = values.iter().map(|&v| if v.abs() <= tau { 0.0 } else { v }).collect();
            let s = out.iter().filter(|v| **v == 0.0).count() as f64 / values.len() as f64;
            if s >= target {
                return (tau, out);
            }
        }
        unreachable!()
    }

    #[test]
    fn threshold_hand_case() {
        let b = batch(&[&[1.0, 2.0, 3.0, 4.0]]);
        let (out, r) = threshold_to_sparsity(&b, 0.5, 1000).unwrap();
        assert_eq!(out.values().row(0), &[0.0, 0.0, 3.0, 4.0]);
        let (tau, expect) = exhaustive(&[1.0, 2.0, 3.0, 4.0], 0.5, 1000);
        assert_eq!(r.threshold, tau);
        assert_eq!(r.grid_index, 500);
        assert!(r.threshold >= 2.0 && r.threshold - 2.0 < 4.0 / 999.0);
        assert_eq!(out.values().row(0), expect.as_slice());
    }

    #[test]
    fn threshold_all_equal_data_is_unconverged() {
        let b = batch(&[&[3.0, 3.0], &[3.0, 3.0]]);
        let (_, r) = threshold_to_sparsity(&b, 0.5, 100).unwrap();
        assert_eq!(r.achieved_sparsity, 1.0);
        assert!(!r.converged);
    }

    #[test]
    fn threshold_argument_errors() {
        let b = batch(&[&[1.0]]);
        assert!(threshold_to_sparsity(&b, 1.5, 10).is_err());
        assert!(threshold_to_sparsity(&b, 0.5, 1).is_err());
        let empty = DataBatch::new(Matrix::zeros(0, 3)).unwrap();
        assert!(threshold_to_sparsity(&empty, 0.5, 10).is_err());
    }

    proptest! {
        #[test]
        fn threshold_matches_exhaustive_grid(seed in any::<u64>(), target in 0.0f64..1.0, grid in 2usize..60) {
            let mut rng = Rng::new(seed);
            let vals: Vec<f64> = (0..24).map(|_| if rng.bernoulli(0.3) { 0.0 } else { rng.normal() }).collect();
            let b = DataBatch::new(Matrix::new(4, 6, vals.clone()).unwrap()).unwrap();
            let (out, r) = threshold_to_sparsity(&b, target, grid).unwrap();
            let (tau, expect) = exhaustive(&vals, target, grid);
            prop_assert_eq!(r.threshold, tau);
            prop_assert_eq!(out.values().as_slice(), expect.as_slice());
            prop_assert!(r.achieved_sparsity >= target);
            prop_assert!(r.previous_sparsity < target || r.grid_index == 0);
            prop_assert!((out.mean_sparsity() - r.achieved_sparsity).abs() < 1e-12);
        }

        #[test]
        fn achieved_sparsity_is_monotone_in_threshold(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let b = DataBatch::new(rng.gaussian(5, 5)).unwrap();
            let mut last = -1.0;
            for i in 0..=20 {
                let (_, r) = threshold_to_sparsity(&b, i as f64 / 20.0, 50).unwrap();
                prop_assert!(r.achieved_sparsity >= last);
                last = r.achieved_sparsity;
            }
        }
    }
}
