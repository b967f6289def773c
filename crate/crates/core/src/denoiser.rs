//! Skip-connected MLP denoiser `f(x_t, t, x_sc) -> x̂_0`.
//!
//! The network input is `u = [x_t | x_sc]` (width `2c`, where `c` is the
//! number of diffused channels: `2d` for the sparsity-bit model, `d` for the
//! dense baseline). Every hidden block sees `u` again next to the previous
//! activation:
//!
//! ```text
//! h_0 = silu(u · W_0 + b_0 + emb(t) · W_t)
//! h_k = silu([h_{k-1} | u] · W_k + b_k)
//! y   = [h_L | u] · W_out + b_out
//! ```
//!
//! `emb(t)` is a sinusoidal embedding; its projection `W_t` is added to the
//! first layer (the output layer when there are no hidden layers). The
//! output is linear: dense predictions and raw sparsity-bit logits.
//!
//! Gradients are computed by hand from a [`Tape`] recorded during the
//! forward pass.

use serde::{Deserialize, Serialize};

use crate::codec::ExtendedState;
use crate::error::{Result, SddError};
use crate::numerics::{sigmoid, Matrix, Rng};

/// Whether the model diffuses sparsity bits next to the dense values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Dense values plus sparsity bits (`2d` channels).
    #[default]
    Sdd,
    /// Dense values only (`d` channels); the plain DDPM/DDIM baseline.
    Dense,
}

impl ModelKind {
    pub fn channels(self, d: usize) -> usize {
        match self {
            ModelKind::Sdd => 2 * d,
            ModelKind::Dense => d,
        }
    }

    pub fn data_dim(self, channels: usize) -> usize {
        match self {
            ModelKind::Sdd => channels / 2,
            ModelKind::Dense => channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Width of the diffused state and of the network output.
    pub channels: usize,
    pub hidden: Vec<usize>,
    pub temb_dim: usize,
}

impl Architecture {
    pub fn input_width(&self) -> usize {
        2 * self.channels
    }

    fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_width()
        } else {
            self.hidden[l - 1] + self.input_width()
        }
    }

    fn layer_out(&self, l: usize) -> usize {
        if l < self.hidden.len() {
            self.hidden[l]
        } else {
            self.channels
        }
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        if self.temb_dim > 0 {
            shapes.push((self.temb_dim, self.layer_out(0)));
        }
        for l in 0..self.layer_count() {
            shapes.push((self.layer_in(l), self.layer_out(l)));
            shapes.push((1, self.layer_out(l)));
        }
        shapes
    }

    fn time_index(&self) -> Option<usize> {
        (self.temb_dim > 0).then_some(0)
    }

    fn weight_index(&self, l: usize) -> usize {
        usize::from(self.temb_dim > 0) + 2 * l
    }

    fn bias_index(&self, l: usize) -> usize {
        self.weight_index(l) + 1
    }
}

/// Sinusoidal embedding of `t ∈ [0, 1]`: `[sin(1000·t·ω_k) | cos(1000·t·ω_k)]`
/// with `ω_k = base^(-k / half)`. An odd dimension leaves the last slot zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
}

impl TimeEmbedding {
    pub const TIME_SCALE: f64 = 1000.0;

    pub fn new(dim: usize) -> Self {
        TimeEmbedding { dim, base: 10_000.0 }
    }

    pub fn embed_into(&self, t: f64, out: &mut [f64]) {
        let half = self.dim / 2;
        for k in 0..half {
            let freq = self.base.powf(-(k as f64) / half as f64);
            let arg = Self::TIME_SCALE * t * freq;
            out[k] = arg.sin();
            out[half + k] = arg.cos();
        }
        if self.dim % 2 == 1 {
            out[self.dim - 1] = 0.0;
        }
    }

    pub fn embed(&self, t: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(t.len(), self.dim);
        for (i, &ti) in t.iter().enumerate() {
            self.embed_into(ti, m.row_mut(i));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    arch: Architecture,
    tensors: Vec<Matrix>,
}

/// One gradient matrix per parameter tensor, same order and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        GradientSet {
            tensors: params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

/// Gradients returned by [`DenoiserParams::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: GradientSet,
    /// Gradient with respect to `x_t`.
    pub x_t: Matrix,
    /// Gradient with respect to the self-conditioning input.
    pub x_sc: Matrix,
}

/// Activations recorded by a forward pass for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    arch: Option<Architecture>,
    /// Input to each layer (`u`, then `[h_{k-1} | u]`), output layer last.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    temb: Option<Matrix>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.arch.is_none()
    }

    pub fn clear(&mut self) {
        *self = Tape::default();
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl DenoiserParams {
    /// Fan-in scaled Gaussian weights (`N(0, 1/fan_in)`), zero biases.
    pub fn init(rng: &mut Rng, arch: Architecture) -> Result<Self> {
        if arch.channels == 0 {
            return Err(SddError::arg("denoiser needs at least one channel"));
        }
        if arch.hidden.contains(&0) {
            return Err(SddError::arg("hidden layer widths must be positive"));
        }
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(rows, cols)| Matrix::zeros(rows, cols))
            .collect();
        let mut params = DenoiserParams { arch, tensors };
        if let Some(i) = params.arch.time_index() {
            let std = 1.0 / (params.arch.temb_dim as f64).sqrt();
            params.tensors[i] = rng.gaussian(params.tensors[i].rows(), params.tensors[i].cols()).scale(std);
        }
        for l in 0..params.arch.layer_count() {
            let i = params.arch.weight_index(l);
            let (rows, cols) = params.tensors[i].shape();
            params.tensors[i] = rng.gaussian(rows, cols).scale(1.0 / (rows as f64).sqrt());
        }
        Ok(params)
    }

    /// Wraps existing tensors, checking them against the architecture.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Matrix>) -> Result<Self> {
        let shapes = arch.tensor_shapes();
        if shapes.len() != tensors.len() {
            return Err(SddError::shape(format!(
                "{} tensors for an architecture with {}",
                tensors.len(),
                shapes.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != *s {
                return Err(SddError::shape(format!(
                    "tensor {i} is {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    s.0,
                    s.1
                )));
            }
            if !t.is_finite() {
                return Err(SddError::arg(format!("tensor {i} has non-finite entries")));
            }
        }
        Ok(DenoiserParams { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.rows() * t.cols()).sum()
    }

    fn check_inputs(&self, x_t: &Matrix, t: &[f64], x_sc: &Matrix) -> Result<()> {
        let c = self.arch.channels;
        if x_t.cols() != c || x_sc.cols() != c || x_sc.rows() != x_t.rows() {
            return Err(SddError::shape(format!(
                "denoiser expects two n x {c} inputs, got {}x{} and {}x{}",
                x_t.rows(),
                x_t.cols(),
                x_sc.rows(),
                x_sc.cols()
            )));
        }
        if t.len() != x_t.rows() {
            return Err(SddError::shape(format!(
                "{} times for {} rows",
                t.len(),
                x_t.rows()
            )));
        }
        if let Some(&bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(SddError::Domain(bad));
        }
        Ok(())
    }

    /// Prediction of `x̂_0` without recording activations.
    pub fn forward(&self, x_t: &Matrix, t: &[f64], x_sc: &Matrix) -> Result<Matrix> {
        self.run(x_t, t, x_sc, None)
    }

    /// Prediction of `x̂_0`, recording what [`backward`](Self::backward) needs.
    pub fn forward_recorded(
        &self,
        x_t: &Matrix,
        t: &[f64],
        x_sc: &Matrix,
        tape: &mut Tape,
    ) -> Result<Matrix> {
        self.run(x_t, t, x_sc, Some(tape))
    }

    /// [`forward`](Self::forward) on extended states.
    pub fn predict(&self, x_t: &ExtendedState, t: &[f64], x_sc: &ExtendedState) -> Result<ExtendedState> {
        ExtendedState::new(self.forward(x_t.matrix(), t, x_sc.matrix())?)
    }

    fn run(&self, x_t: &Matrix, t: &[f64], x_sc: &Matrix, mut tape: Option<&mut Tape>) -> Result<Matrix> {
        self.check_inputs(x_t, t, x_sc)?;
        let arch = &self.arch;
        let u = x_t.hcat(x_sc)?;
        let temb = arch
            .time_index()
            .map(|_| TimeEmbedding::new(arch.temb_dim).embed(t));
        if let Some(tape) = tape.as_deref_mut() {
            tape.clear();
            tape.temb = temb.clone();
        }

        let mut input = u.clone();
        for l in 0..arch.layer_count() {
            let mut z = input.matmul(&self.tensors[arch.weight_index(l)])?;
            z.add_row_broadcast(self.tensors[arch.bias_index(l)].as_slice())?;
            if l == 0 {
                if let (Some(ti), Some(e)) = (arch.time_index(), temb.as_ref()) {
                    z.axpy(1.0, &e.matmul(&self.tensors[ti])?)?;
                }
            }
            let last = l + 1 == arch.layer_count();
            let next = if last {
                None
            } else {
                Some(z.map(silu).hcat(&u)?)
            };
            if let Some(tape) = tape.as_deref_mut() {
                tape.inputs.push(input);
                if !last {
                    tape.pre_activations.push(z.clone());
                }
            }
            match next {
                Some(n) => input = n,
                None => {
                    if let Some(tape) = tape {
                        tape.arch = Some(arch.clone());
                    }
                    return Ok(z);
                }
            }
        }
        unreachable!("the output layer always returns")
    }

    /// Exact gradients of `Σ upstream ⊙ output` for the pass recorded on `tape`.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<Gradients> {
        let arch = &self.arch;
        match tape.arch.as_ref() {
            Some(a) if a == arch => {}
            _ => return Err(SddError::State),
        }
        let n = tape.inputs[0].rows();
        if upstream.shape() != (n, arch.channels) {
            return Err(SddError::shape(format!(
                "upstream gradient {}x{}, expected {n}x{}",
                upstream.rows(),
                upstream.cols(),
                arch.channels
            )));
        }

        let mut grads = GradientSet::zeros_like(self);
        let width = arch.input_width();
        let mut du = Matrix::zeros(n, width);
        let mut dz = upstream.clone();

        for l in (0..arch.layer_count()).rev() {
            let input = &tape.inputs[l];
            grads.tensors[arch.weight_index(l)] = input.matmul_tn(&dz)?;
            grads.tensors[arch.bias_index(l)] = Matrix::row_vector(&dz.col_sums());
            if l == 0 {
                if let (Some(ti), Some(e)) = (arch.time_index(), tape.temb.as_ref()) {
                    grads.tensors[ti] = e.matmul_tn(&dz)?;
                }
            }
            let dinput = dz.matmul_nt(&self.tensors[arch.weight_index(l)])?;
            if l == 0 {
                du.axpy(1.0, &dinput)?;
                break;
            }
            let (dact, du_part) = dinput.split_cols(arch.hidden[l - 1])?;
            du.axpy(1.0, &du_part)?;
            let pre = &tape.pre_activations[l - 1];
            dz = dact.hadamard(&pre.map(silu_grad))?;
        }

        let (x_t, x_sc) = du.split_cols(arch.channels)?;
        Ok(Gradients {
            params: grads,
            x_t,
            x_sc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(c: usize, hidden: &[usize], temb: usize) -> Architecture {
        Architecture {
            channels: c,
            hidden: hidden.to_vec(),
            temb_dim: temb,
        }
    }

    #[test]
    fn widths_follow_channel_count() {
        let d = 4;
        let a = arch(ModelKind::Sdd.channels(d), &[32, 32], 16);
        assert_eq!(a.input_width(), 16);
        let p = DenoiserParams::init(&mut Rng::new(0), a).unwrap();
        let out = p
            .forward(&Matrix::zeros(3, 8), &[0.1, 0.5, 0.9], &Matrix::zeros(3, 8))
            .unwrap();
        assert_eq!(out.shape(), (3, 8));
        assert!(out.is_finite());
    }

    #[test]
    fn init_is_deterministic() {
        let a = arch(6, &[10, 7], 8);
        let p = DenoiserParams::init(&mut Rng::new(5), a.clone()).unwrap();
        let q = DenoiserParams::init(&mut Rng::new(5), a).unwrap();
        assert_eq!(p, q);
        assert!(p.tensors().iter().skip(2).step_by(2).all(|b| b.rows() == 1 && b.max_abs() == 0.0));
    }

    #[test]
    fn zero_weights_output_bias() {
        let a = arch(4, &[5], 4);
        let mut p = DenoiserParams::init(&mut Rng::new(1), a.clone()).unwrap();
        let bias = [0.5, -1.0, 2.0, 0.25];
        for t in p.tensors_mut() {
            t.map_inplace(|_| 0.0);
        }
        let last = p.tensors().len() - 1;
        p.tensors_mut()[last] = Matrix::row_vector(&bias);
        let mut rng = Rng::new(2);
        let out = p.forward(&rng.gaussian(3, 4), &[0.2, 0.4, 0.6], &rng.gaussian(3, 4)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &bias);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let a = arch(6, &[9, 9], 8);
        let p = DenoiserParams::init(&mut Rng::new(3), a).unwrap();
        let mut rng = Rng::new(4);
        let x = rng.gaussian(1, 6);
        let sc = rng.gaussian(1, 6);
        let single = p.forward(&x, &[0.3], &sc).unwrap();
        let pair = p
            .forward(&x.vcat(&x).unwrap(), &[0.3, 0.3], &sc.vcat(&sc).unwrap())
            .unwrap();
        // Different GEMM blockings may reorder sums; compare tightly, not bitwise.
        for r in 0..2 {
            for (a, b) in pair.row(r).iter().zip(single.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let a = arch(6, &[16], 8);
        let p = DenoiserParams::init(&mut Rng::new(8), a).unwrap();
        let mut rng = Rng::new(9);
        let x = rng.gaussian(4, 6);
        let sc = rng.gaussian(4, 6);
        let t = [0.0, 0.3, 0.7, 1.0];
        assert_eq!(p.forward(&x, &t, &sc).unwrap(), p.forward(&x, &t, &sc).unwrap());
    }

    #[test]
    fn shape_and_domain_errors() {
        let p = DenoiserParams::init(&mut Rng::new(0), arch(4, &[3], 2)).unwrap();
        assert!(matches!(
            p.forward(&Matrix::zeros(2, 3), &[0.0, 0.0], &Matrix::zeros(2, 4)),
            Err(SddError::Shape(_))
        ));
        assert!(matches!(
            p.forward(&Matrix::zeros(2, 4), &[0.0], &Matrix::zeros(2, 4)),
            Err(SddError::Shape(_))
        ));
        assert!(matches!(
            p.forward(&Matrix::zeros(1, 4), &[1.5], &Matrix::zeros(1, 4)),
            Err(SddError::Domain(_))
        ));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let p = DenoiserParams::init(&mut Rng::new(0), arch(4, &[3], 2)).unwrap();
        assert!(matches!(
            p.backward(&Tape::new(), &Matrix::zeros(1, 4)),
            Err(SddError::State)
        ));
        // A tape from a different network is rejected as well.
        let other = DenoiserParams::init(&mut Rng::new(0), arch(4, &[5], 2)).unwrap();
        let mut tape = Tape::new();
        other
            .forward_recorded(&Matrix::zeros(1, 4), &[0.5], &Matrix::zeros(1, 4), &mut tape)
            .unwrap();
        assert!(matches!(p.backward(&tape, &Matrix::zeros(1, 4)), Err(SddError::State)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = DenoiserParams::init(&mut Rng::new(1), arch(6, &[8, 8], 4)).unwrap();
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        p.forward_recorded(&rng.gaussian(3, 6), &[0.1, 0.2, 0.3], &rng.gaussian(3, 6), &mut tape)
            .unwrap();
        let g = p.backward(&tape, &Matrix::zeros(3, 6)).unwrap();
        assert_eq!(g.params.max_abs(), 0.0);
        assert_eq!(g.params, GradientSet::zeros_like(&p));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = DenoiserParams::init(&mut Rng::new(11), arch(4, &[7, 5], 6)).unwrap();
        let mut rng = Rng::new(12);
        let x = rng.gaussian(2, 4);
        let sc = rng.gaussian(2, 4);
        let t = [0.25, 0.8];
        let w = rng.gaussian(2, 4);
        let objective = |x: &Matrix, sc: &Matrix| -> f64 {
            let y = p.forward(x, &t, sc).unwrap();
            y.hadamard(&w).unwrap().as_slice().iter().sum()
        };
        let mut tape = Tape::new();
        p.forward_recorded(&x, &t, &sc, &mut tape).unwrap();
        let g = p.backward(&tape, &w).unwrap();
        let h = 1e-5;
        for (which, grad) in [(0, &g.x_t), (1, &g.x_sc)] {
            for i in 0..2 {
                for j in 0..4 {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    let (mut sp, mut sm) = (sc.clone(), sc.clone());
                    if which == 0 {
                        xp[(i, j)] += h;
                        xm[(i, j)] -= h;
                    } else {
                        sp[(i, j)] += h;
                        sm[(i, j)] -= h;
                    }
                    let fd = (objective(&xp, &sp) - objective(&xm, &sm)) / (2.0 * h);
                    let an = grad[(i, j)];
                    assert!((fd - an).abs() < 1e-6, "{which} ({i},{j}): {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn time_embedding_is_smooth_and_bounded() {
        let e = TimeEmbedding::new(7);
        let m = e.embed(&[0.0, 0.5, 0.5 + 1e-9]);
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 3)], 1.0);
        assert_eq!(m[(1, 6)], 0.0);
        for j in 0..7 {
            assert!((m[(1, j)] - m[(2, j)]).abs() < 1e-5);
            assert!(m[(1, j)].abs() <= 1.0);
        }
    }

    #[test]
    fn linear_network_without_time_is_affine() {
        let p = DenoiserParams::init(&mut Rng::new(13), arch(3, &[], 0)).unwrap();
        assert_eq!(p.tensors().len(), 2);
        assert_eq!(p.tensors()[0].shape(), (6, 3));
    }
}
