//! Low-rank tensor function representation of the sequence background.
//!
//! The background is `core ×₁ F_h ×₂ F_w ×₃ F_t`, where each factor
//! matrix is produced by a small coordinate MLP without bias terms:
//! row `i` of `F` is `H_d σ(... σ(H_0 · x_i))` for the scalar grid
//! coordinate `x_i`. With the sine activation the input derivative of
//! each row stays a sin/cos composition of the same weights, which is
//! what makes the neural TV term cheap: no extra parameters, one extra
//! chain evaluation.
//!
//! Coordinates span `[-1, 1]`. The first layer is initialized uniform in
//! `[-scale, scale]` (`scale = 5` by default) and deeper layers uniform
//! in `±sqrt(6/c)/ω₀`, the fan-in rule for sinusoidal nets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor3::{tucker_reconstruct, Matrix, Tensor3};

/// Nonlinearity between factor-network layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sine,
    Relu,
    LeakyRelu,
    Tanh,
}

/// Negative-side slope of the leaky relu variant.
pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sine => x.sin(),
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64_lossy(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sine => x.cos(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64_lossy(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Activation::Sine),
            "relu" => Ok(Activation::Relu),
            "leakyrelu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::usage(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Activation::Sine => "sine",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leakyrelu",
            Activation::Tanh => "tanh",
        };
        f.write_str(s)
    }
}

/// Bias-free coordinate MLP: weights `H_0 (1×c), H_1..H_{d-1} (c×c),
/// H_d (c×r)`.
#[derive(Debug, Clone)]
pub struct FactorNetwork<T> {
    weights: Vec<Matrix<T>>,
    activation: Activation,
    omega0: T,
}

impl<T: Scalar> FactorNetwork<T> {
    /// Builds a network from explicit weights, validating the shape
    /// chain `1 -> c -> ... -> c -> r`.
    pub fn from_weights(weights: Vec<Matrix<T>>, activation: Activation, omega0: T) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::usage("factor network needs depth >= 1 (two weight matrices)"));
        }
        if weights[0].rows() != 1 {
            return Err(Error::shape("first factor-network weight must have one row"));
        }
        let c = weights[0].cols();
        for (idx, w) in weights.iter().enumerate().skip(1) {
            if w.rows() != c {
                return Err(Error::shape(format!("weight {idx} must have {c} rows")));
            }
            if idx + 1 < weights.len() && w.cols() != c {
                return Err(Error::shape(format!("hidden weight {idx} must have {c} columns")));
            }
        }
        Ok(FactorNetwork {
            weights,
            activation,
            omega0,
        })
    }

    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn omega0(&self) -> T {
        self.omega0
    }

    /// Number of weight layers minus one.
    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn hidden_width(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_rank(&self) -> usize {
        self.weights.last().expect("validated nonempty").cols()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }
}

/// `n` evenly spaced coordinates spanning `[-1, 1]`; `[0]` for `n = 1`.
pub fn make_coordinates<T: Scalar>(n: usize) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::usage("coordinate grid size must be >= 1"));
    }
    if n == 1 {
        return Ok(vec![T::zero()]);
    }
    let step = T::from_f64_lossy(2.0 / (n as f64 - 1.0));
    Ok((0..n)
        .map(|i| -T::one() + step * T::from_f64_lossy(i as f64))
        .collect())
}

/// Seeded network initialization. The hidden width is tied to the grid
/// size (`c = n`); the first layer is uniform `±scale`, deeper layers
/// uniform `±sqrt(6/c)/ω₀`.
pub fn init_network<T: Scalar>(
    n: usize,
    rank: usize,
    depth: usize,
    scale: f64,
    activation: Activation,
    omega0: f64,
    seed: u64,
) -> Result<FactorNetwork<T>> {
    if rank < 1 {
        return Err(Error::usage("factor-network rank must be >= 1"));
    }
    if depth < 1 {
        return Err(Error::usage("factor-network depth must be >= 1"));
    }
    if n < 1 {
        return Err(Error::usage("factor-network width must be >= 1"));
    }
    let c = n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize, bound: f64| -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| {
            T::from_f64_lossy(rng.gen_range(-bound..bound))
        })
    };
    let hidden_bound = (6.0 / c as f64).sqrt() / omega0;
    let mut weights = Vec::with_capacity(depth + 1);
    weights.push(draw(1, c, scale));
    for _ in 1..depth {
        weights.push(draw(c, c, hidden_bound));
    }
    weights.push(draw(c, rank, hidden_bound));
    FactorNetwork::from_weights(weights, activation, T::from_f64_lossy(omega0))
}

/// Pre-activations `z_0 = x·H_0`, `z_l = σ(ω₀ z_{l-1})·H_l` for every
/// grid coordinate; returns all `z_l` as `n×·` matrices.
fn pre_activations<T: Scalar>(net: &FactorNetwork<T>, coords: &[T]) -> Result<Vec<Matrix<T>>> {
    let x = Matrix::column(coords);
    let mut zs = Vec::with_capacity(net.weights.len());
    zs.push(x.matmul(&net.weights[0])?);
    for layer in net.weights.iter().skip(1) {
        let activated = zs
            .last()
            .unwrap()
            .map(|z| net.activation.apply(net.omega0 * z));
        zs.push(activated.matmul(layer)?);
    }
    Ok(zs)
}

/// Factor matrix `n×r`: row `i` is the network applied to `coords[i]`.
pub fn factor_forward<T: Scalar>(net: &FactorNetwork<T>, coords: &[T]) -> Result<Matrix<T>> {
    let out = pre_activations(net, coords)?.pop().expect("nonempty");
    if !out.all_finite() {
        return Err(Error::non_finite("factor network output is not finite"));
    }
    Ok(out)
}

/// Input derivative of [`factor_forward`] per coordinate: the chain
/// `D_0 = 1·H_0`, `D_l = (ω₀ σ'(ω₀ z_{l-1}) ⊙ D_{l-1})·H_l`.
pub fn factor_derivative<T: Scalar>(net: &FactorNetwork<T>, coords: &[T]) -> Result<Matrix<T>> {
    let zs = pre_activations(net, coords)?;
    let n = coords.len();
    let ones = Matrix::from_fn(n, 1, |_, _| T::one());
    let mut deriv = ones.matmul(&net.weights[0])?;
    for (layer, z_prev) in net.weights.iter().skip(1).zip(zs.iter()) {
        let gated = deriv.zip_map(z_prev, |d, z| {
            d * net.omega0 * net.activation.derivative(net.omega0 * z)
        })?;
        deriv = gated.matmul(layer)?;
    }
    Ok(deriv)
}

/// Which total-variation regularizer the loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TvMode {
    /// Analytic coordinate derivatives along all three axes, the
    /// temporal term weighted by kappa.
    Neural3d,
    /// Analytic derivatives along the two spatial axes only.
    NeuralSpatial,
    /// First-order backward differences along all three axes.
    Discrete3d,
    None,
}

impl std::str::FromStr for TvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural3d" => Ok(TvMode::Neural3d),
            "neural-spatial" | "neurtv" => Ok(TvMode::NeuralSpatial),
            "discrete" | "discrete3d" | "3dtv" => Ok(TvMode::Discrete3d),
            "none" => Ok(TvMode::None),
            other => Err(Error::usage(format!("unknown tv mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TvMode::Neural3d => "neural3d",
            TvMode::NeuralSpatial => "neural-spatial",
            TvMode::Discrete3d => "discrete",
            TvMode::None => "none",
        };
        f.write_str(s)
    }
}

/// Total-variation settings: mode, temporal weight `kappa`, loss weight
/// `phi`.
#[derive(Debug, Clone, Copy)]
pub struct TvConfig<T> {
    pub mode: TvMode,
    pub kappa: T,
    pub phi: T,
}

impl<T: Scalar> TvConfig<T> {
    pub fn new(mode: TvMode, kappa: T, phi: T) -> Result<Self> {
        if kappa < T::zero() || phi < T::zero() {
            return Err(Error::usage("tv weights kappa and phi must be nonnegative"));
        }
        Ok(TvConfig { mode, kappa, phi })
    }
}

/// Learnable core tensor plus the three factor networks and their
/// coordinate grids.
#[derive(Debug, Clone)]
pub struct TuckerRepresentation<T> {
    pub core: Tensor3<T>,
    pub nets: [FactorNetwork<T>; 3],
    pub coords: [Vec<T>; 3],
}

impl<T: Scalar> TuckerRepresentation<T> {
    pub fn new(core: Tensor3<T>, nets: [FactorNetwork<T>; 3], coords: [Vec<T>; 3]) -> Result<Self> {
        let ranks = core.dims();
        let ranks = [ranks.0, ranks.1, ranks.2];
        for axis in 0..3 {
            if nets[axis].output_rank() != ranks[axis] {
                return Err(Error::shape(format!(
                    "axis {axis}: network rank {} must match core dim {}",
                    nets[axis].output_rank(),
                    ranks[axis]
                )));
            }
            if coords[axis].is_empty() {
                return Err(Error::usage(format!("axis {axis}: empty coordinate grid")));
            }
        }
        Ok(TuckerRepresentation { core, nets, coords })
    }

    /// Output dims `(n1, n2, n3)` of the represented tensor.
    pub fn output_dims(&self) -> (usize, usize, usize) {
        (self.coords[0].len(), self.coords[1].len(), self.coords[2].len())
    }

    pub fn factor_matrices(&self) -> Result<[Matrix<T>; 3]> {
        Ok([
            factor_forward(&self.nets[0], &self.coords[0])?,
            factor_forward(&self.nets[1], &self.coords[1])?,
            factor_forward(&self.nets[2], &self.coords[2])?,
        ])
    }

    pub fn derivative_matrices(&self) -> Result<[Matrix<T>; 3]> {
        Ok([
            factor_derivative(&self.nets[0], &self.coords[0])?,
            factor_derivative(&self.nets[1], &self.coords[1])?,
            factor_derivative(&self.nets[2], &self.coords[2])?,
        ])
    }

    /// Total learnable values: core entries plus all network weights.
    pub fn parameter_count(&self) -> usize {
        self.core.len() + self.nets.iter().map(|n| n.parameter_count()).sum::<usize>()
    }
}

/// Evaluates the represented background tensor.
pub fn background<T: Scalar>(rep: &TuckerRepresentation<T>) -> Result<Tensor3<T>> {
    let [fh, fw, ft] = rep.factor_matrices()?;
    tucker_reconstruct(&rep.core, &fh, &fw, &ft)
}

/// The three derivative tensors of the background, one per axis:
/// `∂B/∂h = core ×₁ F'_h ×₂ F_w ×₃ F_t` and the cyclic analogues.
pub fn derivative_tensors<T: Scalar>(rep: &TuckerRepresentation<T>) -> Result<[Tensor3<T>; 3]> {
    let [fh, fw, ft] = rep.factor_matrices()?;
    let [dh, dw, dt] = rep.derivative_matrices()?;
    Ok([
        tucker_reconstruct(&rep.core, &dh, &fw, &ft)?,
        tucker_reconstruct(&rep.core, &fh, &dw, &ft)?,
        tucker_reconstruct(&rep.core, &fh, &fw, &dt)?,
    ])
}

/// Neural TV value: `Σ|∂B/∂h| + Σ|∂B/∂w| + κ·Σ|∂B/∂t|`, the temporal
/// term dropped in spatial mode.
pub fn neural_tv<T: Scalar>(rep: &TuckerRepresentation<T>, cfg: &TvConfig<T>) -> Result<T> {
    match cfg.mode {
        TvMode::Neural3d | TvMode::NeuralSpatial => {}
        other => {
            return Err(Error::usage(format!(
                "neural_tv requires a neural tv mode, got {other}"
            )))
        }
    }
    let [dh, dw, dt] = derivative_tensors(rep)?;
    let mut total = dh.abs_sum() + dw.abs_sum();
    if cfg.mode == TvMode::Neural3d {
        total = total + cfg.kappa * dt.abs_sum();
    }
    Ok(total)
}

/// Discrete 3-D TV: l1 norms of first-order backward differences along
/// each axis; entries without a predecessor contribute nothing.
pub fn discrete_3dtv<T: Scalar>(b: &Tensor3<T>) -> T {
    let (n1, n2, n3) = b.dims();
    let mut total = T::zero();
    for k in 0..n3 {
        for i in 0..n1 {
            for j in 0..n2 {
                let v = b.at(i, j, k);
                if i > 0 {
                    total = total + (v - b.at(i - 1, j, k)).abs();
                }
                if j > 0 {
                    total = total + (v - b.at(i, j - 1, k)).abs();
                }
                if k > 0 {
                    total = total + (v - b.at(i, j, k - 1)).abs();
                }
            }
        }
    }
    total
}

/// Backward-difference matrix: row 0 is zero, row i is `e_i - e_{i-1}`.
/// `mode_product` with it along an axis yields that axis's difference
/// tensor, which is how the discrete TV enters the autodiff graph.
pub fn difference_matrix<T: Scalar>(n: usize) -> Matrix<T> {
    Matrix::from_fn(n, n, |r, c| {
        if r == 0 {
            T::zero()
        } else if r == c {
            T::one()
        } else if c + 1 == r {
            -T::one()
        } else {
            T::zero()
        }
    })
}

/// Closed-form learnable-parameter count for dims `(n1,n2,n3)`, ranks
/// `(r1,r2,r3)` and depth `d`, with hidden width `c_i = n_i`:
/// `r1·r2·r3 + Σ_axes (c + (d-1)·c² + c·r)`.
pub fn parameter_count_closed_form(
    dims: (usize, usize, usize),
    ranks: (usize, usize, usize),
    depth: usize,
) -> usize {
    let per_axis = |n: usize, r: usize| n + (depth - 1) * n * n + n * r;
    ranks.0 * ranks.1 * ranks.2
        + per_axis(dims.0, ranks.0)
        + per_axis(dims.1, ranks.1)
        + per_axis(dims.2, ranks.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor3::{svd, unfold};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn small_rep(dims: (usize, usize, usize), ranks: (usize, usize, usize), seed: u64) -> TuckerRepresentation<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let core = Tensor3::from_fn(ranks, |_, _, _| rng.gen_range(-0.5..0.5));
        let nets = [
            init_network(dims.0, ranks.0, 2, 5.0, Activation::Sine, 1.0, seed + 1).unwrap(),
            init_network(dims.1, ranks.1, 2, 5.0, Activation::Sine, 1.0, seed + 2).unwrap(),
            init_network(dims.2, ranks.2, 2, 5.0, Activation::Sine, 1.0, seed + 3).unwrap(),
        ];
        let coords = [
            make_coordinates(dims.0).unwrap(),
            make_coordinates(dims.1).unwrap(),
            make_coordinates(dims.2).unwrap(),
        ];
        TuckerRepresentation::new(core, nets, coords).unwrap()
    }

    #[test]
    fn coordinates_span_unit_range() {
        assert_eq!(make_coordinates::<f64>(1).unwrap(), vec![0.0]);
        assert_eq!(make_coordinates::<f64>(2).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(
            make_coordinates::<f64>(5).unwrap(),
            vec![-1.0, -0.5, 0.0, 0.5, 1.0]
        );
        assert!(make_coordinates::<f64>(0).is_err());
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let a = init_network::<f64>(6, 2, 2, 5.0, Activation::Sine, 1.0, 99).unwrap();
        let b = init_network::<f64>(6, 2, 2, 5.0, Activation::Sine, 1.0, 99).unwrap();
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            assert_eq!(wa, wb);
        }
        let c = init_network::<f64>(6, 2, 2, 5.0, Activation::Sine, 1.0, 100).unwrap();
        assert_ne!(a.weights()[0], c.weights()[0]);
    }

    #[test]
    fn init_first_layer_bounded_by_scale() {
        let net = init_network::<f64>(64, 4, 2, 5.0, Activation::Sine, 1.0, 3).unwrap();
        assert!(net.weights()[0].data().iter().all(|w| w.abs() <= 5.0));
    }

    #[test]
    fn init_hidden_layers_respect_fan_in_bound() {
        // Empirical max |w| over ~1e4 sampled hidden weights.
        let c = 50;
        let bound = (6.0 / c as f64).sqrt();
        let mut max_abs = 0.0f64;
        let mut samples = 0usize;
        for seed in 0..5 {
            let net = init_network::<f64>(c, 10, 2, 5.0, Activation::Sine, 1.0, seed).unwrap();
            for w in net.weights().iter().skip(1) {
                samples += w.data().len();
                max_abs = w.data().iter().fold(max_abs, |m, x| m.max(x.abs()));
            }
        }
        assert!(samples >= 10_000);
        assert!(max_abs <= bound);
    }

    #[test]
    fn forward_zero_weights_gives_zero_matrix() {
        let net = FactorNetwork::from_weights(
            vec![Matrix::<f64>::zeros(1, 3), Matrix::zeros(3, 2)],
            Activation::Sine,
            1.0,
        )
        .unwrap();
        let f = factor_forward(&net, &make_coordinates(4).unwrap()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let d = factor_derivative(&net, &make_coordinates(4).unwrap()).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_single_sine_chain() {
        // d=1, 1x1 chain: f(x) = sin(pi/2 * x) * 1.
        let net = FactorNetwork::from_weights(
            vec![
                Matrix::from_vec(1, 1, vec![std::f64::consts::FRAC_PI_2]).unwrap(),
                Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            ],
            Activation::Sine,
            1.0,
        )
        .unwrap();
        let f = factor_forward(&net, &[1.0]).unwrap();
        assert!((f.at(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_single_sine_chain() {
        // f(x) = sin(w x), f'(0) = w.
        let net = FactorNetwork::from_weights(
            vec![
                Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
                Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            ],
            Activation::Sine,
            1.0,
        )
        .unwrap();
        let d = factor_derivative(&net, &[0.0f64]).unwrap();
        assert!((d.at(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_naive_per_row_evaluation() {
        let net = init_network::<f64>(5, 3, 2, 2.0, Activation::Sine, 1.0, 7).unwrap();
        let coords = make_coordinates::<f64>(5).unwrap();
        let f = factor_forward(&net, &coords).unwrap();
        for (i, &x) in coords.iter().enumerate() {
            // Explicit per-layer loops, one coordinate at a time.
            let mut row = vec![x];
            for (layer_idx, w) in net.weights().iter().enumerate() {
                let input: Vec<f64> = if layer_idx == 0 {
                    row.clone()
                } else {
                    row.iter().map(|&z| z.sin()).collect()
                };
                let mut next = vec![0.0; w.cols()];
                for (c, slot) in next.iter_mut().enumerate() {
                    for (r, &iv) in input.iter().enumerate() {
                        *slot += iv * w.at(r, c);
                    }
                }
                row = next;
            }
            for (c, &expect) in row.iter().enumerate() {
                assert!((f.at(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    fn fd_derivative_check(depth: usize, activation: Activation, tol: f64) {
        let n = 6;
        let net = init_network::<f64>(n, 3, depth, 2.0, activation, 1.0, 11 + depth as u64).unwrap();
        let coords = make_coordinates::<f64>(n).unwrap();
        let analytic = factor_derivative(&net, &coords).unwrap();
        let h = 1e-6;
        let up: Vec<f64> = coords.iter().map(|&x| x + h).collect();
        let down: Vec<f64> = coords.iter().map(|&x| x - h).collect();
        let f_up = factor_forward(&net, &up).unwrap();
        let f_down = factor_forward(&net, &down).unwrap();
        for i in 0..n {
            for c in 0..3 {
                let fd = (f_up.at(i, c) - f_down.at(i, c)) / (2.0 * h);
                let denom = fd.abs().max(1.0);
                assert!(
                    (analytic.at(i, c) - fd).abs() / denom <= tol,
                    "depth {depth}: analytic {} vs fd {fd}",
                    analytic.at(i, c)
                );
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences_sine_depths() {
        for depth in 1..=3 {
            fd_derivative_check(depth, Activation::Sine, 1e-5);
        }
    }

    #[test]
    fn derivative_matches_finite_differences_tanh() {
        fd_derivative_check(2, Activation::Tanh, 1e-5);
    }

    #[test]
    fn background_zero_core_is_zero() {
        let mut rep = small_rep((4, 5, 3), (2, 2, 2), 21);
        rep.core = Tensor3::zeros((2, 2, 2));
        let b = background(&rep).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        let tv = neural_tv(
            &rep,
            &TvConfig::new(TvMode::Neural3d, 100.0, 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(tv, 0.0);
    }

    #[test]
    fn background_equals_factorized_reconstruction_and_bruteforce() {
        let rep = small_rep((4, 5, 3), (2, 2, 2), 22);
        let b = background(&rep).unwrap();
        let [fh, fw, ft] = rep.factor_matrices().unwrap();
        let direct = tucker_reconstruct(&rep.core, &fh, &fw, &ft).unwrap();
        assert_eq!(b, direct);

        // Brute-force contraction at entry (2, 3, 1).
        let mut expect = 0.0;
        for a in 0..2 {
            for bb in 0..2 {
                for c in 0..2 {
                    expect += rep.core.at(a, bb, c) * fh.at(2, a) * fw.at(3, bb) * ft.at(1, c);
                }
            }
        }
        assert!((b.at(2, 3, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn neural_tv_modes_and_kappa() {
        let rep = small_rep((4, 4, 3), (2, 2, 2), 23);
        let spatial = neural_tv(
            &rep,
            &TvConfig::new(TvMode::NeuralSpatial, 100.0, 1.0).unwrap(),
        )
        .unwrap();
        let kappa0 = neural_tv(&rep, &TvConfig::new(TvMode::Neural3d, 0.0, 1.0).unwrap()).unwrap();
        assert_eq!(spatial, kappa0);

        // Monotone in kappa.
        let mut last = kappa0;
        for kappa in [0.5, 1.0, 10.0, 100.0] {
            let v = neural_tv(&rep, &TvConfig::new(TvMode::Neural3d, kappa, 1.0).unwrap()).unwrap();
            assert!(v >= last);
            last = v;
        }

        assert!(neural_tv(&rep, &TvConfig::new(TvMode::Discrete3d, 1.0, 1.0).unwrap()).is_err());
        assert!(neural_tv(&rep, &TvConfig::new(TvMode::None, 1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn neural_tv_derivatives_match_coordinate_finite_differences() {
        let rep = small_rep((4, 4, 3), (2, 2, 2), 24);
        let tensors = derivative_tensors(&rep).unwrap();
        let h = 1e-6;
        for axis in 0..3 {
            let mut up = rep.clone();
            let mut down = rep.clone();
            for c in up.coords[axis].iter_mut() {
                *c += h;
            }
            for c in down.coords[axis].iter_mut() {
                *c -= h;
            }
            let b_up = background(&up).unwrap();
            let b_down = background(&down).unwrap();
            let (n1, n2, n3) = b_up.dims();
            for k in 0..n3 {
                for i in 0..n1 {
                    for j in 0..n2 {
                        let fd = (b_up.at(i, j, k) - b_down.at(i, j, k)) / (2.0 * h);
                        let analytic = tensors[axis].at(i, j, k);
                        let denom = fd.abs().max(1.0);
                        assert!(
                            (analytic - fd).abs() / denom <= 1e-5,
                            "axis {axis}: {analytic} vs {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn coordinate_fd_converges_at_second_order() {
        let rep = small_rep((5, 4, 3), (2, 2, 2), 27);
        let tensors = derivative_tensors(&rep).unwrap();
        let err_at = |h: f64| -> f64 {
            let mut up = rep.clone();
            let mut down = rep.clone();
            for c in up.coords[0].iter_mut() {
                *c += h;
            }
            for c in down.coords[0].iter_mut() {
                *c -= h;
            }
            let b_up = background(&up).unwrap();
            let b_down = background(&down).unwrap();
            let mut worst = 0.0f64;
            let (n1, n2, n3) = b_up.dims();
            for k in 0..n3 {
                for i in 0..n1 {
                    for j in 0..n2 {
                        let fd = (b_up.at(i, j, k) - b_down.at(i, j, k)) / (2.0 * h);
                        worst = worst.max((fd - tensors[0].at(i, j, k)).abs());
                    }
                }
            }
            worst
        };
        let e1 = err_at(2e-3);
        let e2 = err_at(1e-3);
        // Central differences: error ratio ~4 when halving h.
        let ratio = e1 / e2.max(1e-300);
        assert!(
            (2.5..6.0).contains(&ratio),
            "expected ~4x error reduction, got {ratio} ({e1} -> {e2})"
        );
    }

    #[test]
    fn f_rank_bound_on_unfoldings() {
        let rep = small_rep((7, 6, 5), (3, 2, 2), 25);
        let b = background(&rep).unwrap();
        let ranks = [3usize, 2, 2];
        for mode in 1..=3 {
            let decomp = svd(&unfold(&b, mode).unwrap()).unwrap();
            let s_max = decomp.s[0];
            for &s in decomp.s.iter().skip(ranks[mode - 1]) {
                assert!(
                    s <= 1e-8 * s_max,
                    "mode {mode}: singular value {s} above rank bound"
                );
            }
        }
    }

    #[test]
    fn discrete_tv_closed_forms_and_loop_oracle() {
        let constant = Tensor3::from_fn((3, 4, 5), |_, _, _| 0.7);
        assert_eq!(discrete_3dtv(&constant), 0.0);

        let two = Tensor3::from_vec((1, 2, 1), vec![0.0, 1.0]).unwrap();
        assert_eq!(discrete_3dtv(&two), 1.0);

        let mut rng = StdRng::seed_from_u64(5);
        let t = Tensor3::from_fn((3, 3, 3), |_, _, _| rng.gen_range(-1.0f64..1.0));
        // Naive triple-loop reference.
        let mut expect = 0.0;
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    if i > 0 {
                        expect += (t.at(i, j, k) - t.at(i - 1, j, k)).abs();
                    }
                    if j > 0 {
                        expect += (t.at(i, j, k) - t.at(i, j - 1, k)).abs();
                    }
                    if k > 0 {
                        expect += (t.at(i, j, k) - t.at(i, j, k - 1)).abs();
                    }
                }
            }
        }
        assert!((discrete_3dtv(&t) - expect).abs() < 1e-12);
    }

    #[test]
    fn difference_matrix_reproduces_axis_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let t = Tensor3::from_fn((4, 3, 2), |_, _, _| rng.gen_range(-1.0f64..1.0));
        let mut total = 0.0;
        for (mode, n) in [(1usize, 4usize), (2, 3), (3, 2)] {
            let d = difference_matrix::<f64>(n);
            let diff = crate::tensor3::mode_product(&t, &d, mode).unwrap();
            total += diff.abs_sum();
        }
        assert!((total - discrete_3dtv(&t)).abs() < 1e-12);
    }

    #[test]
    fn neural_and_discrete_tv_agree_on_smooth_example() {
        // A smooth band-limited representation: small first-layer
        // weights keep the background slowly varying, so the discrete
        // differences approximate grid-spacing times the derivative.
        let dims = (33, 33, 17);
        let ranks = (2, 2, 2);
        let mut rng = StdRng::seed_from_u64(31);
        let core = Tensor3::from_fn(ranks, |_, _, _| rng.gen_range(-0.5..0.5));
        let nets = [
            init_network(dims.0, ranks.0, 2, 1.2, Activation::Sine, 1.0, 41).unwrap(),
            init_network(dims.1, ranks.1, 2, 1.2, Activation::Sine, 1.0, 42).unwrap(),
            init_network(dims.2, ranks.2, 2, 1.2, Activation::Sine, 1.0, 43).unwrap(),
        ];
        let coords = [
            make_coordinates(dims.0).unwrap(),
            make_coordinates(dims.1).unwrap(),
            make_coordinates(dims.2).unwrap(),
        ];
        let rep = TuckerRepresentation::new(core, nets, coords).unwrap();
        let tensors = derivative_tensors(&rep).unwrap();
        let b = background(&rep).unwrap();

        let spacing = |n: usize| 2.0 / (n as f64 - 1.0);
        let dims_arr = [dims.0, dims.1, dims.2];
        for (axis, mode) in [(0usize, 1usize), (1, 2), (2, 3)] {
            let d = difference_matrix::<f64>(dims_arr[axis]);
            let discrete = crate::tensor3::mode_product(&b, &d, mode).unwrap().abs_sum();
            let neural_scaled = tensors[axis].abs_sum() * spacing(dims_arr[axis]);
            let rel = (discrete - neural_scaled).abs() / neural_scaled.max(1e-12);
            assert!(
                rel <= 0.10,
                "axis {axis}: discrete {discrete} vs scaled neural {neural_scaled} (rel {rel})"
            );
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let dims = (7, 6, 5);
        let ranks = (3, 2, 2);
        let rep = small_rep(dims, ranks, 26);
        assert_eq!(
            rep.parameter_count(),
            parameter_count_closed_form(dims, ranks, 2)
        );
    }
}
