//! The separation loop: assemble the loss graph, run Adam, post-process
//! the residual into detection masks.
//!
//! Per iteration the loss is rebuilt as a fresh graph over the current
//! parameters (core tensor plus all factor-network weights):
//!
//! ```text
//! B     = core ×₁ F_h ×₂ F_w ×₃ F_t        factor chains built in-graph
//! T     = ST_{λ/2}(D - B)                   (or plain D - B)
//! L     = L_bg(B) + ‖T‖₁ + φ·Ψ(B)
//! ```
//!
//! `L_bg` is the per-frame nuclear-norm sum (default) or the squared
//! Frobenius fit residual; `Ψ` is the neural TV built from the analytic
//! derivative chains (default), its spatial-only variant, the discrete
//! backward-difference TV, or absent. Gradients flow through the
//! soft-threshold outside its dead zone unless `detach_target` is set.
//!
//! After the last iteration the target map is `|T|` min-max normalized,
//! and masks come from the per-sequence adaptive threshold
//! `τ = min(1, μ + k_σ·σ)`.

use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamConfig, AdamState, Graph, NodeId, Parameter, UnaryKind, Value};
use crate::error::{Error, Result};
use crate::lrtf::{
    self, difference_matrix, make_coordinates, Activation, FactorNetwork, TuckerRepresentation,
    TvConfig, TvMode,
};
use crate::scalar::Scalar;
use crate::tensor3::{self, MaskTensor, Matrix, Tensor3};

/// How the target tensor is formed from the fit residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// `T = ST_{λ/2}(D - B)`.
    SoftThreshold,
    /// `T = D - B`, no thresholding.
    Subtract,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" => Ok(TargetMode::SoftThreshold),
            "subtract" => Ok(TargetMode::Subtract),
            other => Err(Error::usage(format!("unknown target mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMode::SoftThreshold => "st",
            TargetMode::Subtract => "subtract",
        })
    }
}

/// Which sub-loss constrains the background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundLoss {
    /// Sum of per-frame nuclear norms.
    Nuclear,
    /// `‖D - B - T‖_F²`.
    Mse,
}

impl std::str::FromStr for BackgroundLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nuc" => Ok(BackgroundLoss::Nuclear),
            "mse" => Ok(BackgroundLoss::Mse),
            other => Err(Error::usage(format!("unknown background loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for BackgroundLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackgroundLoss::Nuclear => "nuc",
            BackgroundLoss::Mse => "mse",
        })
    }
}

/// All solver hyperparameters and ablation switches.
#[derive(Debug, Clone)]
pub struct SolverConfig<T> {
    /// Target trade-off; the soft-threshold level is `lambda / 2`.
    pub lambda: T,
    /// TV loss weight.
    pub phi: T,
    /// Temporal TV weight.
    pub kappa: T,
    /// Rank divisor: `r_i = ceil(n_i / rank_divisor)`.
    pub rank_divisor: usize,
    /// Iteration cap.
    pub max_iterations: usize,
    pub learning_rate: T,
    pub weight_decay: T,
    /// Factor-network depth (`depth + 1` weight matrices per net).
    pub depth: usize,
    /// First-layer init range.
    pub init_scale: f64,
    /// Frequency multiplier inside the activation.
    pub omega0: f64,
    /// Added to every grid coordinate before the factor networks see it.
    /// Bias-free sine networks are exactly odd in their input, so on the
    /// symmetric `[-1,1]` grid they can only represent zero-mean
    /// backgrounds; the default offset breaks that symmetry while
    /// keeping the grid spacing. Zero restores the symmetric grid.
    pub coordinate_offset: f64,
    /// Core entries start uniform in `±core_init_range`.
    pub core_init_range: f64,
    pub activation: Activation,
    pub tv_mode: TvMode,
    pub target_mode: TargetMode,
    pub background_loss: BackgroundLoss,
    /// Block gradients through the target tensor.
    pub detach_target: bool,
    /// Moving-average window for the convergence test.
    pub convergence_window: usize,
    /// Relative moving-average change below which the loop stops;
    /// `0` disables the test and all `max_iterations` run.
    pub convergence_tolerance: f64,
    /// Adaptive-threshold multiplier `k_σ`.
    pub threshold_sigma: T,
    pub seed: u64,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            lambda: T::from_f64_lossy(0.2),
            phi: T::from_f64_lossy(5e-5),
            kappa: T::from_f64_lossy(100.0),
            rank_divisor: 4,
            max_iterations: 2000,
            learning_rate: T::from_f64_lossy(5e-4),
            weight_decay: T::from_f64_lossy(0.01),
            depth: 2,
            init_scale: 5.0,
            omega0: 1.0,
            coordinate_offset: 2.0,
            core_init_range: 0.1,
            activation: Activation::Sine,
            tv_mode: TvMode::Neural3d,
            target_mode: TargetMode::SoftThreshold,
            background_loss: BackgroundLoss::Nuclear,
            detach_target: false,
            convergence_window: 50,
            convergence_tolerance: 0.0,
            threshold_sigma: T::from_f64_lossy(3.0),
            seed: 0,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= T::zero() {
            return Err(Error::usage("lambda must be positive"));
        }
        if self.phi < T::zero() || self.kappa < T::zero() {
            return Err(Error::usage("phi and kappa must be nonnegative"));
        }
        if self.rank_divisor < 1 {
            return Err(Error::usage("rank divisor must be >= 1"));
        }
        if self.max_iterations < 1 {
            return Err(Error::usage("iteration cap must be >= 1"));
        }
        if self.learning_rate <= T::zero() {
            return Err(Error::usage("learning rate must be positive"));
        }
        if self.depth < 1 {
            return Err(Error::usage("depth must be >= 1"));
        }
        if self.threshold_sigma < T::zero() {
            return Err(Error::usage("threshold multiplier must be nonnegative"));
        }
        Ok(())
    }

    /// `r_i = ceil(n_i / rank_divisor)`.
    pub fn ranks_for(&self, dims: (usize, usize, usize)) -> (usize, usize, usize) {
        let r = |n: usize| n.div_ceil(self.rank_divisor);
        (r(dims.0), r(dims.1), r(dims.2))
    }

    /// Learnable parameter count for an input of the given dims.
    pub fn parameter_count(&self, dims: (usize, usize, usize)) -> usize {
        lrtf::parameter_count_closed_form(dims, self.ranks_for(dims), self.depth)
    }
}

fn solver_coordinates<T: Scalar>(n: usize, offset: f64) -> Result<Vec<T>> {
    let shift = T::from_f64_lossy(offset);
    let base: Vec<T> = make_coordinates(n)?;
    Ok(base.into_iter().map(|c| c + shift).collect())
}

/// Elementwise `sgn(x) · max(|x| - v, 0)`.
pub fn soft_threshold<T: Scalar>(x: &Tensor3<T>, level: T) -> Result<Tensor3<T>> {
    if level < T::zero() {
        return Err(Error::usage("soft-threshold level must be nonnegative"));
    }
    Ok(x.map(|v| v.signum() * (v.abs() - level).max(T::zero())))
}

/// Sum of per-frame nuclear norms.
pub fn loss_nuclear<T: Scalar>(b: &Tensor3<T>) -> Result<T> {
    let mut total = T::zero();
    for k in 0..b.dims().2 {
        total = total + tensor3::nuclear_norm(&b.frame(k))?;
    }
    Ok(total)
}

/// Entrywise l1 norm.
pub fn loss_target<T: Scalar>(t: &Tensor3<T>) -> T {
    t.abs_sum()
}

/// Per-sequence adaptive threshold `τ = min(1, μ + k_σ·σ)`; an all-zero
/// map yields all-zero masks.
pub fn adaptive_threshold<T: Scalar>(t: &Tensor3<T>, k_sigma: T) -> Result<MaskTensor> {
    if t.min_value() < T::zero() || t.max_value() > T::one() {
        return Err(Error::usage("adaptive threshold expects a map normalized to [0,1]"));
    }
    let dims = t.dims();
    if t.max_value() == T::zero() {
        return Ok(MaskTensor::zeros(dims));
    }
    let mean = t.mean();
    let var = t.map(|v| (v - mean) * (v - mean)).mean();
    let tau = (mean + k_sigma * var.sqrt()).min(T::one());
    // Absorb summation roundoff so a constant map selects everything.
    let tau = tau - tau.abs().max(T::one()) * T::epsilon() * T::from_f64_lossy(64.0);
    Ok(MaskTensor::from_fn(dims, |i, j, k| t.at(i, j, k) >= tau))
}

/// Per-iteration loss components; `tv` already includes the `φ` weight
/// so `total = background + target + tv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord<T> {
    pub background: T,
    pub target: T,
    pub tv: T,
    pub total: T,
}

/// Output of one separation run.
#[derive(Debug, Clone)]
pub struct SeparationResult<T> {
    pub background: Tensor3<T>,
    /// Normalized nonnegative target magnitudes in `[0,1]`.
    pub target: Tensor3<T>,
    pub masks: MaskTensor,
    pub loss_history: Vec<LossRecord<T>>,
    pub iterations: usize,
    pub wall_time: Duration,
    /// Learnable values in the fitted representation.
    pub parameter_count: usize,
}

/// Canonical parameter ordering: core first, then each axis's weights.
fn parameter_names(depth: usize) -> Vec<String> {
    let mut names = vec!["core".to_string()];
    for axis in ["h", "w", "t"] {
        for layer in 0..=depth {
            names.push(format!("net_{axis}.w{layer}"));
        }
    }
    names
}

fn init_parameters<T: Scalar>(
    dims: (usize, usize, usize),
    cfg: &SolverConfig<T>,
) -> Result<Vec<Parameter<T>>> {
    let ranks = cfg.ranks_for(dims);
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let range = cfg.core_init_range;
    let core = if range > 0.0 {
        Tensor3::from_fn(ranks, |_, _, _| T::from_f64_lossy(master.gen_range(-range..range)))
    } else {
        Tensor3::zeros(ranks)
    };
    let axis_dims = [dims.0, dims.1, dims.2];
    let axis_ranks = [ranks.0, ranks.1, ranks.2];
    let mut params = vec![Parameter::new("core", Value::Tensor(core))];
    let names = parameter_names(cfg.depth);
    let mut name_iter = names.into_iter().skip(1);
    for axis in 0..3 {
        let net_seed: u64 = master.gen();
        let net: FactorNetwork<T> = lrtf::init_network(
            axis_dims[axis],
            axis_ranks[axis],
            cfg.depth,
            cfg.init_scale,
            cfg.activation,
            cfg.omega0,
            net_seed,
        )?;
        for w in net.weights() {
            params.push(Parameter::new(
                name_iter.next().expect("name list matches layout"),
                Value::Matrix(w.clone()),
            ));
        }
    }
    Ok(params)
}

/// Rebuilds the representation from the flat parameter list.
fn representation_from_parameters<T: Scalar>(
    dims: (usize, usize, usize),
    cfg: &SolverConfig<T>,
    params: &[Parameter<T>],
) -> Result<TuckerRepresentation<T>> {
    let core = params[0]
        .value
        .tensor()
        .ok_or_else(|| Error::usage("parameter 0 must be the core tensor"))?
        .clone();
    let per_net = cfg.depth + 1;
    let mut nets = Vec::with_capacity(3);
    for axis in 0..3 {
        let start = 1 + axis * per_net;
        let weights: Vec<Matrix<T>> = params[start..start + per_net]
            .iter()
            .map(|p| p.value.matrix().expect("net parameters are matrices").clone())
            .collect();
        nets.push(FactorNetwork::from_weights(
            weights,
            cfg.activation,
            T::from_f64_lossy(cfg.omega0),
        )?);
    }
    let nets: [FactorNetwork<T>; 3] = nets.try_into().expect("exactly three nets");
    let coords = [
        solver_coordinates(dims.0, cfg.coordinate_offset)?,
        solver_coordinates(dims.1, cfg.coordinate_offset)?,
        solver_coordinates(dims.2, cfg.coordinate_offset)?,
    ];
    TuckerRepresentation::new(core, nets, coords)
}

/// Node ids of interest in one iteration's graph.
struct LossGraph<T> {
    graph: Graph<T>,
    leaves: Vec<NodeId>,
    background_loss: NodeId,
    target_loss: NodeId,
    tv_loss: NodeId,
    total: NodeId,
}

/// `σ(ω₀ z)` in-graph.
fn activation_node<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    activation: Activation,
    omega0: T,
) -> Result<NodeId> {
    let zs = if omega0 == T::one() { z } else { g.scale(z, omega0) };
    Ok(match activation {
        Activation::Sine => g.sin(zs),
        Activation::Tanh => g.unary(zs, UnaryKind::Tanh),
        Activation::Relu => {
            let gate = g.unary(zs, UnaryKind::Step);
            g.mul(zs, gate)?
        }
        Activation::LeakyRelu => {
            let gate = leaky_gate(g, zs)?;
            g.mul(zs, gate)?
        }
    })
}

/// `step(z) + slope·(1 - step(z))` as a graph value.
fn leaky_gate<T: Scalar>(g: &mut Graph<T>, zs: NodeId) -> Result<NodeId> {
    let slope = T::from_f64_lossy(lrtf::LEAKY_SLOPE);
    let step = g.unary(zs, UnaryKind::Step);
    let scaled = g.scale(step, T::one() - slope);
    let ones = g.constant(g.value(zs).map(|_| slope));
    g.add(scaled, ones)
}

/// `d/dz σ(ω₀ z) = ω₀ σ'(ω₀ z)` in-graph.
fn activation_gate_node<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    activation: Activation,
    omega0: T,
) -> Result<NodeId> {
    let zs = if omega0 == T::one() { z } else { g.scale(z, omega0) };
    let gate = match activation {
        Activation::Sine => g.cos(zs),
        Activation::Relu => g.unary(zs, UnaryKind::Step),
        Activation::LeakyRelu => leaky_gate(g, zs)?,
        Activation::Tanh => {
            let t = g.unary(zs, UnaryKind::Tanh);
            let sq = g.mul(t, t)?;
            let neg = g.scale(sq, -T::one());
            let ones = g.constant(g.value(zs).map(|_| T::one()));
            g.add(ones, neg)?
        }
    };
    Ok(if omega0 == T::one() {
        gate
    } else {
        g.scale(gate, omega0)
    })
}

/// Forward (and, when needed, derivative) factor chains for one axis.
fn factor_chain<T: Scalar>(
    g: &mut Graph<T>,
    weight_leaves: &[NodeId],
    coords: &[T],
    activation: Activation,
    omega0: T,
    with_derivative: bool,
) -> Result<(NodeId, Option<NodeId>)> {
    let coords_col = g.constant(Value::Matrix(Matrix::column(coords)));
    let mut z = g.matmul(coords_col, weight_leaves[0])?;
    let mut pre_activations = vec![z];
    for &w in &weight_leaves[1..] {
        let a = activation_node(g, z, activation, omega0)?;
        z = g.matmul(a, w)?;
        pre_activations.push(z);
    }
    let forward = z;

    let derivative = if with_derivative {
        let ones = g.constant(Value::Matrix(Matrix::from_fn(coords.len(), 1, |_, _| T::one())));
        let mut d = g.matmul(ones, weight_leaves[0])?;
        for (&w, &z_prev) in weight_leaves[1..].iter().zip(pre_activations.iter()) {
            let gate = activation_gate_node(g, z_prev, activation, omega0)?;
            let gated = g.mul(gate, d)?;
            d = g.matmul(gated, w)?;
        }
        Some(d)
    } else {
        None
    };
    Ok((forward, derivative))
}

fn tucker_chain<T: Scalar>(
    g: &mut Graph<T>,
    core: NodeId,
    factors: [NodeId; 3],
) -> Result<NodeId> {
    let s1 = g.mode_product(core, factors[0], 1)?;
    let s2 = g.mode_product(s1, factors[1], 2)?;
    g.mode_product(s2, factors[2], 3)
}

/// Builds the full loss graph over the current parameters.
fn build_loss<T: Scalar>(
    observation: &Tensor3<T>,
    params: &[Parameter<T>],
    coords: &[Vec<T>; 3],
    cfg: &SolverConfig<T>,
) -> Result<LossGraph<T>> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = params
        .iter()
        .map(|p| g.leaf(p.value.clone(), true))
        .collect();
    let core = leaves[0];
    let per_net = cfg.depth + 1;
    let omega0 = T::from_f64_lossy(cfg.omega0);
    let needs_neural_derivatives =
        matches!(cfg.tv_mode, TvMode::Neural3d | TvMode::NeuralSpatial);

    let mut forwards = Vec::with_capacity(3);
    let mut derivatives = Vec::with_capacity(3);
    for axis in 0..3 {
        let start = 1 + axis * per_net;
        let (f, d) = factor_chain(
            &mut g,
            &leaves[start..start + per_net],
            &coords[axis],
            cfg.activation,
            omega0,
            needs_neural_derivatives,
        )?;
        forwards.push(f);
        derivatives.push(d);
    }
    let factors = [forwards[0], forwards[1], forwards[2]];
    let background = tucker_chain(&mut g, core, factors)?;

    let d_const = g.constant(Value::Tensor(observation.clone()));
    let neg_b = g.scale(background, -T::one());
    let residual = g.add(d_const, neg_b)?;
    let two = T::one() + T::one();
    let target = match cfg.target_mode {
        TargetMode::SoftThreshold => g.soft_threshold(residual, cfg.lambda / two)?,
        TargetMode::Subtract => residual,
    };
    let target_used = if cfg.detach_target {
        g.constant(g.value(target).clone())
    } else {
        target
    };

    let target_loss = g.abs_sum(target_used)?;

    let background_loss = match cfg.background_loss {
        BackgroundLoss::Nuclear => g.nuclear_norm_slices(background)?,
        BackgroundLoss::Mse => {
            let neg_t = g.scale(target_used, -T::one());
            let fit = g.add(residual, neg_t)?;
            g.squared_frobenius(fit)?
        }
    };

    let psi = match cfg.tv_mode {
        TvMode::Neural3d | TvMode::NeuralSpatial => {
            let dh = derivatives[0].expect("derivative chain built");
            let dw = derivatives[1].expect("derivative chain built");
            let bh = tucker_chain(&mut g, core, [dh, forwards[1], forwards[2]])?;
            let bw = tucker_chain(&mut g, core, [forwards[0], dw, forwards[2]])?;
            let ah = g.abs_sum(bh)?;
            let aw = g.abs_sum(bw)?;
            let spatial = g.add(ah, aw)?;
            if cfg.tv_mode == TvMode::Neural3d {
                let dt = derivatives[2].expect("derivative chain built");
                let bt = tucker_chain(&mut g, core, [forwards[0], forwards[1], dt])?;
                let at = g.abs_sum(bt)?;
                let weighted = g.scale(at, cfg.kappa);
                g.add(spatial, weighted)?
            } else {
                spatial
            }
        }
        TvMode::Discrete3d => {
            let dims = observation.dims();
            let mut parts = Vec::with_capacity(3);
            for (mode, n) in [(1usize, dims.0), (2, dims.1), (3, dims.2)] {
                let diff = g.constant(Value::Matrix(difference_matrix(n)));
                let dtensor = g.mode_product(background, diff, mode)?;
                parts.push(g.abs_sum(dtensor)?);
            }
            let hw = g.add(parts[0], parts[1])?;
            g.add(hw, parts[2])?
        }
        TvMode::None => g.scalar_constant(T::zero()),
    };
    let tv_loss = g.scale(psi, cfg.phi);

    let partial = g.add(background_loss, target_loss)?;
    let total = g.add(partial, tv_loss)?;

    Ok(LossGraph {
        graph: g,
        leaves,
        background_loss,
        target_loss,
        tv_loss,
        total,
    })
}

/// One-shot loss evaluation; exposed for gradient checking.
pub fn loss_total<T: Scalar>(
    observation: &Tensor3<T>,
    params: &[Parameter<T>],
    cfg: &SolverConfig<T>,
) -> Result<T> {
    let dims = observation.dims();
    let coords = [
        solver_coordinates(dims.0, cfg.coordinate_offset)?,
        solver_coordinates(dims.1, cfg.coordinate_offset)?,
        solver_coordinates(dims.2, cfg.coordinate_offset)?,
    ];
    let lg = build_loss(observation, params, &coords, cfg)?;
    Ok(lg
        .graph
        .evaluate(lg.total)?
        .scalar()
        .expect("loss root is scalar"))
}

/// Loss gradient w.r.t. every parameter, in parameter order.
pub fn loss_gradients<T: Scalar>(
    observation: &Tensor3<T>,
    params: &[Parameter<T>],
    cfg: &SolverConfig<T>,
) -> Result<Vec<Value<T>>> {
    let dims = observation.dims();
    let coords = [
        solver_coordinates(dims.0, cfg.coordinate_offset)?,
        solver_coordinates(dims.1, cfg.coordinate_offset)?,
        solver_coordinates(dims.2, cfg.coordinate_offset)?,
    ];
    let lg = build_loss(observation, params, &coords, cfg)?;
    let grads = lg.graph.backward(lg.total)?;
    Ok(lg
        .leaves
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| params[i].value.zeros_like())
        })
        .collect())
}

/// Fresh seeded parameters for an observation of the given dims;
/// exposed for gradient checking and the census test.
pub fn initial_parameters<T: Scalar>(
    dims: (usize, usize, usize),
    cfg: &SolverConfig<T>,
) -> Result<Vec<Parameter<T>>> {
    cfg.validate()?;
    init_parameters(dims, cfg)
}

/// Min-max normalization to `[0,1]`. A constant map collapses to all
/// zeros (if zero) or all ones (if positive).
fn normalize_unit<T: Scalar>(t: &Tensor3<T>) -> Tensor3<T> {
    let min = t.min_value();
    let max = t.max_value();
    if max > min {
        let span = max - min;
        t.map(|v| (v - min) / span)
    } else if max > T::zero() {
        t.map(|_| T::one())
    } else {
        t.map(|_| T::zero())
    }
}

fn moving_average<T: Scalar>(history: &[LossRecord<T>], window: usize, back: usize) -> T {
    let len = history.len();
    let slice = &history[len - back - window..len - back];
    let sum = slice.iter().fold(T::zero(), |acc, r| acc + r.total);
    sum / T::from_f64_lossy(window as f64)
}

/// Runs the full separation on a normalized observation.
pub fn run<T: Scalar>(observation: &Tensor3<T>, cfg: &SolverConfig<T>) -> Result<SeparationResult<T>> {
    cfg.validate()?;
    let dims = observation.dims();
    if dims.0 < 2 || dims.1 < 2 || dims.2 < 2 {
        return Err(Error::usage(format!(
            "observation dims must all be >= 2, got {dims:?}"
        )));
    }
    if !observation.all_finite() {
        return Err(Error::non_finite("observation contains non-finite values"));
    }
    if observation.min_value() < T::zero() || observation.max_value() > T::one() {
        return Err(Error::usage("observation must be normalized to [0,1]"));
    }

    let start = Instant::now();
    let mut params = init_parameters(dims, cfg)?;
    let mut adam = AdamState::new(
        &params,
        AdamConfig::new(cfg.learning_rate, cfg.weight_decay),
    );
    let coords = [
        solver_coordinates(dims.0, cfg.coordinate_offset)?,
        solver_coordinates(dims.1, cfg.coordinate_offset)?,
        solver_coordinates(dims.2, cfg.coordinate_offset)?,
    ];

    let mut history: Vec<LossRecord<T>> = Vec::with_capacity(cfg.max_iterations);
    for iteration in 0..cfg.max_iterations {
        let step = (|| -> Result<LossRecord<T>> {
            let lg = build_loss(observation, &params, &coords, cfg)?;
            let record = LossRecord {
                background: lg.graph.value(lg.background_loss).scalar().unwrap(),
                target: lg.graph.value(lg.target_loss).scalar().unwrap(),
                tv: lg.graph.value(lg.tv_loss).scalar().unwrap(),
                total: lg.graph.evaluate(lg.total)?.scalar().unwrap(),
            };
            let grads = lg.graph.backward(lg.total)?;
            let ordered: Vec<&Value<T>> = lg
                .leaves
                .iter()
                .map(|id| grads.get(*id).expect("every parameter leaf has a gradient"))
                .collect();
            adam.step(&mut params, &ordered)?;
            Ok(record)
        })();
        let record = step.map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::non_finite(format!("iteration {iteration}: {msg}"))
            }
            other => other,
        })?;
        history.push(record);

        let window = cfg.convergence_window;
        if cfg.convergence_tolerance > 0.0 && window > 0 && history.len() >= 2 * window {
            let recent = moving_average(&history, window, 0);
            let previous = moving_average(&history, window, window);
            let denom = previous.abs().max(T::from_f64_lossy(1e-30));
            let change = ((recent - previous) / denom).abs();
            if change < T::from_f64_lossy(cfg.convergence_tolerance) {
                break;
            }
        }
    }

    let rep = representation_from_parameters(dims, cfg, &params)?;
    let parameter_count = rep.parameter_count();
    let background = lrtf::background(&rep)?;
    let residual = observation.sub(&background)?;
    let two = T::one() + T::one();
    let raw_target = match cfg.target_mode {
        TargetMode::SoftThreshold => soft_threshold(&residual, cfg.lambda / two)?,
        TargetMode::Subtract => residual,
    };
    let target = normalize_unit(&raw_target.map(|v| v.abs()));
    let masks = adaptive_threshold(&target, cfg.threshold_sigma)?;

    Ok(SeparationResult {
        background,
        target,
        masks,
        iterations: history.len(),
        loss_history: history,
        wall_time: start.elapsed(),
        parameter_count,
    })
}

/// TV settings implied by a solver config.
pub fn tv_config_of<T: Scalar>(cfg: &SolverConfig<T>) -> Result<TvConfig<T>> {
    TvConfig::new(cfg.tv_mode, cfg.kappa, cfg.phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    #[test]
    fn soft_threshold_closed_forms() {
        let x = Tensor3::from_vec((1, 2, 1), vec![0.5f64, -0.05]).unwrap();
        let st = soft_threshold(&x, 0.1).unwrap();
        assert!((st.at(0, 0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(st.at(0, 1, 0), 0.0);

        let id = soft_threshold(&x, 0.0).unwrap();
        assert_eq!(id, x);

        assert!(soft_threshold(&x, -0.1).is_err());
    }

    #[test]
    fn soft_threshold_is_prox_of_l1() {
        // ST_v(x) minimizes 0.5 (z-x)^2 + v |z|; grid search oracle.
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let v: f64 = rng.gen_range(0.0..1.0);
            let t = Tensor3::from_vec((1, 1, 1), vec![x]).unwrap();
            let st = soft_threshold(&t, v).unwrap().at(0, 0, 0);
            let mut best_z = -3.0;
            let mut best = f64::INFINITY;
            let mut z = -3.0;
            while z <= 3.0 {
                let obj = 0.5 * (z - x) * (z - x) + v * z.abs();
                if obj < best {
                    best = obj;
                    best_z = z;
                }
                z += 1e-4;
            }
            assert!(
                (st - best_z).abs() <= 1e-4 + 1e-12,
                "x={x} v={v}: prox {st} vs grid {best_z}"
            );
        }
    }

    #[test]
    fn loss_nuclear_diagonal_slices() {
        assert_eq!(loss_nuclear(&Tensor3::<f64>::zeros((3, 3, 2))).unwrap(), 0.0);
        let t = Tensor3::from_fn((4, 4, 2), |i, j, _| {
            if i == j && i < 3 {
                (3 - i) as f64
            } else {
                0.0
            }
        });
        assert!((loss_nuclear(&t).unwrap() - 12.0).abs() < 1e-10);
    }

    #[test]
    fn loss_nuclear_matches_per_slice_svd() {
        let mut rng = StdRng::seed_from_u64(8);
        let t = Tensor3::from_fn((6, 5, 4), |_, _, _| rng.gen_range(-1.0f64..1.0));
        let mut expect = 0.0;
        for k in 0..4 {
            let decomp = tensor3::svd(&t.frame(k)).unwrap();
            expect += decomp.s.iter().sum::<f64>();
        }
        assert!((loss_nuclear(&t).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn loss_target_is_l1() {
        let t = Tensor3::from_vec((1, 2, 1), vec![1.0, -2.0]).unwrap();
        assert_eq!(loss_target(&t), 3.0);
        assert_eq!(loss_target(&Tensor3::<f64>::zeros((2, 2, 2))), 0.0);
    }

    #[test]
    fn adaptive_threshold_edge_cases() {
        let zero = Tensor3::<f64>::zeros((5, 5, 4));
        let m = adaptive_threshold(&zero, 3.0).unwrap();
        assert_eq!(m.count_ones(), 0);

        // Single hot pixel among 100: mu + 3 sigma stays below 1.
        let mut spike = Tensor3::<f64>::zeros((10, 10, 1));
        *spike.at_mut(4, 7, 0) = 1.0;
        let m = adaptive_threshold(&spike, 3.0).unwrap();
        assert_eq!(m.count_ones(), 1);
        assert!(m.at(4, 7, 0));

        // Constant positive map: sigma = 0, tau = c, everything set.
        let constant = Tensor3::from_fn((4, 4, 2), |_, _, _| 0.3);
        let m = adaptive_threshold(&constant, 3.0).unwrap();
        assert_eq!(m.count_ones(), 32);

        // Out-of-range map is a usage error.
        let bad = Tensor3::from_vec((1, 1, 1), vec![1.5]).unwrap();
        assert!(adaptive_threshold(&bad, 3.0).is_err());
    }

    #[test]
    fn adaptive_threshold_monotone_in_sigma() {
        let mut rng = StdRng::seed_from_u64(9);
        let t = normalize_unit(&Tensor3::from_fn((8, 8, 3), |_, _, _| rng.gen_range(0.0f64..1.0)));
        let mut prev = usize::MAX;
        for k in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0] {
            let count = adaptive_threshold(&t, k).unwrap().count_ones();
            assert!(count <= prev, "k_sigma={k} added pixels");
            prev = count;
        }
    }

    fn tiny_config() -> SolverConfig<f64> {
        SolverConfig {
            max_iterations: 40,
            seed: 5,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn loss_total_zero_observation_zero_core_no_tv() {
        let dims = (4, 4, 3);
        let mut cfg = tiny_config();
        cfg.tv_mode = TvMode::None;
        cfg.core_init_range = 0.0; // zero core
        let observation = Tensor3::<f64>::zeros(dims);
        let params = initial_parameters(dims, &cfg).unwrap();
        let total = loss_total(&observation, &params, &cfg).unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn loss_total_assembles_components() {
        // With tv none and st target, L = loss_nuclear(B) + l1(ST(D-B)).
        let dims = (5, 4, 3);
        let mut cfg = tiny_config();
        cfg.tv_mode = TvMode::None;
        let mut rng = StdRng::seed_from_u64(77);
        let observation = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(0.0f64..1.0));
        let params = initial_parameters(dims, &cfg).unwrap();
        let total = loss_total(&observation, &params, &cfg).unwrap();

        let rep = representation_from_parameters(dims, &cfg, &params).unwrap();
        let b = lrtf::background(&rep).unwrap();
        let st = soft_threshold(&observation.sub(&b).unwrap(), 0.1).unwrap();
        let expect = loss_nuclear(&b).unwrap() + loss_target(&st);
        assert!((total - expect).abs() <= 1e-9 * expect.max(1.0));
    }

    #[test]
    fn run_rejects_bad_inputs() {
        let cfg = tiny_config();
        let small = Tensor3::<f64>::zeros((1, 4, 4));
        assert!(run(&small, &cfg).is_err());
        let out_of_range = Tensor3::from_fn((4, 4, 4), |_, _, _| 1.5);
        assert!(run(&out_of_range, &cfg).is_err());
    }

    #[test]
    fn run_is_deterministic_and_in_contract() {
        let dims = (8, 8, 4);
        let mut rng = StdRng::seed_from_u64(3);
        let observation = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(0.2f64..0.6));
        let cfg = tiny_config();
        let a = run(&observation, &cfg).unwrap();
        let b = run(&observation, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.iterations, 40);
        assert_eq!(a.loss_history.len(), a.iterations);
        assert_eq!(a.background.dims(), dims);
        assert_eq!(a.target.dims(), dims);
        assert!(a.target.min_value() >= 0.0 && a.target.max_value() <= 1.0);
        assert_eq!(
            a.parameter_count,
            lrtf::parameter_count_closed_form(dims, cfg.ranks_for(dims), cfg.depth)
        );
    }

    #[test]
    fn run_subtract_mode_preserves_decomposition_identity() {
        let dims = (6, 6, 3);
        let mut rng = StdRng::seed_from_u64(4);
        let observation = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(0.2f64..0.7));
        let mut cfg = tiny_config();
        cfg.target_mode = TargetMode::Subtract;
        cfg.max_iterations = 10;
        let result = run(&observation, &cfg).unwrap();
        // B + (D - B) = D holds exactly by construction; check the
        // stored background against the residual-based target source.
        let residual = observation.sub(&result.background).unwrap();
        let reconstructed = result.background.add(&residual).unwrap();
        for (a, b) in reconstructed.data().iter().zip(observation.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn run_st_mode_residual_bound() {
        // |D - B - T| <= lambda/2 elementwise after thresholding.
        let dims = (6, 6, 3);
        let mut rng = StdRng::seed_from_u64(13);
        let observation = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(0.2f64..0.7));
        let mut cfg = tiny_config();
        cfg.max_iterations = 15;
        let result = run(&observation, &cfg).unwrap();
        let residual = observation.sub(&result.background).unwrap();
        let t = soft_threshold(&residual, cfg.lambda / 2.0).unwrap();
        let leftover = residual.sub(&t).unwrap();
        for &v in leftover.data() {
            assert!(v.abs() <= cfg.lambda / 2.0 + 1e-12);
        }
    }

    #[test]
    fn convergence_test_stops_early_on_flat_loss() {
        let dims = (6, 6, 3);
        let observation = Tensor3::from_fn(dims, |_, _, _| 0.5);
        let mut cfg = tiny_config();
        cfg.max_iterations = 400;
        cfg.convergence_window = 10;
        cfg.convergence_tolerance = 1e-3;
        let result = run(&observation, &cfg).unwrap();
        assert!(result.iterations < 400, "flat loss should converge early");
    }

    #[test]
    fn ranks_round_up() {
        let cfg = SolverConfig::<f64>::default();
        assert_eq!(cfg.ranks_for((64, 64, 20)), (16, 16, 5));
        assert_eq!(cfg.ranks_for((6, 6, 3)), (2, 2, 1));
        assert_eq!(cfg.ranks_for((1, 1, 1)), (1, 1, 1));
    }
}
