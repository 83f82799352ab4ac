//! Seeded self-check suites: gradient correctness against central
//! finite differences, Tucker-algebra exactness, the soft-threshold
//! prox oracle, and the SVD contract. The `check` CLI command runs
//! these and exits nonzero on the first failure.
//!
//! All checks run at `f64` on small fixed-seed instances, so a clean
//! build passes deterministically. A fault can be injected to verify
//! the harness actually detects broken backward rules.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::autograd::{Graph, NodeId, Parameter, Value};
use crate::lrtf::TvMode;
use crate::solver::{self, BackgroundLoss, SolverConfig, TargetMode};
use crate::tensor3::{self, Matrix, Tensor3};

/// Deliberate defects for negative-control tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Flip the sign of the sin primitive's analytic gradient before
    /// comparing against the oracle.
    NegateSinGradient,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Maximum relative error against the finite-difference oracle.
    pub tolerance: f64,
    pub fault: Option<FaultInjection>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            tolerance: 1e-4,
            fault: None,
        }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn from_error(name: &str, max_rel: f64, tol: f64) -> Self {
        CheckReport {
            name: name.to_string(),
            passed: max_rel <= tol,
            detail: format!("max relative error {max_rel:.3e} (tolerance {tol:.0e})"),
        }
    }
}

/// Central finite differences of a scalar function of flat inputs.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut work = x.to_vec();
    for i in 0..x.len() {
        work[i] = x[i] + h;
        let up = f(&work);
        work[i] = x[i] - h;
        let down = f(&work);
        work[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

fn max_rel_error(analytic: &[f64], oracle: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(oracle)
        .map(|(a, o)| (a - o).abs() / o.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// A primitive check is a scalar graph over one flat leaf vector.
struct PrimitiveCase {
    name: &'static str,
    /// Leaf payload shape: (as matrix rows, cols) or a tensor.
    build: fn(&mut Graph<f64>, NodeId) -> NodeId,
    leaf: fn(&[f64]) -> Value<f64>,
    init: fn(&mut StdRng) -> Vec<f64>,
}

fn matrix_leaf_2x3(x: &[f64]) -> Value<f64> {
    Value::Matrix(Matrix::from_vec(2, 3, x.to_vec()).unwrap())
}

fn tensor_leaf_232(x: &[f64]) -> Value<f64> {
    Value::Tensor(Tensor3::from_vec((2, 3, 2), x.to_vec()).unwrap())
}

fn uniform_init(rng: &mut StdRng) -> Vec<f64> {
    (0..6).map(|_| rng.gen_range(-0.9..0.9)).collect()
}

fn uniform_init_12(rng: &mut StdRng) -> Vec<f64> {
    (0..12).map(|_| rng.gen_range(-0.9..0.9)).collect()
}

/// Away from the soft-threshold kink: |x| - v > 1e-3 on both sides.
fn kink_free_init(rng: &mut StdRng) -> Vec<f64> {
    (0..6)
        .map(|_| {
            let mag = rng.gen_range(0.31..0.9); // level is 0.3
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Leaf values with well-separated slice singular values.
fn graded_tensor_init(rng: &mut StdRng) -> Vec<f64> {
    (0..12).map(|_| rng.gen_range(-0.9..0.9)).collect()
}

fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        PrimitiveCase {
            name: "sin",
            build: |g, x| {
                let s = g.sin(x);
                g.sum(s).unwrap()
            },
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
        PrimitiveCase {
            name: "cos",
            build: |g, x| {
                let c = g.cos(x);
                g.sum(c).unwrap()
            },
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
        PrimitiveCase {
            name: "tanh",
            build: |g, x| {
                let t = g.unary(x, crate::autograd::UnaryKind::Tanh);
                g.sum(t).unwrap()
            },
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
        PrimitiveCase {
            name: "matmul",
            build: |g, x| {
                let w = g.constant(Value::Matrix(
                    Matrix::from_vec(3, 2, vec![0.4, -0.9, 1.2, 0.3, -0.5, 0.8]).unwrap(),
                ));
                let m = g.matmul(x, w).unwrap();
                let s = g.sin(m);
                g.sum(s).unwrap()
            },
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
        PrimitiveCase {
            name: "mode_product",
            build: |g, x| {
                let f = g.constant(Value::Matrix(
                    Matrix::from_vec(2, 3, vec![0.7, -0.2, 0.5, 0.1, 0.9, -0.4]).unwrap(),
                ));
                let p = g.mode_product(x, f, 2).unwrap();
                let s = g.sin(p);
                g.sum(s).unwrap()
            },
            leaf: tensor_leaf_232,
            init: uniform_init_12,
        },
        PrimitiveCase {
            name: "add_scale",
            build: |g, x| {
                let y = g.scale(x, -1.7);
                let z = g.add(x, y).unwrap();
                let s = g.sin(z);
                g.sum(s).unwrap()
            },
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
        PrimitiveCase {
            name: "elementwise_mul",
            build: |g, x| {
                let s = g.sin(x);
                let m = g.mul(x, s).unwrap();
                g.sum(m).unwrap()
            },
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
        PrimitiveCase {
            name: "soft_threshold",
            build: |g, x| {
                let st = g.soft_threshold(x, 0.3).unwrap();
                let sq = g.mul(st, st).unwrap();
                g.sum(sq).unwrap()
            },
            leaf: matrix_leaf_2x3,
            init: kink_free_init,
        },
        PrimitiveCase {
            name: "abs_sum",
            build: |g, x| g.abs_sum(x).unwrap(),
            leaf: matrix_leaf_2x3,
            init: kink_free_init, // away from zero
        },
        PrimitiveCase {
            name: "squared_frobenius",
            build: |g, x| g.squared_frobenius(x).unwrap(),
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
        PrimitiveCase {
            name: "nuclear_norm_slices",
            build: |g, x| g.nuclear_norm_slices(x).unwrap(),
            leaf: tensor_leaf_232,
            init: graded_tensor_init,
        },
        PrimitiveCase {
            name: "sum",
            build: |g, x| g.sum(x).unwrap(),
            leaf: matrix_leaf_2x3,
            init: uniform_init,
        },
    ]
}

fn run_primitive_check(case: &PrimitiveCase, opts: &CheckOptions, seed: u64) -> CheckReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let x0 = (case.init)(&mut rng);

    let eval = |x: &[f64]| -> f64 {
        let mut g = Graph::new();
        let leaf = g.leaf((case.leaf)(x), true);
        let root = (case.build)(&mut g, leaf);
        g.value(root).scalar().expect("check roots are scalar")
    };
    let oracle = finite_difference(eval, &x0, 1e-6);

    let mut g = Graph::new();
    let leaf = g.leaf((case.leaf)(&x0), true);
    let root = (case.build)(&mut g, leaf);
    let grads = g.backward(root).expect("backward succeeds on check graphs");
    let mut analytic = grads.get(leaf).unwrap().as_slice().to_vec();

    if case.name == "sin" && opts.fault == Some(FaultInjection::NegateSinGradient) {
        for a in analytic.iter_mut() {
            *a = -*a;
        }
    }

    CheckReport::from_error(
        &format!("gradient-primitives/{}", case.name),
        max_rel_error(&analytic, &oracle),
        opts.tolerance,
    )
}

fn flatten_parameters(params: &[Parameter<f64>]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.value.as_slice().iter().copied())
        .collect()
}

fn write_parameters(params: &mut [Parameter<f64>], flat: &[f64]) {
    let mut offset = 0;
    for p in params.iter_mut() {
        let slice = p.value.as_mut_slice();
        slice.copy_from_slice(&flat[offset..offset + slice.len()]);
        offset += slice.len();
    }
}

/// Full-loss gradient check on a seeded 6x6x3 instance.
fn run_loss_check(name: &str, cfg: &SolverConfig<f64>, tolerance: f64) -> CheckReport {
    let dims = (6, 6, 3);
    let mut rng = StdRng::seed_from_u64(2024);
    let observation = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(0.05..0.95));
    let params = match solver::initial_parameters(dims, cfg) {
        Ok(p) => p,
        Err(e) => {
            return CheckReport {
                name: name.to_string(),
                passed: false,
                detail: format!("setup failed: {e}"),
            }
        }
    };
    let x0 = flatten_parameters(&params);

    let mut work = params.clone();
    let eval = |x: &[f64]| -> f64 {
        write_parameters(&mut work, x);
        solver::loss_total(&observation, &work, cfg).expect("loss evaluates")
    };
    let oracle = finite_difference(eval, &x0, 1e-6);

    let grads = solver::loss_gradients(&observation, &params, cfg).expect("gradients evaluate");
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.as_slice().iter().copied())
        .collect();

    CheckReport::from_error(name, max_rel_error(&analytic, &oracle), tolerance)
}

fn run_tucker_roundtrip() -> CheckReport {
    let mut rng = StdRng::seed_from_u64(11);
    let mut failures = 0usize;
    let mut checked = 0usize;
    for n1 in 1..=4usize {
        for n2 in 1..=4usize {
            for n3 in 1..=4usize {
                let t = Tensor3::from_fn((n1, n2, n3), |_, _, _| rng.gen_range(-1.0f64..1.0));
                for mode in 1..=3 {
                    checked += 1;
                    let back = tensor3::fold(&tensor3::unfold(&t, mode).unwrap(), mode, t.dims())
                        .unwrap();
                    if back != t {
                        failures += 1;
                    }
                }
            }
        }
    }
    CheckReport {
        name: "tucker-roundtrip".to_string(),
        passed: failures == 0,
        detail: format!("{checked} fold/unfold roundtrips, {failures} failures"),
    }
}

fn run_tucker_exactness() -> CheckReport {
    let mut rng = StdRng::seed_from_u64(12);
    let core = Tensor3::from_fn((2, 2, 2), |_, _, _| rng.gen_range(-1.0f64..1.0));
    let f1 = Matrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
    let f2 = Matrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
    let f3 = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
    let t = tensor3::tucker_reconstruct(&core, &f1, &f2, &f3).unwrap();
    let mut worst = 0.0f64;
    for i in 0..5 {
        for j in 0..4 {
            for k in 0..3 {
                let mut expect = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            expect += core.at(a, b, c) * f1.at(i, a) * f2.at(j, b) * f3.at(k, c);
                        }
                    }
                }
                worst = worst.max((t.at(i, j, k) - expect).abs());
            }
        }
    }
    CheckReport {
        name: "tucker-exactness".to_string(),
        passed: worst <= 1e-12,
        detail: format!("max deviation from definitional sum {worst:.3e}"),
    }
}

fn run_prox_oracle() -> CheckReport {
    let mut rng = StdRng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: f64 = rng.gen_range(-2.0..2.0);
        let v: f64 = rng.gen_range(0.0..1.0);
        let t = Tensor3::from_vec((1, 1, 1), vec![x]).unwrap();
        let st = solver::soft_threshold(&t, v).unwrap().at(0, 0, 0);
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
        worst = worst.max((st - best_z).abs());
    }
    CheckReport {
        name: "prox-oracle".to_string(),
        passed: worst <= 1e-4 + 1e-12,
        detail: format!("max |prox - grid argmin| {worst:.3e} (grid step 1e-4)"),
    }
}

fn run_svd_contract() -> CheckReport {
    let mut rng = StdRng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for (rows, cols) in [(8usize, 5usize), (5, 8), (6, 6)] {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f64..1.0));
        let r = tensor3::svd(&m).unwrap();
        let recon = r.reconstruct();
        let mut err = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                err += (recon.at(i, j) - m.at(i, j)).powi(2);
            }
        }
        worst = worst.max(err.sqrt() / m.frobenius().max(1.0));
    }
    CheckReport {
        name: "svd-contract".to_string(),
        passed: worst <= 1e-6,
        detail: format!("max relative reconstruction residual {worst:.3e}"),
    }
}

/// Runs every suite; order is stable.
pub fn run_checks(opts: &CheckOptions) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for (i, case) in primitive_cases().iter().enumerate() {
        reports.push(run_primitive_check(case, opts, 100 + i as u64));
    }
    let base = SolverConfig::<f64> {
        seed: 41,
        ..SolverConfig::default()
    };
    reports.push(run_loss_check("gradient-loss/default", &base, opts.tolerance.max(1e-4)));
    let discrete = SolverConfig {
        tv_mode: TvMode::Discrete3d,
        target_mode: TargetMode::Subtract,
        background_loss: BackgroundLoss::Mse,
        ..base
    };
    reports.push(run_loss_check(
        "gradient-loss/discrete-subtract-mse",
        &discrete,
        opts.tolerance.max(1e-4),
    ));
    reports.push(run_tucker_roundtrip());
    reports.push(run_tucker_exactness());
    reports.push(run_prox_oracle());
    reports.push(run_svd_contract());
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_all_checks() {
        let reports = run_checks(&CheckOptions::default());
        for r in &reports {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
        assert!(reports.len() >= 16);
    }

    #[test]
    fn injected_sign_fault_is_detected_by_name() {
        let opts = CheckOptions {
            fault: Some(FaultInjection::NegateSinGradient),
            ..CheckOptions::default()
        };
        let reports = run_checks(&opts);
        let sin = reports
            .iter()
            .find(|r| r.name == "gradient-primitives/sin")
            .unwrap();
        assert!(!sin.passed, "negated sin gradient must fail the check");
        // Everything else still passes.
        for r in reports.iter().filter(|r| r.name != "gradient-primitives/sin") {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
    }

    #[test]
    fn tighter_tolerance_is_respected() {
        let strict = CheckOptions {
            tolerance: 1e-12,
            fault: None,
        };
        let reports = run_checks(&strict);
        // At 1e-12 the finite-difference oracle itself is noisier than
        // the bound, so at least one gradient check must trip.
        assert!(reports.iter().any(|r| !r.passed));
    }
}
