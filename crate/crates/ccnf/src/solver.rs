//! Numerical integration of the augmented initial value problem: the flow
//! state `z` jointly with the accumulated log-density correction
//! `δ(t) = δ(t₀) − ∫ tr(∂f/∂z) dt`, both advanced by the same solver stages.
//!
//! Two methods are offered: classic fixed-step RK4 (recordable on a tape for
//! discretize-then-optimize training) and Dormand–Prince 5(4) with PI
//! step-size control for inference. The RK4 stepping code is generic over
//! the execution mode, so the recorded and unrecorded paths perform
//! bit-identical arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eval, Exec, NodeId, Tape};
use crate::error::{Error, Result};
use crate::field::{rademacher, Field, FieldEval};
use crate::linalg;

/// Integration methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rk4Fixed,
    Dopri5Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Step count for the fixed method.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Bound on attempted steps of the adaptive method.
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5Adaptive,
            steps: 20,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: Method::Rk4Fixed,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rtol <= 0.0 || self.atol <= 0.0 {
            return Err(Error::InvalidInput("rtol and atol must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidInput("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Flow state plus the accumulated log-density correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub z: Vec<f64>,
    pub delta_logp: f64,
}

impl AugmentedState {
    pub fn new(z: Vec<f64>) -> Self {
        Self { z, delta_logp: 0.0 }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.z.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: dim,
                got: self.z.len(),
            });
        }
        if !linalg::all_finite(&self.z) || !self.delta_logp.is_finite() {
            return Err(Error::NonFinite { what: "state" });
        }
        Ok(())
    }
}

/// How the trace term is evaluated along the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    /// Leave `delta_logp` untouched (sampling and editing paths).
    Off,
    /// Exact Jacobian trace at every stage.
    Exact,
    /// Hutchinson estimate with `probes` Rademacher vectors, drawn once per
    /// integration from the given seed and reused at every stage so the
    /// integrand stays smooth for the adaptive controller.
    Hutchinson { probes: usize, seed: u64 },
}

impl TraceMode {
    fn validate(&self) -> Result<()> {
        if let Self::Hutchinson { probes: 0, .. } = self {
            return Err(Error::InvalidInput(
                "hutchinson trace requires probes >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Executor-level trace plan: prepared θ-context or probe handles.
enum TracePlan<V> {
    Off,
    Exact { ctx: Vec<V> },
    Hutchinson { probes: Vec<(Vec<f64>, V)> },
}

fn build_plan<E: Exec, F: Field>(ex: &mut E, field: &F, mode: &TraceMode) -> TracePlan<E::V> {
    match mode {
        TraceMode::Off => TracePlan::Off,
        TraceMode::Exact => TracePlan::Exact {
            ctx: field.prepare(ex),
        },
        TraceMode::Hutchinson { probes, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let probes = (0..*probes)
                .map(|_| {
                    let eps = rademacher(&mut rng, field.dim());
                    let h = ex.constant(&eps);
                    (eps, h)
                })
                .collect();
            TracePlan::Hutchinson { probes }
        }
    }
}

/// One field evaluation plus (optionally) its trace, as executor values.
fn stage<E: Exec, F: Field>(
    ex: &mut E,
    field: &F,
    z: &E::V,
    t: f64,
    a: &[f64],
    plan: &TracePlan<E::V>,
) -> (E::V, Option<E::V>) {
    let ev: FieldEval<E::V> = field.eval(ex, z, t, a);
    let tr = match plan {
        TracePlan::Off => None,
        TracePlan::Exact { ctx } => Some(field.trace(ex, &ev, ctx)),
        TracePlan::Hutchinson { probes } => {
            let mut acc: Option<E::V> = None;
            for (_, eps) in probes {
                let jv = field.jvp(ex, &ev, eps);
                let term = ex.dot(eps, &jv);
                acc = Some(match acc {
                    None => term,
                    Some(prev) => ex.add_scaled(&prev, &term, 1.0),
                });
            }
            let acc = acc.expect("probes >= 1");
            Some(if probes.len() > 1 {
                ex.scale(&acc, 1.0 / probes.len() as f64)
            } else {
                acc
            })
        }
    };
    (ev.out, tr)
}

/// Classic RK4 over the augmented system, generic over the executor so the
/// recorded and unrecorded paths share one arithmetic sequence.
#[allow(clippy::too_many_arguments)]
fn rk4_augmented<E: Exec, F: Field>(
    ex: &mut E,
    field: &F,
    z0: E::V,
    delta0: E::V,
    t_start: f64,
    t_end: f64,
    a: &[f64],
    steps: usize,
    mode: &TraceMode,
) -> Result<(E::V, E::V)> {
    let plan = build_plan(ex, field, mode);
    let h = (t_end - t_start) / steps as f64;
    let mut z = z0;
    let mut delta = delta0;
    for n in 0..steps {
        let t = t_start + h * n as f64;
        let (k1, tr1) = stage(ex, field, &z, t, a, &plan);
        let z2 = ex.add_scaled(&z, &k1, h / 2.0);
        let (k2, tr2) = stage(ex, field, &z2, t + h / 2.0, a, &plan);
        let z3 = ex.add_scaled(&z, &k2, h / 2.0);
        let (k3, tr3) = stage(ex, field, &z3, t + h / 2.0, a, &plan);
        let z4 = ex.add_scaled(&z, &k3, h);
        let (k4, tr4) = stage(ex, field, &z4, t + h, a, &plan);

        let mut zn = ex.add_scaled(&z, &k1, h / 6.0);
        zn = ex.add_scaled(&zn, &k2, h / 3.0);
        zn = ex.add_scaled(&zn, &k3, h / 3.0);
        zn = ex.add_scaled(&zn, &k4, h / 6.0);
        z = zn;

        if let (Some(t1), Some(t2), Some(t3), Some(t4)) = (tr1, tr2, tr3, tr4) {
            // dδ/dt = −tr(∂f/∂z), same quadrature weights as the state.
            let mut dn = ex.add_scaled(&delta, &t1, -h / 6.0);
            dn = ex.add_scaled(&dn, &t2, -h / 3.0);
            dn = ex.add_scaled(&dn, &t3, -h / 3.0);
            dn = ex.add_scaled(&dn, &t4, -h / 6.0);
            delta = dn;
        }

        let zv = ex.read(&z);
        if !linalg::all_finite(&zv) {
            return Err(Error::Instability {
                context: format!("rk4 state non-finite at step {n}"),
            });
        }
    }
    Ok((z, delta))
}

fn check_inputs<F: Field>(
    field: &F,
    state0: &AugmentedState,
    t_start: f64,
    t_end: f64,
    a: &[f64],
    cfg: &SolverConfig,
    trace: &TraceMode,
) -> Result<()> {
    cfg.validate()?;
    trace.validate()?;
    state0.check(field.dim())?;
    if a.len() != field.cond_dim() {
        return Err(Error::DimensionMismatch {
            what: "condition",
            expected: field.cond_dim(),
            got: a.len(),
        });
    }
    if !linalg::all_finite(a) {
        return Err(Error::NonFinite { what: "condition" });
    }
    if t_start == t_end || !t_start.is_finite() || !t_end.is_finite() {
        return Err(Error::InvalidInput(
            "integration interval must be non-degenerate".into(),
        ));
    }
    Ok(())
}

/// Integrates the augmented system from `t_start` to `t_end` (either
/// direction). `delta_logp` is advanced by `−∫ tr(∂f/∂z) dt` along the path
/// unless the trace mode is `Off`.
pub fn integrate<F: Field>(
    field: &F,
    state0: &AugmentedState,
    t_start: f64,
    t_end: f64,
    a: &[f64],
    cfg: &SolverConfig,
    trace: &TraceMode,
) -> Result<AugmentedState> {
    check_inputs(field, state0, t_start, t_end, a, cfg, trace)?;
    match cfg.method {
        Method::Rk4Fixed => {
            let mut ex = Eval::new(field.params());
            let z0 = ex.constant(&state0.z);
            let d0 = ex.constant(&[state0.delta_logp]);
            let (z, d) =
                rk4_augmented(&mut ex, field, z0, d0, t_start, t_end, a, cfg.steps, trace)?;
            Ok(AugmentedState {
                z,
                delta_logp: d[0],
            })
        }
        Method::Dopri5Adaptive => dopri5(field, state0, t_start, t_end, a, cfg, trace),
    }
}

/// A fixed-step integration recorded on a tape: identical numerics to
/// [`integrate`] with the RK4 method, with every stage recorded so a
/// backward sweep yields parameter gradients of any function of the outputs.
pub struct RecordedIntegration<'p> {
    pub state: AugmentedState,
    pub tape: Tape<'p>,
    /// The initial state `z(t_start)` as a differentiable tape input.
    pub input: NodeId,
    pub z_end: NodeId,
    pub delta_end: NodeId,
}

pub fn integrate_recorded<'p, F: Field>(
    field: &'p F,
    state0: &AugmentedState,
    t_start: f64,
    t_end: f64,
    a: &[f64],
    cfg: &SolverConfig,
    trace: &TraceMode,
) -> Result<RecordedIntegration<'p>> {
    check_inputs(field, state0, t_start, t_end, a, cfg, trace)?;
    if cfg.method != Method::Rk4Fixed {
        return Err(Error::Capability(
            "recorded integration requires the fixed-step rk4 method".into(),
        ));
    }
    let mut tape = Tape::new(field.params());
    let input = tape.input(&state0.z);
    let d0 = tape.constant(&[state0.delta_logp]);
    let (z_end, delta_end) = rk4_augmented(
        &mut tape, field, input, d0, t_start, t_end, a, cfg.steps, trace,
    )?;
    let state = AugmentedState {
        z: tape.value(z_end).to_vec(),
        delta_logp: tape.value(delta_end)[0],
    };
    Ok(RecordedIntegration {
        state,
        tape,
        input,
        z_end,
        delta_end,
    })
}

// ── Dormand–Prince 5(4) ─────────────────────────────────────────────────

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// b₅ − b₄: error-estimate weights of the embedded 4th-order solution.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const STEP_GROWTH: f64 = 5.0;
const STEP_SHRINK: f64 = 0.2;
const PI_BETA: f64 = 0.04;

/// Augmented derivative in plain arithmetic: `[f(z,t,a), −tr]`.
struct Deriv<'f, F: Field> {
    field: &'f F,
    a: &'f [f64],
    plan: TracePlan<Vec<f64>>,
}

impl<F: Field> Deriv<'_, F> {
    fn eval(&self, t: f64, y: &[f64]) -> Vec<f64> {
        let d = self.field.dim();
        let mut ex = Eval::new(self.field.params());
        let z = ex.constant(&y[..d]);
        let (f, tr) = stage(&mut ex, self.field, &z, t, self.a, &self.plan);
        let mut dy = f;
        dy.push(tr.map_or(0.0, |v| -v[0]));
        dy
    }
}

fn dopri5<F: Field>(
    field: &F,
    state0: &AugmentedState,
    t_start: f64,
    t_end: f64,
    a: &[f64],
    cfg: &SolverConfig,
    trace: &TraceMode,
) -> Result<AugmentedState> {
    let d = field.dim();
    let mut ex = Eval::new(field.params());
    let plan = build_plan(&mut ex, field, trace);
    let deriv = Deriv { field, a, plan };

    let mut y: Vec<f64> = state0.z.clone();
    y.push(state0.delta_logp);
    let n = y.len();
    let mut t = t_start;
    let span = t_end - t_start;
    let mut h = span / 100.0;
    let mut k1 = deriv.eval(t, &y);
    let mut facold: f64 = 1e-4;
    let expo1 = 0.2 - PI_BETA * 0.75;
    let mut attempts = 0usize;

    while (t_end - t) * span.signum() > 0.0 {
        if attempts >= cfg.max_steps {
            return Err(Error::Divergence {
                t,
                max_steps: cfg.max_steps,
            });
        }
        attempts += 1;

        // Do not step past the endpoint.
        if (t + h - t_end) * span.signum() > 0.0 {
            h = t_end - t;
        }

        let mut k = vec![k1.clone()];
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let aij = A[s - 1][j];
                if aij != 0.0 {
                    for (yi, ki) in ys.iter_mut().zip(kj) {
                        *yi += h * aij * ki;
                    }
                }
            }
            if !linalg::all_finite(&ys) {
                return Err(Error::Instability {
                    context: format!("dopri5 stage non-finite at t={t}"),
                });
            }
            k.push(deriv.eval(t + C[s] * h, &ys));
        }

        // 5th-order solution (stage 7 input equals it: FSAL).
        let mut y1 = y.clone();
        for (j, kj) in k.iter().enumerate() {
            if B5[j] != 0.0 {
                for (yi, ki) in y1.iter_mut().zip(kj) {
                    *yi += h * B5[j] * ki;
                }
            }
        }
        if !linalg::all_finite(&y1) {
            return Err(Error::Instability {
                context: format!("dopri5 state non-finite at t={t}"),
            });
        }

        // Scaled RMS error of the embedded pair.
        let mut err_sq = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if E[j] != 0.0 {
                    e += E[j] * kj[i];
                }
            }
            e *= h;
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(y1[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n as f64).sqrt();

        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            // PI controller (accepted step).
            let fac =
                (fac11 / facold.powf(PI_BETA) / SAFETY).clamp(1.0 / STEP_GROWTH, 1.0 / STEP_SHRINK);
            facold = err.max(1e-4);
            t += h;
            y = y1;
            k1 = k.pop().expect("seven stages");
            h /= fac;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / STEP_SHRINK);
        }
    }

    let delta_logp = y[n - 1];
    y.truncate(d);
    Ok(AugmentedState { z: y, delta_logp })
}
