//! Self-check suite run by `simwave validate`.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{far_field_transimpedance, sample_users, ChannelModel, ScenarioConfig};
use crate::em::{ArrayGeometry, AntennaParams, SPEED_OF_LIGHT};
use crate::error::Result;
use crate::network::{
    assemble_sim_blocks, compute_g_blocks, conventional_reduction_oracle, dense_g_blocks,
    local_impedance_gradient_guarded, phase_to_load_block_guarded, project_phase, singular_distance,
    stack_coupling, PhaseVector, SimBlocks, SimStack,
};
use crate::optimizer::{
    channel_sinr, evaluate, iterative_p1, objective_gradient, optimize_from, sum_rate, update_beamformers,
    water_fill, Mode, OptimizerConfig,
};

type CMat = DMatrix<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            write!(f, "{tag} {:<28} measured={:.3e} tol={:.1e}", c.name, c.measured, c.tolerance)?;
            if !c.detail.is_empty() {
                write!(f, "  {}", c.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// `measured <= tolerance` checks; an error becomes a failed check.
fn upper(name: &'static str, tolerance: f64, run: impl FnOnce() -> Result<(f64, String)>) -> Check {
    match run() {
        Ok((measured, detail)) => Check {
            name,
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail,
        },
        Err(e) => Check {
            name,
            measured: f64::NAN,
            tolerance,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn rel(a: &CMat, b: &CMat) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn small_stack(layers: usize, nx: usize, ny: usize) -> SimStack {
    let lambda = SPEED_OF_LIGHT / 27e9;
    SimStack {
        num_layers: layers,
        layer_geometry: ArrayGeometry::new(nx, ny, lambda / 2.0, lambda / 2.0),
        layer_spacing: lambda / 2.0,
        antenna: AntennaParams::default(),
    }
}

fn small_scenario(layers: usize, elements: usize, users: usize, subbands: usize) -> ScenarioConfig {
    ScenarioConfig {
        num_subbands: subbands,
        num_users: users,
        layers,
        elements_total: elements,
        ..ScenarioConfig::default()
    }
}

fn model(cfg: &ScenarioConfig, seed: u64) -> Result<ChannelModel> {
    let users = sample_users(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    ChannelModel::new(cfg, users)
}

fn reciprocity() -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for layers in 1..=3 {
        let s = small_stack(layers, 2, 2);
        let p = PhaseVector::random(layers, 4, 1e-3, &mut rng);
        for f in [19.5e9, 27e9, 34.5e9] {
            let c = stack_coupling(&s, f)?;
            worst = worst.max(rel(&c.intra, &c.intra.transpose()));
            let a = assemble_sim_blocks(&s, &p, f)?.dense();
            worst = worst.max(rel(&a, &a.transpose()));
        }
    }
    Ok((worst, String::new()))
}

/// Smallest eigenvalue of the Hermitian part of the coupling matrix, relative
/// to the largest; passive arrays have none below zero.
fn passivity() -> Result<(f64, String)> {
    let mut worst = f64::INFINITY;
    for elements in [4, 36] {
        let s = small_scenario(1, elements, 1, 1).stack()?;
        for f in [19.5e9, 23e9, 27e9, 31e9, 34.5e9] {
            let z = stack_coupling(&s, f)?.intra;
            let h = (&z + z.adjoint()) * Complex64::new(0.5, 0.0);
            let ev = SymmetricEigen::new(h).eigenvalues;
            let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.min(min / max);
        }
    }
    Ok((-worst, format!("min eigenvalue ratio {worst:.3e}")))
}

fn block_solver() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for layers in [1, 2] {
        for (nx, ny) in [(1, 1), (2, 2)] {
            let s = small_stack(layers, nx, ny);
            let p = PhaseVector::random(layers, nx * ny, 1e-3, &mut rng);
            let b = assemble_sim_blocks(&s, &p, 29e9)?;
            let fast = compute_g_blocks(&b)?;
            let dense = dense_g_blocks(&b)?;
            for r in 0..2 * layers {
                worst = worst.max(rel(&fast.first_column[r], &dense.first_column[r]));
                worst = worst.max(rel(&fast.last_row[r], &dense.last_row[r]));
            }
        }
    }
    Ok((worst, String::new()))
}

fn conventional_reduction() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for layers in 1..=3 {
        let s = small_stack(layers, 2, 2);
        let p = PhaseVector::random(layers, 4, 1e-3, &mut rng);
        let oracle = conventional_reduction_oracle(&s, &p, 27e9)?;
        let g = compute_g_blocks(&SimBlocks::idealized(&s, &p, 27e9)?)?;
        worst = worst.max(rel(g.response(), &oracle));
    }
    Ok((worst, String::new()))
}

/// Every phase coordinate of a two-layer stack with `elements` in total.
fn gradient_fd(elements: usize, guard: f64) -> Result<(f64, String)> {
    let cfg = small_scenario(2, elements, 2, 2);
    let m = model(&cfg, 3)?;
    let mut phases = PhaseVector::random(2, elements / 2, guard.max(1e-3), &mut ChaCha8Rng::seed_from_u64(5));
    phases.project(guard);
    let powers = vec![vec![10.0, 15.0], vec![5.0, 20.0]];
    let ev = evaluate(&m, &m.training_statics, &phases, &powers)?;
    let grad = objective_gradient(&m.training_statics, &ev.channels, &ev.sinr, &powers, &phases, guard)?;
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in 0..phases.len() {
        let mut plus = phases.clone();
        plus.phases[idx] += h;
        let mut minus = phases.clone();
        minus.phases[idx] -= h;
        let jp = evaluate(&m, &m.training_statics, &plus, &powers)?.objective;
        let jm = evaluate(&m, &m.training_statics, &minus, &powers)?.objective;
        let fd = (jp - jm) / (2.0 * h);
        worst = worst.max((grad[idx] - fd).abs() / fd.abs().max(1e-3 * scale));
    }
    Ok((worst, format!("{} coordinates", phases.len())))
}

fn water_fill_kkt(trials: usize) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(1..40);
        let gains: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.gen_range(-3.0..3.0))).collect();
        let total = 10f64.powf(rng.gen_range(-2.0..2.0));
        let wf = water_fill(&gains, total);
        let mu = wf.water_level;
        let sum: f64 = wf.powers.iter().sum();
        worst = worst.max((sum - total).abs() / total);
        for (p, g) in wf.powers.iter().zip(&gains) {
            if *p < 0.0 {
                worst = f64::INFINITY;
            } else if *p > 0.0 {
                worst = worst.max((p + 1.0 / g - mu).abs() / mu);
            } else {
                worst = worst.max(((mu - 1.0 / g) / mu).max(0.0));
            }
        }
    }
    Ok((worst, format!("{trials} random instances")))
}

fn rate_identity(trials: usize) -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = small_scenario(2, 8, 3, 2);
    for t in 0..trials {
        let m = model(&cfg, t as u64)?;
        let phases = PhaseVector::random(2, 4, 1e-3, &mut rng);
        let powers: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(0.1..20.0)).collect()).collect();
        let set = m.channels(&phases)?;
        let beams = update_beamformers(&set, &powers)?;
        let r = sum_rate(&set, &beams)?;
        worst = worst.max((r.determinant_form - r.whitened_form).abs() / r.whitened_form.abs().max(1e-300));
    }
    Ok((worst, format!("{trials} random instances")))
}

/// Far-field transimpedance must scale as `d^(-a/2)` with distance and as
/// `sqrt(G_s G_u)` with the gains.
fn far_field_scaling() -> Result<(f64, String)> {
    let cfg = small_scenario(1, 4, 1, 1);
    let stack = cfg.stack()?;
    let users = sample_users(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let f = 27e9;
    let diag = stack_coupling(&stack, f)?.intra.diagonal();
    let base = far_field_transimpedance(&cfg, &stack, &users, f, &diag)?;
    let mut far = users.clone();
    far[0].distance *= 2.0;
    let far = far_field_transimpedance(&cfg, &stack, &far, f, &diag)?;
    let mut gain = users.clone();
    gain[0].gain_sim *= 4.0;
    let gain = far_field_transimpedance(&cfg, &stack, &gain, f, &diag)?;
    let expect_far = 2f64.powf(-cfg.path_loss_exponent / 2.0);
    let e1 = rel(&far, &(&base * Complex64::new(expect_far, 0.0)));
    let e2 = rel(&gain, &(&base * Complex64::new(2.0, 0.0)));
    Ok((e1.max(e2), String::new()))
}

/// Projected phases stay a guard away from the singular points and their
/// load blocks are finite.
fn singularity_guard(guard: f64) -> Result<(f64, String)> {
    if !(guard > 0.0) {
        return Ok((f64::INFINITY, format!("guard {guard} admits singular phases")));
    }
    let mut shortfall: f64 = 0.0;
    for base in [0.0, PI, TAU] {
        for off in [-1e-12, 0.0, 1e-12, 0.5 * guard, -0.5 * guard] {
            let p = project_phase(base + off, guard);
            shortfall = shortfall.max((guard - singular_distance(p)) / guard);
            let z = phase_to_load_block_guarded(p, 50.0, guard)?;
            let d = local_impedance_gradient_guarded(p, 50.0, guard)?;
            if !z.iter().chain(d.iter()).all(|v| v.re.is_finite() && v.im.is_finite()) {
                return Ok((f64::INFINITY, format!("non-finite load block at {p}")));
            }
        }
    }
    Ok((shortfall.max(0.0), format!("guard {guard}")))
}

fn small_run(guard: f64, mode: Mode) -> Result<(ChannelModel, crate::optimizer::OptimizerState)> {
    let cfg = small_scenario(2, 8, 2, 3);
    let m = model(&cfg, 4)?;
    let opt = OptimizerConfig {
        mode,
        singularity_guard: guard,
        max_outer_iters: 10,
        max_p2_steps: 100,
        ..OptimizerConfig::default()
    };
    let start = PhaseVector::random(2, 4, guard.max(1e-3), &mut ChaCha8Rng::seed_from_u64(8));
    let state = optimize_from(&m, &opt, start)?;
    Ok((m, state))
}

fn ao_monotone(guard: f64) -> Result<(f64, String)> {
    let (_, state) = small_run(guard, Mode::Full)?;
    let drop = |a: f64, b: f64| (a - b) / a.abs().max(1e-300);
    let outer = state.outer_trace.windows(2).map(|w| drop(w[0], w[1]));
    let inner = state.objective_trace.windows(2).map(|w| drop(w[0].objective, w[1].objective));
    let worst = outer.chain(inner).fold(0.0f64, f64::max);
    Ok((worst, format!("{} outer rounds", state.outer_iters)))
}

/// Water-filling applied at the returned powers must reproduce them.
fn p1_fixed_point(guard: f64) -> Result<(f64, String)> {
    let (m, state) = small_run(guard, Mode::Full)?;
    let set = m.channels(&state.phases)?;
    let total = m.config.total_power_w;
    let p1 = iterative_p1(
        &set,
        &state.beams.powers,
        total,
        &OptimizerConfig {
            max_p1_iters: 2000,
            ..OptimizerConfig::default()
        },
    )?;
    let gains = channel_sinr(&set, &p1.powers)?;
    let flat: Vec<f64> = gains.iter().flat_map(|g| g.gain.iter().copied()).collect();
    let wf = water_fill(&flat, total);
    let current: Vec<f64> = p1.powers.iter().flatten().copied().collect();
    let change = current
        .iter()
        .zip(&wf.powers)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / total;
    Ok((change, format!("{} water-filling iterations", p1.iterations)))
}

/// Run the suite. `guard` is the singularity guard used for phase
/// projection and the optimiser.
pub fn run_validation(level: Level, guard: f64) -> ValidationReport {
    let full = level == Level::Full;
    let mut checks = vec![
        upper("reciprocity", 1e-14, reciprocity),
        upper("passivity", 1e-9, passivity),
        upper("block_solver_vs_dense", 1e-10, block_solver),
        upper("conventional_reduction", 1e-10, conventional_reduction),
        upper("gradient_finite_difference", 1e-4, || gradient_fd(if full { 100 } else { 20 }, guard)),
        upper("water_fill_kkt", 1e-9, || water_fill_kkt(if full { 1000 } else { 100 })),
        upper("rate_identity", 1e-9, || rate_identity(if full { 100 } else { 10 })),
        upper("far_field_scaling", 1e-12, far_field_scaling),
        upper("singularity_guard", 1e-9, || singularity_guard(guard)),
    ];
    if full {
        checks.push(upper("ao_monotone", 1e-12, || ao_monotone(guard)));
        checks.push(upper("p1_fixed_point", 1e-6, || p1_fixed_point(guard)));
    }
    ValidationReport { checks }
}
