//! Joint power allocation, beamforming and phase design.
//!
//! The objective is `J = sum_i B_i sum_k log2(1 + s_{k,i})` with
//! `s_{k,i} = p_{k,i} h_{k,i} C_{i,k}^-1 h_{k,i}^H`. For fixed phases the
//! powers come from iterative water-filling over all (user, subband) pairs;
//! for fixed powers the common phase vector follows a normalised gradient
//! ascent with backtracking. The two steps alternate until the relative
//! change of `J` drops below the tolerance.

use std::f64::consts::LN_2;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModel, ChannelSet, FrequencyStatics};
use crate::error::{Error, Result};
use crate::network::{channel_derivative_projected, local_impedance_gradient_guarded, PhaseVector, REFERENCE_IMPEDANCE};

type CMat = DMatrix<Complex64>;
type CVec = DVector<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Water-filling and phase ascent on every layer.
    #[default]
    Full,
    /// One full round, then only the last layer keeps adapting.
    LastLayerOnly,
    /// Uniform powers, phases optimised.
    UniformPower,
    /// Random phases, powers optimised.
    RandomPhase,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::LastLayerOnly => "last-layer-only",
            Mode::UniformPower => "uniform-power",
            Mode::RandomPhase => "random-phase",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Mode::Full, Mode::LastLayerOnly, Mode::UniformPower, Mode::RandomPhase]
            .into_iter()
            .find(|m| m.name() == s)
    }

    fn optimizes_powers(self) -> bool {
        !matches!(self, Mode::UniformPower)
    }

    fn optimizes_phases(self) -> bool {
        !matches!(self, Mode::RandomPhase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub mode: Mode,
    /// Largest phase change of the first trial step (rad).
    pub step_size_rad: f64,
    pub backtrack_factor: f64,
    pub max_halvings: usize,
    pub max_p1_iters: usize,
    pub max_p2_steps: usize,
    pub max_outer_iters: usize,
    /// Relative change of `J` that ends the alternating loop.
    pub tolerance: f64,
    /// Relative improvement of one ascent step below which P2 returns.
    pub p2_tolerance: f64,
    /// Largest power change (relative to the budget) that ends P1.
    pub p1_tolerance: f64,
    pub singularity_guard: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            step_size_rad: 0.1,
            backtrack_factor: 0.5,
            max_halvings: 20,
            max_p1_iters: 200,
            max_p2_steps: 500,
            max_outer_iters: 50,
            tolerance: 1e-7,
            p2_tolerance: 1e-7,
            p1_tolerance: 1e-9,
            singularity_guard: crate::network::SINGULARITY_GUARD,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size_rad > 0.0) {
            return Err(Error::Config("step_size_rad must be > 0".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config("backtrack_factor must lie in (0, 1)".into()));
        }
        if !(self.tolerance > 0.0 && self.p2_tolerance >= 0.0 && self.p1_tolerance > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.singularity_guard >= 0.0 && self.singularity_guard < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config("singularity_guard must lie in [0, pi/2)".into()));
        }
        Ok(())
    }
}

/// Per-subband powers `powers[i][k]` and beamformers (row `k` of
/// `weights[i]` is `w_{k,i}`).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub powers: Vec<Vec<f64>>,
    pub weights: Vec<CMat>,
}

impl BeamformerSet {
    pub fn total_power(&self) -> f64 {
        self.powers.iter().flatten().sum()
    }
}

pub fn uniform_powers(num_subbands: usize, num_users: usize, total: f64) -> Vec<Vec<f64>> {
    let p = total / (num_subbands * num_users) as f64;
    vec![vec![p; num_users]; num_subbands]
}

/// `C_{i,k} = sigma^2 I + sum_{j != k} h_j^H w_j w_j^H h_j`.
pub fn interference_covariance(h: &CMat, weights: &CMat, noise: f64, k: usize) -> CMat {
    let nt = h.ncols();
    let mut c = CMat::identity(nt, nt) * Complex64::new(noise, 0.0);
    for j in 0..h.nrows() {
        if j == k {
            continue;
        }
        let hj = h.row(j);
        let wj = weights.row(j);
        let gain = (wj * wj.adjoint())[(0, 0)];
        c += hj.adjoint() * hj * gain;
    }
    c
}

fn covariance_from_powers(h: &CMat, powers: &[f64], noise: f64, k: usize) -> CMat {
    let nt = h.ncols();
    let mut c = CMat::identity(nt, nt) * Complex64::new(noise, 0.0);
    for (j, &p) in powers.iter().enumerate() {
        if j != k && p != 0.0 {
            let hj = h.row(j);
            c += hj.adjoint() * hj * Complex64::new(p, 0.0);
        }
    }
    c
}

/// Whitened channel `h U Lambda^{-1/2}` from the eigendecomposition of `C`
/// and its squared norm.
pub fn whiten(h: &CVec, c: &CMat) -> Result<(CVec, f64)> {
    let eig = SymmetricEigen::new(c.clone());
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Singular("interference covariance is not positive definite".into()));
    }
    let scale = eig.eigenvalues.map(|l| Complex64::new(1.0 / l.sqrt(), 0.0));
    let row = h.transpose() * &eig.eigenvectors;
    let ht: CVec = row.transpose().component_mul(&scale);
    let lambda = ht.norm_squared();
    Ok((ht, lambda))
}

/// Receive-side quantities of one subband: `v_k = C_k^-1 h_k^H` and the
/// SINRs.
#[derive(Debug, Clone)]
pub struct SubbandSinr {
    pub v: Vec<CVec>,
    /// `h_k C_k^-1 h_k^H`, the gain per unit power.
    pub gain: Vec<f64>,
    pub sinr: Vec<f64>,
}

fn cholesky(c: CMat) -> Result<Cholesky<Complex64, Dyn>> {
    Cholesky::new(c).ok_or_else(|| Error::Singular("interference covariance is not positive definite".into()))
}

pub fn subband_sinr(h: &CMat, powers: &[f64], noise: f64) -> Result<SubbandSinr> {
    let k_users = h.nrows();
    let mut v = Vec::with_capacity(k_users);
    let mut gain = Vec::with_capacity(k_users);
    let mut sinr = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let chol = cholesky(covariance_from_powers(h, powers, noise, k))?;
        let hk: CVec = h.row(k).adjoint();
        let vk = chol.solve(&hk);
        let g = hk.dotc(&vk).re.max(0.0);
        gain.push(g);
        sinr.push(powers[k] * g);
        v.push(vk);
    }
    Ok(SubbandSinr { v, gain, sinr })
}

pub fn channel_sinr(set: &ChannelSet, powers: &[Vec<f64>]) -> Result<Vec<SubbandSinr>> {
    set.subbands
        .par_iter()
        .enumerate()
        .map(|(i, sb)| subband_sinr(&sb.h, &powers[sb.power_index], sb.noise).map_err(|e| e.in_subband(i)))
        .collect()
}

/// `J` in bit/s from precomputed SINRs.
pub fn objective_from_sinr(set: &ChannelSet, sinr: &[SubbandSinr]) -> f64 {
    set.subbands
        .iter()
        .zip(sinr)
        .map(|(sb, s)| sb.weight * s.sinr.iter().map(|&x| (1.0 + x).log2()).sum::<f64>())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumRate {
    /// Determinant form, bit/s.
    pub determinant_form: f64,
    /// Whitened-gain form, bit/s.
    pub whitened_form: f64,
    /// `whitened_form` divided by the total weight, bit/s/Hz.
    pub spectral_efficiency: f64,
}

fn log2_det_hpd(c: CMat) -> Result<f64> {
    let chol = cholesky(c)?;
    let l = chol.l_dirty();
    Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>() / LN_2)
}

/// Sum rate by both the log-det difference and the scalar whitened form.
pub fn sum_rate(set: &ChannelSet, beams: &BeamformerSet) -> Result<SumRate> {
    let mut det_form = 0.0;
    let mut white_form = 0.0;
    for (i, sb) in set.subbands.iter().enumerate() {
        let w = &beams.weights[sb.power_index];
        for k in 0..sb.h.nrows() {
            let c = interference_covariance(&sb.h, w, sb.noise, k);
            let hk = sb.h.row(k);
            let wk = w.row(k);
            let signal = hk.adjoint() * (wk * wk.adjoint())[(0, 0)] * hk;
            let with = log2_det_hpd(&c + signal).map_err(|e| e.in_subband(i))?;
            let without = log2_det_hpd(c.clone()).map_err(|e| e.in_subband(i))?;
            det_form += sb.weight * (with - without);
            let p = wk.norm_squared();
            let (_, lambda) = whiten(&hk.transpose(), &c).map_err(|e| e.in_subband(i))?;
            white_form += sb.weight * (1.0 + p * lambda).log2();
        }
    }
    Ok(SumRate {
        determinant_form: det_form,
        whitened_form: white_form,
        spectral_efficiency: white_form / set.total_weight(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterFill {
    pub powers: Vec<f64>,
    pub water_level: f64,
    /// Set when every gain is zero and nothing was allocated.
    pub all_zero: bool,
}

/// `p = [mu - 1/lambda]^+` with `sum p = total`. The water level comes from
/// scanning the gains in decreasing order.
pub fn water_fill(gains: &[f64], total: f64) -> WaterFill {
    let mut order: Vec<usize> = (0..gains.len()).filter(|&j| gains[j] > 0.0).collect();
    if order.is_empty() || !(total > 0.0) {
        if order.is_empty() {
            warn!("water-filling over all-zero gains");
        }
        return WaterFill {
            powers: vec![0.0; gains.len()],
            water_level: 0.0,
            all_zero: order.is_empty(),
        };
    }
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    let mut inv_sum = 0.0;
    let mut mu = 0.0;
    let mut active = 0;
    for (n, &j) in order.iter().enumerate() {
        let inv = 1.0 / gains[j];
        let candidate = (total + inv_sum + inv) / (n + 1) as f64;
        if candidate <= inv {
            break;
        }
        inv_sum += inv;
        mu = candidate;
        active = n + 1;
    }
    let mut powers = vec![0.0; gains.len()];
    for &j in &order[..active] {
        powers[j] = (mu - 1.0 / gains[j]).max(0.0);
    }
    // Spread the rounding residue so the budget holds to the last bit.
    for _ in 0..2 {
        let residue = total - powers.iter().sum::<f64>();
        if residue == 0.0 {
            break;
        }
        let share = residue / active as f64;
        for &j in &order[..active] {
            powers[j] = (powers[j] + share).max(0.0);
        }
    }
    WaterFill {
        powers,
        water_level: mu,
        all_zero: false,
    }
}

/// `w = sqrt(p) conj(h~) / |h~|`.
pub fn beamformer(whitened: &CVec, power: f64, user: usize, subband: usize) -> Result<CVec> {
    if power == 0.0 {
        return Ok(CVec::zeros(whitened.len()));
    }
    let norm = whitened.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateChannel { user, subband });
    }
    Ok(whitened.conjugate() * Complex64::new(power.sqrt() / norm, 0.0))
}

/// Beamformers for given powers on a channel set (training grid).
pub fn update_beamformers(set: &ChannelSet, powers: &[Vec<f64>]) -> Result<BeamformerSet> {
    let weights = set
        .subbands
        .iter()
        .enumerate()
        .map(|(i, sb)| {
            let p = &powers[i];
            let nt = sb.h.ncols();
            let mut w = CMat::zeros(sb.h.nrows(), nt);
            for k in 0..sb.h.nrows() {
                let c = covariance_from_powers(&sb.h, p, sb.noise, k);
                let (ht, _) = whiten(&sb.h.row(k).transpose(), &c).map_err(|e| e.in_subband(i))?;
                let wk = beamformer(&ht, p[k], k, i)?;
                w.row_mut(k).copy_from(&wk.transpose());
            }
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BeamformerSet {
        powers: powers.to_vec(),
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct P1Outcome {
    pub powers: Vec<Vec<f64>>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterative water-filling for fixed phases. Returns the best iterate seen.
pub fn iterative_p1(set: &ChannelSet, start: &[Vec<f64>], total: f64, cfg: &OptimizerConfig) -> Result<P1Outcome> {
    let nf = set.len();
    let k_users = set.subbands.first().map_or(0, |s| s.h.nrows());
    let mut powers = start.to_vec();
    let sinr = channel_sinr(set, &powers)?;
    let mut best = (objective_from_sinr(set, &sinr), powers.clone());
    let mut gains = sinr;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_p1_iters {
        iterations += 1;
        let flat: Vec<f64> = gains.iter().flat_map(|g| g.gain.iter().copied()).collect();
        let wf = water_fill(&flat, total);
        let next: Vec<Vec<f64>> = (0..nf).map(|i| wf.powers[i * k_users..(i + 1) * k_users].to_vec()).collect();
        let change = powers
            .iter()
            .flatten()
            .zip(next.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        powers = next;
        gains = channel_sinr(set, &powers)?;
        let j = objective_from_sinr(set, &gains);
        if j > best.0 {
            best = (j, powers.clone());
        }
        if change < cfg.p1_tolerance * total {
            converged = true;
            break;
        }
    }
    if !converged {
        debug!("iterative water-filling stopped at the iteration cap");
    }
    Ok(P1Outcome {
        powers: best.1,
        objective: best.0,
        iterations,
        converged,
    })
}

/// `ds_{k,i}/dphi` for every user of one subband given `Delta = dH/dphi`.
pub fn sinr_gradient(h: &CMat, delta: &CMat, powers: &[f64], sinr: &SubbandSinr) -> Vec<f64> {
    let k_users = h.nrows();
    (0..k_users)
        .map(|k| {
            let v = &sinr.v[k];
            let dv = |r: usize| (delta.row(r) * v)[(0, 0)];
            let mut ds = 2.0 * powers[k] * dv(k).re;
            for kp in 0..k_users {
                if kp != k && powers[kp] != 0.0 {
                    let hv = (h.row(kp) * v)[(0, 0)];
                    ds -= 2.0 * powers[k] * powers[kp] * (hv.conj() * dv(kp)).re;
                }
            }
            ds
        })
        .collect()
}

/// `dJ/dphi` for all meta-atoms; frozen entries are zero.
pub fn objective_gradient(
    statics: &[FrequencyStatics],
    set: &ChannelSet,
    sinr: &[SubbandSinr],
    powers: &[Vec<f64>],
    phases: &PhaseVector,
    guard: f64,
) -> Result<Vec<f64>> {
    let n = phases.len();
    let per_subband = set
        .subbands
        .par_iter()
        .zip(statics.par_iter())
        .zip(sinr.par_iter())
        .enumerate()
        .map(|(i, ((sb, st), s))| -> Result<Vec<f64>> {
            let p = &powers[sb.power_index];
            let mut g = vec![0.0; n];
            let scale = sb.weight / LN_2;
            let y = sb.solve.row(&st.h2);
            for layer in 0..phases.layers {
                for e in 0..phases.per_layer {
                    let idx = phases.index(layer, e);
                    if phases.frozen[idx] {
                        continue;
                    }
                    let d = local_impedance_gradient_guarded(phases.phases[idx], REFERENCE_IMPEDANCE, guard)
                        .map_err(|e| e.in_subband(i))?;
                    let delta = channel_derivative_projected(&sb.x, &y, &d, layer, e);
                    let ds = sinr_gradient(&sb.h, &delta, p, s);
                    g[idx] = scale * ds.iter().zip(&s.sinr).map(|(d, x)| d / (1.0 + x)).sum::<f64>();
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; n];
    for g in per_subband {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    Ok(total)
}

/// Channels, SINRs and objective at a phase configuration.
pub struct Evaluation {
    pub channels: ChannelSet,
    pub sinr: Vec<SubbandSinr>,
    pub objective: f64,
}

pub fn evaluate(
    model: &ChannelModel,
    statics: &[FrequencyStatics],
    phases: &PhaseVector,
    powers: &[Vec<f64>],
) -> Result<Evaluation> {
    let channels = model.channels_on(statics, phases)?;
    let sinr = channel_sinr(&channels, powers)?;
    let objective = objective_from_sinr(&channels, &sinr);
    Ok(Evaluation {
        channels,
        sinr,
        objective,
    })
}

#[derive(Debug, Clone)]
pub struct P2Outcome {
    pub phases: PhaseVector,
    pub objective: f64,
    pub steps: usize,
    /// Objective after every accepted step.
    pub trace: Vec<f64>,
    pub stalled: bool,
}

/// Gradient ascent on the phases for fixed powers. A trial step moves the
/// largest gradient coordinate by `step_size_rad * factor^h`; the first `h`
/// that increases `J` is accepted, and the next step starts one level above
/// it.
pub fn gradient_ascent_p2(
    model: &ChannelModel,
    phases: &PhaseVector,
    powers: &[Vec<f64>],
    cfg: &OptimizerConfig,
) -> Result<P2Outcome> {
    let statics = &model.training_statics;
    let mut phases = phases.clone();
    let mut current = evaluate(model, statics, &phases, powers)?;
    let mut trace = Vec::new();
    let mut steps = 0;
    let mut stalled = false;
    let mut start_level = 0;
    for _ in 0..cfg.max_p2_steps {
        let grad = objective_gradient(
            statics,
            &current.channels,
            &current.sinr,
            powers,
            &phases,
            cfg.singularity_guard,
        )?;
        let gmax = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 || !gmax.is_finite() {
            break;
        }
        let try_level = |level: usize| -> Option<(PhaseVector, Evaluation)> {
            let eta = cfg.step_size_rad * cfg.backtrack_factor.powi(level as i32) / gmax;
            let mut trial = phases.clone();
            for (i, (phi, g)) in trial.phases.iter_mut().zip(&grad).enumerate() {
                if !phases.frozen[i] {
                    *phi += eta * g;
                }
            }
            trial.project(cfg.singularity_guard);
            let ev = evaluate(model, statics, &trial, powers).ok()?;
            (ev.objective > current.objective).then_some((trial, ev))
        };
        // Levels below the last accepted one are tried only if the smaller
        // steps all fail.
        let mut accepted = None;
        for level in (start_level..=cfg.max_halvings).chain(0..start_level) {
            if let Some(hit) = try_level(level) {
                start_level = level.saturating_sub(1);
                accepted = Some(hit);
                break;
            }
        }
        let Some((trial, ev)) = accepted else {
            stalled = true;
            break;
        };
        let gain = (ev.objective - current.objective) / current.objective.abs().max(f64::MIN_POSITIVE);
        phases = trial;
        current = ev;
        steps += 1;
        trace.push(current.objective);
        if gain < cfg.p2_tolerance {
            break;
        }
    }
    Ok(P2Outcome {
        phases,
        objective: current.objective,
        steps,
        trace,
        stalled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    P1,
    P2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub outer: usize,
    pub stage: Stage,
    pub step: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub phases: PhaseVector,
    pub beams: BeamformerSet,
    pub objective: f64,
    pub objective_trace: Vec<TracePoint>,
    /// Objective at the start and after every outer round.
    pub outer_trace: Vec<f64>,
    pub outer_iters: usize,
    pub p1_iters: usize,
    pub p2_steps: usize,
    pub converged: bool,
}

/// Mask for a reconfiguration mode: last-layer-only freezes layers
/// `1..L-1`.
pub fn partial_mode(phases: &mut PhaseVector, mode: Mode) -> Result<()> {
    match mode {
        Mode::LastLayerOnly => {
            if phases.layers < 2 {
                return Err(Error::Config("last-layer-only reconfiguration needs at least two layers".into()));
            }
            phases.freeze_all_but_last_layer();
        }
        _ => phases.unfreeze(),
    }
    Ok(())
}

/// Alternating optimisation from a random phase start.
pub fn alternating_optimize<R: Rng + ?Sized>(
    model: &ChannelModel,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<OptimizerState> {
    cfg.validate()?;
    if cfg.mode == Mode::LastLayerOnly && model.stack.num_layers < 2 {
        return Err(Error::Config("last-layer-only reconfiguration needs at least two layers".into()));
    }
    let start = PhaseVector::random(
        model.stack.num_layers,
        model.stack.elements_per_layer(),
        cfg.singularity_guard.max(crate::network::SINGULARITY_GUARD),
        rng,
    );
    optimize_from(model, cfg, start)
}

pub fn optimize_from(model: &ChannelModel, cfg: &OptimizerConfig, start: PhaseVector) -> Result<OptimizerState> {
    cfg.validate()?;
    let mut model_guarded;
    let model = if model.guard != cfg.singularity_guard {
        model_guarded = model.clone();
        model_guarded.guard = cfg.singularity_guard;
        &model_guarded
    } else {
        model
    };
    let total = model.config.total_power_w;
    let mut phases = start;
    phases.unfreeze();
    let mut powers = uniform_powers(model.num_subbands(), model.num_users(), total);
    let mut j = evaluate(model, &model.training_statics, &phases, &powers)?.objective;
    let mut trace = vec![TracePoint {
        outer: 0,
        stage: Stage::Init,
        step: 0,
        objective: j,
    }];
    let mut outer_trace = vec![j];
    let (mut p1_iters, mut p2_steps, mut outer_iters) = (0, 0, 0);
    let mut converged = false;
    for outer in 1..=cfg.max_outer_iters {
        outer_iters = outer;
        let j_prev = j;
        if cfg.mode.optimizes_powers() {
            let set = model.channels(&phases)?;
            let p1 = iterative_p1(&set, &powers, total, cfg)?;
            p1_iters += p1.iterations;
            if p1.objective >= j {
                powers = p1.powers;
                j = p1.objective;
            }
            trace.push(TracePoint {
                outer,
                stage: Stage::P1,
                step: p1.iterations,
                objective: j,
            });
        }
        if cfg.mode.optimizes_phases() {
            let p2 = gradient_ascent_p2(model, &phases, &powers, cfg)?;
            p2_steps += p2.steps;
            for (s, &obj) in p2.trace.iter().enumerate() {
                trace.push(TracePoint {
                    outer,
                    stage: Stage::P2,
                    step: s + 1,
                    objective: obj,
                });
            }
            if p2.objective >= j {
                phases = p2.phases;
                j = p2.objective;
            }
        }
        if outer == 1 && cfg.mode == Mode::LastLayerOnly {
            partial_mode(&mut phases, Mode::LastLayerOnly)?;
        }
        outer_trace.push(j);
        let rel = (j - j_prev).abs() / j_prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.tolerance || j == 0.0 {
            converged = true;
            break;
        }
        if !cfg.mode.optimizes_phases() && !cfg.mode.optimizes_powers() {
            break;
        }
    }
    let set = model.channels(&phases)?;
    let beams = update_beamformers(&set, &powers)?;
    Ok(OptimizerState {
        phases,
        beams,
        objective: j,
        objective_trace: trace,
        outer_trace,
        outer_iters,
        p1_iters,
        p2_steps,
        converged,
    })
}

/// Spectral efficiency (bit/s/Hz) of a configuration over arbitrary
/// frequency statics, using each point's training-subband powers.
pub fn spectral_efficiency(
    model: &ChannelModel,
    statics: &[FrequencyStatics],
    phases: &PhaseVector,
    powers: &[Vec<f64>],
) -> Result<f64> {
    let ev = evaluate(model, statics, phases, powers)?;
    Ok(ev.objective / ev.channels.total_weight())
}

/// Per-frequency sum spectral efficiency (bit/s/Hz) for each of `statics`.
pub fn rate_curve(
    model: &ChannelModel,
    statics: &[FrequencyStatics],
    phases: &PhaseVector,
    powers: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let ev = evaluate(model, statics, phases, powers)?;
    Ok(ev
        .sinr
        .iter()
        .map(|s| s.sinr.iter().map(|&x| (1.0 + x).log2()).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_users, ScenarioConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_cmat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> CMat {
        CMat::from_fn(r, c, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
    }

    fn model(cfg: &ScenarioConfig, seed: u64) -> ChannelModel {
        let users = sample_users(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        ChannelModel::new(cfg, users).unwrap()
    }

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            num_subbands: 2,
            num_users: 2,
            layers: 2,
            elements_total: 8,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn covariance_single_user_is_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_cmat(&mut rng, 1, 3, 1.0);
        let w = rand_cmat(&mut rng, 1, 3, 1.0);
        let c = interference_covariance(&h, &w, 0.5, 0);
        assert_eq!(c, CMat::identity(3, 3) * Complex64::new(0.5, 0.0));
        let c0 = interference_covariance(&rand_cmat(&mut rng, 3, 3, 1.0), &CMat::zeros(3, 3), 0.5, 1);
        assert_eq!(c0, CMat::identity(3, 3) * Complex64::new(0.5, 0.0));
    }

    #[test]
    fn covariance_matches_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_cmat(&mut rng, 3, 3, 1.0);
        let w = rand_cmat(&mut rng, 3, 3, 1.0);
        let c = interference_covariance(&h, &w, 0.1, 1);
        let mut expect = CMat::identity(3, 3) * Complex64::new(0.1, 0.0);
        for j in [0usize, 2] {
            for a in 0..3 {
                for b in 0..3 {
                    let ww: Complex64 = (0..3).map(|t| w[(j, t)] * w[(j, t)].conj()).sum();
                    expect[(a, b)] += h[(j, a)].conj() * ww * h[(j, b)];
                }
            }
        }
        assert!((&c - &expect).norm() < 1e-13);
        assert!((&c - c.adjoint()).norm() < 1e-15);
        let eig = SymmetricEigen::new(c).eigenvalues;
        assert!(eig.iter().all(|&l| l >= 0.1 - 1e-12));
    }

    #[test]
    fn whiten_scalar_covariance() {
        let h = CVec::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.0)]);
        let c = CMat::identity(2, 2) * Complex64::new(0.25, 0.0);
        let (ht, lambda) = whiten(&h, &c).unwrap();
        assert!((lambda - h.norm_squared() / 0.25).abs() < 1e-12);
        assert!((ht.norm() - h.norm() / 0.5).abs() < 1e-12);
    }

    #[test]
    fn whiten_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_cmat(&mut rng, 4, 4, 1.0);
            let c = &a * a.adjoint() + CMat::identity(4, 4) * Complex64::new(0.3, 0.0);
            let h: CVec = rand_cmat(&mut rng, 4, 1, 1.0).column(0).into_owned();
            let (_, lambda) = whiten(&h, &c).unwrap();
            // `h` holds the entries of the row vector, so the gain is h^T C^-1 conj(h).
            let hc = h.conjugate();
            let direct = (h.transpose() * c.clone().lu().solve(&hc).unwrap())[(0, 0)].re;
            assert!((lambda - direct).abs() < 1e-10 * direct);
        }
    }

    #[test]
    fn water_fill_examples() {
        let wf = water_fill(&[1.0, 1.0], 2.0);
        assert_eq!(wf.powers, vec![1.0, 1.0]);
        let wf = water_fill(&[1.0, 0.5], 1.0);
        assert!((wf.water_level - 2.0).abs() < 1e-15);
        assert_eq!(wf.powers, vec![1.0, 0.0]);
        let wf = water_fill(&[1.0, 0.0], 5.0);
        assert_eq!(wf.powers, vec![5.0, 0.0]);
        let wf = water_fill(&[0.0, 0.0], 5.0);
        assert!(wf.all_zero && wf.powers == vec![0.0, 0.0]);
    }

    #[test]
    fn beamformer_examples() {
        let h = CVec::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        let w = beamformer(&h, 4.0, 0, 0).unwrap();
        assert!((w.norm_squared() - 4.0).abs() < 1e-15);
        assert!(w[1].norm() == 0.0);
        assert_eq!(beamformer(&h, 0.0, 0, 0).unwrap(), CVec::zeros(2));
        assert!(matches!(
            beamformer(&CVec::zeros(2), 1.0, 1, 2),
            Err(Error::DegenerateChannel { user: 1, subband: 2 })
        ));
    }

    #[test]
    fn matched_beamformer_reaches_p_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ht: CVec = rand_cmat(&mut rng, 3, 1, 1.0).column(0).into_owned();
        let w = beamformer(&ht, 2.5, 0, 0).unwrap();
        let s = (ht.transpose() * &w)[(0, 0)].norm_sqr();
        assert!((s - 2.5 * ht.norm_squared()).abs() < 1e-12 * s);
    }

    #[test]
    fn single_user_rate_closed_form() {
        let cfg = ScenarioConfig {
            num_subbands: 1,
            num_users: 1,
            layers: 1,
            elements_total: 4,
            ..ScenarioConfig::default()
        };
        let m = model(&cfg, 1);
        let set = m.channels(&PhaseVector::uniform(1, 4, 1.0)).unwrap();
        let beams = update_beamformers(&set, &[vec![50.0]]).unwrap();
        let r = sum_rate(&set, &beams).unwrap();
        let h = &set.subbands[0].h;
        let expect = 15e9 * (1.0 + 50.0 * h.norm_squared() / set.subbands[0].noise).log2();
        assert!((r.whitened_form - expect).abs() < 1e-9 * expect);
        assert!((r.determinant_form - expect).abs() < 1e-9 * expect);
        let zero = update_beamformers(&set, &[vec![0.0]]).unwrap();
        assert_eq!(sum_rate(&set, &zero).unwrap().whitened_form, 0.0);
    }

    #[test]
    fn p1_single_user_is_plain_water_filling() {
        let cfg = ScenarioConfig {
            num_subbands: 4,
            num_users: 1,
            layers: 1,
            elements_total: 4,
            ..ScenarioConfig::default()
        };
        let m = model(&cfg, 2);
        let set = m.channels(&PhaseVector::uniform(1, 4, 2.0)).unwrap();
        let out = iterative_p1(&set, &uniform_powers(4, 1, 50.0), 50.0, &OptimizerConfig::default()).unwrap();
        assert!(out.converged && out.iterations <= 2);
        let gains: Vec<f64> = set
            .subbands
            .iter()
            .map(|s| s.h.norm_squared() / s.noise)
            .collect();
        let wf = water_fill(&gains, 50.0);
        for (i, p) in out.powers.iter().enumerate() {
            assert!((p[0] - wf.powers[i]).abs() < 1e-9 * 50.0);
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let cfg = tiny();
        let m = model(&cfg, 3);
        let phases = PhaseVector::random(2, 4, 1e-3, &mut ChaCha8Rng::seed_from_u64(5));
        let powers = vec![vec![10.0, 15.0], vec![5.0, 20.0]];
        let ev = evaluate(&m, &m.training_statics, &phases, &powers).unwrap();
        let grad = objective_gradient(&m.training_statics, &ev.channels, &ev.sinr, &powers, &phases, 1e-3).unwrap();
        let h = 1e-6;
        for idx in 0..phases.len() {
            let mut plus = phases.clone();
            plus.phases[idx] += h;
            let mut minus = phases.clone();
            minus.phases[idx] -= h;
            let jp = evaluate(&m, &m.training_statics, &plus, &powers).unwrap().objective;
            let jm = evaluate(&m, &m.training_statics, &minus, &powers).unwrap().objective;
            let fd = (jp - jm) / (2.0 * h);
            assert!((grad[idx] - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "idx={idx} an={} fd={fd}", grad[idx]);
        }
    }

    #[test]
    fn frozen_gradient_entries_are_zero() {
        let cfg = ScenarioConfig {
            num_subbands: 1,
            num_users: 2,
            layers: 3,
            elements_total: 12,
            ..ScenarioConfig::default()
        };
        let m = model(&cfg, 4);
        let mut phases = PhaseVector::random(3, 4, 1e-3, &mut ChaCha8Rng::seed_from_u64(6));
        partial_mode(&mut phases, Mode::LastLayerOnly).unwrap();
        assert_eq!(phases.frozen_count(), 8);
        let powers = uniform_powers(1, 2, 50.0);
        let ev = evaluate(&m, &m.training_statics, &phases, &powers).unwrap();
        let grad = objective_gradient(&m.training_statics, &ev.channels, &ev.sinr, &powers, &phases, 1e-3).unwrap();
        assert!(grad[..8].iter().all(|&g| g == 0.0));
        assert!(grad[8..].iter().any(|&g| g != 0.0));
        phases.frozen.iter_mut().for_each(|f| *f = true);
        let grad = objective_gradient(&m.training_statics, &ev.channels, &ev.sinr, &powers, &phases, 1e-3).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn partial_mode_requires_two_layers() {
        let mut p = PhaseVector::uniform(1, 4, 1.0);
        assert!(partial_mode(&mut p, Mode::LastLayerOnly).unwrap_err().is_config());
        let mut q = PhaseVector::uniform(2, 4, 1.0);
        partial_mode(&mut q, Mode::Full).unwrap();
        assert_eq!(q.frozen_count(), 0);
    }

    #[test]
    fn ascent_is_monotone_and_respects_mask() {
        let cfg = tiny();
        let m = model(&cfg, 7);
        let mut phases = PhaseVector::random(2, 4, 1e-3, &mut ChaCha8Rng::seed_from_u64(7));
        phases.freeze_all_but_last_layer();
        let powers = uniform_powers(2, 2, 50.0);
        let ocfg = OptimizerConfig {
            max_p2_steps: 30,
            ..OptimizerConfig::default()
        };
        let out = gradient_ascent_p2(&m, &phases, &powers, &ocfg).unwrap();
        let j0 = evaluate(&m, &m.training_statics, &phases, &powers).unwrap().objective;
        let mut prev = j0;
        for &j in &out.trace {
            assert!(j > prev);
            prev = j;
        }
        assert_eq!(out.phases.phases[..4], phases.phases[..4]);
    }

    #[test]
    fn ao_trace_is_monotone() {
        let cfg = tiny();
        let m = model(&cfg, 8);
        let ocfg = OptimizerConfig {
            max_outer_iters: 5,
            max_p2_steps: 40,
            ..OptimizerConfig::default()
        };
        let st = alternating_optimize(&m, &ocfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for w in st.objective_trace.windows(2) {
            assert!(w[1].objective >= w[0].objective - 1e-9 * w[0].objective.abs());
        }
        assert!((st.beams.total_power() - 50.0).abs() < 1e-12 * 50.0 * 10.0);
    }

    #[test]
    fn vanishing_power_converges_immediately() {
        let cfg = ScenarioConfig {
            total_power_w: 1e-12,
            ..tiny()
        };
        let m = model(&cfg, 9);
        let st = alternating_optimize(&m, &OptimizerConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(st.converged);
        assert!(st.objective / 15e9 < 1e-3);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Full, Mode::LastLayerOnly, Mode::UniformPower, Mode::RandomPhase] {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("bogus"), None);
    }
}
