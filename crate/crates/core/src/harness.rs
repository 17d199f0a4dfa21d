//! Experiment driver: configuration files, seeded sweeps, goodput and
//! operation-count accounting, CSV output.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{build_subband_grid, sample_users, ChannelModel, ScenarioConfig};
use crate::error::{Error, Result};
use crate::optimizer::{alternating_optimize, rate_curve, spectral_efficiency, Mode, OptimizerConfig, OptimizerState};

pub const CSV_HEADER: [&str; 13] = [
    "sweep_kind",
    "sweep_value",
    "seed",
    "layers_L",
    "elems_per_layer_M",
    "num_users_K",
    "num_subbands_Nf",
    "mode",
    "spectral_efficiency_bpshz",
    "goodput_bpshz",
    "outer_iters",
    "wall_ms",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoodputParams {
    pub bits_per_element: u32,
    pub control_spectral_efficiency: f64,
    pub symbols_per_slot: u32,
}

impl Default for GoodputParams {
    fn default() -> Self {
        Self {
            bits_per_element: 2,
            control_spectral_efficiency: 2.0,
            symbols_per_slot: 700,
        }
    }
}

impl GoodputParams {
    pub fn validate(&self) -> Result<()> {
        if self.bits_per_element == 0 || self.symbols_per_slot == 0 {
            return Err(Error::Config("bits_per_element and symbols_per_slot must be >= 1".into()));
        }
        if !(self.control_spectral_efficiency > 0.0) {
            return Err(Error::Config("control_spectral_efficiency must be > 0".into()));
        }
        Ok(())
    }

    /// Fraction of a slot spent on control signalling for `updated` elements.
    pub fn overhead(&self, updated: usize) -> f64 {
        self.bits_per_element as f64 * updated as f64 / (self.control_spectral_efficiency * self.symbols_per_slot as f64)
    }
}

/// `G = (1 - b M / (eta Ns)) R`, clamped at zero.
pub fn goodput(rate: f64, updated: usize, params: &GoodputParams) -> f64 {
    let factor = 1.0 - params.overhead(updated);
    if factor < 0.0 {
        warn!("control overhead exceeds the slot ({updated} elements); goodput clamped to 0");
        return 0.0;
    }
    factor * rate
}

/// Elements whose state is signalled every slot in a given mode.
pub fn updated_elements(mode: Mode, layers: usize, per_layer: usize) -> usize {
    match mode {
        Mode::Full | Mode::UniformPower => layers * per_layer,
        Mode::LastLayerOnly => per_layer,
        Mode::RandomPhase => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityInputs {
    pub layers: u128,
    pub per_layer: u128,
    pub users: u128,
    pub tx: u128,
    pub subbands: u128,
    pub p1_iters: u128,
    pub p2_iters: u128,
    /// Only the last layer is optimised.
    pub last_layer_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityEstimate {
    /// `B1..B13`.
    pub steps: [u128; 13],
    pub total: u128,
}

/// Operation counts of one alternating-optimisation run.
pub fn complexity_estimate(c: &ComplexityInputs) -> ComplexityEstimate {
    let (l, m, k, nt, nf) = (c.layers, c.per_layer, c.users, c.tx, c.subbands);
    // Steps whose cost scales with the number of optimised layers.
    let lo = if c.last_layer_only { 1 } else { l };
    let b = [
        (18 * l - 6) * nf * m.pow(3) + (2 * nf - 1) * nt * k,
        2 * nt * (m * m + k * m) * nf,
        (3 * m * m + 6 * m) * lo * m * nf,
        2 * nt * (m * m + k * m) * lo * m * nf,
        (((2 * nt - 1) + (2 * nt * nt + 1)) * (k - 1) + nt * nt) * k * nf,
        nt.pow(4) * k * nf,
        k * (2 * nt * nt + nt) * nf,
        2 * k * nt * nf,
        3 * nf * k - 1,
        2 * k * nt * nf,
        nf * k * (2 * nt + (k - 1) * (2 * nt * nt + 2 * nt)),
        2 * lo * m * k * nf,
        2 * lo * m,
    ];
    let p2: u128 = b[..8].iter().sum::<u128>() + b[10] + b[11] + b[12];
    let p1 = b[8] + b[9];
    ComplexityEstimate {
        steps: b,
        total: p2 * c.p2_iters + p1 * c.p1_iters,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// One run of the configured scenario per seed.
    #[default]
    Single,
    Subbands,
    Users,
    Snr,
    Bandwidth,
    FreqResponse,
    GoodputElements,
    Convergence,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Single => "single",
            SweepKind::Subbands => "subbands",
            SweepKind::Users => "users",
            SweepKind::Snr => "snr",
            SweepKind::Bandwidth => "bandwidth",
            SweepKind::FreqResponse => "freq_response",
            SweepKind::GoodputElements => "goodput_elements",
            SweepKind::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Values of the swept dimension. For `snr` these are noise powers in W,
    /// for `freq_response` probe frequencies in Hz (empty: `probe_points`
    /// points across the band).
    pub values: Vec<f64>,
    pub num_seeds: usize,
    /// Master seed; run `r` uses stream `r` of this seed.
    pub seed: u64,
    /// Extra grid dimensions; empty means the scenario/optimizer value.
    pub layers: Vec<usize>,
    pub subbands: Vec<usize>,
    pub modes: Vec<Mode>,
    pub probe_points: usize,
    /// Write measured wall time; when false the column is 0 and output is
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: SweepKind::Single,
            values: Vec::new(),
            num_seeds: 1,
            seed: 1,
            layers: Vec::new(),
            subbands: Vec::new(),
            modes: Vec::new(),
            probe_points: 61,
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub optimizer: OptimizerConfig,
    pub goodput: GoodputParams,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.optimizer.validate()?;
        self.goodput.validate()?;
        let s = &self.sweep;
        if s.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be >= 1".into()));
        }
        let needs_values = !matches!(s.kind, SweepKind::Single | SweepKind::Convergence | SweepKind::FreqResponse);
        if needs_values && s.values.is_empty() {
            return Err(Error::Config(format!("sweep kind {} needs a non-empty value list", s.kind.name())));
        }
        if s.kind == SweepKind::FreqResponse && s.values.is_empty() && s.probe_points < 2 {
            return Err(Error::Config("probe_points must be >= 2".into()));
        }
        let integral = matches!(s.kind, SweepKind::Subbands | SweepKind::Users | SweepKind::GoodputElements);
        if integral && s.values.iter().any(|v| !(*v >= 1.0) || v.fract() != 0.0) {
            return Err(Error::Config(format!("sweep kind {} needs positive integer values", s.kind.name())));
        }
        if s.layers.contains(&0) || s.subbands.contains(&0) {
            return Err(Error::Config("layers and subbands entries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scenario with the swept dimension set to `value`.
pub fn apply_sweep_value(base: &ScenarioConfig, kind: SweepKind, value: f64) -> ScenarioConfig {
    let mut s = base.clone();
    match kind {
        SweepKind::Subbands => s.num_subbands = value as usize,
        SweepKind::Users => s.num_users = value as usize,
        SweepKind::Snr => s.noise_power_w = value,
        SweepKind::Bandwidth => s.bandwidth_hz = value,
        SweepKind::GoodputElements => s.elements_total = value as usize,
        SweepKind::Single | SweepKind::FreqResponse | SweepKind::Convergence => {}
    }
    s
}

/// RNG of run `run` under master seed `seed`.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub sweep_kind: String,
    pub sweep_value: String,
    pub seed: usize,
    pub layers: usize,
    pub per_layer: usize,
    pub users: usize,
    pub subbands: usize,
    pub mode: String,
    pub spectral_efficiency: f64,
    pub goodput: f64,
    pub outer_iters: usize,
    pub wall_ms: u128,
    pub status: String,
}

impl CsvRow {
    fn record(&self) -> [String; 13] {
        [
            self.sweep_kind.clone(),
            self.sweep_value.clone(),
            self.seed.to_string(),
            self.layers.to_string(),
            self.per_layer.to_string(),
            self.users.to_string(),
            self.subbands.to_string(),
            self.mode.clone(),
            self.spectral_efficiency.to_string(),
            self.goodput.to_string(),
            self.outer_iters.to_string(),
            self.wall_ms.to_string(),
            self.status.clone(),
        ]
    }
}

/// A finished optimisation together with the model it ran on.
pub struct RunOutcome {
    pub model: ChannelModel,
    pub state: OptimizerState,
    /// Spectral efficiency on the evaluation grid (bit/s/Hz).
    pub spectral_efficiency: f64,
    pub goodput: f64,
}

/// Draw users and optimise one scenario with the RNG of run `run`.
pub fn run_once(
    scenario: &ScenarioConfig,
    optimizer: &OptimizerConfig,
    goodput_params: &GoodputParams,
    seed: u64,
    run: usize,
) -> Result<RunOutcome> {
    scenario.validate()?;
    let mut rng = run_rng(seed, run);
    let users = sample_users(scenario, &mut rng);
    let model = ChannelModel::new(scenario, users)?;
    let state = alternating_optimize(&model, optimizer, &mut rng)?;
    let eval = model.evaluation_statics()?;
    let se = spectral_efficiency(&model, &eval, &state.phases, &state.beams.powers)?;
    let updated = updated_elements(optimizer.mode, model.stack.num_layers, model.stack.elements_per_layer());
    Ok(RunOutcome {
        goodput: goodput(se, updated, goodput_params),
        spectral_efficiency: se,
        state,
        model,
    })
}

/// Evenly spaced probe frequencies covering the band edges.
pub fn default_probe_grid(scenario: &ScenarioConfig, points: usize) -> Vec<f64> {
    let lo = scenario.center_frequency_hz - scenario.bandwidth_hz / 2.0;
    let step = scenario.bandwidth_hz / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}

/// Sum spectral efficiency (bit/s/Hz) at each probe frequency for a fixed
/// configuration.
pub fn freq_response(outcome: &RunOutcome, probes: &[f64]) -> Result<Vec<f64>> {
    let model = &outcome.model;
    let statics = model.statics_for(probes, 1.0)?;
    rate_curve(model, &statics, &outcome.state.phases, &outcome.state.beams.powers)
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    value: Option<f64>,
    layers: usize,
    subbands: usize,
    mode: Mode,
    run: usize,
}

fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let values: Vec<Option<f64>> = match s.kind {
        SweepKind::Single | SweepKind::Convergence | SweepKind::FreqResponse => vec![None],
        _ => s.values.iter().map(|&v| Some(v)).collect(),
    };
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let layers = or(&s.layers, cfg.scenario.layers);
    let subbands = or(&s.subbands, cfg.scenario.num_subbands);
    let modes = if s.modes.is_empty() {
        vec![cfg.optimizer.mode]
    } else {
        s.modes.clone()
    };
    let mut out = Vec::new();
    for &value in &values {
        for &l in &layers {
            for &nf in &subbands {
                for &mode in &modes {
                    for run in 0..s.num_seeds {
                        out.push(Cell {
                            value,
                            layers: l,
                            subbands: nf,
                            mode,
                            run,
                        });
                    }
                }
            }
        }
    }
    out
}

fn format_value(v: f64) -> String {
    v.to_string()
}

fn run_cell(cfg: &RunConfig, cell: Cell) -> Vec<CsvRow> {
    let kind = cfg.sweep.kind;
    let mut scenario = cfg.scenario.clone();
    scenario.layers = cell.layers;
    scenario.num_subbands = cell.subbands;
    if let Some(v) = cell.value {
        scenario = apply_sweep_value(&scenario, kind, v);
    }
    let optimizer = OptimizerConfig {
        mode: cell.mode,
        ..cfg.optimizer.clone()
    };
    let base = CsvRow {
        sweep_kind: kind.name().to_string(),
        sweep_value: cell.value.map(format_value).unwrap_or_default(),
        seed: cell.run,
        layers: scenario.layers,
        per_layer: scenario.elements_per_layer(),
        users: scenario.num_users,
        subbands: scenario.num_subbands,
        mode: cell.mode.name().to_string(),
        spectral_efficiency: f64::NAN,
        goodput: f64::NAN,
        outer_iters: 0,
        wall_ms: 0,
        status: String::new(),
    };
    let start = Instant::now();
    let outcome = run_once(&scenario, &optimizer, &cfg.goodput, cfg.sweep.seed, cell.run);
    let elapsed = if cfg.sweep.record_timing {
        start.elapsed().as_millis()
    } else {
        0
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            return vec![CsvRow {
                wall_ms: elapsed,
                status: format!("error: {e}"),
                ..base
            }]
        }
    };
    let status = if outcome.state.converged {
        "ok".to_string()
    } else {
        "not_converged".to_string()
    };
    match kind {
        SweepKind::FreqResponse => {
            let probes = if cfg.sweep.values.is_empty() {
                default_probe_grid(&scenario, cfg.sweep.probe_points)
            } else {
                cfg.sweep.values.clone()
            };
            match freq_response(&outcome, &probes) {
                Ok(curve) => probes
                    .iter()
                    .zip(curve)
                    .map(|(&f, se)| CsvRow {
                        sweep_value: format_value(f),
                        spectral_efficiency: se,
                        goodput: goodput(
                            se,
                            updated_elements(cell.mode, scenario.layers, scenario.elements_per_layer()),
                            &cfg.goodput,
                        ),
                        outer_iters: outcome.state.outer_iters,
                        wall_ms: elapsed,
                        status: status.clone(),
                        ..base.clone()
                    })
                    .collect(),
                Err(e) => vec![CsvRow {
                    wall_ms: elapsed,
                    status: format!("error: {e}"),
                    ..base
                }],
            }
        }
        SweepKind::Convergence => {
            let bw = scenario.bandwidth_hz.max(f64::MIN_POSITIVE);
            let updated = updated_elements(cell.mode, scenario.layers, scenario.elements_per_layer());
            outcome
                .state
                .objective_trace
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let se = t.objective / bw;
                    CsvRow {
                        sweep_value: i.to_string(),
                        spectral_efficiency: se,
                        goodput: goodput(se, updated, &cfg.goodput),
                        outer_iters: t.outer,
                        wall_ms: elapsed,
                        status: status.clone(),
                        ..base.clone()
                    }
                })
                .collect()
        }
        _ => vec![CsvRow {
            spectral_efficiency: outcome.spectral_efficiency,
            goodput: outcome.goodput,
            outer_iters: outcome.state.outer_iters,
            wall_ms: elapsed,
            status,
            ..base
        }],
    }
}

/// Run every cell of the sweep. Cells run in parallel; rows come back in
/// grid order.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<CsvRow>> {
    cfg.validate()?;
    let grid = cells(cfg);
    let rows: Vec<Vec<CsvRow>> = grid.par_iter().map(|&c| run_cell(cfg, c)).collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Run the sweep and stream rows to `out` in grid order.
pub fn run_sweep_to<W: Write>(cfg: &RunConfig, out: W) -> Result<Vec<CsvRow>> {
    cfg.validate()?;
    let mut writer = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("cannot write CSV: {e}"));
    writer.write_record(CSV_HEADER).map_err(io)?;
    writer.flush().map_err(|e| Error::Config(format!("cannot write CSV: {e}")))?;
    let mut all = Vec::new();
    // Chunks keep the output incremental while cells inside a chunk run in
    // parallel.
    let grid = cells(cfg);
    let chunk = rayon::current_num_threads().max(1);
    for part in grid.chunks(chunk) {
        let rows: Vec<Vec<CsvRow>> = part.par_iter().map(|&c| run_cell(cfg, c)).collect();
        for row in rows.into_iter().flatten() {
            writer.write_record(row.record()).map_err(io)?;
            all.push(row);
        }
        writer.flush().map_err(|e| Error::Config(format!("cannot write CSV: {e}")))?;
    }
    Ok(all)
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("cannot write CSV: {e}"));
    writer.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        writer.write_record(r.record()).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::Config(format!("cannot write CSV: {e}")))
}

/// Check that a training grid for `scenario` exists; used by CLI front-ends
/// before launching long sweeps.
pub fn check_grid(scenario: &ScenarioConfig) -> Result<()> {
    build_subband_grid(scenario.center_frequency_hz, scenario.bandwidth_hz, scenario.num_subbands).map(|_| ())
}
