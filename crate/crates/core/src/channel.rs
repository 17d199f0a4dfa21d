//! Per-subband end-to-end channels `H_i = H2_i G_{2L,1}(f_i) H1_i`.
//!
//! Everything that does not depend on the phases (stack coupling, `H1`, `H2`)
//! is computed once per frequency in [`FrequencyStatics`]; a phase update only
//! re-solves the block-tridiagonal system.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{assemble_coupling, self_impedance, AntennaParams, ArrayGeometry};
use crate::error::{Error, Result};
use crate::network::{
    stack_coupling, PhaseVector, SimBlocks, SimStack, StackCoupling, SystemSolve, SINGULARITY_GUARD,
};

type CMat = DMatrix<Complex64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SubbandGrid {
    pub center_frequency: f64,
    pub total_bandwidth: f64,
    pub num_subbands: usize,
    pub centers: Vec<f64>,
    /// Bandwidth of each subband, `B / Nf`.
    pub weight: f64,
}

pub fn build_subband_grid(fc: f64, bandwidth: f64, num_subbands: usize) -> Result<SubbandGrid> {
    if num_subbands == 0 {
        return Err(Error::Config("number of subbands must be >= 1".into()));
    }
    if !(bandwidth >= 0.0) || !bandwidth.is_finite() {
        return Err(Error::Config(format!("bandwidth must be >= 0, got {bandwidth}")));
    }
    if !(fc > bandwidth / 2.0) {
        return Err(Error::Domain(format!(
            "band [{}, {}] Hz reaches non-positive frequencies",
            fc - bandwidth / 2.0,
            fc + bandwidth / 2.0
        )));
    }
    let weight = bandwidth / num_subbands as f64;
    let centers = (0..num_subbands)
        .map(|i| fc - bandwidth / 2.0 + (i as f64 + 0.5) * weight)
        .collect();
    Ok(SubbandGrid {
        center_frequency: fc,
        total_bandwidth: bandwidth,
        num_subbands,
        centers,
        weight,
    })
}

impl SubbandGrid {
    /// Index of the subband whose interval contains `f`; frequencies outside
    /// the band map to the nearest edge subband.
    pub fn containing(&self, f: f64) -> usize {
        if self.weight == 0.0 {
            return 0;
        }
        let lo = self.center_frequency - self.total_bandwidth / 2.0;
        let idx = ((f - lo) / self.weight).floor();
        idx.clamp(0.0, (self.num_subbands - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathAngles {
    /// Elevation from the SIM broadside (rad).
    pub elevation: f64,
    /// Azimuth (rad).
    pub azimuth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserGeometry {
    pub distance: f64,
    pub paths: Vec<PathAngles>,
    pub gain_sim: f64,
    pub gain_user: f64,
    pub receiver: AntennaParams,
}

impl UserGeometry {
    pub fn elevation(&self) -> f64 {
        self.paths[0].elevation
    }

    pub fn azimuth(&self) -> f64 {
        self.paths[0].azimuth
    }

    pub fn path_count(&self) -> usize {
        self.paths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0) {
            return Err(Error::Domain(format!("user distance must be > 0, got {}", self.distance)));
        }
        if self.paths.is_empty() {
            return Err(Error::Config("user needs at least one path".into()));
        }
        if !(self.gain_sim > 0.0 && self.gain_user > 0.0) {
            return Err(Error::Config("antenna gains must be > 0".into()));
        }
        self.receiver.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UserSampling {
    pub distance_min_m: f64,
    pub distance_max_m: f64,
    pub azimuth_max_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for UserSampling {
    fn default() -> Self {
        Self {
            distance_min_m: 10.0,
            distance_max_m: 20.0,
            azimuth_max_deg: 60.0,
            elevation_max_deg: 30.0,
        }
    }
}

/// How the configured noise power is spread over subbands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `noise_power_w` is the total over the band; subband `i` gets
    /// `sigma^2 B_i / B`.
    #[default]
    FlatPsd,
    /// Every subband gets the full `noise_power_w`.
    PerSubband,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub center_frequency_hz: f64,
    pub bandwidth_hz: f64,
    pub num_subbands: usize,
    pub num_users: usize,
    /// Defaults to the number of users.
    pub num_tx: Option<usize>,
    pub total_power_w: f64,
    pub noise_power_w: f64,
    pub noise_model: NoiseModel,
    pub path_loss_exponent: f64,
    pub num_paths: usize,
    pub gain_sim: f64,
    pub gain_user: f64,
    /// Defaults to five centre wavelengths.
    pub bs_to_first_layer_m: Option<f64>,
    /// Points of the fixed grid on which spectral efficiency is reported.
    pub eval_points: usize,
    pub layers: usize,
    /// Meta-atoms over all layers; must be divisible by `layers`.
    pub elements_total: usize,
    /// Per-layer grid `[nx, ny]`; defaults to the most square factorisation.
    pub grid: Option<[usize; 2]>,
    pub element_spacing_x_m: f64,
    pub element_spacing_y_m: f64,
    /// Defaults to half a centre wavelength.
    pub layer_spacing_m: Option<f64>,
    pub antenna: AntennaParams,
    pub users: UserSampling,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            center_frequency_hz: 27e9,
            bandwidth_hz: 15e9,
            num_subbands: 15,
            num_users: 5,
            num_tx: None,
            total_power_w: 50.0,
            noise_power_w: 1e-7,
            noise_model: NoiseModel::FlatPsd,
            path_loss_exponent: 2.0,
            num_paths: 1,
            gain_sim: 1.0,
            gain_user: 1.0,
            bs_to_first_layer_m: None,
            eval_points: 60,
            layers: 2,
            elements_total: 100,
            grid: None,
            element_spacing_x_m: 5.56e-3,
            element_spacing_y_m: 5.56e-3,
            layer_spacing_m: None,
            antenna: AntennaParams::default(),
            users: UserSampling::default(),
        }
    }
}

fn most_square_grid(m: usize) -> [usize; 2] {
    let mut nx = (m as f64).sqrt().floor() as usize;
    while nx > 1 && m % nx != 0 {
        nx -= 1;
    }
    let nx = nx.max(1);
    [nx, m / nx]
}

impl ScenarioConfig {
    pub fn center_wavelength(&self) -> f64 {
        self.antenna.speed_of_light / self.center_frequency_hz
    }

    pub fn num_tx(&self) -> usize {
        self.num_tx.unwrap_or(self.num_users)
    }

    pub fn bs_distance(&self) -> f64 {
        self.bs_to_first_layer_m.unwrap_or(5.0 * self.center_wavelength())
    }

    pub fn layer_spacing(&self) -> f64 {
        self.layer_spacing_m.unwrap_or(0.5 * self.center_wavelength())
    }

    pub fn elements_per_layer(&self) -> usize {
        self.elements_total / self.layers.max(1)
    }

    pub fn noise_for(&self, grid: &SubbandGrid) -> f64 {
        match self.noise_model {
            NoiseModel::FlatPsd => self.noise_power_w / grid.num_subbands as f64,
            NoiseModel::PerSubband => self.noise_power_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("center_frequency_hz", self.center_frequency_hz),
            ("total_power_w", self.total_power_w),
            ("noise_power_w", self.noise_power_w),
            ("path_loss_exponent", self.path_loss_exponent),
            ("gain_sim", self.gain_sim),
            ("gain_user", self.gain_user),
            ("element_spacing_x_m", self.element_spacing_x_m),
            ("element_spacing_y_m", self.element_spacing_y_m),
            ("bs_to_first_layer_m", self.bs_distance()),
            ("layer_spacing_m", self.layer_spacing()),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a positive finite number, got {v}")));
            }
        }
        for (name, v) in [
            ("num_subbands", self.num_subbands),
            ("num_users", self.num_users),
            ("num_tx", self.num_tx()),
            ("num_paths", self.num_paths),
            ("eval_points", self.eval_points),
            ("layers", self.layers),
            ("elements_total", self.elements_total),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.elements_total % self.layers != 0 {
            return Err(Error::Config(format!(
                "elements_total {} is not divisible by layers {}",
                self.elements_total, self.layers
            )));
        }
        if let Some([nx, ny]) = self.grid {
            if nx * ny != self.elements_per_layer() {
                return Err(Error::Config(format!(
                    "grid {nx}x{ny} does not hold {} elements per layer",
                    self.elements_per_layer()
                )));
            }
        }
        let u = &self.users;
        if !(u.distance_min_m > 0.0 && u.distance_max_m >= u.distance_min_m) {
            return Err(Error::Config("user distance range must satisfy 0 < min <= max".into()));
        }
        if !(u.azimuth_max_deg >= 0.0 && u.elevation_max_deg >= 0.0 && u.elevation_max_deg < 90.0) {
            return Err(Error::Config("user angle ranges must be >= 0 and elevation < 90 deg".into()));
        }
        self.antenna.validate().map_err(|e| Error::Config(e.to_string()))?;
        build_subband_grid(self.center_frequency_hz, self.bandwidth_hz, self.num_subbands)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Per-layer grid. Without an explicit `grid`, a square total
    /// `s x s` is split along y into `s x (s / L)`; otherwise the most square
    /// factorisation of the per-layer count is used.
    pub fn grid_shape(&self) -> [usize; 2] {
        if let Some(g) = self.grid {
            return g;
        }
        let s = (self.elements_total as f64).sqrt().round() as usize;
        if s * s == self.elements_total && self.layers > 0 && s % self.layers == 0 {
            [s, s / self.layers]
        } else {
            most_square_grid(self.elements_per_layer())
        }
    }

    pub fn layer_geometry(&self) -> ArrayGeometry {
        let [nx, ny] = self.grid_shape();
        ArrayGeometry::new(nx, ny, self.element_spacing_x_m, self.element_spacing_y_m)
    }

    pub fn stack(&self) -> Result<SimStack> {
        self.validate()?;
        let stack = SimStack {
            num_layers: self.layers,
            layer_geometry: self.layer_geometry(),
            layer_spacing: self.layer_spacing(),
            antenna: self.antenna,
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Linear BS array along x in the plane `z = 0`, facing the SIM.
    pub fn bs_geometry(&self) -> ArrayGeometry {
        ArrayGeometry::new(self.num_tx(), 1, self.element_spacing_x_m, self.element_spacing_y_m)
    }

    pub fn training_grid(&self) -> Result<SubbandGrid> {
        build_subband_grid(self.center_frequency_hz, self.bandwidth_hz, self.num_subbands)
    }

    pub fn evaluation_grid(&self) -> Result<SubbandGrid> {
        build_subband_grid(self.center_frequency_hz, self.bandwidth_hz, self.eval_points)
    }
}

/// Draw `K` users: distance uniform in the configured range, per-path
/// azimuth and elevation uniform in symmetric sectors.
pub fn sample_users<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<UserGeometry> {
    let s = &cfg.users;
    let az = s.azimuth_max_deg.to_radians();
    let el = s.elevation_max_deg.to_radians();
    let draw = |rng: &mut R, half: f64| if half > 0.0 { rng.gen_range(-half..=half) } else { 0.0 };
    (0..cfg.num_users)
        .map(|_| {
            let distance = if s.distance_max_m > s.distance_min_m {
                rng.gen_range(s.distance_min_m..=s.distance_max_m)
            } else {
                s.distance_min_m
            };
            let paths = (0..cfg.num_paths)
                .map(|_| {
                    let azimuth = draw(rng, az);
                    let elevation = draw(rng, el);
                    PathAngles { elevation, azimuth }
                })
                .collect();
            UserGeometry {
                distance,
                paths,
                gain_sim: cfg.gain_sim,
                gain_user: cfg.gain_user,
                receiver: cfg.antenna,
            }
        })
        .collect()
}

/// `H1`: transimpedance from the BS array to the first SIM facing (M x Nt).
pub fn bs_to_sim_coupling(cfg: &ScenarioConfig, stack: &SimStack, f: f64) -> Result<CMat> {
    let sim = stack.layer_geometry.at_offset(cfg.bs_distance());
    Ok(assemble_coupling(f, &sim, &cfg.bs_geometry(), &stack.antenna)?.entries)
}

pub fn steering_vector_planar(mx: usize, my: usize, d_s: f64, lambda: f64, phi: f64, psi: f64) -> DVector<Complex64> {
    steering_vector_xy(mx, my, d_s, d_s, lambda, phi, psi)
}

/// `a_x(sin phi sin psi) kron a_y(sin phi cos psi)`; entry `ix * my + iy`.
pub fn steering_vector_xy(
    mx: usize,
    my: usize,
    dx: f64,
    dy: f64,
    lambda: f64,
    phi: f64,
    psi: f64,
) -> DVector<Complex64> {
    let kx = 2.0 * PI * dx / lambda * phi.sin() * psi.sin();
    let ky = 2.0 * PI * dy / lambda * phi.sin() * psi.cos();
    DVector::from_iterator(
        mx * my,
        (0..mx).flat_map(|ix| (0..my).map(move |iy| Complex64::from_polar(1.0, kx * ix as f64 + ky * iy as f64))),
    )
}

/// Phase offset of the far-field link between two TM1 antennas of radii
/// `a_s`, `a_r`.
pub fn far_field_phase_offset(f: f64, a_s: f64, a_r: f64, c: f64) -> f64 {
    PI - (2.0 * PI * f * a_s / c).atan() - (2.0 * PI * f * a_r / c).atan()
}

/// `H2` (K x M) for single-antenna users at frequency `f`.
pub fn far_field_transimpedance(
    cfg: &ScenarioConfig,
    stack: &SimStack,
    users: &[UserGeometry],
    f: f64,
    z11_last_diag: &DVector<Complex64>,
) -> Result<CMat> {
    let g = &stack.layer_geometry;
    let m = g.len();
    if z11_last_diag.len() != m {
        return Err(Error::Index(format!(
            "last-layer self-impedance has {} entries, stack has {m}",
            z11_last_diag.len()
        )));
    }
    let c = stack.antenna.speed_of_light;
    let lambda = c / f;
    let sim_scale: DVector<f64> = z11_last_diag.map(|z| z.re.max(0.0).sqrt());
    let mut h2 = CMat::zeros(users.len(), m);
    for (k, u) in users.iter().enumerate() {
        u.validate()?;
        let z_rr = self_impedance(f, &u.receiver)?;
        let phi0 = far_field_phase_offset(f, stack.antenna.radius, u.receiver.radius, c);
        let amp = c * (u.gain_sim * u.gain_user).sqrt() / (2.0 * PI * f * u.distance.powf(cfg.path_loss_exponent / 2.0))
            * z_rr.re.sqrt();
        let coeff = Complex64::from_polar(amp, -phi0);
        let mut a = DVector::<Complex64>::zeros(m);
        for p in &u.paths {
            a += steering_vector_xy(g.nx, g.ny, g.dx, g.dy, lambda, p.elevation, p.azimuth);
        }
        for e in 0..m {
            h2[(k, e)] = coeff * a[e] * sim_scale[e];
        }
    }
    Ok(h2)
}

/// Phase-independent parts of the channel at one frequency.
#[derive(Debug, Clone)]
pub struct FrequencyStatics {
    pub frequency: f64,
    /// Bandwidth this frequency stands for in rate sums (Hz).
    pub weight: f64,
    pub noise: f64,
    /// Training subband whose powers apply at this frequency.
    pub power_index: usize,
    pub coupling: StackCoupling,
    pub h1: CMat,
    pub h2: CMat,
}

#[derive(Debug, Clone)]
pub struct SubbandChannel {
    pub frequency: f64,
    pub weight: f64,
    pub noise: f64,
    pub power_index: usize,
    pub solve: SystemSolve,
    /// `G_{r,1} H1` for every facing `r`.
    pub x: Vec<CMat>,
    /// Effective channel, K x Nt.
    pub h: CMat,
}

#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub subbands: Vec<SubbandChannel>,
}

impl ChannelSet {
    pub fn len(&self) -> usize {
        self.subbands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subbands.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.subbands.iter().map(|s| s.weight).sum()
    }
}

/// A scenario with a fixed user drop and its per-frequency caches.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub config: ScenarioConfig,
    pub stack: SimStack,
    pub users: Vec<UserGeometry>,
    pub training: SubbandGrid,
    pub training_statics: Vec<FrequencyStatics>,
    /// Minimum distance of any phase from a multiple of pi.
    pub guard: f64,
}

impl ChannelModel {
    pub fn new(config: &ScenarioConfig, users: Vec<UserGeometry>) -> Result<Self> {
        let stack = config.stack()?;
        if users.len() != config.num_users {
            return Err(Error::Config(format!(
                "{} users given, scenario expects {}",
                users.len(),
                config.num_users
            )));
        }
        let training = config.training_grid()?;
        let mut model = Self {
            config: config.clone(),
            stack,
            users,
            training,
            training_statics: Vec::new(),
            guard: SINGULARITY_GUARD,
        };
        model.training_statics = model.statics_for(&model.training.centers, model.training.weight)?;
        Ok(model)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_tx(&self) -> usize {
        self.config.num_tx()
    }

    pub fn num_subbands(&self) -> usize {
        self.training.num_subbands
    }

    /// Statics at arbitrary frequencies, each standing for `weight` Hz. Power
    /// and noise follow the training subband containing the frequency.
    pub fn statics_for(&self, freqs: &[f64], weight: f64) -> Result<Vec<FrequencyStatics>> {
        let noise = self.config.noise_for(&self.training);
        freqs
            .par_iter()
            .enumerate()
            .map(|(i, &f)| self.statics_at(f, weight, noise).map_err(|e| e.in_subband(i)))
            .collect()
    }

    fn statics_at(&self, f: f64, weight: f64, noise: f64) -> Result<FrequencyStatics> {
        let coupling = stack_coupling(&self.stack, f)?;
        let h1 = bs_to_sim_coupling(&self.config, &self.stack, f)?;
        let z11 = coupling.intra.diagonal();
        let h2 = far_field_transimpedance(&self.config, &self.stack, &self.users, f, &z11)?;
        Ok(FrequencyStatics {
            frequency: f,
            weight,
            noise,
            power_index: self.training.containing(f),
            coupling,
            h1,
            h2,
        })
    }

    pub fn evaluation_statics(&self) -> Result<Vec<FrequencyStatics>> {
        let grid = self.config.evaluation_grid()?;
        self.statics_for(&grid.centers, grid.weight)
    }

    /// Channels on the training grid.
    pub fn channels(&self, phases: &PhaseVector) -> Result<ChannelSet> {
        self.channels_on(&self.training_statics, phases)
    }

    pub fn channels_on(&self, statics: &[FrequencyStatics], phases: &PhaseVector) -> Result<ChannelSet> {
        let subbands = statics
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.subband_channel(s, phases).map_err(|e| e.in_subband(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ChannelSet { subbands })
    }

    fn subband_channel(&self, s: &FrequencyStatics, phases: &PhaseVector) -> Result<SubbandChannel> {
        let blocks = SimBlocks::from_coupling_guarded(&s.coupling, &self.stack, phases, self.guard)?;
        let solve = SystemSolve::new(&blocks)?;
        let x = solve.column(&s.h1);
        let h = &s.h2 * x.last().expect("at least one facing");
        Ok(SubbandChannel {
            frequency: s.frequency,
            weight: s.weight,
            noise: s.noise,
            power_index: s.power_index,
            solve,
            x,
            h,
        })
    }
}
