//! Multiport impedance model of the stacked metasurface.
//!
//! A stack of `L` transmissive layers with `M` meta-atoms each exposes `2LM`
//! ports, grouped into `2L` facings of `M` ports. Facing order is
//! `(layer 1 receive, layer 1 transmit, layer 2 receive, ..., layer L transmit)`.
//! The structural impedance `Z_SS` couples the transmit facing of layer `l`
//! with the receive facing of layer `l + 1`; the load network `Z_S(phi)` ties
//! the two facings of each meta-atom through a lossless two-port phase
//! shifter. `Z_SS + Z_S` is therefore block tridiagonal in `M x M` blocks.
//!
//! Only the first block column and last block row of `G = (Z_SS + Z_S)^-1`
//! are ever needed: the column gives `G_{2L,1}` and the `r` vectors of the
//! phase derivative, the row gives the `c` vectors.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocktri::{Block, BlockLu, BlockTridiagonal};
use crate::em::{assemble_coupling, AntennaParams, ArrayGeometry};
use crate::error::{Error, Result};

type CMat = DMatrix<Complex64>;

pub const REFERENCE_IMPEDANCE: f64 = 50.0;
pub const SINGULARITY_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimStack {
    pub num_layers: usize,
    /// Grid of a single facing; every facing of every layer uses it.
    pub layer_geometry: ArrayGeometry,
    /// Axial distance between consecutive layers (m).
    pub layer_spacing: f64,
    pub antenna: AntennaParams,
}

impl SimStack {
    pub fn elements_per_layer(&self) -> usize {
        self.layer_geometry.len()
    }

    pub fn total_elements(&self) -> usize {
        self.num_layers * self.elements_per_layer()
    }

    pub fn total_ports(&self) -> usize {
        2 * self.total_elements()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("stack needs at least one layer".into()));
        }
        self.layer_geometry.validate()?;
        self.antenna.validate()?;
        if self.num_layers > 1 && !(self.layer_spacing > 0.0) {
            return Err(Error::Config(format!(
                "layer spacing must be > 0 for a multi-layer stack, got {}",
                self.layer_spacing
            )));
        }
        Ok(())
    }
}

/// Phase of every meta-atom, indexed `layer * M + element`, with a mask of
/// entries the optimiser must leave untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseVector {
    pub layers: usize,
    pub per_layer: usize,
    pub phases: Vec<f64>,
    pub frozen: Vec<bool>,
}

impl PhaseVector {
    pub fn new(layers: usize, per_layer: usize, phases: Vec<f64>) -> Result<Self> {
        if phases.len() != layers * per_layer {
            return Err(Error::Index(format!(
                "expected {} phases, got {}",
                layers * per_layer,
                phases.len()
            )));
        }
        Ok(Self {
            layers,
            per_layer,
            frozen: vec![false; phases.len()],
            phases,
        })
    }

    pub fn uniform(layers: usize, per_layer: usize, phi: f64) -> Self {
        Self::new(layers, per_layer, vec![phi; layers * per_layer]).expect("length matches by construction")
    }

    /// I.i.d. draws from the admissible set
    /// `(guard, pi - guard) U (pi + guard, 2 pi - guard)`.
    pub fn random<R: Rng + ?Sized>(layers: usize, per_layer: usize, guard: f64, rng: &mut R) -> Self {
        let half = PI - 2.0 * guard;
        let phases = (0..layers * per_layer)
            .map(|_| {
                let u = rng.gen_range(0.0..2.0 * half);
                if u < half {
                    guard + u
                } else {
                    PI + guard + (u - half)
                }
            })
            .collect();
        Self::new(layers, per_layer, phases).expect("length matches by construction")
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn index(&self, layer: usize, element: usize) -> usize {
        layer * self.per_layer + element
    }

    pub fn get(&self, layer: usize, element: usize) -> f64 {
        self.phases[self.index(layer, element)]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.phases[layer * self.per_layer..(layer + 1) * self.per_layer]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    /// Freeze every layer except the last one.
    pub fn freeze_all_but_last_layer(&mut self) {
        let cut = (self.layers - 1) * self.per_layer;
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = i < cut;
        }
    }

    pub fn unfreeze(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = false);
    }

    /// Project every free phase into the admissible set.
    pub fn project(&mut self, guard: f64) {
        for (phi, &frozen) in self.phases.iter_mut().zip(&self.frozen) {
            if !frozen {
                *phi = project_phase(*phi, guard);
            }
        }
    }
}

/// Wrap into `[0, 2 pi)` and push away from `0`, `pi` and `2 pi` by at least
/// `guard`.
pub fn project_phase(phi: f64, guard: f64) -> f64 {
    let mut w = phi.rem_euclid(TAU);
    if w >= TAU {
        w = 0.0;
    }
    if w < guard {
        guard
    } else if w > TAU - guard {
        TAU - guard
    } else if (w - PI).abs() < guard {
        if w < PI {
            PI - guard
        } else {
            PI + guard
        }
    } else {
        w
    }
}

/// Angular distance from `phi` to the nearest multiple of pi.
pub fn singular_distance(phi: f64) -> f64 {
    let w = phi.rem_euclid(PI);
    w.min(PI - w)
}

fn check_guard(phi: f64, guard: f64) -> Result<f64> {
    let s = phi.sin();
    // The slack admits phases that projection placed exactly on the guard.
    if singular_distance(phi) < guard * (1.0 - 1e-9) || s == 0.0 {
        return Err(Error::Singularity { phase: phi, guard });
    }
    Ok(s)
}

/// Two-port impedance matrix of a lossless phase shifter with transmission
/// `e^{j phi}`, referred to `z0`.
pub fn phase_to_load_block(phi: f64, z0: f64) -> Result<Matrix2<Complex64>> {
    phase_to_load_block_guarded(phi, z0, SINGULARITY_GUARD)
}

pub fn phase_to_load_block_guarded(phi: f64, z0: f64, guard: f64) -> Result<Matrix2<Complex64>> {
    let s = check_guard(phi, guard)?;
    let j = Complex64::new(0.0, z0);
    let diag = j * (phi.cos() / s);
    let off = j / s;
    Ok(Matrix2::new(diag, off, off, diag))
}

/// Derivative of [`phase_to_load_block`] with respect to `phi`.
pub fn local_impedance_gradient(phi: f64, z0: f64) -> Result<Matrix2<Complex64>> {
    local_impedance_gradient_guarded(phi, z0, SINGULARITY_GUARD)
}

pub fn local_impedance_gradient_guarded(phi: f64, z0: f64, guard: f64) -> Result<Matrix2<Complex64>> {
    let s = check_guard(phi, guard)?;
    let cot = phi.cos() / s;
    let mj = Complex64::new(0.0, -z0);
    let diag = mj * (1.0 + cot * cot);
    let off = mj * (phi.cos() / (s * s));
    Ok(Matrix2::new(diag, off, off, diag))
}

/// Frequency-dependent structural impedances of a stack: the intra-facing
/// matrix (all facings share one grid) and the transimpedance between facing
/// grids of adjacent layers.
#[derive(Debug, Clone)]
pub struct StackCoupling {
    pub frequency: f64,
    pub intra: CMat,
    pub inter: CMat,
}

pub fn stack_coupling(stack: &SimStack, f: f64) -> Result<StackCoupling> {
    stack.validate()?;
    let g = stack.layer_geometry;
    let intra = assemble_coupling(f, &g, &g, &stack.antenna)?.entries;
    let inter = if stack.num_layers > 1 {
        assemble_coupling(f, &g, &g.at_offset(stack.layer_spacing), &stack.antenna)?.entries
    } else {
        CMat::zeros(g.len(), g.len())
    };
    Ok(StackCoupling { frequency: f, intra, inter })
}

/// Blocks coupling the transmit facing of layer `l` with the receive facing
/// of layer `l + 1`: `z11` and `z22` are the self blocks of those facings,
/// `z12` / `z21` the transimpedances.
#[derive(Debug, Clone)]
pub struct InterLayerBlocks {
    pub z11: CMat,
    pub z12: CMat,
    pub z21: CMat,
    pub z22: CMat,
}

#[derive(Debug, Clone)]
pub struct SimBlocks {
    pub frequency: f64,
    pub layers: usize,
    pub per_layer: usize,
    pub z0: f64,
    pub inter_layer: Vec<InterLayerBlocks>,
    /// Self block of the receive facing of the first layer.
    pub first_boundary: CMat,
    /// Self block of the transmit facing of the last layer.
    pub last_boundary: CMat,
    /// Two-port load of every meta-atom, indexed `layer * M + element`.
    pub loads: Vec<Matrix2<Complex64>>,
    /// Whether the assembled `Z_SS + Z_S` is complex symmetric.
    pub symmetric: bool,
}

fn load_blocks(phases: &PhaseVector, z0: f64, guard: f64) -> Result<Vec<Matrix2<Complex64>>> {
    phases
        .phases
        .iter()
        .map(|&phi| phase_to_load_block_guarded(phi, z0, guard))
        .collect()
}

impl SimBlocks {
    pub fn from_coupling(coupling: &StackCoupling, stack: &SimStack, phases: &PhaseVector) -> Result<Self> {
        Self::from_coupling_guarded(coupling, stack, phases, SINGULARITY_GUARD)
    }

    pub fn from_coupling_guarded(
        coupling: &StackCoupling,
        stack: &SimStack,
        phases: &PhaseVector,
        guard: f64,
    ) -> Result<Self> {
        check_phase_shape(stack, phases)?;
        let inter_layer = (1..stack.num_layers)
            .map(|_| InterLayerBlocks {
                z11: coupling.intra.clone(),
                z12: coupling.inter.clone(),
                z21: coupling.inter.transpose(),
                z22: coupling.intra.clone(),
            })
            .collect();
        Ok(Self {
            frequency: coupling.frequency,
            layers: stack.num_layers,
            per_layer: stack.elements_per_layer(),
            z0: REFERENCE_IMPEDANCE,
            inter_layer,
            first_boundary: coupling.intra.clone(),
            last_boundary: coupling.intra.clone(),
            loads: load_blocks(phases, REFERENCE_IMPEDANCE, guard)?,
            symmetric: true,
        })
    }

    /// Decoupled, matched stack: all self blocks `Z0 I`, no backward
    /// transimpedance (`z12 = 0`), forward transimpedance `z21` taken from the
    /// physical model. The resulting system is not symmetric.
    pub fn idealized(stack: &SimStack, phases: &PhaseVector, f: f64) -> Result<Self> {
        check_phase_shape(stack, phases)?;
        let coupling = stack_coupling(stack, f)?;
        let m = stack.elements_per_layer();
        let z0 = REFERENCE_IMPEDANCE;
        let matched = CMat::identity(m, m) * Complex64::new(z0, 0.0);
        let inter_layer = (1..stack.num_layers)
            .map(|_| InterLayerBlocks {
                z11: matched.clone(),
                z12: CMat::zeros(m, m),
                z21: coupling.inter.transpose(),
                z22: matched.clone(),
            })
            .collect();
        Ok(Self {
            frequency: f,
            layers: stack.num_layers,
            per_layer: m,
            z0,
            inter_layer,
            first_boundary: matched.clone(),
            last_boundary: matched,
            loads: load_blocks(phases, z0, SINGULARITY_GUARD)?,
            symmetric: false,
        })
    }

    pub fn num_facings(&self) -> usize {
        2 * self.layers
    }

    /// `Z_SS + Z_S` in block-tridiagonal form.
    pub fn system(&self) -> BlockTridiagonal {
        let m = self.per_layer;
        let n = self.num_facings();
        let mut diag = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n - 1);
        let mut lower = Vec::with_capacity(n - 1);
        let load_diag = |l: usize, a: usize, b: usize| {
            DVector::from_iterator(m, (0..m).map(|e| self.loads[l * m + e][(a, b)]))
        };
        for l in 0..self.layers {
            let rx_self = if l == 0 {
                &self.first_boundary
            } else {
                &self.inter_layer[l - 1].z22
            };
            let tx_self = if l + 1 == self.layers {
                &self.last_boundary
            } else {
                &self.inter_layer[l].z11
            };
            diag.push(rx_self + CMat::from_diagonal(&load_diag(l, 0, 0)));
            diag.push(tx_self + CMat::from_diagonal(&load_diag(l, 1, 1)));
            upper.push(Block::Diagonal(load_diag(l, 0, 1)));
            lower.push(Block::Diagonal(load_diag(l, 1, 0)));
            if l + 1 < self.layers {
                upper.push(Block::Dense(self.inter_layer[l].z12.clone()));
                lower.push(Block::Dense(self.inter_layer[l].z21.clone()));
            }
        }
        BlockTridiagonal { diag, upper, lower }
    }

    pub fn dense(&self) -> CMat {
        self.system().to_dense()
    }
}

fn check_phase_shape(stack: &SimStack, phases: &PhaseVector) -> Result<()> {
    if phases.layers != stack.num_layers || phases.per_layer != stack.elements_per_layer() {
        return Err(Error::Index(format!(
            "phase vector is {}x{}, stack is {}x{}",
            phases.layers,
            phases.per_layer,
            stack.num_layers,
            stack.elements_per_layer()
        )));
    }
    Ok(())
}

pub fn assemble_sim_blocks(stack: &SimStack, phases: &PhaseVector, f: f64) -> Result<SimBlocks> {
    let coupling = stack_coupling(stack, f)?;
    SimBlocks::from_coupling(&coupling, stack, phases)
}

/// First block column and last block row of `G = (Z_SS + Z_S)^-1`.
/// Block indices here are zero-based: `first_column[r] = G_{r,0}`,
/// `last_row[c] = G_{2L-1,c}`.
#[derive(Debug, Clone)]
pub struct GBlocks {
    pub frequency: f64,
    pub layers: usize,
    pub per_layer: usize,
    pub first_column: Vec<CMat>,
    pub last_row: Vec<CMat>,
}

impl GBlocks {
    /// Transmissive response from the first facing to the last, `G_{2L,1}`.
    pub fn response(&self) -> &CMat {
        self.first_column.last().expect("at least one layer")
    }
}

fn layer_of_block(r: usize) -> usize {
    r / 2 + 1
}

/// Factorised `Z_SS + Z_S` that applies the first block column and the
/// last block row of its inverse to narrow matrices. Symmetric systems reuse
/// one factorisation for both; otherwise the transpose is factorised too.
#[derive(Debug, Clone)]
pub struct SystemSolve {
    lu: BlockLu,
    transposed: Option<BlockLu>,
}

impl SystemSolve {
    pub fn new(blocks: &SimBlocks) -> Result<Self> {
        let system = blocks.system();
        let lu = system.factor(layer_of_block)?;
        let transposed = if blocks.symmetric {
            None
        } else {
            Some(system.transpose().factor(layer_of_block)?)
        };
        Ok(Self { lu, transposed })
    }

    pub fn num_blocks(&self) -> usize {
        self.lu.num_blocks()
    }

    /// `[G_{r,1} b]_r` for `b` with `M` rows.
    pub fn column(&self, b: &CMat) -> Vec<CMat> {
        self.lu.solve_single(0, b)
    }

    /// `[b G_{2L,r}]_r` for `b` with `M` columns.
    pub fn row(&self, b: &CMat) -> Vec<CMat> {
        let lu = self.transposed.as_ref().unwrap_or(&self.lu);
        lu.solve_single(self.num_blocks() - 1, &b.transpose())
            .into_iter()
            .map(|z| z.transpose())
            .collect()
    }
}

/// Structured solve for the needed blocks of `G`.
pub fn compute_g_blocks(blocks: &SimBlocks) -> Result<GBlocks> {
    let m = blocks.per_layer;
    let solve = SystemSolve::new(blocks)?;
    let id = CMat::identity(m, m);
    let first_column = solve.column(&id);
    let last_row = solve.row(&id);
    Ok(GBlocks {
        frequency: blocks.frequency,
        layers: blocks.layers,
        per_layer: m,
        first_column,
        last_row,
    })
}

/// Same blocks through a dense inverse. Reference path for small systems.
pub fn dense_g_blocks(blocks: &SimBlocks) -> Result<GBlocks> {
    let a = blocks.dense();
    let m = blocks.per_layer;
    let n = blocks.num_facings();
    let g = a
        .try_inverse()
        .ok_or_else(|| Error::Singular("dense Z_SS + Z_S".into()))?;
    Ok(GBlocks {
        frequency: blocks.frequency,
        layers: blocks.layers,
        per_layer: m,
        first_column: (0..n).map(|r| g.view((r * m, 0), (m, m)).into_owned()).collect(),
        last_row: (0..n).map(|c| g.view(((n - 1) * m, c * m), (m, m)).into_owned()).collect(),
    })
}

/// Closed-form `G_{2L,1}` for the decoupled, matched stack built by
/// [`SimBlocks::idealized`]:
/// `(-1/(2 Z0))^L Diag(e^{j phi_L}) prod_{l=L-1..1} (-Z21^(l)) Diag(e^{j phi_l})`.
///
/// Each layer contributes the two-port transmission `-e^{j phi}/(2 Z0)`, and
/// every forward coupling block enters with a minus sign from the block
/// inverse of a lower-triangular system.
pub fn conventional_reduction_oracle(stack: &SimStack, phases: &PhaseVector, f: f64) -> Result<CMat> {
    check_phase_shape(stack, phases)?;
    let coupling = stack_coupling(stack, f)?;
    let z21 = coupling.inter.transpose();
    let m = stack.elements_per_layer();
    let z0 = REFERENCE_IMPEDANCE;
    let phase_diag = |l: usize| {
        CMat::from_diagonal(&DVector::from_iterator(
            m,
            phases.layer(l).iter().map(|&p| Complex64::from_polar(1.0, p)),
        ))
    };
    let mut acc = phase_diag(0);
    for l in 1..stack.num_layers {
        acc = phase_diag(l) * (-&z21) * acc;
    }
    let scale = (-1.0 / (2.0 * z0)).powi(stack.num_layers as i32);
    Ok(acc * Complex64::new(scale, 0.0))
}

/// The four vectors needed to apply `F = dG_{2L,1}/dphi` (up to sign) for
/// one meta-atom as two rank-1 updates.
#[derive(Debug, Clone)]
pub struct PhaseSensitivity {
    pub c1: DVector<Complex64>,
    pub c2: DVector<Complex64>,
    pub r1: DVector<Complex64>,
    pub r2: DVector<Complex64>,
    pub d: Matrix2<Complex64>,
}

pub fn g_phase_sensitivity(
    g: &GBlocks,
    grad: &Matrix2<Complex64>,
    layer: usize,
    element: usize,
) -> Result<PhaseSensitivity> {
    if layer >= g.layers || element >= g.per_layer {
        return Err(Error::Index(format!(
            "meta-atom ({layer}, {element}) outside a {}x{} stack",
            g.layers, g.per_layer
        )));
    }
    let (rx, tx) = (2 * layer, 2 * layer + 1);
    Ok(PhaseSensitivity {
        c1: g.last_row[rx].column(element).into_owned(),
        c2: g.last_row[tx].column(element).into_owned(),
        r1: g.first_column[rx].row(element).transpose(),
        r2: g.first_column[tx].row(element).transpose(),
        d: *grad,
    })
}

impl PhaseSensitivity {
    /// Left factors `a = d11 c1 + d21 c2`, `b = d12 c1 + d22 c2` so that
    /// `F = a r1^T + b r2^T`.
    pub fn left_factors(&self) -> (DVector<Complex64>, DVector<Complex64>) {
        let d = &self.d;
        let a = &self.c1 * d[(0, 0)] + &self.c2 * d[(1, 0)];
        let b = &self.c1 * d[(0, 1)] + &self.c2 * d[(1, 1)];
        (a, b)
    }

    /// `F` materialised. Only for checks.
    pub fn dense_f(&self) -> CMat {
        let (a, b) = self.left_factors();
        &a * self.r1.transpose() + &b * self.r2.transpose()
    }

    /// `dH/dphi = -H2 F H1` for all users at once, via the rank-2 form.
    pub fn channel_derivative(&self, h2: &CMat, h1: &CMat) -> CMat {
        let (a, b) = self.left_factors();
        let ha = h2 * a;
        let hb = h2 * b;
        let u1 = self.r1.transpose() * h1;
        let u2 = self.r2.transpose() * h1;
        -(ha * u1 + hb * u2)
    }
}

/// `dH/dphi` for meta-atom `(layer, element)` from the projections
/// `x[r] = G_{r,1} H1` and `y[r] = H2 G_{2L,r}`; equal to
/// [`PhaseSensitivity::channel_derivative`] without forming any `M x M` block.
pub fn channel_derivative_projected(
    x: &[CMat],
    y: &[CMat],
    d: &Matrix2<Complex64>,
    layer: usize,
    element: usize,
) -> CMat {
    let (rx, tx) = (2 * layer, 2 * layer + 1);
    let yc1 = y[rx].column(element);
    let yc2 = y[tx].column(element);
    let ha = yc1 * d[(0, 0)] + yc2 * d[(1, 0)];
    let hb = yc1 * d[(0, 1)] + yc2 * d[(1, 1)];
    -(ha * x[rx].row(element) + hb * x[tx].row(element))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::SPEED_OF_LIGHT;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(layers: usize, nx: usize, ny: usize) -> SimStack {
        let lambda = SPEED_OF_LIGHT / 27e9;
        SimStack {
            num_layers: layers,
            layer_geometry: ArrayGeometry::new(nx, ny, lambda / 2.0, lambda / 2.0),
            layer_spacing: lambda / 2.0,
            antenna: AntennaParams::default(),
        }
    }

    fn rel(a: &CMat, b: &CMat) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn load_block_quarter_turn() {
        let z = phase_to_load_block(PI / 2.0, 50.0).unwrap();
        let expect = Matrix2::new(
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 50.0),
            Complex64::new(0.0, 50.0),
            Complex64::new(0.0, 0.0),
        );
        assert!((z - expect).norm() < 1e-12);
    }

    #[test]
    fn load_block_converts_back_to_phase_shifter() {
        // S = (Z - Z0 I)(Z + Z0 I)^-1 is the standard Z-to-S conversion.
        for &phi in &[PI / 2.0, 0.3, 2.0, 4.0, 5.9] {
            let z0 = 50.0;
            let z = phase_to_load_block(phi, z0).unwrap();
            let id = Matrix2::<Complex64>::identity() * Complex64::new(z0, 0.0);
            let s = (z - id) * (z + id).try_inverse().unwrap();
            let t = Complex64::from_polar(1.0, phi);
            assert!(s[(0, 0)].norm() < 1e-12 && s[(1, 1)].norm() < 1e-12, "phi={phi}");
            assert!((s[(0, 1)] - t).norm() < 1e-12 && (s[(1, 0)] - t).norm() < 1e-12, "phi={phi}");
        }
    }

    #[test]
    fn load_block_singular_phase_rejected() {
        assert!(matches!(phase_to_load_block(1e-9, 50.0), Err(Error::Singularity { .. })));
        assert!(matches!(phase_to_load_block(PI, 50.0), Err(Error::Singularity { .. })));
        assert!(matches!(local_impedance_gradient(1e-9, 50.0), Err(Error::Singularity { .. })));
    }

    #[test]
    fn local_gradient_quarter_turn() {
        let d = local_impedance_gradient(PI / 2.0, 50.0).unwrap();
        let expect = Matrix2::<Complex64>::identity() * Complex64::new(0.0, -50.0);
        assert!((d - expect).norm() < 1e-12);
        assert_eq!(d[(0, 1)], d[(1, 0)]);
    }

    #[test]
    fn local_gradient_matches_central_difference() {
        let (phi, h, z0) = (1.0, 1e-6, 50.0);
        let fd = (phase_to_load_block(phi + h, z0).unwrap() - phase_to_load_block(phi - h, z0).unwrap())
            / Complex64::new(2.0 * h, 0.0);
        let an = local_impedance_gradient(phi, z0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((fd[(i, j)] - an[(i, j)]).norm() < 1e-6 * an[(i, j)].norm());
            }
        }
    }

    #[test]
    fn projection_keeps_away_from_singular_points() {
        let g = 1e-3;
        assert_eq!(project_phase(0.0, g), g);
        assert_eq!(project_phase(TAU - 1e-5, g), TAU - g);
        assert_eq!(project_phase(PI - 1e-5, g), PI - g);
        assert_eq!(project_phase(PI + 1e-5, g), PI + g);
        assert!((project_phase(7.0, g) - (7.0 - TAU)).abs() < 1e-15);
        assert!((project_phase(-1.0, g) - (TAU - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn projected_boundary_is_admissible() {
        for &g in &[1e-3, 0.1] {
            for &phi in &[0.0, PI, TAU - 1e-9, PI - 1e-9] {
                let p = project_phase(phi, g);
                assert!(phase_to_load_block_guarded(p, 50.0, g).is_ok(), "phi={phi} g={g}");
                assert!(local_impedance_gradient_guarded(p, 50.0, g).is_ok());
            }
        }
        assert!(phase_to_load_block_guarded(0.05, 50.0, 0.1).is_err());
    }

    #[test]
    fn random_phases_are_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PhaseVector::random(3, 50, 1e-3, &mut rng);
        for &phi in &p.phases {
            assert_eq!(project_phase(phi, 1e-3), phi);
        }
    }

    #[test]
    fn single_layer_has_no_inter_layer_blocks() {
        let s = stack(1, 2, 2);
        let p = PhaseVector::uniform(1, 4, 1.0);
        let b = assemble_sim_blocks(&s, &p, 27e9).unwrap();
        assert!(b.inter_layer.is_empty());
        assert_eq!(b.loads.len(), 4);
        assert_eq!(b.num_facings(), 2);
    }

    #[test]
    fn assembled_system_is_symmetric() {
        let s = stack(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = PhaseVector::random(3, 4, 1e-3, &mut rng);
        let b = assemble_sim_blocks(&s, &p, 24e9).unwrap();
        let a = b.dense();
        assert_eq!(a, a.transpose());
    }

    #[test]
    fn dense_assembly_matches_hand_built_matrix() {
        // L = 2, M = 2: ports ordered (L1 rx, L1 tx, L2 rx, L2 tx), 2 each.
        let s = stack(2, 1, 2);
        let f = 26e9;
        let p = PhaseVector::new(2, 2, vec![0.4, 1.9, 3.6, 5.1]).unwrap();
        let b = assemble_sim_blocks(&s, &p, f).unwrap();

        let g = s.layer_geometry;
        let zi = assemble_coupling(f, &g, &g, &s.antenna).unwrap().entries;
        let zt = assemble_coupling(f, &g, &g.at_offset(s.layer_spacing), &s.antenna)
            .unwrap()
            .entries;
        let mut a = CMat::zeros(8, 8);
        for blk in 0..4 {
            for i in 0..2 {
                for j in 0..2 {
                    a[(2 * blk + i, 2 * blk + j)] += zi[(i, j)];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                a[(2 + i, 4 + j)] += zt[(i, j)];
                a[(4 + j, 2 + i)] += zt[(i, j)];
            }
        }
        for l in 0..2 {
            for e in 0..2 {
                let x = phase_to_load_block(p.get(l, e), 50.0).unwrap();
                let rx = 4 * l + e;
                let tx = 4 * l + 2 + e;
                a[(rx, rx)] += x[(0, 0)];
                a[(rx, tx)] += x[(0, 1)];
                a[(tx, rx)] += x[(1, 0)];
                a[(tx, tx)] += x[(1, 1)];
            }
        }
        assert!(rel(&b.dense(), &a) < 1e-15);
    }

    #[test]
    fn block_solver_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(layers, nx, ny) in &[(1, 1, 2), (2, 2, 1), (2, 2, 2), (3, 1, 1)] {
            let s = stack(layers, nx, ny);
            let p = PhaseVector::random(layers, nx * ny, 1e-3, &mut rng);
            let b = assemble_sim_blocks(&s, &p, 29e9).unwrap();
            let fast = compute_g_blocks(&b).unwrap();
            let dense = dense_g_blocks(&b).unwrap();
            for r in 0..2 * layers {
                assert!(rel(&fast.first_column[r], &dense.first_column[r]) < 1e-12);
                assert!(rel(&fast.last_row[r], &dense.last_row[r]) < 1e-12);
            }
            assert!(rel(&fast.last_row[0], fast.response()) < 1e-10);
        }
    }

    #[test]
    fn idealized_single_layer_reduction() {
        let s = stack(1, 2, 2);
        let p = PhaseVector::new(1, 4, vec![0.3, 1.2, 2.5, 4.0]).unwrap();
        let oracle = conventional_reduction_oracle(&s, &p, 27e9).unwrap();
        for e in 0..4 {
            let expect = Complex64::from_polar(1.0, p.phases[e]) * (-1.0 / 100.0);
            assert!((oracle[(e, e)] - expect).norm() < 1e-15);
        }
        let g = compute_g_blocks(&SimBlocks::idealized(&s, &p, 27e9).unwrap()).unwrap();
        assert!(rel(g.response(), &oracle) < 1e-10);
    }

    #[test]
    fn idealized_multi_layer_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layers in 1..=3 {
            let s = stack(layers, 2, 2);
            let p = PhaseVector::random(layers, 4, 1e-3, &mut rng);
            let oracle = conventional_reduction_oracle(&s, &p, 27e9).unwrap();
            let g = compute_g_blocks(&SimBlocks::idealized(&s, &p, 27e9).unwrap()).unwrap();
            assert!(rel(g.response(), &oracle) < 1e-10, "L={layers}");
        }
    }

    #[test]
    fn single_layer_reduction_is_diagonal_phase_only() {
        let s = stack(1, 2, 1);
        let a = conventional_reduction_oracle(&s, &PhaseVector::uniform(1, 2, 1e-3), 27e9).unwrap();
        let b = conventional_reduction_oracle(&s, &PhaseVector::uniform(1, 2, PI / 2.0), 27e9).unwrap();
        let ratio = Complex64::from_polar(1.0, PI / 2.0 - 1e-3);
        assert!((b[(0, 0)] - a[(0, 0)] * ratio).norm() < 1e-15);
        assert_eq!(a[(0, 1)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn sensitivity_matches_dense_derivative() {
        // dG/dphi = -G E G, compare block (2L, 1) with -F.
        let s = stack(2, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PhaseVector::random(2, 2, 1e-3, &mut rng);
        let b = assemble_sim_blocks(&s, &p, 27e9).unwrap();
        let g_full = b.dense().try_inverse().unwrap();
        let g = compute_g_blocks(&b).unwrap();
        let m = 2;
        for layer in 0..2 {
            for e in 0..m {
                let d = local_impedance_gradient(p.get(layer, e), 50.0).unwrap();
                let sens = g_phase_sensitivity(&g, &d, layer, e).unwrap();
                let f = sens.dense_f();
                let mut emat = CMat::zeros(8, 8);
                let rx = 2 * layer * m + e;
                let tx = (2 * layer + 1) * m + e;
                emat[(rx, rx)] = d[(0, 0)];
                emat[(rx, tx)] = d[(0, 1)];
                emat[(tx, rx)] = d[(1, 0)];
                emat[(tx, tx)] = d[(1, 1)];
                let dg = -(&g_full * emat * &g_full);
                let block = dg.view((3 * m, 0), (m, m)).into_owned();
                assert!(rel(&(-f.clone()), &block) < 1e-10);
                assert!(f.rank(1e-12 * f.norm()) <= 2);
            }
        }
    }

    #[test]
    fn projected_derivative_matches_block_form() {
        let s = stack(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = PhaseVector::random(3, 4, 1e-3, &mut rng);
        let b = assemble_sim_blocks(&s, &p, 23e9).unwrap();
        let g = compute_g_blocks(&b).unwrap();
        let h1 = CMat::from_fn(4, 2, |i, j| Complex64::new(i as f64 + 1.0, j as f64 - 0.5));
        let h2 = CMat::from_fn(3, 4, |i, j| Complex64::new(0.3 * j as f64, 1.0 - i as f64));
        let solve = SystemSolve::new(&b).unwrap();
        let x = solve.column(&h1);
        let y = solve.row(&h2);
        assert!(rel(&x[5], &(g.response() * &h1)) < 1e-12);
        for layer in 0..3 {
            for e in 0..4 {
                let d = local_impedance_gradient(p.get(layer, e), 50.0).unwrap();
                let sens = g_phase_sensitivity(&g, &d, layer, e).unwrap();
                let full = sens.channel_derivative(&h2, &h1);
                let fast = channel_derivative_projected(&x, &y, &d, layer, e);
                assert!(rel(&fast, &full) < 1e-10);
            }
        }
    }

    #[test]
    fn nonsymmetric_row_uses_transposed_factor() {
        let s = stack(2, 2, 1);
        let p = PhaseVector::new(2, 2, vec![0.5, 1.5, 2.5, 4.5]).unwrap();
        let b = SimBlocks::idealized(&s, &p, 27e9).unwrap();
        let fast = compute_g_blocks(&b).unwrap();
        let dense = dense_g_blocks(&b).unwrap();
        for r in 0..4 {
            assert!(rel(&fast.last_row[r], &dense.last_row[r]) < 1e-12);
        }
    }

    #[test]
    fn sensitivity_index_checked() {
        let s = stack(1, 1, 2);
        let b = assemble_sim_blocks(&s, &PhaseVector::uniform(1, 2, 1.0), 27e9).unwrap();
        let g = compute_g_blocks(&b).unwrap();
        let d = local_impedance_gradient(1.0, 50.0).unwrap();
        assert!(matches!(g_phase_sensitivity(&g, &d, 1, 0), Err(Error::Index(_))));
        assert!(matches!(g_phase_sensitivity(&g, &d, 0, 2), Err(Error::Index(_))));
    }

    #[test]
    fn freeze_all_but_last() {
        let mut p = PhaseVector::uniform(3, 10, 1.0);
        p.freeze_all_but_last_layer();
        assert_eq!(p.frozen_count(), 20);
        p.unfreeze();
        assert_eq!(p.frozen_count(), 0);
    }
}
