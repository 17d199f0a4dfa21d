//! Closed-form electromagnetics of TM1 (lowest-order spherical mode) antennas.
//!
//! Every element in the system (base-station antennas, metasurface facings,
//! user antennas) is modelled as a canonical minimum-scattering antenna whose
//! equivalent circuit is a series capacitor, shunt inductor and radiation
//! resistance. This gives a closed-form self-impedance, and a closed-form
//! mutual impedance between any two such antennas separated by a distance `d`.
//!
//! The orientation angles follow the x-displacement convention: `cos(alpha)`
//! is the x-component of the separation divided by the distance, and
//! `beta = pi - alpha`, regardless of the y and z components.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const FREE_SPACE_IMPEDANCE: f64 = 376.730;

/// Physical parameters of a TM1 antenna.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AntennaParams {
    /// Radius of the smallest sphere enclosing the antenna (m).
    pub radius: f64,
    /// Radiation resistance (ohm).
    pub radiation_resistance: f64,
    pub speed_of_light: f64,
    pub intrinsic_impedance: f64,
}

impl Default for AntennaParams {
    fn default() -> Self {
        Self {
            radius: 0.0027,
            radiation_resistance: 50.0,
            speed_of_light: SPEED_OF_LIGHT,
            intrinsic_impedance: FREE_SPACE_IMPEDANCE,
        }
    }
}

impl AntennaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("antenna radius must be > 0, got {}", self.radius)));
        }
        if !(self.radiation_resistance > 0.0) {
            return Err(Error::Config(format!(
                "radiation resistance must be > 0, got {}",
                self.radiation_resistance
            )));
        }
        if !(self.speed_of_light > 0.0) {
            return Err(Error::Config("speed of light must be > 0".into()));
        }
        Ok(())
    }

    /// Electrical size `k a` at frequency `f`.
    pub fn ka(&self, f: f64) -> f64 {
        2.0 * PI * f * self.radius / self.speed_of_light
    }
}

/// Rectangular `nx x ny` grid of elements centred on `origin`, lying in the
/// plane `z = origin.z + plane_offset_z`.
///
/// Elements are indexed x-major: flat index `ix * ny + iy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub plane_offset_z: f64,
    pub origin: [f64; 3],
}

impl ArrayGeometry {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Self {
        Self {
            nx,
            ny,
            dx,
            dy,
            plane_offset_z: 0.0,
            origin: [0.0; 3],
        }
    }

    /// Same grid shifted along z.
    pub fn at_offset(mut self, z: f64) -> Self {
        self.plane_offset_z = z;
        self
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config(format!("array must have nx, ny >= 1, got {}x{}", self.nx, self.ny)));
        }
        if !(self.dx > 0.0 && self.dy > 0.0) {
            return Err(Error::Config(format!(
                "element spacing must be positive, got dx={} dy={}",
                self.dx, self.dy
            )));
        }
        Ok(())
    }

    pub fn position(&self, idx: usize) -> Result<[f64; 3]> {
        if idx >= self.len() {
            return Err(Error::Index(format!("element {idx} of a {}x{} array", self.nx, self.ny)));
        }
        let ix = (idx / self.ny) as f64;
        let iy = (idx % self.ny) as f64;
        Ok([
            self.origin[0] + (ix - (self.nx as f64 - 1.0) / 2.0) * self.dx,
            self.origin[1] + (iy - (self.ny as f64 - 1.0) / 2.0) * self.dy,
            self.origin[2] + self.plane_offset_z,
        ])
    }
}

/// Separation and orientation of an element pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub distance: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    IntraArray,
    InterArray,
}

/// Impedance matrix between the elements of two arrays (or one array with
/// itself) at a single frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    pub frequency: f64,
    pub entries: DMatrix<Complex64>,
    pub kind: CouplingKind,
}

/// Self-impedance of a TM1 antenna at frequency `f`.
pub fn self_impedance(f: f64, ant: &AntennaParams) -> Result<Complex64> {
    if !(f > 0.0) {
        return Err(Error::Domain(format!("frequency must be > 0, got {f}")));
    }
    let c = ant.speed_of_light;
    let x = 2.0 * PI * f * ant.radius;
    let j = Complex64::i();
    let num = c * c + j * x * c - x * x;
    let den = j * x * c - x * x;
    Ok(num / den * ant.radiation_resistance)
}

/// Mutual impedance between two TM1 antennas separated by `d` with
/// orientation angles `alpha`, `beta` relative to the joining line.
pub fn mutual_impedance(
    f: f64,
    ant_n: &AntennaParams,
    ant_m: &AntennaParams,
    d: f64,
    alpha: f64,
    beta: f64,
) -> Result<Complex64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("separation must be > 0, got {d}")));
    }
    let rn = self_impedance(f, ant_n)?.re;
    let rm = self_impedance(f, ant_m)?.re;
    let k0 = 2.0 * PI * f / ant_n.speed_of_light;
    let jkd = Complex64::new(0.0, k0 * d);
    let inv1 = jkd.inv();
    let inv2 = inv1 * inv1;
    let inv3 = inv2 * inv1;
    let bracket = 0.5 * alpha.sin() * beta.sin() * (inv1 + inv2 + inv3) + alpha.cos() * beta.cos() * (inv2 + inv3);
    let phase = Complex64::from_polar(1.0, -k0 * d);
    Ok(-3.0 * (rn * rm).sqrt() * bracket * phase)
}

/// Distance and orientation angles between element `idx_a` of `geom_a` and
/// element `idx_b` of `geom_b`. The z-offset between the two planes enters
/// the distance.
pub fn pairwise_geometry(
    geom_a: &ArrayGeometry,
    idx_a: usize,
    geom_b: &ArrayGeometry,
    idx_b: usize,
) -> Result<PairGeometry> {
    let pa = geom_a.position(idx_a)?;
    let pb = geom_b.position(idx_b)?;
    let delta = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
    let distance = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
    if distance == 0.0 {
        return Err(Error::SelfPair(idx_a));
    }
    let alpha = (delta[0] / distance).clamp(-1.0, 1.0).acos();
    Ok(PairGeometry {
        distance,
        alpha,
        beta: PI - alpha,
    })
}

/// Coupling matrix between two arrays. When both geometries are identical the
/// result is the intra-array matrix (self-impedance on the diagonal, exactly
/// symmetric); otherwise every entry is a mutual impedance.
pub fn assemble_coupling(
    f: f64,
    geom_a: &ArrayGeometry,
    geom_b: &ArrayGeometry,
    ant: &AntennaParams,
) -> Result<CouplingMatrix> {
    geom_a.validate()?;
    geom_b.validate()?;
    if geom_a == geom_b {
        let n = geom_a.len();
        let mut entries = DMatrix::zeros(n, n);
        let z_self = self_impedance(f, ant)?;
        for i in 0..n {
            entries[(i, i)] = z_self;
            for j in (i + 1)..n {
                let g = pairwise_geometry(geom_a, i, geom_a, j)?;
                let z = mutual_impedance(f, ant, ant, g.distance, g.alpha, g.beta)?;
                entries[(i, j)] = z;
                entries[(j, i)] = z;
            }
        }
        return Ok(CouplingMatrix {
            frequency: f,
            entries,
            kind: CouplingKind::IntraArray,
        });
    }

    let (rows, cols) = (geom_a.len(), geom_b.len());
    let mut entries = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let g = pairwise_geometry(geom_a, i, geom_b, j).map_err(|e| match e {
                Error::SelfPair(_) => Error::Overlap { row: i, col: j },
                other => other,
            })?;
            entries[(i, j)] = mutual_impedance(f, ant, ant, g.distance, g.alpha, g.beta)?;
        }
    }
    Ok(CouplingMatrix {
        frequency: f,
        entries,
        kind: CouplingKind::InterArray,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ant() -> AntennaParams {
        AntennaParams::default()
    }

    fn freq_for_ka(ka: f64, a: &AntennaParams) -> f64 {
        ka * a.speed_of_light / (2.0 * PI * a.radius)
    }

    #[test]
    fn self_impedance_at_unit_ka() {
        let a = ant();
        let z = self_impedance(freq_for_ka(1.0, &a), &a).unwrap();
        let r = a.radiation_resistance;
        assert!((z.re - 0.5 * r).abs() < 1e-9 * r);
        assert!((z.im + 0.5 * r).abs() < 1e-9 * r);
    }

    #[test]
    fn self_impedance_high_frequency_limit() {
        let a = ant();
        let z = self_impedance(freq_for_ka(100.0, &a), &a).unwrap();
        assert!((z - a.radiation_resistance).norm() < 0.01 * a.radiation_resistance);
    }

    #[test]
    fn self_impedance_real_part_closed_form() {
        // Rationalised: Re Z = R (ka)^2 / (1 + (ka)^2), Im Z = -R / (ka (1 + (ka)^2)).
        let a = ant();
        for &f in &[1.3e9, 7.7e9, 20e9, 27e9, 34e9, 51.2e9, 90e9, 3.1e8, 150e9, 4.4e10] {
            let z = self_impedance(f, &a).unwrap();
            let u = a.ka(f);
            let re = a.radiation_resistance * u * u / (1.0 + u * u);
            let im = -a.radiation_resistance / (u * (1.0 + u * u));
            assert!((z.re - re).abs() < 1e-10 * re.abs().max(1.0), "f={f}");
            assert!((z.im - im).abs() < 1e-10 * im.abs().max(1.0), "f={f}");
            assert!(z.re > 0.0);
        }
    }

    #[test]
    fn self_impedance_rejects_nonpositive_frequency() {
        assert!(matches!(self_impedance(0.0, &ant()), Err(Error::Domain(_))));
        assert!(matches!(self_impedance(-1.0, &ant()), Err(Error::Domain(_))));
    }

    #[test]
    fn mutual_impedance_swap_symmetry() {
        let a = ant();
        let mut b = ant();
        b.radiation_resistance = 73.0;
        let z1 = mutual_impedance(27e9, &a, &b, 0.013, 0.4, 1.1).unwrap();
        let z2 = mutual_impedance(27e9, &b, &a, 0.013, 1.1, 0.4).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn mutual_impedance_far_separation_decays() {
        let a = ant();
        let f = 27e9;
        let k0 = 2.0 * PI * f / a.speed_of_light;
        let d = 1e4 / k0;
        let z = mutual_impedance(f, &a, &a, d, PI / 2.0, PI / 2.0).unwrap();
        let re = self_impedance(f, &a).unwrap().re;
        assert!(z.norm() < 1e-3 * re);
    }

    #[test]
    fn mutual_impedance_broadside_reference_value() {
        // ka = 1, R = 50, k0 d = pi, alpha = beta = pi/2. Term by term:
        // Re Z_n = Re Z_m = 25, prefactor -3 * 25 = -75,
        // bracket = 0.5 * (1/(j pi) + 1/(j pi)^2 + 1/(j pi)^3), phase e^{-j pi} = -1.
        let a = ant();
        let f = freq_for_ka(1.0, &a);
        let k0 = 2.0 * PI * f / a.speed_of_light;
        let d = PI / k0;
        let z = mutual_impedance(f, &a, &a, d, PI / 2.0, PI / 2.0).unwrap();
        let p = PI;
        // 1/(j p) = -j/p, 1/(j p)^2 = -1/p^2, 1/(j p)^3 = j/p^3
        let bracket = Complex64::new(-0.5 / (p * p), 0.5 * (-1.0 / p + 1.0 / (p * p * p)));
        let expected = -75.0 * bracket * -1.0;
        assert!((z - expected).norm() < 1e-9 * expected.norm(), "{z} vs {expected}");
    }

    #[test]
    fn mutual_impedance_rejects_zero_distance() {
        assert!(matches!(
            mutual_impedance(27e9, &ant(), &ant(), 0.0, 0.0, PI),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mutual_impedance_scales_with_resistance() {
        let a = ant();
        let mut b = ant();
        let s = 3.7;
        b.radiation_resistance *= s;
        let z1 = mutual_impedance(25e9, &a, &a, 0.02, 1.0, PI - 1.0).unwrap();
        let z2 = mutual_impedance(25e9, &b, &b, 0.02, 1.0, PI - 1.0).unwrap();
        assert!((z2 - z1 * s).norm() < 1e-12 * z2.norm());
    }

    #[test]
    fn mutual_impedance_monotone_beyond_two_wavelengths() {
        let a = ant();
        let f = 27e9;
        let lambda = a.speed_of_light / f;
        let mut prev = f64::INFINITY;
        for i in 0..400 {
            let d = 2.0 * lambda + i as f64 * lambda / 37.0;
            let z = mutual_impedance(f, &a, &a, d, PI / 2.0, PI / 2.0).unwrap().norm();
            assert!(z < prev, "not decreasing at d = {d}");
            prev = z;
        }
    }

    #[test]
    fn geometry_neighbors_along_y() {
        let g = ArrayGeometry::new(3, 3, 0.01, 0.02);
        let p = pairwise_geometry(&g, 0, &g, 1).unwrap();
        assert!((p.distance - 0.02).abs() < 1e-15);
        assert!((p.alpha - PI / 2.0).abs() < 1e-15);
        assert!((p.beta - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn geometry_axial_offset() {
        let a = ArrayGeometry::new(2, 2, 0.01, 0.01);
        let b = a.at_offset(0.05);
        let p = pairwise_geometry(&a, 3, &b, 3).unwrap();
        assert!((p.distance - 0.05).abs() < 1e-15);
        assert!(p.alpha.cos().abs() < 1e-15);
    }

    #[test]
    fn geometry_pythagorean() {
        let g = ArrayGeometry::new(4, 5, 1.0, 1.0);
        // (0,0) -> (3,4)
        let p = pairwise_geometry(&g, 0, &g, 3 * 5 + 4).unwrap();
        assert!((p.distance - 5.0).abs() < 1e-14);
        assert!((p.alpha.cos() - 0.6).abs() < 1e-14);
        assert!((p.beta - (PI - p.alpha)).abs() < 1e-15);
    }

    #[test]
    fn geometry_self_pair_is_signalled() {
        let g = ArrayGeometry::new(2, 2, 0.01, 0.01);
        assert_eq!(pairwise_geometry(&g, 2, &g, 2), Err(Error::SelfPair(2)));
        assert!(matches!(pairwise_geometry(&g, 4, &g, 0), Err(Error::Index(_))));
    }

    #[test]
    fn single_element_coupling_is_self_impedance() {
        let g = ArrayGeometry::new(1, 1, 0.01, 0.01);
        let c = assemble_coupling(27e9, &g, &g, &ant()).unwrap();
        assert_eq!(c.kind, CouplingKind::IntraArray);
        assert_eq!(c.entries[(0, 0)], self_impedance(27e9, &ant()).unwrap());
    }

    #[test]
    fn intra_array_exactly_symmetric_and_passive() {
        let g = ArrayGeometry::new(4, 3, 0.0056, 0.0056);
        let c = assemble_coupling(23e9, &g, &g, &ant()).unwrap();
        assert_eq!(c.entries, c.entries.transpose());
        for i in 0..g.len() {
            assert!(c.entries[(i, i)].re > 0.0);
        }
    }

    #[test]
    fn two_element_offdiagonal_matches_pairwise_call() {
        let a = ant();
        let f = freq_for_ka(1.0, &a);
        let lambda = a.speed_of_light / f;
        // 2 x 1 grid: elements differ along x.
        let g = ArrayGeometry::new(2, 1, lambda / 2.0, lambda / 2.0);
        let c = assemble_coupling(f, &g, &g, &a).unwrap();
        let p = pairwise_geometry(&g, 0, &g, 1).unwrap();
        assert!((p.distance - lambda / 2.0).abs() < 1e-15);
        let z = mutual_impedance(f, &a, &a, p.distance, p.alpha, p.beta).unwrap();
        assert_eq!(c.entries[(0, 1)], z);
        // 1 x 2 grid: zero x-displacement, alpha = beta = pi/2.
        let g = ArrayGeometry::new(1, 2, lambda / 2.0, lambda / 2.0);
        let c = assemble_coupling(f, &g, &g, &a).unwrap();
        let z = mutual_impedance(f, &a, &a, lambda / 2.0, PI / 2.0, PI / 2.0).unwrap();
        assert!((c.entries[(0, 1)] - z).norm() < 1e-12 * z.norm());
    }

    #[test]
    fn overlapping_distinct_arrays_fail() {
        let a = ArrayGeometry::new(2, 2, 0.01, 0.01);
        let b = ArrayGeometry::new(3, 3, 0.004, 0.004);
        assert!(assemble_coupling(27e9, &a, &b, &ant()).is_ok());
        let c = ArrayGeometry::new(3, 3, 0.01, 0.01);
        let d = ArrayGeometry::new(1, 1, 0.02, 0.02);
        assert!(matches!(
            assemble_coupling(27e9, &c, &d, &ant()),
            Err(Error::Overlap { row: 4, col: 0 })
        ));
    }
}
