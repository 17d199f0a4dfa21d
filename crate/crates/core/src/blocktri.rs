//! Block-tridiagonal factorisation for complex systems.
//!
//! The matrix is stored as its diagonal, super-diagonal and sub-diagonal
//! blocks. Off-diagonal blocks may be diagonal matrices, which the recursion
//! exploits. Factorisation is the block Thomas recursion
//! `S_1 = D_1`, `S_r = D_r - L_{r-1} S_{r-1}^-1 U_{r-1}`; every pivot is
//! inverted once and the inverses are reused for all right-hand sides.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

type CMat = DMatrix<Complex64>;

pub const MAX_PIVOT_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(CMat),
    Diagonal(DVector<Complex64>),
}

impl Block {
    pub fn to_dense(&self) -> CMat {
        match self {
            Block::Dense(m) => m.clone(),
            Block::Diagonal(d) => CMat::from_diagonal(d),
        }
    }

    pub fn transpose(&self) -> Self {
        match self {
            Block::Dense(m) => Block::Dense(m.transpose()),
            Block::Diagonal(d) => Block::Diagonal(d.clone()),
        }
    }

    /// `self * x`.
    pub fn mul(&self, x: &CMat) -> CMat {
        match self {
            Block::Dense(m) => m * x,
            Block::Diagonal(d) => {
                let mut out = x.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                out
            }
        }
    }

    /// `x * self`.
    pub fn rmul(&self, x: &CMat) -> CMat {
        match self {
            Block::Dense(m) => x * m,
            Block::Diagonal(d) => {
                let mut out = x.clone();
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col *= d[j];
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockTridiagonal {
    pub diag: Vec<CMat>,
    /// `upper[r]` sits at block position `(r, r + 1)`.
    pub upper: Vec<Block>,
    /// `lower[r]` sits at block position `(r + 1, r)`.
    pub lower: Vec<Block>,
}

impl BlockTridiagonal {
    pub fn num_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |d| d.nrows())
    }

    pub fn transpose(&self) -> Self {
        Self {
            diag: self.diag.iter().map(|d| d.transpose()).collect(),
            upper: self.lower.iter().map(Block::transpose).collect(),
            lower: self.upper.iter().map(Block::transpose).collect(),
        }
    }

    pub fn to_dense(&self) -> CMat {
        let n = self.num_blocks();
        let m = self.block_size();
        let mut a = CMat::zeros(n * m, n * m);
        for r in 0..n {
            a.view_mut((r * m, r * m), (m, m)).copy_from(&self.diag[r]);
            if r + 1 < n {
                a.view_mut((r * m, (r + 1) * m), (m, m)).copy_from(&self.upper[r].to_dense());
                a.view_mut(((r + 1) * m, r * m), (m, m)).copy_from(&self.lower[r].to_dense());
            }
        }
        a
    }

    /// Factorise. `layer_of_block` maps a block row to the index reported in
    /// conditioning errors.
    pub fn factor(&self, layer_of_block: impl Fn(usize) -> usize) -> Result<BlockLu> {
        let n = self.num_blocks();
        let mut inverses: Vec<CMat> = Vec::with_capacity(n);
        for r in 0..n {
            let mut s = self.diag[r].clone();
            if r > 0 {
                let corr = self.upper[r - 1].rmul(&inverses[r - 1]);
                s -= self.lower[r - 1].mul(&corr);
            }
            let ill = |cond| Error::IllConditioned {
                block: r,
                layer: layer_of_block(r),
                cond,
            };
            let norm = one_norm(&s);
            let inv = s.lu().try_inverse().ok_or_else(|| ill(f64::INFINITY))?;
            let cond = norm * one_norm(&inv);
            if !cond.is_finite() || cond > MAX_PIVOT_CONDITION {
                return Err(ill(cond));
            }
            inverses.push(inv);
        }
        Ok(BlockLu {
            inverses,
            upper: self.upper.clone(),
            lower: self.lower.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BlockLu {
    inverses: Vec<CMat>,
    upper: Vec<Block>,
    lower: Vec<Block>,
}

impl BlockLu {
    pub fn num_blocks(&self) -> usize {
        self.inverses.len()
    }

    /// Solve `A X = B` where `rhs[r]` is block row `r` of `B`. `None` marks a
    /// zero block.
    pub fn solve_sparse(&self, rhs: &[Option<CMat>], width: usize) -> Vec<CMat> {
        let n = self.inverses.len();
        assert_eq!(rhs.len(), n, "right-hand side has wrong number of block rows");
        let m = self.inverses[0].nrows();
        let mut y: Vec<Option<CMat>> = Vec::with_capacity(n);
        for r in 0..n {
            let carried = if r > 0 {
                y[r - 1]
                    .as_ref()
                    .map(|prev| self.lower[r - 1].mul(&(&self.inverses[r - 1] * prev)))
            } else {
                None
            };
            y.push(match (rhs[r].clone(), carried) {
                (Some(b), Some(c)) => Some(b - c),
                (Some(b), None) => Some(b),
                (None, Some(c)) => Some(-c),
                (None, None) => None,
            });
        }
        let mut x: Vec<CMat> = vec![CMat::zeros(0, 0); n];
        for r in (0..n).rev() {
            let mut b = y[r].take().unwrap_or_else(|| CMat::zeros(m, width));
            if r + 1 < n {
                b -= self.upper[r].mul(&x[r + 1]);
            }
            x[r] = &self.inverses[r] * b;
        }
        x
    }

    pub fn solve(&self, rhs: &[CMat]) -> Vec<CMat> {
        let width = rhs.first().map_or(0, |b| b.ncols());
        let sparse: Vec<Option<CMat>> = rhs.iter().cloned().map(Some).collect();
        self.solve_sparse(&sparse, width)
    }

    /// Solve with a right-hand side that is nonzero only in block row `at`.
    pub fn solve_single(&self, at: usize, b: &CMat) -> Vec<CMat> {
        let rhs: Vec<Option<CMat>> = (0..self.num_blocks())
            .map(|r| if r == at { Some(b.clone()) } else { None })
            .collect();
        self.solve_sparse(&rhs, b.ncols())
    }
}

pub(crate) fn one_norm(a: &CMat) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}
