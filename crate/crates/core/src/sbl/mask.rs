use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which weights of `w = [vec(A); vec(B)]` may be nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskMode {
    Unconstrained,
    /// Every input drives only its own output node: `B = [diag(b); 0]`.
    DiagB,
    /// P-diagonal canonical form with `p22` directly actuated outputs.
    PDiag { p22: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub free: Vec<bool>,
    pub mode: MaskMode,
    pub n: usize,
    pub m: usize,
}

/// Position of `A[(i, j)]` in `w`.
pub fn a_index(n: usize, i: usize, j: usize) -> usize {
    j * n + i
}

/// Position of `B[(i, j)]` in `w`.
pub fn b_index(n: usize, i: usize, j: usize) -> usize {
    n * n + j * n + i
}

impl Mask {
    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    pub fn a_free(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.free[a_index(self.n, i, j)])
    }

    pub fn b_free(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.n, self.m, |i, j| self.free[b_index(self.n, i, j)])
    }

    /// Positions that are free and structurally "diagonal" (the `(i, i)`
    /// entries of `A` and the per-input gains of `B`), used for initial guesses.
    pub fn diagonal_gains(&self, p: usize) -> Vec<(usize, usize)> {
        let bf = self.b_free();
        match self.mode {
            MaskMode::PDiag { p22 } => {
                let p11 = p - p22;
                let mut v: Vec<_> = (0..p11).map(|i| (p + i, i)).collect();
                v.extend((p11..p).map(|i| (i, i)));
                v.retain(|&(i, j)| bf[(i, j)]);
                v
            }
            _ => (0..p.min(self.m)).filter(|&i| bf[(i, i)]).map(|i| (i, i)).collect(),
        }
    }
}

/// Builds the identifiability mask. `DiagB` and `PDiag` need `m = p`;
/// `PDiag { p22 }` also needs `n - p >= p - p22` hidden states.
pub fn identifiability_mask(n: usize, p: usize, m: usize, mode: MaskMode) -> Result<Mask> {
    if p == 0 || p > n {
        return Err(Error::invalid(format!("need n >= p >= 1, got n = {n}, p = {p}")));
    }
    let mut free = vec![true; n * n + n * m];
    match mode {
        MaskMode::Unconstrained => {}
        MaskMode::DiagB => {
            if m != p {
                return Err(Error::Identifiability { m, p });
            }
            for j in 0..m {
                for i in 0..n {
                    free[b_index(n, i, j)] = i == j;
                }
            }
        }
        MaskMode::PDiag { p22 } => {
            if m != p {
                return Err(Error::Identifiability { m, p });
            }
            if p22 > p {
                return Err(Error::invalid(format!("p22 = {p22} exceeds p = {p}")));
            }
            let p11 = p - p22;
            let hidden = n - p;
            if hidden < p11 {
                return Err(Error::invalid(format!(
                    "P-diagonal form with p22 = {p22} needs at least {p11} hidden states, have {hidden}"
                )));
            }
            // state blocks: x1a = 0..p11, x1b = p11..p, x2a = p..p+p11, x2b = p+p11..n
            // input blocks: ua = 0..p11, ub = p11..p
            let x1a = 0..p11;
            let x1b = p11..p;
            let x2a = p..p + p11;
            let x2b = p + p11..n;
            let mut set_a = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, diag_only: bool| {
                for (ri, i) in rows.clone().enumerate() {
                    for (ci, j) in cols.clone().enumerate() {
                        free[a_index(n, i, j)] = diag_only && ri == ci;
                    }
                }
            };
            // A12
            set_a(x1a.clone(), x2a.clone(), true);
            set_a(x1a.clone(), x2b.clone(), false);
            set_a(x1b.clone(), x2a.clone(), false);
            // A22
            set_a(x2a.clone(), x2a.clone(), true);
            set_a(x2b.clone(), x2a.clone(), false);

            for j in 0..m {
                let in_ua = j < p11;
                for i in 0..n {
                    let f = if x1a.contains(&i) {
                        false
                    } else if x1b.contains(&i) {
                        !in_ua && i == j
                    } else if x2a.contains(&i) {
                        in_ua && i - p == j
                    } else {
                        debug_assert!(x2b.contains(&i));
                        false
                    };
                    free[b_index(n, i, j)] = f;
                }
            }
        }
    }
    Ok(Mask { free, mode, n, m })
}
