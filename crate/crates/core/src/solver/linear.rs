//! Block-structured Gauss-Newton normal equations.
//!
//! Blocks flagged eliminable (feature points) are removed by a Schur
//! complement before the dense Cholesky solve on the remaining blocks. No
//! residual may couple two different eliminable blocks.

use nalgebra::{DMatrix, DVector};

use super::{BlockLayout, Linearization, SolverError};

const DIAG_MIN: f64 = 1e-6;
const DIAG_MAX: f64 = 1e32;

struct ElimBlock {
    block: usize,
    hessian: DMatrix<f64>,
    /// Coupling to the reduced system, `size × n_reduced`.
    coupling: DMatrix<f64>,
    gradient: DVector<f64>,
}

pub(crate) struct NormalEquations {
    layout: BlockLayout,
    reduced_offset: Vec<Option<usize>>,
    elim_index: Vec<Option<usize>>,
    n_reduced: usize,
    h_rr: DMatrix<f64>,
    g_r: DVector<f64>,
    elim: Vec<ElimBlock>,
}

pub(crate) struct DampedStep {
    pub step: DVector<f64>,
    /// `½(−gᵀδ + μ δᵀDδ)`, the decrease predicted by the damped model.
    pub predicted_reduction: f64,
}

impl NormalEquations {
    pub fn assemble(layout: &BlockLayout, lin: &Linearization) -> Result<Self, SolverError> {
        let nb = layout.sizes.len();
        let mut reduced_offset = vec![None; nb];
        let mut elim_index = vec![None; nb];
        let mut n_reduced = 0;
        let mut elim = Vec::new();
        for b in 0..nb {
            let size = layout.sizes[b];
            if size == 0 {
                continue;
            }
            if layout.eliminable[b] {
                elim_index[b] = Some(elim.len());
                elim.push(ElimBlock {
                    block: b,
                    hessian: DMatrix::zeros(size, size),
                    coupling: DMatrix::zeros(size, 0),
                    gradient: DVector::zeros(size),
                });
            } else {
                reduced_offset[b] = Some(n_reduced);
                n_reduced += size;
            }
        }
        for e in &mut elim {
            e.coupling = DMatrix::zeros(layout.sizes[e.block], n_reduced);
        }
        let mut h_rr = DMatrix::zeros(n_reduced, n_reduced);
        let mut g_r = DVector::zeros(n_reduced);

        for res in &lin.residuals {
            let w = res.weight;
            let mut elim_seen: Option<usize> = None;
            for (a, ja) in &res.jacobians {
                if layout.sizes[*a] == 0 {
                    continue;
                }
                let wja_t = ja.transpose() * w;
                let ga = &wja_t * &res.residual;
                match (reduced_offset[*a], elim_index[*a]) {
                    (Some(ra), _) => {
                        let mut seg = g_r.rows_mut(ra, ga.len());
                        seg += &ga;
                        for (b, jb) in &res.jacobians {
                            if let Some(rb) = reduced_offset[*b] {
                                let blk = &wja_t * jb;
                                let mut v = h_rr.view_mut((ra, rb), (blk.nrows(), blk.ncols()));
                                v += &blk;
                            }
                        }
                    }
                    (None, Some(ea)) => {
                        if let Some(prev) = elim_seen {
                            if prev != ea {
                                return Err(SolverError::InvalidProblem(
                                    "residual couples two eliminable blocks".into(),
                                ));
                            }
                        }
                        elim_seen = Some(ea);
                        let eb = &mut elim[ea];
                        eb.gradient += &ga;
                        eb.hessian += &wja_t * ja;
                        for (b, jb) in &res.jacobians {
                            if let Some(rb) = reduced_offset[*b] {
                                let blk = &wja_t * jb;
                                let mut v = eb.coupling.view_mut((0, rb), (blk.nrows(), blk.ncols()));
                                v += &blk;
                            }
                        }
                    }
                    (None, None) => {}
                }
            }
        }
        Ok(Self {
            layout: layout.clone(),
            reduced_offset,
            elim_index,
            n_reduced,
            h_rr,
            g_r,
            elim,
        })
    }

    /// Gradient in global layout order.
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.layout.total());
        for b in 0..self.layout.sizes.len() {
            let off = self.layout.offset(b);
            let size = self.layout.sizes[b];
            if let Some(r) = self.reduced_offset[b] {
                g.rows_mut(off, size).copy_from(&self.g_r.rows(r, size));
            } else if let Some(e) = self.elim_index[b] {
                g.rows_mut(off, size).copy_from(&self.elim[e].gradient);
            }
        }
        g
    }

    /// Full dense `JᵀWJ` in global layout order.
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let n = self.layout.total();
        let mut h = DMatrix::zeros(n, n);
        let nb = self.layout.sizes.len();
        let global_of_reduced: Vec<(usize, usize, usize)> = (0..nb)
            .filter_map(|b| self.reduced_offset[b].map(|r| (r, self.layout.offset(b), self.layout.sizes[b])))
            .collect();
        for &(ra, ga, sa) in &global_of_reduced {
            for &(rb, gb, sb) in &global_of_reduced {
                h.view_mut((ga, gb), (sa, sb))
                    .copy_from(&self.h_rr.view((ra, rb), (sa, sb)));
            }
        }
        for e in &self.elim {
            let ge = self.layout.offset(e.block);
            let se = self.layout.sizes[e.block];
            h.view_mut((ge, ge), (se, se)).copy_from(&e.hessian);
            for &(rb, gb, sb) in &global_of_reduced {
                let c = e.coupling.view((0, rb), (se, sb));
                h.view_mut((ge, gb), (se, sb)).copy_from(&c);
                h.view_mut((gb, ge), (sb, se)).copy_from(&c.transpose());
            }
        }
        h
    }

    /// Solve `(H + μ·D) δ = −g` with `D = clamp(diag(H))`.
    pub fn solve_damped(&self, mu: f64) -> Option<DampedStep> {
        let damp = |v: f64| v.clamp(DIAG_MIN, DIAG_MAX) * mu;

        let mut s = self.h_rr.clone();
        for i in 0..self.n_reduced {
            s[(i, i)] += damp(self.h_rr[(i, i)]);
        }
        let mut rhs = -self.g_r.clone();
        let mut elim_inv = Vec::with_capacity(self.elim.len());
        for e in &self.elim {
            let mut d = e.hessian.clone();
            for i in 0..d.nrows() {
                d[(i, i)] += damp(e.hessian[(i, i)]);
            }
            let inv = d.cholesky()?.inverse();
            if self.n_reduced > 0 {
                let inv_c = &inv * &e.coupling;
                s -= e.coupling.transpose() * &inv_c;
                rhs += e.coupling.transpose() * (&inv * &e.gradient);
            }
            elim_inv.push(inv);
        }

        let dr = if self.n_reduced > 0 {
            let s = 0.5 * (&s + s.transpose());
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };

        let mut step = DVector::zeros(self.layout.total());
        let mut dtd = 0.0;
        for b in 0..self.layout.sizes.len() {
            if let Some(r) = self.reduced_offset[b] {
                let size = self.layout.sizes[b];
                let off = self.layout.offset(b);
                step.rows_mut(off, size).copy_from(&dr.rows(r, size));
                for i in 0..size {
                    dtd += damp(self.h_rr[(r + i, r + i)]) * dr[r + i].powi(2);
                }
            }
        }
        for (e, inv) in self.elim.iter().zip(&elim_inv) {
            let mut rhs_e = -e.gradient.clone();
            if self.n_reduced > 0 {
                rhs_e -= &e.coupling * &dr;
            }
            let de = inv * rhs_e;
            let off = self.layout.offset(e.block);
            for i in 0..de.len() {
                dtd += damp(e.hessian[(i, i)]) * de[i].powi(2);
            }
            step.rows_mut(off, de.len()).copy_from(&de);
        }
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let g = self.gradient();
        let predicted_reduction = 0.5 * (-g.dot(&step) + dtd);
        Some(DampedStep {
            step,
            predicted_reduction,
        })
    }
}
