//! Halfspace polytope algebra: containment, intersection, redundancy
//! removal, the Gilbert-Tan maximal admissible set recursion (plain and
//! augmented), Fourier-Motzkin projection, N-step controllable sets,
//! and uniform sampling.

use crate::qp::{self, SolveStatus};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Variables are boxed at this magnitude inside internal LPs so that
/// degenerate rows never produce unbounded solves.
const LP_BOX: f64 = 1e6;
const LP_TOL: f64 = 1e-9;
/// Support-value tolerance for set equality tests.
pub const SET_EQUAL_TOL: f64 = 1e-8;
/// Intermediate row cap for Fourier-Motzkin elimination.
const FM_ROW_CAP: usize = 20_000;

#[derive(Debug, Error)]
pub enum PolytopeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("polytope is empty")]
    Empty,
    #[error("LP solve failed: {0}")]
    LpFailure(String),
    #[error("Fourier-Motzkin row count exceeded {cap}; reduce the problem dimension or prune inputs")]
    ProjectionBlowup { cap: usize },
    #[error("admissible-set recursion did not terminate within {max_iter} iterations")]
    NotConverged { max_iter: usize },
    #[error("origin violates the stage constraints; admissible set is empty")]
    OriginExcluded,
    #[error("closed-loop matrix is not Schur stable")]
    NotStable,
    #[error("sampling acceptance rate below floor")]
    SamplingFloor,
    #[error("operation requires dim = 2, got {0}")]
    NotPlanar(usize),
    #[error("polytope is unbounded")]
    Unbounded,
}

/// {x : H x <= h} in halfspace representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl HPolytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, PolytopeError> {
        if normals.nrows() != offsets.len() {
            return Err(PolytopeError::DimensionMismatch {
                expected: normals.nrows(),
                got: offsets.len(),
            });
        }
        if !normals.iter().all(|v| v.is_finite()) || !offsets.iter().all(|v| v.is_finite()) {
            return Err(PolytopeError::LpFailure("non-finite polytope data".into()));
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box given per-coordinate half-widths: |x_i| <= w_i.
    pub fn box_from_half_widths(widths: &[f64]) -> Self {
        let dim = widths.len();
        let mut normals = DMatrix::zeros(2 * dim, dim);
        let mut offsets = DVector::zeros(2 * dim);
        for (i, &w) in widths.iter().enumerate() {
            normals[(2 * i, i)] = 1.0;
            offsets[2 * i] = w;
            normals[(2 * i + 1, i)] = -1.0;
            offsets[2 * i + 1] = w;
        }
        Self { normals, offsets }
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool, PolytopeError> {
        if x.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let vals = &self.normals * x;
        Ok(vals
            .iter()
            .zip(self.offsets.iter())
            .all(|(v, h)| *v <= h + tol * (1.0 + h.abs())))
    }

    /// Row concatenation of both descriptions.
    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope, PolytopeError> {
        if self.dim() != other.dim() {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let rows = self.num_rows() + other.num_rows();
        let mut normals = DMatrix::zeros(rows, self.dim());
        normals
            .view_mut((0, 0), (self.num_rows(), self.dim()))
            .copy_from(&self.normals);
        normals
            .view_mut((self.num_rows(), 0), (other.num_rows(), self.dim()))
            .copy_from(&other.normals);
        let mut offsets = DVector::zeros(rows);
        offsets.rows_mut(0, self.num_rows()).copy_from(&self.offsets);
        offsets
            .rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.offsets);
        Ok(HPolytope { normals, offsets })
    }

    /// max d'x over the polytope with variables boxed at +-1e6.
    pub fn support(&self, dir: &DVector<f64>) -> Result<f64, PolytopeError> {
        let (value, _) = self.support_point(dir)?;
        Ok(value)
    }

    pub fn support_point(&self, dir: &DVector<f64>) -> Result<(f64, DVector<f64>), PolytopeError> {
        let dim = self.dim();
        if dir.len() != dim {
            return Err(PolytopeError::DimensionMismatch {
                expected: dim,
                got: dir.len(),
            });
        }
        // Unboxed first: the huge box offsets wreck the splitting
        // solver's scaling, and most queried sets are bounded anyway.
        let sol = qp::solve_lp(&(-dir), &self.normals, &self.offsets, LP_TOL)
            .map_err(|e| PolytopeError::LpFailure(e.to_string()))?;
        match sol.status {
            SolveStatus::Optimal => return Ok((-sol.objective, sol.x)),
            SolveStatus::Infeasible => return Err(PolytopeError::Empty),
            _ => {}
        }
        let (g, h) = self.boxed_rows();
        let sol = qp::solve_lp(&(-dir), &g, &h, LP_TOL)
            .map_err(|e| PolytopeError::LpFailure(e.to_string()))?;
        match sol.status {
            SolveStatus::Optimal => Ok((-sol.objective, sol.x)),
            SolveStatus::Infeasible => Err(PolytopeError::Empty),
            other => Err(PolytopeError::LpFailure(format!(
                "support LP ended with {other:?}"
            ))),
        }
    }

    fn boxed_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let dim = self.dim();
        let rows = self.num_rows();
        let mut g = DMatrix::zeros(rows + 2 * dim, dim);
        g.view_mut((0, 0), (rows, dim)).copy_from(&self.normals);
        let mut h = DVector::zeros(rows + 2 * dim);
        h.rows_mut(0, rows).copy_from(&self.offsets);
        for j in 0..dim {
            g[(rows + 2 * j, j)] = 1.0;
            h[rows + 2 * j] = LP_BOX;
            g[(rows + 2 * j + 1, j)] = -1.0;
            h[rows + 2 * j + 1] = LP_BOX;
        }
        (g, h)
    }

    /// Chebyshev center and radius, with variables boxed at +-1e6.
    /// A zero row with negative offset makes the set empty outright.
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64), PolytopeError> {
        let dim = self.dim();
        let rows = self.num_rows();
        for i in 0..rows {
            if self.normals.row(i).norm() <= 1e-12 && self.offsets[i] < -LP_TOL {
                return Ok((DVector::zeros(dim), f64::NEG_INFINITY));
            }
        }
        // Variables (x, r); maximize r.
        let mut g = DMatrix::zeros(rows + 2 * dim + 1, dim + 1);
        let mut h = DVector::zeros(rows + 2 * dim + 1);
        for i in 0..rows {
            let norm = self.normals.row(i).norm();
            for j in 0..dim {
                g[(i, j)] = self.normals[(i, j)];
            }
            g[(i, dim)] = norm;
            h[i] = self.offsets[i];
        }
        for j in 0..dim {
            g[(rows + 2 * j, j)] = 1.0;
            h[rows + 2 * j] = LP_BOX;
            g[(rows + 2 * j + 1, j)] = -1.0;
            h[rows + 2 * j + 1] = LP_BOX;
        }
        g[(rows + 2 * dim, dim)] = 1.0;
        h[rows + 2 * dim] = LP_BOX;
        let mut c = DVector::zeros(dim + 1);
        c[dim] = -1.0;
        let sol = qp::solve_lp(&c, &g, &h, LP_TOL)
            .map_err(|e| PolytopeError::LpFailure(e.to_string()))?;
        match sol.status {
            SolveStatus::Optimal => {
                let center = sol.x.rows(0, dim).clone_owned();
                Ok((center, sol.x[dim]))
            }
            SolveStatus::Infeasible => Ok((DVector::zeros(dim), f64::NEG_INFINITY)),
            other => Err(PolytopeError::LpFailure(format!(
                "Chebyshev LP ended with {other:?}"
            ))),
        }
    }

    pub fn is_empty(&self) -> Result<bool, PolytopeError> {
        if self.num_rows() == 0 {
            return Ok(false);
        }
        let (_, radius) = self.chebyshev_center()?;
        Ok(radius < -LP_TOL)
    }

    /// Drops redundant rows one at a time: a row is redundant when its
    /// support over the remaining rows (with its own offset relaxed)
    /// does not exceed its offset. Sequential removal keeps exactly one
    /// copy of duplicated rows.
    pub fn remove_redundant(&self) -> Result<HPolytope, PolytopeError> {
        if self.is_empty()? {
            return Err(PolytopeError::Empty);
        }
        let dim = self.dim();
        let mut rows: Vec<(DVector<f64>, f64)> = (0..self.num_rows())
            .map(|i| (self.normals.row(i).transpose(), self.offsets[i]))
            .collect();
        // Zero rows with nonnegative offset are trivially redundant.
        rows.retain(|(n, _)| n.norm() > 1e-12);
        let mut i = 0;
        while i < rows.len() {
            if rows.len() == 1 {
                break;
            }
            let mut g = DMatrix::zeros(rows.len(), dim);
            let mut h = DVector::zeros(rows.len());
            for (r, (n, o)) in rows.iter().enumerate() {
                g.row_mut(r).copy_from(&n.transpose());
                h[r] = *o + if r == i { 1.0 + o.abs() } else { 0.0 };
            }
            let candidate = HPolytope {
                normals: g,
                offsets: h,
            };
            let dir = rows[i].0.clone();
            let value = candidate.support(&dir)?;
            if value <= rows[i].1 + LP_TOL * (1.0 + rows[i].1.abs()) {
                rows.remove(i);
            } else {
                i += 1;
            }
        }
        let m = rows.len();
        let mut normals = DMatrix::zeros(m, dim);
        let mut offsets = DVector::zeros(m);
        for (r, (n, o)) in rows.iter().enumerate() {
            normals.row_mut(r).copy_from(&n.transpose());
            offsets[r] = *o;
        }
        Ok(HPolytope { normals, offsets })
    }

    /// Mutual containment via support values.
    pub fn set_equal(&self, other: &HPolytope, tol: f64) -> Result<bool, PolytopeError> {
        if self.dim() != other.dim() {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self.contained_in(other, tol)? && other.contained_in(self, tol)?)
    }

    /// self subseteq other, via support of self along other's rows.
    pub fn contained_in(&self, other: &HPolytope, tol: f64) -> Result<bool, PolytopeError> {
        for i in 0..other.num_rows() {
            let dir = other.normals.row(i).transpose();
            if dir.norm() <= 1e-12 {
                continue;
            }
            let value = self.support(&dir)?;
            if value > other.offsets[i] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Fixes the trailing coordinates to the given values, returning the
    /// slice polytope in the leading coordinates.
    pub fn fix_last_coords(&self, values: &DVector<f64>) -> Result<HPolytope, PolytopeError> {
        let fixed = values.len();
        if fixed > self.dim() {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim(),
                got: fixed,
            });
        }
        let keep = self.dim() - fixed;
        let normals = self.normals.columns(0, keep).clone_owned();
        let tail = self.normals.columns(keep, fixed).clone_owned();
        let offsets = &self.offsets - tail * values;
        Ok(HPolytope { normals, offsets })
    }

    /// Fourier-Motzkin elimination of the listed coordinates, pruning
    /// after each variable.
    pub fn project_eliminate(&self, drop: &[usize]) -> Result<HPolytope, PolytopeError> {
        let mut current = self.clone();
        // Eliminate from the highest index so earlier indices stay valid.
        let mut order: Vec<usize> = drop.to_vec();
        order.sort_unstable();
        order.dedup();
        for &col in order.iter().rev() {
            if col >= current.dim() {
                return Err(PolytopeError::DimensionMismatch {
                    expected: current.dim(),
                    got: col,
                });
            }
            current = current.eliminate_one(col)?;
            current = current.dedup_rows().remove_redundant()?;
        }
        Ok(current)
    }

    fn eliminate_one(&self, col: usize) -> Result<HPolytope, PolytopeError> {
        let dim = self.dim();
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        let mut zero: Vec<usize> = Vec::new();
        for i in 0..self.num_rows() {
            let c = self.normals[(i, col)];
            if c > 1e-10 {
                pos.push(i);
            } else if c < -1e-10 {
                neg.push(i);
            } else {
                zero.push(i);
            }
        }
        let new_rows = pos.len() * neg.len() + zero.len();
        if new_rows > FM_ROW_CAP {
            return Err(PolytopeError::ProjectionBlowup { cap: FM_ROW_CAP });
        }
        let keep_cols: Vec<usize> = (0..dim).filter(|&j| j != col).collect();
        let mut normals = DMatrix::zeros(new_rows, dim - 1);
        let mut offsets = DVector::zeros(new_rows);
        let mut r = 0;
        for &i in &pos {
            let ci = self.normals[(i, col)];
            for &j in &neg {
                let cj = self.normals[(j, col)];
                for (t, &k) in keep_cols.iter().enumerate() {
                    normals[(r, t)] = self.normals[(i, k)] / ci - self.normals[(j, k)] / cj;
                }
                offsets[r] = self.offsets[i] / ci - self.offsets[j] / cj;
                r += 1;
            }
        }
        for &i in &zero {
            for (t, &k) in keep_cols.iter().enumerate() {
                normals[(r, t)] = self.normals[(i, k)];
            }
            offsets[r] = self.offsets[i];
            r += 1;
        }
        Ok(HPolytope { normals, offsets })
    }

    /// Exact-duplicate pruning after row normalization.
    fn dedup_rows(&self) -> HPolytope {
        let dim = self.dim();
        let mut rows: Vec<(Vec<i64>, DVector<f64>, f64)> = Vec::new();
        for i in 0..self.num_rows() {
            let n = self.normals.row(i).transpose();
            let norm = n.norm();
            if norm <= 1e-12 {
                if self.offsets[i] < -LP_TOL {
                    // Keep one infeasibility marker row.
                    rows.push((vec![i64::MIN], n, self.offsets[i]));
                }
                continue;
            }
            let scaled: DVector<f64> = &n / norm;
            let off = self.offsets[i] / norm;
            let mut key: Vec<i64> = scaled.iter().map(|v| (v / 1e-9).round() as i64).collect();
            key.push((off / 1e-9).round() as i64);
            rows.push((key, scaled, off));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows.dedup_by(|a, b| a.0 == b.0);
        let mut normals = DMatrix::zeros(rows.len(), dim);
        let mut offsets = DVector::zeros(rows.len());
        for (r, (_, n, o)) in rows.iter().enumerate() {
            normals.row_mut(r).copy_from(&n.transpose());
            offsets[r] = *o;
        }
        HPolytope { normals, offsets }
    }

    /// Axis-aligned bounding box via support LPs: (lower, upper).
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>), PolytopeError> {
        let dim = self.dim();
        let mut lower = DVector::zeros(dim);
        let mut upper = DVector::zeros(dim);
        for j in 0..dim {
            let mut e = DVector::zeros(dim);
            e[j] = 1.0;
            upper[j] = self.support(&e)?;
            e[j] = -1.0;
            lower[j] = -self.support(&e)?;
            if upper[j] > 0.9 * LP_BOX || lower[j] < -0.9 * LP_BOX {
                return Err(PolytopeError::Unbounded);
            }
        }
        Ok((lower, upper))
    }

    /// Uniform sampling: rejection from the bounding box, switching to
    /// hit-and-run when the acceptance rate drops below 1%. Each point
    /// index draws from its own seeded substream, so results do not
    /// depend on how the work is partitioned.
    pub fn sample_uniform(
        &self,
        count: usize,
        seed: u64,
    ) -> Result<Vec<DVector<f64>>, PolytopeError> {
        if self.is_empty()? {
            return Err(PolytopeError::Empty);
        }
        let (lower, upper) = self.bounding_box()?;
        let dim = self.dim();

        // Acceptance probe on a dedicated substream.
        let mut probe_rng = substream(seed, u64::MAX);
        let mut accepted = 0usize;
        const PROBE: usize = 512;
        for _ in 0..PROBE {
            let x = DVector::from_fn(dim, |j, _| probe_rng.gen_range(lower[j]..=upper[j]));
            if self.contains(&x, 0.0)? {
                accepted += 1;
            }
        }
        let use_hit_and_run = accepted * 100 < PROBE;

        let mut out = Vec::with_capacity(count);
        if !use_hit_and_run {
            for idx in 0..count {
                let mut rng = substream(seed, idx as u64);
                let mut found = None;
                for _ in 0..100_000 {
                    let x = DVector::from_fn(dim, |j, _| rng.gen_range(lower[j]..=upper[j]));
                    if self.contains(&x, 0.0)? {
                        found = Some(x);
                        break;
                    }
                }
                out.push(found.ok_or(PolytopeError::SamplingFloor)?);
            }
        } else {
            let (center, radius) = self.chebyshev_center()?;
            if radius <= 0.0 {
                return Err(PolytopeError::SamplingFloor);
            }
            let burn_in = 50 * dim;
            for idx in 0..count {
                let mut rng = substream(seed, idx as u64);
                let mut x = center.clone();
                for _ in 0..burn_in {
                    x = self.hit_and_run_step(&x, &mut rng)?;
                }
                out.push(x);
            }
        }
        Ok(out)
    }

    fn hit_and_run_step(
        &self,
        x: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DVector<f64>, PolytopeError> {
        let dim = self.dim();
        let mut dir = DVector::from_fn(dim, |_, _| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            u
        });
        let norm = dir.norm();
        if norm <= 1e-12 {
            dir[0] = 1.0;
        } else {
            dir /= norm;
        }
        // Feasible span along the chord.
        let num = &self.offsets - &self.normals * x;
        let den = &self.normals * &dir;
        let mut t_lo = f64::NEG_INFINITY;
        let mut t_hi = f64::INFINITY;
        for i in 0..self.num_rows() {
            if den[i] > 1e-12 {
                t_hi = t_hi.min(num[i] / den[i]);
            } else if den[i] < -1e-12 {
                t_lo = t_lo.max(num[i] / den[i]);
            } else if num[i] < -LP_TOL {
                return Err(PolytopeError::Empty);
            }
        }
        t_lo = t_lo.max(-LP_BOX);
        t_hi = t_hi.min(LP_BOX);
        if t_hi <= t_lo {
            return Ok(x.clone());
        }
        let t = rng.gen_range(t_lo..=t_hi);
        Ok(x + dir * t)
    }

    /// Vertices of a bounded 2D polytope, counterclockwise.
    pub fn vertices_2d(&self) -> Result<Vec<DVector<f64>>, PolytopeError> {
        if self.dim() != 2 {
            return Err(PolytopeError::NotPlanar(self.dim()));
        }
        let reduced = self.remove_redundant()?;
        let n = reduced.num_rows();
        let mut pts: Vec<DVector<f64>> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        reduced.normals[(i, 0)],
                        reduced.normals[(i, 1)],
                        reduced.normals[(j, 0)],
                        reduced.normals[(j, 1)],
                    ],
                );
                let rhs = DVector::from_vec(vec![reduced.offsets[i], reduced.offsets[j]]);
                if let Some(v) = m.lu().solve(&rhs) {
                    if v.amax() < LP_BOX && reduced.contains(&v, 1e-7)? {
                        pts.push(v);
                    }
                }
            }
        }
        // Dedup at geometric tolerance.
        let mut unique: Vec<DVector<f64>> = Vec::new();
        for p in pts {
            if !unique.iter().any(|q| (q - &p).amax() < 1e-6) {
                unique.push(p);
            }
        }
        if unique.is_empty() {
            return Err(PolytopeError::Empty);
        }
        let cx = unique.iter().map(|p| p[0]).sum::<f64>() / unique.len() as f64;
        let cy = unique.iter().map(|p| p[1]).sum::<f64>() / unique.len() as f64;
        unique.sort_by(|a, b| {
            let aa = (a[1] - cy).atan2(a[0] - cx);
            let bb = (b[1] - cy).atan2(b[0] - cx);
            aa.partial_cmp(&bb).unwrap()
        });
        Ok(unique)
    }

    /// Shoelace area of a bounded 2D polytope.
    pub fn area_2d(&self) -> Result<f64, PolytopeError> {
        let verts = self.vertices_2d()?;
        let n = verts.len();
        let mut acc = 0.0;
        for i in 0..n {
            let a = &verts[i];
            let b = &verts[(i + 1) % n];
            acc += a[0] * b[1] - b[0] * a[1];
        }
        Ok(0.5 * acc.abs())
    }
}

fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Result of the maximal admissible set recursion.
#[derive(Debug, Clone)]
pub struct AdmissibleSetResult {
    pub set: HPolytope,
    pub determination_index: usize,
    pub converged: bool,
}

/// Pre(P) under x+ = Acl x with the input constraint expressed on the
/// state: {x : (input rows) x <= input offsets, H_P Acl x <= h_P}.
pub fn predecessor(
    set: &HPolytope,
    a_cl: &DMatrix<f64>,
    input_rows: &DMatrix<f64>,
    input_offsets: &DVector<f64>,
) -> Result<HPolytope, PolytopeError> {
    let dim = set.dim();
    if a_cl.nrows() != dim || a_cl.ncols() != dim {
        return Err(PolytopeError::DimensionMismatch {
            expected: dim,
            got: a_cl.ncols(),
        });
    }
    if input_rows.nrows() > 0 && input_rows.ncols() != dim {
        return Err(PolytopeError::DimensionMismatch {
            expected: dim,
            got: input_rows.ncols(),
        });
    }
    let mapped = set.normals() * a_cl;
    let rows = input_rows.nrows() + mapped.nrows();
    let mut normals = DMatrix::zeros(rows, dim);
    normals
        .view_mut((0, 0), (input_rows.nrows(), dim))
        .copy_from(input_rows);
    normals
        .view_mut((input_rows.nrows(), 0), (mapped.nrows(), dim))
        .copy_from(&mapped);
    let mut offsets = DVector::zeros(rows);
    offsets
        .rows_mut(0, input_rows.nrows())
        .copy_from(input_offsets);
    offsets
        .rows_mut(input_rows.nrows(), mapped.nrows())
        .copy_from(set.offsets());
    HPolytope::new(normals, offsets)
}

/// Gilbert-Tan recursion Sigma_{i+1} = Pre(Sigma_i) n Sigma_i from
/// Sigma_0 = X, with the input constraint entering through K.
pub fn max_admissible_set(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    x_set: &HPolytope,
    u_set: &HPolytope,
    max_iter: usize,
) -> Result<AdmissibleSetResult, PolytopeError> {
    let a_cl = a + b * k;
    if !crate::linalg::is_schur_stable(&a_cl).stable {
        return Err(PolytopeError::NotStable);
    }
    let input_rows = u_set.normals() * k;
    let input_offsets = u_set.offsets().clone();
    let origin = DVector::zeros(x_set.dim());
    if !x_set.contains(&origin, 0.0)? || !u_set.contains(&DVector::zeros(u_set.dim()), 0.0)? {
        return Err(PolytopeError::OriginExcluded);
    }
    let mut current = x_set.remove_redundant()?;
    for i in 0..max_iter {
        let pre = predecessor(&current, &a_cl, &input_rows, &input_offsets)?;
        let next = pre.intersect(&current)?;
        if next.is_empty()? {
            return Err(PolytopeError::OriginExcluded);
        }
        let next = next.dedup_rows().remove_redundant()?;
        if next.set_equal(&current, SET_EQUAL_TOL)? {
            return Ok(AdmissibleSetResult {
                set: next,
                determination_index: i,
                converged: true,
            });
        }
        current = next;
    }
    Err(PolytopeError::NotConverged { max_iter })
}

/// Gilbert-Tan recursion on the lifted autonomous system
/// [x; gamma]+ = [[A+BK, B M_gamma], [0, I]] [x; gamma] with stage
/// constraints x in X, Kx + M_gamma gamma in U, gamma in (1-eps) Gamma.
#[allow(clippy::too_many_arguments)]
pub fn max_admissible_set_aug(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    m_gamma: &DMatrix<f64>,
    x_set: &HPolytope,
    u_set: &HPolytope,
    gamma_set: &HPolytope,
    epsilon: f64,
    max_iter: usize,
) -> Result<AdmissibleSetResult, PolytopeError> {
    let m = a.nrows();
    let p = m_gamma.ncols();
    if p == 0 {
        return max_admissible_set(a, b, k, x_set, u_set, max_iter);
    }
    let a_cl = a + b * k;
    if !crate::linalg::is_schur_stable(&a_cl).stable {
        return Err(PolytopeError::NotStable);
    }
    let dim = m + p;
    // Lifted map.
    let mut f = DMatrix::zeros(dim, dim);
    f.view_mut((0, 0), (m, m)).copy_from(&a_cl);
    f.view_mut((0, m), (m, p)).copy_from(&(b * m_gamma));
    f.view_mut((m, m), (p, p))
        .copy_from(&DMatrix::identity(p, p));
    // Stage set: x in X and gamma in (1-eps) Gamma.
    let xr = x_set.num_rows();
    let gr = gamma_set.num_rows();
    let mut normals = DMatrix::zeros(xr + gr, dim);
    normals.view_mut((0, 0), (xr, m)).copy_from(x_set.normals());
    normals
        .view_mut((xr, m), (gr, p))
        .copy_from(gamma_set.normals());
    let mut offsets = DVector::zeros(xr + gr);
    offsets.rows_mut(0, xr).copy_from(x_set.offsets());
    offsets
        .rows_mut(xr, gr)
        .copy_from(&(gamma_set.offsets() * (1.0 - epsilon)));
    let stage = HPolytope::new(normals, offsets)?;
    // Input rows on the lifted state: H_U [K, M_gamma] z <= h_U.
    let ur = u_set.num_rows();
    let mut input_rows = DMatrix::zeros(ur, dim);
    input_rows
        .view_mut((0, 0), (ur, m))
        .copy_from(&(u_set.normals() * k));
    input_rows
        .view_mut((0, m), (ur, p))
        .copy_from(&(u_set.normals() * m_gamma));
    let input_offsets = u_set.offsets().clone();

    if !stage.contains(&DVector::zeros(dim), 0.0)? {
        return Err(PolytopeError::OriginExcluded);
    }
    let mut current = stage.remove_redundant()?;
    for i in 0..max_iter {
        let pre = predecessor(&current, &f, &input_rows, &input_offsets)?;
        let next = pre.intersect(&current)?;
        if next.is_empty()? {
            return Err(PolytopeError::OriginExcluded);
        }
        let next = next.dedup_rows().remove_redundant()?;
        if next.set_equal(&current, SET_EQUAL_TOL)? {
            return Ok(AdmissibleSetResult {
                set: next,
                determination_index: i,
                converged: true,
            });
        }
        current = next;
    }
    Err(PolytopeError::NotConverged { max_iter })
}

/// N-step controllable set to Xf: K_0 = Xf,
/// K_{i+1} = {x in X : exists u in U with Ax + Bu in K_i}, built in
/// (x, u) space and projected by eliminating u.
pub fn n_step_controllable_set(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x_set: &HPolytope,
    u_set: &HPolytope,
    xf: &HPolytope,
    n: usize,
) -> Result<HPolytope, PolytopeError> {
    let m = a.nrows();
    let nu = b.ncols();
    let mut current = xf.clone();
    for _ in 0..n {
        let rows = x_set.num_rows() + u_set.num_rows() + current.num_rows();
        let mut normals = DMatrix::zeros(rows, m + nu);
        let mut offsets = DVector::zeros(rows);
        let mut r = 0;
        for i in 0..x_set.num_rows() {
            for j in 0..m {
                normals[(r, j)] = x_set.normals()[(i, j)];
            }
            offsets[r] = x_set.offsets()[i];
            r += 1;
        }
        for i in 0..u_set.num_rows() {
            for j in 0..nu {
                normals[(r, m + j)] = u_set.normals()[(i, j)];
            }
            offsets[r] = u_set.offsets()[i];
            r += 1;
        }
        let ha = current.normals() * a;
        let hb = current.normals() * b;
        for i in 0..current.num_rows() {
            for j in 0..m {
                normals[(r, j)] = ha[(i, j)];
            }
            for j in 0..nu {
                normals[(r, m + j)] = hb[(i, j)];
            }
            offsets[r] = current.offsets()[i];
            r += 1;
        }
        let lifted = HPolytope::new(normals, offsets)?;
        let drop: Vec<usize> = (m..m + nu).collect();
        current = lifted.project_eliminate(&drop)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_box(dim: usize) -> HPolytope {
        HPolytope::box_from_half_widths(&vec![1.0; dim])
    }

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn contains_boundary_and_outside() {
        let b = unit_box(2);
        assert!(b.contains(&vec2(0.0, 0.0), 0.0).unwrap());
        assert!(b.contains(&vec2(1.0, 1.0), 0.0).unwrap());
        assert!(!b.contains(&vec2(1.000001, 0.0), 1e-9).unwrap());
    }

    #[test]
    fn intersect_boxes() {
        let a = unit_box(2);
        let shifted = HPolytope::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            DVector::from_vec(vec![2.0, 0.0, 2.0, 0.0]),
        )
        .unwrap();
        let inter = a.intersect(&shifted).unwrap();
        assert!(inter.contains(&vec2(0.5, 0.5), 0.0).unwrap());
        assert!(!inter.contains(&vec2(-0.5, 0.5), 0.0).unwrap());
        let expected = HPolytope::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        assert!(inter.set_equal(&expected, 1e-8).unwrap());
    }

    #[test]
    fn empty_intersection_detected() {
        let left = HPolytope::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![-1.0]),
        )
        .unwrap();
        let right = HPolytope::new(
            DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            DVector::from_vec(vec![-1.0, 2.0]),
        )
        .unwrap();
        assert!(left.intersect(&right).unwrap().is_empty().unwrap());
        assert!(!unit_box(2).is_empty().unwrap());
        // Single halfspace is nonempty.
        let half = HPolytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        assert!(!half.is_empty().unwrap());
    }

    #[test]
    fn remove_redundant_keeps_tight_row() {
        let p = HPolytope::new(
            DMatrix::from_row_slice(3, 1, &[1.0, 1.0, -1.0]),
            DVector::from_vec(vec![1.0, 2.0, 1.0]),
        )
        .unwrap();
        let r = p.remove_redundant().unwrap();
        assert_eq!(r.num_rows(), 2);
        assert!(r.contains(&DVector::from_vec(vec![1.0]), 1e-9).unwrap());
        assert!(!r.contains(&DVector::from_vec(vec![1.5]), 1e-9).unwrap());
    }

    #[test]
    fn remove_redundant_duplicated_box_rows() {
        let b = unit_box(2);
        let doubled = b.intersect(&b).unwrap();
        let r = doubled.remove_redundant().unwrap();
        assert_eq!(r.num_rows(), 4);
        assert!(r.set_equal(&b, 1e-9).unwrap());
    }

    #[test]
    fn remove_redundant_drops_convex_combination_row() {
        // Support-LP oracle: a strict convex combination of two facets.
        let mut normals = DMatrix::zeros(5, 2);
        normals
            .view_mut((0, 0), (4, 2))
            .copy_from(unit_box(2).normals());
        normals[(4, 0)] = 0.5;
        normals[(4, 1)] = 0.5;
        let offsets = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.2]);
        let p = HPolytope::new(normals, offsets).unwrap();
        // Oracle check: max of the extra row over the box is 1 < 1.2.
        let dir = vec2(0.5, 0.5);
        assert!(unit_box(2).support(&dir).unwrap() < 1.2);
        let r = p.remove_redundant().unwrap();
        assert_eq!(r.num_rows(), 4);
    }

    #[test]
    fn set_equal_cases() {
        let b = unit_box(2);
        assert!(b.set_equal(&b, 1e-9).unwrap());
        let thin = HPolytope::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0, 0.5, 0.5]),
        )
        .unwrap();
        assert!(!b.set_equal(&thin, 1e-9).unwrap());
        let redundant = b.intersect(&b).unwrap();
        assert!(b.set_equal(&redundant, 1e-9).unwrap());
    }

    #[test]
    fn predecessor_contraction() {
        // Acl = 0.5 I, no input rows: Pre([-1,1]^2) = [-2,2]^2.
        let b = unit_box(2);
        let a_cl = DMatrix::identity(2, 2) * 0.5;
        let pre = predecessor(&b, &a_cl, &DMatrix::zeros(0, 2), &DVector::zeros(0)).unwrap();
        let two_box = HPolytope::box_from_half_widths(&[2.0, 2.0]);
        assert!(pre.set_equal(&two_box, 1e-9).unwrap());
    }

    #[test]
    fn predecessor_scalar_with_input_rows() {
        // A=1, B=1, K=-0.5: Acl=0.5, U=[-0.4,0.4] => |x| <= 0.8 binds.
        let p = HPolytope::box_from_half_widths(&[1.0]);
        let a_cl = DMatrix::from_element(1, 1, 0.5);
        let input_rows = DMatrix::from_row_slice(2, 1, &[-0.5, 0.5]);
        let input_offsets = DVector::from_vec(vec![0.4, 0.4]);
        let pre = predecessor(&p, &a_cl, &input_rows, &input_offsets).unwrap();
        let expected = HPolytope::box_from_half_widths(&[0.8]);
        assert!(pre.set_equal(&expected, 1e-9).unwrap());
    }

    #[test]
    fn admissible_set_already_invariant_box() {
        let a = DMatrix::identity(2, 2) * 0.5;
        let b = DMatrix::zeros(2, 1);
        let k = DMatrix::zeros(1, 2);
        let x = HPolytope::box_from_half_widths(&[1.0, 1.0]);
        let u = HPolytope::box_from_half_widths(&[1.0]);
        let res = max_admissible_set(&a, &b, &k, &x, &u, 100).unwrap();
        assert_eq!(res.determination_index, 0);
        assert!(res.set.set_equal(&x, 1e-9).unwrap());
    }

    #[test]
    fn admissible_set_scalar_matches_grid_oracle() {
        // a=1.5, b=1, k chosen so a+bk=0.5; tight input set shrinks X.
        let a = DMatrix::from_element(1, 1, 1.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let k = DMatrix::from_element(1, 1, -1.0);
        let x = HPolytope::box_from_half_widths(&[5.0]);
        let u = HPolytope::box_from_half_widths(&[1.0]);
        let res = max_admissible_set(&a, &b, &k, &x, &u, 100).unwrap();
        // Grid oracle: simulate the closed loop, admissible iff no violation.
        let a_cl = 0.5;
        for i in 0..=200 {
            let x0 = -5.0 + 10.0 * (i as f64) / 200.0;
            let mut xi = x0;
            let mut ok = true;
            for _ in 0..200 {
                if xi.abs() > 5.0 + 1e-9 || xi.abs() > 1.0 + 1e-9 {
                    // |u| = |k x| = |x| here.
                    ok = false;
                    break;
                }
                xi *= a_cl;
            }
            let inside = res
                .set
                .contains(&DVector::from_vec(vec![x0]), 1e-9)
                .unwrap();
            // Skip grid points within LP tolerance of the boundary.
            let boundary_dist = (x0.abs() - 1.0).abs();
            if boundary_dist > 1e-6 {
                assert_eq!(inside, ok, "x0 = {x0}");
            }
        }
    }

    #[test]
    fn augmented_reduces_to_plain_when_gamma_empty() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.1, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sol = crate::linalg::solve_dare(
            &a,
            &b,
            &DMatrix::identity(2, 2),
            &DMatrix::identity(1, 1),
            1e-12,
            100_000,
        )
        .unwrap();
        let x = HPolytope::box_from_half_widths(&[5.0, 5.0]);
        let u = HPolytope::box_from_half_widths(&[1.0]);
        let plain = max_admissible_set(&a, &b, &sol.k, &x, &u, 200).unwrap();
        let aug = max_admissible_set_aug(
            &a,
            &b,
            &sol.k,
            &DMatrix::zeros(1, 0),
            &x,
            &u,
            &HPolytope::new(DMatrix::zeros(0, 0), DVector::zeros(0)).unwrap(),
            1e-6,
            200,
        )
        .unwrap();
        assert!(aug.set.set_equal(&plain.set, 1e-8).unwrap());
    }

    #[test]
    fn projection_simple_boxes() {
        // {0<=x<=1, 0<=y<=1}: dropping y gives [0,1].
        let p = HPolytope::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        let proj = p.project_eliminate(&[1]).unwrap();
        let interval = HPolytope::new(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        assert!(proj.set_equal(&interval, 1e-9).unwrap());

        // Extra row x + y <= 1.5 does not cut the projection.
        let extra = HPolytope::new(
            DMatrix::from_row_slice(5, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.5]),
        )
        .unwrap();
        let proj2 = extra.project_eliminate(&[1]).unwrap();
        assert!(proj2.set_equal(&interval, 1e-9).unwrap());
    }

    #[test]
    fn controllable_set_scalar_intervals() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let x = HPolytope::box_from_half_widths(&[5.0]);
        let u = HPolytope::box_from_half_widths(&[1.0]);
        let xf = HPolytope::box_from_half_widths(&[1.0]);
        let k0 = n_step_controllable_set(&a, &b, &x, &u, &xf, 0).unwrap();
        assert!(k0.set_equal(&xf, 1e-9).unwrap());
        let k1 = n_step_controllable_set(&a, &b, &x, &u, &xf, 1).unwrap();
        assert!(k1
            .set_equal(&HPolytope::box_from_half_widths(&[2.0]), 1e-8)
            .unwrap());
        let k2 = n_step_controllable_set(&a, &b, &x, &u, &xf, 2).unwrap();
        assert!(k2
            .set_equal(&HPolytope::box_from_half_widths(&[3.0]), 1e-8)
            .unwrap());
    }

    #[test]
    fn sampling_uniform_box_statistics() {
        let b = unit_box(2);
        let pts = b.sample_uniform(1000, 7).unwrap();
        assert_eq!(pts.len(), 1000);
        let mean_x: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / 1000.0;
        let mean_y: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / 1000.0;
        assert!(mean_x.abs() < 0.1 && mean_y.abs() < 0.1);
        let again = b.sample_uniform(1000, 7).unwrap();
        for (p, q) in pts.iter().zip(again.iter()) {
            assert_eq!(p.as_slice(), q.as_slice());
        }
    }

    #[test]
    fn sampling_simplex_area_ratio() {
        // x, y >= 0, x + y <= 1: P(x + y <= 0.5) = 0.25.
        let p = HPolytope::new(
            DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        let pts = p.sample_uniform(10_000, 3).unwrap();
        let frac = pts.iter().filter(|p| p[0] + p[1] <= 0.5).count() as f64 / 10_000.0;
        assert!((frac - 0.25).abs() < 0.05, "frac = {frac}");
        for pt in &pts {
            assert!(p.contains(pt, 1e-9).unwrap());
        }
    }

    #[test]
    fn vertices_and_area_2d() {
        let b = unit_box(2);
        let verts = b.vertices_2d().unwrap();
        assert_eq!(verts.len(), 4);
        assert_abs_diff_eq!(b.area_2d().unwrap(), 4.0, epsilon = 1e-9);
        let tri = HPolytope::new(
            DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(tri.area_2d().unwrap(), 0.5, epsilon = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// remove_redundant and intersect never change membership.
        #[test]
        fn membership_preserved_by_reduction(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Random bounded 2D polytope: box plus random cuts.
            let mut normals = DMatrix::zeros(8, 2);
            normals.view_mut((0,0),(4,2)).copy_from(unit_box(2).normals());
            let mut offsets = DVector::zeros(8);
            for i in 0..4 { offsets[i] = rng.gen_range(0.5..2.0); }
            for i in 4..8 {
                normals[(i,0)] = rng.gen_range(-1.0..1.0f64);
                normals[(i,1)] = rng.gen_range(-1.0..1.0f64);
                offsets[i] = rng.gen_range(0.3..2.0);
            }
            let p = HPolytope::new(normals, offsets).unwrap();
            let reduced = p.remove_redundant().unwrap();
            let doubled = p.intersect(&p).unwrap();
            for _ in 0..200 {
                let x = vec2(rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5));
                let tol = 1e-9;
                let m0 = p.contains(&x, tol).unwrap();
                // Skip probes within tolerance of a facet.
                let margin = (p.normals() * &x - p.offsets()).iter()
                    .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
                if margin < 1e-7 { continue; }
                prop_assert_eq!(m0, reduced.contains(&x, tol).unwrap());
                prop_assert_eq!(m0, doubled.contains(&x, tol).unwrap());
            }
        }

        /// project_eliminate agrees with an exists-feasibility LP oracle.
        #[test]
        fn projection_matches_feasibility_oracle(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut normals = DMatrix::zeros(9, 3);
            let mut offsets = DVector::zeros(9);
            for i in 0..6 {
                let j = i / 2;
                normals[(i, j)] = if i % 2 == 0 { 1.0 } else { -1.0 };
                offsets[i] = rng.gen_range(0.5..1.5);
            }
            for i in 6..9 {
                for j in 0..3 { normals[(i,j)] = rng.gen_range(-1.0..1.0f64); }
                offsets[i] = rng.gen_range(0.3..1.5);
            }
            let p = HPolytope::new(normals, offsets).unwrap();
            let proj = p.project_eliminate(&[2]).unwrap();
            for _ in 0..40 {
                let x = vec2(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                // Oracle: is {z : rows with (x) substituted} nonempty?
                let slice_normals = p.normals().column(2).clone_owned();
                let lead = p.normals().columns(0, 2).clone_owned();
                let rhs = p.offsets() - lead * &x;
                let line = HPolytope::new(
                    DMatrix::from_iterator(9, 1, slice_normals.iter().cloned()),
                    rhs,
                ).unwrap();
                let feasible = !line.is_empty().unwrap();
                let inside = proj.contains(&x, 1e-7).unwrap();
                // Skip boundary-ambiguous probes.
                let margin = (proj.normals() * &x - proj.offsets()).iter()
                    .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
                if margin < 1e-6 { continue; }
                prop_assert_eq!(inside, feasible);
            }
        }
    }
}
