//! Sparse symmetric LDL^T factorization without pivoting.
//!
//! The pattern is fixed once (fill-reducing AMD ordering, elimination tree,
//! column counts); numeric factorizations then reuse it. Pivots whose
//! magnitude falls below a threshold are replaced by a small value with the
//! expected sign, and the inertia of the computed factor is reported so callers
//! can apply inertia correction.

use std::collections::HashMap;

const NONE: usize = usize::MAX;

/// Builder collecting the upper-triangular pattern of a symmetric matrix.
///
/// Every `slot` call returns a stable index into the value array passed to
/// [`SymbolicLdl::factor`]; duplicated coordinates share one slot.
#[derive(Default, Debug, Clone)]
pub struct PatternBuilder {
    n: usize,
    map: HashMap<(u32, u32), usize>,
    coords: Vec<(u32, u32)>,
}

impl PatternBuilder {
    pub fn new(n: usize) -> Self {
        let mut b = Self { n, map: HashMap::new(), coords: Vec::new() };
        for i in 0..n {
            b.slot(i, i);
        }
        b
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Slot of entry (i, j); order of i and j does not matter.
    pub fn slot(&mut self, i: usize, j: usize) -> usize {
        let key = if i <= j { (i as u32, j as u32) } else { (j as u32, i as u32) };
        debug_assert!((key.1 as usize) < self.n);
        let next = self.coords.len();
        *self.map.entry(key).or_insert_with(|| {
            self.coords.push(key);
            next
        })
    }

    /// Slot of diagonal entry i (always slot i).
    pub fn diag(i: usize) -> usize {
        i
    }

    pub fn n_slots(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }
}

/// Ordering, elimination tree and storage layout of the factor.
#[derive(Debug, Clone)]
pub struct SymbolicLdl {
    n: usize,
    /// perm[k] = original index eliminated at step k.
    perm: Vec<usize>,
    iperm: Vec<usize>,
    /// Upper CSC of the permuted matrix.
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// For each slot, its position in the permuted CSC value array.
    slot_pos: Vec<usize>,
    /// Original coordinates of each slot, for products with the unfactored matrix.
    coords: Vec<(u32, u32)>,
    etree: Vec<usize>,
    lp: Vec<usize>,
}

/// Numeric factor with inertia information.
#[derive(Debug, Clone)]
pub struct NumericLdl {
    lx: Vec<f64>,
    li: Vec<usize>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Number of pivots replaced because they were numerically zero.
    pub n_tiny: usize,
}

impl SymbolicLdl {
    /// Analyzes the pattern; `use_amd` selects a fill-reducing ordering.
    pub fn analyze(pattern: &PatternBuilder, use_amd: bool) -> Self {
        let n = pattern.n;
        let coords = pattern.coords.clone();
        let (perm, iperm) = if use_amd && n > 1 { amd_order(n, &coords) } else { ((0..n).collect(), (0..n).collect()) };

        // Permuted upper-triangular coordinates.
        let mut counts = vec![0usize; n + 1];
        let pcoords: Vec<(usize, usize)> = coords
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (iperm[i as usize], iperm[j as usize]);
                if a <= b {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect();
        for &(_, j) in &pcoords {
            counts[j + 1] += 1;
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let ap = counts.clone();
        let mut next = counts;
        let mut ai = vec![0usize; pcoords.len()];
        let mut slot_pos = vec![0usize; pcoords.len()];
        // Sort rows within each column for deterministic traversal.
        let mut order: Vec<usize> = (0..pcoords.len()).collect();
        order.sort_unstable_by_key(|&s| (pcoords[s].1, pcoords[s].0));
        for s in order {
            let (i, j) = pcoords[s];
            let pos = next[j];
            next[j] += 1;
            ai[pos] = i;
            slot_pos[s] = pos;
        }

        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for p in ap[j]..ap[j + 1] {
                let mut i = ai[p];
                if i >= j {
                    continue;
                }
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        Self { n, perm, iperm, ap, ai, slot_pos, coords, etree, lp }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization of the matrix with the given slot values.
    ///
    /// `expected_sign[i]` (+1 or -1, original ordering) is the sign used to
    /// replace pivots with |d| < `pivot_tol`.
    pub fn factor(&self, values: &[f64], expected_sign: &[f64], pivot_tol: f64, tiny_value: f64) -> NumericLdl {
        let n = self.n;
        let mut ax = vec![0.0; self.ai.len()];
        for (s, &v) in values.iter().enumerate() {
            ax[self.slot_pos[s]] += v;
        }
        let nnz_l = self.lp[n];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![0.0; nnz_l];
        let mut d = vec![0.0; n];
        let mut dinv = vec![0.0; n];
        let mut y_markers = vec![false; n];
        let mut y_vals = vec![0.0; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = self.lp[..n].to_vec();
        let (mut n_pos, mut n_neg, mut n_tiny) = (0, 0, 0);

        for k in 0..n {
            let mut nnz_y = 0;
            for p in self.ap[k]..self.ap[k + 1] {
                let bidx = self.ai[p];
                if bidx == k {
                    d[k] += ax[p];
                    continue;
                }
                y_vals[bidx] += ax[p];
                if !y_markers[bidx] {
                    y_markers[bidx] = true;
                    elim[0] = bidx;
                    let mut n_e = 1;
                    let mut next = self.etree[bidx];
                    while next != NONE && next < k {
                        if y_markers[next] {
                            break;
                        }
                        y_markers[next] = true;
                        elim[n_e] = next;
                        n_e += 1;
                        next = self.etree[next];
                    }
                    while n_e > 0 {
                        n_e -= 1;
                        y_idx[nnz_y] = elim[n_e];
                        nnz_y += 1;
                    }
                }
            }
            for t in (0..nnz_y).rev() {
                let c = y_idx[t];
                let tmp = next_space[c];
                let yc = y_vals[c];
                for q in self.lp[c]..tmp {
                    y_vals[li[q]] -= lx[q] * yc;
                }
                li[tmp] = k;
                lx[tmp] = yc * dinv[c];
                d[k] -= yc * lx[tmp];
                next_space[c] += 1;
                y_vals[c] = 0.0;
                y_markers[c] = false;
            }
            if !(d[k].abs() >= pivot_tol) {
                n_tiny += 1;
                d[k] = expected_sign[self.perm[k]] * tiny_value;
            }
            if d[k] > 0.0 {
                n_pos += 1;
            } else {
                n_neg += 1;
            }
            dinv[k] = 1.0 / d[k];
        }
        NumericLdl { lx, li, d, dinv, n_pos, n_neg, n_tiny }
    }

    /// Solves with the factor in place (b in original ordering).
    pub fn solve_in_place(&self, f: &NumericLdl, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.lp[j]..self.lp[j + 1] {
                    x[f.li[p]] -= f.lx[p] * xj;
                }
            }
        }
        for j in 0..n {
            x[j] *= f.dinv[j];
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                s -= f.lx[p] * x[f.li[p]];
            }
            x[j] = s;
        }
        for k in 0..n {
            b[self.perm[k]] = x[k];
        }
    }

    /// y = A x for the symmetric matrix given by slot values.
    pub fn matvec(&self, values: &[f64], x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (s, &(i, j)) in self.coords.iter().enumerate() {
            let (i, j) = (i as usize, j as usize);
            let v = values[s];
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
    }

    /// Solve with iterative refinement against the matrix `values`.
    /// Returns the final residual relative to the right-hand side.
    pub fn solve_refined(&self, f: &NumericLdl, values: &[f64], b: &[f64], x: &mut [f64], max_refine: usize) -> f64 {
        let n = self.n;
        x.copy_from_slice(b);
        self.solve_in_place(f, x);
        let bnorm = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut r = vec![0.0; n];
        let mut res = f64::INFINITY;
        for _ in 0..=max_refine {
            self.matvec(values, x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            let rnorm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            res = rnorm / bnorm;
            if res < 1e-15 {
                break;
            }
            self.solve_in_place(f, &mut r);
            for i in 0..n {
                x[i] += r[i];
            }
        }
        res
    }

    pub fn inverse_perm(&self) -> &[usize] {
        &self.iperm
    }
}

impl NumericLdl {
    /// Smallest pivot magnitude.
    pub fn min_abs_pivot(&self) -> f64 {
        self.d.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

fn amd_order(n: usize, coords: &[(u32, u32)]) -> (Vec<usize>, Vec<usize>) {
    // Full symmetric pattern (both triangles) in CSC for AMD.
    let mut cols: Vec<Vec<i64>> = vec![Vec::new(); n];
    for &(i, j) in coords {
        let (i, j) = (i as usize, j as usize);
        cols[j].push(i as i64);
        if i != j {
            cols[i].push(j as i64);
        }
    }
    let mut ap = Vec::with_capacity(n + 1);
    let mut ai = Vec::new();
    ap.push(0i64);
    for c in cols.iter_mut() {
        c.sort_unstable();
        c.dedup();
        ai.extend_from_slice(c);
        ap.push(ai.len() as i64);
    }
    match amd::order(n as i64, &ap, &ai, &amd::Control::default()) {
        Ok((p, pinv, _)) => (p.iter().map(|&v| v as usize).collect(), pinv.iter().map(|&v| v as usize).collect()),
        Err(_) => ((0..n).collect(), (0..n).collect()),
    }
}
