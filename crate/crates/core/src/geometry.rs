//! The convex state space `C = R^d x K`, where `K` is either the probability
//! simplex over `n` labels or a box-constrained density on an `n`-point
//! strategy grid, together with its tangent space `E_C`, the dual `E_C*` and
//! the 1-Wasserstein distance between equally weighted ensembles.
//!
//! Coordinates of a single agent are always laid out as `[x_0..x_d, lam_0..lam_n]`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{invalid, Error, Result};

/// Which convex set the label/density component lives in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// `lam_i >= 0`, `sum lam_i = 1`.
    Simplex,
    /// `lower <= lam_i <= upper` and `(1/n) sum lam_i = 1` (uniform grid measure).
    Density { lower: f64, upper: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub d: usize,
    pub n: usize,
    pub mode: Mode,
}

impl Layout {
    pub fn simplex(d: usize, n: usize) -> Self {
        Self {
            d,
            n,
            mode: Mode::Simplex,
        }
    }

    pub fn density(d: usize, n: usize, lower: f64, upper: f64) -> Self {
        Self {
            d,
            n,
            mode: Mode::Density { lower, upper },
        }
    }

    /// Number of coordinates of one agent.
    pub fn dim(&self) -> usize {
        self.d + self.n
    }

    /// Weight of a label coordinate in the duality pairing: 1 on the simplex,
    /// `1/n` for densities (the uniform grid measure).
    pub fn label_weight(&self) -> f64 {
        match self.mode {
            Mode::Simplex => 1.0,
            Mode::Density { .. } => 1.0 / self.n as f64,
        }
    }

    /// Converts a coordinate gradient `g` (so that `df[v] = g . v`) into the
    /// canonical costate representing the same functional under [`pairing`].
    pub fn covector_to_costate(&self, g: &[f64]) -> CostateVec {
        let w = self.label_weight();
        let lam: Vec<f64> = g[self.d..].iter().map(|v| v / w).collect();
        CostateVec {
            px: g[..self.d].to_vec(),
            plam: mean_free(&lam),
        }
    }

    /// Inverse of [`Layout::covector_to_costate`] (up to label constants).
    pub fn costate_to_covector(&self, p: &CostateVec) -> DVector<f64> {
        let w = self.label_weight();
        DVector::from_iterator(
            self.dim(),
            p.px.iter().copied().chain(p.plam.iter().map(|v| v * w)),
        )
    }

    /// Zero-sum / zero-mean projection of the label part of a flat vector.
    pub fn project_tangent(&self, v: &mut [f64]) {
        let lam = &mut v[self.d..self.d + self.n];
        let mean = lam.iter().sum::<f64>() / self.n as f64;
        lam.iter_mut().for_each(|l| *l -= mean);
    }

    fn check_state(&self, c: &StateC) -> Result<()> {
        if c.x.len() != self.d || c.lam.len() != self.n {
            return invalid(format!(
                "state has dims ({}, {}), layout expects ({}, {})",
                c.x.len(),
                c.lam.len(),
                self.d,
                self.n
            ));
        }
        Ok(())
    }
}

/// One agent's state `c = (x, lam)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateC {
    pub x: Vec<f64>,
    pub lam: Vec<f64>,
}

impl StateC {
    pub fn new(x: Vec<f64>, lam: Vec<f64>) -> Self {
        Self { x, lam }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len() + self.lam.len(),
            self.x.iter().chain(self.lam.iter()).copied(),
        )
    }

    pub fn from_flat(layout: &Layout, v: &[f64]) -> Self {
        Self {
            x: v[..layout.d].to_vec(),
            lam: v[layout.d..layout.dim()].to_vec(),
        }
    }

    /// `self + s * v`, without any membership check.
    pub fn displaced(&self, v: &TangentVec, s: f64) -> Self {
        Self {
            x: self.x.iter().zip(&v.dx).map(|(a, b)| a + s * b).collect(),
            lam: self
                .lam
                .iter()
                .zip(&v.dlam)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }
}

/// Element of `E_C = R^d x {zero-sum label vectors}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentVec {
    pub dx: Vec<f64>,
    pub dlam: Vec<f64>,
}

impl TangentVec {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            dx: vec![0.0; layout.d],
            dlam: vec![0.0; layout.n],
        }
    }

    pub fn from_flat(layout: &Layout, v: &[f64]) -> Self {
        Self {
            dx: v[..layout.d].to_vec(),
            dlam: v[layout.d..layout.dim()].to_vec(),
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dx.len() + self.dlam.len(),
            self.dx.iter().chain(self.dlam.iter()).copied(),
        )
    }

    /// Sum of the label component; zero for genuine tangent vectors.
    pub fn label_sum(&self) -> f64 {
        self.dlam.iter().sum()
    }
}

/// Element of `E_C*`, stored with a mean-zero label part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostateVec {
    pub px: Vec<f64>,
    pub plam: Vec<f64>,
}

impl CostateVec {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            px: vec![0.0; layout.d],
            plam: vec![0.0; layout.n],
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.px.len() + self.plam.len(),
            self.px.iter().chain(self.plam.iter()).copied(),
        )
    }

    pub fn from_flat(layout: &Layout, v: &[f64]) -> Self {
        Self {
            px: v[..layout.d].to_vec(),
            plam: mean_free(&v[layout.d..layout.dim()]),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            px: self.px.iter().map(|v| v * s).collect(),
            plam: self.plam.iter().map(|v| v * s).collect(),
        }
    }
}

fn mean_free(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Canonical representative of a label costate modulo constants.
pub fn canonical_dual(p_raw: &[f64]) -> Result<Vec<f64>> {
    if p_raw.iter().any(|v| !v.is_finite()) {
        return invalid("costate has non-finite entries");
    }
    Ok(mean_free(p_raw))
}

/// Duality pairing `<p, v>` between `E_C*` and `E_C`.
pub fn pairing(layout: &Layout, p: &CostateVec, v: &TangentVec) -> Result<f64> {
    if p.px.len() != layout.d
        || v.dx.len() != layout.d
        || p.plam.len() != layout.n
        || v.dlam.len() != layout.n
    {
        return invalid("pairing: dimension mismatch");
    }
    let x: f64 = p.px.iter().zip(&v.dx).map(|(a, b)| a * b).sum();
    let lam: f64 = p.plam.iter().zip(&v.dlam).map(|(a, b)| a * b).sum();
    Ok(x + layout.label_weight() * lam)
}

/// Membership test for `C` within `tol`.
pub fn in_state_space(layout: &Layout, c: &StateC, tol: f64) -> bool {
    if layout.check_state(c).is_err() {
        return false;
    }
    if c.x.iter().chain(&c.lam).any(|v| !v.is_finite()) {
        return false;
    }
    match layout.mode {
        Mode::Simplex => {
            c.lam.iter().all(|&l| l >= -tol) && (c.lam.iter().sum::<f64>() - 1.0).abs() <= tol
        }
        Mode::Density { lower, upper } => {
            let mean = c.lam.iter().sum::<f64>() / layout.n as f64;
            c.lam.iter().all(|&l| l >= lower - tol && l <= upper + tol) && (mean - 1.0).abs() <= tol
        }
    }
}

/// Amount by which `c` violates the constraints of `C` (0 when inside).
pub fn violation(layout: &Layout, c: &StateC) -> f64 {
    match layout.mode {
        Mode::Simplex => {
            let neg = c.lam.iter().fold(0.0_f64, |m, &l| m.max(-l));
            neg.max((c.lam.iter().sum::<f64>() - 1.0).abs())
        }
        Mode::Density { lower, upper } => {
            let boxv = c
                .lam
                .iter()
                .fold(0.0_f64, |m, &l| m.max(lower - l).max(l - upper));
            let mean = c.lam.iter().sum::<f64>() / layout.n as f64;
            boxv.max((mean - 1.0).abs())
        }
    }
}

/// Largest `s in [0, s_max]` with `c + s v` in `C` (label constraints only;
/// `v` is assumed tangent).
pub fn max_feasible_step(layout: &Layout, c: &StateC, v: &TangentVec, s_max: f64) -> f64 {
    let (lo, hi) = match layout.mode {
        Mode::Simplex => (0.0, f64::INFINITY),
        Mode::Density { lower, upper } => (lower, upper),
    };
    let mut s = s_max;
    for (&l, &dl) in c.lam.iter().zip(&v.dlam) {
        if dl < 0.0 {
            s = s.min((l - lo) / -dl);
        } else if dl > 0.0 && hi.is_finite() {
            s = s.min((hi - l) / dl);
        }
    }
    s.max(0.0)
}

/// Ground norm on `E`: `|dx|_2 + ||dlam||_1` on the simplex and
/// `|dx|_2 + ((1/n) sum dlam^2)^(1/2)` for densities.
pub fn ground_norm(layout: &Layout, dx: &[f64], dlam: &[f64]) -> f64 {
    let x = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
    let lam = match layout.mode {
        Mode::Simplex => dlam.iter().map(|v| v.abs()).sum::<f64>(),
        Mode::Density { .. } => (dlam.iter().map(|v| v * v).sum::<f64>() / layout.n as f64).sqrt(),
    };
    x + lam
}

pub fn state_distance(layout: &Layout, a: &StateC, b: &StateC) -> f64 {
    let dx: Vec<f64> = a.x.iter().zip(&b.x).map(|(p, q)| p - q).collect();
    let dl: Vec<f64> = a.lam.iter().zip(&b.lam).map(|(p, q)| p - q).collect();
    ground_norm(layout, &dx, &dl)
}

pub fn tangent_norm(layout: &Layout, v: &TangentVec) -> f64 {
    ground_norm(layout, &v.dx, &v.dlam)
}

/// `N` equally weighted particles representing `mu = (1/N) sum delta_{c_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub layout: Layout,
    pub particles: Vec<StateC>,
}

impl Ensemble {
    pub fn new(layout: Layout, particles: Vec<StateC>) -> Result<Self> {
        if particles.is_empty() {
            return invalid("ensemble must contain at least one particle");
        }
        for (i, c) in particles.iter().enumerate() {
            layout
                .check_state(c)
                .map_err(|e| Error::InvalidArgument(format!("particle {i}: {e}")))?;
        }
        Ok(Self { layout, particles })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        for (i, c) in self.particles.iter().enumerate() {
            if !in_state_space(&self.layout, c, tol) {
                return invalid(format!(
                    "particle {i} is outside the state space (violation {:e})",
                    violation(&self.layout, c)
                ));
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let dim = self.layout.dim();
        let mut v = DVector::zeros(dim * self.len());
        for (i, c) in self.particles.iter().enumerate() {
            v.rows_mut(i * dim, self.layout.d).copy_from_slice(&c.x);
            v.rows_mut(i * dim + self.layout.d, self.layout.n)
                .copy_from_slice(&c.lam);
        }
        v
    }

    pub fn from_flat(layout: Layout, v: &[f64]) -> Self {
        let dim = layout.dim();
        let particles = v
            .chunks(dim)
            .map(|ch| StateC::from_flat(&layout, ch))
            .collect();
        Self { layout, particles }
    }

    pub fn max_violation(&self) -> f64 {
        self.particles
            .iter()
            .map(|c| violation(&self.layout, c))
            .fold(0.0, f64::max)
    }

    /// Every particle repeated `k` times; the empirical law is unchanged.
    pub fn repeated(&self, k: usize) -> Self {
        let particles = self
            .particles
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.clone(), k))
            .collect();
        Self {
            layout: self.layout,
            particles,
        }
    }
}

/// `W_1` between two equally weighted ensembles of the same size, via an
/// exact assignment solve.
pub fn w1_empirical(a: &Ensemble, b: &Ensemble) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Unsupported(format!(
            "w1_empirical needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.layout != b.layout {
        return invalid("w1_empirical: ensembles have different layouts");
    }
    // Fixed orientation makes the result exactly symmetric in its arguments.
    let key = |e: &Ensemble| {
        e.particles
            .iter()
            .flat_map(|c| c.x.iter().chain(&c.lam))
            .copied()
            .collect::<Vec<f64>>()
    };
    let (ka, kb) = (key(a), key(b));
    let swapped = ka
        .iter()
        .zip(&kb)
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        == Some(std::cmp::Ordering::Greater);
    let (a, b) = if swapped { (b, a) } else { (a, b) };
    let n = a.len();
    let cost: Vec<f64> = a
        .particles
        .iter()
        .flat_map(|p| {
            b.particles
                .iter()
                .map(move |q| state_distance(&a.layout, p, q))
        })
        .collect();
    let (total, _) = assignment::min_cost_assignment(n, &cost);
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_dual_examples() {
        assert_eq!(
            canonical_dual(&[1.0, 2.0, 3.0]).unwrap(),
            vec![-1.0, 0.0, 1.0]
        );
        assert_eq!(
            canonical_dual(&[0.0, 0.0, 0.0]).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
        assert!(canonical_dual(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn constants_do_not_pair_with_tangents() {
        let layout = Layout::simplex(0, 3);
        let v = TangentVec {
            dx: vec![],
            dlam: vec![1.0, -1.0, 0.0],
        };
        let raw = CostateVec {
            px: vec![],
            plam: vec![1.0, 2.0, 3.0],
        };
        let canon = CostateVec {
            px: vec![],
            plam: canonical_dual(&raw.plam).unwrap(),
        };
        assert_eq!(pairing(&layout, &raw, &v).unwrap(), -1.0);
        assert_eq!(pairing(&layout, &canon, &v).unwrap(), -1.0);
    }

    #[test]
    fn pairing_rejects_mismatch() {
        let layout = Layout::simplex(1, 2);
        let p = CostateVec {
            px: vec![1.0],
            plam: vec![0.0, 0.0, 0.0],
        };
        assert!(pairing(&layout, &p, &TangentVec::zeros(&layout)).is_err());
    }

    #[test]
    fn self_pairing_is_squared_norm() {
        let layout = Layout::simplex(2, 2);
        let v = TangentVec {
            dx: vec![1.0, -2.0],
            dlam: vec![0.5, -0.5],
        };
        let p = CostateVec {
            px: v.dx.clone(),
            plam: v.dlam.clone(),
        };
        assert_eq!(pairing(&layout, &p, &v).unwrap(), 1.0 + 4.0 + 0.5);
    }

    #[test]
    fn membership_examples() {
        let s = Layout::simplex(1, 2);
        assert!(in_state_space(
            &s,
            &StateC::new(vec![0.0], vec![0.5, 0.5]),
            1e-12
        ));
        assert!(!in_state_space(
            &s,
            &StateC::new(vec![0.0], vec![1.1, -0.1]),
            1e-12
        ));

        let tol = 1e-10;
        let dens = Layout::density(1, 2, 0.1, 5.0);
        let bad = StateC::new(vec![0.0], vec![0.1 - 10.0 * tol, 2.0 - 0.1 + 10.0 * tol]);
        assert!(!in_state_space(&dens, &bad, tol));
        assert!(in_state_space(
            &dens,
            &StateC::new(vec![0.0], vec![1.0, 1.0]),
            tol
        ));
    }

    #[test]
    fn w1_small_cases() {
        let layout = Layout::simplex(1, 2);
        let e = |xs: &[f64]| {
            Ensemble::new(
                layout,
                xs.iter()
                    .map(|&x| StateC::new(vec![x], vec![1.0, 0.0]))
                    .collect(),
            )
            .unwrap()
        };
        assert_eq!(w1_empirical(&e(&[0.0, 1.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(w1_empirical(&e(&[0.0]), &e(&[3.0])).unwrap(), 3.0);
        assert_eq!(w1_empirical(&e(&[0.0, 1.0]), &e(&[1.0, 2.0])).unwrap(), 1.0);
        assert!(matches!(
            w1_empirical(&e(&[0.0]), &e(&[0.0, 1.0])),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn repeated_ensemble_has_zero_distance_to_itself() {
        let layout = Layout::simplex(1, 2);
        let a = Ensemble::new(
            layout,
            vec![
                StateC::new(vec![0.3], vec![0.2, 0.8]),
                StateC::new(vec![-1.0], vec![1.0, 0.0]),
            ],
        )
        .unwrap();
        let a2 = a.repeated(2);
        let mut b = a2.clone();
        b.particles.reverse();
        assert_eq!(w1_empirical(&a2, &b).unwrap(), 0.0);
    }

    #[test]
    fn covector_roundtrip_preserves_pairing() {
        let layout = Layout::density(1, 4, 0.01, 4.0);
        let g = [0.3, 1.0, -2.0, 0.5, 7.0];
        let p = layout.covector_to_costate(&g);
        let v = TangentVec {
            dx: vec![2.0],
            dlam: vec![1.0, -1.0, 0.5, -0.5],
        };
        let direct: f64 = g.iter().zip(v.to_flat().iter()).map(|(a, b)| a * b).sum();
        assert!((pairing(&layout, &p, &v).unwrap() - direct).abs() < 1e-14);
    }
}
