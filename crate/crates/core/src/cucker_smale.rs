//! Cucker-Smale particle model: distance-weighted velocity alignment plus an
//! attraction-repulsion potential, for `N` planar particles (state dim `4N`).
//!
//! State layout is flat: `[x_1, ..., x_N, v_1, ..., v_N]` with each particle
//! contributing two position and two velocity components.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{OdefitError, Result};
use crate::vector_field::{Linearization, VectorField};

/// The five model parameters, serialized as `theta = [gamma, c_a, c_r, l_a, l_r]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsParams {
    /// Communication decay exponent (>= 0).
    pub gamma: f64,
    /// Attraction strength (> 0).
    pub c_a: f64,
    /// Repulsion strength (> 0).
    pub c_r: f64,
    /// Attraction length (> 0).
    pub l_a: f64,
    /// Repulsion length (> 0).
    pub l_r: f64,
}

pub const CS_PARAM_DIM: usize = 5;

impl CsParams {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.gamma, self.c_a, self.c_r, self.l_a, self.l_r])
    }

    pub fn from_vector(theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != CS_PARAM_DIM {
            return Err(OdefitError::DimensionMismatch {
                context: "CsParams::from_vector",
                expected: CS_PARAM_DIM,
                got: theta.len(),
            });
        }
        Ok(Self {
            gamma: theta[0],
            c_a: theta[1],
            c_r: theta[2],
            l_a: theta[3],
            l_r: theta[4],
        })
    }
}

/// Positions and velocities of an `N`-particle swarm.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

impl SwarmState {
    pub fn num_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let n = self.num_particles();
        let mut out = DVector::zeros(4 * n);
        for i in 0..n {
            out[2 * i] = self.positions[i][0];
            out[2 * i + 1] = self.positions[i][1];
            out[2 * n + 2 * i] = self.velocities[i][0];
            out[2 * n + 2 * i + 1] = self.velocities[i][1];
        }
        out
    }

    pub fn unflatten(state: &DVector<f64>) -> Result<Self> {
        if state.len() % 4 != 0 {
            return Err(OdefitError::DimensionMismatch {
                context: "SwarmState::unflatten",
                expected: 4 * (state.len() / 4 + 1),
                got: state.len(),
            });
        }
        let n = state.len() / 4;
        let positions = (0..n).map(|i| [state[2 * i], state[2 * i + 1]]).collect();
        let velocities = (0..n)
            .map(|i| [state[2 * n + 2 * i], state[2 * n + 2 * i + 1]])
            .collect();
        Ok(Self {
            positions,
            velocities,
        })
    }
}

/// What to do when two distinct particles coincide (r = 0, singular potential).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CoincidentPolicy {
    /// Fail the evaluation with `SingularPair`.
    #[default]
    Error,
    /// Drop the pair from both sums.
    SkipPair,
}

/// Communication rate `H(r) = 1 / (1 + r^2)^gamma`; in `(0, 1]` for `gamma >= 0`.
pub fn communication_rate(r: f64, gamma: f64) -> f64 {
    (1.0 + r * r).powf(-gamma)
}

/// `U'(r)` for the potential `U(r) = -c_a e^{-r/l_a} + c_r e^{-r/l_r}`.
///
/// The pairwise force on particle i from particle j is
/// `-U'(r) (x_i - x_j) / r` with `r = ||x_i - x_j||`.
pub fn potential_deriv(r: f64, params: &CsParams) -> Result<f64> {
    if r <= 0.0 {
        return Err(OdefitError::SingularPair { i: 0, j: 0 });
    }
    Ok(params.c_a / params.l_a * (-r / params.l_a).exp()
        - params.c_r / params.l_r * (-r / params.l_r).exp())
}

/// `U''(r)`.
fn potential_second_deriv(r: f64, params: &CsParams) -> f64 {
    -params.c_a / (params.l_a * params.l_a) * (-r / params.l_a).exp()
        + params.c_r / (params.l_r * params.l_r) * (-r / params.l_r).exp()
}

/// The Cucker-Smale model as a [`VectorField`] over `theta = [gamma, c_a, c_r, l_a, l_r]`.
#[derive(Debug, Clone)]
pub struct CuckerSmale {
    num_particles: usize,
    coincident: CoincidentPolicy,
}

impl CuckerSmale {
    pub fn new(num_particles: usize) -> Self {
        Self {
            num_particles,
            coincident: CoincidentPolicy::Error,
        }
    }

    pub fn with_coincident_policy(mut self, policy: CoincidentPolicy) -> Self {
        self.coincident = policy;
        self
    }

    pub fn num_particles(&self) -> usize {
        self.num_particles
    }

    #[inline]
    fn pos(state: &DVector<f64>, n: usize, i: usize) -> [f64; 2] {
        let _ = n;
        [state[2 * i], state[2 * i + 1]]
    }

    #[inline]
    fn vel(state: &DVector<f64>, n: usize, i: usize) -> [f64; 2] {
        [state[2 * n + 2 * i], state[2 * n + 2 * i + 1]]
    }

    /// Shared pair loop. Calls `visit(i, j, d, r)` for every ordered pair
    /// `i != j` with `d = x_i - x_j`, in a fixed (i-major, j-ascending)
    /// order so reductions are deterministic.
    fn for_pairs<F>(&self, state: &DVector<f64>, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, usize, [f64; 2], f64) -> Result<()>,
    {
        let n = self.num_particles;
        for i in 0..n {
            let xi = Self::pos(state, n, i);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = Self::pos(state, n, j);
                let d = [xi[0] - xj[0], xi[1] - xj[1]];
                let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if r == 0.0 {
                    match self.coincident {
                        CoincidentPolicy::Error => {
                            return Err(OdefitError::SingularPair { i, j })
                        }
                        CoincidentPolicy::SkipPair => continue,
                    }
                }
                visit(i, j, d, r)?;
            }
        }
        Ok(())
    }
}

/// All per-pair derivative scalars, computed from one set of shared
/// transcendentals. `h` and `up_over_r` reproduce [`communication_rate`]
/// and [`potential_deriv`] bit-for-bit so fused evaluations agree with
/// `eval` exactly.
struct PairDerivs {
    h: f64,
    dv: [f64; 2],
    u: [f64; 2],
    up_over_r: f64,
    hp: f64,
    upp: f64,
    dh_dgamma: f64,
    dup_dca: f64,
    dup_dcr: f64,
    dup_dla: f64,
    dup_dlr: f64,
}

impl PairDerivs {
    /// `want_params` gates the one extra transcendental (`ln`) that only
    /// the parameter partials need.
    fn new(d: [f64; 2], r: f64, dv: [f64; 2], p: &CsParams, want_params: bool) -> Result<Self> {
        let r2p1 = 1.0 + r * r;
        let h = communication_rate(r, p.gamma);
        let ea = (-r / p.l_a).exp();
        let er = (-r / p.l_r).exp();
        // bitwise identical to potential_deriv
        let up = p.c_a / p.l_a * ea - p.c_r / p.l_r * er;
        let upp = -p.c_a / (p.l_a * p.l_a) * ea + p.c_r / (p.l_r * p.l_r) * er;
        Ok(Self {
            h,
            dv,
            u: [d[0] / r, d[1] / r],
            up_over_r: up / r,
            // H'(r) = -2 gamma r (1 + r^2)^{-gamma-1} = -2 gamma r H / (1 + r^2)
            hp: -2.0 * p.gamma * r * h / r2p1,
            upp,
            dh_dgamma: if want_params { -h * r2p1.ln() } else { 0.0 },
            dup_dca: ea / p.l_a,
            dup_dcr: -er / p.l_r,
            dup_dla: p.c_a * ea / (p.l_a * p.l_a) * (r / p.l_a - 1.0),
            dup_dlr: -p.c_r * er / (p.l_r * p.l_r) * (r / p.l_r - 1.0),
        })
    }

    /// `d vdot_i / d x_i` block entry `(a, b)` before the `1/N` weight:
    /// alignment `H'(r) dv u^T` plus force `-(U'' u u^T + U'/r (I - u u^T))`.
    #[inline]
    fn block(&self, a: usize, b: usize, id: f64) -> f64 {
        self.hp * self.dv[a] * self.u[b]
            - (self.upp * self.u[a] * self.u[b] + self.up_over_r * (id - self.u[a] * self.u[b]))
    }
}

/// Cached per-pair scalars for repeated state products: the 2x2 position
/// block (row-major) and the alignment rate `h`.
#[derive(Clone, Copy)]
struct StateScalars {
    b: [f64; 4],
    h: f64,
}

/// Cached per-pair scalars for repeated parameter products:
/// `q = H_gamma dv`, the unit separation `u`, and the four partials of
/// `U'(r)`.
#[derive(Clone, Copy)]
struct ParamScalars {
    q: [f64; 2],
    u: [f64; 2],
    dup: [f64; 4],
}

/// All cached scalars are invariant under swapping the pair (`d`, `dv`,
/// and `u` all negate, and every stored scalar is even in that flip
/// except `q`, which is odd), so only the `i < j` half is stored and each
/// entry serves both ordered pairs.
struct CsLinearization {
    num_particles: usize,
    pairs: Vec<(u32, u32)>,
    state_scal: Vec<StateScalars>,
    param_scal: Vec<ParamScalars>,
}

impl Linearization for CsLinearization {
    fn vjp_state(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(
            self.state_scal.len(),
            self.pairs.len(),
            "state products were not requested at linearize time"
        );
        let n = self.num_particles;
        let inv_n = 1.0 / n as f64;
        let mut out = DVector::zeros(4 * n);
        let vs = v.as_slice();
        let os = out.as_mut_slice();
        // transpose of the dxdot/dv = I block
        os[2 * n..4 * n].copy_from_slice(&vs[..2 * n]);
        for (&(i, j), s) in self.pairs.iter().zip(&self.state_scal) {
            let (i, j) = (i as usize, j as usize);
            let (row_i, row_j) = (2 * n + 2 * i, 2 * n + 2 * j);
            let vai = [vs[row_i], vs[row_i + 1]];
            let vaj = [vs[row_j], vs[row_j + 1]];
            let hv = inv_n * s.h;
            for b in 0..2 {
                let ti = inv_n * (s.b[b] * vai[0] + s.b[2 + b] * vai[1]);
                let tj = inv_n * (s.b[b] * vaj[0] + s.b[2 + b] * vaj[1]);
                os[2 * i + b] += ti - tj;
                os[2 * j + b] += tj - ti;
                os[row_i + b] += hv * (vaj[b] - vai[b]);
                os[row_j + b] += hv * (vai[b] - vaj[b]);
            }
        }
        out
    }

    fn vjp_params(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(
            self.param_scal.len(),
            self.pairs.len(),
            "parameter products were not requested at linearize time"
        );
        let n = self.num_particles;
        let inv_n = 1.0 / n as f64;
        let mut acc = [0.0f64; CS_PARAM_DIM];
        let vs = v.as_slice();
        for (&(i, j), s) in self.pairs.iter().zip(&self.param_scal) {
            let (row_i, row_j) = (2 * n + 2 * i as usize, 2 * n + 2 * j as usize);
            // q and u are odd under the pair swap, so the two ordered
            // contributions combine through the seed difference
            let dva = [vs[row_i] - vs[row_j], vs[row_i + 1] - vs[row_j + 1]];
            let ua = s.u[0] * dva[0] + s.u[1] * dva[1];
            acc[0] += s.q[0] * dva[0] + s.q[1] * dva[1];
            acc[1] -= s.dup[0] * ua;
            acc[2] -= s.dup[1] * ua;
            acc[3] -= s.dup[2] * ua;
            acc[4] -= s.dup[3] * ua;
        }
        DVector::from_iterator(CS_PARAM_DIM, acc.iter().map(|a| a * inv_n))
    }
}

impl VectorField for CuckerSmale {
    fn state_dim(&self) -> usize {
        4 * self.num_particles
    }

    fn param_dim(&self) -> usize {
        CS_PARAM_DIM
    }

    fn eval(&self, state: &DVector<f64>, params: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.num_particles;
        let p = CsParams::from_vector(params)?;
        let inv_n = 1.0 / n as f64;
        let mut out = DVector::zeros(4 * n);

        for i in 0..n {
            let vi = Self::vel(state, n, i);
            out[2 * i] = vi[0];
            out[2 * i + 1] = vi[1];
        }

        self.for_pairs(state, |i, j, d, r| {
            let vi = Self::vel(state, n, i);
            let vj = Self::vel(state, n, j);
            let h = communication_rate(r, p.gamma);
            let up = potential_deriv(r, &p)?;
            let scale = up / r;
            let row = 2 * n + 2 * i;
            out[row] += inv_n * (h * (vj[0] - vi[0]) - scale * d[0]);
            out[row + 1] += inv_n * (h * (vj[1] - vi[1]) - scale * d[1]);
            Ok(())
        })?;

        Ok(out)
    }

    fn jac_state(&self, state: &DVector<f64>, params: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.num_particles;
        let p = CsParams::from_vector(params)?;
        let inv_n = 1.0 / n as f64;
        let dim = 4 * n;
        let mut jac = DMatrix::zeros(dim, dim);

        // dxdot/dv = I
        for i in 0..2 * n {
            jac[(i, 2 * n + i)] = 1.0;
        }

        self.for_pairs(state, |i, j, d, r| {
            let vi = Self::vel(state, n, i);
            let vj = Self::vel(state, n, j);
            let h = communication_rate(r, p.gamma);
            // H'(r) = -2 gamma r (1 + r^2)^{-gamma - 1}
            let hp = -2.0 * p.gamma * r * (1.0 + r * r).powf(-p.gamma - 1.0);
            let up = potential_deriv(r, &p)?;
            let upp = potential_second_deriv(r, &p);
            let u = [d[0] / r, d[1] / r];
            let dv = [vj[0] - vi[0], vj[1] - vi[1]];

            let row = 2 * n + 2 * i;
            let col_xi = 2 * i;
            let col_xj = 2 * j;
            let col_vi = 2 * n + 2 * i;
            let col_vj = 2 * n + 2 * j;

            for a in 0..2 {
                for b in 0..2 {
                    let id = if a == b { 1.0 } else { 0.0 };
                    // d/dx of the alignment term: H'(r) dv u^T
                    // d/dx of the force term: -(U'' u u^T + U'/r (I - u u^T))
                    let block = hp * dv[a] * u[b]
                        - (upp * u[a] * u[b] + up / r * (id - u[a] * u[b]));
                    jac[(row + a, col_xi + b)] += inv_n * block;
                    jac[(row + a, col_xj + b)] -= inv_n * block;
                    // alignment velocity coupling
                    jac[(row + a, col_vj + b)] += inv_n * h * id;
                    jac[(row + a, col_vi + b)] -= inv_n * h * id;
                }
            }
            Ok(())
        })?;

        Ok(jac)
    }

    /// Single pair sweep producing `f` and both Jacobians; the shared
    /// transcendentals (`powf`, two `exp`) are computed once per pair
    /// instead of once per output.
    fn eval_with_jacobians(
        &self,
        state: &DVector<f64>,
        params: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let n = self.num_particles;
        let p = CsParams::from_vector(params)?;
        let inv_n = 1.0 / n as f64;
        let dim = 4 * n;
        let mut out = DVector::zeros(dim);
        let mut jac = DMatrix::zeros(dim, dim);
        let mut jp = DMatrix::zeros(dim, CS_PARAM_DIM);

        for i in 0..n {
            let vi = Self::vel(state, n, i);
            out[2 * i] = vi[0];
            out[2 * i + 1] = vi[1];
        }
        for i in 0..2 * n {
            jac[(i, 2 * n + i)] = 1.0;
        }

        self.for_pairs(state, |i, j, d, r| {
            let vi = Self::vel(state, n, i);
            let vj = Self::vel(state, n, j);
            let pd = PairDerivs::new(d, r, [vj[0] - vi[0], vj[1] - vi[1]], &p, true)?;

            let row = 2 * n + 2 * i;
            out[row] += inv_n * (pd.h * pd.dv[0] - pd.up_over_r * d[0]);
            out[row + 1] += inv_n * (pd.h * pd.dv[1] - pd.up_over_r * d[1]);

            let (col_xi, col_xj) = (2 * i, 2 * j);
            let (col_vi, col_vj) = (2 * n + 2 * i, 2 * n + 2 * j);
            for a in 0..2 {
                for b in 0..2 {
                    let id = if a == b { 1.0 } else { 0.0 };
                    let block = pd.block(a, b, id);
                    jac[(row + a, col_xi + b)] += inv_n * block;
                    jac[(row + a, col_xj + b)] -= inv_n * block;
                    jac[(row + a, col_vj + b)] += inv_n * pd.h * id;
                    jac[(row + a, col_vi + b)] -= inv_n * pd.h * id;
                }
                jp[(row + a, 0)] += inv_n * pd.dh_dgamma * pd.dv[a];
                jp[(row + a, 1)] -= inv_n * pd.dup_dca * pd.u[a];
                jp[(row + a, 2)] -= inv_n * pd.dup_dcr * pd.u[a];
                jp[(row + a, 3)] -= inv_n * pd.dup_dla * pd.u[a];
                jp[(row + a, 4)] -= inv_n * pd.dup_dlr * pd.u[a];
            }
            Ok(())
        })?;

        Ok((out, jac, jp))
    }

    /// Fused evaluation + cached per-pair derivative scalars, so the
    /// collocation gradients can take several `J^T v` products per point
    /// at flop cost only.
    fn linearize(
        &self,
        state: &DVector<f64>,
        params: &DVector<f64>,
        want_state: bool,
        want_params: bool,
    ) -> Result<(DVector<f64>, Box<dyn Linearization>)> {
        let n = self.num_particles;
        let p = CsParams::from_vector(params)?;
        let inv_n = 1.0 / n as f64;
        let mut out = DVector::zeros(4 * n);
        for i in 0..n {
            let vi = Self::vel(state, n, i);
            out[2 * i] = vi[0];
            out[2 * i + 1] = vi[1];
        }

        // Half pair sweep: every stored scalar serves both ordered pairs
        // (see CsLinearization), and the reversed contribution to f is the
        // exact IEEE negation, so per-row accumulation matches the full
        // i-major sweep of `eval` bit-for-bit.
        let cap = n * (n - 1) / 2;
        let mut pairs = Vec::with_capacity(cap);
        let mut state_scal = Vec::with_capacity(if want_state { cap } else { 0 });
        let mut param_scal = Vec::with_capacity(if want_params { cap } else { 0 });
        for i in 0..n {
            let xi = Self::pos(state, n, i);
            let vi = Self::vel(state, n, i);
            for j in i + 1..n {
                let xj = Self::pos(state, n, j);
                let d = [xi[0] - xj[0], xi[1] - xj[1]];
                let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if r == 0.0 {
                    match self.coincident {
                        CoincidentPolicy::Error => {
                            return Err(OdefitError::SingularPair { i, j })
                        }
                        CoincidentPolicy::SkipPair => continue,
                    }
                }
                let vj = Self::vel(state, n, j);
                let pd = PairDerivs::new(d, r, [vj[0] - vi[0], vj[1] - vi[1]], &p, want_params)?;

                let (row_i, row_j) = (2 * n + 2 * i, 2 * n + 2 * j);
                let t0 = inv_n * (pd.h * pd.dv[0] - pd.up_over_r * d[0]);
                let t1 = inv_n * (pd.h * pd.dv[1] - pd.up_over_r * d[1]);
                out[row_i] += t0;
                out[row_i + 1] += t1;
                out[row_j] -= t0;
                out[row_j + 1] -= t1;

                pairs.push((i as u32, j as u32));
                if want_state {
                    state_scal.push(StateScalars {
                        b: [
                            pd.block(0, 0, 1.0),
                            pd.block(0, 1, 0.0),
                            pd.block(1, 0, 0.0),
                            pd.block(1, 1, 1.0),
                        ],
                        h: pd.h,
                    });
                }
                if want_params {
                    param_scal.push(ParamScalars {
                        q: [pd.dh_dgamma * pd.dv[0], pd.dh_dgamma * pd.dv[1]],
                        u: pd.u,
                        dup: [pd.dup_dca, pd.dup_dcr, pd.dup_dla, pd.dup_dlr],
                    });
                }
            }
        }

        Ok((
            out,
            Box::new(CsLinearization {
                num_particles: n,
                pairs,
                state_scal,
                param_scal,
            }),
        ))
    }

    fn jac_params(&self, state: &DVector<f64>, params: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.num_particles;
        let p = CsParams::from_vector(params)?;
        let inv_n = 1.0 / n as f64;
        let mut jac = DMatrix::zeros(4 * n, CS_PARAM_DIM);

        // Position rows stay zero: xdot_i = v_i has no parameter dependence.
        self.for_pairs(state, |i, j, d, r| {
            let vi = Self::vel(state, n, i);
            let vj = Self::vel(state, n, j);
            let h = communication_rate(r, p.gamma);
            let u = [d[0] / r, d[1] / r];
            let dv = [vj[0] - vi[0], vj[1] - vi[1]];

            // dH/dgamma = -H ln(1 + r^2)
            let dh_dgamma = -h * (1.0 + r * r).ln();
            let ea = (-r / p.l_a).exp();
            let er = (-r / p.l_r).exp();
            // Partials of U'(r) = (c_a/l_a) e^{-r/l_a} - (c_r/l_r) e^{-r/l_r}
            let dup_dca = ea / p.l_a;
            let dup_dcr = -er / p.l_r;
            let dup_dla = p.c_a * ea / (p.l_a * p.l_a) * (r / p.l_a - 1.0);
            let dup_dlr = -p.c_r * er / (p.l_r * p.l_r) * (r / p.l_r - 1.0);

            let row = 2 * n + 2 * i;
            for a in 0..2 {
                jac[(row + a, 0)] += inv_n * dh_dgamma * dv[a];
                jac[(row + a, 1)] -= inv_n * dup_dca * u[a];
                jac[(row + a, 2)] -= inv_n * dup_dcr * u[a];
                jac[(row + a, 3)] -= inv_n * dup_dla * u[a];
                jac[(row + a, 4)] -= inv_n * dup_dlr * u[a];
            }
            Ok(())
        })?;

        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector_field::fd_check_jacobians;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_params() -> CsParams {
        CsParams {
            gamma: 0.7,
            c_a: 1.2,
            c_r: 0.9,
            l_a: 2.0,
            l_r: 0.5,
        }
    }

    pub(crate) fn random_state(rng: &mut impl Rng, n: usize) -> DVector<f64> {
        // positions spread out enough that pair distances stay well away from 0
        let positions = (0..n)
            .map(|i| {
                [
                    2.0 * i as f64 + rng.gen_range(-0.4..0.4),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let velocities = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        SwarmState {
            positions,
            velocities,
        }
        .flatten()
    }

    /// Straightforward double-loop reference, written independently of the
    /// production pair loop (works on SwarmState directly).
    fn naive_rhs(state: &DVector<f64>, p: &CsParams) -> DVector<f64> {
        let sw = SwarmState::unflatten(state).unwrap();
        let n = sw.num_particles();
        let mut dpos = vec![[0.0f64; 2]; n];
        let mut dvel = vec![[0.0f64; 2]; n];
        for i in 0..n {
            dpos[i] = sw.velocities[i];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = sw.positions[i][0] - sw.positions[j][0];
                let dy = sw.positions[i][1] - sw.positions[j][1];
                let r = (dx * dx + dy * dy).sqrt();
                let h = 1.0 / (1.0 + r * r).powf(p.gamma);
                let up = p.c_a / p.l_a * (-r / p.l_a).exp() - p.c_r / p.l_r * (-r / p.l_r).exp();
                dvel[i][0] += (h * (sw.velocities[j][0] - sw.velocities[i][0]) - up * dx / r)
                    / n as f64;
                dvel[i][1] += (h * (sw.velocities[j][1] - sw.velocities[i][1]) - up * dy / r)
                    / n as f64;
            }
        }
        // flatten of (dpos, dvel) already has the derivative layout
        SwarmState {
            positions: dpos,
            velocities: dvel,
        }
        .flatten()
    }

    #[test]
    fn communication_rate_values() {
        assert_eq!(communication_rate(0.0, 3.7), 1.0);
        assert_abs_diff_eq!(communication_rate(1.0, 1.0), 0.5, epsilon = 1e-15);
        // 1/sqrt(5)
        assert_abs_diff_eq!(
            communication_rate(2.0, 0.5),
            1.0 / 5.0f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn potential_deriv_cancels_when_symmetric() {
        let p = CsParams {
            gamma: 1.0,
            c_a: 1.3,
            c_r: 1.3,
            l_a: 0.8,
            l_r: 0.8,
        };
        for r in [0.1, 1.0, 5.0] {
            assert_eq!(potential_deriv(r, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn potential_deriv_decays_and_matches_hand_value() {
        let p = CsParams {
            gamma: 1.0,
            c_a: 2.0,
            c_r: 3.0,
            l_a: 1.0,
            l_r: 0.5,
        };
        // U'(1) = 2 e^{-1} - 6 e^{-2}
        let expect = 2.0 * (-1.0f64).exp() - 6.0 * (-2.0f64).exp();
        assert_abs_diff_eq!(potential_deriv(1.0, &p).unwrap(), expect, epsilon = 1e-14);
        assert!(potential_deriv(40.0, &p).unwrap().abs() < 1e-15);
        assert!(potential_deriv(0.0, &p).is_err());
    }

    #[test]
    fn rhs_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 3, 5, 8] {
            let field = CuckerSmale::new(n);
            let theta = test_params().to_vector();
            for _ in 0..5 {
                let x = random_state(&mut rng, n);
                let got = field.eval(&x, &theta).unwrap();
                let want = naive_rhs(&x, &test_params());
                assert_abs_diff_eq!(got, want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rhs_zero_acceleration_for_aligned_symmetric_swarm() {
        // equal velocities kill the alignment term; c_a=c_r, l_a=l_r kill the potential
        let n = 4;
        let field = CuckerSmale::new(n);
        let p = CsParams {
            gamma: 0.5,
            c_a: 1.1,
            c_r: 1.1,
            l_a: 0.7,
            l_r: 0.7,
        };
        let sw = SwarmState {
            positions: vec![[0.0, 0.0], [1.0, 0.3], [2.5, -0.2], [4.0, 0.1]],
            velocities: vec![[0.4, -0.2]; n],
        };
        let out = field.eval(&sw.flatten(), &p.to_vector()).unwrap();
        for i in 0..n {
            assert_eq!(out[2 * n + 2 * i], 0.0);
            assert_eq!(out[2 * n + 2 * i + 1], 0.0);
        }
    }

    #[test]
    fn rhs_mirror_symmetric_pair_is_antisymmetric() {
        let field = CuckerSmale::new(2);
        let sw = SwarmState {
            positions: vec![[1.0, 0.5], [-1.0, -0.5]],
            velocities: vec![[0.2, -0.3], [-0.2, 0.3]],
        };
        let out = field.eval(&sw.flatten(), &test_params().to_vector()).unwrap();
        for a in 0..2 {
            assert_abs_diff_eq!(out[4 + a], -out[6 + a], epsilon = 1e-15);
        }
    }

    #[test]
    fn rhs_rejects_coincident_particles_by_default() {
        let field = CuckerSmale::new(2);
        let sw = SwarmState {
            positions: vec![[1.0, 1.0], [1.0, 1.0]],
            velocities: vec![[0.0, 0.0], [1.0, 0.0]],
        };
        let err = field.eval(&sw.flatten(), &test_params().to_vector());
        assert!(matches!(err, Err(OdefitError::SingularPair { .. })));

        let skipping = CuckerSmale::new(2).with_coincident_policy(CoincidentPolicy::SkipPair);
        assert!(skipping
            .eval(&sw.flatten(), &test_params().to_vector())
            .is_ok());
    }

    #[test]
    fn single_particle_jacobian_is_shift_block() {
        let field = CuckerSmale::new(1);
        let x = DVector::from_vec(vec![0.3, -0.1, 0.5, 0.7]);
        let jac = field.jac_state(&x, &test_params().to_vector()).unwrap();
        let mut expect = DMatrix::zeros(4, 4);
        expect[(0, 2)] = 1.0;
        expect[(1, 3)] = 1.0;
        assert_eq!(jac, expect);
        let jp = field.jac_params(&x, &test_params().to_vector()).unwrap();
        assert_eq!(jp, DMatrix::zeros(4, 5));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 3, 5] {
            let field = CuckerSmale::new(n);
            let theta = test_params().to_vector();
            for _ in 0..10 {
                let x = random_state(&mut rng, n);
                let err = fd_check_jacobians(&field, &x, &theta, 1e-6).unwrap();
                assert!(err <= 1e-5, "N={n}, FD error {err}");
            }
        }
    }

    #[test]
    fn jac_params_position_rows_zero_and_gamma_column_zero_for_aligned() {
        let n = 3;
        let field = CuckerSmale::new(n);
        let sw = SwarmState {
            positions: vec![[0.0, 0.0], [1.5, 0.2], [3.0, -0.4]],
            velocities: vec![[0.3, 0.1]; n],
        };
        let jp = field
            .jac_params(&sw.flatten(), &test_params().to_vector())
            .unwrap();
        for row in 0..2 * n {
            for col in 0..CS_PARAM_DIM {
                assert_eq!(jp[(row, col)], 0.0);
            }
        }
        // equal velocities: the alignment term vanishes, so d vdot / d gamma = 0
        for row in 2 * n..4 * n {
            assert_eq!(jp[(row, 0)], 0.0);
        }
    }

    #[test]
    fn momentum_conservation_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 6;
        let field = CuckerSmale::new(n);
        let theta = test_params().to_vector();
        for _ in 0..20 {
            let x = random_state(&mut rng, n);
            let out = field.eval(&x, &theta).unwrap();

            let mut sum = [0.0f64; 2];
            for i in 0..n {
                sum[0] += out[2 * n + 2 * i];
                sum[1] += out[2 * n + 2 * i + 1];
            }
            assert!(sum[0].abs() < 1e-12 && sum[1].abs() < 1e-12);

            // translate all positions
            let mut shifted = x.clone();
            for i in 0..n {
                shifted[2 * i] += 3.25;
                shifted[2 * i + 1] -= 1.5;
            }
            let out2 = field.eval(&shifted, &theta).unwrap();
            for i in 0..2 * n {
                assert_abs_diff_eq!(
                    out[2 * n + i],
                    out2[2 * n + i],
                    epsilon = 1e-13
                );
            }

            // add a common velocity to all particles
            let mut boosted = x.clone();
            for i in 0..n {
                boosted[2 * n + 2 * i] += 0.8;
                boosted[2 * n + 2 * i + 1] -= 0.35;
            }
            let out3 = field.eval(&boosted, &theta).unwrap();
            for i in 0..2 * n {
                assert_abs_diff_eq!(
                    out[2 * n + i],
                    out3[2 * n + i],
                    epsilon = 1e-13
                );
            }
        }
    }

    #[test]
    fn fused_jacobians_match_individual_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [1usize, 2, 4, 7] {
            let field = CuckerSmale::new(n);
            let theta = test_params().to_vector();
            for _ in 0..5 {
                let x = random_state(&mut rng, n);
                let (f, jx, jp) = field.eval_with_jacobians(&x, &theta).unwrap();
                assert_eq!(f, field.eval(&x, &theta).unwrap());
                let jx_ref = field.jac_state(&x, &theta).unwrap();
                let jp_ref = field.jac_params(&x, &theta).unwrap();
                assert_abs_diff_eq!(jx, jx_ref, epsilon = 1e-13);
                assert_abs_diff_eq!(jp, jp_ref, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn linearization_matches_dense_jacobian_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for n in [1usize, 3, 6] {
            let field = CuckerSmale::new(n);
            let theta = test_params().to_vector();
            for _ in 0..5 {
                let x = random_state(&mut rng, n);
                let (f, lin) = field.linearize(&x, &theta, true, true).unwrap();
                // evaluation must agree with the plain path bit-for-bit
                assert_eq!(f, field.eval(&x, &theta).unwrap());

                let jx = field.jac_state(&x, &theta).unwrap();
                let jp = field.jac_params(&x, &theta).unwrap();
                let seed = DVector::from_fn(4 * n, |k, _| ((k % 7) as f64 - 3.0) * 0.31);
                assert_abs_diff_eq!(lin.vjp_state(&seed), jx.tr_mul(&seed), epsilon = 1e-13);
                assert_abs_diff_eq!(lin.vjp_params(&seed), jp.tr_mul(&seed), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn swarm_state_flatten_roundtrip() {
        let sw = SwarmState {
            positions: vec![[1.0, 2.0], [3.0, 4.0]],
            velocities: vec![[5.0, 6.0], [7.0, 8.0]],
        };
        let flat = sw.flatten();
        assert_eq!(
            flat.as_slice(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
        );
        assert_eq!(SwarmState::unflatten(&flat).unwrap(), sw);
    }
}
