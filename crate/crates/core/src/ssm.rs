//! State-space sequence primitives.
//!
//! Continuous parameters `(A, B, C, D)` with time step `delta` are turned into
//! a discrete system by the zero-order hold
//!
//! ```text
//! A_bar = exp(delta A)
//! B_bar = (delta A)^-1 (exp(delta A) - I) delta B
//! ```
//!
//! which can be run either as the recurrence `h_k = A_bar h_{k-1} + B_bar x_k`,
//! `y_k = C h_k + D x_k`, or as a causal convolution with the kernel
//! `K = (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)` plus the `D x`
//! skip term. The selective variant makes `B`, `C` and `delta` functions of
//! the input and uses `A_bar_t = exp(delta_t A)`, `B_bar_t = delta_t B_t`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// State matrix, stored either as its diagonal or densely.
#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl StateMatrix {
    pub fn size(&self) -> usize {
        match self {
            StateMatrix::Diagonal(d) => d.len(),
            StateMatrix::Dense(m) => m.nrows(),
        }
    }

    /// `self * h`.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        match self {
            StateMatrix::Diagonal(d) => d.iter().zip(h).map(|(a, v)| a * v).collect(),
            StateMatrix::Dense(m) => (m * DVector::from_column_slice(h)).as_slice().to_vec(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            StateMatrix::Diagonal(d) => d.iter().all(|v| v.is_finite()),
            StateMatrix::Dense(m) => m.iter().all(|v| v.is_finite()),
        }
    }
}

/// Continuous-time linear time-invariant system.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a: StateMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: f64,
}

impl SsmParams {
    pub fn new(a: StateMatrix, b: Vec<f64>, c: Vec<f64>, d: f64, delta: f64) -> Result<Self> {
        let n = a.size();
        if n == 0 {
            return Err(Error::InvalidArgument("state size must be at least 1".into()));
        }
        if let StateMatrix::Dense(m) = &a {
            if !m.is_square() {
                return Err(Error::shape("SsmParams", format!("A is {}x{}", m.nrows(), m.ncols())));
            }
        }
        if b.len() != n || c.len() != n {
            return Err(Error::shape(
                "SsmParams",
                format!("state size {n}, B has {}, C has {}", b.len(), c.len()),
            ));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        let finite = a.is_finite() && b.iter().chain(&c).all(|v| v.is_finite()) && d.is_finite();
        if !finite {
            return Err(Error::NonFinite("SsmParams"));
        }
        Ok(SsmParams { a, b, c, d, delta })
    }

    pub fn state_size(&self) -> usize {
        self.a.size()
    }

    pub fn discretize(&self) -> Result<DiscreteSsm> {
        let zoh = discretize_zoh(&self.a, &self.b, self.delta)?;
        Ok(DiscreteSsm {
            a_bar: zoh.a_bar,
            b_bar: zoh.b_bar,
            c: self.c.clone(),
            d: self.d,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Zoh {
    pub a_bar: StateMatrix,
    pub b_bar: Vec<f64>,
    /// Largest eigenvalue modulus of `A_bar`.
    pub spectral_radius: f64,
    /// `delta A` was singular and `B_bar` came from the limit form.
    pub singular_fallback: bool,
}

impl Zoh {
    pub fn is_stable(&self) -> bool {
        self.spectral_radius <= 1.0
    }
}

/// Zero-order-hold discretization.
///
/// For a diagonal `A` each mode uses `expm1(x) / x` with `x = delta a_i`, which
/// is exact and well conditioned down to tiny `x`; at `x == 0` the limit
/// `B_bar_i = delta b_i` is used. A dense `A` uses the inverse form when
/// `delta A` is well conditioned and otherwise the top-right block of the
/// augmented exponential `exp([[delta A, delta B], [0, 0]])`, which is the
/// same quantity without the inverse.
pub fn discretize_zoh(a: &StateMatrix, b: &[f64], delta: f64) -> Result<Zoh> {
    let n = a.size();
    if b.len() != n {
        return Err(Error::shape("discretize_zoh", format!("A is {n}x{n}, B has {}", b.len())));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    let zoh = match a {
        StateMatrix::Diagonal(diag) => {
            let mut singular = false;
            let mut a_bar = Vec::with_capacity(n);
            let mut b_bar = Vec::with_capacity(n);
            for (&ai, &bi) in diag.iter().zip(b) {
                let x = delta * ai;
                a_bar.push(x.exp());
                if x == 0.0 {
                    singular = true;
                    b_bar.push(delta * bi);
                } else {
                    b_bar.push(x.exp_m1() / x * delta * bi);
                }
            }
            let spectral_radius = a_bar.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            Zoh {
                a_bar: StateMatrix::Diagonal(a_bar),
                b_bar,
                spectral_radius,
                singular_fallback: singular,
            }
        }
        StateMatrix::Dense(m) => {
            let da = m * delta;
            let a_bar = da.clone().exp();
            let db = DVector::from_column_slice(b) * delta;
            let sv = da.singular_values();
            let smax = sv.max();
            let smin = sv.min();
            let well_conditioned = smax > 0.0 && smin / smax > 1e-12;
            let (b_bar, singular) = match well_conditioned.then(|| da.clone().try_inverse()).flatten() {
                Some(inv) => (inv * (&a_bar - DMatrix::identity(n, n)) * db, false),
                None => {
                    let mut aug = DMatrix::zeros(n + 1, n + 1);
                    aug.view_mut((0, 0), (n, n)).copy_from(&da);
                    aug.view_mut((0, n), (n, 1)).copy_from(&db);
                    let e = aug.exp();
                    (e.view((0, n), (n, 1)).into_owned().column(0).into_owned(), true)
                }
            };
            let spectral_radius = a_bar
                .clone()
                .complex_eigenvalues()
                .iter()
                .fold(0.0_f64, |acc, z| acc.max(z.norm()));
            Zoh {
                a_bar: StateMatrix::Dense(a_bar),
                b_bar: b_bar.as_slice().to_vec(),
                spectral_radius,
                singular_fallback: singular,
            }
        }
    };
    if !zoh.is_stable() {
        log::warn!("discretized state matrix has spectral radius {:.6} > 1", zoh.spectral_radius);
    }
    Ok(zoh)
}

/// Discrete LTI system `(A_bar, B_bar, C, D)`.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: StateMatrix,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sequential recurrence from `h_0 = 0`.
pub fn scan_recurrent(sys: &DiscreteSsm, x: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; sys.b_bar.len()];
    x.iter()
        .map(|&xk| {
            h = sys.a_bar.apply(&h);
            h.iter_mut().zip(&sys.b_bar).for_each(|(hv, b)| *hv += b * xk);
            dot(&sys.c, &h) + sys.d * xk
        })
        .collect()
}

/// Convolution kernel `K_k = C A_bar^k B_bar` for `k < len`.
pub fn kernel_conv_form(sys: &DiscreteSsm, len: usize) -> Vec<f64> {
    let mut v = sys.b_bar.clone();
    (0..len)
        .map(|k| {
            if k > 0 {
                v = sys.a_bar.apply(&v);
            }
            dot(&sys.c, &v)
        })
        .collect()
}

/// `y = causal_conv(x, kernel) + d x`.
pub fn apply_conv_kernel(kernel: &[f64], d: f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let conv: f64 = (0..=k.min(kernel.len().saturating_sub(1)))
                .map(|j| kernel[j] * x[k - j])
                .sum();
            conv + d * x[k]
        })
        .collect()
}

/// Output of the convolutional form for the whole sequence.
pub fn scan_conv(sys: &DiscreteSsm, x: &[f64]) -> Vec<f64> {
    apply_conv_kernel(&kernel_conv_form(sys, x.len()), sys.d, x)
}

/// Chunked two-pass scan.
///
/// Chunks are first scanned independently from a zero state (in parallel),
/// then the chunk-boundary states are carried forward sequentially and each
/// chunk is corrected by `C A_bar^{j+1} h_in`. The result depends only on
/// `chunk` and not on thread scheduling.
pub fn scan_chunked(sys: &DiscreteSsm, x: &[f64], chunk: usize) -> Vec<f64> {
    let chunk = chunk.max(1);
    let n = sys.b_bar.len();
    let locals: Vec<(Vec<f64>, Vec<f64>)> = x
        .par_chunks(chunk)
        .map(|xs| {
            let mut h = vec![0.0; n];
            let ys = xs
                .iter()
                .map(|&xk| {
                    h = sys.a_bar.apply(&h);
                    h.iter_mut().zip(&sys.b_bar).for_each(|(hv, b)| *hv += b * xk);
                    dot(&sys.c, &h) + sys.d * xk
                })
                .collect();
            (ys, h)
        })
        .collect();

    let mut carries = Vec::with_capacity(locals.len());
    let mut carry = vec![0.0; n];
    for (ys, h_end) in &locals {
        carries.push(carry.clone());
        for _ in 0..ys.len() {
            carry = sys.a_bar.apply(&carry);
        }
        carry.iter_mut().zip(h_end).for_each(|(c, h)| *c += h);
    }

    locals
        .into_par_iter()
        .zip(carries)
        .flat_map_iter(|((ys, _), h_in)| {
            let mut h = h_in;
            ys.into_iter().map(move |y| {
                h = sys.a_bar.apply(&h);
                y + dot(&sys.c, &h)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

/// Input-dependent per-step parameters for a sequence of length `len`.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    pub len: usize,
    pub d_model: usize,
    pub state: usize,
    /// `[len, d_model]`, strictly positive.
    pub delta: Vec<f64>,
    /// `[len, state]`
    pub b: Vec<f64>,
    /// `[len, state]`
    pub c: Vec<f64>,
}

/// Learned tensors of a selective SSM of width `d_model` and state size `state`.
///
/// Per step: `delta_t = softplus(x_t W_delta + b_delta)`, `B_t = x_t W_B + b_B`,
/// `C_t = x_t W_C + b_C`; `A = -softplus(a_raw)` is per channel and state.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveVars {
    /// `[d_model, state]`
    pub a_raw: Var,
    /// `[d_model]`
    pub d_skip: Var,
    /// `[d_model, d_model]`
    pub w_delta: Var,
    /// `[d_model]`
    pub b_delta: Var,
    /// `[d_model, state]`
    pub w_b: Var,
    /// `[state]`
    pub b_b: Var,
    /// `[d_model, state]`
    pub w_c: Var,
    /// `[state]`
    pub b_c: Var,
}

/// Parameter names and shapes of a selective SSM, in [`SelectiveVars`] field order.
pub fn selective_param_shapes(d_model: usize, state: usize) -> [(&'static str, Vec<usize>); 8] {
    [
        ("a_raw", vec![d_model, state]),
        ("d_skip", vec![d_model]),
        ("w_delta", vec![d_model, d_model]),
        ("b_delta", vec![d_model]),
        ("w_b", vec![d_model, state]),
        ("b_b", vec![state]),
        ("w_c", vec![d_model, state]),
        ("b_c", vec![state]),
    ]
}

/// Computes the per-step parameters of `x: [L, d_model]` on the graph.
pub fn selective_projections(g: &mut Graph, x: Var, p: &SelectiveVars) -> Result<(Var, Var, Var)> {
    let dl = g.matmul(x, p.w_delta)?;
    let dl = g.add_bias(dl, p.b_delta)?;
    let delta = g.softplus(dl);
    let b = g.matmul(x, p.w_b)?;
    let b = g.add_bias(b, p.b_b)?;
    let c = g.matmul(x, p.w_c)?;
    let c = g.add_bias(c, p.b_c)?;
    Ok((delta, b, c))
}

/// Selective scan of `x: [L, d_model]`, differentiable in every input.
pub fn selective_scan(g: &mut Graph, x: Var, p: &SelectiveVars) -> Result<Var> {
    let (delta, b, c) = selective_projections(g, x, p)?;
    let a = g.softplus(p.a_raw);
    let a = g.neg(a);
    selective_scan_core(g, x, delta, a, b, c, p.d_skip)
}

/// Evaluates [`selective_scan`] without tracking gradients.
pub fn selective_scan_eval(x: &Tensor, weights: &[Tensor; 8]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let mut vars = Vec::with_capacity(8);
    for w in weights {
        vars.push(g.constant(w.clone())?);
    }
    let p = SelectiveVars {
        a_raw: vars[0],
        d_skip: vars[1],
        w_delta: vars[2],
        b_delta: vars[3],
        w_b: vars[4],
        b_b: vars[5],
        w_c: vars[6],
        b_c: vars[7],
    };
    let y = selective_scan(&mut g, xv, &p)?;
    Ok(g.value(y).clone())
}

/// Raw recurrence with explicit per-step parameters.
///
/// Returns `y: [L, D]` and the states `h: [L, D, N]`.
pub fn selective_recurrence(
    x: &[f64],
    sp: &SelectiveParams,
    a: &[f64],
    d_skip: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (len, dm, ns) = (sp.len, sp.d_model, sp.state);
    let mut y = vec![0.0; len * dm];
    let mut hs = vec![0.0; len * dm * ns];
    let mut h = vec![0.0; dm * ns];
    for t in 0..len {
        for d in 0..dm {
            let dt = sp.delta[t * dm + d];
            let xt = x[t * dm + d];
            let mut acc = 0.0;
            for n in 0..ns {
                let hv = &mut h[d * ns + n];
                *hv = (dt * a[d * ns + n]).exp() * *hv + dt * sp.b[t * ns + n] * xt;
                acc += sp.c[t * ns + n] * *hv;
            }
            y[t * dm + d] = acc + d_skip[d] * xt;
        }
        hs[t * dm * ns..(t + 1) * dm * ns].copy_from_slice(&h);
    }
    (y, hs)
}

/// Graph node for the selective recurrence given precomputed `delta: [L, D]`,
/// `a: [D, N]` (already negative), `b, c: [L, N]` and `d_skip: [D]`.
pub fn selective_scan_core(
    g: &mut Graph,
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d_skip: Var,
) -> Result<Var> {
    let (len, dm) = g.value(x).dims2()?;
    let (ad, ns) = g.value(a).dims2()?;
    let ok = g.shape(delta) == [len, dm]
        && ad == dm
        && g.shape(b) == [len, ns]
        && g.shape(c) == [len, ns]
        && g.shape(d_skip) == [dm];
    if !ok {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                g.shape(x),
                g.shape(delta),
                g.shape(a),
                g.shape(b),
                g.shape(c),
                g.shape(d_skip)
            ),
        ));
    }
    let sp = SelectiveParams {
        len,
        d_model: dm,
        state: ns,
        delta: g.value(delta).data().to_vec(),
        b: g.value(b).data().to_vec(),
        c: g.value(c).data().to_vec(),
    };
    let (y, hs) = selective_recurrence(g.value(x).data(), &sp, g.value(a).data(), g.value(d_skip).data());
    let value = Tensor::new(vec![len, dm], y)?;
    Ok(g.record(
        "selective_scan",
        &[x, delta, a, b, c, d_skip],
        value,
        Box::new(move |inp, _, gy| {
            let (xd, dd, ad, bd, cd, skip) = (
                inp[0].data(),
                inp[1].data(),
                inp[2].data(),
                inp[3].data(),
                inp[4].data(),
                inp[5].data(),
            );
            let mut gx = vec![0.0; len * dm];
            let mut gdelta = vec![0.0; len * dm];
            let mut ga = vec![0.0; dm * ns];
            let mut gb = vec![0.0; len * ns];
            let mut gc = vec![0.0; len * ns];
            let mut gskip = vec![0.0; dm];
            // Gradient w.r.t. h_t, carried backwards through A_bar_{t+1}.
            let mut gh = vec![0.0; dm * ns];
            for t in (0..len).rev() {
                let h_t = &hs[t * dm * ns..(t + 1) * dm * ns];
                for d in 0..dm {
                    let i = t * dm + d;
                    let (gyv, xt, dt) = (gy[i], xd[i], dd[i]);
                    gskip[d] += gyv * xt;
                    gx[i] += gyv * skip[d];
                    for n in 0..ns {
                        let k = d * ns + n;
                        let a_bar = (dt * ad[k]).exp();
                        let h_prev = if t > 0 { hs[(t - 1) * dm * ns + k] } else { 0.0 };
                        gc[t * ns + n] += gyv * h_t[k];
                        let ghv = gh[k] + gyv * cd[t * ns + n];
                        let g_abar = ghv * h_prev;
                        let bn = bd[t * ns + n];
                        gdelta[i] += g_abar * a_bar * ad[k] + ghv * bn * xt;
                        ga[k] += g_abar * a_bar * dt;
                        gb[t * ns + n] += ghv * dt * xt;
                        gx[i] += ghv * dt * bn;
                        gh[k] = ghv * a_bar;
                    }
                }
            }
            vec![Some(gx), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gskip)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn scalar_sys(a_bar: f64, b_bar: f64, c: f64, d: f64) -> DiscreteSsm {
        DiscreteSsm {
            a_bar: StateMatrix::Diagonal(vec![a_bar]),
            b_bar: vec![b_bar],
            c: vec![c],
            d,
        }
    }

    #[test]
    fn zoh_scalar_half_life() {
        let z = discretize_zoh(&StateMatrix::Diagonal(vec![-1.0]), &[1.0], LN_2).unwrap();
        let StateMatrix::Diagonal(a_bar) = &z.a_bar else { unreachable!() };
        assert!((a_bar[0] - 0.5).abs() < 1e-12);
        assert!((z.b_bar[0] - 0.5).abs() < 1e-12);
        assert!(!z.singular_fallback);
        assert!(z.is_stable());
    }

    #[test]
    fn zoh_small_a_approaches_delta_b() {
        let delta = 0.3;
        let z = discretize_zoh(&StateMatrix::Diagonal(vec![1e-9]), &[2.0], delta).unwrap();
        assert!((z.b_bar[0] - delta * 2.0).abs() < 1e-6);
        let z0 = discretize_zoh(&StateMatrix::Diagonal(vec![0.0]), &[2.0], delta).unwrap();
        assert!(z0.singular_fallback);
        assert_eq!(z0.b_bar[0], delta * 2.0);
    }

    #[test]
    fn zoh_dense_matches_diagonal() {
        let diag = vec![-0.5, -1.5, -0.1];
        let b = vec![1.0, -2.0, 0.5];
        let zd = discretize_zoh(&StateMatrix::Diagonal(diag.clone()), &b, 0.7).unwrap();
        let dense = DMatrix::from_diagonal(&DVector::from_vec(diag));
        let zm = discretize_zoh(&StateMatrix::Dense(dense), &b, 0.7).unwrap();
        for (x, y) in zd.b_bar.iter().zip(&zm.b_bar) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!((zd.spectral_radius - zm.spectral_radius).abs() < 1e-12);
    }

    #[test]
    fn zoh_dense_singular_uses_limit() {
        let z = discretize_zoh(&StateMatrix::Dense(DMatrix::zeros(2, 2)), &[1.0, 3.0], 0.25).unwrap();
        assert!(z.singular_fallback);
        assert!((z.b_bar[0] - 0.25).abs() < 1e-14);
        assert!((z.b_bar[1] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn unstable_system_reports_radius() {
        let z = discretize_zoh(&StateMatrix::Diagonal(vec![0.5]), &[1.0], 1.0).unwrap();
        assert!(!z.is_stable());
        assert!((z.spectral_radius - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn recurrence_hand_example() {
        let y = scan_recurrent(&scalar_sys(0.5, 1.0, 1.0, 0.0), &[1.0, 0.0, 0.0]);
        assert_eq!(y, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn skip_only_is_identity() {
        let x = [0.3, -1.0, 2.5, 0.0];
        assert_eq!(scan_recurrent(&scalar_sys(0.9, 0.4, 0.0, 1.0), &x), x.to_vec());
    }

    #[test]
    fn kernel_closed_form() {
        let k = kernel_conv_form(&scalar_sys(0.5, 1.0, 1.0, 0.0), 4);
        assert_eq!(k, vec![1.0, 0.5, 0.25, 0.125]);
        let k0 = kernel_conv_form(&scalar_sys(0.5, 1.0, 0.0, 2.0), 3);
        assert_eq!(k0, vec![0.0; 3]);
        let x = [1.0, 2.0, 3.0];
        assert_eq!(scan_conv(&scalar_sys(0.5, 1.0, 0.0, 2.0), &x), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn params_validation() {
        let a = StateMatrix::Diagonal(vec![-1.0, -2.0]);
        assert!(SsmParams::new(a.clone(), vec![1.0], vec![1.0, 1.0], 0.0, 1.0).is_err());
        assert!(SsmParams::new(a.clone(), vec![1.0; 2], vec![1.0; 2], 0.0, 0.0).is_err());
        assert!(SsmParams::new(StateMatrix::Diagonal(vec![]), vec![], vec![], 0.0, 1.0).is_err());
        assert!(SsmParams::new(a, vec![1.0; 2], vec![1.0; 2], 0.0, 0.1).is_ok());
    }
}
