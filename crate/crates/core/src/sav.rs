//! Scalar auxiliary variable integrators.
//!
//! With `r = √(E1 + shift)` and `b = U[φ̄]/√(E1[φ̄] + shift)` evaluated at an
//! explicit predictor `φ̄`, every scheme reduces to
//!
//! ```text
//! (I − c GL) φ − κ G b (b, φ) = P + σ G b
//! ```
//!
//! which is solved by the Sherman–Morrison–Woodbury identity using two
//! constant-coefficient solves: `w = (I − c GL)⁻¹ G b` and
//! `p = (I − c GL)⁻¹ P`.

use log::warn;

use crate::error::{invalid, Result, SavError};
use crate::flow::{GradientFlow, Vector};
use crate::models::ModelSpec;
use crate::spectral::Field;

/// Threshold on `|φ|∞` treated as blow-up.
pub const BLOW_UP_LIMIT: f64 = 1e8;

const GROWTH_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnPredictor {
    /// `½(3φⁿ − φⁿ⁻¹)`
    Extrapolation,
    /// One semi-implicit first-order half step from `φⁿ`.
    HalfStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdfPredictor {
    /// Polynomial extrapolation of the history.
    A,
    /// One step of the next lower-order scheme.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    FirstOrder,
    CrankNicolson(CnPredictor),
    Bdf2,
    Bdf3(BdfPredictor),
    Bdf4(BdfPredictor),
}

impl Scheme {
    /// Number of past levels the step reads.
    pub fn history_depth(self) -> usize {
        match self {
            Scheme::FirstOrder | Scheme::CrankNicolson(CnPredictor::HalfStep) => 1,
            Scheme::CrankNicolson(CnPredictor::Extrapolation) | Scheme::Bdf2 => 2,
            Scheme::Bdf3(_) => 3,
            Scheme::Bdf4(_) => 4,
        }
    }

    pub fn order(self) -> usize {
        match self {
            Scheme::FirstOrder => 1,
            Scheme::CrankNicolson(_) | Scheme::Bdf2 => 2,
            Scheme::Bdf3(_) => 3,
            Scheme::Bdf4(_) => 4,
        }
    }

    /// Whether the modified energy is provably non-increasing for every step size.
    pub fn unconditionally_stable(self) -> bool {
        self.order() <= 2
    }

    pub fn label(self) -> &'static str {
        match self {
            Scheme::FirstOrder => "be",
            Scheme::CrankNicolson(CnPredictor::Extrapolation) => "cn",
            Scheme::CrankNicolson(CnPredictor::HalfStep) => "cn-half",
            Scheme::Bdf2 => "bdf2",
            Scheme::Bdf3(BdfPredictor::A) => "bdf3a",
            Scheme::Bdf3(BdfPredictor::B) => "bdf3b",
            Scheme::Bdf4(BdfPredictor::A) => "bdf4a",
            Scheme::Bdf4(BdfPredictor::B) => "bdf4b",
        }
    }

    pub fn from_label(s: &str) -> Option<Scheme> {
        Some(match s {
            "be" => Scheme::FirstOrder,
            "cn" => Scheme::CrankNicolson(CnPredictor::Extrapolation),
            "cn-half" => Scheme::CrankNicolson(CnPredictor::HalfStep),
            "bdf2" => Scheme::Bdf2,
            "bdf3a" => Scheme::Bdf3(BdfPredictor::A),
            "bdf3b" => Scheme::Bdf3(BdfPredictor::B),
            "bdf4a" => Scheme::Bdf4(BdfPredictor::A),
            "bdf4b" => Scheme::Bdf4(BdfPredictor::B),
            _ => return None,
        })
    }
}

/// How the history of a multistep scheme is filled before its first step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Bootstrap {
    /// Lower-order SAV steps at the same step size.
    Ladder,
    /// Each startup level from Crank–Nicolson with 1, 2 and 4 substeps,
    /// combined by Richardson extrapolation to remove the `h²` and `h³`
    /// error terms. Used by default for BDF3 and BDF4.
    #[default]
    Extrapolated,
}

/// `α` and the history weights `h_i` of the BDF formula
/// `(α φⁿ⁺¹ − Σ h_i φⁿ⁻ⁱ)/Δt`.
pub fn bdf_coefficients(order: usize) -> (f64, &'static [f64]) {
    match order {
        1 => (1.0, &[1.0]),
        2 => (1.5, &[2.0, -0.5]),
        3 => (11.0 / 6.0, &[3.0, -1.5, 1.0 / 3.0]),
        4 => (25.0 / 12.0, &[4.0, -3.0, 4.0 / 3.0, -0.25]),
        _ => panic!("BDF order {order} not supported"),
    }
}

/// Scheme history, newest level first.
#[derive(Clone, Debug)]
pub struct SavState<S> {
    phi: Vec<S>,
    r: Vec<f64>,
    pub t: f64,
    pub dt: f64,
    pub step: usize,
    pub scheme: Scheme,
}

impl<S: Vector> SavState<S> {
    /// Single-level state with `r⁰ = √(E1[φ⁰] + shift)`.
    pub fn new<F>(flow: &F, phi0: S, dt: f64, scheme: Scheme) -> Result<Self>
    where
        F: GradientFlow<State = S>,
    {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        if !phi0.all_finite() {
            return Err(SavError::NonFinite("initial field"));
        }
        let r0 = flow.sav_variable(&phi0)?;
        Ok(SavState {
            phi: vec![phi0],
            r: vec![r0],
            t: 0.0,
            dt,
            step: 0,
            scheme,
        })
    }

    /// State with an explicit history, newest first.
    pub fn from_history(
        phi: Vec<S>,
        r: Vec<f64>,
        t: f64,
        dt: f64,
        scheme: Scheme,
    ) -> Result<Self> {
        if phi.is_empty() || phi.len() != r.len() || phi.len() > 4 {
            return Err(invalid("history", "need 1 to 4 matching φ and r levels"));
        }
        Ok(SavState {
            phi,
            r,
            t,
            dt,
            step: 0,
            scheme,
        })
    }

    pub fn phi(&self) -> &S {
        &self.phi[0]
    }

    pub fn r(&self) -> f64 {
        self.r[0]
    }

    pub fn phi_history(&self) -> &[S] {
        &self.phi
    }

    pub fn r_history(&self) -> &[f64] {
        &self.r
    }

    pub fn depth(&self) -> usize {
        self.phi.len()
    }

    fn push(&mut self, phi: S, r: f64, dt: f64) {
        self.phi.insert(0, phi);
        self.r.insert(0, r);
        self.phi.truncate(4);
        self.r.truncate(4);
        self.t += dt;
        self.step += 1;
    }

    /// Advances one step with the state's scheme.
    pub fn step<F>(&mut self, flow: &F) -> Result<()>
    where
        F: GradientFlow<State = S>,
    {
        let (phi, r) = advance(flow, self.scheme, &self.phi, &self.r, self.dt)
            .map_err(|e| self.contextualize(e))?;
        check_blow_up(&phi, r, self.step + 1, self.t + self.dt)?;
        self.push(phi, r, self.dt);
        Ok(())
    }

    fn contextualize(&self, e: SavError) -> SavError {
        match e {
            SavError::NonFinite(what) => SavError::BlowUp {
                step: self.step + 1,
                t: self.t + self.dt,
                reason: format!("non-finite {what}"),
            },
            other => other,
        }
    }
}

fn check_blow_up<S: Vector>(phi: &S, r: f64, step: usize, t: f64) -> Result<()> {
    if !phi.all_finite() || !r.is_finite() {
        return Err(SavError::BlowUp {
            step,
            t,
            reason: format!("non-finite state (r = {r})"),
        });
    }
    let m = phi.max_abs();
    if m > BLOW_UP_LIMIT {
        return Err(SavError::BlowUp {
            step,
            t,
            reason: format!("|φ|∞ = {m:e} exceeds {BLOW_UP_LIMIT:e} (r = {r:e})"),
        });
    }
    Ok(())
}

/// `(I − c GL) x = b` for a single-field model, where `c` already contains
/// the step size.
pub fn solve_constant_coeff(model: &ModelSpec, c: f64, b: &Field) -> Field {
    model.solve_shifted(c, b)
}

/// `b = U[φ̄]/√(E1[φ̄] + shift)`.
pub fn sav_weight<F: GradientFlow>(flow: &F, phibar: &F::State) -> Result<F::State> {
    let denom = flow.sav_variable(phibar)?;
    let mut b = flow.variational_derivative(phibar);
    b.scale(1.0 / denom);
    Ok(b)
}

/// Solves `(I − c GL) φ − κ G b (b, φ) = P + σ G b` given `p = (I − c GL)⁻¹ P`.
/// Returns `φ` and `(b, φ)`.
fn smw_solve<F: GradientFlow>(
    flow: &F,
    b: &F::State,
    p: F::State,
    c: f64,
    kappa: f64,
    sigma: f64,
) -> Result<(F::State, f64)> {
    let w = flow.solve_shifted_g(c, b);
    let bw = flow.inner(b, &w);
    let gamma = -bw;
    let bound = (flow.inner(b, b) * flow.inner(&w, &w)).sqrt();
    if gamma < -1e-12 * bound {
        return Err(invalid(
            "gamma",
            format!("negative rank-one coefficient {gamma:e}; G must be nonpositive"),
        ));
    }
    let bp = flow.inner(b, &p);
    let b_phi = (bp - sigma * gamma) / (1.0 + kappa * gamma);
    if !b_phi.is_finite() {
        return Err(SavError::NonFinite("SMW scalar"));
    }
    let mut phi = p;
    phi.axpy(sigma + kappa * b_phi, &w);
    Ok((phi, b_phi))
}

fn check_history<S>(scheme: Scheme, phis: &[S], rs: &[f64]) -> Result<()> {
    let needed = scheme.history_depth();
    let available = phis.len().min(rs.len());
    if available < needed {
        return Err(SavError::History { needed, available });
    }
    Ok(())
}

/// Explicit approximation `φ̄` used to freeze the nonlinearity.
pub fn predictor<F: GradientFlow>(
    flow: &F,
    scheme: Scheme,
    phis: &[F::State],
    rs: &[f64],
    dt: f64,
) -> Result<F::State> {
    check_history(scheme, phis, rs)?;
    let p = phis;
    Ok(match scheme {
        Scheme::FirstOrder => p[0].clone(),
        Scheme::CrankNicolson(CnPredictor::Extrapolation) => {
            F::State::lincomb(&[(1.5, &p[0]), (-0.5, &p[1])])
        }
        Scheme::CrankNicolson(CnPredictor::HalfStep) => {
            let mut rhs = flow.apply_g(&flow.variational_derivative(&p[0]));
            rhs.scale(0.5 * dt);
            rhs.axpy(1.0, &p[0]);
            flow.solve_shifted(0.5 * dt, &rhs)
        }
        Scheme::Bdf2 => F::State::lincomb(&[(2.0, &p[0]), (-1.0, &p[1])]),
        Scheme::Bdf3(BdfPredictor::A) => {
            F::State::lincomb(&[(3.0, &p[0]), (-3.0, &p[1]), (1.0, &p[2])])
        }
        Scheme::Bdf3(BdfPredictor::B) => advance(flow, Scheme::Bdf2, phis, rs, dt)?.0,
        Scheme::Bdf4(BdfPredictor::A) => F::State::lincomb(&[
            (4.0, &p[0]),
            (-6.0, &p[1]),
            (4.0, &p[2]),
            (-1.0, &p[3]),
        ]),
        Scheme::Bdf4(BdfPredictor::B) => {
            advance(flow, Scheme::Bdf3(BdfPredictor::A), phis, rs, dt)?.0
        }
    })
}

/// One step of `scheme` from the history `(phis, rs)` (newest first).
/// Returns `(φⁿ⁺¹, rⁿ⁺¹)`.
pub fn advance<F: GradientFlow>(
    flow: &F,
    scheme: Scheme,
    phis: &[F::State],
    rs: &[f64],
    dt: f64,
) -> Result<(F::State, f64)> {
    let phibar = predictor(flow, scheme, phis, rs, dt)?;
    let b = sav_weight(flow, &phibar)?;
    match scheme {
        Scheme::CrankNicolson(_) => {
            let p = flow.solve_shifted_affine(0.5 * dt, 0.5 * dt, &phis[0]);
            let sigma = dt * (rs[0] - 0.25 * flow.inner(&b, &phis[0]));
            let (phi, b_phi) = smw_solve(flow, &b, p, 0.5 * dt, 0.25 * dt, sigma)?;
            let r = rs[0] + 0.5 * (b_phi - flow.inner(&b, &phis[0]));
            Ok((phi, r))
        }
        _ => {
            let (alpha, h) = bdf_coefficients(scheme.order());
            let terms: Vec<(f64, &F::State)> = h.iter().copied().zip(phis.iter()).collect();
            let h_phi = F::State::lincomb(&terms);
            let h_r: f64 = h.iter().zip(rs).map(|(a, r)| a * r).sum();
            let b_h = flow.inner(&b, &h_phi);
            let sigma = dt / (alpha * alpha) * (h_r - 0.5 * b_h);
            let mut rhs = h_phi;
            rhs.scale(1.0 / alpha);
            let p = flow.solve_shifted(dt / alpha, &rhs);
            let (phi, b_phi) = smw_solve(flow, &b, p, dt / alpha, 0.5 * dt / alpha, sigma)?;
            let r = (h_r + 0.5 * (alpha * b_phi - b_h)) / alpha;
            Ok((phi, r))
        }
    }
}

fn stepped<F: GradientFlow>(
    flow: &F,
    state: &SavState<F::State>,
    scheme: Scheme,
) -> Result<SavState<F::State>> {
    let mut next = state.clone();
    next.scheme = scheme;
    next.step(flow)?;
    next.scheme = state.scheme;
    Ok(next)
}

pub fn step_first_order<F: GradientFlow>(
    flow: &F,
    state: &SavState<F::State>,
) -> Result<SavState<F::State>> {
    stepped(flow, state, Scheme::FirstOrder)
}

pub fn step_cn<F: GradientFlow>(
    flow: &F,
    state: &SavState<F::State>,
    predictor: CnPredictor,
) -> Result<SavState<F::State>> {
    stepped(flow, state, Scheme::CrankNicolson(predictor))
}

pub fn step_bdf2<F: GradientFlow>(
    flow: &F,
    state: &SavState<F::State>,
) -> Result<SavState<F::State>> {
    stepped(flow, state, Scheme::Bdf2)
}

pub fn step_bdf3<F: GradientFlow>(
    flow: &F,
    state: &SavState<F::State>,
    predictor: BdfPredictor,
) -> Result<SavState<F::State>> {
    stepped(flow, state, Scheme::Bdf3(predictor))
}

pub fn step_bdf4<F: GradientFlow>(
    flow: &F,
    state: &SavState<F::State>,
    predictor: BdfPredictor,
) -> Result<SavState<F::State>> {
    stepped(flow, state, Scheme::Bdf4(predictor))
}

/// `½(φ, Lφ) + r²`.
pub fn modified_energy_single<F: GradientFlow>(flow: &F, phi: &F::State, r: f64) -> f64 {
    flow.quadratic_energy(phi) + r * r
}

/// Modified energy dissipated by `scheme`: the two-level form for BDF2 once
/// two levels exist, `½(φ, Lφ) + r²` otherwise.
pub fn modified_energy<F: GradientFlow>(
    flow: &F,
    scheme: Scheme,
    phis: &[F::State],
    rs: &[f64],
) -> f64 {
    if scheme == Scheme::Bdf2 && phis.len() >= 2 {
        let extrap = F::State::lincomb(&[(2.0, &phis[0]), (-1.0, &phis[1])]);
        let q = 0.5 * (flow.quadratic_energy(&phis[0]) + flow.quadratic_energy(&extrap));
        let re = 2.0 * rs[0] - rs[1];
        q + 0.5 * (rs[0] * rs[0] + re * re)
    } else {
        modified_energy_single(flow, &phis[0], rs[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyLedgerEntry {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub original_energy: f64,
    pub modified_energy: f64,
    /// Largest `max(0, Ẽⁿ⁺¹ − Ẽⁿ)` since the previous entry.
    pub dissipation_residual: f64,
    pub mass: f64,
    /// Set when the windowed growth detector fired since the previous entry.
    pub growth_detected: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub ledger_every: usize,
    pub bootstrap: Bootstrap,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            ledger_every: 1,
            bootstrap: Bootstrap::Extrapolated,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput<S> {
    pub state: SavState<S>,
    pub ledger: Vec<EnergyLedgerEntry>,
}

/// Number of equal steps of size `dt` covering `[0, t_final]`.
pub fn step_count(dt: f64, t_final: f64) -> Result<usize> {
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(invalid("T", format!("must be positive, got {t_final}")));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    let n = (t_final / dt).round();
    if n < 1.0 || (n * dt - t_final).abs() > 1e-9 * t_final {
        return Err(invalid(
            "dt",
            format!("T = {t_final} is not an integer multiple of dt = {dt}"),
        ));
    }
    Ok(n as usize)
}

/// Pushes one startup level onto a state whose history is still too short.
pub fn bootstrap_level<F: GradientFlow>(
    flow: &F,
    state: &mut SavState<F::State>,
    how: Bootstrap,
) -> Result<()> {
    let (phi, r) = if how == Bootstrap::Extrapolated && state.scheme.order() >= 3 {
        richardson_level(flow, state.phi(), state.r(), state.dt)?
    } else {
        let ladder = match state.depth() {
            1 => Scheme::FirstOrder,
            2 => Scheme::Bdf2,
            _ => Scheme::Bdf3(BdfPredictor::A),
        };
        advance(flow, ladder, &state.phi, &state.r, state.dt)?
    };
    check_blow_up(&phi, r, state.step + 1, state.t + state.dt)?;
    let dt = state.dt;
    state.push(phi, r, dt);
    Ok(())
}

/// Fills the history of a state up to the depth its scheme needs.
pub fn bootstrap<F: GradientFlow>(
    flow: &F,
    state: &mut SavState<F::State>,
    how: Bootstrap,
) -> Result<()> {
    while state.depth() < state.scheme.history_depth() {
        bootstrap_level(flow, state, how)?;
    }
    Ok(())
}

fn cn_substeps<F: GradientFlow>(
    flow: &F,
    phi: &F::State,
    r: f64,
    dt: f64,
    m: usize,
) -> Result<(F::State, f64)> {
    let scheme = Scheme::CrankNicolson(CnPredictor::HalfStep);
    let h = dt / m as f64;
    let (mut p, mut rr) = (phi.clone(), r);
    for _ in 0..m {
        let (np, nr) = advance(flow, scheme, std::slice::from_ref(&p), &[rr], h)?;
        p = np;
        rr = nr;
    }
    Ok((p, rr))
}

fn richardson_level<F: GradientFlow>(
    flow: &F,
    phi: &F::State,
    r: f64,
    dt: f64,
) -> Result<(F::State, f64)> {
    let (y1, r1) = cn_substeps(flow, phi, r, dt, 1)?;
    let (y2, r2) = cn_substeps(flow, phi, r, dt, 2)?;
    let (y4, r4) = cn_substeps(flow, phi, r, dt, 4)?;
    // R1 = (4y₂ − y₁)/3, R1' = (4y₄ − y₂)/3, R2 = (8R1' − R1)/7
    let phi = F::State::lincomb(&[
        (32.0 / 21.0, &y4),
        (-12.0 / 21.0, &y2),
        (1.0 / 21.0, &y1),
    ]);
    let r = (32.0 * r4 - 12.0 * r2 + r1) / 21.0;
    Ok((phi, r))
}

struct Recorder {
    every: usize,
    last_modified: f64,
    pending_residual: f64,
    pending_growth: bool,
    window: Vec<f64>,
    warned: bool,
    check_growth: bool,
    ledger: Vec<EnergyLedgerEntry>,
}

impl Recorder {
    fn observe<F: GradientFlow>(
        &mut self,
        flow: &F,
        state: &SavState<F::State>,
        force: bool,
    ) -> Result<()> {
        let m = modified_energy(flow, state.scheme, &state.phi, &state.r);
        if !m.is_finite() {
            return Err(SavError::BlowUp {
                step: state.step,
                t: state.t,
                reason: "non-finite modified energy".into(),
            });
        }
        if state.step > 0 {
            self.pending_residual = self.pending_residual.max((m - self.last_modified).max(0.0));
        }
        if self.check_growth {
            let floor = self.window.iter().copied().fold(f64::INFINITY, f64::min);
            if m > floor + 1e-10 * (1.0 + floor.abs()) {
                self.pending_growth = true;
                if !self.warned {
                    warn!(
                        "modified energy growth at step {} (t = {}): {m:e} > window minimum {floor:e}",
                        state.step, state.t
                    );
                    self.warned = true;
                }
            }
            self.window.push(m);
            if self.window.len() > GROWTH_WINDOW {
                self.window.remove(0);
            }
        }
        self.last_modified = m;
        if force || state.step % self.every == 0 {
            self.ledger.push(EnergyLedgerEntry {
                step: state.step,
                time: state.t,
                dt: state.dt,
                original_energy: flow.original_energy(state.phi()),
                modified_energy: m,
                dissipation_residual: self.pending_residual,
                mass: flow.mass(state.phi()),
                growth_detected: self.pending_growth,
            });
            self.pending_residual = 0.0;
            self.pending_growth = false;
        }
        Ok(())
    }
}

/// Integrates from `φ0` to `t_final` with a fixed step, bootstrapping the
/// history as needed and calling `observer` after every level.
pub fn run_with_observer<F: GradientFlow>(
    flow: &F,
    scheme: Scheme,
    phi0: F::State,
    dt: f64,
    t_final: f64,
    opts: RunOptions,
    mut observer: impl FnMut(&SavState<F::State>) -> Result<()>,
) -> Result<RunOutput<F::State>> {
    let n = step_count(dt, t_final)?;
    if opts.ledger_every == 0 {
        return Err(invalid("ledger_every", "must be at least 1"));
    }
    let mut state = SavState::new(flow, phi0, dt, scheme)?;
    let mut rec = Recorder {
        every: opts.ledger_every,
        last_modified: 0.0,
        pending_residual: 0.0,
        pending_growth: false,
        window: Vec::new(),
        warned: false,
        check_growth: !scheme.unconditionally_stable(),
        ledger: Vec::new(),
    };
    rec.observe(flow, &state, true)?;
    observer(&state)?;
    while state.depth() < scheme.history_depth() && state.step < n {
        bootstrap_level(flow, &mut state, opts.bootstrap)?;
        rec.observe(flow, &state, state.step == n)?;
        observer(&state)?;
    }
    while state.step < n {
        state.step(flow)?;
        rec.observe(flow, &state, state.step == n)?;
        observer(&state)?;
    }
    Ok(RunOutput {
        state,
        ledger: rec.ledger,
    })
}

pub fn run<F: GradientFlow>(
    flow: &F,
    scheme: Scheme,
    phi0: F::State,
    dt: f64,
    t_final: f64,
    ledger_every: usize,
) -> Result<RunOutput<F::State>> {
    let opts = RunOptions {
        ledger_every,
        ..RunOptions::default()
    };
    run_with_observer(flow, scheme, phi0, dt, t_final, opts, |_| Ok(()))
}
