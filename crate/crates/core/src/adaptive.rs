//! Adaptive step-size control from a first-order / second-order SAV pair.
//!
//! Both trial steps start from the same single-level state; the second-order
//! member is Crank–Nicolson with the half-step predictor so no history is
//! needed after a step-size change.

use log::warn;

use crate::error::{invalid, Result};
use crate::flow::{GradientFlow, Vector};
use crate::sav::{
    advance, modified_energy_single, CnPredictor, EnergyLedgerEntry, SavState, Scheme,
};

/// Retries per level before the step is accepted regardless of the error.
pub const MAX_RETRIES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    #[default]
    L2Relative,
    MaxRelative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveConfig {
    pub rho: f64,
    pub tol: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub norm: ErrorNorm,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            rho: 0.9,
            tol: 1e-3,
            tau_min: 1e-5,
            tau_max: 1e-2,
            norm: ErrorNorm::L2Relative,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(invalid("rho", format!("must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(invalid("tol", "must be positive"));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max && self.tau_max.is_finite()) {
            return Err(invalid("tau_min", "need 0 < tau_min <= tau_max"));
        }
        Ok(())
    }
}

/// `clamp(ρ √(tol/e) τ, τ_min, τ_max)`; `e = 0` gives `τ_max`.
pub fn adp(e: f64, tau: f64, cfg: &AdaptiveConfig) -> f64 {
    if e <= 0.0 {
        return cfg.tau_max;
    }
    (cfg.rho * (cfg.tol / e).sqrt() * tau).clamp(cfg.tau_min, cfg.tau_max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttemptRecord {
    pub level: usize,
    pub attempt: usize,
    pub t: f64,
    pub tau: f64,
    pub e: f64,
    pub accepted: bool,
    /// Accepted with `e > tol` after the retry budget ran out.
    pub forced: bool,
    pub tau_next: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AdaptiveTrace {
    pub attempts: Vec<AttemptRecord>,
}

impl AdaptiveTrace {
    pub fn accepted(&self) -> impl Iterator<Item = &AttemptRecord> {
        self.attempts.iter().filter(|a| a.accepted)
    }

    pub fn accepted_steps(&self) -> Vec<f64> {
        self.accepted().map(|a| a.tau).collect()
    }

    pub fn rejections(&self) -> usize {
        self.attempts.iter().filter(|a| !a.accepted).count()
    }

    pub fn forced(&self) -> usize {
        self.attempts.iter().filter(|a| a.forced).count()
    }
}

#[derive(Clone, Debug)]
pub struct AdaptiveOutput<S> {
    pub state: SavState<S>,
    pub ledger: Vec<EnergyLedgerEntry>,
    pub trace: AdaptiveTrace,
}

fn difference<F: GradientFlow>(flow: &F, u1: &F::State, u2: &F::State, norm: ErrorNorm) -> f64 {
    let mut d = u1.clone();
    d.axpy(-1.0, u2);
    let (num, den) = match norm {
        ErrorNorm::L2Relative => (flow.inner(&d, &d).sqrt(), flow.inner(u2, u2).sqrt()),
        ErrorNorm::MaxRelative => (d.max_abs(), u2.max_abs()),
    };
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

fn entry<F: GradientFlow>(
    flow: &F,
    state: &SavState<F::State>,
    residual: f64,
) -> EnergyLedgerEntry {
    EnergyLedgerEntry {
        step: state.step,
        time: state.t,
        dt: state.dt,
        original_energy: flow.original_energy(state.phi()),
        modified_energy: modified_energy_single(flow, state.phi(), state.r()),
        dissipation_residual: residual,
        mass: flow.mass(state.phi()),
        growth_detected: false,
    }
}

/// Integrates to `t_final` with the step-size controller, starting from
/// `τ = τ_min`. The last step is shortened to land on `t_final`.
pub fn adaptive_run<F: GradientFlow>(
    flow: &F,
    phi0: F::State,
    t_final: f64,
    cfg: &AdaptiveConfig,
) -> Result<AdaptiveOutput<F::State>> {
    adaptive_run_with_observer(flow, phi0, t_final, cfg, |_| Ok(()))
}

pub fn adaptive_run_with_observer<F: GradientFlow>(
    flow: &F,
    phi0: F::State,
    t_final: f64,
    cfg: &AdaptiveConfig,
    mut observer: impl FnMut(&SavState<F::State>) -> Result<()>,
) -> Result<AdaptiveOutput<F::State>> {
    cfg.validate()?;
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(invalid("T", "must be positive"));
    }
    let second = Scheme::CrankNicolson(CnPredictor::HalfStep);
    let mut state = SavState::new(flow, phi0, cfg.tau_min, second)?;
    let mut ledger = vec![entry(flow, &state, 0.0)];
    let mut trace = AdaptiveTrace::default();
    observer(&state)?;
    let mut tau = cfg.tau_min;
    let mut level = 0;
    while t_final - state.t > 1e-12 * t_final {
        level += 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let remaining = t_final - state.t;
            let h = tau.min(remaining);
            let phis = std::slice::from_ref(state.phi());
            let rs = [state.r()];
            let (u1, _) = advance(flow, Scheme::FirstOrder, phis, &rs, h)?;
            let (u2, r2) = advance(flow, second, phis, &rs, h)?;
            let e = difference(flow, &u1, &u2, cfg.norm);
            let tau_next = adp(e, h, cfg);
            let ok = e <= cfg.tol;
            let exhausted = attempt > MAX_RETRIES || h <= cfg.tau_min;
            if ok || exhausted {
                if !ok {
                    warn!(
                        "accepting step at t = {} with error {e:e} > tol {:e} (tau = {h:e})",
                        state.t, cfg.tol
                    );
                }
                trace.attempts.push(AttemptRecord {
                    level,
                    attempt,
                    t: state.t,
                    tau: h,
                    e,
                    accepted: true,
                    forced: !ok,
                    tau_next,
                });
                let before = modified_energy_single(flow, state.phi(), state.r());
                let mut next =
                    SavState::from_history(vec![u2], vec![r2], state.t + h, h, second)?;
                next.step = state.step + 1;
                if !next.phi().all_finite() || !r2.is_finite() {
                    return Err(crate::SavError::BlowUp {
                        step: next.step,
                        t: next.t,
                        reason: "non-finite state in adaptive step".into(),
                    });
                }
                let after = modified_energy_single(flow, next.phi(), next.r());
                state = next;
                ledger.push(entry(flow, &state, (after - before).max(0.0)));
                observer(&state)?;
                tau = tau_next;
                break;
            }
            trace.attempts.push(AttemptRecord {
                level,
                attempt,
                t: state.t,
                tau: h,
                e,
                accepted: false,
                forced: false,
                tau_next,
            });
            tau = tau_next;
        }
    }
    Ok(AdaptiveOutput {
        state,
        ledger,
        trace,
    })
}
