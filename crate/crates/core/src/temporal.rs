//! Kalman smoothing of the mixture parameters and the per-frame decision.
//!
//! The state is `(mu, sigma, pi)` with identity dynamics and identity
//! observation. With diagonal noise this is three independent scalar
//! filters, but the matrix form is kept so the covariances can be inspected
//! directly.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::hosmix::MixtureParams;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub q: Matrix3<f64>,
    pub r: Matrix3<f64>,
}

/// State starts at `initial`; its covariance starts at the measurement noise.
pub fn kalman_init(q_var: f64, r_var: f64, initial: MixtureParams) -> Result<KalmanState> {
    if !(q_var > 0.0) || !q_var.is_finite() {
        return Err(Error::param("kalman.q_var", format!("must be positive, got {q_var}")));
    }
    if !(r_var > 0.0) || !r_var.is_finite() {
        return Err(Error::param("kalman.r_var", format!("must be positive, got {r_var}")));
    }
    let r = Matrix3::from_diagonal_element(r_var);
    Ok(KalmanState {
        x: Vector3::new(initial.mu, initial.sigma, initial.pi),
        p: r,
        q: Matrix3::from_diagonal_element(q_var),
        r,
    })
}

impl KalmanState {
    pub fn params(&self) -> MixtureParams {
        MixtureParams {
            mu: self.x[0],
            sigma: self.x[1],
            pi: self.x[2],
        }
    }

    pub fn pi(&self) -> f64 {
        self.x[2]
    }

    /// Constant-value transition: state unchanged, covariance grows by Q.
    pub fn predict(&mut self) {
        self.p += self.q;
    }

    /// Measurement update; returns the gain used.
    pub fn update(&mut self, z: &MixtureParams) -> Matrix3<f64> {
        let s = self.p + self.r;
        let s_inv = s
            .try_inverse()
            .expect("P + R is positive definite when R is");
        let k = self.p * s_inv;
        let innovation = Vector3::new(z.mu, z.sigma, z.pi) - self.x;
        self.x += k * innovation;
        // Joseph form keeps P symmetric positive semi-definite
        let ik = Matrix3::identity() - k;
        self.p = ik * self.p * ik.transpose() + k * self.r * k.transpose();
        k
    }
}

pub fn kalman_predict(state: &KalmanState) -> KalmanState {
    let mut s = state.clone();
    s.predict();
    s
}

pub fn kalman_update(state: &KalmanState, z: &MixtureParams) -> KalmanState {
    let mut s = state.clone();
    s.update(z);
    s
}

/// Which estimate of the Gaussian ratio drives the reported decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecisionMode {
    /// Per-frame EM estimate.
    #[default]
    Em,
    /// Kalman-smoothed estimate, taken before this frame's update.
    Kalman,
}

impl FromStr for DecisionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "em" => Ok(DecisionMode::Em),
            "kalman" => Ok(DecisionMode::Kalman),
            _ => Err("expected em or kalman".into()),
        }
    }
}

impl std::fmt::Display for DecisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecisionMode::Em => "em",
            DecisionMode::Kalman => "kalman",
        })
    }
}

/// When the filter absorbs a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdatePolicy {
    /// Only on frames that pass the KS gate with raw Π above the threshold.
    #[default]
    OnDetection,
    /// On every frame that passes the KS gate.
    OnKsPass,
}

impl FromStr for UpdatePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on_detection" => Ok(UpdatePolicy::OnDetection),
            "on_ks_pass" => Ok(UpdatePolicy::OnKsPass),
            _ => Err("expected on_detection or on_ks_pass".into()),
        }
    }
}

impl std::fmt::Display for UpdatePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdatePolicy::OnDetection => "on_detection",
            UpdatePolicy::OnKsPass => "on_ks_pass",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalParams {
    pub q_var: f64,
    pub r_var: f64,
    pub pi_rain: f64,
    pub mode: DecisionMode,
    pub update_policy: UpdatePolicy,
}

impl Default for TemporalParams {
    fn default() -> Self {
        TemporalParams {
            q_var: 0.01,
            r_var: 0.1,
            pi_rain: 0.40,
            mode: DecisionMode::Em,
            update_policy: UpdatePolicy::OnDetection,
        }
    }
}

impl TemporalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_var > 0.0) {
            return Err(Error::param("kalman.q_var", "must be positive"));
        }
        if !(self.r_var > 0.0) {
            return Err(Error::param("kalman.r_var", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pi_rain) {
            return Err(Error::param("decision.pi_rain", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Rain,
    NoRain,
    WarmUp,
    NoEvidence,
}

impl Decision {
    pub fn code(self) -> &'static str {
        match self {
            Decision::Rain => "1",
            Decision::NoRain => "0",
            Decision::WarmUp => "W",
            Decision::NoEvidence => "N",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "1" => Some(Decision::Rain),
            "0" => Some(Decision::NoRain),
            "W" => Some(Decision::WarmUp),
            "N" => Some(Decision::NoEvidence),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainDecision {
    pub frame: u64,
    pub decision: Decision,
    pub pi_raw: Option<f64>,
    /// Smoothed Π compared for this frame (prior to its update).
    pub pi_kalman: Option<f64>,
    pub ks_d: Option<f64>,
}

impl RainDecision {
    pub fn bare(frame: u64, decision: Decision) -> Self {
        RainDecision {
            frame,
            decision,
            pi_raw: None,
            pi_kalman: None,
            ks_d: None,
        }
    }

    pub fn is_rain(&self) -> bool {
        self.decision == Decision::Rain
    }
}

/// Per-stream decision state. The Kalman trajectory does not depend on the
/// reporting mode, so both modes can be recovered from one run.
#[derive(Debug, Clone)]
pub struct RainTracker {
    params: TemporalParams,
    kalman: Option<KalmanState>,
}

impl RainTracker {
    pub fn new(params: TemporalParams) -> Result<Self> {
        params.validate()?;
        Ok(RainTracker {
            params,
            kalman: None,
        })
    }

    pub fn kalman(&self) -> Option<&KalmanState> {
        self.kalman.as_ref()
    }

    /// Frame with a fitted mixture. Compares Π first, then updates the
    /// filter when the update policy allows.
    pub fn observe(&mut self, frame: u64, raw: MixtureParams, ks_d: f64, ks_passed: bool) -> RainDecision {
        let p = self.params;
        if let Some(k) = self.kalman.as_mut() {
            k.predict();
        }
        let smoothed = self.kalman.as_ref().map_or(raw.pi, KalmanState::pi);
        let em_rain = ks_passed && raw.pi > p.pi_rain;
        let kalman_rain = ks_passed && smoothed > p.pi_rain;
        let absorb = match p.update_policy {
            UpdatePolicy::OnDetection => em_rain,
            UpdatePolicy::OnKsPass => ks_passed,
        };
        if absorb {
            match self.kalman.as_mut() {
                Some(k) => {
                    k.update(&raw);
                }
                None => {
                    self.kalman = Some(
                        kalman_init(p.q_var, p.r_var, raw).expect("validated variances"),
                    );
                }
            }
        }
        let rain = match p.mode {
            DecisionMode::Em => em_rain,
            DecisionMode::Kalman => kalman_rain,
        };
        RainDecision {
            frame,
            decision: if rain { Decision::Rain } else { Decision::NoRain },
            pi_raw: Some(raw.pi),
            pi_kalman: Some(smoothed),
            ks_d: Some(ks_d),
        }
    }

    /// Frame without usable streaks: uncertainty grows, nothing is measured.
    pub fn no_evidence(&mut self, frame: u64) -> RainDecision {
        if let Some(k) = self.kalman.as_mut() {
            k.predict();
        }
        RainDecision::bare(frame, Decision::NoEvidence)
    }
}

/// Stateless form of [`RainTracker::observe`] for a single step.
pub fn rain_decision(
    state: &mut Option<KalmanState>,
    params: &TemporalParams,
    frame: u64,
    raw: MixtureParams,
    ks_d: f64,
    ks_passed: bool,
) -> RainDecision {
    let mut tracker = RainTracker {
        params: *params,
        kalman: state.take(),
    };
    let d = tracker.observe(frame, raw, ks_d, ks_passed);
    *state = tracker.kalman;
    d
}
