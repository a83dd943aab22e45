//! Freezing policy: warm-up detection, candidate selection, the cubic threshold ramp,
//! and permanent per-layer freeze decisions.
//!
//! The run proceeds in two phases. During warm-up, importance scores are only
//! observed; warm-up ends at the first epoch where every adapter's score has settled
//! (relative change strictly below 5% against the previous epoch, with an absolute
//! escape for scores pinned near zero), or at a configured cap, whichever comes first.
//! At that epoch `t_w` the candidate set is fixed once: adapters whose importance is
//! strictly below the terminal threshold `τ_T`. From then on the threshold ramps along
//! a cubic from 0 at `t_w` to `τ_T` at `t_f`,
//!
//! ```text
//! τ_t = 0                                   t < t_w
//! τ_t = τ_T − τ_T (1 − (t−t_w)/(t_f−t_w))³  t_w ≤ t < t_f
//! τ_t = τ_T                                 t ≥ t_f
//! ```
//!
//! and any active candidate whose current importance falls strictly below `τ_t`
//! freezes permanently. Non-candidates and the classification head train for the whole
//! run. Decisions happen only at epoch boundaries and take effect the following epoch.

use crate::error::{Error, Result};
use crate::importance::{ImportanceRecord, REL_CHANGE_EPS};
use crate::rng::named_stream;
use rand::Rng;

/// Warm-up convergence: relative-change bound, strict.
pub const WARMUP_REL: f64 = 0.05;
/// Guard band under the 5% bound. A ratio that is exactly 5% in decimal can land a
/// few ulps below 0.05 after f64 subtraction and division; anything within this band
/// of the bound counts as at the bound (not converged), so the strict rule behaves as
/// written for decimal-specified scores. The band is far above rounding noise (~1e-16)
/// and far below any meaningful change signal.
pub const WARMUP_REL_SLACK: f64 = 1e-12;
/// Absolute escape so scores glued to zero count as settled.
pub const WARMUP_ABS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Policy {
    /// Importance-scheduled freezing (the subject of this crate).
    Safe,
    /// Never freeze; plain adapter tuning.
    None,
    /// Freeze a fixed random fraction of layers at `t_w`, once (comparison arm).
    RandomDrop { rate: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Warmup {
    /// Warm-up ends exactly at this epoch.
    Fixed { epoch: usize },
    /// Warm-up ends on the 5% rule, but no later than `cap`.
    Auto { cap: usize },
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub policy: Policy,
    /// Terminal threshold τ_T.
    pub tau_final: f64,
    pub warmup: Warmup,
    /// Epoch at which the ramp reaches τ_T.
    pub t_f: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            policy: Policy::Safe,
            tau_final: 0.1,
            warmup: Warmup::Auto { cap: 10 },
            t_f: 30,
            total_epochs: 40,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_final && self.tau_final < 1.0) {
            return Err(Error::Config(format!("tau_final {} outside (0, 1)", self.tau_final)));
        }
        if self.t_f > self.total_epochs {
            return Err(Error::Config(format!(
                "t_f {} beyond total_epochs {}",
                self.t_f, self.total_epochs
            )));
        }
        let latest_tw = match self.warmup {
            Warmup::Fixed { epoch } => epoch,
            Warmup::Auto { cap } => cap,
        };
        if latest_tw >= self.t_f {
            return Err(Error::Config(format!(
                "warm-up can end at epoch {latest_tw}, which is not before t_f {}",
                self.t_f
            )));
        }
        if let Policy::RandomDrop { rate, .. } = self.policy {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("random drop rate {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The cubic ramp. `t_w = None` means warm-up has not resolved, where the threshold is
/// 0 by definition.
pub fn threshold(t: usize, tau_final: f64, t_w: Option<usize>, t_f: usize) -> f64 {
    let Some(tw) = t_w else { return 0.0 };
    if t < tw {
        0.0
    } else if t < t_f {
        let frac = (t - tw) as f64 / (t_f - tw) as f64;
        let rem = 1.0 - frac;
        tau_final - tau_final * rem * rem * rem
    } else {
        tau_final
    }
}

/// The 5% warm-up rule between two consecutive epochs' scores, with the absolute
/// escape: settled iff, for every adapter, `|Δ| < 1e-8` or `|Δ|/max(prev, 1e-8)` is
/// strictly below 5% (guard-banded; see [`WARMUP_REL_SLACK`]).
pub fn converged_between(prev: &[f64], cur: &[f64]) -> bool {
    debug_assert_eq!(prev.len(), cur.len());
    prev.iter().zip(cur).all(|(&p, &c)| {
        let abs = (c - p).abs();
        abs < WARMUP_ABS_EPS || abs / p.max(REL_CHANGE_EPS) < WARMUP_REL - WARMUP_REL_SLACK
    })
}

/// One freeze decision, for the run log and the freeze-pattern artifact.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FreezeEvent {
    pub epoch: usize,
    pub layer: usize,
    pub importance: f64,
    pub tau: f64,
}

/// Mutable scheduling state; one instance per run, fed once per epoch.
#[derive(Debug, Clone)]
pub struct FreezeState {
    pub frozen: Vec<bool>,
    pub freeze_epoch: Vec<Option<usize>>,
    /// Set once at `t_w`; `None` before that.
    pub candidates: Option<Vec<bool>>,
    pub t_w: Option<usize>,
    pub events: Vec<FreezeEvent>,
}

impl FreezeState {
    fn new(n_layers: usize) -> Self {
        FreezeState {
            frozen: vec![false; n_layers],
            freeze_epoch: vec![None; n_layers],
            candidates: None,
            t_w: None,
            events: Vec::new(),
        }
    }

    /// Freeze `layer` permanently. Only candidates may freeze; freezing is absorbing.
    fn freeze(&mut self, layer: usize, epoch: usize, importance: f64, tau: f64) -> Result<()> {
        let is_candidate =
            self.candidates.as_ref().map(|c| c[layer]).unwrap_or(false);
        if !is_candidate {
            return Err(Error::Config(format!(
                "layer {layer} is not a freezing candidate; refusing to freeze it"
            )));
        }
        if self.frozen[layer] {
            return Ok(()); // absorbing; nothing to do
        }
        self.frozen[layer] = true;
        self.freeze_epoch[layer] = Some(epoch);
        self.events.push(FreezeEvent { epoch, layer, importance, tau });
        Ok(())
    }
}

/// Epoch-boundary state machine around [`FreezeState`].
#[derive(Debug)]
pub struct Scheduler {
    pub cfg: ScheduleConfig,
    pub state: FreezeState,
    pub history: Vec<ImportanceRecord>,
}

impl Scheduler {
    pub fn new(cfg: ScheduleConfig, n_layers: usize) -> Result<Scheduler> {
        cfg.validate()?;
        Ok(Scheduler { cfg, state: FreezeState::new(n_layers), history: Vec::new() })
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.state.frozen
    }

    /// Candidate selection at `t_w`: strictly below τ_T. Undefined importances were
    /// recorded as 1.0 and therefore never qualify.
    fn select_candidates(&mut self, record: &ImportanceRecord) {
        let tau = self.cfg.tau_final;
        self.state.candidates = Some(record.scores.iter().map(|&s| s < tau).collect());
    }

    /// Feed the end-of-epoch importance record. Returns the layers newly frozen at
    /// this boundary; the caller applies the mask before the next epoch's steps.
    pub fn observe(&mut self, record: ImportanceRecord) -> Result<Vec<usize>> {
        let epoch = record.epoch;
        self.history.push(record);
        if matches!(self.cfg.policy, Policy::None) {
            return Ok(Vec::new());
        }

        // Resolve warm-up.
        if self.state.t_w.is_none() {
            let resolved = match self.cfg.warmup {
                Warmup::Fixed { epoch: w } => epoch >= w,
                Warmup::Auto { cap } => {
                    let settled = self.history.len() >= 2 && {
                        let cur = &self.history[self.history.len() - 1];
                        let prev = &self.history[self.history.len() - 2];
                        converged_between(&prev.scores, &cur.scores)
                    };
                    settled || epoch >= cap
                }
            };
            if resolved {
                self.state.t_w = Some(epoch);
                let record = self.history.last().expect("just pushed").clone();
                self.select_candidates(&record);
                if let Policy::RandomDrop { rate, seed } = self.cfg.policy {
                    return self.random_freeze(epoch, rate, seed, &record);
                }
            } else {
                return Ok(Vec::new());
            }
        }

        if !matches!(self.cfg.policy, Policy::Safe) {
            return Ok(Vec::new());
        }

        // Moving-threshold comparison for every active candidate.
        let tau = threshold(epoch, self.cfg.tau_final, self.state.t_w, self.cfg.t_f);
        let record = self.history.last().expect("just pushed");
        let scores = record.scores.clone();
        let candidates = self.state.candidates.clone().expect("set at t_w");
        let mut newly = Vec::new();
        for (layer, &score) in scores.iter().enumerate() {
            if candidates[layer] && !self.state.frozen[layer] && score < tau {
                self.state.freeze(layer, epoch, score, tau)?;
                newly.push(layer);
            }
        }
        Ok(newly)
    }

    /// The comparison arm: freeze `round(rate · L)` layers chosen uniformly, once.
    fn random_freeze(
        &mut self,
        epoch: usize,
        rate: f64,
        seed: u64,
        record: &ImportanceRecord,
    ) -> Result<Vec<usize>> {
        let n = self.state.frozen.len();
        let count = ((rate * n as f64).round() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = named_stream(seed, "schedule.random_drop");
        for i in 0..n {
            let j = rng.gen_range(i..n);
            order.swap(i, j);
        }
        let chosen = &mut order[..count];
        chosen.sort_unstable();
        // The chosen set is the candidate set under this policy.
        let mut cand = vec![false; n];
        for &l in chosen.iter() {
            cand[l] = true;
        }
        self.state.candidates = Some(cand);
        let mut newly = Vec::new();
        for &layer in chosen.iter() {
            self.state.freeze(layer, epoch, record.scores[layer], 0.0)?;
            newly.push(layer);
        }
        Ok(newly)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, scores: &[f64]) -> ImportanceRecord {
        ImportanceRecord {
            epoch,
            scores: scores.to_vec(),
            undefined: vec![false; scores.len()],
            rel_change: None,
            abs_change: None,
        }
    }

    fn cfg(total: usize, t_f: usize, warmup: Warmup) -> ScheduleConfig {
        ScheduleConfig { policy: Policy::Safe, tau_final: 0.1, warmup, t_f, total_epochs: total }
    }

    #[test]
    fn threshold_matches_the_hand_evaluated_ramp() {
        // t_w = 5, t_f = 15, tau = 0.1.
        let tau = |t| threshold(t, 0.1, Some(5), 15);
        assert_eq!(tau(3), 0.0);
        assert_eq!(tau(5), 0.0, "ramp starts at zero");
        assert!((tau(10) - 0.0875).abs() < 1e-12, "midpoint 0.1 * (1 - 0.5^3)");
        assert_eq!(tau(15), 0.1, "terminal branch is exact");
        assert_eq!(tau(40), 0.1);
        assert_eq!(threshold(7, 0.1, None, 15), 0.0, "unresolved warm-up pins tau at 0");
        // Monotone nondecreasing across the whole ramp.
        let mut last = -1.0;
        for t in 0..=20 {
            let v = tau(t);
            assert!(v >= last, "t={t}");
            last = v;
        }
    }

    #[test]
    fn warmup_rule_is_strict_at_five_percent() {
        assert!(converged_between(&[0.50, 0.20], &[0.51, 0.205]), "2% and 2.5% settle");
        assert!(!converged_between(&[0.50, 0.20], &[0.50, 0.21]), "5.0% exactly is not < 5%");
        assert!(converged_between(&[0.50, 0.20], &[0.50, 0.2099]), "4.95% settles");
        assert!(converged_between(&[0.0, 0.2], &[1e-9, 0.2]), "near-zero absolute escape");
        assert!(!converged_between(&[0.0, 0.2], &[1e-6, 0.2]), "1e-6 jump from zero does not");
    }

    #[test]
    fn candidates_fix_at_warmup_and_boundary_is_exclusive() {
        let mut s = Scheduler::new(cfg(30, 15, Warmup::Fixed { epoch: 2 }), 3).unwrap();
        assert!(s.observe(record(0, &[0.02, 0.50, 0.10])).unwrap().is_empty());
        assert!(s.observe(record(1, &[0.02, 0.50, 0.10])).unwrap().is_empty());
        // Warm-up resolves here; candidate rule is strict, so 0.10 is out at tau 0.1.
        assert!(s.observe(record(2, &[0.02, 0.50, 0.10])).unwrap().is_empty());
        assert_eq!(s.state.t_w, Some(2));
        assert_eq!(s.state.candidates, Some(vec![true, false, false]));
    }

    #[test]
    fn freezing_follows_the_moving_threshold_and_is_absorbing() {
        let mut s = Scheduler::new(cfg(30, 12, Warmup::Fixed { epoch: 2 }), 3).unwrap();
        for e in 0..=2 {
            s.observe(record(e, &[0.01, 0.08, 0.5])).unwrap();
        }
        assert_eq!(s.state.candidates, Some(vec![true, true, false]));
        // tau at epoch 3 with t_w=2, t_f=12: 0.1*(1-0.9^3) = 0.0271; freezes layer 0 only.
        let newly = s.observe(record(3, &[0.01, 0.08, 0.5])).unwrap();
        assert_eq!(newly, vec![0]);
        assert_eq!(s.state.freeze_epoch[0], Some(3));
        // Later epochs: layer 1 crosses once tau passes 0.08; layer 0 stays frozen.
        let mut frozen_1_at = None;
        for e in 4..12 {
            let newly = s.observe(record(e, &[0.01, 0.08, 0.5])).unwrap();
            if newly.contains(&1) {
                frozen_1_at = Some(e);
                break;
            }
        }
        let e1 = frozen_1_at.expect("layer 1 must freeze before t_f");
        let tau_prev = threshold(e1 - 1, 0.1, Some(2), 12);
        let tau_now = threshold(e1, 0.1, Some(2), 12);
        assert!(tau_prev <= 0.08 && 0.08 < tau_now, "crossing epoch is the first with tau > imp");
        assert!(s.state.frozen[0] && s.state.frozen[1] && !s.state.frozen[2]);
        // Non-candidate layer 2 never freezes even at the terminal threshold.
        for e in 12..30 {
            assert!(s.observe(record(e, &[0.01, 0.08, 0.5])).unwrap().is_empty());
        }
        assert!(!s.state.frozen[2]);
        assert_eq!(s.state.events.len(), 2);
    }

    #[test]
    fn auto_warmup_respects_both_the_rule_and_the_cap() {
        // Scores settle between epochs 2 and 3 (changes under 5%).
        let mut s = Scheduler::new(cfg(40, 24, Warmup::Auto { cap: 12 }), 2).unwrap();
        s.observe(record(0, &[0.30, 0.40])).unwrap();
        s.observe(record(1, &[0.20, 0.30])).unwrap();
        s.observe(record(2, &[0.15, 0.25])).unwrap();
        assert_eq!(s.state.t_w, None);
        s.observe(record(3, &[0.146, 0.244])).unwrap();
        assert_eq!(s.state.t_w, Some(3));

        // Never settles: resolves exactly at the cap.
        let mut s = Scheduler::new(cfg(40, 24, Warmup::Auto { cap: 5 }), 1).unwrap();
        for e in 0..=5 {
            s.observe(record(e, &[0.1 + 0.1 * e as f64])).unwrap();
        }
        assert_eq!(s.state.t_w, Some(5));
    }

    #[test]
    fn policy_none_never_freezes_and_random_drop_freezes_once_at_warmup() {
        let mut none = Scheduler::new(
            ScheduleConfig { policy: Policy::None, ..cfg(20, 10, Warmup::Fixed { epoch: 1 }) },
            4,
        )
        .unwrap();
        for e in 0..20 {
            assert!(none.observe(record(e, &[0.0; 4])).unwrap().is_empty());
        }
        assert_eq!(none.state.t_w, None);

        let mut rnd = Scheduler::new(
            ScheduleConfig {
                policy: Policy::RandomDrop { rate: 0.5, seed: 7 },
                ..cfg(20, 10, Warmup::Fixed { epoch: 2 })
            },
            4,
        )
        .unwrap();
        assert!(rnd.observe(record(0, &[0.2; 4])).unwrap().is_empty());
        assert!(rnd.observe(record(1, &[0.2; 4])).unwrap().is_empty());
        let newly = rnd.observe(record(2, &[0.2; 4])).unwrap();
        assert_eq!(newly.len(), 2, "rate 0.5 of 4 layers");
        for e in 3..20 {
            assert!(rnd.observe(record(e, &[0.2; 4])).unwrap().is_empty());
        }
        // Replaying with the same seed picks the same layers.
        let mut rnd2 = Scheduler::new(
            ScheduleConfig {
                policy: Policy::RandomDrop { rate: 0.5, seed: 7 },
                ..cfg(20, 10, Warmup::Fixed { epoch: 2 })
            },
            4,
        )
        .unwrap();
        rnd2.observe(record(0, &[0.2; 4])).unwrap();
        rnd2.observe(record(1, &[0.2; 4])).unwrap();
        assert_eq!(rnd2.observe(record(2, &[0.2; 4])).unwrap(), newly);
    }

    #[test]
    fn freezing_a_non_candidate_is_a_contract_breach() {
        let mut state = FreezeState::new(2);
        state.candidates = Some(vec![false, true]);
        assert!(state.freeze(0, 3, 0.01, 0.05).is_err());
        assert!(state.freeze(1, 3, 0.01, 0.05).is_ok());
    }

    #[test]
    fn config_validation_rejects_degenerate_ramps() {
        assert!(cfg(30, 15, Warmup::Fixed { epoch: 15 }).validate().is_err());
        assert!(cfg(30, 15, Warmup::Auto { cap: 20 }).validate().is_err());
        assert!(ScheduleConfig { tau_final: 1.0, ..cfg(30, 15, Warmup::Auto { cap: 5 }) }
            .validate()
            .is_err());
        assert!(ScheduleConfig { t_f: 40, ..cfg(30, 15, Warmup::Auto { cap: 5 }) }
            .validate()
            .is_err());
        assert!(cfg(30, 15, Warmup::Auto { cap: 5 }).validate().is_ok());
    }

    #[test]
    fn undefined_importance_never_freezes() {
        let mut s = Scheduler::new(cfg(30, 12, Warmup::Fixed { epoch: 1 }), 2).unwrap();
        // Layer 1's importance is undefined -> recorded as 1.0 -> not a candidate.
        let mut r = record(0, &[0.01, 1.0]);
        r.undefined = vec![false, true];
        s.observe(r).unwrap();
        let mut r = record(1, &[0.01, 1.0]);
        r.undefined = vec![false, true];
        s.observe(r).unwrap();
        assert_eq!(s.state.candidates, Some(vec![true, false]));
    }
}
