//! Training objectives: the pair-based circle loss against the real-class
//! prototype, cross-entropy, and their weighted combination.
//!
//! For a pair with similarities (s_p, s_n) to the prototype, the loss term is
//! exp(η(γ_n(s_n−m_n) − γ_p(s_p−m_p))) with γ_p = max(1+m−s_p, 0),
//! γ_n = max(m+s_n, 0), m_p = 1−m, m_n = m, summed over the batch's pairs
//! inside log(1 + Σ·). The γ weights are treated as constants during
//! differentiation. Whenever both clamps are inactive the exponent equals
//! η(s_n² + (1−s_p)² − 2m²), so optimization drives pairs toward the circle
//! s_n² + (1−s_p)² = 2m².

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const CE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Each fake pairs only with its own source real.
    FineGrained,
    /// Every real×fake cross pair in the batch (ablation).
    AllPairs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FalConfig {
    /// Margin m: decision-circle radius √2·m.
    #[serde(rename = "m", default = "default_margin")]
    pub margin: f64,
    /// Scale η on the per-pair exponent.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_pair_mode")]
    pub pair_mode: PairMode,
}

fn default_margin() -> f64 {
    0.25
}
fn default_eta() -> f64 {
    24.0
}
fn default_pair_mode() -> PairMode {
    PairMode::FineGrained
}

impl Default for FalConfig {
    fn default() -> Self {
        FalConfig {
            margin: default_margin(),
            eta: default_eta(),
            pair_mode: default_pair_mode(),
        }
    }
}

impl FalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin must be in [0, 1), got {}",
                self.margin
            )));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Loss weight schedule: 0 during the first epoch (classification only),
/// 1 afterwards.
pub fn lambda_for_epoch(epoch: usize) -> f64 {
    if epoch == 1 {
        0.0
    } else {
        1.0
    }
}

/// Values excluded from differentiation (the γ weights and the log-sum-exp
/// shift). The nominal pass records them; the finite-difference oracle
/// replays the recorded values so it probes exactly the function the tape
/// differentiates.
#[derive(Debug, Clone)]
pub struct DetachCtx {
    replaying: bool,
    values: Vec<f64>,
    cursor: usize,
}

impl DetachCtx {
    pub fn record() -> Self {
        DetachCtx {
            replaying: false,
            values: Vec::new(),
            cursor: 0,
        }
    }

    /// Replay of a previously recorded pass.
    pub fn replay(&self) -> Self {
        DetachCtx {
            replaying: true,
            values: self.values.clone(),
            cursor: 0,
        }
    }

    /// Pass a computed value through the detachment boundary.
    pub fn detached(&mut self, computed: f64) -> f64 {
        if self.replaying {
            let v = self.values[self.cursor];
            self.cursor += 1;
            v
        } else {
            self.values.push(computed);
            computed
        }
    }
}

/// One fine-grained pair's similarities to the prototype, as tape scalars.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityPair {
    pub s_p: NodeId,
    pub s_n: NodeId,
    pub pair_id: u64,
}

/// log(1 + Σ_pairs exp(η(γ_n(s_n−m_n) − γ_p(s_p−m_p)))), γ detached.
/// Empty input yields exactly zero. The sum is shifted by a detached
/// max(0, max exponent) so large η cannot overflow.
pub fn fal_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pairs: &[SimilarityPair],
    cfg: &FalConfig,
    detach: &mut DetachCtx,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return tape.input(Tensor::scalar(S::ZERO));
    }
    let m = cfg.margin;
    let eta = cfg.eta;
    let m_p = 1.0 - m;
    let m_n = m;

    let mut exponents = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let s_p_val = tape.value(pair.s_p).data()[0].to_f64();
        let s_n_val = tape.value(pair.s_n).data()[0].to_f64();
        let gamma_p = detach.detached((1.0 + m - s_p_val).max(0.0));
        let gamma_n = detach.detached((m + s_n_val).max(0.0));
        let pos = tape.add_scalar(pair.s_p, -m_p)?;
        let pos = tape.scale(pos, eta * gamma_p)?;
        let neg = tape.add_scalar(pair.s_n, -m_n)?;
        let neg = tape.scale(neg, eta * gamma_n)?;
        exponents.push(tape.sub(neg, pos)?);
    }

    let max_exp = exponents
        .iter()
        .map(|&e| tape.value(e).data()[0].to_f64())
        .fold(0.0f64, f64::max);
    let shift = detach.detached(max_exp);

    let mut sum: Option<NodeId> = None;
    for &e in &exponents {
        let shifted = tape.add_scalar(e, -shift)?;
        let term = tape.exp(shifted)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = tape.add_scalar(sum.unwrap(), (-shift).exp())?;
    let logged = tape.log(total)?;
    tape.add_scalar(logged, shift)
}

/// Scalar cross-entropy on a fake-probability: −y·log p − (1−y)·log(1−p),
/// with p clamped into [ε, 1−ε] first.
pub fn ce_loss<S: Scalar>(tape: &mut Tape<S>, p_fake: NodeId, label: u8) -> Result<NodeId> {
    let p_target = if label == 1 {
        p_fake
    } else {
        let neg = tape.scale(p_fake, -1.0)?;
        tape.add_scalar(neg, 1.0)?
    };
    let clamped = tape.clamp(p_target, CE_EPS, 1.0 - CE_EPS)?;
    let logged = tape.log(clamped)?;
    tape.scale(logged, -1.0)
}

/// Multi-class negative log-likelihood from a probability row [1, C].
pub fn ce_multiclass<S: Scalar>(
    tape: &mut Tape<S>,
    probs: NodeId,
    target: usize,
) -> Result<NodeId> {
    let p = tape.index(probs, target)?;
    let clamped = tape.clamp(p, CE_EPS, 1.0)?;
    let logged = tape.log(clamped)?;
    tape.scale(logged, -1.0)
}

/// ce + λ(epoch)·fal. At λ = 0 the cross-entropy node is returned unchanged
/// (total == ce exactly); at λ = 1 the terms are added without scaling.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ce: NodeId,
    fal: Option<NodeId>,
    epoch: usize,
) -> Result<NodeId> {
    let lambda = lambda_for_epoch(epoch);
    match fal {
        None => Ok(ce),
        Some(_) if lambda == 0.0 => Ok(ce),
        Some(f) if lambda == 1.0 => tape.add(ce, f),
        Some(f) => {
            let scaled = tape.scale(f, lambda)?;
            tape.add(ce, scaled)
        }
    }
}

/// A sample's pooled feature with its label and pair identity, pre-similarity.
#[derive(Debug, Clone, Copy)]
pub struct SampleFeature {
    pub label: u8,
    pub pair_id: u64,
    pub pooled: NodeId,
}

/// Build similarity pairs against the prototype (row 0 of the classifier
/// weight, taken at call time). Fine-grained mode pairs each fake with its
/// own source real; all-pairs mode crosses every real with every fake.
pub fn build_pairs<S: Scalar>(
    tape: &mut Tape<S>,
    samples: &[SampleFeature],
    prototype: NodeId,
    mode: PairMode,
) -> Result<Vec<SimilarityPair>> {
    let mut sims = Vec::with_capacity(samples.len());
    for s in samples {
        sims.push(tape.cosine_similarity(s.pooled, prototype)?);
    }
    let mut pairs = Vec::new();
    match mode {
        PairMode::FineGrained => {
            for (i, s) in samples.iter().enumerate() {
                if s.label != 1 {
                    continue;
                }
                let real = samples
                    .iter()
                    .position(|r| r.label == 0 && r.pair_id == s.pair_id)
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "fake sample with pair id {} has no matching real in the batch",
                            s.pair_id
                        ))
                    })?;
                pairs.push(SimilarityPair {
                    s_p: sims[real],
                    s_n: sims[i],
                    pair_id: s.pair_id,
                });
            }
        }
        PairMode::AllPairs => {
            for (i, fake) in samples.iter().enumerate() {
                if fake.label != 1 {
                    continue;
                }
                for (j, real) in samples.iter().enumerate() {
                    if real.label != 0 {
                        continue;
                    }
                    pairs.push(SimilarityPair {
                        s_p: sims[j],
                        s_n: sims[i],
                        pair_id: fake.pair_id,
                    });
                }
            }
        }
    }
    Ok(pairs)
}

/// Direct scalar evaluation of the per-pair exponent and full loss, used as
/// an independent oracle in tests and the acceptance suite.
pub fn fal_exponent_scalar(s_p: f64, s_n: f64, m: f64, eta: f64) -> f64 {
    let gamma_p = (1.0 + m - s_p).max(0.0);
    let gamma_n = (m + s_n).max(0.0);
    eta * (gamma_n * (s_n - m) - gamma_p * (s_p - (1.0 - m)))
}

pub fn fal_scalar(pairs: &[(f64, f64)], m: f64, eta: f64) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|&(s_p, s_n)| fal_exponent_scalar(s_p, s_n, m, eta).exp())
        .sum();
    (1.0 + sum).ln()
}
