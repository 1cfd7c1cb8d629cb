//! Gradient-sign attacks on the retrieval metric.
//!
//! All three methods perturb raw `[0, 255]` pixels of a gallery image so that
//! its distance to a set of reference probes grows (non-targeted) or shrinks
//! (targeted), while staying inside the L∞ ball of radius ε around the
//! original and inside the valid pixel range:
//!
//! - FGSM: one step of size ε along `sign(∇)`.
//! - I-FGSM: `iters` steps of size α, clipping back into the ball after each.
//! - MI-FGSM: like I-FGSM but stepping along the sign of an L1-normalized
//!   gradient accumulated with decay μ.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::data::{ImageBatch, ImageRecord};
use crate::embedder::FeatureModel;
use crate::error::{Error, Result};
use crate::metrics::{AttackObjective, MetricSpec};

/// Highest valid pixel value.
pub const PIXEL_MAX: f32 = 255.0;
/// Slack allowed on the L∞ bound when checking outputs.
pub const BALL_SLACK: f64 = 1e-6;
/// Below this L1 norm the normalized momentum increment is treated as zero.
pub const MOMENTUM_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    IFgsm,
    MiFgsm,
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::IFgsm => "i_fgsm",
            AttackMethod::MiFgsm => "mi_fgsm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    NonTargeted,
    Targeted,
}

/// How a targeted attack picks the identity to pull each image towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    FixedIdentity(u32),
    /// Uniform over probe identities other than the image's own, seeded by
    /// [`AttackConfig::seed`] and the image's position.
    RandomOther,
}

/// Iteration count, either fixed or derived from ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Iterations {
    #[default]
    Auto,
    Fixed(u32),
}

impl Serialize for Iterations {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Iterations::Auto => s.serialize_str("auto"),
            Iterations::Fixed(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Iterations {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(u32),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Iterations::Fixed(n)),
            Repr::Word(w) if w == "auto" => Ok(Iterations::Auto),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "iterations must be a positive integer or \"auto\", got {w:?}"
            ))),
        }
    }
}

impl std::str::FromStr for Iterations {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Iterations::Auto);
        }
        s.parse::<u32>()
            .map(Iterations::Fixed)
            .map_err(|_| format!("expected a positive integer or \"auto\", got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L∞ radius in pixel levels.
    pub epsilon: f32,
    /// Step size of the iterative methods, in pixel levels.
    pub alpha: f32,
    /// Momentum decay of MI-FGSM.
    pub mu: f32,
    pub iters: Iterations,
    pub mode: AttackMode,
    pub target_policy: TargetPolicy,
    pub seed: u64,
}

impl AttackConfig {
    /// Non-targeted attack with α = min(1, ε), μ = 1 and automatic iterations.
    pub fn new(method: AttackMethod, epsilon: f32) -> Self {
        Self {
            method,
            epsilon,
            alpha: epsilon.min(1.0),
            mu: 1.0,
            iters: Iterations::Auto,
            mode: AttackMode::NonTargeted,
            target_policy: TargetPolicy::RandomOther,
            seed: 0,
        }
    }

    pub fn targeted(mut self, policy: TargetPolicy) -> Self {
        self.mode = AttackMode::Targeted;
        self.target_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= PIXEL_MAX) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 255], got {}",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.alpha > self.epsilon {
            return Err(Error::Config(format!(
                "alpha {} exceeds epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "mu must be non-negative, got {}",
                self.mu
            )));
        }
        if self.iters == Iterations::Fixed(0) {
            return Err(Error::Config("iteration count must be positive".into()));
        }
        Ok(())
    }

    /// Number of gradient steps actually taken.
    pub fn resolved_iters(&self) -> Result<u32> {
        Ok(match (self.method, self.iters) {
            (AttackMethod::Fgsm, _) => 1,
            (_, Iterations::Fixed(n)) => n,
            (_, Iterations::Auto) => default_iters(self.epsilon)?,
        })
    }

    /// Copy with `iters` made explicit.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.iters = Iterations::Fixed(self.resolved_iters()?);
        Ok(out)
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&self.resolved()?)?;
        Ok(hex::encode(&Sha256::digest(&json)[..8]))
    }
}

/// `floor(min(ε + 4, 1.25 ε))`, at least 1.
pub fn default_iters(epsilon: f32) -> Result<u32> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let e = f64::from(epsilon);
    let n = (e + 4.0).min(1.25 * e).floor();
    Ok((n as u32).max(1))
}

/// Tightest `f32` interval inside `[max(0, x − ε), min(255, x + ε)]`.
fn ball_bounds(orig: f32, epsilon: f32) -> (f32, f32) {
    let lo64 = (f64::from(orig) - f64::from(epsilon)).max(0.0);
    let hi64 = (f64::from(orig) + f64::from(epsilon)).min(f64::from(PIXEL_MAX));
    let mut lo = lo64 as f32;
    if f64::from(lo) < lo64 {
        lo = lo.next_up();
    }
    let mut hi = hi64 as f32;
    if f64::from(hi) > hi64 {
        hi = hi.next_down();
    }
    (lo, hi)
}

/// Clamps every pixel into the ε-ball around the original and into `[0, 255]`.
pub fn clip_eps(adv: &[f32], orig: &[f32], epsilon: f32) -> Result<Vec<f32>> {
    if adv.len() != orig.len() {
        return Err(Error::DimensionMismatch {
            left: adv.len(),
            right: orig.len(),
        });
    }
    Ok(adv
        .iter()
        .zip(orig)
        .map(|(&a, &o)| {
            let (lo, hi) = ball_bounds(o, epsilon);
            a.clamp(lo, hi)
        })
        .collect())
}

/// Largest `|adv − orig|`, in `f64`.
pub fn linf_distance(adv: &[f32], orig: &[f32]) -> f64 {
    adv.iter()
        .zip(orig)
        .map(|(a, o)| (f64::from(*a) - f64::from(*o)).abs())
        .fold(0.0, f64::max)
}

/// Whether `adv` lies within ε (+1e-6) of `orig` and inside `[0, 255]`.
pub fn within_ball(adv: &[f32], orig: &[f32], epsilon: f32) -> bool {
    adv.len() == orig.len()
        && adv.iter().all(|&v| (0.0..=PIXEL_MAX).contains(&v))
        && linf_distance(adv, orig) <= f64::from(epsilon) + BALL_SLACK
}

fn sign(v: f64) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A perturbed image and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub original: ImageRecord,
    /// Perturbed pixels as floats in `[0, 255]`.
    pub adversarial: Vec<f32>,
    pub config: AttackConfig,
    /// Indices (into the reference set the attack was given) of the images
    /// whose features defined the objective.
    pub reference_ids: Vec<usize>,
    /// Identity pulled towards by a targeted attack.
    pub target_identity: Option<u32>,
    /// False when the image was passed through unmodified.
    pub attacked: bool,
    pub loss_before: f32,
    pub loss_after: f32,
    /// Objective value at each iterate before its update.
    pub loss_trajectory: Vec<f32>,
}

impl AdversarialExample {
    fn passthrough(original: &ImageRecord, config: &AttackConfig) -> Self {
        Self {
            original: original.clone(),
            adversarial: original.pixels_f32(),
            config: config.clone(),
            reference_ids: Vec::new(),
            target_identity: None,
            attacked: false,
            loss_before: f32::NAN,
            loss_after: f32::NAN,
            loss_trajectory: Vec::new(),
        }
    }

    pub fn satisfies_ball(&self) -> bool {
        within_ball(
            &self.adversarial,
            &self.original.pixels_f32(),
            self.config.epsilon,
        )
    }
}

/// Result of attacking raw pixels against an explicit reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Vec<f32>,
    pub loss_before: f32,
    pub loss_after: f32,
    pub loss_trajectory: Vec<f32>,
}

/// Runs `config.method` on `pixels` with the given objective.
pub fn run_attack(
    objective: &AttackObjective,
    pixels: &[f32],
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    let (steps, step) = match config.method {
        AttackMethod::Fgsm => (1, config.epsilon),
        AttackMethod::IFgsm | AttackMethod::MiFgsm => (config.resolved_iters()?, config.alpha),
    };
    let direction: f32 = match config.mode {
        AttackMode::NonTargeted => 1.0,
        AttackMode::Targeted => -1.0,
    };
    let delta = direction * step;
    let use_momentum = config.method == AttackMethod::MiFgsm;
    let mu = f64::from(config.mu);

    let mut x = pixels.to_vec();
    let mut momentum = vec![0.0f64; x.len()];
    let mut trajectory = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let lg = objective.value_and_grad(&x)?;
        trajectory.push(lg.loss);
        let stepped: Vec<f32> = if use_momentum {
            let l1: f64 = lg.grad.iter().map(|g| f64::from(*g).abs()).sum();
            for (m, g) in momentum.iter_mut().zip(&lg.grad) {
                let increment = if l1 < MOMENTUM_NORM_FLOOR {
                    0.0
                } else {
                    f64::from(*g) / l1
                };
                *m = mu * *m + increment;
            }
            x.iter()
                .zip(&momentum)
                .map(|(&v, &m)| v + delta * sign(m))
                .collect()
        } else {
            x.iter()
                .zip(&lg.grad)
                .map(|(&v, &g)| v + delta * sign(f64::from(g)))
                .collect()
        };
        x = clip_eps(&stepped, pixels, config.epsilon)?;
    }
    let loss_after = objective.value(&x)?;
    Ok(AttackOutcome {
        adversarial: x,
        loss_before: trajectory.first().copied().unwrap_or(loss_after),
        loss_after,
        loss_trajectory: trajectory,
    })
}

/// Attack of raw pixels towards/away from explicit reference images.
pub fn attack_with_references(
    models: &[&dyn FeatureModel],
    metric: &MetricSpec,
    references: &[&[f32]],
    pixels: &[f32],
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    let objective = AttackObjective::new(models, metric, references)?;
    run_attack(&objective, pixels, config)
}

fn image_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Identity whose probes serve as references, or `None` when the image must
/// be passed through (targeted attack on the fixed target's own identity).
fn reference_identity(
    probe_ids: &BTreeSet<u32>,
    identity: u32,
    config: &AttackConfig,
    salt: u64,
) -> Result<Option<u32>> {
    match config.mode {
        AttackMode::NonTargeted => {
            if probe_ids.contains(&identity) {
                Ok(Some(identity))
            } else {
                Err(Error::MissingProbeIdentity(identity))
            }
        }
        AttackMode::Targeted => match config.target_policy {
            TargetPolicy::FixedIdentity(t) => {
                if !probe_ids.contains(&t) {
                    Err(Error::MissingProbeIdentity(t))
                } else if t == identity {
                    Ok(None)
                } else {
                    Ok(Some(t))
                }
            }
            TargetPolicy::RandomOther => {
                let others: Vec<u32> = probe_ids
                    .iter()
                    .copied()
                    .filter(|&id| id != identity)
                    .collect();
                if others.is_empty() {
                    return Err(Error::Invalid(format!(
                        "targeted attack on identity {identity} needs probes of another identity"
                    )));
                }
                let mut rng = image_rng(config.seed, salt);
                Ok(others.choose(&mut rng).copied())
            }
        },
    }
}

fn attack_image(
    models: &[&dyn FeatureModel],
    metric: &MetricSpec,
    probes: &[ImageRecord],
    gallery_image: &ImageRecord,
    config: &AttackConfig,
    expected: AttackMethod,
) -> Result<AdversarialExample> {
    if config.method != expected {
        return Err(Error::Config(format!(
            "{expected} called with a {} configuration",
            config.method
        )));
    }
    config.validate()?;
    let probe_ids: BTreeSet<u32> = probes.iter().map(|p| p.identity).collect();
    let Some(target) = reference_identity(&probe_ids, gallery_image.identity, config, 0)? else {
        return Err(Error::Invalid(format!(
            "targeted attack towards identity {} applied to an image of that identity",
            gallery_image.identity
        )));
    };
    let reference_ids: Vec<usize> = probes
        .iter()
        .enumerate()
        .filter(|(_, p)| p.identity == target)
        .map(|(i, _)| i)
        .collect();
    let ref_pixels: Vec<Vec<f32>> = reference_ids
        .iter()
        .map(|&i| probes[i].pixels_f32())
        .collect();
    let refs: Vec<&[f32]> = ref_pixels.iter().map(Vec::as_slice).collect();
    let outcome =
        attack_with_references(models, metric, &refs, &gallery_image.pixels_f32(), config)?;
    Ok(AdversarialExample {
        original: gallery_image.clone(),
        adversarial: outcome.adversarial,
        config: config.clone(),
        reference_ids,
        target_identity: (config.mode == AttackMode::Targeted).then_some(target),
        attacked: true,
        loss_before: outcome.loss_before,
        loss_after: outcome.loss_after,
        loss_trajectory: outcome.loss_trajectory,
    })
}

/// Single-step attack of one gallery image.
pub fn fgsm(
    models: &[&dyn FeatureModel],
    metric: &MetricSpec,
    probes: &[ImageRecord],
    gallery_image: &ImageRecord,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    attack_image(
        models,
        metric,
        probes,
        gallery_image,
        config,
        AttackMethod::Fgsm,
    )
}

/// Iterative attack of one gallery image.
pub fn i_fgsm(
    models: &[&dyn FeatureModel],
    metric: &MetricSpec,
    probes: &[ImageRecord],
    gallery_image: &ImageRecord,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    attack_image(
        models,
        metric,
        probes,
        gallery_image,
        config,
        AttackMethod::IFgsm,
    )
}

/// Momentum iterative attack of one gallery image.
pub fn mi_fgsm(
    models: &[&dyn FeatureModel],
    metric: &MetricSpec,
    probes: &[ImageRecord],
    gallery_image: &ImageRecord,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    attack_image(
        models,
        metric,
        probes,
        gallery_image,
        config,
        AttackMethod::MiFgsm,
    )
}

/// Builds the adversarial version of a gallery.
///
/// Non-targeted: every image is pushed away from all probes of its own
/// identity; images whose identity has no probe are passed through and marked
/// `attacked = false`. Targeted: every image is pulled towards all probes of
/// the identity chosen by the target policy. Images are attacked
/// independently (in parallel) and the output order matches the input.
pub fn attack_gallery(
    models: &[&dyn FeatureModel],
    metric: &MetricSpec,
    probe_set: &[ImageRecord],
    gallery_set: &[ImageRecord],
    config: &AttackConfig,
) -> Result<Vec<AdversarialExample>> {
    config.validate()?;
    if probe_set.is_empty() {
        return Err(Error::Invalid("attack needs a non-empty probe set".into()));
    }
    let probe_ids: BTreeSet<u32> = probe_set.iter().map(|p| p.identity).collect();
    if config.mode == AttackMode::Targeted && probe_ids.len() < 2 {
        return Err(Error::Invalid(
            "targeted attack needs at least two identities in the probe set".into(),
        ));
    }
    if let TargetPolicy::FixedIdentity(t) = config.target_policy {
        if config.mode == AttackMode::Targeted && !probe_ids.contains(&t) {
            return Err(Error::MissingProbeIdentity(t));
        }
    }

    let probes = ImageBatch::from_records(probe_set)?;
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, id) in probes.identities.iter().enumerate() {
        members.entry(*id).or_default().push(i);
    }
    let objectives: BTreeMap<u32, AttackObjective> = members
        .iter()
        .map(|(id, idx)| {
            let refs: Vec<&[f32]> = idx.iter().map(|&i| probes.image(i)).collect();
            Ok((*id, AttackObjective::new(models, metric, &refs)?))
        })
        .collect::<Result<_>>()?;

    gallery_set
        .par_iter()
        .enumerate()
        .map(|(index, image)| {
            let target = match reference_identity(&probe_ids, image.identity, config, index as u64)
            {
                Ok(Some(t)) => t,
                Ok(None) | Err(Error::MissingProbeIdentity(_)) => {
                    return Ok(AdversarialExample::passthrough(image, config));
                }
                Err(e) => return Err(e),
            };
            let outcome = run_attack(&objectives[&target], &image.pixels_f32(), config)?;
            Ok(AdversarialExample {
                original: image.clone(),
                adversarial: outcome.adversarial,
                config: config.clone(),
                reference_ids: members[&target].clone(),
                target_identity: (config.mode == AttackMode::Targeted).then_some(target),
                attacked: true,
                loss_before: outcome.loss_before,
                loss_after: outcome.loss_after,
                loss_trajectory: outcome.loss_trajectory,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_schedule() {
        assert_eq!(default_iters(5.0).unwrap(), 6);
        assert_eq!(default_iters(10.0).unwrap(), 12);
        assert_eq!(default_iters(0.5).unwrap(), 1);
        assert_eq!(default_iters(16.0).unwrap(), 20);
        assert!(default_iters(0.0).is_err());
        assert!(default_iters(-1.0).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_eps(&[107.0], &[100.0], 5.0).unwrap(), vec![105.0]);
        assert_eq!(clip_eps(&[260.0], &[254.0], 5.0).unwrap(), vec![255.0]);
        assert_eq!(clip_eps(&[-3.0], &[2.0], 5.0).unwrap(), vec![0.0]);
        assert_eq!(clip_eps(&[101.5], &[100.0], 5.0).unwrap(), vec![101.5]);
        assert!(clip_eps(&[1.0, 2.0], &[1.0], 5.0).is_err());
    }

    #[test]
    fn ball_bounds_never_exceed_epsilon() {
        for orig in [0.0f32, 1.0, 100.0, 200.0, 254.0, 255.0] {
            for eps in [1e-6f32, 0.3, 0.1, 2.7, 5.0] {
                let (lo, hi) = ball_bounds(orig, eps);
                assert!(f64::from(orig) - f64::from(lo) <= f64::from(eps));
                assert!(f64::from(hi) - f64::from(orig) <= f64::from(eps));
                assert!(lo <= hi);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(AttackMethod::IFgsm, 5.0)
            .validate()
            .is_ok());
        assert!(AttackConfig::new(AttackMethod::IFgsm, 0.0)
            .validate()
            .is_err());
        assert!(AttackConfig::new(AttackMethod::IFgsm, 300.0)
            .validate()
            .is_err());
        let mut c = AttackConfig::new(AttackMethod::IFgsm, 5.0);
        c.alpha = 6.0;
        assert!(c.validate().is_err());
        c.alpha = 1.0;
        c.iters = Iterations::Fixed(0);
        assert!(c.validate().is_err());
        assert_eq!(AttackConfig::new(AttackMethod::IFgsm, 0.5).alpha, 0.5);
    }

    #[test]
    fn iterations_serde() {
        assert_eq!(
            serde_json::to_string(&Iterations::Auto).unwrap(),
            "\"auto\""
        );
        assert_eq!(serde_json::to_string(&Iterations::Fixed(6)).unwrap(), "6");
        assert_eq!(
            serde_json::from_str::<Iterations>("\"auto\"").unwrap(),
            Iterations::Auto
        );
        assert_eq!(
            serde_json::from_str::<Iterations>("12").unwrap(),
            Iterations::Fixed(12)
        );
        assert!(serde_json::from_str::<Iterations>("\"many\"").is_err());
    }

    #[test]
    fn hash_depends_on_resolved_iterations() {
        let auto = AttackConfig::new(AttackMethod::IFgsm, 5.0);
        let mut fixed = auto.clone();
        fixed.iters = Iterations::Fixed(6);
        assert_eq!(auto.hash().unwrap(), fixed.hash().unwrap());
        fixed.iters = Iterations::Fixed(7);
        assert_ne!(auto.hash().unwrap(), fixed.hash().unwrap());
    }
}
