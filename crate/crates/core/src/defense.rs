//! Metric-preserving training: attack every training image against the
//! clean model, then retrain on the clean and adversarial images together.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AdversarialExample, AttackConfig, AttackMode};
use crate::data::{ImageBatch, ImageRecord};
use crate::embedder::{
    init_model, train_cross_entropy, train_triplet, FeatureModel, ModelParams, TrainHyper,
    TrainReport, TrainingLoss,
};
use crate::error::{Error, Result};
use crate::metrics::{AttackObjective, MetricSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Train on `Y ∪ Y_adv` with each adversarial image labelled like its source.
    #[default]
    Union,
}

/// Where retraining starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainInit {
    /// Continue from the clean model's weights.
    #[default]
    CleanWeights,
    /// A new initialization seeded by `retrain_hyper.seed`.
    Fresh,
}

#[derive(Debug, Clone)]
pub struct DefensePlan {
    pub clean_model: ModelParams,
    pub attack_cfg: AttackConfig,
    /// Hyperparameters of the retraining run; `seed` also seeds a fresh
    /// initialization.
    pub retrain_hyper: TrainHyper,
    pub merge_mode: MergeMode,
    pub init: RetrainInit,
}

impl DefensePlan {
    pub fn new(
        clean_model: ModelParams,
        attack_cfg: AttackConfig,
        retrain_hyper: TrainHyper,
    ) -> Self {
        Self {
            clean_model,
            attack_cfg,
            retrain_hyper,
            merge_mode: MergeMode::Union,
            init: RetrainInit::CleanWeights,
        }
    }

    pub fn with_init(mut self, init: RetrainInit) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.attack_cfg.mode != AttackMode::NonTargeted {
            return Err(Error::Config("defense attacks must be non-targeted".into()));
        }
        self.attack_cfg.validate()?;
        self.retrain_hyper.validate()
    }
}

/// Attacks every training image, using the other training images of its
/// identity as references. Output order matches `train`.
pub fn generate_adv_training_set(
    model: &ModelParams,
    metric: &MetricSpec,
    train: &[ImageRecord],
    attack_cfg: &AttackConfig,
) -> Result<Vec<AdversarialExample>> {
    attack_cfg.validate()?;
    if attack_cfg.mode != AttackMode::NonTargeted {
        return Err(Error::Config("defense attacks must be non-targeted".into()));
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in train.iter().enumerate() {
        members.entry(r.identity).or_default().push(i);
    }
    let single: Vec<u32> = members
        .iter()
        .filter(|(_, idx)| idx.len() < 2)
        .map(|(id, _)| *id)
        .collect();
    if !single.is_empty() {
        return Err(Error::TooFewImages {
            required: 2,
            identities: single,
        });
    }

    let batch = ImageBatch::from_records(train)?;
    let models: [&dyn FeatureModel; 1] = [model];
    train
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            let reference_ids: Vec<usize> = members[&record.identity]
                .iter()
                .copied()
                .filter(|&j| j != index)
                .collect();
            let refs: Vec<&[f32]> = reference_ids.iter().map(|&j| batch.image(j)).collect();
            let objective = AttackObjective::new(&models, metric, &refs)?;
            let outcome = run_attack(&objective, batch.image(index), attack_cfg)?;
            Ok(AdversarialExample {
                original: record.clone(),
                adversarial: outcome.adversarial,
                config: attack_cfg.clone(),
                reference_ids,
                target_identity: None,
                attacked: true,
                loss_before: outcome.loss_before,
                loss_after: outcome.loss_after,
                loss_trajectory: outcome.loss_trajectory,
            })
        })
        .collect()
}

/// `Y ∪ Y_adv` as one batch; adversarial images keep their source labels.
pub fn merge_union(
    train: &[ImageRecord],
    adversarial: &[AdversarialExample],
) -> Result<ImageBatch> {
    if train.len() != adversarial.len() {
        return Err(Error::DimensionMismatch {
            left: train.len(),
            right: adversarial.len(),
        });
    }
    if let Some(i) = train
        .iter()
        .zip(adversarial)
        .position(|(r, a)| r.identity != a.original.identity)
    {
        return Err(Error::Invalid(format!(
            "adversarial image {i} is labelled {} but its source is {}",
            adversarial[i].original.identity, train[i].identity
        )));
    }
    ImageBatch::from_records(train)?.concat(&ImageBatch::from_adversarial(adversarial)?)
}

/// Retrains a model of the clean model's architecture and loss on
/// `Y ∪ Y_adv`, starting from the point chosen by `plan.init`.
pub fn train_metric_preserving(
    plan: &DefensePlan,
    train: &[ImageRecord],
    adversarial: &[AdversarialExample],
) -> Result<TrainReport> {
    plan.validate()?;
    let union = match plan.merge_mode {
        MergeMode::Union => merge_union(train, adversarial)?,
    };
    let labels = union.class_labels();
    let config = &plan.clean_model.config;
    if plan.clean_model.training_loss == TrainingLoss::CrossEntropy
        && labels.num_classes() != config.num_classes
    {
        return Err(Error::Config(format!(
            "clean model has {} classes but the training set has {} identities",
            config.num_classes,
            labels.num_classes()
        )));
    }
    let start = match plan.init {
        RetrainInit::CleanWeights => plan.clean_model.clone(),
        RetrainInit::Fresh => init_model(config, plan.retrain_hyper.seed)?,
    };
    match plan.clean_model.training_loss {
        TrainingLoss::CrossEntropy => {
            train_cross_entropy(&start, &union, &labels.labels, &plan.retrain_hyper)
        }
        TrainingLoss::Triplet => train_triplet(&start, &union, &labels.labels, &plan.retrain_hyper),
    }
}

/// Steps 2 to 4 in one call: generate `Y_adv` against the clean model, then
/// retrain.
pub fn run_defense(
    plan: &DefensePlan,
    metric: &MetricSpec,
    train: &[ImageRecord],
) -> Result<(Vec<AdversarialExample>, TrainReport)> {
    plan.validate()?;
    let adversarial =
        generate_adv_training_set(&plan.clean_model, metric, train, &plan.attack_cfg)?;
    let report = train_metric_preserving(plan, train, &adversarial)?;
    Ok((adversarial, report))
}
