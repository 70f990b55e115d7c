//! Deterministic mini-batch training with Adam, step learning-rate decay,
//! pose-noise augmentation and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{apply_noise, choose_exact, occlude, OcclusionScheme};
use crate::autodiff::Graph;
use crate::backbone::{Family, Model, SceneInput};
use crate::error::{Error, Result};
use crate::metrics::ade;
use crate::nn::Adam;
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseAugment {
    Off,
    Gaussian { std: f64, fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial learning rate; `None` picks the family default.
    pub lr: Option<f64>,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub noise_augment: NoiseAugment,
    /// Fraction of each batch whose agents lose a random limb, redrawn
    /// every step.
    pub occlusion_augment: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Feed ground-truth previous displacements to the decoder.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: None,
            lr_decay: 0.5,
            decay_every: 10,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            noise_augment: NoiseAugment::Off,
            occlusion_augment: 0.0,
            patience: 10,
            grad_clip: 5.0,
            teacher_forcing: false,
        }
    }
}

impl TrainConfig {
    pub fn initial_lr(&self, family: Family) -> f64 {
        self.lr.unwrap_or(match family {
            Family::Attention => 7.5e-4,
            Family::Recurrent | Family::Mlp => 1e-3,
        })
    }

    pub fn lr_at(&self, family: Family, epoch: usize) -> f64 {
        let steps = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.initial_lr(family) * self.lr_decay.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: &str| Err(Error::Config { key: format!("train.{key}"), message: message.into() });
        if let Some(lr) = self.lr {
            if !(lr > 0.0) {
                return err("lr", "must be positive");
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return err("lr_decay", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1");
        }
        if let NoiseAugment::Gaussian { std, fraction } = self.noise_augment {
            if !(std >= 0.0) {
                return err("noise_augment.std", "must be non-negative");
            }
            if !(0.0..=1.0).contains(&fraction) {
                return err("noise_augment.fraction", "must lie in [0, 1]");
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_augment) {
            return err("occlusion_augment", "must lie in [0, 1]");
        }
        if !(self.grad_clip >= 0.0) {
            return err("grad_clip", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ade: Option<f64>,
    /// Scenes whose pose was perturbed this epoch.
    pub noisy_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds at the end.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_ade,noisy_scenes\n");
        for r in &self.epochs {
            let val = r.val_ade.map_or(String::new(), |v| format!("{v}"));
            out += &format!("{},{},{},{},{}\n", r.epoch, r.lr, r.train_loss, val, r.noisy_scenes);
        }
        out
    }
}

/// Mean single-sample ADE of a model over prepared inputs.
pub fn mean_ade(model: &Model, inputs: &[SceneInput]) -> Result<f64> {
    let mut total = 0.0;
    for input in inputs {
        let pred = model.predict_input(input, 1)?;
        let gt: Vec<[f64; 2]> = (0..input.target_rel.rows)
            .map(|t| [input.anchor[0] + input.target_rel.get(t, 0), input.anchor[1] + input.target_rel.get(t, 1)])
            .collect();
        total += ade(&pred.samples[0], &gt)?;
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Trains `model` in place on `train`; `val` drives early stopping and the
/// choice of the returned parameters. `on_epoch` runs after every epoch.
pub fn train(
    model: &mut Model,
    train: &[Scene],
    val: Option<&[Scene]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let clean: Vec<SceneInput> = train.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let val_inputs: Option<Vec<SceneInput>> = match val {
        Some(v) if !v.is_empty() => Some(v.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?),
        _ => None,
    };
    let family = model.cfg.backbone.family;
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(family, epoch);
        let mut loss_sum = 0.0;
        let mut noisy = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let pose_on = model.cfg.pose_enabled();
            let noise_pick = match cfg.noise_augment {
                NoiseAugment::Gaussian { std, fraction } if pose_on => Some((std, choose_exact(batch.len(), fraction, &mut rng))),
                _ => None,
            };
            let occl_pick = (pose_on && cfg.occlusion_augment > 0.0)
                .then(|| choose_exact(batch.len(), cfg.occlusion_augment, &mut rng));
            let mut perturbed = Vec::new();
            for (slot, &i) in batch.iter().enumerate() {
                let mut scene = None;
                if let Some((std, chosen)) = &noise_pick {
                    if chosen[slot] {
                        let seed = rand::Rng::random::<u64>(&mut rng);
                        scene = Some(apply_noise(&train[i], *std, seed));
                    }
                }
                if occl_pick.as_ref().is_some_and(|c| c[slot]) {
                    let seed = rand::Rng::random::<u64>(&mut rng);
                    scene = Some(occlude(scene.as_ref().unwrap_or(&train[i]), OcclusionScheme::RandomLimb50, seed));
                }
                if let Some(s) = scene {
                    perturbed.push((slot, model.prepare(&s)?));
                }
            }
            noisy += perturbed.len();
            let mut grads = model.store.zero_grads();
            let mut batch_loss = 0.0;
            for (slot, &i) in batch.iter().enumerate() {
                let input = perturbed.iter().find(|(s, _)| *s == slot).map_or(&clean[i], |(_, p)| p);
                let mut g = Graph::new(&model.store);
                let loss = model.loss(&mut g, input, cfg.teacher_forcing)?;
                let value = g.value(loss).data[0];
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                batch_loss += value;
                grads.add_assign(&g.backward(loss).params);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            adam.step(&mut model.store, &grads, lr);
            loss_sum += batch_loss;
        }
        let val_ade = match &val_inputs {
            Some(v) => Some(mean_ade(model, v)?),
            None => None,
        };
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / train.len() as f64, val_ade, noisy_scenes: noisy };
        log::debug!("epoch {epoch}: loss {:.5} val {:?}", record.train_loss, record.val_ade);
        on_epoch(&record, model)?;
        records.push(record);
        if let Some(v) = val_ade {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => records.len().saturating_sub(1),
    };
    Ok(TrainOutcome { epochs: records, best_epoch, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, BackboneConfig, Interaction, ModelConfig};
    use crate::synth::{generate_corpus, GaitModel, WorldConfig};

    fn tiny(family: Family, seed: u64) -> Model {
        let b = BackboneConfig {
            family,
            traj_embed_dim: 8,
            hidden_dim: 8,
            interaction: Interaction::None,
            interaction_dim: 4,
            layers: 1,
            heads: 2,
            noise_dim: 2,
            ..Default::default()
        };
        build_model(&ModelConfig::new(b, None, seed)).unwrap()
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(Family::Attention, 0), 7.5e-4);
        assert_eq!(c.lr_at(Family::Attention, 10), 3.75e-4);
        assert_eq!(c.lr_at(Family::Mlp, 25), 2.5e-4);
        assert!(TrainConfig { noise_augment: NoiseAugment::Gaussian { std: 0.1, fraction: 1.5 }, ..c.clone() }
            .validate()
            .is_err());
        assert!(TrainConfig { lr: Some(0.0), ..c }.validate().is_err());
    }

    #[test]
    fn same_seed_same_curve() {
        let scenes = generate_corpus(&WorldConfig { seed: 1, ..Default::default() }, &GaitModel::default(), 12).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 5, seed: 9, ..Default::default() };
        let mut a = tiny(Family::Recurrent, 1);
        let mut b = tiny(Family::Recurrent, 1);
        let ra = train(&mut a, &scenes, Some(&scenes[..4]), &cfg, |_, _| Ok(())).unwrap();
        let rb = train(&mut b, &scenes, Some(&scenes[..4]), &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.store, b.store);
        assert!(ra.loss_csv().starts_with("epoch,lr,train_loss"));
        assert_eq!(ra.loss_csv().lines().count(), 4);
    }

    #[test]
    fn memorizes_one_scene() {
        let scene = generate_corpus(&WorldConfig { seed: 5, ..Default::default() }, &GaitModel::default(), 1).unwrap();
        let mut model = tiny(Family::Mlp, 2);
        let cfg = TrainConfig { epochs: 500, batch_size: 1, lr: Some(3e-3), decay_every: 200, ..Default::default() };
        train(&mut model, &scene, None, &cfg, |_, _| Ok(())).unwrap();
        let input = model.prepare(&scene[0]).unwrap();
        let err = mean_ade(&model, &[input]).unwrap();
        assert!(err < 0.05, "training ADE {err}");
    }

    #[test]
    fn noise_perturbs_exactly_the_configured_share() {
        let scenes = generate_corpus(&WorldConfig { seed: 1, ..Default::default() }, &GaitModel::default(), 10).unwrap();
        let b = BackboneConfig {
            family: Family::Mlp,
            traj_embed_dim: 4,
            hidden_dim: 4,
            interaction: Interaction::None,
            interaction_dim: 2,
            noise_dim: 0,
            ..Default::default()
        };
        let pose = crate::pose_encoder::PoseEncoderConfig {
            dim: 4,
            n_heads: 1,
            n_layers: 1,
            ff_hidden: 4,
            tokenization: crate::pose_encoder::Tokenization::PerFrame,
            ..Default::default()
        };
        let mut model = build_model(&ModelConfig::new(b, Some(pose), 0)).unwrap();
        // batches of 4, 4, 2: ⌈0.5·4⌉ + ⌈0.5·4⌉ + ⌈0.5·2⌉ = 5
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            noise_augment: NoiseAugment::Gaussian { std: 0.1, fraction: 0.5 },
            ..Default::default()
        };
        let out = train(&mut model, &scenes, None, &cfg, |_, _| Ok(())).unwrap();
        assert!(out.epochs.iter().all(|r| r.noisy_scenes == 5));
    }

    #[test]
    fn early_stopping_and_divergence() {
        let scenes = generate_corpus(&WorldConfig { seed: 1, ..Default::default() }, &GaitModel::default(), 6).unwrap();
        let mut model = tiny(Family::Mlp, 3);
        let cfg = TrainConfig { epochs: 50, batch_size: 6, lr: Some(1e-9), patience: 2, lr_decay: 1.0, ..Default::default() };
        let out = train(&mut model, &scenes, Some(&scenes), &cfg, |_, _| Ok(())).unwrap();
        assert!(out.epochs.len() < 50 || !out.stopped_early);

        let mut model = tiny(Family::Mlp, 3);
        let w = model.store.values_mut();
        // output bias, so no activation can mask it
        w.last_mut().unwrap().data[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(
            train(&mut model, &scenes, None, &cfg, |_, _| Ok(())),
            Err(Error::Diverged { epoch: 0, step: 0 })
        ));
    }
}
