//! Training: trajectory grouping, the forward / bidirectional / variational
//! objectives, and the two-phase schedule (spatial autoencoder pre-training,
//! then the full objective end to end).

use std::str::FromStr;

use crate::codec::{
    decode_group_t, encode_group_t, encode_variational_t, kl_to_standard_normal_t, reparametrize_t,
    spatial_decode_t, spatial_encode_t, FrameGroup,
};
use crate::data::{Split, TrajectoryBundle};
use crate::dynamics::{pure_frame_step_t, recurrent_rollout_t, rollout_t, BackboneKind, OdeTapeField};
use crate::error::{Error, Result};
use crate::metrics::spatial_correlation;
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::rng::SplitRng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Training objective over a grouped trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// All `G` reconstruction terms, including the input group.
    Forward,
    /// The interior group `t = 2` is left out of the loss and interpolated
    /// at test time; requires exactly 4 groups.
    Bidirectional,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Forward => "forward",
            Objective::Bidirectional => "bidirectional",
        }
    }

    /// Whether group `t`'s reconstruction contributes to the loss.
    fn term_included(&self, t: usize) -> bool {
        !(matches!(self, Objective::Bidirectional) && t == 2)
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Objective::Forward),
            "bidirectional" => Ok(Objective::Bidirectional),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub variational: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub kl_weight: f64,
    /// Spatial pre-training epochs; defaults to a quarter of the total.
    pub phase1_epochs: Option<usize>,
    /// Keep every k-th frame before grouping.
    pub downsample: usize,
    /// Optional max-norm clip on the summed batch gradient.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Forward,
            variational: false,
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            seed: 0,
            kl_weight: 1.0,
            phase1_epochs: None,
            downsample: 1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample factor must be >= 1".into()));
        }
        if let Some(p1) = self.phase1_epochs {
            if p1 > self.epochs {
                return Err(Error::Config(format!(
                    "phase1_epochs {p1} exceeds total epochs {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
        }
    }

    fn phase1(&self) -> usize {
        self.phase1_epochs.unwrap_or(self.epochs / 4)
    }
}

/// One subject's grouped frames, produced by [`group_trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSubject {
    subject_id: u32,
    groups: Vec<FrameGroup>,
    trait_targets: Option<Vec<f64>>,
}

impl GroupedSubject {
    pub fn subject_id(&self) -> u32 {
        self.subject_id
    }

    pub fn groups(&self) -> &[FrameGroup] {
        &self.groups
    }

    pub fn trait_targets(&self) -> Option<&[f64]> {
        self.trait_targets.as_deref()
    }

    pub fn with_subject_id(mut self, id: u32) -> GroupedSubject {
        self.subject_id = id;
        for g in &mut self.groups {
            g.subject_id = id;
        }
        self
    }

    pub fn with_traits(mut self, traits: Vec<f64>) -> GroupedSubject {
        self.trait_targets = Some(traits);
        self
    }
}

/// Keeps every `downsample`-th frame starting at index 0, truncates to
/// `groups * group_len`, and splits consecutively.
pub fn group_trajectory(
    frames: &[Tensor],
    downsample: usize,
    groups: usize,
    group_len: usize,
) -> Result<GroupedSubject> {
    if downsample == 0 || groups == 0 || group_len == 0 {
        return Err(Error::Config(
            "group_trajectory needs positive downsample, groups and group_len".into(),
        ));
    }
    let required = downsample * groups * group_len;
    if frames.len() < required {
        return Err(Error::Length {
            context: format!("group_trajectory(k={downsample}, G={groups}, T={group_len})"),
            required,
            got: frames.len(),
        });
    }
    let kept: Vec<Tensor> = frames
        .iter()
        .step_by(downsample)
        .take(groups * group_len)
        .cloned()
        .collect();
    let shape = kept[0].shape().to_vec();
    for f in &kept {
        if f.shape() != shape {
            return Err(Error::dim(
                "group_trajectory",
                format!("{shape:?}"),
                format!("{:?}", f.shape()),
            ));
        }
    }
    let groups_vec: Vec<FrameGroup> = kept
        .chunks_exact(group_len)
        .enumerate()
        .map(|(g, chunk)| FrameGroup::new(chunk.to_vec()).with_ids(0, g))
        .collect();
    Ok(GroupedSubject {
        subject_id: 0,
        groups: groups_vec,
        trait_targets: None,
    })
}

/// Loss value plus the decoded prediction vars of one grouped forward pass.
pub struct GroupedLoss {
    pub total: Var,
    pub kl: Option<Var>,
    /// One concatenated `T*H*W` var per group.
    pub decoded: Vec<Var>,
    /// Latent state at each group time (full, including augmentation).
    pub latents: Vec<Var>,
}

/// Builds the grouped objective on a tape: encode group 0, roll the latent
/// forward, decode every group, and sum the per-group reconstruction errors
/// (plus the weighted KL term under a variational codec).
///
/// Under a variational codec, `vae_eps` supplies the reparametrization draw;
/// passing `None` evaluates the deterministic mean path.
pub fn grouped_objective_t(
    tape: &mut Tape,
    subject: &GroupedSubject,
    params: &ParamSet,
    model: &ModelConfig,
    objective: Objective,
    kl_weight: f64,
    vae_eps: Option<&Tensor>,
) -> Result<GroupedLoss> {
    let cfg = &model.codec;
    let g = model.groups;
    if subject.groups().len() != g {
        return Err(Error::dim(
            "grouped_objective",
            format!("{g} groups"),
            format!("{}", subject.groups().len()),
        ));
    }
    if matches!(objective, Objective::Bidirectional) && g != 4 {
        return Err(Error::Config(format!(
            "bidirectional objective requires exactly 4 groups, got {g}"
        )));
    }

    let input_frames: Vec<Var> = subject.groups()[0]
        .frames
        .iter()
        .map(|f| tape.constant(f.reshape(vec![cfg.frame_len()]).expect("frame size")))
        .collect();

    let (z0, kl) = if cfg.variational {
        let (mu, logvar) = encode_variational_t(tape, params, cfg, &input_frames)?;
        let z = match vae_eps {
            Some(eps) => reparametrize_t(tape, mu, logvar, eps)?,
            None => mu,
        };
        let kl = kl_to_standard_normal_t(tape, mu, logvar)?;
        (z, Some(kl))
    } else {
        (encode_group_t(tape, params, cfg, &input_frames)?, None)
    };

    let latents = match model.backbone {
        BackboneKind::Ode => {
            let field = OdeTapeField {
                params,
                spec: model.ode,
                mode: model.solver.augment_mode,
            };
            let start = if field.state_dim() > cfg.latent_dim {
                let zeros = tape.constant(Tensor::zeros(vec![field.state_dim() - cfg.latent_dim]));
                tape.concat(&[z0, zeros])?
            } else {
                z0
            };
            rollout_t(tape, &field, start, g, &model.solver)?
        }
        BackboneKind::LatentRnn => recurrent_rollout_t(tape, params, model.cell, z0, g)?,
        BackboneKind::PureRnn => {
            return Err(Error::Config(
                "grouped objective does not apply to the pure-rnn backbone".into(),
            ))
        }
    };

    let mut decoded = Vec::with_capacity(g);
    let mut total: Option<Var> = None;
    for (t, &state) in latents.iter().enumerate() {
        let core = if tape.value(state).len() > cfg.latent_dim {
            tape.slice(state, 0, cfg.latent_dim)?
        } else {
            state
        };
        let frames = decode_group_t(tape, params, cfg, core)?;
        let pred = tape.concat(&frames)?;
        decoded.push(pred);

        if objective.term_included(t) {
            let truth_data: Vec<f64> = subject.groups()[t]
                .frames
                .iter()
                .flat_map(|f| f.data().iter().copied())
                .collect();
            let n = truth_data.len();
            let truth = tape.constant(Tensor::new_unchecked(vec![n], truth_data));
            let term = tape.mse(pred, truth)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let mut total = total.expect("at least one loss term");
    if let Some(kl_var) = kl {
        let weighted = tape.scale(kl_var, kl_weight);
        total = tape.add(total, weighted)?;
    }
    Ok(GroupedLoss {
        total,
        kl,
        decoded,
        latents,
    })
}

/// Forward objective value: all `G` reconstruction terms (plus weighted KL
/// under a variational codec, with the draw taken from `vae_rng`).
pub fn forward_loss(
    subject: &GroupedSubject,
    params: &ParamSet,
    model: &ModelConfig,
    kl_weight: f64,
    vae_rng: Option<&mut SplitRng>,
) -> Result<f64> {
    objective_loss(subject, params, model, Objective::Forward, kl_weight, vae_rng)
}

/// Bidirectional objective value: the `t = 2` term is omitted.
pub fn bidirectional_loss(
    subject: &GroupedSubject,
    params: &ParamSet,
    model: &ModelConfig,
    kl_weight: f64,
    vae_rng: Option<&mut SplitRng>,
) -> Result<f64> {
    objective_loss(subject, params, model, Objective::Bidirectional, kl_weight, vae_rng)
}

fn objective_loss(
    subject: &GroupedSubject,
    params: &ParamSet,
    model: &ModelConfig,
    objective: Objective,
    kl_weight: f64,
    vae_rng: Option<&mut SplitRng>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let eps = match (model.codec.variational, vae_rng) {
        (true, Some(rng)) => Some(Tensor::new_unchecked(
            vec![model.codec.latent_dim],
            rng.normal_vec(model.codec.latent_dim),
        )),
        _ => None,
    };
    let loss = grouped_objective_t(
        &mut tape,
        subject,
        params,
        model,
        objective,
        kl_weight,
        eps.as_ref(),
    )?;
    let v = tape.value(loss.total).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// One-step-ahead per-frame objective for the pure-rnn baseline: the mean
/// over consecutive frame pairs of the prediction error.
pub fn pure_rnn_objective_t(
    tape: &mut Tape,
    frames: &[Tensor],
    params: &ParamSet,
    model: &ModelConfig,
) -> Result<Var> {
    if frames.len() < 2 {
        return Err(Error::Length {
            context: "pure_rnn_objective".into(),
            required: 2,
            got: frames.len(),
        });
    }
    let cfg = &model.codec;
    let mut terms = Vec::with_capacity(frames.len() - 1);
    for pair in frames.windows(2) {
        let x = tape.constant(pair[0].reshape(vec![cfg.frame_len()])?);
        let y = tape.constant(pair[1].reshape(vec![cfg.frame_len()])?);
        let pred = pure_frame_step_t(tape, params, cfg, model.cell, x)?;
        terms.push(tape.mse(pred, y)?);
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.mean(stacked))
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub loss: f64,
    pub mean_spatial_correlation: Option<f64>,
}

/// Loss history as CSV: `epoch,phase,loss,mean_spatial_correlation`.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,phase,loss,mean_spatial_correlation\n");
    for r in history {
        let corr = r.mean_spatial_correlation.map_or(String::new(), |c| format!("{c}"));
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.phase, r.loss, corr));
    }
    out
}

/// Trained parameters plus the per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
}

struct TrainData {
    grouped: Vec<GroupedSubject>,
    /// Downsampled frame sequences for the pure-rnn baseline.
    sequences: Vec<Vec<Tensor>>,
}

fn prepare_train_data(bundle: &TrajectoryBundle, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainData> {
    let train_idx = bundle.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("bundle has no train split".into()));
    }
    let t = model.codec.group_len;
    let g = model.groups;
    let mut grouped = Vec::new();
    let mut sequences = Vec::new();
    for &i in &train_idx {
        let rec = &bundle.subjects[i];
        if model.backbone == BackboneKind::PureRnn {
            let kept: Vec<Tensor> = rec
                .frames
                .iter()
                .step_by(cfg.downsample)
                .take(g * t)
                .cloned()
                .collect();
            if kept.len() < 2 {
                return Err(Error::Length {
                    context: format!("pure-rnn frames for subject {i}"),
                    required: 2,
                    got: kept.len(),
                });
            }
            sequences.push(kept);
        } else {
            grouped.push(
                group_trajectory(&rec.frames, cfg.downsample, g, t)?
                    .with_subject_id(i as u32)
                    .with_traits(rec.traits.clone()),
            );
        }
    }
    Ok(TrainData { grouped, sequences })
}

/// Mean reconstruction correlation of the per-frame autoencoder (phase 1).
fn spatial_recon_correlation(frames: &[&Tensor], params: &ParamSet, model: &ModelConfig) -> Option<f64> {
    let cfg = &model.codec;
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in frames {
        let mut tape = Tape::new();
        let x = tape.constant(f.reshape(vec![cfg.frame_len()]).ok()?);
        let code = spatial_encode_t(&mut tape, params, cfg, x).ok()?;
        let recon = spatial_decode_t(&mut tape, params, cfg, code).ok()?;
        let recon_t = tape.value(recon).reshape(f.shape().to_vec()).ok()?;
        if let Ok(c) = spatial_correlation(&recon_t, f) {
            sum += c;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean forward-prediction correlation over predicted groups (phase 2).
fn prediction_correlation(data: &TrainData, params: &ParamSet, model: &ModelConfig) -> Option<f64> {
    let cfg = &model.codec;
    let mut sum = 0.0;
    let mut n = 0usize;
    if model.backbone == BackboneKind::PureRnn {
        for seq in &data.sequences {
            for pair in seq.windows(2) {
                let mut tape = Tape::new();
                let x = tape.constant(pair[0].reshape(vec![cfg.frame_len()]).ok()?);
                let pred = pure_frame_step_t(&mut tape, params, cfg, model.cell, x).ok()?;
                let pred_t = tape.value(pred).reshape(pair[1].shape().to_vec()).ok()?;
                if let Ok(c) = spatial_correlation(&pred_t, &pair[1]) {
                    sum += c;
                    n += 1;
                }
            }
        }
    } else {
        for subject in &data.grouped {
            let mut tape = Tape::new();
            let out = grouped_objective_t(
                &mut tape,
                subject,
                params,
                model,
                Objective::Forward,
                0.0,
                None,
            )
            .ok()?;
            for (t, &pred) in out.decoded.iter().enumerate().skip(1) {
                let pred_vals = tape.value(pred);
                for (f_idx, truth) in subject.groups()[t].frames.iter().enumerate() {
                    let lo = f_idx * cfg.frame_len();
                    let frame = Tensor::new_unchecked(
                        truth.shape().to_vec(),
                        pred_vals.data()[lo..lo + cfg.frame_len()].to_vec(),
                    );
                    if let Ok(c) = spatial_correlation(&frame, truth) {
                        sum += c;
                        n += 1;
                    }
                }
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn clip_gradients(grads: &mut Gradients, max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
}

/// Two-phase training over a bundle's train split. Phase 1 fits the spatial
/// stage as a per-frame autoencoder; phase 2 fits the full objective end to
/// end. Deterministic per seed: batch order, VAE draws and initialization
/// all derive from `cfg.seed`.
pub fn train(bundle: &TrajectoryBundle, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    model.validate()?;
    bundle.validate()?;
    if cfg.variational != model.codec.variational {
        return Err(Error::Config(format!(
            "train config variational={} disagrees with codec variational={}",
            cfg.variational, model.codec.variational
        )));
    }
    if matches!(cfg.objective, Objective::Bidirectional) && model.groups != 4 {
        return Err(Error::Config(
            "bidirectional objective requires exactly 4 groups".into(),
        ));
    }

    let data = prepare_train_data(bundle, model, cfg)?;
    let root = SplitRng::new(cfg.seed);
    let mut params = model.init_params(&mut root.derive(0xA))?;

    let n_subjects = if model.backbone == BackboneKind::PureRnn {
        data.sequences.len()
    } else {
        data.grouped.len()
    };
    let phase1_epochs = cfg.phase1();
    let mut history = Vec::with_capacity(cfg.epochs);

    // Phase 1: per-frame spatial autoencoder.
    let all_frames: Vec<&Tensor> = if model.backbone == BackboneKind::PureRnn {
        data.sequences.iter().flatten().collect()
    } else {
        data.grouped
            .iter()
            .flat_map(|s| s.groups().iter().flat_map(|g| g.frames.iter()))
            .collect()
    };
    let mut adam1 = AdamState::new(cfg.adam());
    for epoch in 0..phase1_epochs {
        let mut order: Vec<usize> = (0..n_subjects).collect();
        root.derive(0x51 ^ ((epoch as u64) << 8)).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::default();
            for &s in batch {
                let frames: Vec<&Tensor> = if model.backbone == BackboneKind::PureRnn {
                    data.sequences[s].iter().collect()
                } else {
                    data.grouped[s].groups().iter().flat_map(|g| g.frames.iter()).collect()
                };
                let mut tape = Tape::new();
                let mut terms = Vec::with_capacity(frames.len());
                for f in &frames {
                    let x = tape.constant(f.reshape(vec![model.codec.frame_len()])?);
                    let code = spatial_encode_t(&mut tape, &params, &model.codec, x)?;
                    let recon = spatial_decode_t(&mut tape, &params, &model.codec, code)?;
                    terms.push(tape.mse(recon, x)?);
                }
                let stacked = tape.concat(&terms)?;
                let loss = tape.mean(stacked);
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        where_: format!("phase 1, epoch {epoch}, subject {s}"),
                        detail: format!("loss is {value}"),
                    });
                }
                epoch_loss += value;
                seen += 1;
                grads.add_assign(&tape.backward(loss)?.param_grads())?;
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            adam1.step(&mut params, &grads)?;
        }
        history.push(EpochRecord {
            epoch,
            phase: 1,
            loss: epoch_loss / seen.max(1) as f64,
            mean_spatial_correlation: spatial_recon_correlation(&all_frames, &params, model),
        });
    }

    // Phase 2: full objective.
    let mut adam2 = AdamState::new(cfg.adam());
    for epoch in phase1_epochs..cfg.epochs {
        let mut order: Vec<usize> = (0..n_subjects).collect();
        root.derive(0x52 ^ ((epoch as u64) << 8)).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::default();
            for &s in batch {
                let mut tape = Tape::new();
                let loss_var = if model.backbone == BackboneKind::PureRnn {
                    pure_rnn_objective_t(&mut tape, &data.sequences[s], &params, model)?
                } else {
                    let eps = if model.codec.variational {
                        let mut eps_rng = root.derive(0xE0 ^ ((epoch as u64) << 20) ^ s as u64);
                        Some(Tensor::new_unchecked(
                            vec![model.codec.latent_dim],
                            eps_rng.normal_vec(model.codec.latent_dim),
                        ))
                    } else {
                        None
                    };
                    grouped_objective_t(
                        &mut tape,
                        &data.grouped[s],
                        &params,
                        model,
                        cfg.objective,
                        cfg.kl_weight,
                        eps.as_ref(),
                    )?
                    .total
                };
                let value = tape.value(loss_var).item();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        where_: format!("phase 2, epoch {epoch}, subject {s}"),
                        detail: format!("loss is {value}"),
                    });
                }
                epoch_loss += value;
                seen += 1;
                grads.add_assign(&tape.backward(loss_var)?.param_grads())?;
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            adam2.step(&mut params, &grads)?;
        }
        history.push(EpochRecord {
            epoch,
            phase: 2,
            loss: epoch_loss / seen.max(1) as f64,
            mean_spatial_correlation: prediction_correlation(&data, &params, model),
        });
    }

    Ok(TrainOutput { params, history })
}
