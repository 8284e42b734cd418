use serde::Serialize;

use crate::blocks::ParamSet;

use super::config::{IsomerConfig, RunConfig};
use super::loss::{bce_grad, bce_loss, iou};
use super::model::{backward, forward, IsomerParams};
use super::optim::{AdamW, AdamWConfig};
use super::synth::{synth_clip, Clip, Frame};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub iou: f64,
}

/// Mean loss, mean IoU and mean parameter gradient over `frames`.
pub fn batch_gradients(
    params: &IsomerParams,
    frames: &[Frame],
    cfg: &IsomerConfig,
) -> Result<(f64, f64, IsomerParams), PipelineError> {
    let mut grads = params.zeros_like();
    let (mut loss, mut score) = (0.0, 0.0);
    let scale = 1.0 / frames.len().max(1) as f64;
    for f in frames {
        let (logits, cache) = forward(&f.appearance, &f.motion, params, cfg)?;
        loss += bce_loss(logits.data(), &f.target)?;
        score += iou(logits.data(), &f.target)?;
        let mut d = bce_grad(logits.data(), &f.target)?;
        d.data_mut().iter_mut().for_each(|v| *v *= scale);
        let g = backward(&cache, params, &d)?;
        grads.accumulate(&g.params);
    }
    Ok((loss * scale, score * scale, grads))
}

/// One AdamW update on the batch. Returns the pre-update loss and IoU.
pub fn train_step(
    params: &mut IsomerParams,
    frames: &[Frame],
    opt: &mut AdamW,
    cfg: &IsomerConfig,
) -> Result<(f64, f64), PipelineError> {
    let (loss, score, grads) = batch_gradients(params, frames, cfg)?;
    if !loss.is_finite() {
        return Err(PipelineError::NonFiniteLoss { step: opt.steps_taken() as usize + 1 });
    }
    opt.step(params, &grads);
    Ok((loss, score))
}

/// Per-frame IoU of `params` on `clip`.
pub fn evaluate(params: &IsomerParams, clip: &Clip, cfg: &IsomerConfig) -> Result<Vec<f64>, PipelineError> {
    clip.frames
        .iter()
        .map(|f| {
            let (logits, _) = forward(&f.appearance, &f.motion, params, cfg)?;
            iou(logits.data(), &f.target)
        })
        .collect()
}

pub fn clip_for(run: &RunConfig) -> Result<Clip, PipelineError> {
    synth_clip(run.train.clip_seed, run.model.resolution, run.train.frames, &run.model.channels)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: IsomerParams,
    pub metrics: Vec<MetricRow>,
    /// Mean IoU after the last update.
    pub final_iou: f64,
}

/// Full training run on the configured synthetic clip. `on_step` sees each
/// metric row and the parameters after that step's update.
pub fn train(
    run: &RunConfig,
    mut on_step: impl FnMut(&MetricRow, &IsomerParams) -> Result<(), PipelineError>,
) -> Result<TrainOutcome, PipelineError> {
    let cfg = &run.model;
    let clip = clip_for(run)?;
    let mut params = IsomerParams::init(cfg, run.train.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: run.train.lr,
            weight_decay: run.train.weight_decay,
            ..Default::default()
        },
        params.num_scalars(),
    );
    let mut metrics = Vec::with_capacity(run.train.steps);
    for step in 1..=run.train.steps {
        let (loss, score) = train_step(&mut params, &clip.frames, &mut opt, cfg)?;
        let row = MetricRow { step, loss, iou: score };
        on_step(&row, &params)?;
        metrics.push(row);
    }
    let scores = evaluate(&params, &clip, cfg)?;
    let final_iou = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    Ok(TrainOutcome {
        params,
        metrics,
        final_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::TrainConfig;

    fn small_run(steps: usize) -> RunConfig {
        RunConfig {
            model: IsomerConfig {
                resolution: 32,
                channels: [4, 4, 4, 4],
                decoder_width: 4,
                ..Default::default()
            },
            train: TrainConfig {
                steps,
                frames: 2,
                ..Default::default()
            },
        }
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let run = small_run(100);
        let a = train(&run, |_, _| Ok(())).unwrap();
        let b = train(&run, |_, _| Ok(())).unwrap();
        let bits = |p: &IsomerParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.params), bits(&b.params));
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn loss_decreases() {
        let out = train(&small_run(60), |_, _| Ok(())).unwrap();
        assert!(out.metrics.last().unwrap().loss < out.metrics[0].loss);
    }
}
