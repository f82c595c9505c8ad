use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvVars};
use super::model::TaskModel;
use crate::error::{Error, Result};
use crate::rng::{mix, stream_rng};
use crate::tensor::{AdamState, LrSchedule, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub seed: u64,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Mini-batch Adam over `params`.
///
/// `loss` builds the per-sample objective on a fresh tape. Samples of a batch
/// run on the rayon pool, one tape each; their gradients are summed in batch
/// order so the result does not depend on scheduling.
pub fn train_params<F>(
    params: &mut [Conv],
    n_samples: usize,
    schedule: &LrSchedule,
    batch_size: usize,
    seed: u64,
    loss: F,
) -> Result<TrainReport>
where
    F: Fn(&mut Tape, &[ConvVars], usize) -> Result<Var> + Sync,
{
    if n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut adam = AdamState::new(schedule.base_lr);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut epoch_losses = Vec::with_capacity(schedule.total_epochs());

    for epoch in 0..schedule.total_epochs() {
        order.shuffle(&mut stream_rng(seed, mix(0x5348_5546, epoch as u64)));
        adam.lr = schedule.lr(epoch);
        let mut epoch_sum = 0.0f64;
        for batch in order.chunks(batch_size) {
            let snapshot: &[Conv] = params;
            let per_sample: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let vars: Vec<ConvVars> =
                        snapshot.iter().map(|c| c.register(&mut tape, true)).collect();
                    let l = loss(&mut tape, &vars, i)?;
                    let value = tape.value(l).item() as f64;
                    tape.backward(l)?;
                    let grads = vars
                        .iter()
                        .flat_map(|v| [v.weight, v.bias])
                        .zip(snapshot.iter().flat_map(|c| [&c.weight, &c.bias]))
                        .map(|(var, p)| tape.grad(var).unwrap_or_else(|| Tensor::zeros(p.shape())))
                        .collect();
                    Ok((value, grads))
                })
                .collect();

            let mut total: Option<Vec<Tensor>> = None;
            for r in per_sample {
                let (value, grads) = r?;
                epoch_sum += value;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut total = total.expect("batch is non-empty");
            let inv = 1.0 / batch.len() as f32;
            for g in &mut total {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let mut refs: Vec<&mut Tensor> =
                params.iter_mut().flat_map(|c| c.tensors_mut()).collect();
            let grad_refs: Vec<Option<&Tensor>> = total.iter().map(Some).collect();
            adam.step(&mut refs, &grad_refs)?;
        }
        epoch_losses.push(epoch_sum / n_samples as f64);
    }
    Ok(TrainReport { epoch_losses, seed })
}

/// Supervised per-pixel L1 training of the task model on `(inputs, targets)` pairs.
pub fn train_task(
    model: &mut TaskModel,
    inputs: &[Tensor],
    targets: &[Tensor],
    schedule: &LrSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<TrainReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    for (x, y) in inputs.iter().zip(targets) {
        model.check_input(x)?;
        model.check_input(y)?;
    }
    let arch = model.clone();
    let report = train_params(
        &mut model.params,
        inputs.len(),
        schedule,
        batch_size,
        seed,
        |tape, vars, i| {
            let x = tape.constant(inputs[i].clone());
            let y = tape.constant(targets[i].clone());
            let feats = arch.forward_on(tape, vars, x, |_, _, h| Ok(h))?;
            tape.l1(*feats.last().expect("features"), y)
        },
    )?;
    model.trained = true;
    model.train_seed = seed;
    model.epochs = schedule.total_epochs();
    Ok(report)
}
