//! Client-side operations.

use rand::seq::SliceRandom;

use super::{ClientState, FedError, Result};
use crate::compress::{encode_payload, CodecConfig, CompressedPayload};
use crate::gnn::{loss_and_grad, GradTarget, ModelParams};
use crate::graphdata::{Graph, GraphDataset};
use crate::rng;

pub const UPLINK_PREFIX_W: &str = "w.";
pub const UPLINK_PREFIX_H: &str = "h.";

/// Mini-batches of one epoch. With `batch_size == 0` (or at least the set
/// size) the epoch is a single full batch in dataset order.
fn epoch_batches<'a>(
    data: &'a GraphDataset,
    batch_size: usize,
    stream: (u64, &str, [u64; 3]),
) -> Vec<Vec<&'a Graph>> {
    let n = data.len();
    if batch_size == 0 || batch_size >= n {
        return vec![data.graphs.iter().collect()];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(stream.0, stream.1, &stream.2));
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &data.graphs[i]).collect())
        .collect()
}

fn check_finite(p: &ModelParams, client: usize, round: u64) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(FedError::DivergenceDetected { client, round })
    }
}

/// `E` epochs of the corrected, globally pulled update on `W`:
/// `W ← W − η(∇f(W) − h) + ηα(Θ_view − W)`.
/// Returns the mean training loss over all steps, or `None` without
/// training data.
pub fn local_train_round(c: &mut ClientState, seed: u64, round: u64) -> Result<Option<f64>> {
    let (eta, alpha) = (c.cfg.eta, c.cfg.alpha);
    let data = c.data.clone();
    if data.train.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    for epoch in 0..c.cfg.local_epochs {
        let key = (seed, "local-batch", [round, c.id as u64, epoch as u64]);
        for batch in epoch_batches(&data.train, c.cfg.batch_size, key) {
            let (loss, g) = loss_and_grad(&c.w, &batch, GradTarget::All)?;
            let ClientState {
                w, h, theta_view, ..
            } = c;
            for ((((_, wm), (_, gm)), (_, hm)), (_, tm)) in w
                .tensors_mut()
                .into_iter()
                .zip(g.tensors())
                .zip(h.tensors())
                .zip(theta_view.tensors())
            {
                let it = gm.data().iter().zip(hm.data()).zip(tm.data());
                for (wv, ((&gv, &hv), &tv)) in wm.data_mut().iter_mut().zip(it) {
                    *wv = *wv - eta * (gv - hv) + eta * alpha * (tv - *wv);
                }
            }
            check_finite(&c.w, c.id, round)?;
            total += loss;
            steps += 1;
        }
    }
    Ok((steps > 0).then(|| total / steps as f64))
}

/// `F` epochs of `S ← Sparsify(S − η(∇_S f(Θ_view + S) + ν·sign(S)))` with
/// `W` frozen.
pub fn finetune_sparse(c: &mut ClientState, seed: u64, round: u64) -> Result<()> {
    let (eta, nu) = (c.cfg.eta, c.cfg.nu);
    let data = c.data.clone();
    if data.train.is_empty() {
        return Ok(());
    }
    for epoch in 0..c.cfg.finetune_epochs {
        let key = (seed, "finetune-batch", [round, c.id as u64, epoch as u64]);
        for batch in epoch_batches(&data.train, c.cfg.batch_size, key) {
            let base = &c.theta_view;
            let (_, g) = loss_and_grad(&c.s, &batch, GradTarget::SparseThroughSum { base })?;
            for ((_, sm), (_, gm)) in c.s.tensors_mut().into_iter().zip(g.tensors()) {
                for (sv, &gv) in sm.data_mut().iter_mut().zip(gm.data()) {
                    let sub = if *sv > 0.0 {
                        1.0
                    } else if *sv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *sv -= eta * (gv + nu * sub);
                }
            }
            let mut mats: Vec<_> = c.s.tensors_mut().into_iter().map(|(_, m)| m).collect();
            c.cfg.sparsifier.apply_many(&mut mats);
            check_finite(&c.s, c.id, round)?;
        }
    }
    Ok(())
}

/// `h ← h + (Θ_view − W)/η`.
pub fn update_correction(c: &mut ClientState) -> Result<()> {
    let delta = c.theta_view.zip_with(&c.w, |t, w| t - w)?;
    c.h.axpy(1.0 / c.cfg.eta, &delta)?;
    Ok(())
}

/// `h ← h + (p/η)(Θ_new − W)`, applied when `Θ_new` arrives.
pub fn update_correction_proxskip(c: &mut ClientState, theta_new: &ModelParams, p: f64) -> Result<()> {
    let delta = theta_new.zip_with(&c.w, |t, w| t - w)?;
    c.h.axpy(p / c.cfg.eta, &delta)?;
    Ok(())
}

/// Quantized `W` and `h`, every tensor in canonical order. `S` stays local.
pub fn client_uplink(c: &ClientState, r_bits: u8) -> Result<CompressedPayload> {
    let names: Vec<(String, &crate::linalg::Matrix)> = c
        .w
        .tensors()
        .into_iter()
        .map(|(n, m)| (format!("{UPLINK_PREFIX_W}{n}"), m))
        .chain(
            c.h.tensors()
                .into_iter()
                .map(|(n, m)| (format!("{UPLINK_PREFIX_H}{n}"), m)),
        )
        .collect();
    let cfg = CodecConfig::quantized(r_bits);
    Ok(encode_payload(names.iter().map(|(n, m)| (n.as_str(), *m)), &cfg)?)
}

/// One proximal step `W ← W − η(∇f(W) + μ(W − Θ))` on `batch`.
pub fn fedprox_local_step(
    c: &mut ClientState,
    batch: &[&Graph],
    theta: &ModelParams,
    mu_prox: f64,
) -> Result<f64> {
    let eta = c.cfg.eta;
    let (loss, g) = loss_and_grad(&c.w, batch, GradTarget::All)?;
    for (((_, wm), (_, gm)), (_, tm)) in c
        .w
        .tensors_mut()
        .into_iter()
        .zip(g.tensors())
        .zip(theta.tensors())
    {
        for ((wv, &gv), &tv) in wm.data_mut().iter_mut().zip(gm.data()).zip(tm.data()) {
            *wv -= eta * (gv + mu_prox * (*wv - tv));
        }
    }
    Ok(loss)
}

/// `E` epochs of plain (`mu_prox = 0`) or proximal SGD on `W` toward
/// `theta_view`, sharing the mini-batch streams of [`local_train_round`].
pub fn sgd_epochs(c: &mut ClientState, mu_prox: f64, seed: u64, round: u64) -> Result<Option<f64>> {
    let data = c.data.clone();
    if data.train.is_empty() {
        return Ok(None);
    }
    let theta = c.theta_view.clone();
    let mut total = 0.0;
    let mut steps = 0usize;
    for epoch in 0..c.cfg.local_epochs {
        let key = (seed, "local-batch", [round, c.id as u64, epoch as u64]);
        for batch in epoch_batches(&data.train, c.cfg.batch_size, key) {
            total += fedprox_local_step(c, &batch, &theta, mu_prox)?;
            check_finite(&c.w, c.id, round)?;
            steps += 1;
        }
    }
    Ok((steps > 0).then(|| total / steps as f64))
}
