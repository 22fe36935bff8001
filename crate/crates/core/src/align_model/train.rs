//! Minibatch training with best-validation selection, and evaluation
//! against the unaligned and closed-form baselines.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{AlignModel, PreparedItem};
use crate::error::{Error, Result};
use crate::misalign::{Corpus, CorpusItem, Stratum};
use crate::nnet::{AdamState, ParamSet};
use crate::par::{map_slice, try_map_indices, Execution};
use crate::rng::{salt, sub_rng, sub_seed};
use crate::similarity::dis_metric;
use crate::skeleton::DEFAULT_CONF_THRESHOLD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub conf_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 32, lr: 1e-3, seed: 0, conf_threshold: DEFAULT_CONF_THRESHOLD }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Validation("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Validation("batch size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Validation(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Validation(format!("confidence threshold must lie in [0, 1], got {}", self.conf_threshold)));
        }
        Ok(())
    }
}

/// One row of the training history. Epoch 0 is the untrained model; its
/// train loss is a full pass over the training split. Later train losses
/// are the mean per-item loss seen during the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss (training
    /// loss when there is no validation split).
    pub params: ParamSet,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best_row(&self) -> &HistoryRow {
        &self.history[self.best_epoch]
    }
}

pub fn prepare_items(items: &[CorpusItem], conf_threshold: f64, exec: Execution) -> Result<Vec<PreparedItem>> {
    try_map_indices(items.len(), exec, |i| PreparedItem::new(&items[i], conf_threshold))
}

/// Items per forward pass. Work is split into fixed chunks of this size
/// regardless of the thread count, so results do not depend on it.
pub const CHUNK: usize = 8;

/// Mean loss over `items`, summed in index order.
pub fn mean_loss(model: &AlignModel, p: &ParamSet, items: &[PreparedItem], exec: Execution) -> f64 {
    let refs: Vec<&PreparedItem> = items.iter().collect();
    let chunks: Vec<&[&PreparedItem]> = refs.chunks(CHUNK).collect();
    let losses = map_slice(&chunks, exec, |c| model.batch_losses(p, c));
    losses.iter().flatten().sum::<f64>() / items.len() as f64
}

/// Summed loss and summed gradient over a minibatch. Chunks are evaluated
/// independently and reduced in index order.
pub fn batch_loss_and_grad(model: &AlignModel, p: &ParamSet, batch: &[&PreparedItem], exec: Execution) -> (f64, ParamSet) {
    let chunks: Vec<&[&PreparedItem]> = batch.chunks(CHUNK).collect();
    let parts = map_slice(&chunks, exec, |c| model.batch_loss_and_grad(p, c));
    let mut grad = p.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l.iter().sum::<f64>();
        grad.add_assign(g);
    }
    (loss, grad)
}

fn finite(loss: f64, what: &str, epoch: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence(format!("{what} loss is {loss} at epoch {epoch}")))
    }
}

pub fn train(model: &AlignModel, corpus: &Corpus, config: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    train_with(model, corpus.train(), corpus.val(), config, exec, |_| {})
}

/// Trains on `train_items`, calling `on_epoch` after each history row.
pub fn train_with(
    model: &AlignModel,
    train_items: &[CorpusItem],
    val_items: &[CorpusItem],
    config: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_items.is_empty() {
        return Err(Error::Empty("training split has no items".into()));
    }
    let train_set = prepare_items(train_items, config.conf_threshold, exec)?;
    let val_set = prepare_items(val_items, config.conf_threshold, exec)?;
    let val_loss = |p: &ParamSet, epoch: usize| -> Result<Option<f64>> {
        if val_set.is_empty() {
            Ok(None)
        } else {
            finite(mean_loss(model, p, &val_set, exec), "validation", epoch).map(Some)
        }
    };

    let mut params = model.init(config.seed);
    let mut adam = AdamState::new(params.len(), config.lr);
    let first = HistoryRow {
        epoch: 0,
        train_loss: finite(mean_loss(model, &params, &train_set, exec), "training", 0)?,
        val_loss: val_loss(&params, 0)?,
    };
    on_epoch(&first);
    let score = |r: &HistoryRow| r.val_loss.unwrap_or(r.train_loss);
    let mut best = (score(&first), 0usize, params.clone());
    let mut history = vec![first];

    let shuffle_seed = sub_seed(config.seed, salt::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut sub_rng(shuffle_seed, epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedItem> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grad) = batch_loss_and_grad(model, &params, &batch, exec);
            finite(loss, "training", epoch)?;
            epoch_loss += loss;
            grad.scale(1.0 / batch.len() as f64);
            adam.step(params.as_mut_slice(), grad.as_slice()).map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        let row = HistoryRow { epoch, train_loss: epoch_loss / train_set.len() as f64, val_loss: val_loss(&params, epoch)? };
        on_epoch(&row);
        if score(&row) < best.0 {
            best = (score(&row), epoch, params.clone());
        }
        history.push(row);
    }
    Ok(TrainOutcome { params: best.2, history, best_epoch: best.1 })
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
        out.push_str(&format!("{},{:.9},{}\n", r.epoch, r.train_loss, val));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Svd,
    Learned,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::None, Method::Svd, Method::Learned];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Svd => "svd",
            Method::Learned => "learned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: Method,
    /// `"all"` or a stratum name.
    pub stratum: String,
    pub mean_dis: f64,
    pub median_dis: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn get(&self, method: Method, stratum: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.stratum == stratum)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,stratum,mean_dis,median_dis,n\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.9},{:.9},{}\n", r.method.as_str(), r.stratum, r.mean_dis, r.median_dis, r.n));
        }
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-item Dis for the three methods, in that order.
fn item_dis(model: &AlignModel, p: &ParamSet, item: &CorpusItem, conf_threshold: f64) -> Result<[f64; 3]> {
    let none = dis_metric(&item.driven, &item.gt_aligned)?;
    let features = super::model::Features::new(&item.reference, &item.driven, conf_threshold)?;
    let svd = dis_metric(&features.svd.apply_sequence(&item.driven), &item.gt_aligned)?;
    let learned = dis_metric(&model.transform(p, &features).apply_sequence(&item.driven), &item.gt_aligned)?;
    Ok([none, svd, learned])
}

/// Mean and median Dis per method over all items and per stratum.
pub fn evaluate(
    model: &AlignModel,
    p: &ParamSet,
    items: &[CorpusItem],
    conf_threshold: f64,
    exec: Execution,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation split has no items".into()));
    }
    let dis = try_map_indices(items.len(), exec, |i| item_dis(model, p, &items[i], conf_threshold))?;
    let mut groups: Vec<(String, Vec<usize>)> = vec![("all".into(), (0..items.len()).collect())];
    for s in [Stratum::NoiseOnly, Stratum::LimbJitter] {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].stratum == s).collect();
        if !idx.is_empty() {
            groups.push((s.as_str().into(), idx));
        }
    }
    let mut rows = Vec::new();
    for (m, method) in Method::ALL.into_iter().enumerate() {
        for (name, idx) in &groups {
            let mut v: Vec<f64> = idx.iter().map(|&i| dis[i][m]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            rows.push(MetricsRow { method, stratum: name.clone(), mean_dis: mean, median_dis: median(&mut v), n: v.len() });
        }
    }
    Ok(MetricsReport { rows })
}
