//! Distribution alignment of feature tensors (adaptive instance
//! normalization) and the mask-weighted reconstruction loss.

use ndarray::{Array, ArrayBase, Axis, Data, Dimension, RemoveAxis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this standard deviation a feature tensor is treated as constant.
pub const STD_EPS: f64 = 1e-8;

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

fn stats_iter<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> Result<FeatureStats> {
    let n = values.clone().count();
    if n == 0 {
        return Err(Error::Empty("feature tensor has no elements".into()));
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(FeatureStats { mean, std: var.sqrt() })
}

pub fn stats<S, D>(z: &ArrayBase<S, D>) -> Result<FeatureStats>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    stats_iter(z.iter())
}

/// Whether statistics are taken over the whole tensor or per slice along
/// axis 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    #[default]
    Global,
    PerChannel,
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("tensor shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn restyle<'a>(face: impl Iterator<Item = &'a mut f64>, from: FeatureStats, to: FeatureStats) {
    if from.std <= STD_EPS {
        face.for_each(|v| *v = to.mean);
    } else {
        face.for_each(|v| *v = (*v - from.mean) / from.std * to.std + to.mean);
    }
}

/// Re-standardizes `z_face` to the statistics of `z_img` and returns
/// `(z̄_face, z̄_face + z_img)`. A constant `z_face` maps to `z_img`'s mean.
pub fn adain_align<S1, S2, D>(z_face: &ArrayBase<S1, D>, z_img: &ArrayBase<S2, D>) -> Result<(Array<f64, D>, Array<f64, D>)>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension + RemoveAxis,
{
    adain_align_with(z_face, z_img, StatsMode::Global)
}

pub fn adain_align_with<S1, S2, D>(
    z_face: &ArrayBase<S1, D>,
    z_img: &ArrayBase<S2, D>,
    mode: StatsMode,
) -> Result<(Array<f64, D>, Array<f64, D>)>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension + RemoveAxis,
{
    check_shapes(z_face.shape(), z_img.shape())?;
    let mut aligned = z_face.to_owned();
    match mode {
        StatsMode::Global => {
            let from = stats(z_face)?;
            let to = stats(z_img)?;
            restyle(aligned.iter_mut(), from, to);
        }
        StatsMode::PerChannel => {
            if z_face.ndim() == 0 {
                return Err(Error::Shape("per-channel statistics need at least one axis".into()));
            }
            for (mut face, img) in aligned.axis_iter_mut(Axis(0)).zip(z_img.axis_iter(Axis(0))) {
                let from = stats(&face)?;
                let to = stats(&img)?;
                restyle(face.iter_mut(), from, to);
            }
        }
    }
    let out = &aligned + z_img;
    Ok((aligned, out))
}

/// `mean(((z_gt − z_eps)·(1 + M))²)` with `M` in [0, 1].
pub fn masked_recon_loss<S1, S2, S3, D>(z_gt: &ArrayBase<S1, D>, z_eps: &ArrayBase<S2, D>, mask: &ArrayBase<S3, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    S3: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(z_gt.shape(), z_eps.shape())?;
    check_shapes(z_gt.shape(), mask.shape())?;
    if z_gt.is_empty() {
        return Err(Error::Empty("feature tensor has no elements".into()));
    }
    if let Some(m) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Validation(format!("mask entry {m} outside [0, 1]")));
    }
    let mut sum = 0.0;
    Zip::from(z_gt).and(z_eps).and(mask).for_each(|&g, &e, &m| {
        let w = (g - e) * (1.0 + m);
        sum += w * w;
    });
    Ok(sum / z_gt.len() as f64)
}
