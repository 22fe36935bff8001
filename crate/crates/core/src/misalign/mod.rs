//! Seeded synthesis of misaligned (reference, driven) pose pairs.
//!
//! Each item starts from a clean normalized sequence. Frame 0 becomes the
//! reference pose. The driven subject is the same motion with per-limb
//! length jitter and Gaussian keypoint noise; its ground-truth placement
//! `gt_aligned` is then moved off-target by the inverse of a random
//! similarity transform `gt_transform`, so `apply(gt_transform, driven)`
//! reproduces `gt_aligned`. Keypoints are finally dropped at random,
//! subject to a per-frame floor of present keypoints.

pub mod procedural;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{salt, sub_rng, sub_seed};
use crate::similarity::{SimTransform, Vec2};
use crate::skeleton::{Pose, PoseSequence, NUM_KEYPOINTS, PARENT, TOPOLOGICAL_ORDER};

/// Minimum fraction of present keypoints in every emitted frame.
pub const KEYPOINT_FLOOR: f64 = 0.30;

/// Dropout masks are redrawn at most this many times per item.
pub const MAX_DROPOUT_DRAWS: usize = 100;

pub const CORPUS_FORMAT: &str = "poseforge-corpus-v1";

/// Ranges and noise levels of the synthetic misalignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    /// Rotation range in radians.
    pub theta_range: [f64; 2],
    pub scale_range: [f64; 2],
    /// Per-axis translation range in normalized units.
    pub translate_range: [f64; 2],
    pub keypoint_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Standard deviation of the log limb-length multiplier.
    pub limb_scale_jitter: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        let quarter = std::f64::consts::FRAC_PI_4;
        Self {
            theta_range: [-quarter, quarter],
            scale_range: [0.5, 2.0],
            translate_range: [-0.25, 0.25],
            keypoint_noise_sigma: 0.01,
            dropout_prob: 0.1,
            limb_scale_jitter: 0.15,
        }
    }
}

impl PerturbSpec {
    /// No misalignment, noise, jitter or dropout.
    pub fn zero() -> Self {
        Self {
            theta_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            translate_range: [0.0, 0.0],
            keypoint_noise_sigma: 0.0,
            dropout_prob: 0.0,
            limb_scale_jitter: 0.0,
        }
    }

    /// Default ranges with noise, jitter and dropout switched off.
    pub fn noiseless() -> Self {
        Self { keypoint_noise_sigma: 0.0, dropout_prob: 0.0, limb_scale_jitter: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges =
            [("theta_range", self.theta_range), ("scale_range", self.scale_range), ("translate_range", self.translate_range)];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Validation(format!("{name}: need lo <= hi, got [{lo}, {hi}]")));
            }
        }
        if !(self.scale_range[0] > 0.0) {
            return Err(Error::Validation("scale_range lower bound must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::Validation(format!("dropout_prob {} outside [0,1]", self.dropout_prob)));
        }
        if !(self.keypoint_noise_sigma >= 0.0) || !(self.limb_scale_jitter >= 0.0) {
            return Err(Error::Validation("noise sigma and limb jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn stratum(&self) -> Stratum {
        if self.limb_scale_jitter > 0.0 {
            Stratum::LimbJitter
        } else {
            Stratum::NoiseOnly
        }
    }
}

/// Evaluation stratum of a corpus item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stratum {
    NoiseOnly,
    LimbJitter,
}

impl Stratum {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stratum::NoiseOnly => "noise-only",
            Stratum::LimbJitter => "limb-jitter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub reference: Pose,
    pub driven: PoseSequence,
    pub gt_transform: SimTransform,
    pub gt_aligned: PoseSequence,
    pub stratum: Stratum,
}

impl CorpusItem {
    /// Digest over the raw little-endian bits of every number in the item,
    /// independent of any text formatting.
    pub fn digest(&self) -> String {
        fn put_pose(h: &mut Sha256, p: &Pose) {
            for k in &p.keypoints {
                for x in [k.x, k.y, k.conf] {
                    h.update(x.to_le_bytes());
                }
            }
        }
        let mut h = Sha256::new();
        put_pose(&mut h, &self.reference);
        for seq in [&self.driven, &self.gt_aligned] {
            for x in [seq.fps, seq.width as f64, seq.height as f64] {
                h.update(x.to_le_bytes());
            }
            for p in &seq.frames {
                put_pose(&mut h, p);
            }
        }
        let t = &self.gt_transform;
        let stratum = match self.stratum {
            Stratum::NoiseOnly => 0.0,
            Stratum::LimbJitter => 1.0,
        };
        for x in [
            t.rotation[(0, 0)],
            t.rotation[(0, 1)],
            t.rotation[(1, 0)],
            t.rotation[(1, 1)],
            t.scale,
            t.translation.x,
            t.translation.y,
            stratum,
        ] {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Draws θ, S and t uniformly from the ranges of `spec`.
pub fn random_sim_transform<R: Rng + ?Sized>(spec: &PerturbSpec, rng: &mut R) -> SimTransform {
    let theta = uniform(rng, spec.theta_range);
    let scale = uniform(rng, spec.scale_range);
    let tx = uniform(rng, spec.translate_range);
    let ty = uniform(rng, spec.translate_range);
    SimTransform::from_params(theta, scale, [tx, ty])
}

/// Rescales every limb of every frame by a per-limb factor, propagating
/// from the neck outwards.
pub fn jitter_limbs(seq: &PoseSequence, multipliers: &[f64; NUM_KEYPOINTS]) -> PoseSequence {
    let frames = seq
        .frames
        .iter()
        .map(|pose| {
            let mut out = pose.clone();
            for &i in &TOPOLOGICAL_ORDER {
                if let Some(p) = PARENT[i] {
                    let (src, par) = (pose.keypoints[i], pose.keypoints[p]);
                    out.keypoints[i].x = out.keypoints[p].x + multipliers[i] * (src.x - par.x);
                    out.keypoints[i].y = out.keypoints[p].y + multipliers[i] * (src.y - par.y);
                }
            }
            out
        })
        .collect();
    PoseSequence { frames, ..seq.clone() }
}

fn floor_count() -> usize {
    (KEYPOINT_FLOOR * NUM_KEYPOINTS as f64).ceil() as usize
}

/// Builds one corpus item from a normalized clean sequence.
pub fn perturb_sequence<R: Rng + ?Sized>(seq: &PoseSequence, spec: &PerturbSpec, rng: &mut R) -> Result<CorpusItem> {
    spec.validate()?;
    seq.validate()?;
    let gt = random_sim_transform(spec, rng);

    let mut mult = [1.0; NUM_KEYPOINTS];
    if spec.limb_scale_jitter > 0.0 {
        for (i, m) in mult.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            if PARENT[i].is_some() {
                *m = (spec.limb_scale_jitter * z).exp();
            }
        }
    }
    let mut observed = if spec.limb_scale_jitter > 0.0 { jitter_limbs(seq, &mult) } else { seq.clone() };
    if spec.keypoint_noise_sigma > 0.0 {
        for pose in observed.frames.iter_mut() {
            for k in pose.keypoints.iter_mut() {
                let (nx, ny): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                k.x += spec.keypoint_noise_sigma * nx;
                k.y += spec.keypoint_noise_sigma * ny;
            }
        }
    }

    let floor = floor_count();
    let mut mask = None;
    for _ in 0..MAX_DROPOUT_DRAWS {
        let m: Vec<[bool; NUM_KEYPOINTS]> = observed
            .frames
            .iter()
            .map(|pose| std::array::from_fn(|i| pose.keypoints[i].is_present() && !(rng.random::<f64>() < spec.dropout_prob)))
            .collect();
        if m.iter().all(|f| f.iter().filter(|&&p| p).count() >= floor) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::KeypointFloor(format!(
            "no dropout draw kept {floor} of {NUM_KEYPOINTS} keypoints in every frame after {MAX_DROPOUT_DRAWS} attempts"
        ))
    })?;
    for (pose, keep) in observed.frames.iter_mut().zip(&mask) {
        for (k, &keep) in pose.keypoints.iter_mut().zip(keep) {
            if !keep {
                k.conf = 0.0;
            }
        }
    }

    let inv = gt.invert();
    let mut driven = observed.clone();
    for pose in driven.frames.iter_mut() {
        for k in pose.keypoints.iter_mut() {
            let q = inv.apply_point(&Vec2::new(k.x, k.y));
            k.x = q.x;
            k.y = q.y;
        }
    }
    Ok(CorpusItem { reference: seq.frames[0].clone(), driven, gt_transform: gt, gt_aligned: observed, stratum: spec.stratum() })
}

/// Where corpus items take their clean sequences from.
#[derive(Debug, Clone)]
pub enum CorpusSource {
    /// Recorded sequences, used round-robin by item index.
    Sequences(Vec<PoseSequence>),
    /// Freshly generated walking sequences with this many frames.
    Procedural { frames: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub start: usize,
    pub end: usize,
}

impl SplitRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// 80/10/10 split by item index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: SplitRange,
    pub val: SplitRange,
    pub test: SplitRange,
}

impl Splits {
    pub fn for_len(n: usize) -> Self {
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        Splits {
            train: SplitRange { start: 0, end: n_train },
            val: SplitRange { start: n_train, end: n_train + n_val },
            test: SplitRange { start: n_train + n_val, end: n },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub file: String,
    pub digest: String,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub n_items: usize,
    pub source: String,
    pub spec: PerturbSpec,
    pub spec_note: String,
    pub splits: Splits,
    pub items: Vec<ManifestItem>,
    /// Digest over the ordered item digests.
    pub digest: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn split(&self, range: SplitRange) -> &[CorpusItem] {
        &self.items[range.indices()]
    }

    pub fn train(&self) -> &[CorpusItem] {
        self.split(self.manifest.splits.train)
    }

    pub fn val(&self) -> &[CorpusItem] {
        self.split(self.manifest.splits.val)
    }

    pub fn test(&self) -> &[CorpusItem] {
        self.split(self.manifest.splits.test)
    }
}

pub fn item_file_name(index: usize) -> String {
    format!("items/{index}.json")
}

/// Generates a deterministic corpus. Item `i` draws from its own stream
/// `sub_seed(sub_seed(seed, CORPUS), i)`, so serial and parallel execution
/// agree bit for bit.
pub fn gen_corpus(source: &CorpusSource, spec: &PerturbSpec, n_items: usize, seed: u64, exec: Execution) -> Result<Corpus> {
    spec.validate()?;
    if n_items == 0 {
        return Err(Error::Validation("n_items must be >= 1".into()));
    }
    if let CorpusSource::Sequences(s) = source {
        if s.is_empty() {
            return Err(Error::Empty("no source sequences and procedural generation disabled".into()));
        }
    }
    let corpus_seed = sub_seed(seed, salt::CORPUS);
    let items = par::try_map_indices(n_items, exec, |i| {
        let mut rng = sub_rng(corpus_seed, i as u64);
        match source {
            CorpusSource::Sequences(s) => perturb_sequence(&s[i % s.len()], spec, &mut rng),
            CorpusSource::Procedural { frames } => {
                let seq = procedural::walking_sequence(&mut rng, *frames);
                perturb_sequence(&seq, spec, &mut rng)
            }
        }
    })?;
    let manifest = build_manifest(&items, spec, seed, source);
    Ok(Corpus { items, manifest })
}

/// Reads a corpus directory written as `manifest.json` plus one
/// `items/{index}.json` per item.
pub fn load_corpus(dir: &std::path::Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
        .map_err(|e| Error::Parse(format!("manifest.json: {e}")))?;
    if manifest.format != CORPUS_FORMAT {
        return Err(Error::Parse(format!("unsupported corpus format {:?}", manifest.format)));
    }
    if manifest.items.len() != manifest.n_items || manifest.n_items == 0 {
        return Err(Error::Parse(format!("manifest lists {} items, n_items = {}", manifest.items.len(), manifest.n_items)));
    }
    let mut items = Vec::with_capacity(manifest.n_items);
    for entry in &manifest.items {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let item: CorpusItem = serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", entry.file)))?;
        items.push(item);
    }
    Ok(Corpus { items, manifest })
}

fn build_manifest(items: &[CorpusItem], spec: &PerturbSpec, seed: u64, source: &CorpusSource) -> Manifest {
    let entries: Vec<ManifestItem> = items
        .iter()
        .enumerate()
        .map(|(index, it)| ManifestItem { index, file: item_file_name(index), digest: it.digest(), stratum: it.stratum })
        .collect();
    let mut h = Sha256::new();
    for e in &entries {
        h.update(e.digest.as_bytes());
    }
    Manifest {
        format: CORPUS_FORMAT.into(),
        seed,
        n_items: items.len(),
        source: match source {
            CorpusSource::Sequences(s) => format!("sequences:{}", s.len()),
            CorpusSource::Procedural { frames } => format!("procedural-walk:{frames}"),
        },
        spec: *spec,
        spec_note: "uniform draws of rotation, scale and translation over the declared ranges; \
                    log-normal limb multipliers; ranges are defaults, not measured values"
            .into(),
        splits: Splits::for_len(items.len()),
        items: entries,
        digest: hex::encode(h.finalize()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::similarity::{dis_metric, fit_sequence, FrameSelection};
    use crate::skeleton::DEFAULT_CONF_THRESHOLD;

    fn clean_seq(seed: u64) -> PoseSequence {
        procedural::walking_sequence(&mut rng_from_seed(seed), 4)
    }

    #[test]
    fn random_transform_cases() {
        let mut rng = rng_from_seed(1);
        assert_eq!(random_sim_transform(&PerturbSpec::zero(), &mut rng), SimTransform::identity());
        let spec = PerturbSpec::default();
        let a = random_sim_transform(&spec, &mut rng_from_seed(3));
        let b = random_sim_transform(&spec, &mut rng_from_seed(3));
        assert_eq!(a, b);
        for _ in 0..1000 {
            let t = random_sim_transform(&spec, &mut rng);
            assert!((0.5..=2.0).contains(&t.scale));
        }
    }

    #[test]
    fn zero_perturbation_is_a_no_op() {
        let item = perturb_sequence(&clean_seq(2), &PerturbSpec::zero(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(item.gt_transform, SimTransform::identity());
        assert_eq!(item.driven, item.gt_aligned);
        assert_eq!(dis_metric(&item.driven, &item.gt_aligned).unwrap(), 0.0);
    }

    #[test]
    fn noiseless_item_is_exactly_recoverable() {
        let spec = PerturbSpec::noiseless();
        for s in 0..20 {
            let item = perturb_sequence(&clean_seq(s), &spec, &mut rng_from_seed(100 + s)).unwrap();
            let t = fit_sequence(&item.driven, &item.reference, DEFAULT_CONF_THRESHOLD, FrameSelection::First).unwrap();
            assert!(t.param_error(&item.gt_transform) < 1e-9);
        }
    }

    #[test]
    fn gt_transform_maps_driven_onto_gt() {
        let spec = PerturbSpec::default();
        for s in 0..20 {
            let item = perturb_sequence(&clean_seq(s), &spec, &mut rng_from_seed(s)).unwrap();
            let moved = item.gt_transform.apply_sequence(&item.driven);
            assert!(dis_metric(&moved, &item.gt_aligned).unwrap() < 1e-12);
        }
    }

    #[test]
    fn full_dropout_violates_floor() {
        let spec = PerturbSpec { dropout_prob: 1.0, ..PerturbSpec::default() };
        let err = perturb_sequence(&clean_seq(1), &spec, &mut rng_from_seed(0)).unwrap_err();
        assert!(err.to_string().contains("keypoint floor violated"));
    }

    #[test]
    fn floor_holds_under_heavy_dropout() {
        let spec = PerturbSpec { dropout_prob: 0.5, ..PerturbSpec::default() };
        let corpus = gen_corpus(&CorpusSource::Procedural { frames: 4 }, &spec, 50, 11, Execution::Serial).unwrap();
        for item in &corpus.items {
            for f in &item.driven.frames {
                assert!(f.present_count() as f64 >= KEYPOINT_FLOOR * NUM_KEYPOINTS as f64);
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_split() {
        let src = CorpusSource::Procedural { frames: 4 };
        let spec = PerturbSpec::default();
        let a = gen_corpus(&src, &spec, 100, 7, Execution::Serial).unwrap();
        let b = gen_corpus(&src, &spec, 100, 7, Execution::Parallel).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.items, b.items);
        let s = a.manifest.splits;
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let one = gen_corpus(&src, &spec, 1, 7, Execution::Serial).unwrap();
        assert_eq!(one.manifest.digest, gen_corpus(&src, &spec, 1, 7, Execution::Serial).unwrap().manifest.digest);
        assert_ne!(one.manifest.digest, gen_corpus(&src, &spec, 1, 8, Execution::Serial).unwrap().manifest.digest);
    }

    #[test]
    fn zero_spec_corpus_has_zero_dis() {
        let corpus = gen_corpus(&CorpusSource::Procedural { frames: 3 }, &PerturbSpec::zero(), 10, 1, Execution::Serial).unwrap();
        for it in &corpus.items {
            assert_eq!(dis_metric(&it.driven, &it.gt_aligned).unwrap(), 0.0);
        }
    }

    #[test]
    fn empty_source_is_rejected() {
        let err = gen_corpus(&CorpusSource::Sequences(vec![]), &PerturbSpec::default(), 3, 0, Execution::Serial);
        assert!(matches!(err, Err(Error::Empty(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(PerturbSpec { scale_range: [0.0, 1.0], ..PerturbSpec::default() }.validate().is_err());
        assert!(PerturbSpec { theta_range: [1.0, 0.0], ..PerturbSpec::default() }.validate().is_err());
        assert!(PerturbSpec { dropout_prob: 1.5, ..PerturbSpec::default() }.validate().is_err());
    }

    #[test]
    fn item_json_round_trip_preserves_structure() {
        let item = perturb_sequence(&clean_seq(4), &PerturbSpec::default(), &mut rng_from_seed(4)).unwrap();
        let s = serde_json::to_string(&item).unwrap();
        let back: CorpusItem = serde_json::from_str(&s).unwrap();
        assert_eq!(back.stratum, item.stratum);
        assert!(back.gt_transform.param_error(&item.gt_transform) < 1e-12);
        assert!(dis_metric(&back.driven, &item.driven).unwrap() < 1e-8);
    }
}
