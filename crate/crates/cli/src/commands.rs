//! Subcommand implementations.

use std::path::{Path, PathBuf};

use poseforge::align_model::{evaluate, history_csv, train_with, AlignModel, TrainConfig};
use poseforge::hjb::{edm_sample, GmmSpec, GuidanceConfig, GuidanceLoss, SamplerConfig};
use poseforge::misalign::procedural::DEFAULT_FRAMES;
use poseforge::misalign::{gen_corpus as generate, item_file_name, load_corpus, Corpus, CorpusItem, CorpusSource, PerturbSpec};
use poseforge::par::Execution;
use poseforge::similarity::{dis_metric, fit_sequence, FrameSelection};
use poseforge::skeleton::{common_keypoints, normalize, parse_pose_sequence, render_svg, PoseSequence};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::output::{create_dir, load_config, read, write_atomic, write_json, RunManifest};
use crate::{EvalArgs, Failure, FitArgs, GenCorpusArgs, LossKind, Preset, RenderArgs, SampleArgs, Split, TrainArgs};

const EXEC: Execution = Execution::Parallel;

fn read_sequence(path: &Path) -> Result<PoseSequence, Failure> {
    parse_pose_sequence(&read(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_items: usize,
    pub seed: u64,
    pub frames: usize,
    pub spec: PerturbSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n_items: 100, seed: 0, frames: DEFAULT_FRAMES, spec: PerturbSpec::default() }
    }
}

fn source_sequences(path: &Path) -> Result<Vec<PoseSequence>, Failure> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let entries = std::fs::read_dir(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        let mut files: Vec<PathBuf> =
            entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files.iter().map(|f| read_sequence(f).map(|s| normalize(&s))).collect()
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<(), Failure> {
    let (mut cfg, _) = load_config::<GenConfig>(a.config.as_deref())?;
    match a.preset {
        Some(Preset::Default) => cfg.spec = PerturbSpec::default(),
        Some(Preset::Noiseless) => cfg.spec = PerturbSpec::noiseless(),
        Some(Preset::Zero) => cfg.spec = PerturbSpec::zero(),
        None => {}
    }
    let spec = &mut cfg.spec;
    if let Some(d) = a.rotation_deg {
        let r = d.to_radians();
        spec.theta_range = [-r, r];
    }
    if let Some(v) = a.scale_min {
        spec.scale_range[0] = v;
    }
    if let Some(v) = a.scale_max {
        spec.scale_range[1] = v;
    }
    if let Some(t) = a.translate {
        spec.translate_range = [-t.abs(), t.abs()];
    }
    if let Some(v) = a.noise {
        spec.keypoint_noise_sigma = v;
    }
    if let Some(v) = a.dropout {
        spec.dropout_prob = v;
    }
    if let Some(v) = a.jitter {
        spec.limb_scale_jitter = v;
    }
    cfg.n_items = a.n.unwrap_or(cfg.n_items);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    if cfg.frames == 0 {
        return Err(Failure::usage("frames must be >= 1"));
    }

    let source = match &a.source {
        Some(p) => CorpusSource::Sequences(source_sequences(p)?),
        None => CorpusSource::Procedural { frames: cfg.frames },
    };
    let corpus = generate(&source, &cfg.spec, cfg.n_items, cfg.seed, EXEC)?;
    write_corpus(&a.out, &corpus, &cfg)?;
    eprintln!("wrote {} items to {} (digest {})", corpus.items.len(), a.out.display(), corpus.manifest.digest);
    Ok(())
}

fn write_corpus(dir: &Path, corpus: &Corpus, cfg: &GenConfig) -> Result<(), Failure> {
    create_dir(&dir.join("items"))?;
    for (i, item) in corpus.items.iter().enumerate() {
        let text = serde_json::to_string(item).map_err(|e| Failure::usage(e.to_string()))?;
        write_atomic(&dir.join(item_file_name(i)), text.as_bytes())?;
    }
    let mut manifest = serde_json::to_value(&corpus.manifest).map_err(|e| Failure::usage(e.to_string()))?;
    manifest["config"] = serde_json::to_value(cfg).map_err(|e| Failure::usage(e.to_string()))?;
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn fit(a: &FitArgs) -> Result<(), Failure> {
    let reference_seq = read_sequence(&a.reference)?;
    let driven = read_sequence(&a.driven)?;
    let gt = a.gt.as_deref().map(read_sequence).transpose()?;
    if !(0.0..=1.0).contains(&a.conf_threshold) {
        return Err(Failure::usage(format!("conf threshold must lie in [0, 1], got {}", a.conf_threshold)));
    }
    let reference = reference_seq.frames.get(a.reference_frame).ok_or_else(|| {
        Failure::usage(format!("reference has {} frames, asked for frame {}", reference_seq.len(), a.reference_frame))
    })?;
    let selection = if a.all_frames { FrameSelection::WeightedStack } else { FrameSelection::First };
    let transform = fit_sequence(&driven, reference, a.conf_threshold, selection)?;
    let aligned = transform.apply_sequence(&driven);

    let dis = match &gt {
        Some(g) => Some(json!({
            "unaligned": dis_metric(&driven, g)?,
            "aligned": dis_metric(&aligned, g)?,
        })),
        None => None,
    };
    create_dir(&a.out)?;
    write_json(&a.out.join("transform.json"), &transform)?;
    let mut aligned_text = aligned.to_json_pretty();
    aligned_text.push('\n');
    write_atomic(&a.out.join("aligned.json"), aligned_text.as_bytes())?;
    let config = json!({
        "reference": a.reference,
        "driven": a.driven,
        "gt": a.gt,
        "reference_frame": a.reference_frame,
        "conf_threshold": a.conf_threshold,
        "frames": if a.all_frames { "weighted-stack" } else { "first" },
    });
    let summary = json!({
        "theta_deg": transform.theta().to_degrees(),
        "scale": transform.scale,
        "translation": [transform.translation.x, transform.translation.y],
        "correspondences": common_keypoints(&driven.frames[0], reference, a.conf_threshold).len(),
        "dis": dis,
    });
    write_json(&a.out.join("manifest.json"), &RunManifest::new("fit", None, config, &summary))?;
    println!("{}", serde_json::to_string(&summary).unwrap_or_default());
    Ok(())
}

fn open_corpus(dir: &Path) -> Result<Corpus, Failure> {
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::usage(format!("{} is not a corpus directory (no manifest.json)", dir.display())));
    }
    load_corpus(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let (mut cfg, _) = load_config::<TrainConfig>(a.config.as_deref())?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.conf_threshold = a.conf_threshold.unwrap_or(cfg.conf_threshold);
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let corpus = open_corpus(&a.corpus)?;
    let model = AlignModel::new();
    let quiet = a.quiet;
    let outcome = train_with(&model, corpus.train(), corpus.val(), &cfg, EXEC, |row| {
        if !quiet {
            let val = row.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
            eprintln!("epoch {:>3}  train {:.6}  val {val}", row.epoch, row.train_loss);
        }
    })?;

    create_dir(&a.out)?;
    write_atomic(&a.out.join("weights.json"), outcome.params.to_weights_json().as_bytes())?;
    write_atomic(&a.out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
    let best = outcome.best_row();
    let summary = json!({
        "corpus": a.corpus,
        "corpus_digest": corpus.manifest.digest,
        "n_train": corpus.train().len(),
        "n_val": corpus.val().len(),
        "n_params": outcome.params.len(),
        "best_epoch": outcome.best_epoch,
        "best_train_loss": best.train_loss,
        "best_val_loss": best.val_loss,
        "epoch0_val_loss": outcome.history[0].val_loss,
    });
    write_json(&a.out.join("manifest.json"), &RunManifest::new("train", Some(cfg.seed), &cfg, summary))
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.conf_threshold) {
        return Err(Failure::usage(format!("conf threshold must lie in [0, 1], got {}", a.conf_threshold)));
    }
    let corpus = open_corpus(&a.corpus)?;
    let model = AlignModel::new();
    let params = match &a.weights {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            model.load_weights(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => model.init(a.seed),
    };
    let items: &[CorpusItem] = match a.split {
        Split::Train => corpus.train(),
        Split::Val => corpus.val(),
        Split::Test => corpus.test(),
        Split::All => &corpus.items,
    };
    let report = evaluate(&model, &params, items, a.conf_threshold, EXEC)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    let config = json!({
        "corpus": a.corpus,
        "weights": a.weights,
        "split": format!("{:?}", a.split).to_lowercase(),
        "conf_threshold": a.conf_threshold,
    });
    let summary = json!({ "corpus_digest": corpus.manifest.digest, "rows": report.rows });
    write_json(&a.out.join("manifest.json"), &RunManifest::new("eval", Some(a.seed), config, summary))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn guided_churn_defaults(cfg: &mut SamplerConfig, raw: &Value) {
    let defaults = SamplerConfig::guided(GuidanceConfig::new(GuidanceLoss::quadratic_to(vec![0.0])));
    if raw.get("s_churn").is_none() {
        cfg.s_churn = defaults.s_churn;
    }
    if raw.get("s_tmin").is_none() {
        cfg.s_tmin = defaults.s_tmin;
    }
    if raw.get("s_tmax").is_none() {
        cfg.s_tmax = defaults.s_tmax;
    }
}

fn resolve_sampler(a: &SampleArgs, dim: usize) -> Result<SamplerConfig, Failure> {
    let (mut cfg, raw) = load_config::<SamplerConfig>(a.config.as_deref())?;
    if let Some(n) = a.n_steps {
        cfg.n_steps = n as usize;
    }
    if a.no_guidance {
        cfg.guidance = None;
    }
    if let Some(kind) = a.guidance {
        let target = a.target.clone().ok_or_else(|| Failure::usage("--guidance needs --target"))?;
        if target.len() != dim {
            return Err(Failure::usage(format!("--target has {} values, mixture dimension is {dim}", target.len())));
        }
        let identity: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let loss = match kind {
            LossKind::Quadratic => GuidanceLoss::Quadratic { a: identity, y: target },
            LossKind::Cosine => GuidanceLoss::Cosine { f: identity, y: target },
        };
        if cfg.guidance.is_none() {
            guided_churn_defaults(&mut cfg, &raw);
        }
        let mut g = cfg.guidance.take().unwrap_or_else(|| GuidanceConfig::new(loss.clone()));
        g.loss = loss;
        cfg.guidance = Some(g);
    } else if a.target.is_some() && !a.no_guidance {
        return Err(Failure::usage("--target needs --guidance"));
    }
    if let Some(g) = cfg.guidance.as_mut() {
        g.k = a.k.unwrap_or(g.k);
        g.eta = a.eta.unwrap_or(g.eta);
        if let Some(w) = &a.window {
            match w.as_slice() {
                [s, e] => g.window = [*s, *e],
                _ => return Err(Failure::usage("--window expects start,end")),
            }
        }
    } else if a.k.is_some() || a.eta.is_some() || a.window.is_some() {
        return Err(Failure::usage("--k, --eta and --window need guidance"));
    }
    if let Some(c) = a.churn {
        cfg.s_churn = c;
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(g) = &cfg.guidance {
        g.loss.validate(dim).map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(cfg)
}

pub fn sample(a: &SampleArgs) -> Result<(), Failure> {
    let gmm = match &a.gmm {
        Some(p) => {
            let g: GmmSpec =
                serde_json::from_slice(&read(p)?).map_err(|e| Failure::usage(format!("invalid mixture {}: {e}", p.display())))?;
            g.validate().map_err(|e| Failure::usage(format!("invalid mixture {}: {e}", p.display())))?;
            g
        }
        None => GmmSpec::equal_weights(&[vec![-2.0], vec![2.0]], 0.3)?,
    };
    if a.n_samples == 0 {
        return Err(Failure::usage("n-samples must be >= 1"));
    }
    let cfg = resolve_sampler(a, gmm.dim())?;
    let out = edm_sample(&gmm, &cfg, a.seed, a.n_samples, !a.no_trace, EXEC)?;

    create_dir(&a.out)?;
    write_atomic(&a.out.join("samples.csv"), out.samples_csv().as_bytes())?;
    if !a.no_trace {
        write_atomic(&a.out.join("trace.csv"), out.trace_csv().as_bytes())?;
    }
    let n = out.samples.len() as f64;
    let dim = gmm.dim();
    let mean: Vec<f64> = (0..dim).map(|j| out.samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> =
        (0..dim).map(|j| (out.samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    let guidance_loss = cfg.guidance.as_ref().map(|g| out.samples.iter().map(|s| g.loss.value(s)).sum::<f64>() / n);
    let summary = json!({
        "mixture": gmm,
        "n_samples": a.n_samples,
        "mode_shares": out.mode_shares(&gmm),
        "mean": mean,
        "std": std,
        "mean_guidance_loss": guidance_loss,
    });
    write_json(&a.out.join("manifest.json"), &RunManifest::new("sample", Some(a.seed), &cfg, &summary))?;
    println!("{}", serde_json::to_string(&summary["mode_shares"]).unwrap_or_default());
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<(), Failure> {
    let seq = read_sequence(&a.input)?;
    let fallback = |dim: u32| if dim > 1 { dim } else { 512 };
    let canvas = (a.width.unwrap_or(fallback(seq.width)), a.height.unwrap_or(fallback(seq.height)));
    if canvas.0 == 0 || canvas.1 == 0 {
        return Err(Failure::usage("canvas width and height must be >= 1"));
    }
    let unit = normalize(&seq);
    create_dir(&a.out)?;
    for (i, pose) in unit.frames.iter().enumerate() {
        write_atomic(&a.out.join(format!("frame_{i:04}.svg")), render_svg(pose, canvas).as_bytes())?;
    }
    let config = json!({ "input": a.input, "width": canvas.0, "height": canvas.1 });
    let summary = json!({ "frames": unit.frames.len() });
    write_json(&a.out.join("manifest.json"), &RunManifest::new("render", None, config, summary))?;
    eprintln!("wrote {} frames to {}", unit.frames.len(), a.out.display());
    Ok(())
}
