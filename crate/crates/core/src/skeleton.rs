//! 2-D skeleton pose sequences in the OpenPose BODY-18 layout.
//!
//! Keypoint indices: 0 nose, 1 neck, 2/5 right/left shoulder, 3/6 elbows,
//! 4/7 wrists, 8/11 hips, 9/12 knees, 10/13 ankles, 14/15 eyes, 16/17 ears.
//! A confidence of zero marks a keypoint as missing; its coordinates are
//! carried along but never read by the geometry code.

use std::fmt::Write as _;

use serde::de::Error as _;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of keypoints per pose.
pub const NUM_KEYPOINTS: usize = 18;

/// Default confidence threshold for correspondence selection.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;

/// Keypoint names in index order.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
];

/// Limb segments drawn by [`render_svg`]. They form a tree rooted at the neck.
pub const LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

/// Parent of each keypoint in the limb tree; the neck is the root.
pub const PARENT: [Option<usize>; NUM_KEYPOINTS] = [
    Some(1),
    None,
    Some(1),
    Some(2),
    Some(3),
    Some(1),
    Some(5),
    Some(6),
    Some(1),
    Some(8),
    Some(9),
    Some(1),
    Some(11),
    Some(12),
    Some(0),
    Some(0),
    Some(14),
    Some(15),
];

/// Keypoint indices ordered so that every parent precedes its children.
pub const TOPOLOGICAL_ORDER: [usize; NUM_KEYPOINTS] = [1, 0, 2, 5, 8, 11, 14, 15, 3, 6, 9, 12, 16, 17, 4, 7, 10, 13];

const LIMB_COLORS: [&str; 17] = [
    "#ff0000", "#ff5500", "#ffaa00", "#ffff00", "#aaff00", "#55ff00", "#00ff00", "#00ff55", "#00ffaa", "#00ffff", "#00aaff",
    "#0055ff", "#0000ff", "#5500ff", "#aa00ff", "#ff00ff", "#ff00aa",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

impl Keypoint {
    pub const MISSING: Keypoint = Keypoint { x: 0.0, y: 0.0, conf: 0.0 };

    pub fn new(x: f64, y: f64, conf: f64) -> Self {
        Self { x, y, conf }
    }

    pub fn is_present(&self) -> bool {
        self.conf > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
}

impl Pose {
    pub fn new(keypoints: [Keypoint; NUM_KEYPOINTS]) -> Self {
        Self { keypoints }
    }

    pub fn empty() -> Self {
        Self { keypoints: [Keypoint::MISSING; NUM_KEYPOINTS] }
    }

    /// A pose with every keypoint present at the given coordinates.
    pub fn from_points(points: &[[f64; 2]; NUM_KEYPOINTS]) -> Self {
        let mut keypoints = [Keypoint::MISSING; NUM_KEYPOINTS];
        for (k, p) in keypoints.iter_mut().zip(points) {
            *k = Keypoint::new(p[0], p[1], 1.0);
        }
        Self { keypoints }
    }

    pub fn present_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_present()).count()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.keypoints[i].x, self.keypoints[i].y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Pose>,
}

impl PoseSequence {
    /// Builds and validates a sequence.
    pub fn new(fps: f64, width: u32, height: u32, frames: Vec<Pose>) -> Result<Self> {
        let seq = Self { fps, width, height, frames };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::Validation(format!("fps must be > 0, got {}", self.fps)));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::Validation("width and height must be >= 1".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::Validation("sequence has no frames".into()));
        }
        for (f, pose) in self.frames.iter().enumerate() {
            for (i, k) in pose.keypoints.iter().enumerate() {
                if !(0.0..=1.0).contains(&k.conf) {
                    return Err(Error::Validation(format!("frame {f} keypoint {i}: conf {} outside [0,1]", k.conf)));
                }
                if k.is_present() && !(k.x.is_finite() && k.y.is_finite()) {
                    return Err(Error::Validation(format!("frame {f} keypoint {i}: non-finite coordinate")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&WireSequence::from(self)).expect("pose sequence serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&WireSequence::from(self)).expect("pose sequence serializes")
    }
}

/// Parses a pose-sequence JSON document and validates it.
pub fn parse_pose_sequence(bytes: &[u8]) -> Result<PoseSequence> {
    let wire: WireSequence = serde_json::from_slice(bytes).map_err(|e| Error::Parse(e.to_string()))?;
    wire.try_into()
}

/// Converts pixel coordinates to the unit square. Missing keypoints keep
/// their raw coordinates.
pub fn normalize(seq: &PoseSequence) -> PoseSequence {
    let (w, h) = (seq.width as f64, seq.height as f64);
    let frames = seq
        .frames
        .iter()
        .map(|pose| {
            let mut out = pose.clone();
            for k in out.keypoints.iter_mut().filter(|k| k.is_present()) {
                k.x /= w;
                k.y /= h;
            }
            out
        })
        .collect();
    PoseSequence { fps: seq.fps, width: 1, height: 1, frames }
}

/// Indices present with confidence at least `conf_threshold` in both poses,
/// ascending. A zero threshold still requires presence (conf > 0).
pub fn common_keypoints(a: &Pose, b: &Pose, conf_threshold: f64) -> Vec<usize> {
    (0..NUM_KEYPOINTS)
        .filter(|&i| {
            let (ka, kb) = (a.keypoints[i], b.keypoints[i]);
            ka.is_present() && kb.is_present() && ka.conf >= conf_threshold && kb.conf >= conf_threshold
        })
        .collect()
}

/// Renders a normalized pose onto a `width`×`height` canvas.
///
/// Output is byte-for-byte deterministic: coordinates are printed with
/// three decimals, limbs first and then joints, both in table order.
pub fn render_svg(pose: &Pose, canvas: (u32, u32)) -> String {
    let (w, h) = canvas;
    let (fw, fh) = (w as f64, h as f64);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="black"/>"#);
    for (&(a, b), color) in LIMBS.iter().zip(LIMB_COLORS) {
        let (ka, kb) = (pose.keypoints[a], pose.keypoints[b]);
        if ka.is_present() && kb.is_present() {
            let _ = writeln!(
                svg,
                r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="4"/>"#,
                ka.x * fw,
                ka.y * fh,
                kb.x * fw,
                kb.y * fh
            );
        }
    }
    for k in pose.keypoints.iter().filter(|k| k.is_present()) {
        let _ = writeln!(svg, r#"<circle cx="{:.3}" cy="{:.3}" r="4" fill="white"/>"#, k.x * fw, k.y * fh);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Rounds to nine significant digits, the precision of the JSON format.
pub fn round_sig9(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.8e}").parse().unwrap_or(x)
    } else {
        x
    }
}

struct Sig9(f64);

impl Serialize for Sig9 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(round_sig9(self.0))
    }
}

#[derive(Serialize, Deserialize)]
struct WireSequence {
    #[serde(serialize_with = "ser_sig9")]
    fps: f64,
    width: u32,
    height: u32,
    frames: Vec<WireFrame>,
}

#[derive(Serialize, Deserialize)]
struct WireFrame {
    #[serde(serialize_with = "ser_keypoints")]
    keypoints: Vec<Option<[f64; 3]>>,
}

fn ser_sig9<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    Sig9(*x).serialize(s)
}

fn ser_keypoints<S: Serializer>(kps: &[Option<[f64; 3]>], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(kps.len()))?;
    for k in kps {
        match k {
            Some([x, y, c]) => seq.serialize_element(&[Sig9(*x), Sig9(*y), Sig9(*c)])?,
            None => seq.serialize_element(&Option::<[f64; 3]>::None)?,
        }
    }
    seq.end()
}

impl From<&PoseSequence> for WireSequence {
    fn from(seq: &PoseSequence) -> Self {
        WireSequence {
            fps: seq.fps,
            width: seq.width,
            height: seq.height,
            frames: seq
                .frames
                .iter()
                .map(|p| WireFrame { keypoints: p.keypoints.iter().map(|k| Some([k.x, k.y, k.conf])).collect() })
                .collect(),
        }
    }
}

impl TryFrom<WireSequence> for PoseSequence {
    type Error = Error;

    fn try_from(wire: WireSequence) -> Result<Self> {
        let mut frames = Vec::with_capacity(wire.frames.len());
        for (f, frame) in wire.frames.into_iter().enumerate() {
            if frame.keypoints.len() != NUM_KEYPOINTS {
                return Err(Error::KeypointCount { frame: f, count: frame.keypoints.len() });
            }
            let mut keypoints = [Keypoint::MISSING; NUM_KEYPOINTS];
            for (slot, k) in keypoints.iter_mut().zip(frame.keypoints) {
                if let Some([x, y, c]) = k {
                    *slot = Keypoint::new(x, y, c);
                }
            }
            frames.push(Pose { keypoints });
        }
        PoseSequence::new(wire.fps, wire.width, wire.height, frames)
    }
}

impl Serialize for PoseSequence {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        WireSequence::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = WireSequence::deserialize(d)?;
        wire.try_into().map_err(D::Error::custom)
    }
}

/// Serializes a single pose with the frame schema (`{"keypoints": [...]}`).
impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        WireFrame { keypoints: self.keypoints.iter().map(|k| Some([k.x, k.y, k.conf])).collect() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let frame = WireFrame::deserialize(d)?;
        if frame.keypoints.len() != NUM_KEYPOINTS {
            return Err(D::Error::custom(Error::KeypointCount { frame: 0, count: frame.keypoints.len() }));
        }
        let mut keypoints = [Keypoint::MISSING; NUM_KEYPOINTS];
        for (slot, k) in keypoints.iter_mut().zip(frame.keypoints) {
            if let Some([x, y, c]) = k {
                if !(0.0..=1.0).contains(&c) {
                    return Err(D::Error::custom(format!("conf {c} outside [0,1]")));
                }
                *slot = Keypoint::new(x, y, c);
            }
        }
        Ok(Pose { keypoints })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n_kp: usize, kp: &str, fps: &str) -> String {
        let kps = vec![kp; n_kp].join(",");
        format!(r#"{{"fps": {fps}, "width": 100, "height": 100, "frames": [{{"keypoints": [{kps}]}}]}}"#)
    }

    #[test]
    fn parses_minimal_document() {
        let seq = parse_pose_sequence(doc(18, "[0,0,1]", "30").as_bytes()).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.frames[0].keypoints.iter().all(|k| k.conf == 1.0));
        assert_eq!((seq.width, seq.height), (100, 100));
    }

    #[test]
    fn rejects_wrong_keypoint_count() {
        let err = parse_pose_sequence(doc(17, "[0,0,1]", "30").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::KeypointCount { count: 17, .. }));
        assert!(err.to_string().contains("keypoint count ≠ 18"));
    }

    #[test]
    fn rejects_bad_confidence_and_fps() {
        assert!(matches!(parse_pose_sequence(doc(18, "[0,0,1.5]", "30").as_bytes()), Err(Error::Validation(_))));
        assert!(matches!(parse_pose_sequence(doc(18, "[0,0,1]", "0").as_bytes()), Err(Error::Validation(_))));
        assert!(matches!(parse_pose_sequence(b"{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn null_keypoints_are_missing() {
        let mut kps = vec!["[1,2,1]"; 17];
        kps.push("null");
        let d = format!(r#"{{"fps":30,"width":10,"height":10,"frames":[{{"keypoints":[{}]}}]}}"#, kps.join(","));
        let seq = parse_pose_sequence(d.as_bytes()).unwrap();
        assert_eq!(seq.frames[0].keypoints[17].conf, 0.0);
        assert_eq!(seq.frames[0].present_count(), 17);
    }

    #[test]
    fn normalize_divides_and_is_idempotent() {
        let mut pose = Pose::empty();
        pose.keypoints[0] = Keypoint::new(50.0, 25.0, 1.0);
        pose.keypoints[1] = Keypoint::new(70.0, 30.0, 0.0);
        let seq = PoseSequence::new(30.0, 100, 50, vec![pose]).unwrap();
        let n = normalize(&seq);
        assert_eq!(n.frames[0].point(0), [0.5, 0.5]);
        // missing keypoint passes through untouched
        assert_eq!(n.frames[0].keypoints[1], Keypoint::new(70.0, 30.0, 0.0));
        assert_eq!((n.width, n.height), (1, 1));
        assert_eq!(normalize(&n), n);
    }

    #[test]
    fn common_keypoints_cases() {
        let full = Pose::from_points(&[[0.5, 0.5]; 18]);
        assert_eq!(common_keypoints(&full, &full, 0.3), (0..18).collect::<Vec<_>>());
        let mut a = full.clone();
        a.keypoints[5].conf = 0.0;
        let idx = common_keypoints(&a, &full, 0.3);
        assert_eq!(idx.len(), 17);
        assert!(!idx.contains(&5));
        let mut b = full.clone();
        for k in b.keypoints.iter_mut() {
            k.conf = 0.9;
        }
        assert!(common_keypoints(&b, &b, 1.0).is_empty());
    }

    #[test]
    fn render_counts_and_determinism() {
        let empty = Pose::empty();
        let svg = render_svg(&empty, (64, 64));
        assert_eq!(svg.matches("<circle").count(), 0);
        assert_eq!(svg.matches("<line").count(), 0);

        let mut pose = Pose::empty();
        pose.keypoints[1] = Keypoint::new(0.5, 0.2, 1.0);
        pose.keypoints[2] = Keypoint::new(0.4, 0.25, 1.0);
        let svg = render_svg(&pose, (64, 64));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert_eq!(svg.matches("<line").count(), 1);
        assert_eq!(svg, render_svg(&pose, (64, 64)));
    }

    #[test]
    fn limb_table_matches_parent_tree() {
        for &(a, b) in &LIMBS {
            assert_eq!(PARENT[b], Some(a));
        }
        let mut seen = [false; NUM_KEYPOINTS];
        for &i in &TOPOLOGICAL_ORDER {
            if let Some(p) = PARENT[i] {
                assert!(seen[p]);
            }
            seen[i] = true;
        }
    }

    #[test]
    fn serializes_nine_significant_digits() {
        let mut pose = Pose::empty();
        pose.keypoints[0] = Keypoint::new(0.123456789123, 2.0 / 3.0, 1.0);
        let seq = PoseSequence::new(30.0, 1, 1, vec![pose]).unwrap();
        let s = seq.to_json_string();
        assert!(s.starts_with(r#"{"fps":30.0,"width":1,"height":1,"frames":"#));
        assert!(s.contains("0.123456789,0.666666667,1.0"));
    }
}
