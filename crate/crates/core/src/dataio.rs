//! Sequence files, Diff features, frame-length normalization, augmentation
//! and the synthetic action generator.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FramePose, SkeletonTemplate};
use crate::net::{FeatureTensor, Rng};
use crate::training::mix_seed;

/// A skeleton clip of one or two subjects bound to a template.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub name: String,
    pub template: String,
    pub label: Option<usize>,
    /// `subjects[s][t]`; every subject has the same frame count.
    pub subjects: Vec<Vec<FramePose>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceFile {
    template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    frames: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    second_subject: Option<Vec<Vec<Vec<f64>>>>,
}

impl SkeletonSequence {
    pub fn frame_count(&self) -> usize {
        self.subjects[0].len()
    }

    pub fn subject_count(&self) -> usize {
        self.subjects.len()
    }

    pub fn joint_count(&self) -> usize {
        self.subjects[0][0].joint_count()
    }

    pub fn dims(&self) -> usize {
        self.subjects[0][0].dims()
    }

    /// Frames of the first subject, the one centralities are computed from.
    pub fn primary(&self) -> &[FramePose] {
        &self.subjects[0]
    }

    /// Applies `f` to every subject's frame list.
    fn map_subjects(&self, mut f: impl FnMut(&[FramePose]) -> Vec<FramePose>) -> SkeletonSequence {
        SkeletonSequence {
            name: self.name.clone(),
            template: self.template.clone(),
            label: self.label,
            subjects: self.subjects.iter().map(|s| f(s)).collect(),
        }
    }
}

fn frames_to_poses(
    frames: &[Vec<Vec<f64>>],
    confidence: Option<&[Vec<f64>]>,
    template: &SkeletonTemplate,
    id: &str,
) -> Result<Vec<FramePose>> {
    if frames.is_empty() {
        return Err(Error::SchemaViolation("sequence has no frames".into()));
    }
    if let Some(c) = confidence {
        if c.len() != frames.len() {
            return Err(Error::SchemaViolation(format!(
                "{} confidence rows for {} frames",
                c.len(),
                frames.len()
            )));
        }
    }
    frames
        .iter()
        .enumerate()
        .map(|(t, joints)| {
            if joints.len() != template.joint_count {
                return Err(Error::UnknownTemplate(format!(
                    "{id}: frame {t} has {} joints, template has {}",
                    joints.len(),
                    template.joint_count
                )));
            }
            if let Some(j) = joints.iter().position(|p| p.len() != template.dims) {
                return Err(Error::UnknownTemplate(format!(
                    "{id}: joint {j} of frame {t} has {} coordinates, template has {}",
                    joints[j].len(),
                    template.dims
                )));
            }
            let conf = confidence.map(|c| c[t].clone());
            if let Some(c) = &conf {
                if c.len() != joints.len() {
                    return Err(Error::SchemaViolation(format!("confidence row {t} length {}", c.len())));
                }
            }
            FramePose::new(joints.concat(), template.dims, conf).map_err(|e| match e {
                Error::DimensionMismatch(m) => Error::SchemaViolation(m),
                other => other,
            })
        })
        .collect()
}

/// Parses sequence JSON. Custom template ids are looked up as
/// `<template_dir>/<id>.json`.
pub fn parse_sequence_str(text: &str, fallback_name: &str, template_dir: Option<&Path>) -> Result<SkeletonSequence> {
    let file: SequenceFile = serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
    let template = SkeletonTemplate::resolve(&file.template, template_dir)?;
    let primary = frames_to_poses(&file.frames, file.confidence.as_deref(), &template, &file.template)?;
    let mut subjects = vec![primary];
    if let Some(second) = &file.second_subject {
        if second.len() != file.frames.len() {
            return Err(Error::SchemaViolation(format!(
                "second subject has {} frames, first has {}",
                second.len(),
                file.frames.len()
            )));
        }
        subjects.push(frames_to_poses(second, None, &template, &file.template)?);
    }
    Ok(SkeletonSequence {
        name: file.name.unwrap_or_else(|| fallback_name.to_string()),
        template: file.template,
        label: file.label,
        subjects,
    })
}

/// Reads a sequence file; templates not built in are searched next to it.
pub fn parse_sequence(path: &Path) -> Result<SkeletonSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
    parse_sequence_str(&text, stem, path.parent())
}

fn poses_to_frames(poses: &[FramePose]) -> Vec<Vec<Vec<f64>>> {
    poses
        .iter()
        .map(|p| (0..p.joint_count()).map(|j| p.joint(j).to_vec()).collect())
        .collect()
}

pub fn write_sequence_string(seq: &SkeletonSequence) -> Result<String> {
    let confidence = seq.subjects[0]
        .iter()
        .map(|p| p.confidence().map(<[f64]>::to_vec))
        .collect::<Option<Vec<_>>>();
    let file = SequenceFile {
        template: seq.template.clone(),
        name: Some(seq.name.clone()),
        label: seq.label,
        frames: poses_to_frames(&seq.subjects[0]),
        confidence,
        second_subject: seq.subjects.get(1).map(|s| poses_to_frames(s)),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn write_sequence(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    std::fs::write(path, write_sequence_string(seq)?).map_err(|e| Error::io(path, e))
}

/// Positions, first differences and second differences stacked on the
/// channel axis: `[subjects, 3·dims, T, N]`. Each difference order is taken
/// on the zero-padded order below it, so frame 0 of velocities and
/// accelerations is zero and acceleration at frame 1 equals velocity at
/// frame 1. Missing subjects up to `subjects` are zero-filled.
pub fn diff_features(seq: &SkeletonSequence, subjects: usize) -> Result<FeatureTensor> {
    if seq.subject_count() > subjects {
        return Err(Error::ShapeMismatch(format!(
            "sequence {} has {} subjects, model takes {subjects}",
            seq.name,
            seq.subject_count()
        )));
    }
    let (t_len, n, d) = (seq.frame_count(), seq.joint_count(), seq.dims());
    let mut out = FeatureTensor::zeros([subjects, 3 * d, t_len, n]);
    for (s, frames) in seq.subjects.iter().enumerate() {
        for t in 0..t_len {
            for j in 0..n {
                for k in 0..d {
                    let at = |dt: usize| frames[t - dt].joint(j)[k];
                    let pos = at(0);
                    let vel = if t >= 1 { pos - at(1) } else { 0.0 };
                    let prev_vel = if t >= 2 { at(1) - at(2) } else { 0.0 };
                    let acc = if t >= 1 { vel - prev_vel } else { 0.0 };
                    out.set(s, k, t, j, pos);
                    out.set(s, d + k, t, j, vel);
                    out.set(s, 2 * d + k, t, j, acc);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    #[default]
    Repeat,
    RandomCrop,
}

impl std::str::FromStr for LengthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repeat" => Ok(LengthMode::Repeat),
            "random_crop" => Ok(LengthMode::RandomCrop),
            other => Err(Error::Config(format!("unknown length mode {other:?}"))),
        }
    }
}

/// Source frame index for each of the `target` output frames.
pub fn length_indices(frames: usize, target: usize, mode: LengthMode, rng: &mut Rng) -> Vec<usize> {
    assert!(frames >= 1, "sequence has no frames");
    match mode {
        LengthMode::RandomCrop if frames > target => {
            let mut idx = sample(rng, frames, target).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..target).map(|t| t % frames).collect(),
    }
}

pub fn normalize_length(seq: &SkeletonSequence, target: usize, mode: LengthMode, rng: &mut Rng) -> SkeletonSequence {
    let idx = length_indices(seq.frame_count(), target, mode, rng);
    seq.map_subjects(|frames| idx.iter().map(|&i| frames[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Each axis of the translation is drawn from `±max_translation`.
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Coordinate axis treated as vertical for 3-D rotations.
    pub vertical_axis: usize,
    /// Independent per-joint, per-frame noise amplitude; off by default.
    pub joint_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_translation: 0.0,
            max_rotation_deg: 0.0,
            vertical_axis: 2,
            joint_jitter: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.max_translation == 0.0 && self.max_rotation_deg == 0.0 && self.joint_jitter == 0.0
    }
}

/// Rotation by `angle` radians about the vertical axis (3-D) or in the plane (2-D).
pub fn rotate_point(p: &[f64], angle: f64, vertical_axis: usize) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    match p.len() {
        2 => vec![c * p[0] - s * p[1], s * p[0] + c * p[1]],
        3 => {
            let (a, b) = match vertical_axis {
                0 => (1, 2),
                1 => (2, 0),
                _ => (0, 1),
            };
            let mut q = p.to_vec();
            q[a] = c * p[a] - s * p[b];
            q[b] = s * p[a] + c * p[b];
            q
        }
        _ => p.to_vec(),
    }
}

/// One rigid rotation and translation shared by every frame and subject,
/// then optional per-joint jitter.
pub fn augment(seq: &SkeletonSequence, rng: &mut Rng, config: &AugmentConfig) -> SkeletonSequence {
    let d = seq.dims();
    let max_angle = config.max_rotation_deg.to_radians();
    let angle = if max_angle > 0.0 { rng.gen_range(-max_angle..=max_angle) } else { 0.0 };
    let shift: Vec<f64> = (0..d)
        .map(|_| {
            if config.max_translation > 0.0 {
                rng.gen_range(-config.max_translation..=config.max_translation)
            } else {
                0.0
            }
        })
        .collect();
    let jitter = config.joint_jitter;
    seq.map_subjects(|frames| {
        frames
            .iter()
            .map(|pose| {
                pose.map_joints(|p| {
                    let mut q = rotate_point(p, angle, config.vertical_axis);
                    for (v, s) in q.iter_mut().zip(&shift) {
                        *v += s;
                        if jitter > 0.0 {
                            *v += rng.gen_range(-jitter..=jitter);
                        }
                    }
                    q
                })
            })
            .collect()
    })
}

/// Motion families of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Alternating leg swing with knee flexion and arm counter-swing.
    Walk,
    /// Periodic forward pitch of the trunk about the pelvis.
    Bow,
    /// Right arm raised sideways, forearm swinging.
    Wave,
    /// Upright pose with slight sway.
    Stand,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [Archetype::Walk, Archetype::Bow, Archetype::Wave, Archetype::Stand];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Walk => "walk",
            Archetype::Bow => "bow",
            Archetype::Wave => "wave",
            Archetype::Stand => "stand",
        }
    }
}

impl std::str::FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown archetype {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<Archetype>,
    pub per_class: usize,
    pub frames: usize,
    pub seed: u64,
    /// Uniform per-coordinate noise amplitude in metres.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: Archetype::ALL.to_vec(),
            per_class: 20,
            frames: 32,
            seed: 0,
            noise: 0.005,
        }
    }
}

/// Upright rest pose of the 25-joint template, metres, z up, facing +y.
const REST_POSE: [[f64; 3]; 25] = [
    [0.0, 0.0, 1.00],
    [0.0, 0.0, 1.25],
    [0.0, 0.0, 1.55],
    [0.0, 0.02, 1.70],
    [-0.18, 0.0, 1.45],
    [-0.20, 0.0, 1.18],
    [-0.22, 0.0, 0.95],
    [-0.22, 0.0, 0.88],
    [0.18, 0.0, 1.45],
    [0.20, 0.0, 1.18],
    [0.22, 0.0, 0.95],
    [0.22, 0.0, 0.88],
    [-0.10, 0.0, 0.95],
    [-0.10, 0.0, 0.52],
    [-0.10, 0.0, 0.08],
    [-0.10, 0.10, 0.02],
    [0.10, 0.0, 0.95],
    [0.10, 0.0, 0.52],
    [0.10, 0.0, 0.08],
    [0.10, 0.10, 0.02],
    [0.0, 0.0, 1.45],
    [-0.22, 0.0, 0.80],
    [-0.19, 0.03, 0.86],
    [0.22, 0.0, 0.80],
    [0.19, 0.03, 0.86],
];

/// Joints moved by rotating `pivot`'s subtree (pivot excluded).
fn subtree(edges: &[(usize, usize)], pivot: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![pivot];
    while let Some(j) = stack.pop() {
        for &(a, b) in edges {
            if a == j {
                out.push(b);
                stack.push(b);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Rotates `joints` about `pivot` by `angle` around principal `axis`.
fn rotate_about(pose: &mut [[f64; 3]], joints: &[usize], pivot: [f64; 3], axis: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    for &j in joints {
        let mut q = [0.0; 3];
        for k in 0..3 {
            q[k] = pose[j][k] - pivot[k];
        }
        let (qa, qb) = (q[a], q[b]);
        q[a] = c * qa - s * qb;
        q[b] = s * qa + c * qb;
        for k in 0..3 {
            pose[j][k] = q[k] + pivot[k];
        }
    }
}

struct MotionParams {
    amplitude: f64,
    cycles: f64,
    phase: f64,
    scale: f64,
    yaw: f64,
    offset: [f64; 2],
}

fn pose_at(archetype: Archetype, edges: &[(usize, usize)], m: &MotionParams, t: usize, frames: usize) -> [[f64; 3]; 25] {
    let mut pose = REST_POSE;
    let phi = std::f64::consts::TAU * m.cycles * t as f64 / frames as f64 + m.phase;
    let a = m.amplitude;
    let rot = |pose: &mut [[f64; 3]; 25], pivot: usize, axis: usize, angle: f64, include: &[usize]| {
        let mut joints = subtree(edges, pivot);
        joints.extend_from_slice(include);
        let p = pose[pivot];
        rotate_about(pose, &joints, p, axis, angle);
    };
    match archetype {
        Archetype::Walk => {
            let swing = 0.5 * a * phi.sin();
            // Knees first, then hips, so the hip rotation carries the bent shank.
            rot(&mut pose, 13, 0, -0.6 * a * (0.5 - 0.5 * (phi + 0.5).cos()), &[]);
            rot(&mut pose, 17, 0, -0.6 * a * (0.5 + 0.5 * (phi + 0.5).cos()), &[]);
            rot(&mut pose, 12, 0, swing, &[]);
            rot(&mut pose, 16, 0, -swing, &[]);
            rot(&mut pose, 4, 0, -0.6 * swing, &[]);
            rot(&mut pose, 8, 0, 0.6 * swing, &[]);
        }
        Archetype::Bow => {
            let pitch = -0.9 * a * (0.5 - 0.5 * phi.cos());
            let mut upper = subtree(edges, 20);
            upper.extend([1, 20]);
            let pivot = pose[0];
            rotate_about(&mut pose, &upper, pivot, 0, pitch);
        }
        Archetype::Wave => {
            let raise = -2.3 * a.min(1.1);
            rot(&mut pose, 9, 1, 0.6 * a * phi.sin(), &[]);
            rot(&mut pose, 8, 1, raise, &[]);
        }
        Archetype::Stand => {
            let sway = 0.03 * a * phi.sin();
            let all: Vec<usize> = (0..25).collect();
            let pivot = [0.0, 0.0, 0.0];
            rotate_about(&mut pose, &all, pivot, 0, sway);
        }
    }
    for p in &mut pose {
        let mut q = rotate_point(p, m.yaw, 2);
        for k in 0..3 {
            q[k] *= m.scale;
        }
        q[0] += m.offset[0];
        q[1] += m.offset[1];
        p.copy_from_slice(&q);
    }
    pose
}

/// One synthetic clip on the `ntu25` template.
pub fn synth_sequence(archetype: Archetype, frames: usize, noise: f64, name: &str, label: usize, rng: &mut Rng) -> Result<SkeletonSequence> {
    if frames == 0 {
        return Err(Error::Config("synthetic clips need at least one frame".into()));
    }
    let template = SkeletonTemplate::builtin("ntu25").ok_or_else(|| Error::UnknownTemplate("ntu25".into()))?;
    let params = MotionParams {
        amplitude: rng.gen_range(0.8..1.2),
        cycles: rng.gen_range(1.5..2.5),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        scale: rng.gen_range(0.9..1.1),
        yaw: rng.gen_range(-0.3..0.3),
        offset: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)],
    };
    let poses = (0..frames)
        .map(|t| {
            let pose = pose_at(archetype, &template.edges, &params, t, frames);
            let coords: Vec<f64> = pose
                .iter()
                .flatten()
                .map(|&v| if noise > 0.0 { v + rng.gen_range(-noise..=noise) } else { v })
                .collect();
            FramePose::new(coords, 3, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SkeletonSequence {
        name: name.to_string(),
        template: "ntu25".into(),
        label: Some(label),
        subjects: vec![poses],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

/// Writes `<name>.json` files and `manifest.csv` into `dir`; returns the manifest rows.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    if spec.per_class == 0 || spec.classes.is_empty() {
        return Err(Error::Config("need at least one class and one sample per class".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (label, &arch) in spec.classes.iter().enumerate() {
        for k in 0..spec.per_class {
            let name = format!("{}_{k:03}", arch.name());
            let mut rng = Rng::seed_from_u64(mix_seed(spec.seed, ((label as u64) << 32) | k as u64));
            let seq = synth_sequence(arch, spec.frames, spec.noise, &name, label, &mut rng)?;
            let file = format!("{name}.json");
            write_sequence(&seq, &dir.join(&file))?;
            entries.push(ManifestEntry { path: file, label });
        }
    }
    write_manifest(&entries, &dir.join("manifest.csv"))?;
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `path,label` rows; paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::SchemaViolation(format!("{}: header must be path,label", path.display())));
    }
    r.deserialize::<ManifestEntry>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            Ok((base.join(row.path), row.label))
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::SchemaViolation(format!("{}: {e}", path.display()))
    }
}
