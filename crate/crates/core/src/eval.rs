//! Keypoint evaluation against synthetic ground truth.
//!
//! Keypoints are `(row, col)` pixel coordinates, one list per frame. A
//! frame's pleura counts as detected when any keypoint row lies within δ
//! pixels of the true pleura row; no slot is assigned to the pleura.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synth::GroundTruth;

pub type Keypoints = Vec<[f64; 2]>;

/// Pleura tolerance at 64×64, scaled linearly with frame size.
pub fn default_delta(size: usize) -> f64 {
    5.0 * size as f64 / 64.0
}

pub fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn check_lengths(kps: &[Keypoints], truth: &GroundTruth) -> Result<()> {
    if kps.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} keypoint frames but {} truth records",
            kps.len(),
            truth.len()
        )));
    }
    if let Some(i) = kps.iter().position(|k| k.is_empty()) {
        return Err(Error::invalid(format!("frame {i} has no keypoints")));
    }
    Ok(())
}

fn nearest(kps: &[[f64; 2]], axis: usize, v: f64) -> f64 {
    kps.iter().map(|k| (k[axis] - v).abs()).fold(f64::INFINITY, f64::min)
}

/// Per-frame nearest keypoint-row distance to the pleura.
pub fn pleura_distances(kps: &[Keypoints], truth: &GroundTruth) -> Result<Vec<f64>> {
    check_lengths(kps, truth)?;
    Ok(kps
        .iter()
        .zip(&truth.frames)
        .map(|(k, t)| nearest(k, 0, t.pleura_row))
        .collect())
}

/// `(correct, total, accuracy)`.
pub fn pleura_accuracy(kps: &[Keypoints], truth: &GroundTruth, delta: f64) -> Result<(usize, usize, f64)> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("delta must be > 0, got {delta}")));
    }
    let d = pleura_distances(kps, truth)?;
    let correct = d.iter().filter(|&&x| x <= delta).count();
    Ok((correct, d.len(), accuracy(correct, d.len())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkStats {
    pub name: &'static str,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn stats(name: &'static str, mut d: Vec<f64>) -> Option<LandmarkStats> {
    if d.is_empty() {
        return None;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Some(LandmarkStats {
        name,
        count: d.len(),
        mean,
        median: median(&mut d),
    })
}

/// Distance from every truth landmark to its nearest keypoint (rows for
/// pleura and A-lines, columns for B-lines). Landmark types absent from the
/// truth are omitted.
pub fn landmark_distance(kps: &[Keypoints], truth: &GroundTruth) -> Result<Vec<LandmarkStats>> {
    check_lengths(kps, truth)?;
    let (mut pleura, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new());
    for (k, t) in kps.iter().zip(&truth.frames) {
        pleura.push(nearest(k, 0, t.pleura_row));
        a.extend(t.a_line_rows.iter().map(|&r| nearest(k, 0, r)));
        b.extend(t.b_line_cols.iter().map(|&c| nearest(k, 1, c)));
    }
    Ok([stats("pleura", pleura), stats("a_line", a), stats("b_line", b)]
        .into_iter()
        .flatten()
        .collect())
}

/// Mean Euclidean displacement of each slot between consecutive frames.
pub fn temporal_jitter(kps: &[Keypoints]) -> Result<Vec<f64>> {
    if kps.len() < 2 {
        return Err(Error::invalid("temporal jitter needs at least two frames"));
    }
    let k = kps[0].len();
    if let Some(i) = kps.iter().position(|f| f.len() != k) {
        return Err(Error::invalid(format!(
            "frame {i} has {} keypoints, frame 0 has {k}",
            kps[i].len()
        )));
    }
    let steps = (kps.len() - 1) as f64;
    Ok((0..k)
        .map(|s| {
            kps.windows(2)
                .map(|w| (w[1][s][0] - w[0][s][0]).hypot(w[1][s][1] - w[0][s][1]))
                .sum::<f64>()
                / steps
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub delta: f64,
    pub frames_total: usize,
    pub frames_pleura_correct: usize,
    pub pleura_accuracy: f64,
    pub landmarks: Vec<LandmarkStats>,
    /// Per slot; empty for single-frame inputs.
    pub jitter: Vec<f64>,
}

const LANDMARKS: [&str; 3] = ["pleura", "a_line", "b_line"];

pub fn evaluate(kps: &[Keypoints], truth: &GroundTruth, delta: f64) -> Result<EvalReport> {
    let (correct, total, acc) = pleura_accuracy(kps, truth, delta)?;
    Ok(EvalReport {
        delta,
        frames_total: total,
        frames_pleura_correct: correct,
        pleura_accuracy: acc,
        landmarks: landmark_distance(kps, truth)?,
        jitter: if kps.len() >= 2 { temporal_jitter(kps)? } else { Vec::new() },
    })
}

impl EvalReport {
    pub fn mean_jitter(&self) -> f64 {
        if self.jitter.is_empty() {
            0.0
        } else {
            self.jitter.iter().sum::<f64>() / self.jitter.len() as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "# pleura counted correct when any keypoint row is within delta pixels of the true pleura row"
        )
        .unwrap();
        writeln!(s, "delta = {}", self.delta).unwrap();
        writeln!(s, "frames_total = {}", self.frames_total).unwrap();
        writeln!(s, "frames_pleura_correct = {}", self.frames_pleura_correct).unwrap();
        writeln!(s, "pleura_accuracy = {}", self.pleura_accuracy).unwrap();
        for l in &self.landmarks {
            writeln!(s, "{}_count = {}", l.name, l.count).unwrap();
            writeln!(s, "{}_mean_distance = {}", l.name, l.mean).unwrap();
            writeln!(s, "{}_median_distance = {}", l.name, l.median).unwrap();
        }
        let j: Vec<String> = self.jitter.iter().map(|v| v.to_string()).collect();
        writeln!(s, "jitter = {}", j.join(",")).unwrap();
        writeln!(s, "mean_jitter = {}", self.mean_jitter()).unwrap();
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut r = EvalReport {
            delta: 0.0,
            frames_total: 0,
            frames_pleura_correct: 0,
            pleura_accuracy: 0.0,
            landmarks: Vec::new(),
            jitter: Vec::new(),
        };
        let num = |k: &str, v: &str| v.parse::<f64>().map_err(|_| format!("{k}: bad number {v:?}"));
        let int = |k: &str, v: &str| v.parse::<usize>().map_err(|_| format!("{k}: bad count {v:?}"));
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| format!("expected key = value, got {line:?}"))?;
            match k {
                "delta" => r.delta = num(k, v)?,
                "frames_total" => r.frames_total = int(k, v)?,
                "frames_pleura_correct" => r.frames_pleura_correct = int(k, v)?,
                "pleura_accuracy" => r.pleura_accuracy = num(k, v)?,
                "mean_jitter" => {}
                "jitter" => {
                    r.jitter = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|x| num(k, x)).collect::<std::result::Result<_, _>>()?
                    }
                }
                _ => {
                    let (name, field) = LANDMARKS
                        .iter()
                        .find_map(|n| k.strip_prefix(n).and_then(|f| f.strip_prefix('_')).map(|f| (*n, f)))
                        .ok_or_else(|| format!("unknown key {k}"))?;
                    let idx = match r.landmarks.iter().position(|l| l.name == name) {
                        Some(i) => i,
                        None => {
                            r.landmarks.push(LandmarkStats {
                                name,
                                count: 0,
                                mean: 0.0,
                                median: 0.0,
                            });
                            r.landmarks.len() - 1
                        }
                    };
                    let l = &mut r.landmarks[idx];
                    match field {
                        "count" => l.count = int(k, v)?,
                        "mean_distance" => l.mean = num(k, v)?,
                        "median_distance" => l.median = num(k, v)?,
                        _ => return Err(format!("unknown key {k}")),
                    }
                }
            }
        }
        Ok(r)
    }
}

/// `frame,truth_row,nearest_row_distance,correct` per frame.
pub fn per_frame_csv(kps: &[Keypoints], truth: &GroundTruth, delta: f64) -> Result<String> {
    let d = pleura_distances(kps, truth)?;
    let mut s = String::from("frame,pleura_row,nearest_distance,correct\n");
    for (i, (dist, t)) in d.iter().zip(&truth.frames).enumerate() {
        writeln!(s, "{i},{},{dist},{}", t.pleura_row, u8::from(*dist <= delta)).unwrap();
    }
    Ok(s)
}

/// `frame,slot,row,col` rows with a header.
pub fn keypoints_csv(kps: &[Keypoints]) -> String {
    let mut s = String::from("frame,slot,row,col\n");
    for (f, frame) in kps.iter().enumerate() {
        for (slot, [r, c]) in frame.iter().enumerate() {
            writeln!(s, "{f},{slot},{r},{c}").unwrap();
        }
    }
    s
}

pub fn parse_keypoints_csv(text: &str) -> std::result::Result<Vec<Keypoints>, String> {
    let mut out: Vec<Keypoints> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format!("line {}: expected frame,slot,row,col", i + 1));
        }
        let bad = || format!("line {}: bad value", i + 1);
        let frame: usize = f[0].trim().parse().map_err(|_| bad())?;
        let slot: usize = f[1].trim().parse().map_err(|_| bad())?;
        let r: f64 = f[2].trim().parse().map_err(|_| bad())?;
        let c: f64 = f[3].trim().parse().map_err(|_| bad())?;
        if frame > out.len() || (frame < out.len().saturating_sub(1)) {
            return Err(format!("line {}: frames must appear in order", i + 1));
        }
        if frame == out.len() {
            out.push(Vec::new());
        }
        if slot != out[frame].len() {
            return Err(format!("line {}: slots must appear in order", i + 1));
        }
        out[frame].push([r, c]);
    }
    Ok(out)
}
