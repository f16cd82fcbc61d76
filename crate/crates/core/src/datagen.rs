//! Deterministic synthetic 3D/4D face corpus.
//!
//! A face is a sampled ellipsoidal head with a few fixed facial features
//! (nose, eye sockets). Each subject gets a smooth identity perturbation and
//! each emotion a fixed displacement field made of Gaussian bumps around the
//! brow, eye, nose and mouth regions. The displacement is ramped linearly from
//! the neutral frame 0 to the apex frame `T - 1`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::rng;

pub mod io;

pub type Point = [f32; 3];

/// Minimum subject count that still admits ten subject-disjoint folds.
pub const MIN_SUBJECTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgeGroup {
    Young,
    MiddleAged,
    Older,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 3] = [AgeGroup::Young, AgeGroup::MiddleAged, AgeGroup::Older];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Female, Gender::Male];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ethnicity {
    Asian,
    Black,
    White,
    Hispanic,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 4] = [
        Ethnicity::Asian,
        Ethnicity::Black,
        Ethnicity::White,
        Ethnicity::Hispanic,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub subject_id: u32,
    pub age_group: AgeGroup,
    pub gender: Gender,
    pub ethnicity: Ethnicity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSequence {
    pub subject: SubjectMeta,
    pub emotion: Emotion,
    pub frames: Vec<Vec<Point>>,
}

impl FaceSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_points(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn apex(&self) -> &[Point] {
        self.frames.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_subjects: usize,
    pub frames_per_sequence: usize,
    pub points_per_face: usize,
    pub seed: u64,
    pub identity_scale: f64,
    pub expression_scale: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_subjects: 10,
            frames_per_sequence: 8,
            points_per_face: 2048,
            seed: 7,
            identity_scale: 0.3,
            expression_scale: 1.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < MIN_SUBJECTS {
            return Err(Error::Protocol(format!(
                "corpus needs at least {MIN_SUBJECTS} subjects for 10-fold subject splits, got {}",
                self.n_subjects
            )));
        }
        if self.frames_per_sequence == 0 {
            return Err(Error::invalid("frames_per_sequence must be >= 1"));
        }
        if self.points_per_face == 0 {
            return Err(Error::invalid("points_per_face must be >= 1"));
        }
        if !(self.identity_scale >= 0.0 && self.identity_scale.is_finite())
            || !(self.expression_scale >= 0.0 && self.expression_scale.is_finite())
        {
            return Err(Error::invalid(
                "identity_scale and expression_scale must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// A generated corpus together with the spec that produced it (if any).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub spec: Option<CorpusSpec>,
    pub sequences: Vec<FaceSequence>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
        Ok(Corpus {
            spec: Some(*spec),
            sequences: generate_corpus(spec)?,
        })
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.sequences.iter().map(|s| s.subject.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

// Stream tags keep the per-purpose random streams apart.
const TAG_META: u64 = 1;
const TAG_POINTS: u64 = 2;
const TAG_IDENTITY: u64 = 3;
const TAG_INTENSITY: u64 = 4;

/// Generates `n_subjects x 6` sequences, subject-major, emotions in class order.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<FaceSequence>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_subjects * Emotion::ALL.len());
    for sid in 0..spec.n_subjects as u32 {
        let subject = Subject::new(spec, sid);
        for emotion in Emotion::ALL {
            out.push(subject.sequence(spec, emotion));
        }
    }
    Ok(out)
}

pub fn subject_meta(seed: u64, subject_id: u32) -> SubjectMeta {
    let mut r = rng::stream(&[seed, subject_id as u64, TAG_META]);
    SubjectMeta {
        subject_id,
        age_group: AgeGroup::ALL[r.gen_range(0..AgeGroup::ALL.len())],
        gender: Gender::ALL[r.gen_range(0..Gender::ALL.len())],
        ethnicity: Ethnicity::ALL[r.gen_range(0..Ethnicity::ALL.len())],
    }
}

/// One term of the smooth identity field.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
}

struct Subject {
    meta: SubjectMeta,
    /// Neutral head points in f64 with their frontal weight.
    base: Vec<([f64; 3], f64)>,
}

impl Subject {
    fn new(spec: &CorpusSpec, sid: u32) -> Subject {
        let meta = subject_meta(spec.seed, sid);
        let mut ir = rng::stream(&[spec.seed, sid as u64, TAG_IDENTITY]);
        let s = spec.identity_scale;
        let axes = [
            0.62 * (1.0 + 0.12 * s * ir.gen_range(-1.0..1.0)),
            0.80 * (1.0 + 0.10 * s * ir.gen_range(-1.0..1.0)),
            0.52 * (1.0 + 0.12 * s * ir.gen_range(-1.0..1.0)),
        ];
        let waves: Vec<Wave> = (0..4)
            .map(|_| Wave {
                amp: 0.035 * s * ir.gen_range(-1.0..1.0),
                fx: ir.gen_range(0.5..2.0),
                fy: ir.gen_range(0.5..2.0),
                px: ir.gen_range(0.0..2.0 * PI),
                py: ir.gen_range(0.0..2.0 * PI),
            })
            .collect();
        let nose_len = 1.0 + 0.25 * s * ir.gen_range(-1.0..1.0);

        let base = (0..spec.points_per_face as u64)
            .map(|k| {
                let u = rng::unit_hash(&[spec.seed, sid as u64, TAG_POINTS, k, 0]);
                let v = rng::unit_hash(&[spec.seed, sid as u64, TAG_POINTS, k, 1]);
                let theta = (u * 2.0 - 1.0) * 110f64.to_radians();
                let max_sin = 75f64.to_radians().sin();
                let phi = ((v * 2.0 - 1.0) * max_sin).asin();
                let (x, y, z) = (
                    axes[0] * theta.sin() * phi.cos(),
                    axes[1] * phi.sin(),
                    axes[2] * theta.cos() * phi.cos(),
                );
                let front = (z / axes[2]).clamp(0.0, 1.0);
                let mut dz = 0.0;
                // nose ridge and eye sockets
                dz += 0.16 * nose_len * gauss2(x, y + 0.02, 0.06, 0.16);
                dz -= 0.05 * (gauss2(x - 0.22, y - 0.18, 0.08, 0.06) + gauss2(x + 0.22, y - 0.18, 0.08, 0.06));
                for w in &waves {
                    dz += w.amp * (w.fx * PI * x + w.px).sin() * (w.fy * PI * y + w.py).cos();
                }
                ([x, y, z + front * dz], front)
            })
            .collect();
        Subject { meta, base }
    }

    fn sequence(&self, spec: &CorpusSpec, emotion: Emotion) -> FaceSequence {
        let mut sr = rng::stream(&[
            spec.seed,
            self.meta.subject_id as u64,
            emotion.index() as u64,
            TAG_INTENSITY,
        ]);
        let intensity = spec.expression_scale * sr.gen_range(0.85..1.15);
        let field = deformation_field(emotion);
        // Per-point apex displacement; frames scale it by the ramp.
        let apex: Vec<[f64; 3]> = self
            .base
            .iter()
            .map(|&(p, front)| {
                let mut d = [0.0; 3];
                if intensity > 0.0 && front > 0.0 {
                    for b in field {
                        let g = front * gauss2(p[0] - b.cx, p[1] - b.cy, b.sigma, b.sigma);
                        for (di, bi) in d.iter_mut().zip(b.disp) {
                            *di += g * bi * intensity;
                        }
                    }
                }
                d
            })
            .collect();
        let t_count = spec.frames_per_sequence;
        let frames = (0..t_count)
            .map(|t| {
                let ramp = if t_count > 1 {
                    t as f64 / (t_count - 1) as f64
                } else {
                    0.0
                };
                self.base
                    .iter()
                    .zip(&apex)
                    .map(|(&(p, _), d)| {
                        [
                            (p[0] + ramp * d[0]).clamp(-1.0, 1.0) as f32,
                            (p[1] + ramp * d[1]).clamp(-1.0, 1.0) as f32,
                            (p[2] + ramp * d[2]).clamp(-1.0, 1.0) as f32,
                        ]
                    })
                    .collect()
            })
            .collect();
        FaceSequence {
            subject: self.meta,
            emotion,
            frames,
        }
    }
}

#[inline]
fn gauss2(dx: f64, dy: f64, sx: f64, sy: f64) -> f64 {
    (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp()
}

/// A Gaussian displacement bump centred on a facial landmark.
#[derive(Debug, Clone, Copy)]
struct Bump {
    cx: f64,
    cy: f64,
    sigma: f64,
    disp: [f64; 3],
}

const fn bump(cx: f64, cy: f64, sigma: f64, disp: [f64; 3]) -> Bump {
    Bump { cx, cy, sigma, disp }
}

// Landmarks (x, y) in head units: brows y~0.34, eyes y~0.18, nose tip y~0,
// mouth y~-0.40, jaw y~-0.55. Mirrored pairs share one row each.
const HAPPY: &[Bump] = &[
    bump(0.18, -0.38, 0.08, [0.05, 0.08, 0.04]),
    bump(-0.18, -0.38, 0.08, [-0.05, 0.08, 0.04]),
    bump(0.28, -0.12, 0.10, [0.0, 0.04, 0.07]),
    bump(-0.28, -0.12, 0.10, [0.0, 0.04, 0.07]),
    bump(0.0, -0.42, 0.07, [0.0, 0.0, -0.03]),
];
const SAD: &[Bump] = &[
    bump(0.18, -0.40, 0.08, [0.0, -0.08, -0.03]),
    bump(-0.18, -0.40, 0.08, [0.0, -0.08, -0.03]),
    bump(0.10, 0.32, 0.07, [0.0, 0.06, 0.03]),
    bump(-0.10, 0.32, 0.07, [0.0, 0.06, 0.03]),
    bump(0.0, -0.48, 0.07, [0.0, 0.0, 0.06]),
];
const ANGRY: &[Bump] = &[
    bump(0.17, 0.33, 0.09, [-0.04, -0.07, 0.05]),
    bump(-0.17, 0.33, 0.09, [0.04, -0.07, 0.05]),
    bump(0.0, -0.40, 0.10, [0.0, 0.02, -0.06]),
    bump(0.07, -0.10, 0.05, [0.02, 0.0, 0.04]),
    bump(-0.07, -0.10, 0.05, [-0.02, 0.0, 0.04]),
];
const DISGUST: &[Bump] = &[
    bump(0.0, -0.24, 0.08, [0.0, 0.07, 0.07]),
    bump(0.08, 0.05, 0.06, [0.0, 0.0, -0.06]),
    bump(-0.08, 0.05, 0.06, [0.0, 0.0, -0.06]),
    bump(0.18, 0.33, 0.08, [0.0, -0.04, 0.0]),
    bump(-0.18, 0.33, 0.08, [0.0, -0.04, 0.0]),
];
const FEAR: &[Bump] = &[
    bump(0.18, 0.35, 0.08, [0.01, 0.07, 0.0]),
    bump(-0.18, 0.35, 0.08, [-0.01, 0.07, 0.0]),
    bump(0.22, 0.18, 0.07, [0.0, 0.0, -0.07]),
    bump(-0.22, 0.18, 0.07, [0.0, 0.0, -0.07]),
    bump(0.20, -0.40, 0.08, [0.07, -0.03, -0.03]),
    bump(-0.20, -0.40, 0.08, [-0.07, -0.03, -0.03]),
];
const SURPRISE: &[Bump] = &[
    bump(0.20, 0.36, 0.10, [0.0, 0.10, 0.0]),
    bump(-0.20, 0.36, 0.10, [0.0, 0.10, 0.0]),
    bump(0.0, -0.58, 0.18, [0.0, -0.11, 0.0]),
    bump(0.0, -0.42, 0.07, [0.0, 0.0, -0.10]),
];

fn deformation_field(emotion: Emotion) -> &'static [Bump] {
    match emotion {
        Emotion::Happy => HAPPY,
        Emotion::Sad => SAD,
        Emotion::Angry => ANGRY,
        Emotion::Disgust => DISGUST,
        Emotion::Fear => FEAR,
        Emotion::Surprise => SURPRISE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusSpec {
        CorpusSpec {
            n_subjects: 10,
            frames_per_sequence: 8,
            points_per_face: 2048,
            seed,
            identity_scale: 0.3,
            expression_scale: 1.0,
        }
    }

    #[test]
    fn counts_match_spec() {
        let c = generate_corpus(&small(7)).unwrap();
        assert_eq!(c.len(), 60);
        for s in &c {
            assert_eq!(s.num_frames(), 8);
            assert!(s.frames.iter().all(|f| f.len() == 2048));
        }
    }

    #[test]
    fn rejects_too_few_subjects() {
        let mut spec = small(7);
        spec.n_subjects = 9;
        assert!(matches!(generate_corpus(&spec), Err(Error::Protocol(_))));
        spec.n_subjects = 10;
        spec.frames_per_sequence = 0;
        assert!(matches!(generate_corpus(&spec), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_expression_scale_makes_emotions_identical() {
        let mut spec = small(3);
        spec.expression_scale = 0.0;
        spec.frames_per_sequence = 3;
        let c = generate_corpus(&spec).unwrap();
        for subject in c.chunks(6) {
            for s in &subject[1..] {
                assert_eq!(s.frames, subject[0].frames);
            }
        }
    }

    #[test]
    fn frame_zero_is_neutral_and_ramp_is_monotone() {
        let mut spec = small(11);
        spec.frames_per_sequence = 5;
        spec.points_per_face = 512;
        let c = generate_corpus(&spec).unwrap();
        for subject in c.chunks(6) {
            for s in subject {
                assert_eq!(s.frames[0], subject[0].frames[0]);
                let amp = |t: usize| -> f64 {
                    s.frames[t]
                        .iter()
                        .zip(&s.frames[0])
                        .map(|(a, b)| {
                            (0..3).map(|i| (a[i] - b[i]) as f64).map(|d| d * d).sum::<f64>()
                        })
                        .sum::<f64>()
                };
                for t in 1..5 {
                    assert!(amp(t) + 1e-9 >= amp(t - 1));
                }
                assert!(amp(4) > 0.0);
            }
        }
    }

    #[test]
    fn coordinates_are_bounded_and_subjects_unique() {
        let c = Corpus::generate(&small(5)).unwrap();
        for s in &c.sequences {
            for f in &s.frames {
                assert!(f.iter().all(|p| p.iter().all(|v| (-1.0..=1.0).contains(v))));
            }
        }
        assert_eq!(c.subject_ids(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_corpus(&small(9)).unwrap(), generate_corpus(&small(9)).unwrap());
        assert_ne!(
            generate_corpus(&small(9)).unwrap()[0].frames,
            generate_corpus(&small(10)).unwrap()[0].frames
        );
    }
}
