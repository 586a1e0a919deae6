//! Deterministic phase-patterned toy corpus. Each phase has its own colour
//! and low-frequency shape that drifts across the frame (wrapping at the
//! borders) over the clip, plus optional pixel noise. Captions come from
//! per-phase templates with a seeded adjacent-word swap.

use std::fs;
use std::path::Path;

use ndarray::Array4;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{write_raw_frames, FrameRef};
use crate::pipeline::{Manifest, ManifestEntry, ManifestStats, Split, Status};
use crate::zeroshot::{PhasePrompt, PromptBank};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PROMPTS_FILE: &str = "prompts.tsv";
pub const FRAMES_DIR: &str = "frames";

const BACKGROUND: [f64; 3] = [0.25, 0.25, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    HorizontalBand,
    VerticalBand,
    Square,
    DiagonalBand,
    Disc,
    Cross,
    Checker,
}

struct PhaseStyle {
    label: &'static str,
    colour: [f64; 3],
    shape: Shape,
    templates: [&'static str; 3],
    prompt: &'static str,
}

const PHASES: [PhaseStyle; 7] = [
    PhaseStyle {
        label: "Preparation",
        colour: [0.95, 0.15, 0.15],
        shape: Shape::HorizontalBand,
        templates: [
            "surgeon inserts the trocar through the abdominal port",
            "the trocar port is placed into the abdomen",
            "surgeon prepares the port and inserts a trocar",
        ],
        prompt: "surgeon inserts trocar ports into the abdomen",
    },
    PhaseStyle {
        label: "Calot Triangle Dissection",
        colour: [0.15, 0.9, 0.2],
        shape: Shape::VerticalBand,
        templates: [
            "surgeon uses the hook to dissect calot triangle",
            "hook dissection exposes the calot triangle",
            "the grasper retracts while the hook opens calot triangle",
        ],
        prompt: "surgeon dissects calot triangle with the hook",
    },
    PhaseStyle {
        label: "Clipping Cutting",
        colour: [0.15, 0.25, 0.95],
        shape: Shape::Square,
        templates: [
            "surgeon places clips on the cystic duct and cuts with scissors",
            "the clipper secures the cystic duct before scissors cut",
            "clips close the cystic duct then scissors divide it",
        ],
        prompt: "surgeon clips the cystic duct and cuts with scissors",
    },
    PhaseStyle {
        label: "Gallbladder Dissection",
        colour: [0.95, 0.9, 0.1],
        shape: Shape::DiagonalBand,
        templates: [
            "surgeon separates the gallbladder from the liver bed",
            "the gallbladder is dissected off the liver",
            "dissection frees the gallbladder from the liver bed",
        ],
        prompt: "surgeon dissects the gallbladder from the liver",
    },
    PhaseStyle {
        label: "Gallbladder Packaging",
        colour: [0.9, 0.15, 0.9],
        shape: Shape::Disc,
        templates: [
            "surgeon places the specimen inside the retrieval bag",
            "the specimen bag is closed around the gallbladder",
            "packaging the specimen into the bag",
        ],
        prompt: "surgeon packs the specimen into the bag",
    },
    PhaseStyle {
        label: "Cleaning Coagulation",
        colour: [0.1, 0.9, 0.9],
        shape: Shape::Cross,
        templates: [
            "suction and irrigation clean the field while bleeding is coagulated",
            "surgeon irrigates and coagulates bleeding vessels",
            "the suction clears blood and coagulation stops bleeding",
        ],
        prompt: "surgeon uses suction irrigation and coagulation of bleeding",
    },
    PhaseStyle {
        label: "Gallbladder Retraction",
        colour: [0.95, 0.55, 0.1],
        shape: Shape::Checker,
        templates: [
            "surgeon retracts the bag and extracts it through the trocar",
            "the specimen bag is pulled out during retraction",
            "extraction of the bag through the umbilical opening",
        ],
        prompt: "surgeon retracts and extracts the specimen bag",
    },
];

pub const MAX_PHASES: usize = PHASES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_phases: usize,
    pub clips_per_phase: usize,
    pub image_size: usize,
    pub frames_per_clip: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
    pub seed: u64,
    /// Per-phase caption templates.
    pub caption_templates: Vec<Vec<String>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::new(4, 100)
    }
}

impl SyntheticSpec {
    /// Built-in templates for the first `num_phases` phases (up to
    /// [`MAX_PHASES`]).
    pub fn new(num_phases: usize, clips_per_phase: usize) -> Self {
        Self {
            num_phases,
            clips_per_phase,
            image_size: 32,
            frames_per_clip: 45,
            noise_level: 0.05,
            seed: 0,
            caption_templates: PHASES
                .iter()
                .take(num_phases)
                .map(|p| p.templates.iter().map(|t| t.to_string()).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_phases < 2 || self.num_phases > MAX_PHASES {
            return Err(Error::InvalidConfig(format!(
                "num_phases must lie in 2..={MAX_PHASES}, got {}",
                self.num_phases
            )));
        }
        if self.caption_templates.len() != self.num_phases
            || self.caption_templates.iter().any(|t| t.is_empty() || t.iter().any(|s| s.trim().is_empty()))
        {
            return Err(Error::InvalidConfig("every phase needs at least one caption template".into()));
        }
        if self.clips_per_phase == 0 || self.image_size == 0 || self.frames_per_clip == 0 {
            return Err(Error::InvalidConfig("clip count, image size and frame count must be positive".into()));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidConfig("noise_level must be non-negative".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<&'static str> {
        PHASES.iter().take(self.num_phases).map(|p| p.label).collect()
    }

    /// One caption-like prompt per phase.
    pub fn prompt_bank(&self) -> PromptBank {
        PromptBank::new(
            PHASES
                .iter()
                .take(self.num_phases)
                .map(|p| PhasePrompt {
                    label: p.label.to_string(),
                    prompt_text: p.prompt.to_string(),
                })
                .collect(),
        )
        .expect("built-in labels are distinct")
    }
}

/// Distance on the unit circle.
fn wrap_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Whether normalized pixel `(x, y)` lies on `shape` displaced by `c`.
pub fn covers(shape: Shape, x: f64, y: f64, c: f64) -> bool {
    match shape {
        Shape::HorizontalBand => wrap_dist(y, c) < 0.15,
        Shape::VerticalBand => wrap_dist(x, c) < 0.15,
        Shape::Square => wrap_dist(x, c) < 0.2 && wrap_dist(y, c) < 0.2,
        Shape::DiagonalBand => wrap_dist(x + y, c) < 0.12,
        Shape::Disc => {
            let (dx, dy) = (wrap_dist(x, c), wrap_dist(y, 0.5));
            dx * dx + dy * dy < 0.22 * 0.22
        }
        Shape::Cross => wrap_dist(x, c) < 0.08 || wrap_dist(y, 0.5) < 0.08,
        Shape::Checker => ((((x - c).rem_euclid(1.0) * 2.0) as usize + (y * 2.0) as usize) % 2) == 0,
    }
}

/// Renders one clip of `phase`. The pattern starts at `offset` and moves
/// once across the frame over the clip.
pub fn render_clip<R: Rng>(spec: &SyntheticSpec, phase: usize, offset: f64, rng: &mut R) -> Array4<f64> {
    let style = &PHASES[phase];
    let (t, s) = (spec.frames_per_clip, spec.image_size);
    let noise = (spec.noise_level > 0.0).then(|| Normal::new(0.0, spec.noise_level).expect("positive std"));
    let mut frames = Array4::zeros((t, s, s, 3));
    for f in 0..t {
        let c = offset + f as f64 / t as f64;
        for y in 0..s {
            for x in 0..s {
                let (nx, ny) = ((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
                let colour = if covers(style.shape, nx, ny, c) {
                    style.colour
                } else {
                    BACKGROUND
                };
                for ch in 0..3 {
                    let jitter = noise.map_or(0.0, |n| n.sample(rng));
                    frames[[f, y, x, ch]] = (colour[ch] + jitter).clamp(0.0, 1.0);
                }
            }
        }
    }
    frames
}

/// Template with, half of the time, one pair of adjacent words swapped.
pub fn jitter_caption<R: Rng>(template: &str, rng: &mut R) -> String {
    let mut words: Vec<&str> = template.split_whitespace().collect();
    if words.len() >= 2 && rng.random_bool(0.5) {
        let i = rng.random_range(0..words.len() - 1);
        words.swap(i, i + 1);
    }
    words.join(" ")
}

/// 80/10/10 split of `n` items, each part rounded to the nearest count.
fn split_sizes(n: usize) -> (usize, usize) {
    let train = (0.8 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, val)
}

fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn slug(label: &str) -> String {
    label.to_lowercase().replace(' ', "_")
}

/// Writes `frames/*.svlf`, `manifest.jsonl` and `prompts.tsv` into `out`
/// and returns the manifest.
pub fn build_synthetic_corpus(spec: &SyntheticSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let frames_dir = out.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5917);
    let mut splits = Vec::with_capacity(spec.num_phases * spec.clips_per_phase);
    for _ in 0..spec.num_phases {
        let (train, val) = split_sizes(spec.clips_per_phase);
        let mut order: Vec<usize> = (0..spec.clips_per_phase).collect();
        order.shuffle(&mut split_rng);
        let mut phase_splits = vec![Split::Test; spec.clips_per_phase];
        for (rank, &i) in order.iter().enumerate() {
            if rank < train {
                phase_splits[i] = Split::Train;
            } else if rank < train + val {
                phase_splits[i] = Split::Val;
            }
        }
        splits.extend(phase_splits);
    }

    let len = spec.frames_per_clip as f64;
    let entries = (0..spec.num_phases * spec.clips_per_phase)
        .into_par_iter()
        .map(|index| {
            let (phase, i) = (index / spec.clips_per_phase, index % spec.clips_per_phase);
            let label = PHASES[phase].label;
            let mut rng = clip_rng(spec.seed, index as u64);
            let offset: f64 = rng.random();
            let frames = render_clip(spec, phase, offset, &mut rng);
            let template = spec.caption_templates[phase]
                .choose(&mut rng)
                .expect("templates validated non-empty");
            let caption = jitter_caption(template, &mut rng);
            let clip_id = format!("{}_{i:04}", slug(label));
            let rel = format!("{FRAMES_DIR}/{clip_id}.svlf");
            write_raw_frames(&out.join(&rel), &frames)?;
            Ok(ManifestEntry {
                clip_id,
                source_id: format!("synthetic_{}", slug(label)),
                start: i as f64 * len,
                end: (i + 1) as f64 * len,
                transcript: caption.clone(),
                caption: Some(caption),
                status: Status::Kept,
                reason: None,
                phase_label: Some(label.to_string()),
                frames: Some(FrameRef {
                    path: rel,
                    first: 0,
                    count: spec.frames_per_clip,
                }),
                split: Some(splits[index]),
                caption_client: Some("template".to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stats = ManifestStats::tally(&entries, len);
    stats.generator = Some(format!(
        "synthetic phases={} clips_per_phase={} seed={}",
        spec.num_phases, spec.clips_per_phase, spec.seed
    ));
    let manifest = Manifest { stats, entries };
    manifest.write(&out.join(MANIFEST_FILE))?;
    let prompts = out.join(PROMPTS_FILE);
    fs::write(&prompts, spec.prompt_bank().to_tsv()).map_err(|e| Error::io(&prompts, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_are_eighty_ten_ten() {
        assert_eq!(split_sizes(100), (80, 10));
        assert_eq!(split_sizes(10), (8, 1));
        assert_eq!(split_sizes(3), (2, 0));
    }

    #[test]
    fn shapes_and_colours_are_distinct() {
        for (i, a) in PHASES.iter().enumerate() {
            for b in &PHASES[i + 1..] {
                assert_ne!(a.colour, b.colour);
                assert_ne!(a.shape, b.shape);
            }
        }
    }

    #[test]
    fn noiseless_clips_differ_only_by_drift() {
        let spec = SyntheticSpec {
            noise_level: 0.0,
            frames_per_clip: 4,
            ..SyntheticSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = render_clip(&spec, 1, 0.0, &mut rng);
        let b = render_clip(&spec, 1, 0.25, &mut rng);
        // Frame 1 of the unshifted clip sits where frame 0 of the shifted one does.
        assert_eq!(a.index_axis(ndarray::Axis(0), 1), b.index_axis(ndarray::Axis(0), 0));
    }

    #[test]
    fn jitter_swaps_at_most_one_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let out = jitter_caption("a b c d", &mut rng);
            let mut sorted: Vec<&str> = out.split(' ').collect();
            let moved = sorted.iter().zip(["a", "b", "c", "d"]).filter(|(x, y)| **x != *y).count();
            assert!(moved == 0 || moved == 2);
            sorted.sort();
            assert_eq!(sorted, ["a", "b", "c", "d"]);
        }
    }
}
