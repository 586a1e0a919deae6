//! Curation of narrated surgical videos into clip-caption pairs: audio
//! filtering, transcription, fixed-length segmentation, linguistic
//! filtering, caption generation and manifest persistence.
//!
//! Speech recognition and caption generation sit behind [`AsrClient`] and
//! [`CaptionClient`]. Deterministic stand-ins ([`TranscriptFileAsr`],
//! [`StubCaptioner`]) keep the whole pipeline reproducible; an HTTP adapter
//! covers real caption services.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{self, FrameRef};
use crate::model::VideoClip;

/// Instruction sent ahead of every transcript.
pub const CAPTION_PROMPT: &str = include_str!("../prompts/caption_prompt.txt");
pub const DEFAULT_CLIP_LEN: f64 = 45.0;
pub const DEFAULT_MIN_TAIL: f64 = 30.0;
/// File listing the source videos inside a pipeline input directory.
pub const SOURCES_FILE: &str = "videos.jsonl";

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceVideo {
    pub video_id: String,
    /// Seconds.
    pub duration: f64,
    pub has_audio: bool,
    /// Raw frame file or image directory at one frame per second.
    #[serde(default)]
    pub frames: Option<String>,
    /// Audio or transcript reference handed to the ASR client.
    #[serde(default)]
    pub transcript: Option<String>,
    /// Optional phase annotation used to label clips.
    #[serde(default)]
    pub phases: Vec<PhaseSpan>,
}

impl SourceVideo {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "video {} has non-positive duration {}",
                self.video_id, self.duration
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub video_id: String,
    pub segments: Vec<TranscriptSegment>,
    pub full_text: String,
}

impl Transcript {
    /// Checks that segments are ordered, disjoint and inside `[0, duration]`.
    pub fn new(video_id: impl Into<String>, segments: Vec<TranscriptSegment>, duration: f64) -> Result<Self> {
        let video_id = video_id.into();
        let mut last_end = 0.0;
        for seg in &segments {
            if !(seg.start >= last_end - TIME_EPS && seg.end >= seg.start && seg.end <= duration + TIME_EPS) {
                return Err(Error::InvalidInput(format!(
                    "transcript of {video_id}: segment [{}, {}] is out of order or outside [0, {duration}]",
                    seg.start, seg.end
                )));
            }
            last_end = seg.end;
        }
        let full_text = segments
            .iter()
            .map(|s| s.text.trim())
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Self {
            video_id,
            segments,
            full_text,
        })
    }

    /// Text of the segments whose midpoint falls inside `[start, end)`.
    pub fn text_between(&self, start: f64, end: f64) -> String {
        self.segments
            .iter()
            .filter(|s| {
                let mid = 0.5 * (s.start + s.end);
                mid >= start && mid < end
            })
            .map(|s| s.text.trim())
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub trait AsrClient: Sync {
    fn name(&self) -> &str;
    /// `base` is the directory that relative references resolve against.
    fn transcribe(&self, video: &SourceVideo, base: &Path) -> Result<Transcript>;
}

pub trait CaptionClient: Sync {
    fn name(&self) -> &str;
    /// Maps a full request (instruction plus transcript) to a caption.
    fn caption(&self, request: &str) -> Result<String>;
}

#[derive(Debug, Deserialize)]
struct TranscriptFile {
    segments: Vec<TranscriptSegment>,
}

/// Reads pre-computed transcripts: the video's transcript reference names
/// a JSON file `{"segments": [{"start", "end", "text"}, ...]}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TranscriptFileAsr;

impl AsrClient for TranscriptFileAsr {
    fn name(&self) -> &str {
        "transcript-file"
    }

    fn transcribe(&self, video: &SourceVideo, base: &Path) -> Result<Transcript> {
        let reference = video.transcript.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!("video {} has no transcript reference", video.video_id))
        })?;
        let path = base.join(reference);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: TranscriptFile = serde_json::from_str(&text)?;
        Transcript::new(video.video_id.clone(), file.segments, video.duration)
    }
}

/// Deterministic captioner: "Surgeon" followed by the first two sentences
/// of the transcript.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubCaptioner;

impl CaptionClient for StubCaptioner {
    fn name(&self) -> &str {
        "stub"
    }

    fn caption(&self, request: &str) -> Result<String> {
        let transcript = transcript_of(request);
        let head = first_sentences(transcript, 2);
        if head.is_empty() {
            return Err(Error::Client("empty transcript".into()));
        }
        Ok(format!("Surgeon {head}"))
    }
}

/// Posts the request as plain text and reads the caption from the body.
/// Failed requests are retried once.
#[derive(Debug, Clone)]
pub struct HttpCaptionClient {
    pub url: String,
    pub timeout: Duration,
}

impl HttpCaptionClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            timeout,
        }
    }

    fn attempt(&self, agent: &ureq::Agent, request: &str) -> Result<String> {
        let mut response = agent
            .post(&self.url)
            .header("Content-Type", "text/plain; charset=utf-8")
            .send(request)
            .map_err(|e| Error::Client(format!("{}: {e}", self.url)))?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Client(format!("{}: {e}", self.url)))
    }
}

impl CaptionClient for HttpCaptionClient {
    fn name(&self) -> &str {
        &self.url
    }

    fn caption(&self, request: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        self.attempt(&agent, request).or_else(|first| {
            log::warn!("caption request failed, retrying once: {first}");
            self.attempt(&agent, request)
        })
    }
}

/// Instruction, blank line, transcript.
pub fn caption_request(transcript_text: &str) -> String {
    format!("{}\n\n{}", CAPTION_PROMPT.trim_end(), transcript_text.trim())
}

fn transcript_of(request: &str) -> &str {
    request
        .strip_prefix(CAPTION_PROMPT.trim_end())
        .map(|rest| rest.trim_start_matches('\n'))
        .unwrap_or(request)
        .trim()
}

fn first_sentences(text: &str, count: usize) -> &str {
    let mut seen = 0;
    for (i, ch) in text.char_indices() {
        if matches!(ch, '.' | '!' | '?') {
            seen += 1;
            if seen == count {
                return text[..i + ch.len_utf8()].trim();
            }
        }
    }
    text.trim()
}

pub fn generate_caption(transcript_text: &str, client: &dyn CaptionClient) -> Result<String> {
    let caption = client.caption(&caption_request(transcript_text))?;
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(Error::Client(format!("{} returned an empty caption", client.name())));
    }
    Ok(caption.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoAudio,
    ShortTail,
    FewUnique,
    Repetitive,
    CaptionFailed,
    IoError,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::NoAudio => "no_audio",
            DropReason::ShortTail => "short_tail",
            DropReason::FewUnique => "few_unique",
            DropReason::Repetitive => "repetitive",
            DropReason::CaptionFailed => "caption_failed",
            DropReason::IoError => "io_error",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub min_unique: usize,
    pub max_rep_ratio: f64,
    pub min_ttr: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_unique: 10,
            max_rep_ratio: 0.5,
            min_ttr: 0.2,
        }
    }
}

/// Lowercased whitespace-separated words with punctuation removed.
pub fn filter_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Repetition is checked before vocabulary size, so a transcript that
/// repeats one word is reported as repetitive.
pub fn linguistic_filter(text: &str, thresholds: &FilterThresholds) -> Verdict {
    let words = filter_words(text);
    if words.is_empty() {
        return Verdict::Drop(DropReason::FewUnique);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &words {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let total = words.len() as f64;
    let unique = counts.len();
    let max_freq = counts.values().copied().max().unwrap_or(0) as f64;
    if max_freq / total > thresholds.max_rep_ratio || (unique as f64) / total < thresholds.min_ttr {
        return Verdict::Drop(DropReason::Repetitive);
    }
    if unique < thresholds.min_unique {
        return Verdict::Drop(DropReason::FewUnique);
    }
    Verdict::Keep
}

/// Partitions videos by audio presence.
pub fn filter_audio(videos: &[SourceVideo]) -> (Vec<&SourceVideo>, Vec<&SourceVideo>) {
    videos.iter().partition(|v| v.has_audio)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpan {
    pub start: f64,
    pub end: f64,
}

impl ClipSpan {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub spans: Vec<ClipSpan>,
    /// Remainder shorter than the tail threshold.
    pub short_tail: Option<ClipSpan>,
}

/// Consecutive `clip_len` spans; a shorter remainder is kept when it lasts
/// at least `min_tail` seconds.
pub fn segment_clips(duration: f64, clip_len: f64, min_tail: f64) -> Segmentation {
    let full = ((duration + TIME_EPS) / clip_len).floor() as usize;
    let mut spans: Vec<ClipSpan> = (0..full)
        .map(|k| ClipSpan {
            start: k as f64 * clip_len,
            end: (k + 1) as f64 * clip_len,
        })
        .collect();
    let start = full as f64 * clip_len;
    let mut short_tail = None;
    if duration - start > TIME_EPS {
        let tail = ClipSpan { start, end: duration };
        if tail.len() + TIME_EPS >= min_tail {
            spans.push(tail);
        } else {
            short_tail = Some(tail);
        }
    }
    Segmentation { spans, short_tail }
}

/// Uniform-midpoint frame indices `⌊(i + ½)·total/k⌋`.
pub fn sample_frames(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("frame count must be positive".into()));
    }
    if k > total {
        return Err(Error::NotEnoughFrames {
            requested: k,
            available: total,
        });
    }
    Ok((0..k).map(|i| ((2 * i + 1) * total) / (2 * k)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Kept,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest record. Video-level drops (`no_audio`) carry an empty
/// `[0, 0]` span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub source_id: String,
    pub start: f64,
    pub end: f64,
    pub transcript: String,
    pub caption: Option<String>,
    pub status: Status,
    pub reason: Option<DropReason>,
    pub phase_label: Option<String>,
    #[serde(default)]
    pub frames: Option<FrameRef>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub caption_client: Option<String>,
}

impl ManifestEntry {
    pub fn is_kept(&self) -> bool {
        self.status == Status::Kept
    }

    /// Entries without a split belong to the training set.
    pub fn in_split(&self, split: Split) -> bool {
        self.split.unwrap_or(Split::Train) == split
    }

    fn dropped(clip_id: String, source_id: &str, span: ClipSpan, reason: DropReason) -> Self {
        Self {
            clip_id,
            source_id: source_id.to_string(),
            start: span.start,
            end: span.end,
            transcript: String::new(),
            caption: None,
            status: Status::Dropped,
            reason: Some(reason),
            phase_label: None,
            frames: None,
            split: None,
            caption_client: None,
        }
    }

    /// Loads the clip's frames; with `k`, only the uniformly sampled subset.
    pub fn load_clip(&self, base: &Path, k: Option<usize>) -> Result<VideoClip> {
        let frame_ref = self
            .frames
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("clip {} has no frame reference", self.clip_id)))?;
        let path = frame_ref.resolve(base);
        let indices = match k {
            Some(k) => sample_frames(frame_ref.count, k)?,
            None => (0..frame_ref.count).collect(),
        };
        let frames = frames::load_frames(&path, frame_ref.first, frame_ref.count)?;
        let frames = frames.select(ndarray::Axis(0), &indices);
        VideoClip::new(
            frames,
            self.clip_id.clone(),
            self.source_id.clone(),
            self.start,
            self.end,
            self.phase_label.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub total_records: usize,
    pub kept: usize,
    /// Count per drop reason.
    pub dropped: BTreeMap<DropReason, usize>,
    pub kept_hours: f64,
    pub clip_len: f64,
    #[serde(default)]
    pub min_tail: Option<f64>,
    #[serde(default)]
    pub thresholds: Option<FilterThresholds>,
    #[serde(default)]
    pub asr_client: Option<String>,
    #[serde(default)]
    pub caption_client: Option<String>,
    #[serde(default)]
    pub generator: Option<String>,
}

impl ManifestStats {
    pub fn tally(entries: &[ManifestEntry], clip_len: f64) -> Self {
        let mut dropped = BTreeMap::new();
        for e in entries {
            if let Some(r) = e.reason {
                *dropped.entry(r).or_default() += 1;
            }
        }
        let kept = entries.iter().filter(|e| e.is_kept()).count();
        Self {
            total_records: entries.len(),
            kept,
            dropped,
            kept_hours: kept as f64 * clip_len / 3600.0,
            clip_len,
            min_tail: None,
            thresholds: None,
            asr_client: None,
            caption_client: None,
            generator: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StatsRecord {
    stats: ManifestStats,
}

/// Line-delimited JSON: a stats record first, then one entry per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stats: ManifestStats,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&StatsRecord {
            stats: self.stats.clone(),
        })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("manifest is empty".into()))?;
        let StatsRecord { stats } = serde_json::from_str(first)?;
        let entries = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { stats, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn kept(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_kept())
    }

    pub fn kept_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.kept().filter(move |e| e.in_split(split))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub clip_len: f64,
    pub min_tail: f64,
    pub thresholds: FilterThresholds,
    pub frames_per_second: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clip_len: DEFAULT_CLIP_LEN,
            min_tail: DEFAULT_MIN_TAIL,
            thresholds: FilterThresholds::default(),
            frames_per_second: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_len > 0.0 && self.min_tail >= 0.0 && self.min_tail <= self.clip_len && self.frames_per_second > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need clip_len > 0, 0 ≤ min_tail ≤ clip_len and frames_per_second > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Reads `videos.jsonl` (one [`SourceVideo`] per line) from `dir`.
pub fn load_sources(dir: &Path) -> Result<Vec<SourceVideo>> {
    let path = dir.join(SOURCES_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut videos = Vec::new();
    let mut seen = HashSet::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let video: SourceVideo = serde_json::from_str(&line)?;
        video.validate()?;
        if !seen.insert(video.video_id.clone()) {
            return Err(Error::InvalidInput(format!("duplicate video id {}", video.video_id)));
        }
        videos.push(video);
    }
    Ok(videos)
}

fn phase_for(video: &SourceVideo, span: ClipSpan) -> Option<String> {
    video
        .phases
        .iter()
        .find(|p| p.start <= span.start + TIME_EPS && p.end + TIME_EPS >= span.end)
        .map(|p| p.label.clone())
}

fn process_video(
    video: &SourceVideo,
    base: &Path,
    asr: &dyn AsrClient,
    captioner: &dyn CaptionClient,
    cfg: &PipelineConfig,
) -> Vec<ManifestEntry> {
    if !video.has_audio {
        let span = ClipSpan { start: 0.0, end: 0.0 };
        return vec![ManifestEntry::dropped(video.video_id.clone(), &video.video_id, span, DropReason::NoAudio)];
    }
    let segmentation = segment_clips(video.duration, cfg.clip_len, cfg.min_tail);
    let clip_id = |k: usize| format!("{}_{k:04}", video.video_id);
    let frames_missing = video
        .frames
        .as_deref()
        .is_some_and(|f| !base.join(f).exists());
    let transcript = if frames_missing {
        Err(Error::InvalidInput(format!("frames of {} are missing", video.video_id)))
    } else {
        asr.transcribe(video, base)
    };
    let mut entries = Vec::with_capacity(segmentation.spans.len() + 1);
    match transcript {
        Err(err) => {
            log::warn!("{}: {err}", video.video_id);
            for (k, span) in segmentation.spans.iter().enumerate() {
                entries.push(ManifestEntry::dropped(clip_id(k), &video.video_id, *span, DropReason::IoError));
            }
        }
        Ok(transcript) => {
            for (k, span) in segmentation.spans.iter().enumerate() {
                let text = transcript.text_between(span.start, span.end);
                let mut entry = ManifestEntry::dropped(clip_id(k), &video.video_id, *span, DropReason::IoError);
                entry.phase_label = phase_for(video, *span);
                entry.frames = video.frames.as_ref().map(|path| FrameRef {
                    path: path.clone(),
                    first: (span.start * cfg.frames_per_second).floor() as usize,
                    count: ((span.len() * cfg.frames_per_second).floor() as usize).max(1),
                });
                entry.reason = match linguistic_filter(&text, &cfg.thresholds) {
                    Verdict::Drop(reason) => Some(reason),
                    Verdict::Keep => match generate_caption(&text, captioner) {
                        Ok(caption) => {
                            entry.caption = Some(caption);
                            entry.caption_client = Some(captioner.name().to_string());
                            entry.status = Status::Kept;
                            None
                        }
                        Err(err) => {
                            log::warn!("{}: caption failed: {err}", entry.clip_id);
                            Some(DropReason::CaptionFailed)
                        }
                    },
                };
                entry.transcript = text;
                entries.push(entry);
            }
        }
    }
    if let Some(tail) = segmentation.short_tail {
        entries.push(ManifestEntry::dropped(
            clip_id(segmentation.spans.len()),
            &video.video_id,
            tail,
            DropReason::ShortTail,
        ));
    }
    entries
}

/// Runs the full curation pipeline. Videos are processed concurrently;
/// records keep the input order. Per-video failures become dropped
/// records and never abort the batch.
pub fn build_manifest(
    videos: &[SourceVideo],
    base: &Path,
    asr: &dyn AsrClient,
    captioner: &dyn CaptionClient,
    cfg: &PipelineConfig,
) -> Result<Manifest> {
    cfg.validate()?;
    let entries: Vec<ManifestEntry> = videos
        .par_iter()
        .map(|v| process_video(v, base, asr, captioner, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let mut stats = ManifestStats::tally(&entries, cfg.clip_len);
    stats.min_tail = Some(cfg.min_tail);
    stats.thresholds = Some(cfg.thresholds);
    stats.asr_client = Some(asr.name().to_string());
    stats.caption_client = Some(captioner.name().to_string());
    Ok(Manifest { stats, entries })
}
