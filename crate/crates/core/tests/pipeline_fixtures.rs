use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use proptest::prelude::*;
use surgvl::pipeline::*;
use surgvl::{Error, Result};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

fn build_fixture() -> Manifest {
    let dir = fixture_dir();
    let videos = load_sources(&dir).unwrap();
    build_manifest(&videos, &dir, &TranscriptFileAsr, &StubCaptioner, &PipelineConfig::default()).unwrap()
}

#[test]
fn fixture_corpus_yields_the_expected_manifest() {
    let m = build_fixture();
    assert_eq!(m.stats.kept, 2);
    let expected: BTreeMap<DropReason, usize> = [
        (DropReason::NoAudio, 1),
        (DropReason::Repetitive, 1),
        (DropReason::FewUnique, 1),
    ]
    .into_iter()
    .collect();
    assert_eq!(m.stats.dropped, expected);
    assert_eq!(m.entries.len(), 5);

    let kept: Vec<&str> = m.kept().map(|e| e.clip_id.as_str()).collect();
    assert_eq!(kept, ["vid_a_0000", "vid_b_0000"]);
    for e in m.kept() {
        let caption = e.caption.as_deref().unwrap();
        assert!(caption.starts_with("Surgeon "));
        assert!(e.end - e.start <= 45.0);
    }
    let a0 = &m.entries[0];
    assert_eq!(a0.phase_label.as_deref(), Some("Calot Triangle Dissection"));
    assert_eq!(m.entries[1].reason, Some(DropReason::Repetitive));
    assert_eq!(m.entries[1].phase_label.as_deref(), Some("Clipping Cutting"));
    assert_eq!(m.entries[3].reason, Some(DropReason::FewUnique));
    assert_eq!(m.entries[4].reason, Some(DropReason::NoAudio));
    assert_eq!(m.stats.caption_client.as_deref(), Some("stub"));
    assert!((m.stats.kept_hours - 90.0 / 3600.0).abs() < 1e-12);
}

#[test]
fn fixture_manifest_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    build_fixture().write(&a).unwrap();
    build_fixture().write(&b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.lines().next().unwrap().starts_with("{\"stats\":"));
    assert_eq!(Manifest::from_jsonl(&text).unwrap(), build_fixture());
}

#[test]
fn captions_are_requested_with_the_fixed_instruction() {
    let request = caption_request("  some words here  ");
    assert!(request.starts_with(CAPTION_PROMPT.trim_end()));
    assert!(request.ends_with("\n\nsome words here"));
    let caption = StubCaptioner.caption(&caption_request("One. Two. Three.")).unwrap();
    assert_eq!(caption, "Surgeon One. Two.");
}

struct FailingCaptioner;

impl CaptionClient for FailingCaptioner {
    fn name(&self) -> &str {
        "failing"
    }

    fn caption(&self, _: &str) -> Result<String> {
        Err(Error::Client("service unavailable".into()))
    }
}

#[test]
fn failing_captioner_drops_instead_of_aborting() {
    let dir = fixture_dir();
    let videos = load_sources(&dir).unwrap();
    let m = build_manifest(&videos, &dir, &TranscriptFileAsr, &FailingCaptioner, &PipelineConfig::default()).unwrap();
    assert_eq!(m.stats.kept, 0);
    assert_eq!(m.stats.dropped.get(&DropReason::CaptionFailed), Some(&2));
    assert_eq!(m.entries.len(), 5);
}

#[test]
fn missing_transcript_becomes_io_error() {
    let videos = vec![SourceVideo {
        video_id: "ghost".into(),
        duration: 100.0,
        has_audio: true,
        frames: None,
        transcript: Some("nowhere.json".into()),
        phases: Vec::new(),
    }];
    let m = build_manifest(&videos, &fixture_dir(), &TranscriptFileAsr, &StubCaptioner, &PipelineConfig::default()).unwrap();
    let reasons: Vec<_> = m.entries.iter().map(|e| e.reason).collect();
    assert_eq!(reasons, [Some(DropReason::IoError), Some(DropReason::IoError), Some(DropReason::ShortTail)]);
}

#[test]
fn filter_reference_cases() {
    let t = FilterThresholds::default();
    let clean = "the surgeon retracts the gallbladder and opens the peritoneum over the cystic duct carefully";
    assert_eq!(linguistic_filter(clean, &t), Verdict::Keep);
    assert_eq!(linguistic_filter(&"music ".repeat(12), &t), Verdict::Drop(DropReason::Repetitive));
    assert_eq!(linguistic_filter("clip the duct and cut the duct with care now", &t), Verdict::Drop(DropReason::FewUnique));
    assert_eq!(linguistic_filter("", &t), Verdict::Drop(DropReason::FewUnique));
}

#[test]
fn silent_videos_are_separated() {
    let videos = load_sources(&fixture_dir()).unwrap();
    let (audio, silent) = filter_audio(&videos);
    assert_eq!(audio.len(), 2);
    assert_eq!(silent[0].video_id, "vid_c");
}

#[test]
fn sampler_reference_values() {
    assert_eq!(sample_frames(45, 4).unwrap(), [5, 16, 28, 39]);
    assert_eq!(sample_frames(45, 45).unwrap(), (0..45).collect::<Vec<_>>());
    assert_eq!(sample_frames(45, 1).unwrap(), [22]);
    assert!(matches!(sample_frames(4, 5), Err(Error::NotEnoughFrames { requested: 5, available: 4 })));
}

/// Hangs up on the first `failures` connections and answers the next with
/// `body`. Returns the URL and a handle yielding the connection count.
fn flaky_server(body: &'static str, failures: usize) -> (String, std::thread::JoinHandle<usize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/caption", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut served = 0;
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            served += 1;
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            if served <= failures {
                drop(stream);
                continue;
            }
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            break;
        }
        served
    });
    (url, handle)
}

#[test]
fn http_client_retries_once() {
    let (url, server) = flaky_server("Surgeon dissects the triangle.", 1);
    let client = HttpCaptionClient::new(url, Duration::from_secs(5));
    let caption = generate_caption("the transcript text", &client).unwrap();
    assert_eq!(caption, "Surgeon dissects the triangle.");
    assert_eq!(server.join().unwrap(), 2);
}

#[test]
fn http_client_gives_up_after_the_retry() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/caption", listener.local_addr().unwrap());
    drop(listener);
    let client = HttpCaptionClient::new(url, Duration::from_secs(2));
    assert!(matches!(generate_caption("text", &client), Err(Error::Client(_))));
}

struct SyntheticAsr;

impl AsrClient for SyntheticAsr {
    fn name(&self) -> &str {
        "synthetic"
    }

    /// One segment every 5 seconds, each with ten fresh words.
    fn transcribe(&self, video: &SourceVideo, _: &Path) -> Result<Transcript> {
        let count = (video.duration / 5.0).floor() as usize;
        let segments = (0..count)
            .map(|i| TranscriptSegment {
                start: i as f64 * 5.0,
                end: i as f64 * 5.0 + 4.0,
                text: (0..10).map(|w| format!("w{i}x{w}")).collect::<Vec<_>>().join(" ") + ".",
            })
            .collect();
        Transcript::new(video.video_id.clone(), segments, video.duration)
    }
}

proptest! {
    #[test]
    fn segmentation_tiles_the_video(duration in 0.5f64..1000.0, clip_len in 5.0f64..60.0, tail_frac in 0.0f64..1.0) {
        let min_tail = clip_len * tail_frac;
        let seg = segment_clips(duration, clip_len, min_tail);
        let mut cursor = 0.0;
        for s in &seg.spans {
            prop_assert!((s.start - cursor).abs() < 1e-9);
            prop_assert!(s.end > s.start && s.len() <= clip_len + 1e-9);
            cursor = s.end;
        }
        match seg.short_tail {
            Some(t) => {
                prop_assert!((t.start - cursor).abs() < 1e-9);
                prop_assert!(t.len() < min_tail);
                prop_assert!((t.end - duration).abs() < 1e-9);
            }
            None => prop_assert!((cursor - duration).abs() < 1e-6),
        }
    }

    #[test]
    fn every_span_is_accounted_for(durations in prop::collection::vec((1.0f64..300.0, any::<bool>()), 1..6)) {
        let videos: Vec<SourceVideo> = durations
            .iter()
            .enumerate()
            .map(|(i, &(duration, has_audio))| SourceVideo {
                video_id: format!("v{i}"),
                duration,
                has_audio,
                frames: None,
                transcript: None,
                phases: Vec::new(),
            })
            .collect();
        let cfg = PipelineConfig::default();
        let m = build_manifest(&videos, Path::new("."), &SyntheticAsr, &StubCaptioner, &cfg).unwrap();
        let mut expected = 0;
        for v in &videos {
            let seg = segment_clips(v.duration, cfg.clip_len, cfg.min_tail);
            let n = if v.has_audio { seg.spans.len() + usize::from(seg.short_tail.is_some()) } else { 1 };
            let records: Vec<_> = m.entries.iter().filter(|e| e.source_id == v.video_id).collect();
            prop_assert_eq!(records.len(), n);
            expected += n;
        }
        prop_assert_eq!(m.entries.len(), expected);
        prop_assert_eq!(m.stats.kept + m.stats.dropped.values().sum::<usize>(), expected);
        for e in &m.entries {
            prop_assert_eq!(e.is_kept(), e.reason.is_none());
        }
    }

    #[test]
    fn lowering_min_unique_never_adds_few_unique_drops(
        words in prop::collection::vec(0usize..30, 0..60),
        high in 1usize..30,
        cut in 0usize..30,
    ) {
        let text = words.iter().map(|w| format!("word{w}")).collect::<Vec<_>>().join(" ");
        let strict = FilterThresholds { min_unique: high, ..FilterThresholds::default() };
        let lenient = FilterThresholds { min_unique: high.saturating_sub(cut), ..FilterThresholds::default() };
        if linguistic_filter(&text, &strict) == Verdict::Keep {
            prop_assert_eq!(linguistic_filter(&text, &lenient), Verdict::Keep);
        }
        if linguistic_filter(&text, &lenient) == Verdict::Drop(DropReason::FewUnique) {
            prop_assert_eq!(linguistic_filter(&text, &strict), Verdict::Drop(DropReason::FewUnique));
        }
    }

    #[test]
    fn sampled_frames_increase_within_range(total in 1usize..500, k_frac in 0.0f64..1.0) {
        let k = 1 + ((total - 1) as f64 * k_frac) as usize;
        let idx = sample_frames(total, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < total));
    }
}
