use std::collections::BTreeSet;

use aeroloop_core::annotate::{CotDraft, ReviewQueue, Verdict};
use aeroloop_core::backends::mock::{MockCritic, MockGenerator};
use aeroloop_core::backends::{Critic, CriticScore, GenerateRequest, Generator, ScoreRequest};
use aeroloop_core::clipraw;

use aeroloop_core::ingest::{
    filter_clip, ingest_source, motion_stats, segment_video, FilterPolicy, IngestConfig, MotionStats, SourceDecoder,
};
use aeroloop_core::manifest::{split_dataset, ManifestStore};
use aeroloop_core::selfplay::{select_best, RolloutCandidate};
use aeroloop_core::store::ClipStore;
use aeroloop_core::{
    ActionCategory, ClipRecord, ClipStatus, DatasetManifest, Fps, FrameTensor, ManifestEntry, SplitTag, VideoClip,
};
use proptest::prelude::*;

fn clip_from(frames: usize, h: u32, w: u32, bytes: &[u8]) -> VideoClip {
    let len = (h * w * 3) as usize;
    let frames = (0..frames)
        .map(|f| {
            let data = (0..len).map(|i| bytes[(f * len + i) % bytes.len()]).collect();
            FrameTensor::new(h, w, data).unwrap()
        })
        .collect();
    VideoClip::new(frames, Fps::new(30, 1).unwrap()).unwrap()
}

fn arb_clip() -> impl Strategy<Value = VideoClip> {
    (2usize..6, 1u32..6, 1u32..6, prop::collection::vec(any::<u8>(), 1..400))
        .prop_map(|(n, h, w, bytes)| clip_from(n, h, w, &bytes))
}

fn id_for(i: usize) -> aeroloop_core::ClipId {
    aeroloop_core::ClipId::parse(&aeroloop_core::hashing::sha256_hex(format!("clip-{i}").as_bytes())).unwrap()
}

fn arb_entries() -> impl Strategy<Value = Vec<ManifestEntry>> {
    prop::collection::vec(prop::sample::select(ActionCategory::RESOLVED.to_vec()), 1..60).prop_map(|cats| {
        cats.into_iter()
            .enumerate()
            .map(|(i, action_category)| ManifestEntry {
                clip_id: id_for(i),
                intention: format!("intention {i}"),
                split: SplitTag::Train,
                action_category,
            })
            .collect()
    })
}

fn scored(j: usize, k: usize, total: f64, align: u8) -> RolloutCandidate {
    RolloutCandidate {
        j,
        k,
        seed: 0,
        video_ref: id_for(j * 100 + k),
        score: Some(CriticScore {
            intention_alignment: align,
            spatial_consistency: 0,
            temporal_continuity: 0,
            projective_geometry: 0,
            total,
            rationale_text: String::new(),
        }),
    }
}

fn annotated(i: usize) -> ClipRecord {
    ClipRecord {
        clip_id: id_for(i),
        source_video_id: "src".into(),
        frame_start: 0,
        frame_end: 2,
        fps: Fps::new(30, 1).unwrap(),
        resolution: (4, 4),
        motion_stats: MotionStats::default(),
        status: ClipStatus::Annotated,
        action_category: ActionCategory::Unknown,
    }
}

fn draft() -> CotDraft {
    CotDraft {
        action: "move forward".into(),
        stop_condition: "the gate is reached".into(),
        merged_intention: "The drone moves forward until the gate is reached.".into(),
        model_id: "m".into(),
        prompt_template_id: "t".into(),
    }
}

#[derive(Debug, Clone)]
enum Op {
    Claim(usize),
    Resolve(usize, u8),
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipraw_round_trips_and_ids_track_every_byte(clip in arb_clip(), flip in any::<prop::sample::Index>()) {
        let bytes = clipraw::encode(&clip).unwrap();
        let back = clipraw::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &clip);
        prop_assert_eq!(back.content_id(), clip.content_id());

        let mut frames = clip.frames().to_vec();
        let f = flip.index(frames.len());
        let mut data = frames[f].data().to_vec();
        let i = flip.index(data.len());
        data[i] ^= 0x01;
        frames[f] = FrameTensor::new(clip.height(), clip.width(), data).unwrap();
        let changed = VideoClip::new(frames, clip.fps()).unwrap();
        prop_assert_ne!(changed.content_id(), clip.content_id());
    }

    #[test]
    fn split_partitions_every_category(entries in arb_entries(), ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let m = DatasetManifest::new(1, None, entries).unwrap();
        let split = split_dataset(&m, ratio, seed).unwrap();
        prop_assert_eq!(split.parent_version, Some(1));
        let ids: Vec<_> = split.entries.iter().map(|e| &e.clip_id).collect();
        prop_assert_eq!(ids, m.entries.iter().map(|e| &e.clip_id).collect::<Vec<_>>());
        for cat in ActionCategory::RESOLVED {
            let of: Vec<_> = split.entries.iter().filter(|e| e.action_category == cat).collect();
            if of.is_empty() {
                continue;
            }
            let test = of.iter().filter(|e| e.split == SplitTag::Test).count();
            prop_assert!(test >= 1 && test <= of.len());
            // Splitting a single category alone picks the same test set.
            let alone = DatasetManifest::new(1, None, of.iter().map(|e| (*e).clone()).collect()).unwrap();
            let alone = split_dataset(&alone, ratio, seed).unwrap();
            let tags: Vec<_> = alone.entries.iter().map(|e| e.split).collect();
            prop_assert_eq!(tags, of.iter().map(|e| e.split).collect::<Vec<_>>());
        }
    }

    #[test]
    fn committed_versions_form_a_tree(parents in prop::collection::vec(any::<prop::sample::Index>(), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let store = ManifestStore::new(dir.path());
        let entry = ManifestEntry {
            clip_id: id_for(0),
            intention: "x".into(),
            split: SplitTag::Train,
            action_category: ActionCategory::Translation,
        };
        let root = store.commit(&DatasetManifest::new(1, None, vec![entry.clone()]).unwrap()).unwrap();
        let mut versions = vec![root.version];
        for p in parents {
            let parent = versions[p.index(versions.len())];
            let draft = DatasetManifest::new(parent + 1, Some(parent), vec![entry.clone()]).unwrap();
            versions.push(store.commit(&draft).unwrap().version);
        }
        // Rewriting history is refused.
        let bogus = DatasetManifest { version: 1, parent_version: Some(*versions.last().unwrap() + 1), entries: vec![entry] };
        prop_assert!(store.commit(&bogus).is_err());
        for &v in &versions {
            let mut seen = BTreeSet::new();
            let mut cur = Some(v);
            while let Some(c) = cur {
                prop_assert!(seen.insert(c), "cycle through {}", c);
                cur = store.read(c).unwrap().parent_version;
            }
            prop_assert!(seen.contains(&root.version));
        }
    }

    #[test]
    fn segmentation_covers_exactly_the_full_windows(n in 0usize..500, len in 2usize..40, stride in 1usize..40) {
        let w = segment_video(n, len, stride).unwrap();
        let expected = if n >= len { (n - len) / stride + 1 } else { 0 };
        prop_assert_eq!(w.len(), expected);
        for (i, &(s, e)) in w.iter().enumerate() {
            prop_assert_eq!((s, e), (i * stride, i * stride + len));
            prop_assert!(e <= n);
        }
    }

    #[test]
    fn every_window_is_kept_or_rejected_once(clip in arb_clip(), static_t in 0.0f64..0.3, cut_t in 0.3f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("v.clipraw");
        clipraw::write_clipraw(&clip, &src).unwrap();
        let config = IngestConfig {
            clip_length: 2,
            stride: Some(1),
            policy: FilterPolicy::new(static_t, cut_t).unwrap(),
            workers: 1,
        };
        let store = ClipStore::new(dir.path().join("clips"));
        let records = ingest_source(&src, &SourceDecoder::default(), &config, &store).unwrap();
        prop_assert_eq!(records.len(), clip.len() - 1);
        for r in &records {
            let window = clip.window(r.frame_start, r.frame_end).unwrap();
            // The verdict is a pure function of the stats and the policy.
            let verdict = filter_clip(&motion_stats(&window).unwrap(), &config.policy);
            prop_assert_eq!(r.status, verdict.status());
            prop_assert_eq!(store.path_for(&r.clip_id).exists(), r.status == ClipStatus::Ingested);
        }
    }

    #[test]
    fn motion_ignores_a_uniform_brightness_offset(clip in arb_clip(), offset in 0u8..64) {
        let cap = clip.frames().iter().flat_map(|f| f.data()).copied().max().unwrap();
        prop_assume!(u16::from(cap) + u16::from(offset) <= 255);
        let shifted: Vec<_> = clip
            .frames()
            .iter()
            .map(|f| FrameTensor::new(f.height(), f.width(), f.data().iter().map(|b| b + offset).collect()).unwrap())
            .collect();
        let a = motion_stats(&clip).unwrap();
        let b = motion_stats(&VideoClip::new(shifted, clip.fps()).unwrap()).unwrap();
        for (x, y) in a.per_pair_diffs.iter().zip(&b.per_pair_diffs) {
            prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn swapping_neighbours_only_touches_adjacent_diffs(clip in arb_clip(), at in any::<prop::sample::Index>()) {
        prop_assume!(clip.len() >= 3);
        let i = at.index(clip.len() - 1);
        let mut frames = clip.frames().to_vec();
        frames.swap(i, i + 1);
        let a = motion_stats(&clip).unwrap().per_pair_diffs;
        let b = motion_stats(&VideoClip::new(frames, clip.fps()).unwrap()).unwrap().per_pair_diffs;
        // Diff i compares the same two frames in the other order.
        prop_assert!((a[i] - b[i]).abs() < 1e-12);
        for d in 0..a.len() {
            if d + 1 != i && d != i + 1 && d != i {
                prop_assert_eq!(a[d], b[d]);
            }
        }
    }

    #[test]
    fn selection_ignores_candidate_order(
        (candidates, shuffled) in prop::collection::vec((0u8..4, 0u8..4), 1..12).prop_flat_map(|cells| {
            let candidates: Vec<_> = cells
                .iter()
                .enumerate()
                .map(|(n, &(t, a))| scored(n / 4 + 1, n % 4 + 1, f64::from(t) * 0.5, a))
                .collect();
            (Just(candidates.clone()), Just(candidates).prop_shuffle())
        }),
    ) {
        let pick = |c: &[RolloutCandidate]| select_best(c, 0.0).unwrap().map(|i| (c[i].j, c[i].k));
        prop_assert_eq!(pick(&candidates), pick(&shuffled));
    }

    #[test]
    fn review_queue_conserves_tasks_and_replays(
        n in 1usize..8,
        ops in prop::collection::vec(
            prop_oneof![
                (0usize..3).prop_map(Op::Claim),
                (0usize..8, 0u8..3).prop_map(|(t, v)| Op::Resolve(t, v)),
            ],
            0..30,
        ),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.jsonl");
        let mut q = ReviewQueue::open(&path).unwrap();
        let mut ids = Vec::new();
        for i in 0..n {
            ids.push(q.enqueue(&annotated(i), draft()).unwrap().task_id);
        }
        let reviewers = ["ana", "bo", "cy"];
        for op in ops {
            // Rejected operations must leave no trace; conservation is checked after each step.
            match op {
                Op::Claim(r) => {
                    let _ = q.claim(reviewers[r]);
                }
                Op::Resolve(t, v) => {
                    let task = &ids[t % n];
                    let (verdict, text) = match v {
                        0 => (Verdict::Accepted, None),
                        1 => (Verdict::Edited, Some("The drone turns right until the road is centred.")),
                        _ => (Verdict::Discarded, None),
                    };
                    let claimant = q.get(task).unwrap().claimant.clone().unwrap_or_else(|| "ana".into());
                    let _ = q.apply_review(task, verdict, text, &claimant);
                }
            }
            let s = q.stats();
            prop_assert_eq!(s.pending + s.claimed + s.accepted + s.edited + s.discarded, s.total);
            prop_assert_eq!(s.total, n);
        }
        let before: Vec<_> = q.tasks().cloned().collect();
        let stats = q.stats();
        drop(q);
        let again = ReviewQueue::open(&path).unwrap();
        prop_assert_eq!(again.tasks().cloned().collect::<Vec<_>>(), before);
        prop_assert_eq!(again.stats(), stats);
    }

    #[test]
    fn mocks_are_pure_functions_of_their_inputs(seed in any::<u64>(), critic_seed in any::<u64>(), shade in any::<u8>()) {
        let request = GenerateRequest {
            observation: FrameTensor::filled(8, 8, [shade, 40, 200]).unwrap(),
            prompt: "fly forward".into(),
            seed,
            num_frames: 3,
            height: 8,
            width: 8,
            model_id: None,
        };
        let g = MockGenerator::default();
        let a = g.generate(&request).unwrap();
        prop_assert_eq!(&a, &MockGenerator::default().generate(&request).unwrap());

        let score = ScoreRequest {
            basic_intention: "fly forward".into(),
            rubric_id: "rubric".into(),
            prompt: "score".into(),
            peer_group_id: None,
        };
        let c = MockCritic::new(critic_seed);
        prop_assert_eq!(c.score(&[&a], &score).unwrap(), MockCritic::new(critic_seed).score(&[&a], &score).unwrap());
    }
}
