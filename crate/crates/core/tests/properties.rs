mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillloop::memory::{from_canonical_str, to_canonical_string, SkillMemory, SnapshotStore};
use skillloop::reflection::{chunk_plan, downsample, sample_indices, StepBoundary, VideoRef};
use skillloop::retrieval::{retrieve, Channel, RetrievalQuery};
use skillloop::rollout::protocol::{decode_reply, encode_reply, Reply, ReplyKind, RolloutReply};
use skillloop::rollout::{RolloutRecord, SceneDescription, SceneObject};
use skillloop::skill::{Skill, SkillOrigin, SubtaskInstruction, TaskSpec};

use common::*;

const STEPS: [&str; 6] = [
    "grasp the cup",
    "move to 5cm above the tray",
    "open gripper",
    "OPEN GRIPPER and retreat",
    "back to default pose",
    "rotate the gripper",
];

fn labelled_video(step_lengths: &[usize]) -> VideoRef {
    let mut frames = Vec::new();
    let mut boundaries = Vec::new();
    for (step, len) in step_lengths.iter().enumerate() {
        let first = frames.len();
        for _ in 0..*len {
            frames.push(format!("f{}", frames.len()));
        }
        boundaries.push(StepBoundary {
            step,
            first,
            last: frames.len() - 1,
        });
    }
    VideoRef::new(frames, boundaries)
}

fn frame_index(label: &str) -> usize {
    label[1..].parse().unwrap()
}

/// Position in `kept` of the retained frame closest to `frame`, earlier frame on ties.
fn nearest_kept(kept: &[usize], frame: usize) -> usize {
    (0..kept.len()).min_by_key(|&p| (kept[p].abs_diff(frame), p)).unwrap()
}

fn plan_skill(plan: &[&str]) -> Skill {
    let task = TaskSpec::new("t", "property probe").unwrap();
    Skill::from_texts(&task, plan.iter().copied(), plan.iter().map(|_| "run()"), SkillOrigin::Planned).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn chunks_partition_the_plan_and_its_executed_prefix(
        choice in prop::collection::vec(0..STEPS.len(), 1..16),
        executed_fraction in 0.0f64..=1.0,
        per_step in prop::collection::vec(1usize..5, 16),
    ) {
        let plan: Vec<&str> = choice.iter().map(|&i| STEPS[i]).collect();
        let executed = ((plan.len() as f64 * executed_fraction).ceil() as usize).clamp(1, plan.len());
        let video = labelled_video(&per_step[..executed]);
        let chunks = chunk_plan(&plan_skill(&plan), &video);
        let opens = |s: &SubtaskInstruction| s.as_str().to_lowercase().contains("open gripper");

        let whole: Vec<&str> = chunks.iter().flat_map(|c| c.steps.iter().map(|s| s.as_str())).collect();
        prop_assert_eq!(&whole, &plan);
        let prefix: Vec<&str> = chunks.iter().flat_map(|c| c.steps[..c.executed_steps].iter().map(|s| s.as_str())).collect();
        prop_assert_eq!(&prefix[..], &plan[..executed]);
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.chunk_index, i);
            prop_assert_eq!(c.last_step - c.first_step + 1, c.len());
            prop_assert!(c.steps[..c.len() - 1].iter().all(|s| !opens(s)));
            if i + 1 < chunks.len() {
                prop_assert!(opens(c.steps.last().unwrap()));
            }
            match c.frame_range {
                Some((a, b)) => {
                    prop_assert!(c.executed_steps > 0);
                    prop_assert_eq!(a, video.step_boundaries[c.first_step].first);
                    prop_assert_eq!(b, video.step_boundaries[c.first_step + c.executed_steps - 1].last);
                }
                None => prop_assert_eq!(c.executed_steps, 0),
            }
        }
        let ranges: Vec<(usize, usize)> = chunks.iter().filter_map(|c| c.frame_range).collect();
        prop_assert!(ranges.windows(2).all(|w| w[0].1 < w[1].0));
    }

    #[test]
    fn downsampling_keeps_ordered_uniform_frames(
        step_lengths in prop::collection::vec(1usize..40, 1..12),
        target in 2usize..60,
    ) {
        let video = labelled_video(&step_lengths);
        let n = video.len();
        let down = downsample(&video, target).unwrap();
        let kept: Vec<usize> = down.frames.iter().map(|f| frame_index(f)).collect();
        prop_assert_eq!(kept.len(), n.min(target));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(kept[0], 0);
        prop_assert_eq!(*kept.last().unwrap(), n - 1);
        prop_assert_eq!(&kept, &oracle_sample(n, target));
        prop_assert_eq!(&sample_indices(n, target), &kept);
        prop_assert_eq!(down.step_boundaries.len(), video.step_boundaries.len());
        for (i, b) in down.step_boundaries.iter().enumerate() {
            prop_assert_eq!(b.step, i);
            prop_assert!(b.first <= b.last && b.last < down.len());
        }
        prop_assert!(down.step_boundaries.windows(2).all(|w| w[0].last <= w[1].first));
        for (b, original) in down.step_boundaries.iter().zip(&video.step_boundaries) {
            prop_assert_eq!(b.first, nearest_kept(&kept, original.first));
            prop_assert_eq!(b.last, nearest_kept(&kept, original.last));
        }
        prop_assert_eq!(downsample(&down, target).unwrap(), down);
    }

    #[test]
    fn retrieval_matches_the_oracle_and_its_invariants(seed in any::<u64>()) {
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let plan: Vec<SubtaskInstruction> = inst.query_plan.iter().map(|p| SubtaskInstruction::new(p.as_str()).unwrap()).collect();
        let query = RetrievalQuery { task_id: &inst.query_id, description: &inst.query_description, plan: &plan };
        let memory = inst.memory();
        let provider = inst.provider();
        let got = retrieve(&query, &memory, &inst.cfg, &provider).unwrap();
        prop_assert!(got.len() <= inst.cfg.k);
        for r in &got {
            prop_assert!((-1.0..=1.0).contains(&r.score));
            if r.channel == Channel::TaskSim {
                prop_assert!(r.score > inst.cfg.threshold);
            }
            if inst.cfg.exclude_self {
                prop_assert_ne!(&r.task_id, &inst.query_id);
            }
        }
        prop_assert_eq!(&retrieve(&query, &memory, &inst.cfg, &provider).unwrap(), &got);
        let want = inst.oracle();
        prop_assert_eq!(got.len(), want.len());
        for (g, (id, score, task_channel)) in got.iter().zip(&want) {
            prop_assert_eq!(&g.task_id, id);
            prop_assert!((g.score - score).abs() <= 1e-9);
            prop_assert_eq!(g.channel == Channel::TaskSim, *task_channel);
        }
    }

    #[test]
    fn canonical_memory_text_round_trips(
        plans in prop::collection::vec(prop::option::of(prop::collection::vec(0..STEPS.len(), 1..6)), 1..5),
        snapshots in 1u32..4,
    ) {
        let ids: Vec<String> = (0..plans.len()).map(|i| format!("task-{i}")).collect();
        let mut memory = SkillMemory::with_tasks(ids.iter().cloned());
        let mut store = SnapshotStore::new(snapshots);
        for (id, plan) in ids.iter().zip(&plans) {
            if let Some(plan) = plan {
                let task = TaskSpec::new(id, format!("describe {id}")).unwrap();
                let steps: Vec<&str> = plan.iter().map(|&i| STEPS[i]).collect();
                let skill = Skill::from_texts(&task, steps.iter().copied(), steps.iter().map(|s| format!("do('{s}')")), SkillOrigin::Planned).unwrap();
                memory.commit(id, skill).unwrap();
            }
            for index in 1..=snapshots {
                store.snapshot(index, id, &memory).unwrap();
            }
        }
        let text = to_canonical_string(&memory, &store);
        let (m2, s2) = from_canonical_str(&text).unwrap();
        prop_assert_eq!(&m2, &memory);
        prop_assert_eq!(&s2, &store);
        prop_assert_eq!(to_canonical_string(&m2, &s2), text);
    }

    #[test]
    fn rollout_replies_round_trip_on_the_wire(
        step_lengths in prop::collection::vec(1usize..6, 0..8),
        success in any::<bool>(),
        id in any::<u64>(),
        x in -2.0f64..2.0,
    ) {
        let video = labelled_video(&step_lengths);
        let record = RolloutRecord {
            success,
            halted_at_step: (!success && !step_lengths.is_empty()).then(|| step_lengths.len() - 1),
            video,
            scene: SceneDescription::new(vec![SceneObject::new("cup", [x, 0.1, 0.3], [0.05, 0.05, 0.1])]),
            env_note: if success { "ok".into() } else { "fail marker=m step=0".into() },
        };
        let line = encode_reply(&Reply::Rollout(RolloutReply::from_record(id, &record)));
        prop_assert!(!line.contains('\n'));
        match decode_reply(&line, ReplyKind::Rollout).unwrap() {
            Reply::Rollout(reply) => {
                prop_assert_eq!(reply.id, id);
                prop_assert_eq!(reply.into_record().unwrap(), record);
            }
            other => prop_assert!(false, "unexpected reply {:?}", other),
        }
    }
}

#[test]
fn draws_follow_the_reference_splitmix() {
    use rand_core::RngCore;
    for seed in [0u64, 1, 42, u64::MAX, 0x1234_5678_9abc_def0] {
        let mut ours = skillloop::suite::splitmix(seed);
        let mut reference = OracleSplitMix(seed);
        for _ in 0..8 {
            assert_eq!(ours.next_u64(), reference.next());
        }
    }
}
