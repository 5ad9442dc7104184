use codemap::depth_codec::Decoder;
use codemap::geometry::ProximityParams;
use codemap::image::{Channel, DenseImage};
use codemap::optimizer::OptimizerConfig;
use codemap::pipeline::{
    collect_metrics, ingest, process_pending, process_window, run_lockstep, Ack, KeyframePacket, MapperService,
    MapperState, Stage,
};
use codemap::synth::{make_sequence, wall_scene, SequenceOptions};

fn decoder() -> Decoder {
    Decoder::analytic(32, ProximityParams::default())
}

fn sequence(frames: usize) -> Vec<KeyframePacket> {
    make_sequence(&wall_scene(frames, 0), &SequenceOptions::default()).unwrap()
}

fn mean_mae(state: &MapperState, stage: Stage) -> f64 {
    let rows: Vec<f64> = collect_metrics(state).unwrap().into_iter().filter(|r| r.stage == stage).map(|r| r.mae).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn lockstep_predicts_and_refines_every_keyframe() {
    let state = run_lockstep(sequence(6), MapperState::new(), &decoder(), &OptimizerConfig::default()).unwrap();
    assert_eq!(state.predictions, 6);
    for id in 0..6 {
        assert!(state.initial_depth(id).is_some() && state.refined_depth(id).is_some(), "keyframe {id}");
    }
    let (initial, refined) = (mean_mae(&state, Stage::Initial), mean_mae(&state, Stage::Refined));
    assert!(refined <= initial, "initial {initial} refined {refined}");
}

#[test]
fn keyframe_without_sparse_points_is_skipped() {
    let mut packets = sequence(4);
    let (w, h) = (packets[2].intrinsics.width, packets[2].intrinsics.height);
    packets[2].sparse_depth = DenseImage::filled(w, h, Channel::Depth, 0.0);
    packets[2].rep_error = DenseImage::filled(w, h, Channel::ReprojectionError, 0.0);
    let mut state = MapperState::new();
    for p in packets {
        ingest(p, &mut state).unwrap();
    }
    let outcome = process_pending(&mut state, &decoder(), &OptimizerConfig::default()).unwrap().unwrap();
    assert_eq!(outcome.ids, vec![0, 1, 3]);
    assert_eq!(outcome.skipped, vec![2]);
    assert!(outcome.report.is_some());
    assert!(state.skipped().contains(&2));
    assert!(state.refined_depth(2).is_none());
}

#[test]
fn converged_window_is_stable_when_rerun() {
    let mut config = OptimizerConfig::default();
    config.solver.relative_tolerance = 1e-12;
    config.solver.max_iterations = 100;
    let mut state = run_lockstep(sequence(4), MapperState::new(), &decoder(), &config).unwrap();
    let window: Vec<u64> = (0..4).collect();
    let first = process_window(&window, &mut state, &decoder(), &config).unwrap().report.unwrap();
    let before: Vec<DenseImage> = (0..4).map(|id| state.refined_depth(id).unwrap().clone()).collect();
    let again = process_window(&window, &mut state, &decoder(), &config).unwrap().report.unwrap();
    assert!((again.initial_energy - again.final_energy).abs() < 1e-9);
    assert!((first.final_energy - again.final_energy).abs() < 1e-9);
    for (id, old) in before.iter().enumerate() {
        let new = state.refined_depth(id as u64).unwrap();
        let worst = old.data().iter().zip(new.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-5, "keyframe {id} moved {worst} m");
    }
}

#[test]
fn resent_keyframe_updates_in_place() {
    let packets = sequence(3);
    let mut state = MapperState::new();
    for p in packets.iter().cloned() {
        assert_eq!(ingest(p, &mut state).unwrap(), Ack::Scheduled);
        process_pending(&mut state, &decoder(), &OptimizerConfig::default()).unwrap();
    }
    let mut moved = packets[1].clone();
    moved.pose = packets[2].pose;
    for _ in 0..5 {
        assert_eq!(ingest(moved.clone(), &mut state).unwrap(), Ack::Duplicate);
    }
    assert_eq!(state.predictions, 3);
    assert_eq!(state.packet(1).unwrap().pose, packets[2].pose);
    assert!(state.pending_window().is_none());
}

#[test]
fn lockstep_is_deterministic() {
    let run = || run_lockstep(sequence(5), MapperState::new(), &decoder(), &OptimizerConfig::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.refined_depths(), b.refined_depths());
}

#[test]
fn service_predicts_every_keyframe() {
    let handle = MapperService::spawn(decoder(), OptimizerConfig::default(), 4);
    for p in sequence(6) {
        handle.ingest(p).unwrap();
    }
    let (state, errors) = handle.finish().unwrap();
    assert!(errors.is_empty(), "{errors:?}");
    assert_eq!(state.predictions, 6);
    assert!((0..6).all(|id| state.initial_depth(id).is_some()));
    // The newest keyframe's window always runs.
    assert!(state.refined_depth(5).is_some());
}
