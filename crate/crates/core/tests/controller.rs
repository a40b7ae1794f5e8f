mod common;

use common::{init, plan, AlwaysWorse, Broken};
use evoharness_core::store::normalized_image;
use evoharness_core::{
    load_mechanism, Controller, MechanismEnv, PhaseOutcome, ScriptedMeta, StopReason, TaskKind,
};

fn controller(root: &std::path::Path) -> Controller {
    Controller::open(root, MechanismEnv::default()).unwrap()
}

#[test]
fn always_worse_plateaus_after_exactly_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let root = init(dir.path(), TaskKind::Cp26, 100, 100);
    let mut ctl = controller(&root);
    let r = ctl.run_segment(&mut AlwaysWorse, &plan(100, 100, 25, 100)).unwrap();
    assert_eq!(r.stop_reason, StopReason::Plateau);
    assert_eq!(r.rounds_run, 25);
    assert!(r.seeded);
    assert_eq!(ctl.registry().latest_round(), 26);
    assert_eq!(r.best_at_end.unwrap().0, 1);
}

#[test]
fn target_met_by_seed_stops_after_round_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = init(dir.path(), TaskKind::Cp26, 100, 100);
    let mut ctl = controller(&root);
    let mut p = plan(15, 15, 25, 100);
    p.stop.target_score = Some(2.0);
    let mut mech = load_mechanism(ctl.workspace(), &MechanismEnv::default()).unwrap();
    let r = ctl.run_segment(mech.as_mut(), &p).unwrap();
    assert_eq!(r.stop_reason, StopReason::Target);
    assert_eq!(r.rounds_run, 0);
    assert_eq!(ctl.registry().latest_round(), 1);
}

#[test]
fn round_cap_fires_when_nothing_else_does() {
    let dir = tempfile::tempdir().unwrap();
    let root = init(dir.path(), TaskKind::Ac2, 100, 100);
    let mut ctl = controller(&root);
    let mut mech = load_mechanism(ctl.workspace(), &MechanismEnv::default()).unwrap();
    let r = ctl.run_segment(mech.as_mut(), &plan(500, 500, 500, 100)).unwrap();
    assert_eq!(r.stop_reason, StopReason::Cap);
    assert_eq!(ctl.registry().latest_round(), 100);
    assert_eq!(ctl.quota().global_remaining, 0);
}

#[test]
fn quota_stops_a_segment_and_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let root = init(dir.path(), TaskKind::Ac2, 8, 100);
    {
        let mut ctl = controller(&root);
        let mut mech = load_mechanism(ctl.workspace(), &MechanismEnv::default()).unwrap();
        let r = ctl.run_segment(mech.as_mut(), &plan(3, 3, 25, 100)).unwrap();
        assert_eq!(r.rounds_run, 3);
        assert_eq!(ctl.quota().global_remaining, 4);
    }
    let mut ctl = controller(&root);
    assert_eq!(ctl.quota().global_remaining, 4);
    let mut mech = load_mechanism(ctl.workspace(), &MechanismEnv::default()).unwrap();
    let r = ctl.run_segment(mech.as_mut(), &plan(50, 50, 25, 100)).unwrap();
    assert_eq!(r.stop_reason, StopReason::Quota);
    assert_eq!(r.rounds_run, 4);
    assert_eq!(ctl.registry().store().len(), 8);
}

#[test]
fn invalid_streak_and_crashes_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let root = init(dir.path(), TaskKind::Cp26, 100, 100);
    let mut ctl = controller(&root);
    let mut p = plan(50, 50, 25, 100);
    p.stop.invalid_streak_limit = 3;
    let r = ctl.run_segment(&mut Broken { panic: false }, &p).unwrap();
    assert_eq!(r.stop_reason, StopReason::InvalidStreak);
    assert_eq!(r.rounds_run, 3);
    assert_eq!(ctl.registry().eval(2).unwrap().error.as_deref(), Some("gave up"));

    let r = ctl.run_segment(&mut Broken { panic: true }, &plan(2, 2, 25, 100)).unwrap();
    assert_eq!(r.rounds_run, 2);
    let rec = ctl.registry().eval(6).unwrap();
    assert_eq!(rec.validity, 0.0);
    assert!(rec.error.as_deref().unwrap().contains("boom"));
    // Crashed rounds still consume quota.
    assert_eq!(ctl.quota().global_remaining, 100 - 6);
}

#[test]
fn noop_meta_runs_every_phase() {
    let dir = tempfile::tempdir().unwrap();
    let root = init(dir.path(), TaskKind::Cp26, 100, 100);
    let mut ctl = controller(&root);
    let ws = ctl.workspace().clone();
    ws.write_plan(&plan(5, 5, 25, 100)).unwrap();
    let report = ctl.run_meta_loop(&mut ScriptedMeta::NoOp, 2).unwrap();
    assert_eq!(report.phases.len(), 2);
    assert_eq!(report.rounds_run(), 10);
    assert_eq!(ctl.registry().latest_round(), 11);
    for p in &report.phases {
        assert!(matches!(p.outcome, PhaseOutcome::Applied(_)));
    }
    assert!(ws.session_dir(2).join("phase_report.txt").is_file());
}

#[test]
fn widen_policy_edits_the_mechanism_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = init(dir.path(), TaskKind::Cp26, 100, 100);
    let mut ctl = controller(&root);
    let ws = ctl.workspace().clone();
    ws.write_plan(&plan(4, 4, 4, 100)).unwrap();
    let before = ws.mechanism_config().unwrap().params.sigma;
    ctl.run_segment(&mut AlwaysWorse, &plan(4, 4, 4, 100)).unwrap();
    let report = ctl.run_meta_loop(&mut ScriptedMeta::WidenOnPlateau, 1).unwrap();
    assert!(matches!(report.phases[0].outcome, PhaseOutcome::Applied(_)));
    assert_eq!(ws.mechanism_config().unwrap().params.sigma, 2.0 * before);
    assert_eq!(ws.current_plan().unwrap().max_rounds, 6);
}

fn full_run(dir: &std::path::Path) -> String {
    let root = init(dir, TaskKind::Cp26, 100, 100);
    let mut ctl = controller(&root);
    ctl.workspace().write_plan(&plan(10, 10, 25, 100)).unwrap();
    ctl.run_meta_loop(&mut ScriptedMeta::WidenOnPlateau, 3).unwrap();
    normalized_image(ctl.registry().store().records())
}

#[test]
fn identical_runs_give_identical_stores() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = full_run(a.path());
    assert_eq!(x, full_run(b.path()));
    assert_eq!(x.lines().count(), 31);
}
