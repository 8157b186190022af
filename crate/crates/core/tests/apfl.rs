use mspg_core::apfl::{Adjustment, Stage, StageConfig, Trainer, LR_FLOOR};
use mspg_core::harness::config::RunConfig;
use mspg_core::harness::datasets::{Dataset, RingConfig};
use proptest::prelude::*;

fn small(rounds: u64) -> RunConfig {
    RunConfig {
        rounds,
        batch: 4,
        gen_blocks: 1,
        eval_samples: 16,
        balance: false,
        window: 3,
        // every rule off unless a test turns it on
        strong_d: 1.0,
        overconfident: 1.0,
        quality_tol: -1e9,
        ..RunConfig::default()
    }
}

fn trainer(cfg: RunConfig) -> Trainer<f32> {
    Trainer::new(cfg, Dataset::Ring(RingConfig::default())).unwrap()
}

proptest! {
    #[test]
    fn curriculum_only_moves_forward(total in 1u64..400, mid in 0.0f64..1.0, span in 0.0f64..1.0, noise in 0.0f64..1.0) {
        let cfg = StageConfig { middle_from: mid, late_from: mid + (1.0 - mid) * span, noise_start: noise, weight_reg: 1e-4 };
        let (m, l) = cfg.boundaries(total);
        let mut prev = cfg.settings(0, total);
        for round in 0..total {
            let s = cfg.settings(round, total);
            prop_assert!(s.stage >= prev.stage);
            prop_assert!(s.d_steps >= prev.d_steps);
            prop_assert_eq!(s.label_smoothing, s.stage == Stage::Early);
            prop_assert_eq!(s.stage == Stage::Early, round < m);
            prop_assert_eq!(s.stage == Stage::Late, round >= l);
            prop_assert!(s.noise >= 0.0 && s.noise <= noise * (1.0 + f64::EPSILON));
            if s.stage == Stage::Late && prev.stage == Stage::Late {
                prop_assert!(s.noise <= prev.noise);
            }
            prev = s;
        }
        prop_assert_eq!(cfg.settings(total - 1, total).noise, 0.0);
    }
}

#[test]
fn strong_discriminator_rule_halves_its_rate() {
    let mut t = trainer(RunConfig { strong_d: 0.0, ..small(7) });
    let lr_d = t.cfg.lr_d;
    for round in 0..7 {
        let out = t.train_round().unwrap();
        let fires = round % 3 == 2;
        assert_eq!(
            out.adjustments,
            if fires { vec![Adjustment::WeakenDiscriminator] } else { vec![] },
            "round {round}"
        );
        assert_eq!(out.row.eta_g, t.cfg.lr_g);
        assert_eq!(out.row.eta_d, lr_d * 0.5f64.powi((round + 1) / 3));
    }
    assert_eq!(t.state.d_steps_cap, Some(1));
}

#[test]
fn support_rule_doubles_feature_matching_up_to_cap() {
    let cfg = RunConfig { overconfident: 0.0, slope_tol: 1e9, lambda_fm: 1.0, lambda_fm_cap: 3.0, ..small(12) };
    let mut t = trainer(cfg);
    let mut seen = Vec::new();
    for _ in 0..12 {
        let out = t.train_round().unwrap();
        if out.adjustments.contains(&Adjustment::SupportGenerator) {
            seen.push(t.state.lambda_fm);
        }
    }
    assert_eq!(seen, vec![2.0, 3.0, 3.0, 3.0]);
    assert!(t.state.smoothing_forced);
}

#[test]
fn plateau_rule_decays_both_rates() {
    let cfg = RunConfig { quality_tol: 1e9, lr_gamma: 0.5, lr_step: 1, ..small(9) };
    let mut t = trainer(cfg);
    for _ in 0..9 {
        t.train_round().unwrap();
    }
    assert_eq!(t.state.knobs.eta_g, 1e-3 * 0.125);
    assert_eq!(t.state.knobs.eta_d, 1e-3 * 0.125);
}

#[test]
fn decay_stops_at_the_floor() {
    let cfg = RunConfig { lr_decay_every_round: true, lr_gamma: 0.01, lr_step: 1, ..small(5) };
    let mut t = trainer(cfg);
    for _ in 0..5 {
        t.train_round().unwrap();
    }
    assert_eq!(t.state.knobs.eta_g, LR_FLOOR);
    assert_eq!(t.state.knobs.eta_d, LR_FLOOR);
}

#[test]
fn rules_switch_off_with_the_flag() {
    let mut t = trainer(RunConfig { apfl: false, strong_d: 0.0, quality_tol: 1e9, ..small(6) });
    for _ in 0..6 {
        let out = t.train_round().unwrap();
        assert!(out.adjustments.is_empty());
        assert_eq!((out.row.eta_g, out.row.eta_d), (1e-3, 1e-3));
        assert_eq!(out.row.action, -1);
    }
    assert!(t.train_round().is_err(), "no rounds left");
}
