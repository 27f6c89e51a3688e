//! Property tests for the invariants of the network, model, propagation,
//! planner and environment layers.

use dpets_core::envs::{wrap_angle, EnvKind};
use dpets_core::model::{
    draw_q_subset, fec_loss, nll_loss, DropoutMode, Ensemble, InputMap, ModelConfig, StateEncoding, TransitionBatch, TwoStepTransition,
};
use dpets_core::nn::{bound_logvar, softplus, Architecture, BatchPrediction, MaskSet, NetworkParams};
use dpets_core::planner::{cem_optimize, ActionBounds, CemConfig, PlanState};
use dpets_core::propagation::{init_bundle, propagate_trajectory, ParticleModel, PropagationMode};
use dpets_core::rng;
use dpets_core::Result;
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, RngCore};

fn random_transitions(n: usize, ds: usize, da: usize, seed: u64) -> Vec<TwoStepTransition> {
    let mut r = rng::stream(seed, &[]);
    let mut v = |k: usize| (0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    (0..n)
        .map(|_| TwoStepTransition {
            s_prev: v(ds),
            a_prev: v(da),
            s_mid: v(ds),
            a_mid: v(da),
            s_next: v(ds),
            episode: 0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bounded_logvar_stays_inside_bounds(raw in -1e3f64..1e3, lo in -20.0f64..0.0, gap in 0.01f64..10.0) {
        let hi = lo + gap;
        let lv = bound_logvar(raw, hi, lo);
        prop_assert!(lv.is_finite());
        // the upper bound is hard; the lower one can be undershot by softplus(lo - hi)
        prop_assert!(lv <= hi + 1e-12);
        prop_assert!(lv >= lo - softplus(lo - hi) - 1e-12);
    }

    #[test]
    fn wrapped_angle_is_in_half_open_interval(theta in -1e4f64..1e4) {
        let w = wrap_angle(theta);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        let k = ((theta - w) / std::f64::consts::TAU).round();
        prop_assert!((theta - w - k * std::f64::consts::TAU).abs() < 1e-9);
    }

    #[test]
    fn rewards_never_exceed_zero(th in -10.0f64..10.0, om in -8.0f64..8.0, u in -3.0f64..3.0,
                                 p in prop::collection::vec(-2.0f64..2.0, 6), a in prop::collection::vec(-2.0f64..2.0, 2)) {
        prop_assert!(EnvKind::Pendulum.reward(&[th, om], &[], &[u]) <= 0.0);
        prop_assert!(EnvKind::Reacher.reward(&p, &[], &a) <= 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), h in 1usize..6) {
        let arch = Architecture::new(3, vec![h, h], 2);
        let p = NetworkParams::init(&arch, &mut rng::stream(seed, &[])).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: NetworkParams = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        back.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn fec_is_first_step_plus_second_step(seed in any::<u64>(), n in 1usize..6) {
        let map = InputMap::new(StateEncoding::LeadingAngle, 2, 1);
        let arch = Architecture::new(map.input_dim(), vec![5], 2);
        let p = NetworkParams::init(&arch, &mut rng::stream(seed, &[1])).unwrap();
        let mut r = rng::stream(seed, &[2]);
        let pairs = vec![
            (MaskSet::sample(&arch, 0.8, &mut r).unwrap(), MaskSet::sample(&arch, 0.8, &mut r).unwrap()),
            (MaskSet::sample(&arch, 0.8, &mut r).unwrap(), MaskSet::sample(&arch, 0.8, &mut r).unwrap()),
        ];
        let data = random_transitions(n, 2, 1, seed);
        let idx: Vec<usize> = (0..n).collect();
        let batch = TransitionBatch::gather(&data, &idx, 2, 1).unwrap();
        let two = fec_loss(&p, &map, &pairs, &batch, true).unwrap();
        let one = fec_loss(&p, &map, &pairs, &batch, false).unwrap();
        prop_assert_eq!(two.value(), two.first + two.second);
        prop_assert_eq!(one.second, 0.0);
        prop_assert_eq!(one.first, two.first);

        // the first term is the plain likelihood on (s_prev, a_prev) → Δ
        let x = map.inputs(batch.s_prev.view(), batch.a_prev.view());
        let y = &batch.s_mid - &batch.s_prev;
        let masks: Vec<MaskSet> = pairs.iter().map(|(z, _)| z.clone()).collect();
        let nll = nll_loss(&p, &masks, x.view(), y.view()).unwrap();
        prop_assert!((nll.value - two.first).abs() <= 1e-12 * nll.value.abs().max(1.0));
    }

    #[test]
    fn duplicated_members_do_not_change_the_mean(seed in any::<u64>(), x in -2.0f64..2.0, u in -2.0f64..2.0) {
        let cfg = ModelConfig { hidden: vec![6], ensemble_size: 1, ..ModelConfig::default() };
        let one = Ensemble::new(cfg.clone(), StateEncoding::LeadingAngle, 2, 1, &mut rng::stream(seed, &[])).unwrap();
        let mut two = Ensemble::new(ModelConfig { ensemble_size: 2, ..cfg }, StateEncoding::LeadingAngle, 2, 1,
                                    &mut rng::stream(seed, &[])).unwrap();
        two.members = vec![one.members[0].clone(), one.members[0].clone()];
        two.family = one.family.clone();
        let s = [x, 0.3];
        let a = one.predictive_summary(&s, &[u]).unwrap();
        let b = two.predictive_summary(&s, &[u]).unwrap();
        for (p, q) in a.mean.iter().zip(b.mean.iter()) {
            prop_assert!((p - q).abs() <= 1e-14 * p.abs().max(1.0));
        }
    }

    #[test]
    fn same_subset_gives_identical_predictions(seed in any::<u64>()) {
        let cfg = ModelConfig { hidden: vec![6], ensemble_size: 2, ..ModelConfig::default() };
        let e = Ensemble::new(cfg, StateEncoding::LeadingAngle, 2, 1, &mut rng::stream(seed, &[])).unwrap();
        let a = e.predict_mean(&[0.1, -0.4], &[0.5], &mut rng::stream(seed, &[9])).unwrap();
        let b = e.predict_mean(&[0.1, -0.4], &[0.5], &mut rng::stream(seed, &[9])).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn restrictive_masks_come_from_the_family(seed in any::<u64>()) {
        let cfg = ModelConfig { hidden: vec![6], ensemble_size: 1, ..ModelConfig::default() };
        let e = Ensemble::new(cfg, StateEncoding::LeadingAngle, 2, 1, &mut rng::stream(seed, &[])).unwrap();
        let masks = e.draw_masks(&mut rng::stream(seed, &[3])).unwrap();
        prop_assert_eq!(masks.len(), 3);
        for m in &masks {
            prop_assert!(e.family.sets.contains(m));
        }
        let mut idx = draw_q_subset(&e.family, 3, &mut rng::stream(seed, &[4])).unwrap();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), 3);
    }

    #[test]
    fn predicted_variance_never_moves_mean_only_particles(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let base = Ensemble::new(ModelConfig { hidden: vec![6], ensemble_size: 2, ..ModelConfig::default() },
                                 StateEncoding::LeadingAngle, 2, 1, &mut rng::stream(seed, &[])).unwrap();
        let shifted = ShiftedVariance { inner: &base, shift };
        let bundle = init_bundle(&base, &[2.0, 0.5], 2, &mut rng::stream(seed, &[1])).unwrap();
        let acts = Array2::from_shape_vec((4, 1), vec![0.5, -1.0, 1.5, 0.0]).unwrap();
        let t1 = propagate_trajectory(&base, &bundle, acts.view(), PropagationMode::MeanOnly, &mut rng::stream(1, &[])).unwrap();
        let t2 = propagate_trajectory(&shifted, &bundle, acts.view(), PropagationMode::MeanOnly, &mut rng::stream(2, &[])).unwrap();
        prop_assert_eq!(t1, t2);
    }

    #[test]
    fn cem_plans_stay_within_bounds(seed in any::<u64>(), target in -5.0f64..5.0, h in 1usize..5) {
        let b = ActionBounds::new(vec![-1.0, -0.5], vec![1.0, 2.0]).unwrap();
        let cfg = CemConfig { population: 30, elites: 5, iterations: 2, ..CemConfig::default() };
        let start = PlanState::initial(h, &b, 1.0);
        let obj = |cs: &[Array2<f64>]| cs.iter().map(|c| -c.iter().map(|x| (x - target).powi(2)).sum::<f64>()).collect();
        let out = cem_optimize(obj, &start, &b, &cfg, &mut rng::stream(seed, &[])).unwrap();
        for row in out.plan.rows() {
            prop_assert!(row[0] >= -1.0 && row[0] <= 1.0 && row[1] >= -0.5 && row[1] <= 2.0);
        }
        prop_assert!(out.best_so_far.windows(2).all(|w| w[1] >= w[0]));
    }
}

/// Same means as the wrapped model, log-variances offset by `shift`.
struct ShiftedVariance<'a> {
    inner: &'a Ensemble,
    shift: f64,
}

impl ParticleModel for ShiftedVariance<'_> {
    fn state_dim(&self) -> usize {
        ParticleModel::state_dim(self.inner)
    }
    fn action_dim(&self) -> usize {
        ParticleModel::action_dim(self.inner)
    }
    fn members(&self) -> usize {
        ParticleModel::members(self.inner)
    }
    fn particle_masks(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<MaskSet>> {
        ParticleModel::particle_masks(self.inner, count, rng)
    }
    fn predict(&self, member: usize, mask: &MaskSet, s: ArrayView2<f64>, a: ArrayView2<f64>) -> BatchPrediction {
        let mut p = self.inner.predict(member, mask, s, a);
        p.logvar.mapv_inplace(|v| v + self.shift);
        p
    }
}

#[test]
fn mode_switch_is_reflected_in_particle_masks() {
    let mk = |dropout| {
        Ensemble::new(
            ModelConfig {
                hidden: vec![6],
                ensemble_size: 1,
                dropout,
                ..ModelConfig::default()
            },
            StateEncoding::Identity,
            1,
            1,
            &mut rng::stream(0, &[]),
        )
        .unwrap()
    };
    let off = mk(DropoutMode::Disabled);
    let masks = ParticleModel::particle_masks(&off, 3, &mut rng::stream(1, &[])).unwrap();
    assert!(masks.iter().all(|m| m.kept_fraction() == 1.0));
    let fresh = mk(DropoutMode::Fresh);
    let masks = ParticleModel::particle_masks(&fresh, 20, &mut rng::stream(1, &[])).unwrap();
    assert!(masks.iter().any(|m| !fresh.family.sets.contains(m)));
}
