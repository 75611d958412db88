use super::*;
use crate::synth::{generate_dataset, SceneSpec};

fn tiny_data() -> DatasetBundle {
    let mut s = SceneSpec::blinker();
    s.frames = 4;
    s.cameras.truncate(4);
    generate_dataset(&s, None, None).unwrap()
}

fn tiny_config(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(steps, 11);
    c.batch_rays = 4;
    c.samples = 8;
    c.chunk_rays = 2;
    c.fields.static_layers = 2;
    c.fields.static_width = 8;
    c.fields.dynamic_layers = 2;
    c.fields.dynamic_width = 8;
    c
}

struct Failing;

impl Enhancer for Failing {
    fn enhance(&self, _: &EnhanceRequest<'_>) -> Result<Image> {
        Err(Error::input("no prior"))
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let data = tiny_data();
    let mut c = tiny_config(3);
    c.lr = 0.0;
    let mut t = Trainer::new(c, &data).unwrap();
    let before = t.model().clone();
    t.run(None, None).unwrap();
    assert_eq!(t.model(), &before);
}

#[test]
fn one_step_on_a_single_ray_reduces_its_loss() {
    let data = tiny_data();
    let mut c = tiny_config(1);
    c.lr = 1e-4;
    let mut t = Trainer::new(c, &data).unwrap();
    let mut rng = step_rng(3, 0);
    let mut b = sample_batch(&data, 1, 1, &mut rng).unwrap();
    b.sampling = BatchSampling::Midpoint;
    let before = t.evaluate_batch(&b).unwrap().0.total;
    t.step_on(&b, &mut rng).unwrap();
    let after = t.evaluate_batch(&b).unwrap().0.total;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = tiny_data();
    let a = Trainer::new(tiny_config(4), &data).unwrap().run(None, None).unwrap();
    let b = Trainer::new(tiny_config(4), &data).unwrap().run(None, None).unwrap();
    assert_eq!(crate::io::encode_checkpoint(&a).unwrap(), crate::io::encode_checkpoint(&b).unwrap());
    let mut c = tiny_config(4);
    c.seed = 12;
    let other = Trainer::new(c, &data).unwrap().run(None, None).unwrap();
    assert_ne!(other.model, a.model);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let data = tiny_data();
    let c = tiny_config(0);
    let init = init_model(&c, &data).unwrap();
    let ck = Trainer::new(c, &data).unwrap().run(None, None).unwrap();
    assert_eq!(ck.model, init);
    assert_eq!(ck.step, 0);
}

#[test]
fn resumed_run_matches_uninterrupted_run_bitwise() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let full = Trainer::new(tiny_config(6), &data).unwrap().run(None, None).unwrap();
    let mut first = Trainer::new(tiny_config(6), &data).unwrap();
    first.run(Some(dir.path()), Some(3)).unwrap();
    let saved = crate::io::load_checkpoint(&checkpoint_path(dir.path(), None)).unwrap();
    assert_eq!(saved.step, 3);
    let resumed = Trainer::resume(tiny_config(6), &data, saved).unwrap().run(None, None).unwrap();
    assert_eq!(crate::io::encode_checkpoint(&resumed).unwrap(), crate::io::encode_checkpoint(&full).unwrap());
}

#[test]
fn resume_rejects_a_different_configuration() {
    let data = tiny_data();
    let ck = Trainer::new(tiny_config(2), &data).unwrap().run(None, Some(1)).unwrap();
    let mut c = tiny_config(2);
    c.lr = 1e-3;
    assert!(Trainer::resume(c, &data, ck).is_err());
}

#[test]
fn reference_white_balance_never_changes() {
    let data = tiny_data();
    let mut c = tiny_config(5);
    c.wb_sharing = WbSharing::PerFrame;
    let mut t = Trainer::new(c, &data).unwrap();
    t.run(None, None).unwrap();
    let gains = t.model().wb.log_gains();
    // frame 1 is the first mid exposure
    assert_eq!(&gains[3..6], &[0.0; 3]);
    assert!(gains.iter().any(|g| *g != 0.0));
}

#[test]
fn loss_log_has_every_term_at_every_step() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(tiny_config(3), &data).unwrap().run(Some(dir.path()), None).unwrap();
    let series = crate::io::read_loss_log(&dir.path().join("loss_log.txt")).unwrap();
    assert_eq!(series.len(), LossBreakdown::TERMS.len());
    for (_, pts) in series {
        assert_eq!(pts.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let data = tiny_data();
    let mut t = Trainer::new(tiny_config(2), &data).unwrap();
    t.state.model.fields.weights_mut().fill(f64::NAN);
    match t.step() {
        Err(Error::NonFinite { term, step, .. }) => {
            assert_eq!(step, 0);
            assert!(LossBreakdown::TERMS.contains(&term.as_str()));
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn generative_schedule_respects_warm_up_and_rate() {
    let w = LossWeights {
        t_warm: 10_000,
        p_gen: 0.1,
        ..LossWeights::default()
    };
    assert!((0..10_000).all(|s| !generative_fires(7, s, &w)));
    let fired = (10_000..20_000).filter(|s| generative_fires(7, *s, &w)).count();
    assert!((fired as f64 / 10_000.0 - 0.1).abs() <= 0.01, "{fired}");
}

#[test]
fn enhancer_failure_skips_the_term_and_training_continues() {
    let data = tiny_data();
    let mut c = tiny_config(6);
    c.weights.t_warm = 0;
    c.weights.p_gen = 1.0;
    c.enhancer = EnhancerKind::Identity;
    let mut t = Trainer::new(c, &data).unwrap();
    t.set_enhancer(Some(Box::new(Failing)));
    t.run(None, None).unwrap();
    assert_eq!(t.state().gen_failures, 6);
    assert!(t.log().iter().all(|(_, l)| l.gen == 0.0));
}

#[test]
fn enhancer_is_only_called_after_warm_up() {
    let data = tiny_data();
    let mut c = tiny_config(12);
    c.weights.t_warm = 6;
    c.weights.p_gen = 0.5;
    c.enhancer = EnhancerKind::Oracle;
    let mut t = Trainer::new(c, &data).unwrap();
    t.run(None, None).unwrap();
    assert!(t.enhancer_calls().iter().all(|s| *s >= 6));
    assert!(!t.enhancer_calls().is_empty());
    assert!(t.log().iter().any(|(_, l)| l.gen > 0.0));
}

#[test]
fn generative_gradient_matches_finite_differences() {
    // the oracle target does not depend on the parameters, so the loss is a plain function of them
    let data = tiny_data();
    let mut c = tiny_config(1);
    c.generative.patch = 4;
    c.samples = 6;
    c.weights.beta_gen = 0.7;
    let mut model = init_model(&c, &data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for w in model.fields.weights_mut() {
        *w += rng.random_range(-0.15..0.15);
    }
    let e = enhancer::OracleEnhancer { spec: data.spec.clone() };
    let eval = |m: &Model| generative_term(&c, &data, m, &e, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let s = eval(&model);
    assert!(s.value > 0.0);
    let h = 1e-6;
    let masks = model.trainable_masks();
    for g in 0..3 {
        for k in (0..model.groups()[g].len()).step_by(5).filter(|k| masks[g][*k]) {
            let mut a = model.clone();
            a.groups_mut()[g][k] += h;
            let mut b = model.clone();
            b.groups_mut()[g][k] -= h;
            let fd = (eval(&a).value - eval(&b).value) / (2.0 * h);
            let an = s.grad.groups()[g][k];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "group {g} entry {k}: fd {fd} vs {an}");
        }
    }
}
