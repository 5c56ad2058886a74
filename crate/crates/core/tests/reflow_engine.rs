use std::sync::OnceLock;

use reflow_core::data::{preset, Preset, RngStream};
use reflow_core::dynamics::{ode_integrate, IntegratorConfig, LrSchedule, Provenance, TrainConfig};
use reflow_core::field::{Architecture, VectorField};
use reflow_core::metrics::{straightness, w2_empirical};
use reflow_core::reflow::{
    generate_reverse_pairs, generate_synthetic_pairs, pretrain, run_ora_reflow, run_ra_reflow,
    run_ras_reflow, run_reflow, Evaluator, PairStore, Regeneration, ReflowConfig, ReverseMode,
    RunContext,
};
use reflow_core::Matrix;

struct Setup {
    preset: Preset,
    real: Matrix,
    model: VectorField,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let preset = preset("mix-2d").unwrap();
        let real = preset.sample_target(2048, &mut RngStream::new(21, 1)).unwrap();
        let train = TrainConfig {
            steps: 3000,
            batch: 256,
            learning_rate: 2e-3,
            schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        let (model, _) = pretrain(Architecture::mlp(2), &real, &train, 21).unwrap();
        Setup {
            preset,
            real,
            model,
        }
    })
}

fn short_cfg(iterations: usize, steps: usize) -> ReflowConfig {
    ReflowConfig {
        iterations,
        lambda: 0.5,
        alpha: Regeneration::Every(2),
        pairs: 1024,
        nfe: 100,
        train: TrainConfig {
            steps,
            batch: 256,
            learning_rate: 5e-4,
            ..TrainConfig::default()
        },
        ..ReflowConfig::default()
    }
}

#[test]
fn reverse_then_forward_recovers_real_points() {
    let s = setup();
    let x = s.real.select_rows(&(0..256).collect::<Vec<_>>());
    let pairs =
        generate_reverse_pairs(&s.model, &x, 100, ReverseMode::Ode, &mut RngStream::new(0, 0))
            .unwrap();
    let back = ode_integrate(&s.model, &IntegratorConfig::forward(100), &pairs.z).unwrap();
    let err: f64 = (0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(back.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / x.rows() as f64;
    // Data radius is 8; Euler at 100 steps is first order.
    assert!(err < 0.25, "mean round-trip error {err}");
}

#[test]
fn synthetic_pairs_agree_with_direct_evaluation() {
    let s = setup();
    let ev = Evaluator::new(&s.preset, 2048, 100, 5).unwrap();
    let direct = ev.evaluate(&s.model).unwrap()[0];
    let pairs = generate_synthetic_pairs(&s.model, 2048, 100, &mut RngStream::new(6, 0)).unwrap();
    assert!(pairs.provenance.iter().all(|&p| p == Provenance::Synthetic));
    let via_pairs = w2_empirical(&pairs.x, &ev.target).unwrap();
    let rel = (via_pairs - direct).abs() / direct;
    assert!(rel < 0.2, "direct {direct}, via pairs {via_pairs}");
}

#[test]
fn one_reflow_straightens_the_flow() {
    let s = setup();
    let out = run_reflow(&s.model, &short_cfg(1, 600), &RunContext { seed: 3, ..Default::default() }).unwrap();
    let z = RngStream::new(9, 0).normal_matrix(512, 2);
    let before = straightness(&out.models[0], &z, 100).unwrap();
    let after = straightness(&out.models[1], &z, 100).unwrap();
    assert!(after < before, "straightness {before} -> {after}");
}

#[test]
fn small_sde_noise_tracks_ora() {
    let s = setup();
    let mut cfg = short_cfg(1, 100);
    cfg.alpha = Regeneration::Online;
    let mut ev = Evaluator::new(&s.preset, 1024, 100, 4).unwrap();
    ev.w2_points = 1024;
    let ctx = RunContext {
        seed: 4,
        evaluator: Some(ev),
        ..Default::default()
    };
    let ora = run_ora_reflow(&s.model, &s.real, &cfg, &ctx).unwrap();
    let ras = run_ras_reflow(&s.model, &s.real, &cfg, 1e-3, &ctx).unwrap();
    let a = *ora.series.column("w2").unwrap().last().unwrap();
    let b = *ras.series.column("w2").unwrap().last().unwrap();
    assert!((a - b).abs() <= 0.2 * a, "ORA {a}, RAS {b}");
    assert!(ora.stores.is_empty() && ras.stores.is_empty());
}

#[test]
fn stores_of_a_trained_model_validate() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_cfg(1, 8);
    cfg.pairs = 256;
    cfg.train.batch = 128;
    // 2 batches per epoch, 4 epochs, regeneration after epoch 2.
    let ctx = RunContext {
        seed: 2,
        store_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let out = run_ra_reflow(&s.model, &s.real, &cfg, &ctx).unwrap();
    assert_eq!(out.stores.len(), 2);
    for st in &out.stores {
        let (pairs, m) = PairStore::read(st).unwrap();
        assert_eq!(pairs.counts(), (128, 128));
        assert_eq!(m.nfe, 100);
        assert!(!m.real_with_replacement);
        let err = PairStore::validate(st).unwrap();
        assert!(err <= 1e-10, "store {} deviates by {err}", st.display());
        let z = std::fs::metadata(st.join("z.bin")).unwrap().len();
        let p = std::fs::metadata(st.join("provenance.bin")).unwrap().len();
        assert_eq!((z, p), (256 * 2 * 8, 256));
    }
}

#[test]
fn scarce_real_data_is_reused_and_flagged() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let real = s.real.select_rows(&(0..40).collect::<Vec<_>>());
    let mut cfg = short_cfg(1, 2);
    cfg.pairs = 200;
    cfg.train.batch = 100;
    let ctx = RunContext {
        seed: 2,
        store_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let out = run_ra_reflow(&s.model, &real, &cfg, &ctx).unwrap();
    assert!(out.real_with_replacement);
    let (_, m) = PairStore::read(&out.stores[0]).unwrap();
    assert!(m.real_with_replacement);
}

#[test]
fn never_regenerating_writes_one_store_per_iteration() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_cfg(2, 12);
    cfg.pairs = 128;
    cfg.train.batch = 32;
    cfg.alpha = Regeneration::Never;
    let ctx = RunContext {
        seed: 1,
        store_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let out = run_ra_reflow(&s.model, &s.real, &cfg, &ctx).unwrap();
    assert_eq!(out.stores.len(), 2);
    assert_eq!(out.models.len(), 3);
}

#[test]
fn metrics_share_one_schema_across_variants() {
    let s = setup();
    let cfg = short_cfg(1, 4);
    let ctx = RunContext {
        seed: 1,
        evaluator: Some(Evaluator::new(&s.preset, 256, 20, 1).unwrap()),
        ..Default::default()
    };
    let a = run_reflow(&s.model, &cfg, &ctx).unwrap();
    let b = run_ra_reflow(&s.model, &s.real, &cfg, &ctx).unwrap();
    let c = run_ora_reflow(&s.model, &s.real, &cfg, &ctx).unwrap();
    assert_eq!(a.series.names(), b.series.names());
    assert_eq!(a.series.names(), c.series.names());
    assert_eq!(a.series.iterations, vec![0, 1]);
}
