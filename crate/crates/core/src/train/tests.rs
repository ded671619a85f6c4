use super::*;
use crate::encoders::{generate_world, SyntheticWorldConfig};
use crate::tensor::DType;

fn world() -> World {
    let cfg = SyntheticWorldConfig {
        n_attrs: 3,
        n_objs: 4,
        d: 16,
        raw_dim: 12,
        latent_dim: 2,
        samples_per_pair: 6,
        seed: 2,
        ..Default::default()
    };
    generate_world(&cfg).unwrap().0
}

fn config(dtype: DType, epochs: usize) -> Config {
    Config {
        dtype,
        vocab_size: 16,
        d_tok: 8,
        epochs,
        batch_size: 8,
        lr: 5e-3,
        threads: 1,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let w = world();
    let mut cfg = config(DType::F64, 2);
    cfg.lr = 0.0;
    let tr = train::<f64>(&cfg, &w).unwrap();
    let fresh = Model::<f64>::for_world(&cfg, &w).unwrap();
    for ((n, a), b) in tr.model().params().iter().zip(fresh.params().values()) {
        assert!(a.bit_eq(b), "{n} moved");
    }
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    let w = world();
    let cfg = config(DType::F32, 2);
    let a = train::<f32>(&cfg, &w).unwrap().checkpoint().to_bytes().unwrap();
    let b = train::<f32>(&cfg, &w).unwrap().checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed = 9;
    assert_ne!(a, train::<f32>(&other, &w).unwrap().checkpoint().to_bytes().unwrap());
}

#[test]
fn resumed_training_matches_straight_run() {
    let w = world();
    let straight = train::<f64>(&config(DType::F64, 3), &w).unwrap();
    let first = train::<f64>(&config(DType::F64, 1), &w).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::<f64>::resume(&Checkpoint::from_bytes(&bytes).unwrap(), &w, Some(3)).unwrap();
    assert_eq!(resumed.epoch(), 1);
    resumed.run(|_| {}).unwrap();
    assert_eq!(resumed.log().epochs, straight.log().epochs);
    assert_eq!(
        resumed.checkpoint().to_bytes().unwrap(),
        straight.checkpoint().to_bytes().unwrap()
    );
    assert_eq!(
        resumed.best_checkpoint().to_bytes().unwrap(),
        straight.best_checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn encoders_stay_frozen_and_loss_falls() {
    let w = world();
    let cfg = config(DType::F32, 6);
    let before = Model::<f32>::for_world(&cfg, &w).unwrap().frozen_fingerprint();
    let tr = train::<f32>(&cfg, &w).unwrap();
    assert_eq!(tr.model().frozen_fingerprint(), before);
    let log = &tr.log().epochs;
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    assert!(log[5].loss_total < log[0].loss_total, "{} vs {}", log[5].loss_total, log[0].loss_total);
    for r in log {
        let parts = LossBreakdown {
            total: r.loss_total,
            t_a: r.loss_t_a,
            t_o: r.loss_t_o,
            t_c: r.loss_t_c,
            v_a: r.loss_v_a,
            v_o: r.loss_v_o,
            v_c: r.loss_v_c,
            kl: r.loss_kl,
        };
        assert!((parts.reassemble(&cfg) - r.loss_total).abs() < 1e-4 * r.loss_total.max(1.0));
        assert!((0.0..=1.0).contains(&r.val_auc));
    }
}

#[test]
fn best_checkpoint_tracks_highest_validation_auc() {
    let w = world();
    let tr = train::<f32>(&config(DType::F32, 4), &w).unwrap();
    let log = &tr.log().epochs;
    let best = tr.best_epoch().unwrap();
    let max = log.iter().map(|r| r.val_auc).fold(f64::MIN, f64::max);
    let first_max = log.iter().find(|r| r.val_auc == max).unwrap().epoch;
    assert_eq!(best, first_max);
    let ck = tr.best_checkpoint();
    assert_eq!(ck.epoch, best);
    let m = model_from_checkpoint(&ck, &w).unwrap();
    let auc = evaluate(&m, &w.val, Mode::Closed, Fusion::Joint { lambda: 1.0 }, 1).unwrap().auc;
    assert_eq!(auc, max);
}

#[test]
fn log_csv_has_expected_columns() {
    let w = world();
    let tr = train::<f32>(&config(DType::F32, 1), &w).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    tr.log().write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "epoch,loss_total,loss_t_a,loss_t_o,loss_t_c,loss_v_a,loss_v_o,loss_v_c,loss_kl,val_S,val_U,val_HM,val_AUC"
    );
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn overflowing_logits_abort_with_divergence() {
    let w = world();
    let mut cfg = config(DType::F32, 1);
    cfg.tau_t = 1e-45;
    let err = train::<f32>(&cfg, &w).err().unwrap();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn dtype_mismatch_is_rejected() {
    let w = world();
    assert!(Trainer::<f64>::new(&config(DType::F32, 1), &w).is_err());
}

#[test]
fn ablated_paths_train() {
    let w = world();
    for (no_vp, no_tp) in [(true, false), (false, true)] {
        let mut cfg = config(DType::F32, 1);
        cfg.no_vp = no_vp;
        cfg.no_tp = no_tp;
        let tr = train::<f32>(&cfg, &w).unwrap();
        let r = tr.log().epochs[0];
        assert_eq!(r.loss_kl, 0.0);
        assert_eq!(no_vp, r.loss_v_a == 0.0);
        assert_eq!(no_tp, r.loss_t_a == 0.0);
    }
}
