use rbft_core::toy::experiment::{run_toy_experiment, ToyBenchConfig, METHOD_DIRECT, METHOD_RBFT};
use rbft_core::toy::ToyModelConfig;
use rbft_core::fusion::FusionConfig;

fn tiny() -> ToyBenchConfig {
    let mut cfg = ToyBenchConfig {
        seeds: vec![0],
        n_train: 8,
        n_test: 4,
        pretrain_scenes: 8,
        rationale_max_tokens: 12,
        heatmap_samples: 1,
        model: ToyModelConfig {
            d: 16,
            layers: 1,
            heads: 2,
            fusion: FusionConfig {
                patch_size: 16,
                ..ToyBenchConfig::default().model.fusion
            },
            ..ToyBenchConfig::default().model
        },
        ..ToyBenchConfig::default()
    };
    for s in [&mut cfg.pretrain, &mut cfg.stage1, &mut cfg.stage2] {
        s.epochs_per_stage = 1;
    }
    cfg
}

#[test]
fn tiny_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_toy_experiment(&tiny(), dir.path()).unwrap();
    assert_eq!(res.seeds.len(), 1);
    let seed = &res.seeds[0];
    for method in [METHOD_RBFT, METHOD_DIRECT] {
        assert_eq!(seed.reports.iter().filter(|r| r.method == method).count(), 3, "{method}");
        assert!(seed.gaps(method).is_some());
    }
    assert!(seed.rationale_file.is_file());
    assert!(!seed.heatmaps.is_empty() && seed.heatmaps.iter().all(|p| p.is_file()));
    assert!(res.gaps_csv.is_file());
    assert!(seed.stage1.first_loss().is_finite() && seed.stage2.last_loss().is_finite());
}

#[test]
fn tiny_run_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_toy_experiment(&tiny(), a.path()).unwrap();
    let rb = run_toy_experiment(&tiny(), b.path()).unwrap();
    let (sa, sb) = (&ra.seeds[0], &rb.seeds[0]);
    assert_eq!(std::fs::read(&sa.rationale_file).unwrap(), std::fs::read(&sb.rationale_file).unwrap());
    assert_eq!(sa.stage2.last_loss().to_bits(), sb.stage2.last_loss().to_bits());
    assert_eq!(sa.gaps(METHOD_RBFT), sb.gaps(METHOD_RBFT));
}
