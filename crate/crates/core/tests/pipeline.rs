use synernet_core::adapter::{AdapterConfig, AdapterParams};
use synernet_core::agents::{Ablation, AblationFlags, AgentStates, DifficultyMode};
use synernet_core::config::RunConfig;
use synernet_core::datagen::{generate_benchmark, make_split, Benchmark, BenchmarkConfig};
use synernet_core::pipeline::artifacts::{dump_embeddings, read_report, write_outcome, write_report, EMBEDDINGS_F32};
use synernet_core::pipeline::{
    evaluate, evaluate_predictor, grad_check, jitter, loss_and_grad, run_ablation, run_experiment, train_few_shot,
    variants, Model, TrainBatch, TrainConfig, VocabularyMode,
};

fn bench() -> Benchmark {
    generate_benchmark(&BenchmarkConfig::default(), 0).unwrap()
}

fn short(k: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        k,
        epochs,
        seeds: vec![0],
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_model_is_at_chance_on_ood_and_oracle_is_perfect() {
    let b = bench();
    let split = make_split(&b, 16, 0).unwrap();
    let r = evaluate(&b, &split, Model::Frozen, VocabularyMode::OodOnly).unwrap();
    assert_eq!(r.ood_top1, 0.125);
    assert_eq!(evaluate_predictor(&split, |_, c| c), 1.0);
    assert_eq!(evaluate_predictor(&split, |_, _| usize::MAX), 0.0);

    let composite = evaluate(&b, &split, Model::Frozen, VocabularyMode::Composite).unwrap();
    assert!(composite.sc_top1.unwrap() > 0.9);
}

#[test]
fn training_lowers_the_loss_and_leaves_the_backbone_alone() {
    let b = bench();
    let hash = b.encoders.content_hash();
    let split = make_split(&b, 4, 0).unwrap();
    let out = train_few_shot(&b, &split, &short(4, 60), &AdapterConfig::default(), 0).unwrap();
    assert_eq!(out.log.len(), 60);
    assert!(out.log.last().unwrap().j_total < out.log[0].j_total);
    assert_eq!(out.backbone_hash, hash);
    assert_eq!(b.encoders.content_hash(), hash);
    assert_eq!(out.traces.len(), 2);

    let model = Model::Adapted {
        params: &out.params,
        flags: &AblationFlags::none(),
        difficulty_mode: DifficultyMode::default(),
    };
    let ood = evaluate(&b, &split, model, VocabularyMode::OodOnly).unwrap();
    assert!(ood.top1 > 0.3, "ood accuracy {}", ood.top1);
}

#[test]
fn split_and_config_must_agree_on_k() {
    let b = bench();
    let split = make_split(&b, 2, 0).unwrap();
    assert!(train_few_shot(&b, &split, &short(4, 5), &AdapterConfig::default(), 0).is_err());
}

#[test]
fn kappa_outside_its_clip_gets_no_gradient() {
    let b = bench();
    let split = make_split(&b, 1, 0).unwrap();
    let batch = TrainBatch::new(&b, &split).unwrap();
    let flags = AblationFlags::none();
    let mut p = AdapterParams::init(&b.encoders, &batch.ood_names, &AdapterConfig::default(), &flags, 0).unwrap();
    let idx = p.groups().into_iter().find(|g| g.name == "coord.kappa_param").unwrap().range.start;
    for (kappa, zero) in [(3.0, true), (0.2, true), (1.3, false)] {
        p.coordinator.kappa_param = kappa;
        let g = loss_and_grad(&batch, &b, &p, &flags, DifficultyMode::default(), 0, &AgentStates::default())
            .unwrap()
            .grad;
        assert_eq!(g[idx] == 0.0, zero, "kappa_param {kappa}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let b = bench();
    let split = make_split(&b, 1, 0).unwrap();
    let batch = TrainBatch::new(&b, &split).unwrap();
    for flags in [AblationFlags::none(), AblationFlags::none().with(Ablation::SimpleConcat)] {
        let p = AdapterParams::init(&b.encoders, &batch.ood_names, &AdapterConfig::default(), &flags, 0).unwrap();
        let p = jitter(&p, 0).unwrap();
        let report = grad_check(&b, &batch, &p, &flags, DifficultyMode::default(), 1e-4)
            .unwrap()
            .into_result()
            .unwrap();
        assert_eq!(report.residual_fd_grad, 0.0);
        assert!(report.groups.iter().any(|g| g.max_abs_grad > 0.0));
    }
}

#[test]
fn nominal_ablation_cannot_beat_chance_on_ood() {
    let b = bench();
    let split = make_split(&b, 4, 0).unwrap();
    let mut cfg = short(4, 20);
    cfg.ablation_flags = AblationFlags::none().with(Ablation::NoNom);
    let out = train_few_shot(&b, &split, &cfg, &AdapterConfig::default(), 0).unwrap();
    let model = Model::Adapted {
        params: &out.params,
        flags: &cfg.ablation_flags,
        difficulty_mode: cfg.difficulty_mode,
    };
    assert_eq!(evaluate(&b, &split, model, VocabularyMode::OodOnly).unwrap().top1, 0.125);
}

#[test]
fn experiments_are_bit_reproducible_and_round_trip_through_disk() {
    let b = bench();
    let mut cfg = RunConfig::default();
    cfg.train = short(2, 15);
    cfg.train.seeds = vec![0, 1];
    let (a, outcomes) = run_experiment(&b, &cfg).unwrap();
    let (again, _) = run_experiment(&b, &cfg).unwrap();
    assert_eq!(a, again);
    assert_eq!(a.seeds.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &a).unwrap();
    let read = read_report(dir.path()).unwrap();
    assert_eq!(read, a);
    // The report alone is enough to re-create the run.
    let (rerun, _) = run_experiment(&b, &read.config).unwrap();
    assert_eq!(rerun.summary, a.summary);

    write_outcome(dir.path(), &outcomes[0]).unwrap();
    let (loaded, backbone) = AdapterParams::load(dir.path()).unwrap();
    assert_eq!(backbone, b.encoders.content_hash());
    assert_eq!(loaded.content_hash(), outcomes[0].params.content_hash());
    let split = make_split(&b, 2, 0).unwrap();
    let flags = AblationFlags::none();
    let model = |p| Model::Adapted {
        params: p,
        flags: &flags,
        difficulty_mode: DifficultyMode::default(),
    };
    assert_eq!(
        evaluate(&b, &split, model(&loaded), VocabularyMode::Composite).unwrap(),
        evaluate(&b, &split, model(&outcomes[0].params), VocabularyMode::Composite).unwrap()
    );

    let rows = dump_embeddings(dir.path(), &b, &split, model(&loaded)).unwrap();
    let bytes = std::fs::metadata(dir.path().join(EMBEDDINGS_F32)).unwrap().len() as usize;
    assert_eq!(bytes, rows * b.d_embed() * 4);
}

#[test]
fn ablation_covers_nine_variants_in_order() {
    let b = bench();
    let rows = run_ablation(&b, &short(1, 5), &AdapterConfig::default(), &[0]).unwrap();
    assert_eq!(rows.len(), 9);
    assert_eq!(rows.iter().map(|r| r.flag).collect::<Vec<_>>(), variants());
    assert_eq!(rows[0].drop, 0.0);
    let no_nom = rows.iter().find(|r| r.flag == Some(Ablation::NoNom)).unwrap();
    assert_eq!(no_nom.ood.mean, 0.125);
}
