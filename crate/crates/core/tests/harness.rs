use gridmoe::dso::ParamGroup;
use gridmoe::harness::checkpoint;
use gridmoe::harness::data::{generate_sample, self_test, stream};
use gridmoe::harness::model::{evaluate, trunk_forward, Block};
use gridmoe::harness::sweep::{ablation_sweep, cells, parse_grid, write_sweep_csv};
use gridmoe::harness::train::eval_set;
use gridmoe::harness::{
    forward_model, sample_batch, train, BatchStream, HarnessError, Modality, ModalitySpec,
    ModelParams, RunConfig, SamplerConfig, Target,
};
use gridmoe::tensor::{matvec_into, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn small_config(iterations: u64) -> RunConfig {
    let mut cfg = RunConfig::with_experts(4, 2);
    cfg.run.iterations = iterations;
    cfg
}

#[test]
fn modalities_are_separable_by_channel_histograms() {
    let specs: Vec<_> = Modality::ALL
        .iter()
        .map(|&m| ModalitySpec::standard(m, 8, 8, 8))
        .collect();
    let report = self_test(&specs, 0, 10_000);
    assert_eq!(report.pairs.len(), 3);
    for (a, b, mean, min) in &report.pairs {
        assert!(*min > 0.5, "{a}/{b}: min symmetric KL {min}, mean {mean}");
    }
}

#[test]
fn sampler_frequencies_are_exact() {
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 3];
    for _ in 0..1000 {
        for m in sample_batch(&cfg, &mut rng).unwrap() {
            counts[m.index()] += 1;
        }
    }
    let total = counts.iter().sum::<usize>() as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    assert_eq!(freq, vec![0.5, 0.25, 0.25]);
}

#[test]
fn every_batch_carries_every_task() {
    let cfg = small_config(0);
    let mut stream = BatchStream::new(
        cfg.sampler_config(),
        cfg.modality_specs().unwrap(),
        cfg.run.seed,
    )
    .unwrap();
    for _ in 0..50 {
        let batch = stream.next_batch().unwrap();
        for m in Modality::ALL {
            assert!(batch.iter().any(|s| s.modality == m));
        }
    }
}

/// Identity trunk, zero head bias: the loss is that of the head applied
/// directly to `relu(image)`.
#[test]
fn identity_trunk_matches_raw_feature_predictor() {
    let mut cfg = small_config(0);
    cfg.model.moe_placement = "none".into();
    cfg.model.channels = 2;
    cfg.data.height = 1;
    cfg.data.width = 2;
    let spec = cfg.model_spec().unwrap();
    let mut params = ModelParams::init(&spec, 0).unwrap();
    for b in &mut params.blocks {
        let Block::Linear { weight, bias } = b else {
            unreachable!()
        };
        *weight = Tensor::identity(2);
        *bias = Tensor::vector(vec![0.0; 2]);
    }
    params.heads[0].weight = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
    params.heads[1].weight = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
    params.heads[2].weight = Tensor::matrix(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    for h in &mut params.heads {
        h.bias = Tensor::vector(vec![0.0; 3]);
    }
    let image = |a: [f64; 2], b: [f64; 2]| {
        Tensor::new(vec![1, 2, 2], vec![a[0], a[1], b[0], b[1]]).unwrap()
    };
    let batch = vec![
        gridmoe::harness::Sample {
            modality: Modality::A,
            image: image([1.0, -2.0], [0.5, 0.5]),
            target: Target::Classes(vec![0, 2]),
        },
        gridmoe::harness::Sample {
            modality: Modality::B,
            image: image([2.0, 0.0], [-1.0, 3.0]),
            target: Target::Oriented(
                Tensor::new(vec![1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            ),
        },
        gridmoe::harness::Sample {
            modality: Modality::C,
            image: image([0.0, 0.0], [4.0, 1.0]),
            target: Target::Oriented(Tensor::new(vec![1, 2, 3], vec![0.0; 6]).unwrap()),
        },
    ];
    let (losses, _) = evaluate(&params, &spec, &batch).unwrap();

    // A: relu features [1,0] → logits [1,0,1]; [0.5,0.5] → [0.5,0.5,1]
    let ce = |logits: [f64; 3], y: usize| {
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - logits[y]
    };
    let a = (ce([1.0, 0.0, 1.0], 0) + ce([0.5, 0.5, 1.0], 2)) / 2.0;
    // B: [2,0] → [2,0,1] vs [1,0,0]; [0,3] → [0,3,1.5] vs 0
    let huber = |d: f64| {
        if d.abs() < 1.0 {
            0.5 * d * d
        } else {
            d.abs() - 0.5
        }
    };
    let b = ([1.0, 0.0, 1.0, 0.0, 3.0, 1.5]
        .iter()
        .map(|&d| huber(d))
        .sum::<f64>())
        / 6.0;
    // C: [0,0] → 0; [4,1] → [0,4,1]
    let c = ([0.0, 0.0, 0.0, 0.0, 4.0, 1.0]
        .iter()
        .map(|&d| huber(d))
        .sum::<f64>())
        / 6.0;

    assert!((losses[0] - a).abs() < 1e-12, "{} vs {a}", losses[0]);
    assert!((losses[1] - b).abs() < 1e-12);
    assert!((losses[2] - c).abs() < 1e-12);
    // pinned values of the fixture
    assert!(
        (losses[0] - 0.828_185_786_737_947_1).abs() < 1e-12,
        "{}",
        losses[0]
    );
    assert!((b - 4.5 / 6.0).abs() < 1e-15);
    assert!((c - 4.0 / 6.0).abs() < 1e-15);
}

/// With tied embeddings every MoE block computes (k/N)·pretrained.
#[test]
fn tied_gates_scale_each_moe_block_by_k_over_n() {
    let cfg = small_config(0);
    let spec = cfg.model_spec().unwrap();
    let mut params = ModelParams::init(&spec, 3).unwrap();
    let plain = ModelParams::init(&spec.without_moe(), 3).unwrap();
    for b in &mut params.blocks {
        if let Block::Moe(layer) = b {
            layer.gate.tie_embeddings();
        }
    }
    let scale = spec.moe.top_k as f64 / spec.moe.n_experts as f64;
    let sample = generate_sample(&cfg.modality_specs().unwrap()[1], 0, stream::TRAIN, 0);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(sample.image.clone());
    let out = trunk_forward(&mut tape, &spec, &bound, x, |_, _, _| {}).unwrap();
    let got = tape.value(out).clone();

    // oracle on the MoE-free parameters
    let c = spec.channels;
    let mut h = sample.image.data().to_vec();
    for (i, b) in plain.blocks.iter().enumerate() {
        let Block::Linear { weight, bias } = b else {
            unreachable!()
        };
        let mut next = vec![0.0; h.len()];
        for r in 0..h.len() / c {
            matvec_into(
                weight.data(),
                &h[r * c..(r + 1) * c],
                Some(bias.data()),
                &mut next[r * c..(r + 1) * c],
            );
        }
        let f = if spec.moe_mask[i] { scale } else { 1.0 };
        h = next.iter().map(|v| (f * v).max(0.0)).collect();
    }
    let diff = got
        .data()
        .iter()
        .zip(&h)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "max diff {diff}");
}

#[test]
fn task_losses_ignore_sample_order() {
    let mut cfg = small_config(0);
    cfg.sampler.counts = [3, 2, 2];
    cfg.sampler.batch_size = 7;
    let spec = cfg.model_spec().unwrap();
    let params = ModelParams::init(&spec, 1).unwrap();
    let mut stream =
        BatchStream::new(cfg.sampler_config(), cfg.modality_specs().unwrap(), 5).unwrap();
    let batch = stream.next_batch().unwrap();
    let mut reversed = batch.clone();
    reversed.reverse();
    let (a, _) = evaluate(&params, &spec, &batch).unwrap();
    let (b, _) = evaluate(&params, &spec, &reversed).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn empty_task_is_reported() {
    let cfg = small_config(0);
    let spec = cfg.model_spec().unwrap();
    let params = ModelParams::init(&spec, 1).unwrap();
    let only_a = vec![generate_sample(
        &cfg.modality_specs().unwrap()[0],
        0,
        stream::TRAIN,
        0,
    )];
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    assert!(matches!(
        forward_model(&mut tape, &spec, &bound, &only_a),
        Err(HarnessError::EmptyTask(1))
    ));
}

/// SGD without any governor, written out directly.
fn plain_sgd(cfg: &RunConfig) -> ModelParams {
    let spec = cfg.model_spec().unwrap();
    let mut params = ModelParams::init(&spec, cfg.run.seed).unwrap();
    let mut stream = BatchStream::new(
        cfg.sampler_config(),
        cfg.modality_specs().unwrap(),
        cfg.run.seed,
    )
    .unwrap();
    for _ in 0..cfg.run.iterations {
        let batch = stream.next_batch().unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward_model(&mut tape, &spec, &bound, &batch).unwrap();
        tape.backward(out.total).unwrap();
        for (v, t) in bound.vars().into_iter().zip(params.tensors_mut()) {
            if let Some(g) = tape.grad(v) {
                for (p, g) in t.data_mut().iter_mut().zip(g.data()) {
                    *p -= cfg.run.base_lr * g;
                }
            }
        }
    }
    params
}

#[test]
fn disabled_governor_reproduces_plain_sgd_bit_exactly() {
    let mut cfg = small_config(40);
    cfg.dso.enabled = false;
    let outcome = train(&cfg).unwrap();
    assert_eq!(outcome.params, plain_sgd(&cfg));

    cfg.dso.enabled = true;
    assert_ne!(train(&cfg).unwrap().params, outcome.params);
}

#[test]
fn same_seed_same_parameters() {
    let cfg = small_config(30);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
    let mut other = cfg.clone();
    other.run.seed = 1;
    assert_ne!(train(&other).unwrap().params, a.params);
}

#[test]
fn smoke_run_learns_every_task() {
    let mut cfg = small_config(500);
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg.model.channels = 8;
    let start = Instant::now();
    let o = train(&cfg).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");

    let window = |rows: &[Vec<f64>]| -> Vec<f64> {
        let n = rows.len() as f64;
        (0..3)
            .map(|t| rows.iter().map(|r| r[t]).sum::<f64>() / n)
            .collect()
    };
    let first = window(&o.losses[..20]);
    let last = window(&o.losses[o.losses.len() - 20..]);
    for t in 0..3 {
        assert!(last[t] < first[t], "task {t}: {} → {}", first[t], last[t]);
        assert!(o.eval_final.losses[t] < o.eval_initial.losses[t]);
    }
    // every MoE block pass evaluates exactly H·W·k experts
    assert_eq!(o.expert_applications, o.moe_block_passes * 64 * 2);
    assert!(o.gamma_min > 0.0 && o.gamma_max < 2.0);
}

#[test]
fn participation_counts_cover_every_position() {
    let o = train(&small_config(25)).unwrap();
    let stats = &o.train_stats;
    let mut per_modality = [0u64; 3];
    for m in Modality::ALL {
        for layer in stats.layers() {
            let p = stats.get(m.tag(), layer).unwrap();
            assert_eq!(p.top1.iter().sum::<u64>(), p.positions);
            per_modality[m.index()] = p.positions;
        }
    }
    // 25 batches of (2, 1, 1) samples, 64 positions each
    assert_eq!(per_modality, [25 * 2 * 64, 25 * 64, 25 * 64]);
}

#[test]
fn divergence_aborts_with_log_dump() {
    let mut cfg = small_config(200);
    // trunk weights this large overflow to infinity within four blocks
    cfg.model.pretrained_noise = 1e150;
    match train(&cfg) {
        Err(HarnessError::NonFiniteLoss {
            dump, iteration, ..
        }) => {
            assert!(iteration < 200);
            assert!(dump.contains("# gridmoe losses v1"));
            assert!(dump.contains("# gridmoe dso_log v1"));
            let loss_rows = dump
                .lines()
                .skip(2)
                .take_while(|l| !l.starts_with('#'))
                .count();
            assert!(loss_rows <= 10);
        }
        other => panic!("expected abort, got {:?}", other.map(|o| o.losses.len())),
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let cfg = small_config(3);
    let o = train(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("ck.bin");
    let manifest = checkpoint::save(&o.params, &bin, Some(&cfg.to_toml_string())).unwrap();
    assert_eq!(manifest.total_values, o.params.n_values());
    assert_eq!(
        std::fs::metadata(&bin).unwrap().len() as usize,
        8 * o.params.n_values()
    );

    let mut fresh = ModelParams::init(&o.spec, 99).unwrap();
    let m = checkpoint::load_into(&bin, &mut fresh).unwrap();
    assert_eq!(fresh, o.params);
    assert_eq!(
        RunConfig::from_toml_str(m.config.as_deref().unwrap()).unwrap(),
        cfg
    );

    let mut bigger = cfg.clone();
    bigger.moe.n_experts = 6;
    let mut other = ModelParams::init(&bigger.model_spec().unwrap(), 0).unwrap();
    assert!(matches!(
        checkpoint::load_into(&bin, &mut other),
        Err(HarnessError::ShapeMismatch(_))
    ));
}

#[test]
fn parameter_groups_split_heads_from_backbone() {
    let spec = small_config(0).model_spec().unwrap();
    let params = ModelParams::init(&spec, 0).unwrap();
    let infos = params.infos();
    assert_eq!(infos.len(), params.tensors().len());
    for info in &infos {
        let expect_head = info.name.starts_with("head.");
        assert_eq!(
            matches!(info.group, ParamGroup::Head(_)),
            expect_head,
            "{}",
            info.name
        );
    }
    assert!(infos.iter().any(|i| i.name == "trunk.0.gate.embeddings"));
}

#[test]
fn sweep_counts_cells_and_matches_single_runs() {
    let base: toml::Table = small_config(4).to_toml_string().parse().unwrap();
    let grid = parse_grid("moe.n_experts=2,4,8 run.seed=0,1,2").unwrap();
    assert_eq!(cells(&grid).len(), 9);
    let rows = ablation_sweep(&base, &grid).unwrap();
    assert_eq!(rows.len(), 9);

    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2 + 9);
    assert!(text.starts_with("# gridmoe sweep v1\ncell,moe.n_experts,run.seed,"));

    let single = ablation_sweep(&base, &parse_grid("moe.n_experts=4").unwrap()).unwrap();
    let direct = train(&small_config(4)).unwrap();
    assert_eq!(single[0].final_losses, direct.eval_final.losses);
    assert_eq!(single[0].gamma_min, direct.gamma_min);
}

#[test]
fn sweep_gamma_stays_in_open_interval() {
    let base: toml::Table = small_config(60).to_toml_string().parse().unwrap();
    let rows = ablation_sweep(&base, &parse_grid("dso.tau=3 dso.bias_b=0.4").unwrap()).unwrap();
    for r in rows {
        assert!(
            r.gamma_min > 0.0 && r.gamma_max < 2.0,
            "{} {}",
            r.gamma_min,
            r.gamma_max
        );
    }
}

#[test]
fn eval_set_is_fixed_per_seed() {
    let specs = small_config(0).modality_specs().unwrap();
    assert_eq!(eval_set(&specs, 4, 3), eval_set(&specs, 4, 3));
    assert_eq!(eval_set(&specs, 4, 3).len(), 9);
}

#[test]
fn artifacts_are_written() {
    let o = train(&small_config(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = o.write_artifacts(dir.path()).unwrap();
    for name in [
        "losses.csv",
        "dso_log.csv",
        "expert_stats.csv",
        "metrics.csv",
        "config.toml",
        "checkpoint.bin",
        "checkpoint.json",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(written
        .iter()
        .any(|p| p.starts_with(dir.path().join("top1_maps"))));
    let losses = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let mut lines = losses.lines();
    assert_eq!(lines.next(), Some("# gridmoe losses v1"));
    assert_eq!(lines.next(), Some("iteration,loss_0,loss_1,loss_2,total"));
    assert_eq!(lines.count(), 5);
}
