use less_core::baselines::{random_selection, rds_scores, tfidf_scores, TfIdf};
use less_core::influence::{
    inf_adam, inf_sgd, inf_signgd, select_top_k, Diagnostics, InfluenceScore, Kernel,
    SubtaskFeatureSet,
};
use less_core::math;
use less_core::model::{Example, TinyLm, TinyLmConfig};
use less_core::optimizer::{sign, AdamState};
use less_core::projection::{project, ProjectionSpec};
use less_core::synthdata::{
    generate_pool, generate_val, Alphabet, PoolConfig, Skill, Task, VOCAB_SIZE,
};
use less_core::train::{Checkpoint, TrainConfig};
use less_core::verify::{
    run_selection_trial, study_length_bias, LmObjective, SelectionTrial, Status, StepRule,
};
use rand::Rng;

fn sc(id: u64, a: f64) -> InfluenceScore {
    InfluenceScore {
        example_id: id,
        per_subtask: vec![a],
        aggregate: a,
        kernel: Kernel::AdamCosine,
    }
}

#[test]
fn top_k_matches_full_sort_on_10k() {
    let mut rng = math::rng(3);
    // coarse values so ties are common
    let scores: Vec<InfluenceScore> = (0..10_000)
        .map(|i| sc(i, (rng.random_range(0..500) as f64) / 100.0))
        .collect();
    let mut oracle: Vec<(f64, u64)> = scores.iter().map(|s| (s.aggregate, s.example_id)).collect();
    oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in [1, 17, 500, 9_999, 10_000] {
        let top = select_top_k(&scores, k).unwrap();
        let got: Vec<(f64, u64)> = top.iter().map(|s| (s.aggregate, s.example_id)).collect();
        assert_eq!(got, oracle[..k]);
    }
}

#[test]
fn kernels_match_direct_summation() {
    let mut rng = math::rng(9);
    let lrs = [0.01, 0.007, 0.004];
    for _ in 0..50 {
        let train: Vec<Vec<f64>> = (0..3).map(|_| math::gaussian_vec(&mut rng, 12)).collect();
        let val = SubtaskFeatureSet {
            subtask: 0,
            epochs: (0..3).map(|_| math::gaussian_vec(&mut rng, 12)).collect(),
        };
        let mut cos_sum = 0.0;
        let mut dot_sum = 0.0;
        for i in 0..3 {
            let d: f64 = (0..12).map(|j| train[i][j] * val.epochs[i][j]).sum();
            let nt: f64 = train[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv: f64 = val.epochs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            cos_sum += lrs[i] * d / (nt * nv);
            dot_sum += lrs[i] * d;
        }
        let mut diag = Diagnostics::default();
        assert!((inf_adam(&train, &val, &lrs, &mut diag).unwrap() - cos_sum).abs() < 1e-12);
        assert!((inf_signgd(&train, &val, &lrs, &mut diag).unwrap() - cos_sum).abs() < 1e-12);
        assert!((inf_sgd(&train, &val, &lrs, &mut diag).unwrap() - dot_sum).abs() < 1e-12);
        assert_eq!(diag.zero_norm_terms, 0);
    }
}

#[test]
fn subtask_mean_matches_loop() {
    let mut rng = math::rng(10);
    let feats: Vec<Vec<Vec<f64>>> = (0..5)
        .map(|_| (0..2).map(|_| math::gaussian_vec(&mut rng, 6)).collect())
        .collect();
    let set = SubtaskFeatureSet::from_examples(3, &feats).unwrap();
    for e in 0..2 {
        for j in 0..6 {
            let mut acc = 0.0;
            for f in &feats {
                acc += f[e][j];
            }
            assert_eq!(set.epochs[e][j], acc * (1.0 / 5.0));
        }
    }
}

#[test]
fn projected_sgd_influence_tracks_full_dimension() {
    let mut rng = math::rng(12);
    let p = 400;
    let spec = ProjectionSpec::new(p, 4 * p, 1);
    let a = math::unit_vec(&mut rng, p);
    let mut b = math::unit_vec(&mut rng, p);
    math::axpy(1.0, &a, &mut b);
    let exact = math::dot(&a, &b);
    let val = SubtaskFeatureSet {
        subtask: 0,
        epochs: vec![project(&spec, &a).unwrap()],
    };
    let got = inf_sgd(
        &[project(&spec, &b).unwrap()],
        &val,
        &[1.0],
        &mut Diagnostics::default(),
    )
    .unwrap();
    assert!((got - exact).abs() < 0.1, "{got} vs {exact}");
}

#[test]
fn sign_features_are_ternary_before_projection() {
    let mut rng = math::rng(13);
    let mut g = math::gaussian_vec(&mut rng, 50);
    g[7] = 0.0;
    let s = sign(&g);
    assert!(s.iter().all(|&x| x == 1.0 || x == -1.0 || x == 0.0));
    assert_eq!(s[7], 0.0);
}

fn lm_and_pool() -> (TinyLm, Vec<Example>) {
    let model = TinyLm::new(TinyLmConfig::default()).unwrap();
    let pool = generate_pool(&PoolConfig::uniform(4, 21)).unwrap();
    (model, pool)
}

#[test]
fn target_itself_wins_under_sgd() {
    let (model, pool) = lm_and_pool();
    let base = model.init(1);
    let obj = LmObjective {
        model: &model,
        base: base.clone(),
    };
    let params = model.trainable(&base).values;
    // non-zero adapter so the target's own gradient is informative
    let mut rng = math::rng(2);
    let params: Vec<f64> = params
        .iter()
        .map(|x| x + 0.05 * math::gaussian(&mut rng))
        .collect();
    for t in 0..10 {
        let target = pool[t].clone();
        let mut candidates: Vec<Example> = pool[20..35].to_vec();
        candidates.push(target.clone());
        let trial = SelectionTrial {
            params: params.clone(),
            candidates,
            target,
            rule: StepRule::Sgd,
        };
        let o = run_selection_trial(&obj, &trial, 1e-3).unwrap();
        let best = o
            .actual
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(best, 15, "trial {t}");
        assert!(o.agrees);
    }
}

#[test]
fn adam_selection_zero_snapshot_behaves_like_sign() {
    let (model, pool) = lm_and_pool();
    let base = model.init(1);
    let obj = LmObjective {
        model: &model,
        base: base.clone(),
    };
    let params = model.trainable(&base).values;
    let trial = SelectionTrial {
        params: params.clone(),
        candidates: pool[..8].to_vec(),
        target: pool[9].clone(),
        rule: StepRule::Adam {
            config: Default::default(),
            state: AdamState::new(params.len()),
        },
    };
    let o = run_selection_trial(&obj, &trial, 1e-4).unwrap();
    assert!(o.agrees);
}

fn checkpoints(model: &TinyLm, pool: &[Example]) -> Vec<Checkpoint> {
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    less_core::train::warmup(model, model.init(0), pool, 0.2, &cfg)
        .unwrap()
        .checkpoints
}

#[test]
fn length_bias_two_lengths() {
    // same skill and alphabet, only lengths 2 and 12
    let model = TinyLm::new(TinyLmConfig::default()).unwrap();
    let task = Task::new(Skill::Copy, Alphabet::A);
    let mut pool = Vec::new();
    let mut rng = math::rng(31);
    for i in 0..60u64 {
        let len = if i % 2 == 0 { 2 } else { 12 };
        let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(0..16)).collect();
        pool.push(Example::new(i, Some(task.label()), prompt.clone(), prompt));
    }
    let ck = checkpoints(&model, &pool);
    let val = generate_val(&[task], 4, 1, 2, 12).unwrap();
    let study = study_length_bias(&model, &ck, &pool, &val, 10, 0).unwrap();
    let short_norm: f64 = study
        .rows
        .iter()
        .filter(|r| r.completion_len == 2)
        .map(|r| r.grad_norm)
        .sum();
    let long_norm: f64 = study
        .rows
        .iter()
        .filter(|r| r.completion_len == 12)
        .map(|r| r.grad_norm)
        .sum();
    assert!(short_norm > long_norm);
    let dot_short = study
        .rows
        .iter()
        .filter(|r| r.selected_dot && r.completion_len == 2)
        .count();
    assert!(dot_short > 5, "{dot_short}");
}

#[test]
fn length_bias_skips_constant_lengths() {
    let model = TinyLm::new(TinyLmConfig::default()).unwrap();
    let pool: Vec<Example> = (0..10)
        .map(|i| Example::new(i, Some(0), vec![1, 2, 3], vec![1, 2, 3]))
        .collect();
    let ck = checkpoints(&model, &pool);
    let val = vec![pool[..2].to_vec()];
    let study = study_length_bias(&model, &ck, &pool, &val, 3, 0).unwrap();
    assert!(study
        .report
        .checks
        .iter()
        .all(|c| c.status == Status::Skipped));
    assert!(study.rows.is_empty());
}

#[test]
fn random_selection_inclusion_is_binomial() {
    let ids: Vec<u64> = (0..200).collect();
    let k = 10;
    let draws = 10_000;
    let mut counts = vec![0u32; 200];
    for seed in 0..draws {
        for id in random_selection(&ids, k, seed).unwrap() {
            counts[id as usize] += 1;
        }
    }
    let p = k as f64 / 200.0;
    let mu = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    // 200 independent-ish cells; 4 sigma keeps the family-wise miss rate negligible
    for c in counts {
        assert!((c as f64 - mu).abs() < 4.0 * sigma, "{c} vs {mu}");
    }
}

#[test]
fn rds_matches_hand_cosine() {
    let model = TinyLm::new(TinyLmConfig::default()).unwrap();
    let pool = generate_pool(&PoolConfig::uniform(1, 4)).unwrap()[..3].to_vec();
    let ck = checkpoints(&model, &generate_pool(&PoolConfig::uniform(2, 5)).unwrap());
    let val = vec![pool[..1].to_vec()];
    let scores = rds_scores(&model, &ck, &pool, &val, &mut Diagnostics::default()).unwrap();
    for (ex, s) in pool.iter().zip(&scores) {
        let mut hand = 0.0;
        for c in &ck {
            let a = model.last_hidden(ex, &c.params).unwrap();
            let b = model.last_hidden(&pool[0], &c.params).unwrap();
            let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            hand += c.avg_lr * d / (na * nb);
        }
        assert!((s.aggregate - hand).abs() < 1e-12);
    }
    assert!((scores[0].aggregate - ck.iter().map(|c| c.avg_lr).sum::<f64>()).abs() < 1e-12);
}

#[test]
fn rds_equal_features_tie_by_id() {
    // all-zero model: every hidden state is 0, so every score is 0 and ties order by id
    let model = TinyLm::new(TinyLmConfig::default()).unwrap();
    let pool = generate_pool(&PoolConfig::uniform(1, 4)).unwrap();
    let ck = vec![Checkpoint {
        epoch: 0,
        params: model.zero_params(),
        adam: AdamState::new(model.trainable_len()),
        avg_lr: 0.01,
    }];
    let mut diag = Diagnostics::default();
    let scores = rds_scores(&model, &ck, &pool, &[pool[..1].to_vec()], &mut diag).unwrap();
    let top = select_top_k(&scores, pool.len()).unwrap();
    let ids: Vec<u64> = top.iter().map(|s| s.example_id).collect();
    assert_eq!(ids, (0..pool.len() as u64).collect::<Vec<_>>());
    assert_eq!(diag.zero_norm_terms, pool.len() as u64);
}

#[test]
fn tfidf_matches_direct_oracle() {
    let pool = generate_pool(&PoolConfig::uniform(3, 6)).unwrap();
    let val = generate_val(&[Task::new(Skill::Reverse, Alphabet::B)], 3, 2, 2, 12).unwrap();
    let scores = tfidf_scores(&pool, &val, VOCAB_SIZE).unwrap();
    let n = pool.len() as f64;
    let mut df = vec![0.0; VOCAB_SIZE];
    for ex in &pool {
        let mut seen = [false; 34];
        for t in ex.prompt.iter().chain(&ex.completion) {
            seen[*t as usize] = true;
        }
        for (d, s) in df.iter_mut().zip(seen) {
            if s {
                *d += 1.0;
            }
        }
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|d| ((1.0 + n) / (1.0 + d)).ln() + 1.0)
        .collect();
    assert_eq!(TfIdf::fit(&pool, VOCAB_SIZE).idf().len(), 34);
    let vec_of = |ex: &Example| {
        let mut v = vec![0.0; VOCAB_SIZE];
        for t in ex.prompt.iter().chain(&ex.completion) {
            v[*t as usize] += idf[*t as usize];
        }
        v
    };
    let mut centroid = vec![0.0; VOCAB_SIZE];
    for ex in &val[0] {
        for (c, x) in centroid.iter_mut().zip(vec_of(ex)) {
            *c += x / 3.0;
        }
    }
    for (ex, s) in pool.iter().zip(&scores) {
        let v = vec_of(ex);
        let want = math::cosine(&v, &centroid).unwrap();
        assert!((s.aggregate - want).abs() < 1e-12);
    }
}
