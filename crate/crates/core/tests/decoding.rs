use prunekv::inference::{equivalent_logits, Decoder, RunReport, generate, generate_with, GatePolicy, GenerationRequest, PrefillMode, Sampling};
use prunekv::model::forward_with_masks;
use prunekv::{Matrix, ModelConfig, ModelParams, PruningVariant};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [PruningVariant; 5] = [
    PruningVariant::Learned,
    PruningVariant::LearnedDepthPropagated,
    PruningVariant::Dense,
    PruningVariant::Local(3),
    PruningVariant::StridedSparse(2),
];

/// Tiny model whose gates fire often enough to exercise removal.
fn tiny(seed: u64) -> ModelParams<f64> {
    let cfg = ModelConfig::new(24, 16, 2, 2, 4, 40);
    let mut p = ModelParams::<f64>::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in &mut p.layers {
        layer.beta = rng.random_range(-1.0..2.0);
        layer.w_qint.as_mut_slice().iter_mut().for_each(|w| *w *= 4.0);
        layer.w_kint.as_mut_slice().iter_mut().for_each(|w| *w *= 4.0);
    }
    p
}

fn request(seed: u64, lens: &[usize], new: usize, vocab: u32) -> GenerationRequest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompts = lens
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let mut req = GenerationRequest::new(prompts, new);
    req.sampling = Sampling::Temperature(1.0);
    req.seed = seed;
    req
}

fn max_gap(params: &ModelParams<f64>, req: &GenerationRequest, variant: PruningVariant) -> f64 {
    let gen = generate(params, req, variant).unwrap();
    let mut worst = 0.0f64;
    for (b, prompt) in req.prompts.iter().enumerate() {
        let mut seq = prompt.clone();
        seq.extend_from_slice(&gen.tokens[b][..gen.tokens[b].len() - 1]);
        let reference = equivalent_logits(params, &seq, variant, prompt.len(), req.prefill).unwrap();
        for (i, step) in gen.logits.iter().enumerate() {
            let want = reference.row(prompt.len() - 1 + i);
            for (a, w) in step.row(b).iter().zip(want) {
                worst = worst.max((a - w).abs());
            }
        }
    }
    worst
}

#[test]
fn cached_logits_match_full_forward() {
    for seed in 0..4 {
        let params = tiny(seed);
        for variant in VARIANTS {
            for prefill in [PrefillMode::Pruned, PrefillMode::Dense] {
                let mut req = request(seed + 100, &[5, 11, 8], 12, 24);
                req.prefill = prefill;
                let gap = max_gap(&params, &req, variant);
                assert!(gap < 1e-9, "seed {seed} {variant} {prefill:?}: {gap}");
            }
        }
    }
}

#[test]
fn removed_slots_never_influence_outputs() {
    let params = tiny(7);
    let req = request(3, &[6, 9, 4], 14, 24);
    for variant in [PruningVariant::Learned, PruningVariant::LearnedDepthPropagated, PruningVariant::Local(2)] {
        let clean = generate(&params, &req, variant).unwrap();
        let dirty = generate_with(&params, &req, GatePolicy::Model(variant), |d| {
            for c in d.caches_mut() {
                c.scribble_free_slots(1e30);
            }
        })
        .unwrap();
        assert!(!clean.report.drop_events.is_empty(), "{variant}: nothing was removed");
        assert_eq!(clean.tokens, dirty.tokens);
        for (a, b) in clean.logits.iter().zip(&dirty.logits) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }
}

#[test]
fn strongly_negative_beta_attends_only_to_self() {
    let mut params = tiny(2);
    params.layers.iter_mut().for_each(|l| l.beta = -50.0);
    let req = request(9, &[7], 6, 24);
    let gen = generate(&params, &req, PruningVariant::Learned).unwrap();
    assert!(gen.report.kept_reads == 0);
    assert!((gen.report.read_sparsity - 1.0).abs() < 1e-12);

    let mut seq = req.prompts[0].clone();
    seq.extend_from_slice(&gen.tokens[0][..5]);
    let n = seq.len();
    let eye = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let masks = vec![eye; params.config.n_layers];
    let trace = forward_with_masks(&params, &seq, &masks).unwrap();
    for (i, step) in gen.logits.iter().enumerate() {
        for (a, w) in step.row(0).iter().zip(trace.logits.row(6 + i)) {
            assert!((a - w).abs() < 1e-9);
        }
    }
}

#[test]
fn dense_variant_ignores_prefill_mode() {
    let params = tiny(4);
    let mut req = request(1, &[6, 3], 8, 24);
    let pruned = generate(&params, &req, PruningVariant::Dense).unwrap();
    req.prefill = PrefillMode::Dense;
    let dense = generate(&params, &req, PruningVariant::Dense).unwrap();
    assert_eq!(pruned.tokens, dense.tokens);
    for (a, b) in pruned.logits.iter().zip(&dense.logits) {
        assert_eq!(a.as_slice(), b.as_slice());
    }
    assert_eq!(pruned.report.read_sparsity, 0.0);
}

#[test]
fn identical_requests_are_reproducible() {
    let params = tiny(5);
    let req = request(11, &[4, 10, 6, 7], 10, 24);
    let a = generate(&params, &req, PruningVariant::LearnedDepthPropagated).unwrap();
    let b = generate(&params, &req, PruningVariant::LearnedDepthPropagated).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.report.drop_events, b.report.drop_events);
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert_eq!(x.as_slice(), y.as_slice());
    }
}

#[test]
fn reported_sparsity_counts_cache_reads() {
    let params = tiny(6);
    let prompts: [&[u32]; 2] = [&[1, 5, 7, 2, 9], &[3, 3, 8, 1, 0, 4, 4, 2, 6]];
    let mut decoder = Decoder::new(&params, 2, GatePolicy::Model(PruningVariant::Learned)).unwrap();
    let (mut logits, _) = decoder.prefill(&prompts, PrefillMode::Pruned).unwrap();
    let active = [true, true];
    let mut report = RunReport::default();
    let (mut live, mut earlier) = (0u64, 0u64);
    for _ in 0..12 {
        let feed: Vec<u32> = (0..2).map(|b| argmax(logits.row(b))).collect();
        let out = decoder.step(&feed, &active).unwrap();
        report.record_step(&params, &out, &active, 0.0, true).unwrap();
        for b in 0..2 {
            // every live slot except the reader's own was read
            live += decoder.caches().iter().map(|c| c.kept(b) as u64 - 1).sum::<u64>();
            earlier += ((decoder.position(b) - 1) * params.config.n_layers) as u64;
        }
        logits = out.logits;
    }
    assert_eq!(report.kept_reads, live);
    assert_eq!(report.dense_reads, earlier);
    assert!(report.read_sparsity > 0.0);
    assert!((report.read_sparsity - (1.0 - live as f64 / earlier as f64)).abs() < 1e-6);
}

fn argmax(row: &[f64]) -> u32 {
    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap() as u32
}
