mod common;

use rand::seq::SliceRandom;
use vlprompt::corpus::{generate_sample, generate_split, motif_bbox, CorpusConfig, ObservationVocabulary, Split};
use vlprompt::encoders::{EncoderConfig, EncoderStack, Tokenizer};
use vlprompt::grad::{ParamStore, Tensor};
use vlprompt::introspect::*;
use vlprompt::pretrain::{pretrain_run, PretrainConfig, PretrainData};
use vlprompt::promptgen::{PromptConfig, PromptGenerator, META_B1, META_B2, META_W1, META_W2};

fn toy_stack() -> (EncoderStack, Tokenizer) {
    let vocab = ObservationVocabulary::standard();
    let tok = Tokenizer::standard(&vocab, 32).unwrap();
    (EncoderStack::new(EncoderConfig::default(), tok.vocab_size(), 32).unwrap(), tok)
}

#[test]
fn exact_match_ranks_first_and_ties_go_to_lower_ids() {
    let tok = common::synthetic_tokenizer(5);
    let mut table = Tensor::<f32>::zeros(&[9, 2]);
    let rows: [[f32; 2]; 9] = [[0.0, 0.0]; 9];
    table.data_mut().copy_from_slice(rows.as_flattened());
    for (id, v) in [(4, [1.0, 0.0]), (5, [0.0, 1.0]), (6, [3.0, 3.0]), (7, [-1.0, 0.0]), (8, [0.0, 1.0])] {
        table.data_mut()[id * 2..id * 2 + 2].copy_from_slice(&v);
    }
    let n = nearest_words(&[0.0, 1.0], &table, &tok, 5).unwrap();
    assert_eq!(n[0].distance, 0.0);
    assert_eq!((n[0].token.as_str(), n[1].token.as_str()), ("w001", "w004"));
    assert_eq!(n.iter().map(|w| w.rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    assert!(n.windows(2).all(|p| p[0].distance <= p[1].distance));
    assert!(nearest_words(&[0.0, 1.0], &table, &tok, 0).is_err());
    assert!(nearest_words(&[0.0, 1.0], &table, &tok, 6).is_err());
}

#[test]
fn nearest_words_match_exhaustive_scan() {
    let o = common::nearest_oracle_check(200, 13);
    assert_eq!(o.mismatched_lists, 0, "{o:?}");
    assert!(o.distance_err < 1e-9, "{o:?}");
}

#[test]
fn nearest_words_ignore_row_order() {
    // The same words with their rows, listed in a different id order.
    let mut r = common::rng(3);
    let words: Vec<String> = (0..40).map(|i| format!("w{i:03}")).collect();
    let rows: Vec<Vec<f32>> = (0..40).map(|_| common::rand_tensor(&mut r, &[6], -1.0, 1.0).cast::<f32>().into_data()).collect();
    let build = |order: &[usize]| {
        let mut all: Vec<String> = ["<pad>", "<unk>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect();
        all.extend(order.iter().map(|&i| words[i].clone()));
        let tok: Tokenizer = serde_json::from_value(serde_json::json!({ "words": all, "max_len": 8 })).unwrap();
        let mut data = vec![0f32; 4 * 6];
        order.iter().for_each(|&i| data.extend(&rows[i]));
        (tok, Tensor::new(vec![44, 6], data).unwrap())
    };
    let ident: Vec<usize> = (0..40).collect();
    let mut perm = ident.clone();
    perm.shuffle(&mut r);
    let q = [0.1f32, -0.2, 0.3, 0.0, 0.5, -0.4];
    let (t1, e1) = build(&ident);
    let (t2, e2) = build(&perm);
    assert_eq!(nearest_words(&q, &e1, &t1, 30).unwrap(), nearest_words(&q, &e2, &t2, 30).unwrap());
}

fn images(n: usize) -> Vec<Tensor<f32>> {
    let cfg = CorpusConfig { unseen_test: n, ..CorpusConfig::default() };
    generate_split(&cfg, &ObservationVocabulary::standard(), Split::UnseenTest).into_iter().map(|s| s.image).collect()
}

#[test]
fn context_similarity_properties() {
    let (stack, _) = toy_stack();
    let enc = stack.init(1, 0.07).unwrap();
    let mut gen = PromptGenerator::init(&stack, &PromptConfig::default(), true, &[], 2).unwrap();
    gen.params.get_mut(META_W2).unwrap().data_mut().iter_mut().for_each(|v| *v *= 50.0);
    let imgs = images(6);
    let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
    let m = context_similarity_matrix(&stack, &enc, &gen, &refs).unwrap();
    let mut off_diag_below_one = false;
    for i in 0..6 {
        assert!((m[i][i] - 1.0).abs() < 1e-6);
        for j in 0..6 {
            assert!((m[i][j] - m[j][i]).abs() < 1e-6);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&m[i][j]));
            off_diag_below_one |= i != j && m[i][j] < 1.0 - 1e-6;
        }
    }
    assert!(off_diag_below_one);
    for n in [META_W1, META_B1, META_W2, META_B2] {
        gen.params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let z = context_similarity_matrix(&stack, &enc, &gen, &refs).unwrap();
    assert!(z.iter().flatten().all(|c| (c - 1.0).abs() < 1e-6));
    assert!(context_similarity_matrix(&stack, &enc, &gen, &refs[..1]).is_err());
}

fn toy_store(m: usize) -> (ParamStore<f32>, EncoderStack) {
    let (stack, _) = toy_stack();
    let mut store = stack.init(1, 0.07).unwrap();
    let rows: Vec<(usize, Tensor<f32>)> = (0..14).map(|k| (k, Tensor::zeros(&[64]))).collect();
    let cfg = PromptConfig { m, reduction: 16, ..PromptConfig::default() };
    let gen = PromptGenerator::init(&stack, &cfg, true, &rows, 1).unwrap();
    store.extend_prefix(&gen.params, vlprompt::promptgen::PROMPT_PREFIX);
    (store, stack)
}

#[test]
fn toy_footprint_hand_count() {
    let (store, stack) = toy_store(16);
    let input = FootprintInput { image_side: 32, classes: 14, prompt_len: 17 };
    let rows = count_footprint(&store, &stack.config, input).unwrap();
    let get = |c: &str| rows.iter().find(|r| r.component == c).unwrap().params;
    assert_eq!(get("meta-net"), (64 * 4 + 4) + (4 * 64 + 64));
    assert_eq!(get("context"), 16 * 64);
    assert_eq!(get("class-embeddings"), 14 * 64);
    assert_eq!(prompt_generator_total(&rows).0, 2500);
    assert_eq!(rows.iter().map(|r| r.params).sum::<u64>(), store.numel() as u64);
    assert!((rows.iter().map(|r| r.fraction).sum::<f64>() - 1.0).abs() < 1e-9);
    // 2 x MACs plus one per bias add for the two affine maps.
    let meta_flops = rows.iter().find(|r| r.component == "meta-net").unwrap().flops;
    assert_eq!(meta_flops, 2 * 64 * 4 + 4 + 2 * 4 * 64 + 64);
    let csv = footprint_csv(&rows, "h");
    assert!(csv.contains("prompt-generator,2500,"));
    assert!(csv.contains("86,016") && csv.contains("86,112"));

    let (double, _) = toy_store(32);
    let rows2 = count_footprint(&double, &stack.config, input).unwrap();
    assert_eq!(rows2.iter().find(|r| r.component == "context").unwrap().params, 2 * get("context"));

    let mut odd = store.clone();
    odd.insert("decoder.w", Tensor::zeros(&[2]));
    assert!(count_footprint(&odd, &stack.config, input).is_err());
}

#[test]
fn heatmap_normalisation() {
    assert_eq!(min_max(&[2.0; 6]), vec![0.0; 6]);
    let v = min_max(&[3.0, -1.0, 0.5, 7.0]);
    assert_eq!(v.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
    assert_eq!(v.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    assert_eq!(upsample_nearest(&[1.0, 2.0, 3.0, 4.0], 2, 2, 4, 4)[..4], [1.0, 1.0, 2.0, 2.0]);
    let (stack, _) = toy_stack();
    let enc = stack.init(1, 0.07).unwrap();
    let map = activation_map(&stack, &enc, &images(1)[0]).unwrap();
    assert_eq!(map.shape(), &[32, 32]);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi == 0.0 || (lo == 0.0 && hi == 1.0));
}

/// Share of single-motif images whose heatmap peak falls inside the motif.
fn peak_in_motif(stack: &EncoderStack, enc: &ParamStore<f32>, n: usize) -> f64 {
    let vocab = ObservationVocabulary::standard();
    let one = CorpusConfig { findings_per_image: vec![1.0], no_finding_prob: 0.0, ..CorpusConfig::default() };
    let (mut hit, mut total) = (0, 0);
    for i in 0..n {
        let s = generate_sample(&one, &vocab, Split::Pretrain, i);
        let Some((r0, c0, r1, c1)) = motif_bbox(&vocab, s.class_id, 32) else { continue };
        let m = activation_map(stack, enc, &s.image).unwrap();
        let peak = (0..m.numel()).fold(0, |b, j| if m.data()[j] > m.data()[b] { j } else { b });
        let (r, c) = (peak / 32, peak % 32);
        hit += usize::from((r0..=r1).contains(&r) && (c0..=c1).contains(&c));
        total += 1;
    }
    hit as f64 / total as f64
}

#[test]
fn trained_heatmaps_peak_on_the_motif() {
    let vocab = ObservationVocabulary::standard();
    let (stack, tok) = toy_stack();
    let samples = generate_split(&CorpusConfig::default(), &vocab, Split::Pretrain);
    let data = PretrainData::build(&samples, &tok, &vocab).unwrap();
    let cfg = PretrainConfig { epochs: 3, ..PretrainConfig::default() };
    let mut passes = 0;
    for seed in 1..=3 {
        let out = pretrain_run(&stack, &data, &cfg, seed).unwrap();
        let share = peak_in_motif(&stack, &out.params, 30);
        println!("seed {seed}: peak inside the motif for {share:.2} of images");
        passes += usize::from(share > 0.5);
    }
    assert!(passes >= 2);
}
