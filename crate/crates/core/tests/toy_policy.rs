use std::collections::BTreeMap;

use gplan_core::curriculum::{Section, SectionMask};
use gplan_core::plan::ToolLibrary;
use gplan_core::policy::{
    compile_record, pair_vocab, train_picd, train_scdpo, CompiledRecord, Order, PairTokens,
    ParamKey, PicdOptions, RowKey, TabularPolicy, Vocab,
};
use gplan_core::scaffold::LatentVocab;
use gplan_core::scdpo::ScdpoConfig;
use gplan_core::synth::{build_dataset, default_templates, SynthConfig};

fn ids(p: &TabularPolicy, toks: &[&str]) -> Vec<u32> {
    toks.iter().map(|t| p.vocab().id(t).unwrap()).collect()
}

/// Conditional distribution straight from the raw table entries.
fn oracle_probs(p: &TabularPolicy, prev2: Option<u32>, prev: u32, cond: u32) -> Vec<f64> {
    let v = p.vocab().len() as u32;
    let logits: Vec<f64> = (0..v)
        .map(|y| {
            let mut l = p.get(ParamKey {
                row: RowKey::Bigram(prev),
                col: y,
            });
            let pair = match p.order() {
                Order::Bigram => None,
                Order::Trigram => prev2.map(|a| (a, prev)),
                Order::PromptConditioned => Some((cond, prev)),
            };
            if let Some((a, b)) = pair {
                l += p.get(ParamKey {
                    row: RowKey::Pair(a, b),
                    col: y,
                });
            }
            l
        })
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

fn oracle_seq_prob(p: &TabularPolicy, prompt: &[u32], seq: &[u32]) -> f64 {
    let bos = p.vocab().id("<BOS>").unwrap();
    let mut full = vec![bos];
    full.extend_from_slice(prompt);
    let cond = *full.last().unwrap();
    let mut prob = 1.0;
    for &y in seq {
        let k = full.len();
        let prev2 = (k >= 2).then(|| full[k - 2]);
        prob *= oracle_probs(p, prev2, full[k - 1], cond)[y as usize];
        full.push(y);
    }
    prob
}

#[test]
fn logprob_matches_exhaustive_chain_enumeration() {
    let vocab = Vocab::new(["a", "b", "c", "d"]);
    for order in [Order::Bigram, Order::Trigram, Order::PromptConditioned] {
        for seed in 0..3 {
            let p = TabularPolicy::random(vocab.clone(), order, 2.0, seed);
            let v = p.vocab().len() as u32;
            let prompt = ids(&p, &["c", "a"]);
            for len in 1..=4u32 {
                let mut total = 0.0;
                for code in 0..v.pow(len) {
                    let seq: Vec<u32> = (0..len).map(|i| code / v.pow(i) % v).collect();
                    let prob = oracle_seq_prob(&p, &prompt, &seq);
                    total += prob;
                    let toks: Vec<&str> = seq.iter().map(|&t| p.vocab().token(t)).collect();
                    let lp = p.logprob(&["c", "a"], &toks).unwrap();
                    assert!((lp - prob.ln()).abs() < 1e-12, "{order:?} {toks:?}");
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn empty_prompt_conditions_on_bos() {
    let p = TabularPolicy::random(Vocab::new(["a", "b"]), Order::Bigram, 1.0, 3);
    let empty: [&str; 0] = [];
    let lp = p.logprob(&empty, &["a"]).unwrap();
    assert!((lp - p.logprob(&["<BOS>"], &["a"]).unwrap()).abs() < 1e-15);
}

/// Cyclic sequence over `k` symbols containing every ordered pair once.
fn de_bruijn_pairs(k: usize) -> Vec<usize> {
    let mut seen = vec![vec![false; k]; k];
    let mut seq = vec![0];
    let mut cur = 0;
    while seq.len() <= k * k {
        let next = (0..k)
            .rev()
            .find(|&y| !seen[cur][y])
            .expect("Eulerian path exists");
        seen[cur][next] = true;
        seq.push(next);
        cur = next;
    }
    seq
}

/// Weighted entropy of each row's empirical next-token distribution.
fn bigram_infimum(prompt_last: &str, seq: &[String], weights: &[f64]) -> f64 {
    let mut rows: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    let mut prev = prompt_last;
    for (y, w) in seq.iter().zip(weights) {
        *rows.entry(prev).or_default().entry(y.as_str()).or_default() += w;
        prev = y;
    }
    rows.values()
        .map(|row| {
            let total: f64 = row.values().sum();
            row.values().map(|w| -w * (w / total).ln()).sum::<f64>()
        })
        .sum()
}

#[test]
fn repeated_ce_steps_reach_the_infimum() {
    let vocab = Vocab::new(["a", "b", "c"]);
    let names: Vec<String> = vocab.tokens().to_vec();
    let cycle: Vec<String> = de_bruijn_pairs(names.len())
        .into_iter()
        .map(|i| names[i].clone())
        .collect();
    let prompt = vec![cycle[0].clone()];
    let rest = &cycle[1..];
    let split = 15;
    let record = CompiledRecord {
        id: "cycle".into(),
        prompt: prompt.clone(),
        prefix_tokens: rest[..split].to_vec(),
        json_target: rest[split..].to_vec(),
        stage_b: 0,
        blocks: 0,
        section_mask: SectionMask(
            std::iter::once(Section::Prompt)
                .chain(std::iter::repeat_n(Section::Cot, split))
                .chain(std::iter::repeat_n(Section::Json, rest.len() - split))
                .collect(),
        ),
    };
    let weights: Vec<f64> = (0..rest.len())
        .map(|i| {
            if i < split {
                0.5 / split as f64
            } else {
                0.5 / (rest.len() - split) as f64
            }
        })
        .collect();
    let infimum = bigram_infimum(&prompt[0], rest, &weights);

    let mut p = TabularPolicy::random(vocab, Order::Bigram, 1.0, 5);
    let mut last = f64::INFINITY;
    let mut steps = 0;
    loop {
        let loss = p.ce_step(&record, 2.0).unwrap().total;
        assert!(loss >= infimum - 1e-12);
        if loss - infimum < 1e-8 {
            break;
        }
        assert!(
            loss < last,
            "loss rose at step {steps}: {loss} after {last}"
        );
        last = loss;
        steps += 1;
        assert!(steps < 200_000, "no convergence; gap {}", loss - infimum);
    }
}

#[test]
fn ce_gradient_matches_finite_differences_on_five_tokens() {
    let mask = |n_cot: usize, n_json: usize| {
        SectionMask(
            std::iter::once(Section::Prompt)
                .chain(std::iter::repeat_n(Section::Cot, n_cot))
                .chain(std::iter::repeat_n(Section::Json, n_json))
                .collect(),
        )
    };
    let record = CompiledRecord {
        id: "fd".into(),
        prompt: vec!["b".into()],
        prefix_tokens: vec!["a".into(), "c".into(), "a".into()],
        json_target: vec!["b".into(), "<EOS>".into()],
        stage_b: 0,
        blocks: 0,
        section_mask: mask(3, 2),
    };
    for order in [Order::Bigram, Order::Trigram, Order::PromptConditioned] {
        let p = TabularPolicy::random(Vocab::new(["a", "b", "c"]), order, 1.5, 21);
        assert_eq!(p.vocab().len(), 5);
        let (_, grad) = p.ce_loss_grad(&record).unwrap();
        let h = 1e-6;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for key in p.param_keys() {
            let mut plus = p.clone();
            plus.set(key, p.get(key) + h);
            let mut minus = p.clone();
            minus.set(key, p.get(key) - h);
            let numeric = (plus.ce_loss(&record).unwrap().total
                - minus.ce_loss(&record).unwrap().total)
                / (2.0 * h);
            diff += (grad.get(key) - numeric).powi(2);
            norm += numeric.powi(2);
        }
        let rel = diff.sqrt() / norm.sqrt();
        assert!(rel < 1e-6, "{order:?}: relative error {rel}");
    }
}

fn small_dataset(n: usize, seed: u64) -> gplan_core::synth::Dataset {
    build_dataset(
        &SynthConfig {
            n,
            seed,
            corrupt: 0.0,
        },
        &default_templates(),
        &ToolLibrary::default_library(),
    )
    .unwrap()
}

#[test]
fn saturated_policy_reproduces_its_record() {
    let d = small_dataset(20, 4);
    let latent = LatentVocab::default();
    let rec = compile_record(&d.train[0], usize::MAX, &latent).unwrap();
    let mut p = TabularPolicy::zeros(Vocab::new(rec.full_tokens()), Order::PromptConditioned);
    for _ in 0..300 {
        p.ce_step(&rec, 5.0).unwrap();
    }
    let out = p.greedy_decode(&rec.prompt, 200).unwrap();
    assert!(!out.truncated);
    assert_eq!(out.tokens, rec.target_tokens());
}

#[test]
fn curriculum_training_is_bit_reproducible() {
    let d = small_dataset(60, 5);
    let lib = ToolLibrary::default_library();
    let opts = PicdOptions {
        seed: 3,
        ..PicdOptions::default()
    };
    let (a, ra) = train_picd(&d.train, &d.test, &lib, &opts).unwrap();
    let (b, rb) = train_picd(&d.train, &d.test, &lib, &opts).unwrap();
    let dump = |p: &TabularPolicy| serde_json::to_string(&p.to_checkpoint("h", 0)).unwrap();
    assert_eq!(dump(&a), dump(&b));
    assert_eq!(ra, rb);
    let (c, _) = train_picd(&d.train, &d.test, &lib, &PicdOptions { seed: 4, ..opts }).unwrap();
    assert_ne!(dump(&a), dump(&c));
}

#[test]
fn curriculum_targets_follow_the_stage() {
    let d = small_dataset(60, 6);
    let lib = ToolLibrary::default_library();
    let (_, report) = train_picd(&d.train, &d.test, &lib, &PicdOptions::default()).unwrap();
    assert_eq!(report.epochs[0].fully_latent_targets, 0);
    assert_eq!(report.epochs[0].g, 0);
    let last = report.epochs.last().unwrap();
    assert_eq!(last.fully_latent_targets, d.train.len());
    assert_eq!(report.t_star, Some(10 * d.train.len()));
    assert_eq!(report.epochs[9].lr_last, 5.0);
    assert!(report.epochs[12].lr_last < report.epochs[10].lr_first);
}

#[test]
fn zero_steps_leave_every_pair_at_the_initial_loss() {
    let d = small_dataset(100, 7);
    let init = TabularPolicy::zeros(pair_vocab(&d.pairs), Order::PromptConditioned);
    let cfg = ScdpoConfig {
        epochs: 0,
        ..ScdpoConfig::default()
    };
    let (after, report) = train_scdpo(&init, &d.pairs, &cfg, 0.1, 0).unwrap();
    assert_eq!(after, init);
    assert_eq!(report.steps, 0);
    let expected = std::f64::consts::LN_2 + 10.0 * 0.01;
    assert!((report.before.mean_total_loss - expected).abs() < 1e-12);
    assert_eq!(report.before.mean_gap, 0.0);
}

#[test]
fn heavy_anchor_keeps_chosen_at_reference() {
    let d = small_dataset(300, 8);
    let init = TabularPolicy::zeros(pair_vocab(&d.pairs), Order::PromptConditioned);
    let cfg = ScdpoConfig {
        lambda_a: 50.0,
        ..ScdpoConfig::default()
    };
    let (after, _) = train_scdpo(&init, &d.pairs, &cfg, 0.05, 1).unwrap();
    let worst = d
        .pairs
        .iter()
        .map(|p| {
            let t = PairTokens::from_record(p);
            after.logprob(&t.prompt, &t.chosen).unwrap()
                - init.logprob(&t.prompt, &t.chosen).unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    assert!(worst >= -1e-3, "chosen log-prob fell by {worst}");
}

#[test]
fn alignment_is_seed_reproducible() {
    let d = small_dataset(100, 9);
    let init = TabularPolicy::zeros(pair_vocab(&d.pairs), Order::PromptConditioned);
    let cfg = ScdpoConfig::default();
    let (a, ra) = train_scdpo(&init, &d.pairs, &cfg, 0.1, 2).unwrap();
    let (b, rb) = train_scdpo(&init, &d.pairs, &cfg, 0.1, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}
