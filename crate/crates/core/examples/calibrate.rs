//! Calibration sweep for the end-to-end adaptation effect: trains the
//! desk-scale model, then measures span-loss improvement, answer-NLL
//! movement, needle-mass movement, and accuracy across seeded instances.
//!
//! Run: cargo run --release -p qttt-core --example calibrate

use qttt_core::adapt::{run_qttt_with_cache, AdaptationConfig};
use qttt_core::diagnostics::attention_mass;
use qttt_core::harness::{generate_dataset, training_corpus, TaskSpec};
use qttt_core::model::{
    decode, prefill_and_cache, tokens_from_bytes, train_base_model, DecodeSession,
    ModelConfig, ModelParams, SamplerConfig, TrainConfig, EOS, VOCAB_SIZE,
};
use qttt_core::numeric::log_sum_exp;
use qttt_core::optim::{OptimKind, OptimizerConfig};
use qttt_core::tasks::{
    canonical_answer_text, render_task_tokens, score_answer, BugType, PromptStyle, TaskKind,
};

fn answer_nll(p: &ModelParams, cache: &qttt_core::model::KVCache, full: &[u32]) -> f64 {
    let mut session = DecodeSession::new(p, cache).unwrap();
    let mut logits = session
        .reforward(cache.len() - 1, full[cache.len() - 1], None)
        .unwrap();
    let mut total = 0.0;
    for i in cache.len()..full.len() {
        let lse = log_sum_exp(&logits).unwrap();
        total += lse - logits[full[i] as usize];
        logits = session.append(full[i], None).unwrap();
    }
    total
}

fn main() {
    let train_spec = TaskSpec {
        kind: TaskKind::Transactions,
        lengths: vec![4, 5, 6, 8],
        seeds: (1000..1180).collect(),
        // The retrieval-learnable anomaly only.
        bug_mix: vec![BugType::NegativeBal],
        n_accounts: 3,
        wide: true,
    };
    let corpus = training_corpus(&train_spec).unwrap();
    println!("corpus: {} docs", corpus.len());

    let config = ModelConfig {
        layers: 2,
        heads: 2,
        dim: 32,
        mlp_ratio: 2,
        vocab: VOCAB_SIZE,
        rope_enabled: true,
        max_context: 3072,
        tied_embeddings: false,
    };
    let train = TrainConfig {
        steps: 3000,
        window: 1100,
        seed: 7,
        optimizer: OptimizerConfig::adamw(3e-3),
    };
    let ckpt_path = std::env::temp_dir().join("qttt-calibration.ckpt");
    let params = if ckpt_path.exists() {
        println!("loading cached checkpoint {}", ckpt_path.display());
        qttt_core::model::checkpoint::load_checkpoint(&ckpt_path).unwrap()
    } else {
        let t0 = std::time::Instant::now();
        let (params, report) = train_base_model(&config, &corpus, &train).unwrap();
        println!(
            "trained in {:.1}s, loss {:.3} -> {:.3}",
            t0.elapsed().as_secs_f64(),
            report.first_loss(),
            report.final_loss()
        );
        qttt_core::model::checkpoint::save_checkpoint(&params, &ckpt_path).unwrap();
        params
    };

    // Sanity: does the base model answer short in-distribution instances?
    for len in [] as [usize; 0] {
        let spec = TaskSpec {
            kind: TaskKind::Transactions,
            lengths: vec![len],
            seeds: (0..20).collect(),
            bug_mix: vec![BugType::NegativeBal],
            n_accounts: 3,
            wide: true,
        };
        let tasks = generate_dataset(&spec).unwrap();
        let mut correct = 0;
        for task in &tasks {
            let prompt = tokens_from_bytes(&render_task_tokens(task, PromptStyle::Direct));
            let cache = prefill_and_cache(&params, &prompt).unwrap();
            let out = decode(&params, &cache, &prompt, 60, SamplerConfig::greedy()).unwrap();
            let text: String = out
                .iter()
                .take_while(|&&t| t != EOS)
                .filter(|&&t| t < 256)
                .map(|&t| t as u8 as char)
                .collect();
            if score_answer(task, &text).correct {
                correct += 1;
            }
        }
        println!("base accuracy at length {len}: {correct}/20");
    }

    for eval_len in [40usize] {
    println!("-- eval length {eval_len} --");
    let eval_spec = TaskSpec {
        kind: TaskKind::Transactions,
        lengths: vec![eval_len],
        seeds: (0..20).collect(),
        bug_mix: vec![BugType::NegativeBal],
        n_accounts: 3,
        wide: true,
    };
    let tasks = generate_dataset(&eval_spec).unwrap();

    for (optimizer, lr, wd, n_steps) in [
        (OptimKind::AdaptiveMoment, 1e-3, 0.01, 64),
        (OptimKind::AdaptiveMoment, 1e-3, 0.0, 64),
        (OptimKind::Sgd, 1e-1, 0.0, 64),
        (OptimKind::Sgd, 3e-2, 0.0, 64),
        (OptimKind::Sgd, 1e-2, 0.0, 64),
        (OptimKind::Sgd, 3e-2, 0.0, 32),
    ] {
        let mut loss_wins = 0;
        let mut mass_wins = 0;
        let mut ans_wins = 0;
        let mut acc_before = 0;
        let mut acc_after = 0;
        let mut details = Vec::new();
        let t1 = std::time::Instant::now();
        for task in &tasks {
            let prompt = tokens_from_bytes(&render_task_tokens(task, PromptStyle::Direct));
            let cache = prefill_and_cache(&params, &prompt).unwrap();
            let adapt = AdaptationConfig {
                n_steps,
                span_len: 64,
                lr,
                optimizer,
                weight_decay: wd,
                grad_clip: 1.0,
                seed: task.seed,
            };
            let (adapted, trace) =
                run_qttt_with_cache(&params, &cache, &prompt, &adapt).unwrap();
            let q = trace.steps.len() / 4;
            let first: f64 =
                trace.steps[..q].iter().map(|s| s.loss_before).sum::<f64>() / q as f64;
            let last: f64 = trace.steps[trace.steps.len() - q..]
                .iter()
                .map(|s| s.loss_before)
                .sum::<f64>()
                / q as f64;
            if last < first {
                loss_wins += 1;
            }

            let answer = canonical_answer_text(&task.answer);
            let mut full = prompt.clone();
            full.extend(answer.bytes().map(|b| b as u32));
            let steps: Vec<usize> = (prompt.len() - 1..full.len() - 1).collect();
            let (s, e) = task.needle_byte_span().unwrap();
            let targets: Vec<usize> = (s + 1..e + 1).collect();
            let before = attention_mass(&params, &cache, &full, &targets, &steps).unwrap();
            let after = attention_mass(&adapted, &cache, &full, &targets, &steps).unwrap();
            if after.mean >= before.mean {
                mass_wins += 1;
            }
            if answer_nll(&adapted, &cache, &full) < answer_nll(&params, &cache, &full) {
                ans_wins += 1;
            }
            let acc = |p: &ModelParams| {
                let out = decode(p, &cache, &prompt, 60, SamplerConfig::greedy()).unwrap();
                let text: String = out
                    .iter()
                    .take_while(|&&t| t != EOS)
                    .filter(|&&t| t < 256)
                    .map(|&t| t as u8 as char)
                    .collect();
                score_answer(task, &text).correct
            };
            if acc(&params) {
                acc_before += 1;
            }
            if acc(&adapted) {
                acc_after += 1;
            }
            details.push((last - first, after.mean - before.mean, before.mean));
        }
        let mean_dl: f64 = details.iter().map(|d| d.0).sum::<f64>() / details.len() as f64;
        let mean_dm: f64 = details.iter().map(|d| d.1).sum::<f64>() / details.len() as f64;
        let mean_base: f64 = details.iter().map(|d| d.2).sum::<f64>() / details.len() as f64;
        println!(
            "{optimizer:?} lr {lr:>8.0e} wd {wd} N {n_steps}: loss {loss_wins}/20, mass {mass_wins}/20, ans-nll {ans_wins}/20, acc {acc_before}->{acc_after}, d_loss {mean_dl:+.2}, d_mass {mean_dm:+.5} (base {mean_base:.4}), {:.0}s",
            t1.elapsed().as_secs_f64()
        );
        let dms: Vec<String> = details.iter().map(|d| format!("{:+.4}", d.1)).collect();
        println!("   d_mass: {}", dms.join(" "));
    }
    }
}
