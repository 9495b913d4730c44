//! End-to-end retriever training on a synthetic topical corpus:
//! generate data, train with the contrastive + matryoshka objective,
//! then evaluate nDCG@10 before and after.

use miniret::encoder::{AttentionMode, EncoderConfig, Parameters, Pooling};
use miniret::error::Result;
use miniret::evalrun::{run_eval, EvalSpec};
use miniret::objective::{fit, FitSpec, LossConfig};
use miniret::rng::rng_for;
use miniret::synthcorpus::{gen_synth_world, seed_training_pairs, SynthSpec};
use miniret::tokenizer::{build_vocab, WordTokenizer};

fn main() -> Result<()> {
    let world = gen_synth_world(&SynthSpec {
        topics: 20,
        docs_per_topic: 10,
        words_per_topic: 8,
        shared_words: 30,
        doc_len: 24,
        queries_per_topic: 2,
        seed: 7,
    })?;
    println!("corpus: {} docs, {} queries", world.docs.len(), world.queries.len());

    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 32,
        num_heads: 2,
        intermediate_dim: 64,
        vocab_size: 512,
        max_positions: 32,
        rope_theta: 10_000.0,
        attention_mode: AttentionMode::Bidirectional,
        pooling: Pooling::Mean,
    };
    let vocab = build_vocab(world.docs.iter().map(|d| d.text.as_str()), 448);
    let tok = WordTokenizer::new(&vocab, cfg.vocab_size - vocab.len());
    let mut params = Parameters::init(&cfg, &mut rng_for(7, "example/init"));

    let docs: Vec<(String, String)> = world
        .docs
        .iter()
        .map(|d| (d.id.clone(), d.text.clone()))
        .collect();
    let spec = EvalSpec {
        k: 10,
        target_dim: None,
        tag: "example".into(),
    };
    let (before, _, _) = run_eval(&cfg, &params, &tok, &docs, &world.queries, &world.qrels, &spec)?;
    println!("nDCG@10 before training: {:.4}", before.mean_ndcg);

    // cropped-span query/document pairs over every topic
    let pairs = seed_training_pairs(&world, 20, 7)?;
    let loss_cfg = LossConfig {
        temperature: 0.05,
        mrl_dims: vec![8, 32], // matryoshka: train the 8-dim prefix too
        mrl_weights: vec![],
        num_hard_negatives: 0,
    };
    let fit_spec = FitSpec {
        steps: 120,
        batch_size: 8,
        lr: 2e-3,
        seed: 7,
    };
    let history = fit(&cfg, &mut params, &tok, &pairs, &loss_cfg, &fit_spec)?;
    println!(
        "loss: first {:.4} -> last {:.4}",
        history.first().unwrap(),
        history.last().unwrap()
    );

    let (after, _, _) = run_eval(&cfg, &params, &tok, &docs, &world.queries, &world.qrels, &spec)?;
    println!("nDCG@10 after training:  {:.4}", after.mean_ndcg);
    let low = EvalSpec {
        k: 10,
        target_dim: Some(8),
        tag: "example".into(),
    };
    let (prefix, _, _) = run_eval(&cfg, &params, &tok, &docs, &world.queries, &world.qrels, &low)?;
    println!("nDCG@10 at 8-dim prefix: {:.4}", prefix.mean_ndcg);
    Ok(())
}
