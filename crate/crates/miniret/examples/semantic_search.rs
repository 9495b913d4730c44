//! Encode a corpus, build an exact cosine index, search it, and score
//! the run with trec-style nDCG.

use miniret::encoder::{encode, AttentionMode, EncoderConfig, Parameters, Pooling, TokenSequence};
use miniret::error::Result;
use miniret::index::ExactIndex;
use miniret::metrics::{ndcg_at_k, Qrels};
use miniret::rng::rng_for;
use miniret::synthcorpus::{gen_synth_world, topic_oracle_embed, SynthSpec};
use miniret::tokenizer::{build_vocab, Tokenize, WordTokenizer};
use std::collections::BTreeMap;

fn main() -> Result<()> {
    let world = gen_synth_world(&SynthSpec {
        topics: 12,
        docs_per_topic: 8,
        words_per_topic: 10,
        shared_words: 25,
        doc_len: 30,
        queries_per_topic: 2,
        seed: 5,
    })?;

    // an untrained encoder still produces deterministic unit vectors
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        num_heads: 2,
        intermediate_dim: 32,
        vocab_size: 256,
        max_positions: 32,
        rope_theta: 10_000.0,
        attention_mode: AttentionMode::Bidirectional,
        pooling: Pooling::Mean,
    };
    let vocab = build_vocab(world.docs.iter().map(|d| d.text.as_str()), 224);
    let tok = WordTokenizer::new(&vocab, cfg.vocab_size - vocab.len());
    let params = Parameters::init(&cfg, &mut rng_for(5, "params"));

    let embed_neural = |text: &str| -> Result<Vec<f64>> {
        let (seq, _) = TokenSequence::unpadded(tok.tokenize(text)).truncated(cfg.max_positions);
        Ok(encode(&cfg, &params, &seq, None)?.data().to_vec())
    };

    for (name, embed) in [
        ("untrained encoder", Box::new(embed_neural) as Box<dyn Fn(&str) -> Result<Vec<f64>>>),
        (
            "topic oracle     ",
            Box::new(|t: &str| topic_oracle_embed(t, 12)),
        ),
    ] {
        let index = ExactIndex::build(
            world
                .docs
                .iter()
                .map(|d| Ok((d.id.clone(), embed(&d.text)?)))
                .collect::<Result<_>>()?,
        )?;
        let mut ranking: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (qid, qtext) in &world.queries {
            let hits = index.search(&embed(qtext)?, 10)?;
            ranking.insert(qid.clone(), hits.into_iter().map(|(id, _)| id).collect());
        }
        let out = ndcg_at_k(&ranking, &world.qrels, 10)?;
        println!("{name}: nDCG@10 = {:.4} over {} queries", out.mean, out.evaluated);
    }

    // qrels round-trip through the TSV format used by the CLI
    let tmp = std::env::temp_dir().join("semantic_search_qrels.tsv");
    world.qrels.write_tsv(&tmp)?;
    let back = Qrels::read_tsv(&tmp)?;
    println!(
        "qrels round-trip: {} queries preserved",
        back.by_query.len()
    );
    std::fs::remove_file(&tmp).ok();
    Ok(())
}
