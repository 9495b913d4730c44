//! Data augmentation: chunk a corpus, mine training triplets with a
//! retrieval teacher (cropped spans, generated queries, listwise
//! reranking), then mix the sources with largest-remainder quotas.

use miniret::augment::{
    chunk_corpus, crop_query_random, mine_from_index, mined_to_triplets, mix_sources,
    rerank_refine, MixSpec, QueryKind,
};
use miniret::data::{Document, SourceTag, TrainingTriplet};
use miniret::error::Result;
use miniret::index::ExactIndex;
use miniret::llm::{generate_query, listwise_rerank, MockClient};
use miniret::needle::BagOfWordsEmbedder;
use miniret::rng::rng_for;
use miniret::synthcorpus::{gen_synth_world, SynthSpec};
use std::collections::BTreeMap;

fn main() -> Result<()> {
    let world = gen_synth_world(&SynthSpec {
        topics: 10,
        docs_per_topic: 10,
        words_per_topic: 10,
        shared_words: 20,
        doc_len: 48,
        queries_per_topic: 1,
        seed: 3,
    })?;
    let docs: Vec<Document> = world.docs.clone();
    let chunks = chunk_corpus(&docs, 24)?;
    println!("{} docs -> {} chunks of <= 24 tokens", docs.len(), chunks.len());

    // lexical teacher over the chunk corpus
    let teacher = BagOfWordsEmbedder::build(chunks.iter().map(|c| c.text.as_str()));
    let index = ExactIndex::build(
        chunks
            .iter()
            .map(|c| Ok((c.id.clone(), teacher.embed(&c.text)?)))
            .collect::<Result<_>>()?,
    )?;
    let texts: BTreeMap<String, String> = chunks
        .iter()
        .map(|c| (c.id.clone(), c.text.clone()))
        .collect();
    let client = MockClient { seed: 3 };

    // cropped-span mining: positives = top ranks, negatives = a band
    // near rank k
    let mut sent: Vec<TrainingTriplet> = Vec::new();
    for chunk in chunks.iter().take(20) {
        let mut rng = rng_for(3, &format!("sent/{}", chunk.id));
        let query = crop_query_random(&chunk.text, &mut rng);
        let ex = mine_from_index(&query, QueryKind::Cropped, &index, |t| teacher.embed(t), 20, 2, 4)?;
        sent.extend(mined_to_triplets(&ex, &texts, SourceTag::Sent)?);
    }

    // generated-query mining via the (mock) LLM client
    let mut qgen: Vec<TrainingTriplet> = Vec::new();
    for chunk in chunks.iter().skip(20).take(10) {
        let query = generate_query(&client, &chunk.text)?;
        let ex = mine_from_index(&query, QueryKind::Generated, &index, |t| teacher.embed(t), 20, 2, 4)?;
        qgen.extend(mined_to_triplets(&ex, &texts, SourceTag::Qgen)?);
    }

    // listwise rerank refinement of the retrieval candidates
    let mut rerank: Vec<TrainingTriplet> = Vec::new();
    for chunk in chunks.iter().skip(30).take(5) {
        let mut rng = rng_for(3, &format!("rerank/{}", chunk.id));
        let query = crop_query_random(&chunk.text, &mut rng);
        let hits = index.search(&teacher.embed(&query)?, 10)?;
        let candidates: Vec<(String, String)> = hits
            .iter()
            .map(|(id, _)| (id.clone(), texts[id].clone()))
            .collect();
        let cand_texts: Vec<String> = candidates.iter().map(|(_, t)| t.clone()).collect();
        let parsed = listwise_rerank(&client, &query, &cand_texts)?;
        let ex = rerank_refine(&query, QueryKind::Cropped, &candidates, &parsed.order, 4)?;
        rerank.extend(mined_to_triplets(&ex, &texts, SourceTag::Rerank)?);
    }
    println!(
        "mined: {} sent, {} qgen, {} rerank triplets",
        sent.len(),
        qgen.len(),
        rerank.len()
    );

    // deterministic quota mixing
    let mut shards = BTreeMap::new();
    shards.insert("sent".to_string(), sent);
    shards.insert("qgen".to_string(), qgen);
    shards.insert("rerank".to_string(), rerank);
    let ratios: BTreeMap<String, f64> = [("sent", 2.0), ("qgen", 1.0), ("rerank", 1.0)]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    let mixed = mix_sources(
        &shards,
        &MixSpec {
            ratios,
            total: 40,
            seed: 3,
        },
    )?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in &mixed {
        *counts.entry(format!("{:?}", t.source)).or_insert(0) += 1;
    }
    println!("mixed {} triplets: {:?}", mixed.len(), counts);
    println!("sample query: {:?}", mixed[0].query);
    Ok(())
}
