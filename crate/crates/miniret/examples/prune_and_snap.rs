//! Structured pruning with hard-concrete gates and Lagrangian target
//! constraints, followed by snapping to a physically smaller model and a
//! short continued pretraining run.

use miniret::encoder::{param_count, AttentionMode, EncoderConfig, Parameters, Pooling, TokenSequence};
use miniret::error::Result;
use miniret::pruning::{
    continued_pretrain, lm_loss, mask_deterministic, prune_step, snap_architecture, LagrangeState,
    MaskSet, PruneRates, PruneTarget,
};
use miniret::rng::rng_for;
use rand::Rng;

fn main() -> Result<()> {
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 4,
        intermediate_dim: 32,
        vocab_size: 64,
        max_positions: 16,
        rope_theta: 10_000.0,
        attention_mode: AttentionMode::Unidirectional, // LM loss needs causal attention
        pooling: Pooling::Mean,
    };
    let target = PruneTarget {
        num_heads: 2,
        hidden_dim: 8,
        num_layers: 2,
        intermediate_dim: 16,
    };
    let mut params = Parameters::init(&cfg, &mut rng_for(1, "init"));
    let mut masks = MaskSet::init(&cfg, 1.0, &mut rng_for(1, "masks"));
    let mut lagrange = LagrangeState::zeros(cfg.num_layers);
    let rates = PruneRates {
        lr_theta: 1e-3,
        lr_alpha: 0.05,
        eta_lambda: 0.03,
        eta_phi: 0.002,
    };

    let corpus: Vec<TokenSequence> = (0..8)
        .map(|i| {
            let mut r = rng_for(1, &format!("seq/{i}"));
            TokenSequence::unpadded((0..10).map(|_| r.gen_range(0..cfg.vocab_size)).collect())
        })
        .collect();

    let mut noise_rng = rng_for(1, "noise");
    for step in 0..300 {
        let mut batch_rng = rng_for(1, &format!("batch/{step}"));
        let batch: Vec<TokenSequence> = (0..2)
            .map(|_| corpus[batch_rng.gen_range(0..corpus.len())].clone())
            .collect();
        prune_step(
            &cfg, &mut params, &mut masks, &mut lagrange, &target, &batch, &rates, &mut noise_rng,
        )?;
        if (step + 1) % 100 == 0 {
            let sum = |t: &miniret::tensor::Tensor| -> f64 {
                mask_deterministic(t).data().iter().sum()
            };
            println!(
                "step {:3}: head gates {:.2}/{:.2}, int gates {:.2}/{:.2}, hidden {:.2}, layers {:.2}",
                step + 1,
                sum(&masks.head[0]),
                sum(&masks.head[1]),
                sum(&masks.int[0]),
                sum(&masks.int[1]),
                sum(&masks.hidden),
                sum(&masks.layer),
            );
        }
    }

    let (small_cfg, mut small_params) = snap_architecture(&cfg, &params, &masks, &target)?;
    println!(
        "snapped {} -> {} parameters ({}h/{}d/{}l/{}i)",
        param_count(&cfg),
        param_count(&small_cfg),
        small_cfg.num_heads,
        small_cfg.hidden_dim,
        small_cfg.num_layers,
        small_cfg.intermediate_dim,
    );

    let before = lm_loss(&small_cfg, &small_params, &corpus[0], None)?;
    continued_pretrain(&small_cfg, &mut small_params, &corpus, 50, 2, 1e-3, 1)?;
    let after = lm_loss(&small_cfg, &small_params, &corpus[0], None)?;
    println!("continued pretraining: lm loss {before:.4} -> {after:.4}");
    Ok(())
}
