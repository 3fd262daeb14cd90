mod common;

use dsclf::model::{build_transformer, HeadMode, Transformer, TransformerConfig};
use dsclf::packing::PackedRow;
use dsclf::train::classification_loss;

/// Count written out tensor by tensor: embeddings, per layer two norm gains,
/// q/k/v/o projections and the three SwiGLU matrices, final norm, untied head.
fn expected_params(d: usize, layers: usize, vocab: usize, out: usize) -> usize {
    let ffn = {
        let raw = d * 8 / 3;
        raw.div_ceil(256) * 256
    };
    let attn = 4 * d * d;
    let mlp = 2 * d * ffn + ffn * d;
    let norms = 2 * d;
    vocab * d + layers * (attn + mlp + norms) + d + d * out
}

#[test]
fn presets_are_near_their_names() {
    for (name, nominal) in [("25M", 25e6), ("87M", 87e6), ("160M", 160e6), ("410M", 410e6)] {
        let c = TransformerConfig::preset(name).unwrap();
        assert_eq!(c.vocab_size, 50_432);
        assert_eq!(c.context_length, 2048);
        let n = expected_params(c.hidden_dim, c.n_layers, c.vocab_size, c.vocab_size);
        assert_eq!(c.param_count(HeadMode::LmHead), n, "{name}");
        let dev = (n as f64 - nominal).abs() / nominal;
        assert!(dev < 0.10, "{name}: {n} parameters, {:.1}% off", 100.0 * dev);
    }
}

#[test]
fn built_models_match_the_analytic_count() {
    for (d, layers, vocab) in [(64, 2, 300), (128, 4, 1000)] {
        let cfg = TransformerConfig {
            hidden_dim: d,
            n_layers: layers,
            vocab_size: vocab,
            ffn_multiple_of: 256,
            ..TransformerConfig::preset("tiny").unwrap()
        };
        let lm: Transformer = build_transformer(&cfg, HeadMode::LmHead, 0).unwrap();
        assert_eq!(lm.n_params(), expected_params(d, layers, vocab, vocab));
        let clf: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 0).unwrap();
        assert_eq!(clf.n_params(), expected_params(d, layers, vocab, 3));
    }
}

#[test]
fn untrained_loss_is_log_k() {
    let cfg = TransformerConfig {
        hidden_dim: 64,
        n_layers: 2,
        context_length: 64,
        vocab_size: 500,
        ffn_multiple_of: 16,
        ..TransformerConfig::preset("tiny").unwrap()
    };
    for k in [2usize, 3, 5] {
        let m: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: k }, 4).unwrap();
        let rows: Vec<PackedRow> = (0..24)
            .map(|r| PackedRow {
                tokens: (0..65).map(|i| ((r * 97 + i * 13) % 500) as u32).collect(),
                label: (r % k) as u16,
            })
            .collect();
        let loss = classification_loss(&m, &rows).unwrap();
        let target = (k as f64).ln();
        assert!((loss - target).abs() / target < 0.05, "k={k}: {loss} vs {target}");
    }
}
