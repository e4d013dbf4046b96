"""Score a trained model on held-out text and query it with <MASK> slots.

Run: python3 demos/demo_evaluate_and_fill.py
"""

from mlmkit.corpus import Corpus, LanguageTag, Split
from mlmkit.metrics import evaluate_model, render_report
from mlmkit.model import ModelConfig, new_model, predict_topk
from mlmkit.tokenizer import train_bpe
from mlmkit.training import TrainConfig, train

SENTENCES = [
    "wičháša kiŋ yá yeló",
    "wíŋyaŋ kiŋ hí kštó",
    "hokšíla kiŋ wačhíŋ škhé",
    "oyáte kiŋ ománi héčha",
    "šúŋka kiŋ kte šni",
    "makȟá kiŋ wašté yeló",
]
lines = SENTENCES * 8
corpus = Corpus(
    lines,
    [LanguageTag.LAKOTA] * len(lines),
    [Split.TRAIN] * 36 + [Split.VALID] * 6 + [Split.TEST] * 6,
)

tok = train_bpe(corpus.lines_in_split(Split.TRAIN), vocab_size=200)
config = ModelConfig(
    num_layers=2, hidden_size=32, ffn_inner=128, num_heads=2, head_size=16,
    context_size=32, vocab_size=tok.vocab_size,
)

trained = new_model(config, seed=0)
trained, _ = train(
    trained, tok, corpus,
    TrainConfig(max_steps=400, batch_size=4, learning_rate=3e-3, seed=1),
)
untrained = new_model(config, seed=0)

# The comparison table: trained vs untrained on the same held-out split.
reports = {}
for name, model in (("trained", trained), ("untrained", untrained)):
    reports[name], _ = evaluate_model(model, tok, corpus.lines_in_split(Split.TEST), k=10, seed=9)
print(render_report(reports))

# Fill-mask: ranked candidates plus per-token perplexities.
result = predict_topk(trained, tok, "wičháša kiŋ <MASK> yeló", k=5)
for mask in result.masks:
    print(f"candidates for the masked slot at position {mask.position}:")
    for token, prob, rank in mask.candidates:
        print(f"  {rank}. {token:12} p={prob:.4f}")
    print(f"  top-1 perplexity: {mask.perplexity:.3f}")
print(f"\nfilled: {result.filled_text}")
print("per-token perplexity:",
      " ".join(f"{token}({ppl:.2f})" for token, ppl in result.token_perplexities))
print(f"sequence perplexity: {result.sequence_perplexity:.3f}")
