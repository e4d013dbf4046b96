"""Overfit a tiny encoder on a toy corpus and look at the loss curves.

Run: python3 demos/demo_train_and_curves.py
Writes loss_curves.png next to this script when matplotlib is available.
"""

from pathlib import Path

import numpy as np

from mlmkit.corpus import Corpus, LanguageTag, Split
from mlmkit.model import ModelConfig, new_model
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
lines = SENTENCES * 6  # 36 lines; repetition makes memorization quick
corpus = Corpus(
    lines,
    [LanguageTag.LAKOTA] * len(lines),
    [Split.TRAIN] * 30 + [Split.VALID] * 6,
)

tok = train_bpe(corpus.lines_in_split(Split.TRAIN), vocab_size=200)
config = ModelConfig(
    num_layers=2, hidden_size=32, ffn_inner=128, num_heads=2, head_size=16,
    context_size=32, vocab_size=tok.vocab_size,
)
model = new_model(config, seed=0)
print(f"model parameters: {model.num_parameters}")

model, log = train(
    model, tok, corpus,
    TrainConfig(max_steps=120, batch_size=4, learning_rate=3e-3, seed=1),
)
print(f"loss: {log.train_losses[0]:.3f} (start) -> {log.train_losses[-1]:.3f} (end)")
print(f"eval loss per epoch: {[round(x, 3) for x in log.eval_losses[:8]]} ...")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(log.steps, log.train_losses)
    ax1.set(xlabel="step", ylabel="loss", title="training loss")
    ax2.plot(log.eval_epochs, log.eval_losses)
    ax2.set(xlabel="epoch", ylabel="loss", title="evaluation loss")
    fig.tight_layout()
    out = Path(__file__).with_name("loss_curves.png")
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")
except ImportError:
    # coarse text rendering instead
    lo, hi = min(log.train_losses), max(log.train_losses)
    for step in range(0, len(log.train_losses), 10):
        loss = log.train_losses[step]
        bar = "#" * int(1 + 40 * (loss - lo) / (hi - lo + 1e-9))
        print(f"step {step:4d} {loss:7.3f} {bar}")
