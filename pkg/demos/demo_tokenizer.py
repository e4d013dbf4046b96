"""Train a small BPE vocabulary and watch the merges it learns.

Run: python3 demos/demo_tokenizer.py
"""

from mlmkit.tokenizer import WORD_END, decode, encode, train_bpe

CORPUS = [
    "wičháša kiŋ yá yeló",
    "wičháša kiŋ hí yeló",
    "wíŋyaŋ kiŋ wačhíŋ kštó",
    "wíŋyaŋ kiŋ yá kštó",
    "hokšíla waŋ ománi škhé",
    "hokšíla waŋ hí škhé",
]

tok = train_bpe(CORPUS, vocab_size=120)
print(f"vocab size {tok.vocab_size}, alphabet {len(tok.alphabet)} characters, "
      f"{len(tok.merges)} merges")

print("\nfirst merges (most frequent pairs first):")
for left, right in tok.merges[:12]:
    print(f"  {left!r} + {right!r} -> {(left + right)!r}")

text = "wičháša kiŋ wačhíŋ"
ids = encode(tok, text)
print(f"\nencode {text!r}:")
print("  ids:   ", ids)
print("  pieces:", [tok.id_to_token[i] for i in ids])
print("  (the", repr(WORD_END), "suffix marks a word boundary)")

print("roundtrip:", decode(tok, ids))

# Characters never seen during training fall back to UNK instead of failing.
ids = encode(tok, "wičháša qqq")
print("\nunknown word 'qqq' becomes:", [tok.id_to_token[i] for i in ids[-4:]])
