"""Transformer encoder with a masked-token prediction head.

The stack: token + learned position embeddings, N post-layer-norm blocks
of multi-head attention and a GELU feed-forward, then a transform +
layer-norm head whose output projection is tied to the token embedding.
Everything runs on the autodiff tensors, one sequence at a time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import tokenizer as tk
from .autodiff import Tensor
from .kvconfig import coerce

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale setting;
    ``desk_scale()`` is the small preset used throughout the tests."""

    num_layers: int = 12
    hidden_size: int = 768
    ffn_inner: int = 3072
    num_heads: int = 12
    head_size: int = 64
    context_size: int = 512
    vocab_size: int = 52_000
    dropout: float = 0.1
    attention_dropout: float = 0.1
    mask_probability: float = 0.15

    # Config-file key per field (flat kv files and checkpoint headers).
    _KEY_MAP = {
        "num_layers": "number_of_layers",
        "hidden_size": "hidden_size",
        "ffn_inner": "ffn_inner_hidden_size",
        "num_heads": "number_of_attention_heads",
        "head_size": "attention_head_size",
        "context_size": "context_size",
        "vocab_size": "vocab_size",
        "dropout": "dropout",
        "attention_dropout": "attention_dropout",
        "mask_probability": "masking_probability",
    }

    def __post_init__(self) -> None:
        if self.hidden_size != self.num_heads * self.head_size:
            raise ValueError(
                f"hidden_size {self.hidden_size} != num_heads {self.num_heads} "
                f"x head_size {self.head_size}"
            )
        if self.context_size < 2:
            raise ValueError("context_size must be at least 2")
        if self.vocab_size <= len(tk.SPECIAL_TOKENS):
            raise ValueError("vocab_size must exceed the special-token count")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.attention_dropout < 1.0:
            raise ValueError("dropout rates must be in [0, 1)")
        if not 0.0 < self.mask_probability < 1.0:
            raise ValueError("mask_probability must be in (0, 1)")
        if min(self.num_layers, self.ffn_inner) < 1:
            raise ValueError("num_layers and ffn_inner must be positive")

    @classmethod
    def desk_scale(cls, vocab_size: int = 2000) -> "ModelConfig":
        return cls(
            num_layers=2,
            hidden_size=64,
            ffn_inner=256,
            num_heads=2,
            head_size=32,
            context_size=64,
            vocab_size=vocab_size,
        )

    def to_pairs(self) -> dict[str, object]:
        return {self._KEY_MAP[f.name]: getattr(self, f.name) for f in fields(self)}


def _config_field_types() -> dict[str, type]:
    return {
        "num_layers": int,
        "hidden_size": int,
        "ffn_inner": int,
        "num_heads": int,
        "head_size": int,
        "context_size": int,
        "vocab_size": int,
        "dropout": float,
        "attention_dropout": float,
        "mask_probability": float,
    }


def config_from_pairs(pairs: dict[str, str], base: ModelConfig | None = None) -> ModelConfig:
    """Build a ModelConfig from flat key=value pairs, overriding ``base``."""
    base = base or ModelConfig()
    types = _config_field_types()
    kwargs = {name: getattr(base, name) for name in types}
    for name, kind in types.items():
        key = ModelConfig._KEY_MAP[name]
        if key in pairs:
            kwargs[name] = coerce(pairs[key], kind, key)
    return ModelConfig(**kwargs)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named weight tensor and its shape, in deterministic order."""
    d, f, v, c = config.hidden_size, config.ffn_inner, config.vocab_size, config.context_size
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (v, d),
        "position_embedding": (c, d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.bq"] = (d,)
        shapes[f"{p}.attn.wk"] = (d, d)
        shapes[f"{p}.attn.bk"] = (d,)
        shapes[f"{p}.attn.wv"] = (d, d)
        shapes[f"{p}.attn.bv"] = (d,)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.attn.bo"] = (d,)
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
    shapes["mlm.transform_w"] = (d, d)
    shapes["mlm.transform_b"] = (d,)
    shapes["mlm.ln.gamma"] = (d,)
    shapes["mlm.ln.beta"] = (d,)
    shapes["mlm.output_bias"] = (v,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter count (output projection tied to the embedding).

    V*d + C*d + N*(4*d^2 + 2*d*f + f + 9*d) + d^2 + 3*d + V
    """
    d, f, v, c, n = (
        config.hidden_size,
        config.ffn_inner,
        config.vocab_size,
        config.context_size,
        config.num_layers,
    )
    return v * d + c * d + n * (4 * d * d + 2 * d * f + f + 9 * d) + d * d + 3 * d + v


@dataclass
class LayerView:
    """Named handles on one encoder block's tensors."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class Model:
    """Config plus the named parameter tensors it implies."""

    config: ModelConfig
    params: dict[str, Tensor]

    @property
    def dtype(self):
        return self.params["token_embedding"].dtype

    @property
    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def layer(self, i: int) -> LayerView:
        p = self.params
        pre = f"layers.{i}"
        return LayerView(
            wq=p[f"{pre}.attn.wq"], bq=p[f"{pre}.attn.bq"],
            wk=p[f"{pre}.attn.wk"], bk=p[f"{pre}.attn.bk"],
            wv=p[f"{pre}.attn.wv"], bv=p[f"{pre}.attn.bv"],
            wo=p[f"{pre}.attn.wo"], bo=p[f"{pre}.attn.bo"],
            ln1_gamma=p[f"{pre}.ln1.gamma"], ln1_beta=p[f"{pre}.ln1.beta"],
            w1=p[f"{pre}.ffn.w1"], b1=p[f"{pre}.ffn.b1"],
            w2=p[f"{pre}.ffn.w2"], b2=p[f"{pre}.ffn.b2"],
            ln2_gamma=p[f"{pre}.ln2.gamma"], ln2_beta=p[f"{pre}.ln2.beta"],
        )

    def zero_grads(self) -> None:
        ad.zero_grads(self.params.values())


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std^2) redrawn until every sample lies within +/- 2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x.astype(dtype)


def new_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Initialize a model deterministically from (config, seed).

    Weight matrices are truncated Normal(0, 0.02^2); biases start at zero,
    layer-norm gains at one.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("gamma"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith("beta") or len(shape) == 1:
            data = np.zeros(shape, dtype=dtype)
        else:
            data = _truncated_normal(rng, shape, 0.02, dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    model = Model(config=config, params=params)
    logger.info("initialized model: %d parameters", model.num_parameters)
    return model


def _pad_bias(pad_mask: np.ndarray | None, length: int, dtype) -> Tensor | None:
    """Additive attention bias: -inf over padded key positions."""
    if pad_mask is None:
        return None
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != (length,):
        raise ValueError(f"pad_mask must have shape ({length},), got {pad_mask.shape}")
    if not pad_mask.any():
        return None
    bias = np.where(pad_mask, -np.inf, 0.0).astype(dtype)
    return Tensor(bias.reshape(1, length), dtype=dtype)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pad_mask: np.ndarray | None = None,
    attention_dropout: float = 0.0,
    mode: str = "eval",
    rng=None,
) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V with padded keys masked to -inf.

    Returns (context, weights); the weights are the pre-dropout attention
    matrix, each row a distribution over key positions.
    """
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    d_k = q.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    bias = _pad_bias(pad_mask, k.shape[0], q.dtype)
    if bias is not None:
        scores = ad.add(scores, bias)
    weights = ad.softmax_rows(scores)
    applied = weights
    if mode == "train" and attention_dropout > 0.0:
        applied = ad.dropout(weights, attention_dropout, mode, rng)
    return ad.matmul(applied, v), weights


def multi_head_attention(
    x: Tensor,
    layer: LayerView,
    num_heads: int,
    pad_mask: np.ndarray | None = None,
    attention_dropout: float = 0.0,
    mode: str = "eval",
    rng=None,
) -> Tensor:
    """Project into per-head subspaces, attend, concatenate, re-project."""
    d = x.shape[1]
    if d % num_heads:
        raise ValueError(f"hidden size {d} not divisible by {num_heads} heads")
    d_k = d // num_heads
    q = ad.add(ad.matmul(x, layer.wq), layer.bq)
    k = ad.add(ad.matmul(x, layer.wk), layer.bk)
    v = ad.add(ad.matmul(x, layer.wv), layer.bv)
    heads = []
    for i in range(num_heads):
        lo, hi = i * d_k, (i + 1) * d_k
        context, _ = scaled_dot_attention(
            ad.slice_cols(q, lo, hi),
            ad.slice_cols(k, lo, hi),
            ad.slice_cols(v, lo, hi),
            pad_mask=pad_mask,
            attention_dropout=attention_dropout,
            mode=mode,
            rng=rng,
        )
        heads.append(context)
    merged = heads[0] if num_heads == 1 else ad.concat_cols(heads)
    return ad.add(ad.matmul(merged, layer.wo), layer.bo)


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise GELU(x W1 + b1) W2 + b2."""
    return ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, w1), b1)), w2), b2)


def forward(
    model: Model,
    input_ids,
    pad_mask: np.ndarray | None = None,
    mode: str = "eval",
    rng=None,
) -> Tensor:
    """Run one sequence through the encoder; returns [T x V] logits.

    Eval mode is a pure function of (model, input_ids); train mode applies
    dropout driven by ``rng`` (an int seed or Generator).
    """
    cfg = model.config
    ids = np.asarray(input_ids, dtype=np.int64)
    t = ids.shape[0]
    if t == 0:
        raise ValueError("cannot run an empty sequence")
    if t > cfg.context_size:
        raise ValueError(f"sequence length {t} exceeds context size {cfg.context_size}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise IndexError("input id out of vocabulary range")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    p = model.params
    x = ad.add(
        ad.embedding_gather(p["token_embedding"], ids),
        ad.embedding_gather(p["position_embedding"], np.arange(t)),
    )
    for i in range(cfg.num_layers):
        layer = model.layer(i)
        attn = multi_head_attention(
            x, layer, cfg.num_heads,
            pad_mask=pad_mask,
            attention_dropout=cfg.attention_dropout,
            mode=mode,
            rng=rng,
        )
        x = ad.layer_norm(
            ad.add(x, ad.dropout(attn, cfg.dropout, mode, rng)),
            layer.ln1_gamma, layer.ln1_beta,
        )
        ffn = feed_forward(x, layer.w1, layer.b1, layer.w2, layer.b2)
        x = ad.layer_norm(
            ad.add(x, ad.dropout(ffn, cfg.dropout, mode, rng)),
            layer.ln2_gamma, layer.ln2_beta,
        )
    h = ad.layer_norm(
        ad.gelu(ad.add(ad.matmul(x, p["mlm.transform_w"]), p["mlm.transform_b"])),
        p["mlm.ln.gamma"], p["mlm.ln.beta"],
    )
    return ad.add(ad.matmul(h, ad.transpose(p["token_embedding"])), p["mlm.output_bias"])


def _softmax64(row: np.ndarray) -> np.ndarray:
    row = row.astype(np.float64)
    row -= row.max()
    e = np.exp(row)
    return e / e.sum()


def rank_tokens(probs: np.ndarray) -> np.ndarray:
    """Token ids ordered by descending probability, ties by ascending id."""
    return np.lexsort((np.arange(probs.shape[0]), -probs))


@dataclass
class MaskPrediction:
    """Top-k candidates for one masked slot."""

    position: int
    candidates: list[tuple[str, float, int]]  # (token, probability, rank)
    probabilities: np.ndarray = field(repr=False)  # full distribution
    perplexity: float = 0.0  # exp(-ln p) of the top candidate


@dataclass
class FillMaskResult:
    masks: list[MaskPrediction]
    filled_ids: list[int]
    filled_text: str
    token_perplexities: list[tuple[str, float]]
    sequence_perplexity: float


def sequence_perplexity(model: Model, ids, vocab_size: int | None = None) -> tuple[list[float], float]:
    """Per-position perplexities exp(-ln p_t) for a sequence, plus the
    sequence perplexity exp(mean negative log-likelihood).

    ``vocab_size`` restricts the distribution to the tokenizer's actual
    vocabulary when the model's embedding table has spare rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    logits = forward(model, ids, mode="eval").data
    if vocab_size is not None:
        logits = logits[:, :vocab_size]
    nlls = []
    for pos, token_id in enumerate(ids):
        probs = _softmax64(logits[pos])
        nlls.append(-math.log(max(float(probs[token_id]), 1e-300)))
    per_token = [math.exp(nll) for nll in nlls]
    return per_token, math.exp(sum(nlls) / len(nlls))


def predict_topk(model: Model, tok: tk.TokenizerModel, text: str, k: int) -> FillMaskResult:
    """Fill every literal ``<MASK>`` slot with ranked candidate tokens.

    Candidates are ranked over the tokenizer's vocabulary (the model's
    embedding table may carry spare rows). Also reports, for the
    top-1-filled sequence, the per-token perplexity at every position and
    the sequence perplexity.
    """
    if k < 1 or k > tok.vocab_size:
        raise ValueError(f"k must be in [1, {tok.vocab_size}], got {k}")
    if tok.vocab_size > model.config.vocab_size:
        raise ValueError(
            f"tokenizer vocab {tok.vocab_size} exceeds model vocab {model.config.vocab_size}"
        )
    ids = tk.encode_with_masks(tok, text)
    mask_positions = [i for i, t in enumerate(ids) if t == tk.MASK]
    if not mask_positions:
        raise ValueError("text contains no <MASK> slot")
    if len(ids) > model.config.context_size:
        raise ValueError(
            f"encoded length {len(ids)} exceeds context size {model.config.context_size}"
        )

    logits = forward(model, ids, mode="eval").data[:, : tok.vocab_size]
    masks: list[MaskPrediction] = []
    filled = list(ids)
    for pos in mask_positions:
        probs = _softmax64(logits[pos])
        order = rank_tokens(probs)
        candidates = [
            (tok.id_to_token[int(i)], float(probs[i]), rank)
            for rank, i in enumerate(order[:k], start=1)
        ]
        top_id = int(order[0])
        filled[pos] = top_id
        masks.append(
            MaskPrediction(
                position=pos,
                candidates=candidates,
                probabilities=probs,
                perplexity=math.exp(-math.log(max(float(probs[top_id]), 1e-300))),
            )
        )

    per_token, seq_ppl = sequence_perplexity(model, filled, vocab_size=tok.vocab_size)
    token_ppls = [(tok.id_to_token[i], ppl) for i, ppl in zip(filled, per_token)]
    return FillMaskResult(
        masks=masks,
        filled_ids=filled,
        filled_text=tk.decode(tok, filled),
        token_perplexities=token_ppls,
        sequence_perplexity=seq_ppl,
    )
