"""Masked-batch construction, the MLM objective, Adam, and checkpoints.

The loss is the mean negative log-likelihood over every masked position
in the batch. Masking replaces each selected position with MASK outright
(the 80/10/10 BERT recipe is available behind ``mask_strategy="bert"``).
All randomness flows through integer seeds derived from one run seed, so
identical (inputs, seed) reruns are bit-identical.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tokenizer as tk
from .autodiff import Tensor
from .corpus import Corpus, Split
from .kvconfig import coerce, format_kv, parse_kv_text
from .model import Model, config_from_pairs, forward, parameter_shapes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LKMB"
CHECKPOINT_VERSION = 1

SPECIAL_IDS = frozenset((tk.PAD, tk.UNK, tk.BOS, tk.EOS, tk.MASK))


class TrainingDiverged(RuntimeError):
    """Loss or gradients went NaN; the step was aborted."""


class CheckpointFormatError(ValueError):
    """Bad magic/version, truncated data, or config/tensor inconsistency."""


def derive_seed(seed: int, tag: str) -> int:
    """Stable named sub-seed so each pipeline stage is independently reproducible."""
    digest = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class MaskedBatch:
    """Masked inputs plus the original ids at the masked positions."""

    input_ids: np.ndarray  # [B x T] int64, MASK written at labeled positions
    labels: list[list[tuple[int, int]]]  # per sequence: (position, original id)
    pad_mask: np.ndarray  # [B x T] bool, True marks padding

    @property
    def num_labels(self) -> int:
        return sum(len(seq) for seq in self.labels)


def encode_stream(tok: tk.TokenizerModel, lines: list[str]) -> list[int]:
    """Encode lines and join them with EOS separators into one id stream."""
    stream: list[int] = []
    for i, line in enumerate(lines):
        if i:
            stream.append(tk.EOS)
        stream.extend(tk.encode(tok, line))
    return stream


def pack_blocks(token_ids, context_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Chunk an id stream into fixed-length blocks, PAD-filling the last.

    Returns (blocks [n x context_size], pad_mask same shape, True = PAD).
    """
    if context_size < 2:
        raise ValueError("context_size must be at least 2")
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot pack an empty token stream")
    n_blocks = -(-ids.size // context_size)
    padded = np.full(n_blocks * context_size, tk.PAD, dtype=np.int64)
    padded[: ids.size] = ids
    blocks = padded.reshape(n_blocks, context_size)
    pad_mask = np.zeros_like(blocks, dtype=bool)
    pad_mask.reshape(-1)[ids.size :] = True
    return blocks, pad_mask


def mask_batch(
    blocks: np.ndarray,
    mask_probability: float,
    seed: int,
    pad_mask: np.ndarray | None = None,
    strategy: str = "pure",
    vocab_size: int | None = None,
) -> MaskedBatch:
    """Select non-special positions independently with ``mask_probability``.

    Every selected position is recorded as a label; under the default
    "pure" strategy it is replaced by MASK, under "bert" by MASK 80% of
    the time, a random token 10%, and left unchanged 10%. A sequence with
    zero selections gets one uniformly chosen eligible position, so every
    sequence carries at least one label.
    """
    if not 0.0 < mask_probability < 1.0:
        raise ValueError(f"mask_probability must be in (0, 1), got {mask_probability}")
    if strategy not in ("pure", "bert"):
        raise ValueError(f"unknown mask strategy {strategy!r}")
    if strategy == "bert" and vocab_size is None:
        raise ValueError("bert strategy needs vocab_size for random replacements")

    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.ndim != 2:
        raise ValueError("blocks must be a [B x T] array")
    if pad_mask is None:
        pad_mask = np.zeros_like(blocks, dtype=bool)

    rng = np.random.default_rng(seed)
    eligible = ~np.isin(blocks, list(SPECIAL_IDS))
    input_ids = blocks.copy()
    labels: list[list[tuple[int, int]]] = []
    for b in range(blocks.shape[0]):
        row_eligible = np.flatnonzero(eligible[b])
        if row_eligible.size == 0:
            raise ValueError(f"sequence {b} has no maskable positions")
        selected = row_eligible[rng.random(row_eligible.size) < mask_probability]
        if selected.size == 0:
            selected = np.array([rng.choice(row_eligible)])
        row_labels = [(int(pos), int(blocks[b, pos])) for pos in selected]
        labels.append(row_labels)
        if strategy == "pure":
            input_ids[b, selected] = tk.MASK
        else:
            roll = rng.random(selected.size)
            for pos, r in zip(selected, roll):
                if r < 0.8:
                    input_ids[b, pos] = tk.MASK
                elif r < 0.9:
                    input_ids[b, pos] = rng.integers(len(SPECIAL_IDS), vocab_size)
    return MaskedBatch(input_ids=input_ids, labels=labels, pad_mask=pad_mask.copy())


def mlm_loss(logits_per_sequence: list[Tensor], batch: MaskedBatch) -> Tensor:
    """Masked-position loss averaged over all labels in the batch.

    Combines per-sequence cross entropies weighted by their label counts,
    which is exactly the mean over every masked word.
    """
    total = batch.num_labels
    if total == 0:
        raise ValueError("batch has no labels")
    if len(logits_per_sequence) != len(batch.labels):
        raise ValueError("logits/label sequence counts differ")
    loss: Tensor | None = None
    for logits, labels in zip(logits_per_sequence, batch.labels):
        if not labels:
            continue
        piece = ad.scale(ad.cross_entropy_masked(logits, labels), len(labels) / total)
        loss = piece if loss is None else ad.add(loss, piece)
    return loss


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float | None = None) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay applies only to matrices (ndim >= 2), never to biases or
    layer-norm parameters. A NaN gradient aborts the step.
    """
    for name, p in params.items():
        if p.grad is not None and np.isnan(p.grad).any():
            raise TrainingDiverged(f"NaN gradient in {name}; aborting step")
    step_lr = state.lr if lr is None else lr
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if state.weight_decay and p.data.ndim >= 2:
            p.data -= p.data.dtype.type(step_lr * state.weight_decay) * p.data
        p.data -= (p.data.dtype.type(step_lr) * m_hat / (np.sqrt(v_hat) + p.data.dtype.type(state.eps))).astype(p.data.dtype, copy=False)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


@dataclass
class TrainConfig:
    """Training hyperparameters; keys mirror the flat config-file names."""

    batch_size: int = 8
    max_steps: int = 500
    learning_rate: float = 1e-4
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    mask_strategy: str = "pure"
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    seed: int = 0
    torch_dtype: str = "float32"  # accepted for config-file parity; float32 only

    _TYPES = {
        "batch_size": int,
        "max_steps": int,
        "learning_rate": float,
        "warmup_frac": float,
        "beta1": float,
        "beta2": float,
        "epsilon": float,
        "weight_decay": float,
        "grad_clip": float,
        "mask_strategy": str,
        "checkpoint_interval": int,
        "seed": int,
        "torch_dtype": str,
    }

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.torch_dtype != "float32":
            raise ValueError("only float32 training is supported")
        if self.mask_strategy not in ("pure", "bert"):
            raise ValueError(f"unknown mask_strategy {self.mask_strategy!r}")

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for name, kind in cls._TYPES.items():
            if name in pairs:
                kwargs[name] = coerce(pairs[name], kind, name)
        return cls(**kwargs)

    def lr_at(self, step: int) -> float:
        """Linear warmup over the first warmup_frac of steps, then constant."""
        warmup = int(self.warmup_frac * self.max_steps)
        if warmup > 0 and step < warmup:
            return self.learning_rate * (step + 1) / warmup
        return self.learning_rate


@dataclass
class TrainLog:
    """Step-indexed training losses and epoch-indexed evaluation losses."""

    steps: list[int] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    eval_epochs: list[int] = field(default_factory=list)
    eval_losses: list[float] = field(default_factory=list)

    def record_step(self, step: int, loss: float, seconds: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("steps must be strictly increasing")
        self.steps.append(step)
        self.train_losses.append(loss)
        self.step_seconds.append(seconds)

    def write_csv(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        train_path = out_dir / "train_loss.csv"
        eval_path = out_dir / "eval_loss.csv"
        train_path.write_text(
            "step,loss\n"
            + "".join(f"{s},{l:.6f}\n" for s, l in zip(self.steps, self.train_losses)),
            encoding="utf-8",
        )
        eval_path.write_text(
            "epoch,eval_loss\n"
            + "".join(f"{e},{l:.6f}\n" for e, l in zip(self.eval_epochs, self.eval_losses)),
            encoding="utf-8",
        )
        return train_path, eval_path


def _batch_loss(
    model: Model, batch: MaskedBatch, mode: str, rng=None
) -> Tensor:
    logits = [
        forward(model, batch.input_ids[b], pad_mask=batch.pad_mask[b], mode=mode, rng=rng)
        for b in range(batch.input_ids.shape[0])
    ]
    return mlm_loss(logits, batch)


def evaluate_loss(model: Model, blocks: np.ndarray, pad_mask: np.ndarray, seed: int, cfg: TrainConfig) -> float:
    """Masked loss over fixed-seed masked blocks, dropout off.

    Sequences are scored one at a time (graphs freed immediately) and the
    per-label sums recombined, which equals the all-label mean.
    """
    batch = mask_batch(
        blocks, model.config.mask_probability, seed, pad_mask,
        strategy=cfg.mask_strategy, vocab_size=model.config.vocab_size,
    )
    total_nll = 0.0
    total_labels = 0
    for b in range(blocks.shape[0]):
        logits = forward(model, batch.input_ids[b], pad_mask=batch.pad_mask[b], mode="eval")
        labels = batch.labels[b]
        total_nll += float(ad.cross_entropy_masked(logits, labels).data) * len(labels)
        total_labels += len(labels)
    return total_nll / total_labels


def train(
    model: Model,
    tok: tk.TokenizerModel,
    corpus: Corpus,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[Model, TrainLog]:
    """Optimization loop: pack, re-mask per epoch, forward, backward, Adam.

    Logs the training loss every step and the valid-split loss after each
    completed epoch (fixed eval-mask seed). Deterministic given seeds.
    """
    train_lines = corpus.lines_in_split(Split.TRAIN)
    valid_lines = corpus.lines_in_split(Split.VALID)
    if not train_lines:
        raise ValueError("corpus has no train split")
    if not valid_lines:
        raise ValueError("corpus has no valid split")

    log = TrainLog()
    if cfg.max_steps == 0:
        return model, log

    context = model.config.context_size
    blocks, pads = pack_blocks(encode_stream(tok, train_lines), context)
    eval_blocks, eval_pads = pack_blocks(encode_stream(tok, valid_lines), context)
    eval_seed = derive_seed(cfg.seed, "eval-mask")

    adam = AdamState.for_params(
        model.params,
        lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
        eps=cfg.epsilon, weight_decay=cfg.weight_decay,
    )
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None

    step = 0
    epoch = 0
    while step < cfg.max_steps:
        epoch += 1
        masked = mask_batch(
            blocks, model.config.mask_probability,
            derive_seed(cfg.seed, f"mask-epoch-{epoch}"), pads,
            strategy=cfg.mask_strategy, vocab_size=model.config.vocab_size,
        )
        order = np.random.default_rng(derive_seed(cfg.seed, f"shuffle-epoch-{epoch}")).permutation(
            blocks.shape[0]
        )
        for start in range(0, len(order), cfg.batch_size):
            if step >= cfg.max_steps:
                break
            pick = order[start : start + cfg.batch_size]
            batch = MaskedBatch(
                input_ids=masked.input_ids[pick],
                labels=[masked.labels[i] for i in pick],
                pad_mask=masked.pad_mask[pick],
            )
            t0 = time.monotonic()
            drop_rng = np.random.default_rng(derive_seed(cfg.seed, f"dropout-step-{step}"))
            loss = _batch_loss(model, batch, mode="train", rng=drop_rng)
            loss_value = float(loss.data)
            if np.isnan(loss_value):
                raise TrainingDiverged(f"training loss is NaN at step {step}")
            model.zero_grads()
            ad.backward(loss)
            clip_gradients(model.params, cfg.grad_clip)
            adam_step(model.params, adam, lr=cfg.lr_at(step))
            model.zero_grads()
            step += 1
            log.record_step(step, loss_value, time.monotonic() - t0)
            if checkpoint_dir and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_checkpoint(model, checkpoint_dir / f"checkpoint_step{step}.bin")
        log.eval_epochs.append(epoch)
        log.eval_losses.append(evaluate_loss(model, eval_blocks, eval_pads, eval_seed, cfg))
    if checkpoint_dir:
        save_checkpoint(model, checkpoint_dir / "checkpoint.bin")
    return model, log


# --- checkpoint serialization -------------------------------------------------
#
# magic "LKMB" | version u32 LE | config length u64 LE | config UTF-8 |
# tensor count u64 LE | per tensor: name length u64 LE, name UTF-8,
# rank u64 LE, dims u64 LE each, raw float32 LE data.


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_text = format_kv(model.config.to_pairs()).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<Q", len(config_text))
    out += config_text
    out += struct.pack("<Q", len(model.params))
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        out += struct.pack("<Q", len(encoded))
        out += encoded
        out += struct.pack("<Q", data.ndim)
        out += struct.pack(f"<{data.ndim}Q", *data.shape)
        out += data.tobytes()
    path.write_bytes(bytes(out))
    return path


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.pos})"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str | Path) -> Model:
    """Read a checkpoint back into a Model, validating format and shapes."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    version = struct.unpack("<I", reader.take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    config_text = reader.take(reader.u64()).decode("utf-8")
    config = config_from_pairs(parse_kv_text(config_text))
    expected = parameter_shapes(config)

    count = reader.u64()
    if count != len(expected):
        raise CheckpointFormatError(
            f"{path}: checkpoint declares {count} tensors, config implies {len(expected)}"
        )
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name = reader.take(reader.u64()).decode("utf-8")
        rank = reader.u64()
        dims = tuple(reader.u64() for _ in range(rank))
        if name not in expected:
            raise CheckpointFormatError(f"{path}: unexpected tensor {name!r}")
        if name in params:
            raise CheckpointFormatError(f"{path}: duplicate tensor {name!r}")
        if dims != expected[name]:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} has shape {dims}, config implies {expected[name]}"
            )
        size = int(np.prod(dims)) if dims else 1
        raw = reader.take(size * 4)
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        params[name] = Tensor(data, requires_grad=True)
    if reader.pos != len(reader.buf):
        raise CheckpointFormatError(f"{path}: {len(reader.buf) - reader.pos} trailing bytes")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointFormatError(f"{path}: missing tensor(s) {sorted(missing)}")
    ordered = {name: params[name] for name in expected}
    return Model(config=config, params=ordered)
