"""Teacher-forced training, Adam, clipping, early stopping and checkpoints."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .model import TAG_ID, BiLSTMTagger, Module, PointerGenConfig, PointerGenerator, TaggerConfig, make_batch
from .textproc import SeqGenExample

logger = logging.getLogger(__name__)

MAGIC = b"PGNN"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    clip_norm: float = 2.0
    patience: int = 3
    seed: int = 0
    precision: int = 32
    max_steps: int | None = None

    def validate(self) -> None:
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 1 or self.clip_norm <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self) -> str:
        return "float32" if self.precision == 32 else "float64"


@dataclass
class Checkpoint:
    kind: str                      # "pointer_generator" | "tagger"
    model_config: dict
    vocab_hash: str
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def build_model(self):
        if self.kind == "pointer_generator":
            model = PointerGenerator(PointerGenConfig(**self.model_config))
        elif self.kind == "tagger":
            model = BiLSTMTagger(TaggerConfig(**self.model_config))
        else:
            raise CheckpointError(f"unknown model kind {self.kind!r}")
        model.load_state_dict(self.params)
        return model


# ------------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


def global_norm(params: dict[str, ad.Tensor]) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values()
                         if p.grad is not None))


def clip_gradients(params: dict[str, ad.Tensor], clip_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``clip_norm``; returns the pre-clip norm."""
    norm = global_norm(params)
    if math.isfinite(clip_norm) and norm > clip_norm:
        s = clip_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(s)
    return norm


# ------------------------------------------------------------------- batching


def bucket_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Group indices of similar length, then shuffle the batch order."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    if rng is not None:
        # jitter within runs of similar length so batches differ across epochs
        noise = rng.random(len(order))
        order = np.lexsort((noise, np.asarray(lengths) // 8))
    batches = [list(map(int, order[i:i + batch_size])) for i in range(0, len(order), batch_size)]
    if rng is not None:
        rng.shuffle(batches)
    return batches


# ------------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    train_nll: float
    valid_nll: float
    seconds: float


def _loss_fn_pg(model: PointerGenerator, examples: Sequence[SeqGenExample], dtype):
    def loss(idx, rng):
        return model.nll(make_batch([examples[i] for i in idx], dtype=dtype), rng)
    return loss


def _loss_fn_tagger(model: BiLSTMTagger, examples: Sequence[SeqGenExample], tags: Sequence[np.ndarray], dtype):
    def loss(idx, rng):
        batch = make_batch([examples[i] for i in idx], dtype=dtype, with_targets=False)
        t = np.zeros(batch.src.shape, dtype=np.int64)
        for r, i in enumerate(idx):
            t[r, :len(tags[i])] = tags[i]
        return model.nll(batch, t, rng)
    return loss


def evaluate_nll(loss_fn, n: int, batch_size: int) -> float:
    if n == 0:
        return float("nan")
    total = 0.0
    with ad.no_grad():
        for start in range(0, n, batch_size):
            idx = list(range(start, min(start + batch_size, n)))
            total += float(loss_fn(idx, None).value) * len(idx)
    return total / n


def fit(model: Module, train_loss, n_train: int, train_lengths: Sequence[int], valid_loss, n_valid: int,
        cfg: TrainConfig, start_epoch: int = 1, log_path=None,
        on_epoch: Callable[[EpochLog], None] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Generic loop shared by both models; returns (best params, metadata)."""
    cfg.validate()
    if n_train == 0 or n_valid == 0:
        raise ValueError("training and validation splits must be non-empty")
    opt = Adam(model.params, lr=cfg.learning_rate)
    best = model.state_dict()
    best_valid = math.inf
    best_epoch = start_epoch - 1
    bad = 0
    history: list[EpochLog] = []
    steps = 0
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(start_epoch, start_epoch + cfg.max_epochs):
        t0 = time.perf_counter()
        epoch_rng = np.random.default_rng([cfg.seed, epoch])
        total, count = 0.0, 0
        for b_idx, idx in enumerate(bucket_batches(train_lengths, cfg.batch_size, epoch_rng)):
            model.zero_grad()
            loss = train_loss(idx, rng)
            val = float(loss.value)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at epoch {epoch}, batch {b_idx} "
                                    f"(examples {idx[:4]}...)")
            ad.backward(loss)
            clip_gradients(model.params, cfg.clip_norm)
            opt.step()
            total += val * len(idx)
            count += len(idx)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        valid = evaluate_nll(valid_loss, n_valid, cfg.batch_size)
        rec = EpochLog(epoch, total / max(count, 1), valid, time.perf_counter() - t0)
        history.append(rec)
        logger.info("epoch %d train_nll=%.4f valid_nll=%.4f (%.1fs)", epoch, rec.train_nll, valid, rec.seconds)
        if on_epoch:
            on_epoch(rec)
        if valid < best_valid:
            best_valid, best_epoch, bad = valid, epoch, 0
            best = model.state_dict()
        else:
            bad += 1
            if bad >= cfg.patience:
                break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if log_path is not None:
        write_training_log(log_path, history)
    meta = {"epoch": best_epoch, "valid_nll": best_valid, "last_epoch": history[-1].epoch,
            "final_valid_nll": history[-1].valid_nll, "steps": steps}
    return best, meta


def write_training_log(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "valid_nll", "seconds"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_nll:.6f}", f"{r.valid_nll:.6f}", f"{r.seconds:.2f}"])


def train_pointer_generator(train: Sequence[SeqGenExample], valid: Sequence[SeqGenExample],
                            model_config: PointerGenConfig, cfg: TrainConfig, vocab_hash: str,
                            init: Checkpoint | None = None, log_path=None, extra_meta: dict | None = None,
                            **kw) -> Checkpoint:
    model_config = copy.copy(model_config)
    model_config.dtype = cfg.dtype
    model = PointerGenerator(model_config, seed=cfg.seed)
    start = 1
    if init is not None:
        _check_resume(init, "pointer_generator", vocab_hash)
        model.load_state_dict(init.params)
        start = int(init.meta.get("last_epoch", init.meta.get("epoch", 0))) + 1
    best, meta = fit(model, _loss_fn_pg(model, train, cfg.dtype), len(train),
                     [len(e.source_ids) for e in train], _loss_fn_pg(model, valid, cfg.dtype), len(valid),
                     cfg, start_epoch=start, log_path=log_path, **kw)
    return Checkpoint("pointer_generator", asdict(model_config), vocab_hash, best, {**(extra_meta or {}), **meta})


def train_tagger(train: Sequence[SeqGenExample], train_tags: Sequence[Sequence[str]],
                 valid: Sequence[SeqGenExample], valid_tags: Sequence[Sequence[str]],
                 model_config: TaggerConfig, cfg: TrainConfig, vocab_hash: str,
                 init: Checkpoint | None = None, log_path=None, extra_meta: dict | None = None,
                 **kw) -> Checkpoint:
    model_config = copy.copy(model_config)
    model_config.dtype = cfg.dtype
    model = BiLSTMTagger(model_config, seed=cfg.seed)
    start = 1
    if init is not None:
        _check_resume(init, "tagger", vocab_hash)
        model.load_state_dict(init.params)
        start = int(init.meta.get("last_epoch", init.meta.get("epoch", 0))) + 1
    to_ids = lambda seqs: [np.array([TAG_ID.get(t, 0) for t in s], dtype=np.int64) for s in seqs]
    best, meta = fit(model, _loss_fn_tagger(model, train, to_ids(train_tags), cfg.dtype), len(train),
                     [len(e.source_ids) for e in train],
                     _loss_fn_tagger(model, valid, to_ids(valid_tags), cfg.dtype), len(valid),
                     cfg, start_epoch=start, log_path=log_path, **kw)
    return Checkpoint("tagger", asdict(model_config), vocab_hash, best, {**(extra_meta or {}), **meta})


def _check_resume(init: Checkpoint, kind: str, vocab_hash: str) -> None:
    if init.kind != kind:
        raise CheckpointError(f"cannot resume a {kind} from a {init.kind} checkpoint")
    if init.vocab_hash != vocab_hash:
        raise CheckpointError("checkpoint vocabulary hash does not match the current vocabulary")


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"kind": ckpt.kind, "model_config": ckpt.model_config, "vocab_hash": ckpt.vocab_hash,
                         "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = sorted(ckpt.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(ckpt.params[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def _take(data: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(data):
        raise CheckpointError("corrupt checkpoint: truncated")
    return data[pos:pos + n], pos + n


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, pos = _take(data, 0, 4)
    if magic != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    (version,), pos = struct.unpack("<H", _take(data, pos, 2)[0]), pos + 2
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    raw, pos = _take(data, pos, 4)
    (hlen,) = struct.unpack("<I", raw)
    raw, pos = _take(data, pos, hlen)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint: unreadable header") from exc
    raw, pos = _take(data, pos, 4)
    (count,) = struct.unpack("<I", raw)
    params = {}
    for _ in range(count):
        raw, pos = _take(data, pos, 2)
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _take(data, pos, nlen)
        name = raw.decode("utf-8")
        raw, pos = _take(data, pos, 2)
        code, ndim = struct.unpack("<BB", raw)
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"corrupt checkpoint: dtype code {code}")
        raw, pos = _take(data, pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        raw, pos = _take(data, pos, nbytes)
        params[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError("checkpoint was trained with a different vocabulary")
    ckpt = Checkpoint(header["kind"], header["model_config"], header["vocab_hash"], params, header["meta"])
    try:
        ckpt.build_model()
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint parameters do not fit its model config: {exc}") from exc
    return ckpt
