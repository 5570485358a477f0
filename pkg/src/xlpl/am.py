"""Compact CTC acoustic model with hand-written reverse mode.

Architecture: one strided temporal convolution, a stack of residual
feed-forward blocks that each look at a small window of neighbouring
frames, and a linear head over the token set. No attention.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ctc

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"XLPLAM\x00\x01"
CHECKPOINT_VERSION = 1


class FeatureShapeError(ValueError):
    pass


class NaNGradientError(FloatingPointError):
    def __init__(self, utt_ids: Sequence[str]):
        super().__init__(f"non-finite gradient; batch utterances: {', '.join(utt_ids)}")
        self.utt_ids = list(utt_ids)


@dataclass(frozen=True)
class ArchSpec:
    feat_dim: int
    num_tokens: int
    hidden: int = 64
    kernel: int = 7
    stride: int = 3
    num_blocks: int = 2
    context: int = 3  # frames seen by each block, centred

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.context % 2 == 0:
            raise ValueError("kernel and context must be odd")
        if min(self.feat_dim, self.num_tokens, self.hidden, self.stride) < 1:
            raise ValueError("dimensions must be positive")

    def out_frames(self, num_frames: int) -> int:
        return -(-num_frames // self.stride)


@dataclass(frozen=True)
class FeatureSequence:
    uid: str
    feats: np.ndarray  # T x F
    speaker: str = ""

    @property
    def num_frames(self) -> int:
        return self.feats.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.03
    warmup_steps: int = 500
    max_iterations: int = 2000
    batch_frames: int = 2000
    dropout: float = 0.1
    freq_masks: int = 2
    freq_mask_size: int = 3
    time_masks: int = 2
    time_mask_size: int = 5
    specaug_prob: float = 0.1
    specaug_start: int = 50
    eval_interval: int = 200
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if not 0.0 <= self.specaug_prob <= 1.0:
            raise ValueError("specaug_prob must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


# Values used at cluster scale; at desk scale feature dims and utterances are far smaller.
PAPER_TRAIN_CONFIG = TrainConfig(
    lr=0.03,
    warmup_steps=64000,
    max_iterations=300000,
    dropout=0.1,
    freq_masks=2,
    freq_mask_size=30,
    time_masks=10,
    time_mask_size=50,
    specaug_prob=0.1,
    specaug_start=0,
)


def _relu(x):
    return np.maximum(x, 0.0)


class AcousticModel:
    def __init__(self, spec: ArchSpec, params: dict[str, np.ndarray], step: int = 0, dropout: float = 0.0):
        self.spec = spec
        self.params = params
        self.step = step
        self.dropout = dropout

    @classmethod
    def init(cls, spec: ArchSpec, rng: np.random.Generator) -> "AcousticModel":
        H, F, V = spec.hidden, spec.feat_dim, spec.num_tokens
        p = {}
        fan = spec.kernel * F
        p["conv.w"] = rng.normal(0.0, math.sqrt(2.0 / fan), (fan, H))
        p["conv.b"] = np.zeros(H)
        for i in range(spec.num_blocks):
            fan = spec.context * H
            p[f"block{i}.w1"] = rng.normal(0.0, math.sqrt(2.0 / fan), (fan, H))
            p[f"block{i}.b1"] = np.zeros(H)
            p[f"block{i}.w2"] = rng.normal(0.0, math.sqrt(1.0 / H) * 0.5, (H, H))
            p[f"block{i}.b2"] = np.zeros(H)
        p["out.w"] = rng.normal(0.0, math.sqrt(1.0 / H), (H, V))
        p["out.b"] = np.zeros(V)
        return cls(spec, p)

    def copy(self) -> "AcousticModel":
        return AcousticModel(self.spec, {k: v.copy() for k, v in self.params.items()}, self.step, self.dropout)

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def forward(self, feats, train_mode: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        """Logits (ceil(T / stride) x num_tokens) for one utterance."""
        x = feats.feats if isinstance(feats, FeatureSequence) else feats
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.feat_dim:
            raise FeatureShapeError(f"expected T x {self.spec.feat_dim} features, got shape {x.shape}")
        logits, _ = self.forward_batch(x[None], [x.shape[0]], train_mode, rng)
        return logits[0]

    def forward_batch(self, x: np.ndarray, lengths: Sequence[int], train_mode: bool = False, rng=None):
        """Padded batch forward. Returns (logits B x T' x V, cache for backward)."""
        spec, p = self.spec, self.params
        if x.ndim != 3 or x.shape[2] != spec.feat_dim:
            raise FeatureShapeError(f"expected B x T x {spec.feat_dim} features, got shape {x.shape}")
        drop = self.dropout if train_mode else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("train_mode with dropout needs an rng")
        B, T, F = x.shape
        s, K, half = spec.stride, spec.kernel, spec.kernel // 2
        t_out = spec.out_frames(T)
        out_len = np.array([spec.out_frames(n) for n in lengths])
        mask = (np.arange(t_out)[None, :] < out_len[:, None]).astype(np.float64)[:, :, None]

        pad_right = max(0, s * (t_out - 1) + half - (T - 1))
        xp = np.concatenate([np.zeros((B, half, F)), x, np.zeros((B, pad_right, F))], axis=1)
        idx = s * np.arange(t_out)[:, None] + np.arange(K)[None, :]
        xw = xp[:, idx].reshape(B, t_out, K * F)
        pre = xw @ p["conv.w"] + p["conv.b"]
        h = _relu(pre) * mask
        cache = {"xw": xw, "pre": pre, "mask": mask, "blocks": [], "out_len": out_len}

        for i in range(spec.num_blocks):
            hw = _window(h, spec.context)
            a = hw @ p[f"block{i}.w1"] + p[f"block{i}.b1"]
            z = _relu(a)
            dmask = None
            if drop > 0.0:
                dmask = (rng.random(z.shape) >= drop) / (1.0 - drop)
                z = z * dmask
            u = z @ p[f"block{i}.w2"] + p[f"block{i}.b2"]
            cache["blocks"].append({"hw": hw, "a": a, "z": z, "dmask": dmask})
            h = (h + u) * mask
        cache["h"] = h
        logits = h @ p["out.w"] + p["out.b"]
        return logits, cache

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        spec, p = self.spec, self.params
        g = {}
        H = spec.hidden
        mask = cache["mask"]
        h = cache["h"]
        g["out.w"] = _outer(h, dlogits)
        g["out.b"] = dlogits.sum(axis=(0, 1))
        dh = dlogits @ p["out.w"].T
        for i in reversed(range(spec.num_blocks)):
            c = cache["blocks"][i]
            dh = dh * mask
            du = dh
            g[f"block{i}.w2"] = _outer(c["z"], du)
            g[f"block{i}.b2"] = du.sum(axis=(0, 1))
            dz = du @ p[f"block{i}.w2"].T
            if c["dmask"] is not None:
                dz = dz * c["dmask"]
            da = dz * (c["a"] > 0)
            g[f"block{i}.w1"] = _outer(c["hw"], da)
            g[f"block{i}.b1"] = da.sum(axis=(0, 1))
            dhw = da @ p[f"block{i}.w1"].T
            dh = dh + _unwindow(dhw, spec.context, H)
        dpre = dh * mask * (cache["pre"] > 0)
        g["conv.w"] = _outer(cache["xw"], dpre)
        g["conv.b"] = dpre.sum(axis=(0, 1))
        return g

    # ------------------------------------------------------------------
    # checkpoints
    # ------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        names = sorted(self.params)
        header = {
            "version": CHECKPOINT_VERSION,
            "arch": asdict(self.spec),
            "step": self.step,
            "dropout": self.dropout,
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(hb)))
        buf.write(hb)
        for n in names:
            buf.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AcousticModel":
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not an acoustic model checkpoint")
        (hl,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12 : 12 + hl])
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        off = 12 + hl
        params = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(t["shape"])
            params[t["name"]] = arr.astype(np.float64)
            off += 8 * n
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(ArchSpec(**header["arch"]), params, header["step"], header.get("dropout", 0.0))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AcousticModel":
        return cls.from_bytes(Path(path).read_bytes())


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over batch and time of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _window(h: np.ndarray, width: int) -> np.ndarray:
    """B x T x H -> B x T x (width * H) of centred, zero-padded neighbours."""
    B, T, H = h.shape
    half = width // 2
    hp = np.concatenate([np.zeros((B, half, H)), h, np.zeros((B, half, H))], axis=1)
    return np.concatenate([hp[:, k : k + T] for k in range(width)], axis=2)


def _unwindow(dhw: np.ndarray, width: int, H: int) -> np.ndarray:
    B, T, _ = dhw.shape
    half = width // 2
    dhp = np.zeros((B, T + 2 * half, H))
    for k in range(width):
        dhp[:, k : k + T] += dhw[:, :, k * H : (k + 1) * H]
    return dhp[:, half : half + T]


def forward(model: AcousticModel, feats, train_mode: bool = False, rng=None) -> np.ndarray:
    return model.forward(feats, train_mode, rng)


# ----------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------


@dataclass
class AdagradState:
    lr: float
    warmup_steps: int = 0
    eps: float = 1e-8
    step: int = 0
    accum: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, (self.step + 1) / self.warmup_steps)
        return self.lr


def adagrad_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdagradState) -> None:
    lr = state.current_lr()
    for name, g in grads.items():
        acc = state.accum.get(name)
        if acc is None:
            acc = state.accum[name] = np.zeros_like(g)
        acc += g * g
        params[name] -= lr * g / (np.sqrt(acc) + state.eps)
    state.step += 1


def backward_and_step(
    model: AcousticModel, cache: dict, grad_logits: np.ndarray, state: AdagradState, utt_ids=()
) -> AcousticModel:
    grads = model.backward(cache, grad_logits)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NaNGradientError(list(utt_ids) or ["<unknown>"])
    adagrad_update(model.params, grads, state)
    model.step += 1
    return model


# ----------------------------------------------------------------------
# SpecAugment
# ----------------------------------------------------------------------


def spec_augment(feats: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random frequency bands and time spans.

    Each mask fires independently with ``cfg.specaug_prob``; its width is
    uniform on 1..size (clipped to the axis length) and its start uniform over
    the positions where it fits.
    """
    out = np.array(feats, copy=True)
    T, F = out.shape
    for _ in range(cfg.freq_masks):
        if rng.random() < cfg.specaug_prob and cfg.freq_mask_size > 0:
            w = int(rng.integers(1, min(cfg.freq_mask_size, F) + 1))
            f0 = int(rng.integers(0, F - w + 1))
            out[:, f0 : f0 + w] = 0.0
    for _ in range(cfg.time_masks):
        if rng.random() < cfg.specaug_prob and cfg.time_mask_size > 0:
            w = int(rng.integers(1, min(cfg.time_mask_size, T) + 1))
            t0 = int(rng.integers(0, T - w + 1))
            out[t0 : t0 + w, :] = 0.0
    return out


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    """One training pair: features and a blank-free label sequence."""

    uid: str
    feats: np.ndarray
    target: tuple[int, ...]


def make_batches(examples: Sequence[Example], batch_frames: int, rng: np.random.Generator) -> list[list[Example]]:
    order = rng.permutation(len(examples))
    batches, cur, frames = [], [], 0
    for i in order:
        ex = examples[int(i)]
        cur.append(ex)
        frames += ex.feats.shape[0]
        if frames >= batch_frames:
            batches.append(cur)
            cur, frames = [], 0
    if cur:
        batches.append(cur)
    return batches


def feasible(model: AcousticModel, ex: Example) -> bool:
    return ctc.is_feasible(ex.target, model.spec.out_frames(ex.feats.shape[0]))


class Trainer:
    """Owns a model and its optimizer; each call to :meth:`step` is one update."""

    def __init__(self, model: AcousticModel, cfg: TrainConfig, blank: int = 0, rng=None):
        self.model = model
        self.cfg = cfg
        self.blank = blank
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.opt = AdagradState(cfg.lr, cfg.warmup_steps, cfg.eps)
        model.dropout = cfg.dropout
        self._queue: list[list[Example]] = []

    @property
    def iteration(self) -> int:
        return self.opt.step

    def step(self, batch: Sequence[Example]) -> float:
        cfg, model = self.cfg, self.model
        feats = []
        for ex in batch:
            f = np.asarray(ex.feats, dtype=np.float64)
            if self.opt.step >= cfg.specaug_start and cfg.specaug_prob > 0:
                f = spec_augment(f, cfg, self.rng)
            feats.append(f)
        lengths = [f.shape[0] for f in feats]
        T = max(lengths)
        x = np.zeros((len(feats), T, model.spec.feat_dim))
        for b, f in enumerate(feats):
            x[b, : f.shape[0]] = f
        logits, cache = model.forward_batch(x, lengths, train_mode=True, rng=self.rng)
        losses, dlogits = ctc.ctc_loss_batch(logits, cache["out_len"], [ex.target for ex in batch], self.blank)
        n = len(batch)
        backward_and_step(model, cache, dlogits / n, self.opt, [ex.uid for ex in batch])
        return float(losses.sum() / n)

    def next_batch(self, examples: Sequence[Example]) -> list[Example]:
        """Draw the next batch from a reshuffled pass over ``examples``."""
        if not self._queue:
            self._queue = make_batches(examples, self.cfg.batch_frames, self.rng)
        return self._queue.pop(0)

    def reset_queue(self) -> None:
        self._queue = []


def train_supervised(
    model: AcousticModel,
    dataset: Sequence[Example],
    cfg: TrainConfig,
    evaluate: Callable[[AcousticModel], float] | None = None,
    blank: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[AcousticModel, dict]:
    """Train with CTC and keep the checkpoint with the lowest ``evaluate`` score.

    ``evaluate`` maps a model to its dev error (greedy WER in practice). Pairs
    whose target cannot be aligned to their output frames are skipped.
    Returns the selected model and a log with losses and dev scores.
    """
    if not dataset:
        raise ValueError("empty training set")
    model = model.copy()
    usable = [ex for ex in dataset if feasible(model, ex)]
    skipped = len(dataset) - len(usable)
    if not usable:
        raise ValueError("no feasible training pairs")
    trainer = Trainer(model, cfg, blank)
    history = {"loss": [], "dev": [], "skipped": skipped}
    best, best_score = model.copy(), math.inf
    for it in range(cfg.max_iterations):
        loss = trainer.step(trainer.next_batch(usable))
        history["loss"].append(loss)
        if on_step:
            on_step(it, loss)
        last = it + 1 == cfg.max_iterations
        if evaluate is not None and cfg.eval_interval and ((it + 1) % cfg.eval_interval == 0 or last):
            score = evaluate(model)
            history["dev"].append((it + 1, score))
            if score < best_score:
                best, best_score = model.copy(), score
    if evaluate is None:
        best = model.copy()
    history["best_dev"] = best_score
    return best, history
