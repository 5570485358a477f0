"""CTC loss by log-space forward-backward, with gradients w.r.t. logits."""

from __future__ import annotations

from typing import Sequence

import numpy as np

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """The target needs more frames than the input provides."""


class CTCNumericError(FloatingPointError):
    """A feasible target received zero probability (underflow)."""


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(target: Sequence[int], num_frames: int) -> bool:
    return min_frames(target) <= num_frames


def _extend(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_loss(logits: np.ndarray, target: Sequence[int], blank: int = 0) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``logits`` (T x V)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("logits must be a non-empty T x V matrix")
    losses, grads = ctc_loss_batch(logits[None], [logits.shape[0]], [list(target)], blank)
    return float(losses[0]), grads[0]


def ctc_loss_batch(
    logits: np.ndarray,
    lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
    blank: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-utterance CTC losses and logit gradients for a padded batch.

    ``logits`` is B x T x V; frames at or beyond ``lengths[b]`` are ignored and
    receive zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, T, V = logits.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if len(targets) != B or lengths.shape != (B,):
        raise ValueError("batch size mismatch")
    for b, tgt in enumerate(targets):
        if any(t == blank for t in tgt):
            raise ValueError("target contains the blank token")
        if any(not 0 <= t < V for t in tgt):
            raise ValueError("target index out of range")
        if not 1 <= lengths[b] <= T:
            raise ValueError("invalid utterance length")
        need = min_frames(tgt)
        if need > lengths[b]:
            raise InfeasibleTargetError(
                f"target of {len(tgt)} labels needs {need} frames, utterance {b} has {lengths[b]}"
            )

    S = 2 * max(len(t) for t in targets) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    valid_s = np.zeros((B, S), dtype=bool)
    for b, tgt in enumerate(targets):
        e = _extend(tgt, blank)
        ext[b, : len(e)] = e
        valid_s[b, : len(e)] = True
    s_len = 2 * np.array([len(t) for t in targets]) + 1

    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid_s

    lp = log_softmax(logits, axis=2)
    # emission log-prob of extended label s at frame t: B x T x S
    em = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    em = np.where(valid_s[:, None, :], em, NEG_INF)

    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.full((B, T, S), NEG_INF)
        alpha[:, 0, 0] = em[:, 0, 0]
        if S > 1:
            alpha[:, 0, 1] = em[:, 0, 1]
        for t in range(1, T):
            prev = alpha[:, t - 1]
            acc = prev.copy()
            acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
            acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
            alpha[:, t] = acc + em[:, t]

        rows = np.arange(B)
        last_t = lengths - 1
        end_a = alpha[rows, last_t, s_len - 1]
        end_b = np.where(s_len > 1, alpha[rows, last_t, np.maximum(s_len - 2, 0)], NEG_INF)
        log_like = np.logaddexp(end_a, end_b)

        # beta[t, s]: log-prob of finishing from state s at t, excluding frame t's emission
        beta = np.full((B, T, S), NEG_INF)
        init = np.full((B, S), NEG_INF)
        init[rows, s_len - 1] = 0.0
        two = s_len > 1
        init[rows[two], s_len[two] - 2] = 0.0
        for t in range(T - 1, -1, -1):
            if t < T - 1:
                nxt = beta[:, t + 1] + em[:, t + 1]
                acc = nxt.copy()
                acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
                acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
            else:
                acc = np.full((B, S), NEG_INF)
            at_end = (last_t == t)[:, None]
            live = (t < last_t)[:, None]
            beta[:, t] = np.where(at_end, init, np.where(live, acc, NEG_INF))

    if not np.all(np.isfinite(log_like)):
        bad = int(np.flatnonzero(~np.isfinite(log_like))[0])
        raise CTCNumericError(f"utterance {bad}: feasible target has zero probability")

    occ = np.exp(alpha + beta - log_like[:, None, None])
    onehot = np.zeros((B, S, V))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
    onehot *= valid_s[:, :, None]
    grads = np.exp(lp) - occ @ onehot
    frame_mask = np.arange(T)[None, :] < lengths[:, None]
    grads *= frame_mask[:, :, None]
    return -log_like, grads


def greedy_decode(logits: np.ndarray, blank: int = 0) -> list[int]:
    """Per-frame argmax (lowest id wins ties), collapse repeats, drop blanks."""
    path = np.argmax(np.asarray(logits), axis=1)
    out = []
    prev = None
    for tok in path.tolist():
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out
