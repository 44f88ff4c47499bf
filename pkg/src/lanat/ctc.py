"""CTC loss, greedy decoding, forced alignment, and attention-mask building.

Blank is id 0 throughout; real tokens are 1..V. The loss runs the
forward-backward recursion in log space and exposes its analytic gradient
(negative state occupancy) to the autodiff tape as a single fused node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -np.inf


@dataclass
class AlignmentPath:
    """A maximum-probability frame labelling for one utterance.

    ``labels`` has one entry per frame (0 for blank). ``spans`` holds the
    inclusive frame interval [s_l, e_l] of each output token, in order.
    """

    labels: np.ndarray
    spans: list[tuple[int, int]]
    score: float

    def __post_init__(self):
        for (s0, e0), (s1, _) in zip(self.spans, self.spans[1:]):
            if not s0 <= e0 < s1:
                raise ValueError(f"token spans out of order: [{s0},{e0}] then start {s1}")

    def collapsed(self) -> list[int]:
        return collapse_path(self.labels)


def collapse_path(labels) -> list[int]:
    """Merge repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for lab in labels:
        lab = int(lab)
        if lab != prev and lab != 0:
            out.append(lab)
        prev = lab
    return out


def format_alignment(path: AlignmentPath) -> str:
    """One line per frame: frame index, tab, label id."""
    return "\n".join(f"{t}\t{int(lab)}" for t, lab in enumerate(path.labels))


def min_frames(target) -> int:
    """Shortest path length that can spell out the target (repeats need a blank)."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def _as_posterior(log_probs) -> np.ndarray:
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[1] < 2:
        raise ValueError(f"posterior must be T x (V+1) with V >= 1, got {lp.shape}")
    with np.errstate(over="ignore"):
        rows = np.log(np.exp(lp - lp.max(axis=1, keepdims=True)).sum(axis=1)) + lp.max(axis=1)
    if np.abs(rows).max() > 1e-6:
        raise ValueError("posterior rows are not normalized log-probabilities")
    return lp


def _check_target(target, n_labels: int, t_frames: int) -> list[int]:
    target = [int(y) for y in target]
    if not target:
        raise ValueError("empty target")
    if any(y < 1 or y >= n_labels for y in target):
        raise ValueError(f"target ids must be in 1..{n_labels - 1}, got {target}")
    need = min_frames(target)
    if t_frames < need:
        raise ValueError(f"target needs at least {need} frames, posterior has {t_frames}")
    return target


def _extended(target: list[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    """States reachable from s-2: non-blank and different from the label two back."""
    ok = np.zeros(len(ext), dtype=bool)
    ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    return ok


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """Negative log of the total probability of all paths collapsing to target.

    Differentiable with respect to the posterior: the backward pass is the
    classic negative-occupancy expression from the forward-backward pass.
    """
    lp = _as_posterior(log_probs)
    t_frames, n_labels = lp.shape
    target = _check_target(target, n_labels, t_frames)
    ext = _extended(target)
    skip = _skip_allowed(ext)
    n_states = len(ext)
    emit = lp[:, ext]

    alpha = np.full((t_frames, n_states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        acc = np.logaddexp(stay, step)
        jump = np.full(n_states, NEG_INF)
        jump[skip] = prev[np.flatnonzero(skip) - 2]
        alpha[t] = emit[t] + np.logaddexp(acc, jump)

    log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if n_states > 1 else alpha[-1, -1]
    if not np.isfinite(log_z):
        raise ValueError("no feasible path for target")

    beta = np.full((t_frames, n_states), NEG_INF)
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    skip_from = np.concatenate((skip[2:], [False, False]))
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        acc = np.logaddexp(stay, step)
        jump = np.full(n_states, NEG_INF)
        jump[skip_from] = nxt[np.flatnonzero(skip_from) + 2]
        beta[t] = np.logaddexp(acc, jump)

    occupancy = np.exp(alpha + beta - log_z)

    if not isinstance(log_probs, Tensor):
        return Tensor(np.asarray(-log_z))

    def bw(g):
        grad = np.zeros_like(lp)
        for s, lab in enumerate(ext):
            grad[:, lab] += occupancy[:, s]
        ad._acc(log_probs, float(g) * -grad, own=True)

    return ad._node(np.asarray(-log_z), (log_probs,), bw, "ctc_loss")


def ctc_greedy_decode(log_probs) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse_path(lp.argmax(axis=1))


def ctc_forced_align(log_probs, target) -> AlignmentPath:
    """Viterbi path over the blank-interleaved target; ties prefer the
    smaller predecessor state."""
    lp = _as_posterior(log_probs)
    t_frames, n_labels = lp.shape
    target = _check_target(target, n_labels, t_frames)
    ext = _extended(target)
    skip = _skip_allowed(ext)
    n_states = len(ext)
    emit = lp[:, ext]

    delta = np.full(n_states, NEG_INF)
    delta[0] = emit[0, 0]
    delta[1] = emit[0, 1]
    back = np.zeros((t_frames, n_states), dtype=np.int64)
    back[0] = np.arange(n_states)
    for t in range(1, t_frames):
        jump = np.full(n_states, NEG_INF)
        jump[skip] = delta[np.flatnonzero(skip) - 2]
        step = np.concatenate(([NEG_INF], delta[:-1]))
        # candidate rows ordered by predecessor index; argmax takes the first
        # maximum, which implements the smaller-state tie-break
        cand = np.stack((jump, step, delta))
        choice = cand.argmax(axis=0)
        delta = emit[t] + cand[choice, np.arange(n_states)]
        back[t] = np.arange(n_states) - (2 - choice)

    # terminal state: last blank or last token, smaller index wins ties
    if delta[n_states - 2] >= delta[n_states - 1]:
        state = n_states - 2
    else:
        state = n_states - 1
    score = float(delta[state])
    if not np.isfinite(score):
        raise ValueError("no feasible path for target")

    states = np.empty(t_frames, dtype=np.int64)
    for t in range(t_frames - 1, -1, -1):
        states[t] = state
        state = back[t, state]

    labels = ext[states]
    spans: list[tuple[int, int]] = []
    for l in range(len(target)):
        frames = np.flatnonzero(states == 2 * l + 1)
        spans.append((int(frames[0]), int(frames[-1])))
    return AlignmentPath(labels=labels, spans=spans, score=score)


def build_trigger_mask(path: AlignmentPath, t_frames: int, lookahead: int = 1) -> np.ndarray:
    """Row l allows frames 0..e_l+lookahead (clamped), e_l = end of token l's span."""
    if lookahead < 0:
        raise ValueError("lookahead must be >= 0")
    mask = np.zeros((len(path.spans), t_frames), dtype=bool)
    for l, (_, end) in enumerate(path.spans):
        mask[l, : min(end + lookahead, t_frames - 1) + 1] = True
    return mask


def build_fusion_mask(trigger: np.ndarray, n_memory: int) -> np.ndarray:
    """Trigger block on the left, an all-true memory block on the right."""
    if trigger.dtype != bool or trigger.ndim != 2:
        raise ValueError("trigger must be a boolean matrix")
    ones = np.ones((trigger.shape[0], n_memory), dtype=bool)
    return np.concatenate((trigger, ones), axis=1)
