"""Training objectives: slot-contrastive alignment, token CE, weighted sums."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    lam_ctc: float = 0.0
    lam_cont: float = 0.0
    lam_ce_y: float = 0.0
    lam_ce_o: float = 0.0

    def __post_init__(self):
        for field, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{field} must be nonnegative, got {value}")


def _row_normalize(x: Tensor, side: str) -> Tensor:
    sq = np.einsum("md,md->m", x.data, x.data)
    if np.any(sq == 0.0):
        raise ValueError(f"zero-norm row in {side} representations")
    norms = ad.sqrt(ad.tsum(x * x, axis=1, keepdims=True))
    return x / norms


def contrastive_loss(h_speech: Tensor, h_text: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over memory slots.

    Slot i of each modality is the positive for slot i of the other; both
    softmax directions (speech-to-text and text-to-speech) contribute, so
    the loss is unchanged when the two inputs swap.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if h_speech.shape != h_text.shape or h_speech.ndim != 2:
        raise ValueError(f"representation shapes differ: {h_speech.shape} vs {h_text.shape}")
    m = h_speech.shape[0]
    sn = _row_normalize(h_speech, "speech")
    tn = _row_normalize(h_text, "text")
    sim = (sn @ ad.transpose(tn, (1, 0))) * (1.0 / tau)
    eye = Tensor(np.eye(m))
    rows = ad.tsum(ad.log_softmax(sim, axis=1) * eye)
    cols = ad.tsum(ad.log_softmax(sim, axis=0) * eye)
    return -(rows + cols)


def cross_entropy_tokens(logits: Tensor, targets) -> Tensor:
    """Mean over positions of the negative log-softmax at the target column.

    ``targets`` are 0-based column indices into the logits.
    """
    targets = [int(y) for y in targets]
    n, v = logits.shape
    if len(targets) != n:
        raise ValueError(f"{n} logit rows but {len(targets)} targets")
    if any(y < 0 or y >= v for y in targets):
        raise ValueError(f"target ids must be in 0..{v - 1}, got {targets}")
    pick = np.zeros((n, v))
    pick[np.arange(n), targets] = 1.0
    ls = ad.log_softmax(logits, axis=1)
    return -(ad.tsum(ls * Tensor(pick)) * (1.0 / n))


def composite_loss(parts: dict[str, Tensor | None], weights: LossWeights) -> Tensor:
    """Weighted sum of the four stage objectives.

    A part may be absent (None or missing key) only when its weight is zero.
    """
    pairs = (
        ("ctc", weights.lam_ctc),
        ("cont", weights.lam_cont),
        ("ce_y", weights.lam_ce_y),
        ("ce_o", weights.lam_ce_o),
    )
    unknown = set(parts) - {name for name, _ in pairs}
    if unknown:
        raise ValueError(f"unknown loss parts: {sorted(unknown)}")
    total: Tensor | None = None
    for name, lam in pairs:
        part = parts.get(name)
        if lam == 0.0:
            continue
        if part is None:
            raise ValueError(f"loss part {name!r} has weight {lam} but was not provided")
        term = part * lam
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.zeros(()))
