"""Three-stage schedule: text pretraining, speech training with the token
table frozen, then joint training with all four objectives.

Stage plans carry the loss weights, the frozen-parameter name set, and the
data mode. Recipes ("scratch", "step3", "steps13", "steps123") chain
stages; the final stage's last few epochs are parameter-averaged into the
model that ships.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericsError, Tensor
from .checkpoint import CheckpointError, read_arrays
from .ctc import ctc_loss
from .data import Utterance, batch_iter, cer, edit_distance
from .losses import LossWeights, composite_loss, contrastive_loss, cross_entropy_tokens
from .model import LaNat, LaNatConfig


class TrainingDiverged(RuntimeError):
    """Loss or gradient left the finite range; parameters kept at last good step."""


@dataclass(frozen=True)
class StagePlan:
    stage: int
    weights: LossWeights
    frozen: frozenset[str]
    epochs: int
    data_mode: str  # "text", "speech", or "speech+text"

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2, or 3, got {self.stage}")
        if self.data_mode not in ("text", "speech", "speech+text"):
            raise ValueError(f"unknown data mode {self.data_mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def stage1(epochs: int = 200) -> StagePlan:
    return StagePlan(1, LossWeights(lam_ce_y=1.0), frozenset(), epochs, "text")


def stage2(epochs: int = 100) -> StagePlan:
    return StagePlan(2, LossWeights(lam_ctc=0.3, lam_ce_o=1.0),
                     frozenset({"text.table"}), epochs, "speech")


def stage3(epochs: int = 100) -> StagePlan:
    return StagePlan(3, LossWeights(lam_ctc=0.3, lam_cont=1.0, lam_ce_y=0.3, lam_ce_o=1.0),
                     frozenset(), epochs, "speech+text")


def scratch(epochs: int = 100) -> StagePlan:
    """Stage-2 objectives, nothing frozen, no pretraining before it."""
    return StagePlan(2, LossWeights(lam_ctc=0.3, lam_ce_o=1.0), frozenset(), epochs, "speech")


RECIPES = {
    "scratch": ("scratch",),
    "step3": ("stage3",),
    "steps13": ("stage1", "stage3"),
    "steps123": ("stage1", "stage2", "stage3"),
}


@dataclass
class TrainerConfig:
    batch_frames: int = 800
    warmup: int = 300
    lr_scale: float = 1.0
    avg_last: int = 3
    epochs_stage1: int = 200
    epochs_stage2: int = 100
    epochs_stage3: int = 100

    def plans_for(self, recipe: str) -> list[StagePlan]:
        if recipe not in RECIPES:
            raise ValueError(f"unknown recipe {recipe!r}; pick from {sorted(RECIPES)}")
        makers = {"scratch": lambda: scratch(self.epochs_stage2),
                  "stage1": lambda: stage1(self.epochs_stage1),
                  "stage2": lambda: stage2(self.epochs_stage2),
                  "stage3": lambda: stage3(self.epochs_stage3)}
        return [makers[name]() for name in RECIPES[recipe]]


class NoamSchedule:
    """Linear warmup to a peak, then inverse square-root decay."""

    def __init__(self, d: int, warmup: int, scale: float = 1.0):
        if warmup < 1:
            raise ValueError("warmup must be >= 1")
        self.base = scale / math.sqrt(d)
        self.warmup = warmup

    def __call__(self, step: int) -> float:
        return self.base * min(step ** -0.5, step * self.warmup ** -1.5)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr_fn,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.lr_fn = lr_fn
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, frozen: frozenset[str] = frozenset()) -> None:
        self.step_count += 1
        lr = self.lr_fn(self.step_count)
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None or name in frozen:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _utterance_parts(model: LaNat, utt: Utterance, plan: StagePlan, rng) -> dict:
    parts: dict[str, Tensor] = {}
    speech_out = text_out = None
    if "speech" in plan.data_mode:
        speech_out = model.forward_speech(utt.frames, utt.tokens, rng=rng)
        parts["ctc"] = ctc_loss(speech_out.ctc_log_probs, utt.tokens)
        parts["ce_o"] = cross_entropy_tokens(speech_out.asr_logits,
                                             [y - 1 for y in utt.tokens])
    if "text" in plan.data_mode:
        text_out = model.forward_text(utt.tokens, rng=rng)
        parts["ce_y"] = cross_entropy_tokens(text_out.recon_logits,
                                             [y - 1 for y in utt.tokens])
    if speech_out is not None and text_out is not None:
        parts["cont"] = contrastive_loss(speech_out.h_com, text_out.h_com,
                                         model.config.tau)
    return parts


def _check_grads_finite(model: LaNat, where: str) -> None:
    for name, p in model.params.items():
        if p.grad is not None and not math.isfinite(float(p.grad.sum())):
            raise TrainingDiverged(f"non-finite gradient in {name} at {where}; "
                                   "parameters left at the last good step")


def train_stage(model: LaNat, plan: StagePlan, corpus: list[Utterance], seed: int,
                cfg: TrainerConfig | None = None,
                snapshots: deque | None = None) -> list[tuple]:
    """Run one stage; returns loss-curve rows (stage, epoch, name, value).

    ``snapshots`` (if given) receives a {name: array} copy after each epoch;
    use a bounded deque to keep only the last few for averaging.
    """
    if not corpus:
        raise ValueError("empty corpus")
    cfg = cfg or TrainerConfig()
    before = {name: model.params[name].data.tobytes() for name in plan.frozen}
    opt = Adam(model.params, NoamSchedule(model.config.d, cfg.warmup, cfg.lr_scale))
    dropout_rng = (np.random.default_rng([seed, plan.stage])
                   if model.config.dropout > 0 else None)
    rows: list[tuple] = []

    for epoch in range(plan.epochs):
        sums: dict[str, float] = {}
        count = 0
        for batch in batch_iter(corpus, cfg.batch_frames, seed, epoch):
            model.zero_grad()
            inv = 1.0 / len(batch)
            for utt in batch:
                try:
                    parts = _utterance_parts(model, utt, plan, dropout_rng)
                    loss = composite_loss(parts, plan.weights)
                    (loss * inv).backward()
                except NumericsError as err:
                    raise TrainingDiverged(
                        f"non-finite value on {utt.uid} "
                        f"(stage {plan.stage}, epoch {epoch}): {err}") from err
                for name, part in parts.items():
                    sums[name] = sums.get(name, 0.0) + part.item()
                sums["total"] = sums.get("total", 0.0) + loss.item()
                count += 1
            _check_grads_finite(model, f"stage {plan.stage}, epoch {epoch}")
            opt.step(plan.frozen)
        for name in sorted(sums):
            rows.append((plan.stage, epoch, name, sums[name] / count))
        if snapshots is not None:
            snapshots.append({k: p.data.copy() for k, p in model.params.items()})

    for name in plan.frozen:
        assert model.params[name].data.tobytes() == before[name], \
            f"frozen parameter {name} changed"
    return rows


def average_arrays(snapshots) -> dict[str, np.ndarray]:
    snapshots = list(snapshots)
    if not snapshots:
        raise ValueError("nothing to average")
    out = {}
    for name in snapshots[0]:
        out[name] = sum(s[name] for s in snapshots) / len(snapshots)
    return out


def average_checkpoints(paths) -> LaNat:
    """Elementwise mean of saved models; configs must agree."""
    paths = list(paths)
    if not paths:
        raise ValueError("no checkpoints given")
    config_dict, _, arrays = read_arrays(paths[0])
    stacks = {name: [arr] for name, arr in arrays.items()}
    for path in paths[1:]:
        other_config, _, other = read_arrays(path)
        if other_config != config_dict:
            raise CheckpointError(f"{path}: config differs from {paths[0]}")
        for name, arr in other.items():
            stacks[name].append(arr)
    model = LaNat(LaNatConfig.from_dict(config_dict))
    for name, p in model.params.items():
        p.data = sum(stacks[name]) / len(paths)
    return model


def run_schedule(model: LaNat, recipe: str, corpus: list[Utterance], seed: int,
                 cfg: TrainerConfig | None = None) -> tuple[list[tuple], list[int]]:
    """Run a recipe's stages in order; average the final stage's last epochs.

    Returns (loss-curve rows, list of stage ids that ran).
    """
    cfg = cfg or TrainerConfig()
    plans = cfg.plans_for(recipe)
    rows: list[tuple] = []
    ran: list[int] = []
    for i, plan in enumerate(plans):
        last = i == len(plans) - 1
        snaps: deque | None = deque(maxlen=cfg.avg_last) if last else None
        rows.extend(train_stage(model, plan, corpus, seed, cfg, snapshots=snaps))
        ran.append(plan.stage)
        if last and snaps:
            for name, arr in average_arrays(snaps).items():
                model.params[name].data = arr
    return rows, ran


def evaluate(model: LaNat, corpus: list[Utterance]) -> tuple[float, list[tuple]]:
    """Corpus CER (total edits over total reference length) plus per-utterance rows."""
    if not corpus:
        raise ValueError("empty corpus")
    rows = []
    edits_total = 0
    ref_total = 0
    for utt in corpus:
        hyp = model.decode_nar(utt.frames)
        edits = edit_distance(hyp, utt.tokens)
        edits_total += edits
        ref_total += len(utt.tokens)
        rows.append((utt.uid,
                     " ".join(map(str, utt.tokens)),
                     " ".join(map(str, hyp)),
                     edits,
                     cer(hyp, utt.tokens)))
    return edits_total / ref_total, rows
