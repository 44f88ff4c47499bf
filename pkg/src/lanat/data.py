"""Synthetic corpus: tokens become noisy runs of per-token prototype frames.

Token sequences come from a seeded Markov bigram chain started at its
stationary distribution, so the text has learnable structure. Every
utterance is guaranteed decodable: the subsampled frame count covers the
target's minimum CTC path length (durations redrawn until it does).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctc import min_frames
from .nn import subsampled_length


@dataclass
class SyntheticSpec:
    vocab: int = 16
    feat_dim: int = 20
    d_min: int = 3
    d_max: int = 6
    noise: float = 0.3
    len_min: int = 4
    len_max: int = 12
    n_train: int = 300
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.d_min < 1 or self.d_max < self.d_min:
            raise ValueError(f"bad duration range [{self.d_min}, {self.d_max}]")
        if self.len_min < 1 or self.len_max < self.len_min:
            raise ValueError(f"bad length range [{self.len_min}, {self.len_max}]")
        if self.vocab < 2:
            raise ValueError("need at least 2 tokens")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("corpus sizes out of range")
        # a repeat-free length-L target needs 4L-3 raw frames after the two
        # stride-2 layers; durations can only reach d_max * L
        if self.d_max < 4:
            cap = {1: 1, 2: 1, 3: 3}[self.d_max]
            if self.len_min > cap:
                raise ValueError(f"d_max={self.d_max} cannot cover the 4x "
                                 f"subsampling factor at lengths >= {self.len_min}")


@dataclass
class Utterance:
    uid: str
    frames: np.ndarray
    tokens: list[int]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


class BigramChain:
    """Markov chain over 1..V started at its stationary distribution."""

    def __init__(self, vocab: int, rng: np.random.Generator):
        # A high power sharpens each row to a handful of likely successors
        # (about 2.2 bits of conditional entropy at V=16), giving sentences
        # real lexical structure while keeping every token reachable. The
        # damped diagonal keeps adjacent repeats rare enough that the
        # duration budget can always cover the blank frames they require.
        raw = rng.random((vocab, vocab)) ** 10
        raw[np.diag_indices(vocab)] *= 0.1
        self.trans = raw / raw.sum(axis=1, keepdims=True)
        pi = np.full(vocab, 1.0 / vocab)
        for _ in range(200):
            pi = pi @ self.trans
        self.stationary = pi / pi.sum()

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        seq = [int(rng.choice(len(self.stationary), p=self.stationary)) + 1]
        while len(seq) < length:
            seq.append(int(rng.choice(len(self.stationary), p=self.trans[seq[-1] - 1])) + 1)
        return seq


def _draw_durations(tokens, spec: SyntheticSpec, rng) -> np.ndarray:
    """Per-token frame counts; redrawn until the utterance stays decodable."""
    need = max(4, 4 * min_frames(tokens) - 3)
    for _ in range(200):
        durations = rng.integers(spec.d_min, spec.d_max + 1, size=len(tokens))
        if durations.sum() >= need:
            return durations
    raise ValueError(f"cannot reach {need} frames with durations "
                     f"[{spec.d_min}, {spec.d_max}] for {len(tokens)} tokens")


def token_prototypes(rng: np.random.Generator, vocab: int, feat_dim: int) -> np.ndarray:
    """Fixed random prototype frame per token, orthogonalized when room allows.

    Subsampling averages frames across token boundaries; with orthogonal
    prototypes the average still projects cleanly onto each token, so short
    tokens stay recoverable.  Rows keep norm sqrt(feat_dim), the expected
    norm of the raw draw, leaving the noise-to-signal ratio unchanged.
    """
    raw = rng.normal(size=(vocab, feat_dim))
    if vocab > feat_dim:
        return raw
    q, _ = np.linalg.qr(raw.T)
    return q.T * np.sqrt(feat_dim)


def generate_corpus(spec: SyntheticSpec) -> tuple[list[Utterance], list[Utterance]]:
    """Seed-determined (train, test) split; same spec gives identical bytes."""
    rng = np.random.default_rng(spec.seed)
    prototypes = token_prototypes(rng, spec.vocab, spec.feat_dim)
    chain = BigramChain(spec.vocab, rng)

    def make(uid: str) -> Utterance:
        for _ in range(200):
            length = int(rng.integers(spec.len_min, spec.len_max + 1))
            tokens = chain.sample(length, rng)
            # Leave the duration draw slack beyond the bare minimum, or the
            # redraw loop below would have to hit a near-maximal sum.
            slack = max(0, spec.d_max - spec.d_min - 1) * length // 2
            if 4 * min_frames(tokens) - 3 <= spec.d_max * length - slack:
                break
        else:
            raise ValueError("could not draw a feasible token sequence")
        durations = _draw_durations(tokens, spec, rng)
        frames = np.repeat(prototypes[np.asarray(tokens) - 1], durations, axis=0)
        if spec.noise > 0:
            frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)
        t_sub = subsampled_length(frames.shape[0])
        assert t_sub >= min_frames(tokens), "generation produced an undecodable utterance"
        return Utterance(uid=uid, frames=frames, tokens=tokens)

    train = [make(f"train-{i:04d}") for i in range(spec.n_train)]
    test = [make(f"test-{i:04d}") for i in range(spec.n_test)]
    return train, test


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def cer(hyp, ref) -> float:
    """Edit distance normalized by reference length."""
    ref = list(ref)
    if not ref:
        raise ValueError("empty reference")
    return edit_distance(hyp, ref) / len(ref)


def batch_iter(corpus: list[Utterance], frame_budget: int, seed: int, epoch: int):
    """Shuffled batches capped by total frame count; order fixed by (seed, epoch)."""
    if not corpus:
        raise ValueError("empty corpus")
    too_big = [u.uid for u in corpus if u.n_frames > frame_budget]
    if too_big:
        raise ValueError(f"utterance {too_big[0]} alone exceeds the "
                         f"{frame_budget}-frame budget")
    order = np.random.default_rng([seed, epoch]).permutation(len(corpus))
    batch: list[Utterance] = []
    used = 0
    for idx in order:
        utt = corpus[int(idx)]
        if used + utt.n_frames > frame_budget and batch:
            yield batch
            batch, used = [], 0
        batch.append(utt)
        used += utt.n_frames
    if batch:
        yield batch


def save_corpus(path, utterances: list[Utterance]) -> None:
    """One line per utterance; floats as shortest round-trip decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        for u in utterances:
            t, f = u.frames.shape
            toks = " ".join(str(y) for y in u.tokens)
            vals = " ".join(repr(float(x)) for x in u.frames.reshape(-1))
            fh.write(f"{u.uid}\t{toks}\t{t}\t{f}\t{vals}\n")


def load_corpus(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"line {line_no}: expected 5 tab-separated fields")
            uid, toks, t, f, vals = parts
            frames = np.array([float(x) for x in vals.split(" ")])
            frames = frames.reshape(int(t), int(f))
            out.append(Utterance(uid=uid, frames=frames,
                                 tokens=[int(y) for y in toks.split(" ")]))
    return out
