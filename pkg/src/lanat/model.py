"""The lexical-aligned non-autoregressive recognizer.

Pipeline: conv-subsampled acoustic encoder with a CTC head, a shared
encoder that runs identical parameters over speech or text features and
compresses either into M memory-slot vectors, and a shared decoder whose
positional queries attend to [fine features | slot vectors] under a
fusion mask derived from forced alignment. An autoregressive decoder over
the same acoustic features exists only as a latency baseline.

Token ids are 1..V everywhere; 0 is the CTC blank. Logit matrices have V
columns, column j scoring token j+1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import ctc as ctc_mod
from .autodiff import Tensor, no_grad
from .nn import (
    AttentionConfig,
    ConvSubsampler,
    MultiHeadAttention,
    ParamStore,
    TransformerLayer,
    additive_mask,
    sinusoidal_pe,
)

AR_EOS_COLUMN = 0  # column 0 of the baseline's output logits means "stop"


@dataclass
class LaNatConfig:
    """Hyper-parameters; defaults are the desk-scale setup.

    ``base_paper`` gives the full-size preset the latency benchmark uses.
    """

    n_a: int = 2
    n_b: int = 2
    n_c: int = 2
    n_d: int = 1
    n_e: int = 1
    d: int = 64
    heads: int = 4
    ffn_dim: int = 256
    m_slots: int = 8
    vocab: int = 16
    tau: float = 0.1
    # At desk scale a token often spans a single subsampled frame, so any
    # lookahead puts the next token inside the allowed window and the decoder
    # reads the wrong segment.  Full-size presets can afford lookahead >= 1.
    lookahead: int = 0
    feat_dim: int = 20
    conv_channels: int = 16
    dropout: float = 0.0
    trainable_query_pe: bool = False
    query_pe_len: int = 64
    n_ar_dec: int = 6

    def __post_init__(self):
        counts = {k: getattr(self, k) for k in
                  ("n_a", "n_b", "n_c", "n_d", "n_e", "m_slots", "vocab", "n_ar_dec")}
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lookahead < 0:
            raise ValueError("lookahead must be >= 0")
        AttentionConfig(self.d, self.heads, self.ffn_dim, self.dropout)

    @classmethod
    def base_paper(cls) -> "LaNatConfig":
        return cls(n_a=6, n_b=6, n_c=5, n_d=2, n_e=4, d=256, heads=8,
                   ffn_dim=2048, conv_channels=256, dropout=0.1, lookahead=1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LaNatConfig":
        return cls(**data)


@dataclass
class SpeechForwardOutput:
    ctc_log_probs: Tensor
    asr_logits: Tensor
    h_com: Tensor
    h_se: Tensor


@dataclass
class TextForwardOutput:
    recon_logits: Tensor
    h_com: Tensor
    h_se: Tensor


class ArDecoderLayer:
    """Causal self-attention, then cross-attention + feed-forward."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig):
        self.ln_g = store.vector(f"{prefix}.self_ln.gain", cfg.d, 1.0)
        self.ln_b = store.vector(f"{prefix}.self_ln.bias", cfg.d)
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self", cfg)
        self.cross = TransformerLayer(store, f"{prefix}.cross", cfg)

    def __call__(self, x: Tensor, enc: Tensor, causal_add: np.ndarray) -> Tensor:
        xn = ad.layer_norm(x, self.ln_g, self.ln_b)
        x = x + self.self_attn(xn, xn, causal_add)
        return self.cross(x, enc)


class LaNat:
    """Owns every parameter (in a name-keyed store) and all forward paths."""

    def __init__(self, config: LaNatConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore(np.random.default_rng(seed))
        cfg = AttentionConfig(config.d, config.heads, config.ffn_dim, config.dropout)
        d, v, m = config.d, config.vocab, config.m_slots
        store = self.store

        self.subsampler = ConvSubsampler(store, "acoustic.subsample",
                                         config.feat_dim, d, config.conv_channels)
        self.acoustic = [TransformerLayer(store, f"acoustic.block{i}", cfg)
                         for i in range(config.n_a)]
        self.ctc_ln_g = store.vector("acoustic.ctc_ln.gain", d, 1.0)
        self.ctc_ln_b = store.vector("acoustic.ctc_ln.bias", d)
        self.ctc_w = store.matrix("acoustic.ctc_proj.w", d, v + 1)
        self.ctc_b = store.vector("acoustic.ctc_proj.b", v + 1)

        # row 0 of the token table is never looked up (0 is the blank)
        self.token_table = store.normal("text.table", (v + 1, d), scale=1.0 / math.sqrt(d))

        self.memory = store.normal("shared.memory", (m, d), scale=1.0 / math.sqrt(d))
        self.shared_self = [TransformerLayer(store, f"shared.block{i}", cfg)
                            for i in range(config.n_b)]
        self.shared_ln_g = store.vector("shared.out_ln.gain", d, 1.0)
        self.shared_ln_b = store.vector("shared.out_ln.bias", d)
        self.memory_layers = [TransformerLayer(store, f"shared.memory_block{i}", cfg)
                              for i in range(1 + config.n_c)]

        self.dec_cross = [TransformerLayer(store, f"decoder.cross{i}", cfg)
                          for i in range(config.n_d)]
        self.dec_self = [TransformerLayer(store, f"decoder.self{i}", cfg)
                         for i in range(config.n_e)]
        self.dec_ln_g = store.vector("decoder.out_ln.gain", d, 1.0)
        self.dec_ln_b = store.vector("decoder.out_ln.bias", d)
        self.dec_w = store.matrix("decoder.proj.w", d, v)
        self.dec_b = store.vector("decoder.proj.b", v)
        if config.trainable_query_pe:
            self.query_pe = store.normal("decoder.query_pe",
                                         (config.query_pe_len, d), scale=0.02)
        else:
            self.query_pe = None

        # latency baseline: its own table (ids 1..V plus BOS=V+1, EOS=V+2)
        # and a stack of causal decoder layers over the acoustic features
        self.ar_table = store.normal("ar.table", (v + 3, d), scale=1.0 / math.sqrt(d))
        self.ar_layers = [ArDecoderLayer(store, f"ar.block{i}", cfg)
                          for i in range(config.n_ar_dec)]
        self.ar_ln_g = store.vector("ar.out_ln.gain", d, 1.0)
        self.ar_ln_b = store.vector("ar.out_ln.bias", d)
        self.ar_w = store.matrix("ar.proj.w", d, v + 1)
        self.ar_b = store.vector("ar.proj.b", v + 1)

        self.pass_counts = {"acoustic": 0, "decoder": 0, "ar_steps": 0}

    # -- parameter access ----------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset_pass_counts(self) -> None:
        for k in self.pass_counts:
            self.pass_counts[k] = 0

    # -- encoder paths -------------------------------------------------

    def acoustic_encode(self, frames, rng=None) -> tuple[Tensor, Tensor]:
        """Frames (T', F) to features H (T, d) and a CTC log-posterior."""
        self.pass_counts["acoustic"] += 1
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        x = self.subsampler(x) * math.sqrt(self.config.d)
        x = x + Tensor(sinusoidal_pe(x.shape[0], self.config.d))
        for layer in self.acoustic:
            x = layer(x, dropout_rng=rng)
        normed = ad.layer_norm(x, self.ctc_ln_g, self.ctc_ln_b)
        log_probs = ad.log_softmax(ad.linear(normed, self.ctc_w, self.ctc_b), axis=1)
        return x, log_probs

    def text_embed(self, tokens) -> Tensor:
        tokens = [int(y) for y in tokens]
        if not tokens:
            raise ValueError("empty token sequence")
        if any(y < 1 or y > self.config.vocab for y in tokens):
            raise ValueError(f"token ids must be in 1..{self.config.vocab}, got {tokens}")
        emb = ad.embedding_lookup(self.token_table, np.asarray(tokens))
        scaled = emb * math.sqrt(self.config.d)
        return scaled + Tensor(sinusoidal_pe(len(tokens), self.config.d))

    def shared_encode(self, h: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        """Modality-agnostic: (X, d) in, fine (X, d) and slots (M, d) out."""
        x = h
        for layer in self.shared_self:
            x = layer(x, dropout_rng=rng)
        h_se = ad.layer_norm(x, self.shared_ln_g, self.shared_ln_b)
        q = self.memory
        for layer in self.memory_layers:
            q = layer(q, kv=h_se, dropout_rng=rng)
        return h_se, q

    # -- decoder -------------------------------------------------------

    def _queries(self, n: int) -> Tensor:
        if self.query_pe is not None:
            if n > self.config.query_pe_len:
                raise ValueError(f"query table holds {self.config.query_pe_len} "
                                 f"positions, need {n}")
            return ad.take_rows(self.query_pe, np.arange(n))
        return Tensor(sinusoidal_pe(n, self.config.d))

    def shared_decode(self, fine: Tensor, com: Tensor, n_out: int,
                      mask: np.ndarray, rng=None) -> Tensor:
        self.pass_counts["decoder"] += 1
        if mask.shape != (n_out, fine.shape[0] + com.shape[0]):
            raise ValueError(f"mask shape {mask.shape} does not cover "
                             f"{n_out} x {fine.shape[0] + com.shape[0]}")
        mask_add = additive_mask(mask)
        kv = ad.concat([fine, com], axis=0)
        q = self._queries(n_out)
        for layer in self.dec_cross:
            q = layer(q, kv, mask_add, dropout_rng=rng)
        for layer in self.dec_self:
            q = layer(q, dropout_rng=rng)
        normed = ad.layer_norm(q, self.dec_ln_g, self.dec_ln_b)
        return ad.linear(normed, self.dec_w, self.dec_b)

    # -- training forwards ---------------------------------------------

    def _fusion_mask(self, log_probs: Tensor, target) -> np.ndarray:
        align = ctc_mod.ctc_forced_align(log_probs.data, target)
        trigger = ctc_mod.build_trigger_mask(align, log_probs.shape[0],
                                             self.config.lookahead)
        return ctc_mod.build_fusion_mask(trigger, self.config.m_slots)

    def forward_speech(self, frames, target, rng=None) -> SpeechForwardOutput:
        h, log_probs = self.acoustic_encode(frames, rng=rng)
        h_se, h_com = self.shared_encode(h, rng=rng)
        mask = self._fusion_mask(log_probs, target)
        logits = self.shared_decode(h_se, h_com, len(target), mask, rng=rng)
        return SpeechForwardOutput(ctc_log_probs=log_probs, asr_logits=logits,
                                   h_com=h_com, h_se=h_se)

    def forward_text(self, tokens, rng=None) -> TextForwardOutput:
        h = self.text_embed(tokens)
        h_se, h_com = self.shared_encode(h, rng=rng)
        n = len(tokens)
        mask = np.ones((n, n + self.config.m_slots), dtype=bool)
        logits = self.shared_decode(h_se, h_com, n, mask, rng=rng)
        return TextForwardOutput(recon_logits=logits, h_com=h_com, h_se=h_se)

    # -- inference -----------------------------------------------------

    def decode_nar(self, frames) -> list[int]:
        """One acoustic pass, one decoder pass, all positions in parallel."""
        with no_grad():
            h, log_probs = self.acoustic_encode(frames)
            hyp = ctc_mod.ctc_greedy_decode(log_probs)
            if not hyp:
                return []
            mask = self._fusion_mask(log_probs, hyp)
            h_se, h_com = self.shared_encode(h)
            logits = self.shared_decode(h_se, h_com, len(hyp), mask)
            return [int(j) + 1 for j in logits.data.argmax(axis=1)]

    def decode_ar_baseline(self, frames, max_len: int = 50) -> list[int]:
        """Greedy one-token-at-a-time decoding; for speed comparison only."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        v, d = self.config.vocab, self.config.d
        bos = v + 1
        with no_grad():
            h, _ = self.acoustic_encode(frames)
            out: list[int] = []
            for _ in range(max_len):
                self.pass_counts["ar_steps"] += 1
                prefix = np.asarray([bos] + out)
                n = len(prefix)
                x = ad.take_rows(self.ar_table, prefix) * math.sqrt(d)
                x = x + Tensor(sinusoidal_pe(n, d))
                causal = additive_mask(np.tril(np.ones((n, n), dtype=bool)))
                for layer in self.ar_layers:
                    x = layer(x, h, causal)
                normed = ad.layer_norm(x, self.ar_ln_g, self.ar_ln_b)
                last = ad.take_rows(normed, np.asarray([n - 1]))
                logits = ad.linear(last, self.ar_w, self.ar_b)
                nxt = int(logits.data.argmax())
                if nxt == AR_EOS_COLUMN:
                    break
                out.append(nxt)
            return out
