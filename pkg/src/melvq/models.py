"""Three masked-pretrained transformer classifiers over one shared encoder.

SpectroFormer consumes Mel spectrogram frames (Huber-regression pretraining on
zeroed spans), TokenFormer consumes VQ token ids (BERT-style hidden-token
prediction with a raised mask rate), and CodebookFormer consumes gathered
codebook vectors (same positional selection, rows zeroed instead of a [MASK]
token, cross-entropy on the underlying token ids).

The encoder is pre-LN, fully bidirectional, with learned positions; padding
is excluded from attention, pooling, and every loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .numerics import (
    Tensor,
    cross_entropy_loss,
    dropout,
    embedding,
    gelu,
    huber_loss,
    layer_norm,
    matmul,
    reshape,
    softmax,
    tmean,
    transpose,
    tsum,
)


class ModelError(Exception):
    pass


class Variant(str, Enum):
    SPECTRO = "spectro"
    TOKEN = "token"
    CODEBOOK = "codebook"


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 512
    dropout: float = 0.0
    n_classes: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ModelError("need at least one layer")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class MaskConfig:
    token_mask_prob: float = 0.30
    replace_mask: float = 0.80   # of selected: [MASK] id
    replace_random: float = 0.10  # of selected: random id; remainder kept
    spectro_span_len: int = 8
    spectro_mask_pcts: tuple = (0.15, 0.30, 0.45)

    def __post_init__(self):
        if not (0.0 <= self.token_mask_prob < 1.0):
            raise ModelError("token_mask_prob must be in [0, 1)")
        if any(p <= 0.0 or p >= 1.0 for p in self.spectro_mask_pcts):
            raise ModelError("spectrogram mask percentages must be in (0, 1)")
        if self.replace_mask + self.replace_random > 1.0:
            raise ModelError("token replacement split exceeds 1")
        if self.spectro_span_len < 1:
            raise ModelError("spectro_span_len must be >= 1")


@dataclass(frozen=True)
class VariantSpec:
    """Front-end choice plus its input width (86 Mel bands, token vocab, or code_dim).

    ``target_vocab`` is the pretraining prediction vocabulary: token ids for
    TOKEN (defaults to input_width) and CODEBOOK (must be given), None for
    SPECTRO which regresses frames.
    """
    kind: Variant
    input_width: int
    target_vocab: Optional[int] = None

    def __post_init__(self):
        if self.kind is Variant.TOKEN and self.target_vocab is None:
            object.__setattr__(self, "target_vocab", self.input_width)
        if self.kind is Variant.CODEBOOK and self.target_vocab is None:
            raise ModelError("CodebookFormer needs target_vocab (the token vocabulary)")


@dataclass
class MaskedBatch:
    inputs: np.ndarray    # masked model input (ids or rows)
    targets: np.ndarray   # original ids (token/codebook) or original frames (spectro)
    mask: np.ndarray      # (B, L) bool, True where supervised
    pad: np.ndarray       # (B, L) bool, True where real content


class GenreTransformer:
    """Shared 4-layer bidirectional encoder with a variant-specific front-end."""

    def __init__(self, variant: VariantSpec, config: TransformerConfig,
                 rng: np.random.Generator, dtype=np.float64):
        self.variant = variant
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        d = config.d_model

        def param(name, shape, std=0.02):
            init = rng.normal(0.0, std, size=shape) if std else np.zeros(shape)
            t = Tensor(init, requires_grad=True, dtype=dtype, name=name)
            self.params[name] = t
            return t

        if variant.kind is Variant.TOKEN:
            # two extra rows: [MASK] = vocab, [PAD] = vocab + 1
            self.vocab_size = variant.input_width
            self.mask_id = self.vocab_size
            self.pad_id = self.vocab_size + 1
            param("embed.tok", (self.vocab_size + 2, d))
        else:
            self.vocab_size = None
            param("embed.in.w", (variant.input_width, d))
            param("embed.in.b", (d,), std=0)
        param("embed.pos", (config.max_seq_len, d))

        for i in range(config.n_layers):
            p = f"layer{i}"
            param(f"{p}.ln1.g", (d,), std=0)
            self.params[f"{p}.ln1.g"].data[:] = 1.0
            param(f"{p}.ln1.b", (d,), std=0)
            for nm in ("q", "k", "v", "o"):
                param(f"{p}.attn.{nm}.w", (d, d))
                param(f"{p}.attn.{nm}.b", (d,), std=0)
            param(f"{p}.ln2.g", (d,), std=0)
            self.params[f"{p}.ln2.g"].data[:] = 1.0
            param(f"{p}.ln2.b", (d,), std=0)
            param(f"{p}.ffn.w1", (d, d * config.ffn_mult))
            param(f"{p}.ffn.b1", (d * config.ffn_mult,), std=0)
            param(f"{p}.ffn.w2", (d * config.ffn_mult, d))
            param(f"{p}.ffn.b2", (d,), std=0)
        param("ln_f.g", (d,), std=0)
        self.params["ln_f.g"].data[:] = 1.0
        param("ln_f.b", (d,), std=0)

        out_width = (variant.input_width if variant.kind is Variant.SPECTRO
                     else variant.target_vocab)
        param("head.pretrain.w", (d, out_width))
        param("head.pretrain.b", (out_width,), std=0)
        param("head.cls.w", (d, config.n_classes))
        param("head.cls.b", (config.n_classes,), std=0)

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def embed_input(self, inputs: np.ndarray, pad: np.ndarray) -> Tensor:
        """Masked inputs -> (B, L, d_model) embeddings with learned positions."""
        L = inputs.shape[1]
        if L > self.config.max_seq_len:
            raise ModelError(
                f"sequence length {L} exceeds max_seq_len {self.config.max_seq_len}; "
                "crop the sequence first (training uses random windows, eval center crops)"
            )
        if self.variant.kind is Variant.TOKEN:
            if inputs.max(initial=0) >= self.pad_id + 1:
                raise ModelError(f"token id out of range [0, {self.pad_id}]")
            emb = embedding(self.params["embed.tok"], inputs.astype(np.int64))
        else:
            if inputs.shape[-1] != self.variant.input_width:
                raise ModelError(
                    f"{self.variant.kind.value} rows must be {self.variant.input_width}-wide, "
                    f"got {inputs.shape[-1]}")
            x = Tensor(inputs, dtype=self.dtype)
            emb = matmul(x, self.params["embed.in.w"]) + self.params["embed.in.b"]
        pos = embedding(self.params["embed.pos"], np.arange(L))
        return emb + pos

    def encoder_forward(self, h: Tensor, pad: np.ndarray,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
        """4x (pre-LN self-attention + FFN); pad keys are excluded from attention."""
        cfg = self.config
        if cfg.dropout > 0 and rng is None:
            raise ModelError("dropout requires an explicit rng")
        b, L, d = h.shape
        nh, dh = cfg.n_heads, cfg.d_head
        neg = np.where(pad, 0.0, -1e9).astype(self.dtype)[:, None, None, :]
        attn_bias = Tensor(neg, dtype=self.dtype)
        scale = 1.0 / np.sqrt(dh)

        for i in range(cfg.n_layers):
            p = f"layer{i}"
            x = layer_norm(h, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])

            def proj(nm):
                y = matmul(x, self.params[f"{p}.attn.{nm}.w"]) + self.params[f"{p}.attn.{nm}.b"]
                return transpose(reshape(y, (b, L, nh, dh)), (0, 2, 1, 3))

            q, k, v = proj("q"), proj("k"), proj("v")
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale + attn_bias
            probs = softmax(scores, axis=-1)
            ctx = matmul(probs, v)
            ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, L, d))
            ctx = matmul(ctx, self.params[f"{p}.attn.o.w"]) + self.params[f"{p}.attn.o.b"]
            if cfg.dropout > 0:
                ctx = dropout(ctx, cfg.dropout, rng)
            h = h + ctx

            x = layer_norm(h, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            y = gelu(matmul(x, self.params[f"{p}.ffn.w1"]) + self.params[f"{p}.ffn.b1"])
            y = matmul(y, self.params[f"{p}.ffn.w2"]) + self.params[f"{p}.ffn.b2"]
            if cfg.dropout > 0:
                y = dropout(y, cfg.dropout, rng)
            h = h + y

        return layer_norm(h, self.params["ln_f.g"], self.params["ln_f.b"])

    def forward_hidden(self, inputs: np.ndarray, pad: np.ndarray,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.encoder_forward(self.embed_input(inputs, pad), pad, rng)

    def pretrain_predictions(self, hidden: Tensor) -> Tensor:
        """Token/codebook: (B, L, vocab) logits. Spectro: (B, L, n_mels) frames."""
        return matmul(hidden, self.params["head.pretrain.w"]) + self.params["head.pretrain.b"]

    def classify(self, hidden: Tensor, pad: np.ndarray) -> Tensor:
        """Mean-pool non-pad positions, project to genre logits."""
        counts = pad.sum(axis=1)
        if np.any(counts == 0):
            raise ModelError("classify received an all-pad sequence")
        w = (pad / counts[:, None]).astype(self.dtype)[:, :, None]
        pooled = tsum(hidden * Tensor(w, dtype=self.dtype), axis=1)
        return matmul(pooled, self.params["head.cls.w"]) + self.params["head.cls.b"]


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def _select_positions(valid: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly round(prob * n_valid) positions, uniform without replacement.

    Exact-count selection keeps the realized fraction within rounding of the
    target, which iid Bernoulli draws cannot guarantee at +/-2 points for
    500-position sequences.
    """
    idx = np.flatnonzero(valid)
    n_sel = int(round(prob * idx.size))
    sel = np.zeros(valid.shape, dtype=bool)
    if n_sel:
        sel[rng.choice(idx, size=n_sel, replace=False)] = True
    return sel


def _select_spans(valid: np.ndarray, pct: float, span_len: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Non-overlapping spans of exactly span_len until ~pct of positions are covered."""
    n = int(valid.sum())
    sel = np.zeros(valid.shape, dtype=bool)
    if n < span_len:
        return sel
    n_spans = max(1, int(round(pct * n / span_len)))
    starts = rng.permutation(n - span_len + 1)
    taken = np.zeros(n, dtype=bool)
    placed = 0
    offset = int(np.flatnonzero(valid)[0])
    for s in starts:
        if taken[s:s + span_len].any():
            continue
        taken[s:s + span_len] = True
        sel[offset + s: offset + s + span_len] = True
        placed += 1
        if placed == n_spans:
            break
    return sel


def apply_pretrain_mask(variant: Variant, batch: dict, rng: np.random.Generator,
                        mask_config: MaskConfig, model: GenreTransformer) -> MaskedBatch:
    """Build the self-supervised batch for one variant.

    ``batch`` carries 'inputs' (ids or rows), 'pad', and for the codebook
    variant also 'token_ids' (targets). Selection happens per sequence over
    non-pad positions only.
    """
    pad = batch["pad"]
    inputs = batch["inputs"]
    B = pad.shape[0]

    if variant is Variant.SPECTRO:
        pct = float(rng.choice(np.asarray(mask_config.spectro_mask_pcts)))
        masked = inputs.copy()
        mask = np.zeros(pad.shape, dtype=bool)
        for i in range(B):
            mask[i] = _select_spans(pad[i], pct, mask_config.spectro_span_len, rng)
        masked[mask] = 0.0
        return MaskedBatch(masked, inputs, mask, pad)

    mask = np.zeros(pad.shape, dtype=bool)
    for i in range(B):
        mask[i] = _select_positions(pad[i], mask_config.token_mask_prob, rng)

    if variant is Variant.TOKEN:
        masked = inputs.copy()
        flat = np.flatnonzero(mask)
        u = rng.random(flat.size)
        rand_ids = rng.integers(0, model.vocab_size, size=flat.size)
        to_mask = flat[u < mask_config.replace_mask]
        to_rand = flat[(u >= mask_config.replace_mask)
                       & (u < mask_config.replace_mask + mask_config.replace_random)]
        masked.reshape(-1)[to_mask] = model.mask_id
        masked.reshape(-1)[to_rand] = rand_ids[(u >= mask_config.replace_mask)
                                               & (u < mask_config.replace_mask
                                                  + mask_config.replace_random)]
        # remaining selected positions keep their original id
        return MaskedBatch(masked, inputs, mask, pad)

    if variant is Variant.CODEBOOK:
        masked = inputs.copy()
        masked[mask] = 0.0  # rows replaced with zero instead of a [MASK] token
        return MaskedBatch(masked, batch["token_ids"], mask, pad)

    raise ModelError(f"unknown variant {variant}")


def pretrain_loss(variant: Variant, model: GenreTransformer, hidden: Tensor,
                  targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked-position-only objective: cross-entropy on token ids for
    Token/Codebook, Huber (delta 1) on normalized frames for Spectro."""
    if not mask.any():
        raise ModelError("no supervised positions (empty pretrain mask)")
    preds = model.pretrain_predictions(hidden)
    if variant is Variant.SPECTRO:
        return huber_loss(preds, Tensor(targets, dtype=model.dtype), delta=1.0, mask=mask)
    return cross_entropy_loss(preds, targets, mask=mask)
