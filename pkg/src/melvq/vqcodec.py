"""Trainable single-level VQ-VAE codec: strided residual conv encoder, nearest
codebook quantization with a straight-through gradient, transposed-conv
decoder, and binary token/codebook caches.

Temporal compression is a power of two; the encoder stacks log2(compression)
stride-2 stages so a clip of N samples maps to ceil(N / compression) tokens,
matching the spectrogram frame count at 128x.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import Tensor, conv1d, conv1d_transpose, embedding, gelu, reshape, tmean, transpose

TOKEN_CACHE_MAGIC = b"MELVQTOK"
TOKEN_CACHE_VERSION = 1
CODEBOOK_MAGIC = b"MELVQCBK"
CODEBOOK_VERSION = 1


class VqError(Exception):
    pass


@dataclass(frozen=True)
class VqVaeConfig:
    compression: int = 128
    vocab_size: int = 2048
    code_dim: int = 64
    channels: int = 32
    commitment_beta: float = 0.25

    def __post_init__(self):
        if self.compression < 2 or (self.compression & (self.compression - 1)) != 0:
            raise VqError(f"compression must be a power of two, got {self.compression}")
        if not (2 <= self.vocab_size <= 65536):
            raise VqError("vocab_size must fit u16 token ids (2..65536)")

    @property
    def n_stages(self) -> int:
        return int(self.compression).bit_length() - 1


@dataclass
class TokenSequence:
    tokens: np.ndarray  # int64 ids
    clip_id: str
    compression: int

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class CodebookSequence:
    vectors: np.ndarray  # (L, code_dim)
    clip_id: str
    compression: int


def nearest_code(latents: np.ndarray, codebook: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Argmin-L2 code id per latent row; ties resolve to the lowest index.

    Distances are true squared differences summed over the code dimension,
    row-independent, so the result is bit-identical to a per-row exhaustive
    scan regardless of chunking.
    """
    latents = np.asarray(latents, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    if latents.shape[-1] != codebook.shape[1]:
        raise VqError(f"latent dim {latents.shape[-1]} != code dim {codebook.shape[1]}")
    flat = latents.reshape(-1, codebook.shape[1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for lo in range(0, flat.shape[0], chunk):
        d = ((flat[lo:lo + chunk, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
        out[lo:lo + chunk] = np.argmin(d, axis=1)
    return out.reshape(latents.shape[:-1])


def codebook_stats(tokens: np.ndarray, vocab_size: int) -> dict:
    """Collapse diagnostics: code utilization and usage perplexity exp(H)."""
    tokens = np.asarray(tokens).reshape(-1)
    if tokens.size == 0:
        raise VqError("codebook_stats needs at least one token")
    counts = np.bincount(tokens, minlength=vocab_size).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return {
        "utilization": float((counts > 0).sum() / vocab_size),
        "perplexity": float(np.exp(entropy)),
    }


class VqVae:
    """Single-level VQ-VAE with a loss-learned codebook and dead-code reset."""

    def __init__(self, config: VqVaeConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        ch = config.channels

        def param(name, shape, std):
            t = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True,
                       dtype=dtype, name=name)
            self.params[name] = t
            return t

        for i in range(config.n_stages):
            cin = 1 if i == 0 else ch
            param(f"enc{i}.down.w", (ch, cin, 4), np.sqrt(2.0 / (cin * 4)))
            param(f"enc{i}.down.b", (ch,), 0.0)
            param(f"enc{i}.res.w1", (ch, ch, 3), np.sqrt(2.0 / (ch * 3)))
            param(f"enc{i}.res.b1", (ch,), 0.0)
            param(f"enc{i}.res.w2", (ch, ch, 1), np.sqrt(2.0 / ch))
            param(f"enc{i}.res.b2", (ch,), 0.0)
        param("enc_out.w", (config.code_dim, ch, 1), np.sqrt(1.0 / ch))
        param("enc_out.b", (config.code_dim,), 0.0)

        param("dec_in.w", (ch, config.code_dim, 1), np.sqrt(1.0 / config.code_dim))
        param("dec_in.b", (ch,), 0.0)
        for i in range(config.n_stages):
            param(f"dec{i}.res.w1", (ch, ch, 3), np.sqrt(2.0 / (ch * 3)))
            param(f"dec{i}.res.b1", (ch,), 0.0)
            param(f"dec{i}.res.w2", (ch, ch, 1), np.sqrt(2.0 / ch))
            param(f"dec{i}.res.b2", (ch,), 0.0)
            param(f"dec{i}.up.w", (ch, ch, 4), np.sqrt(2.0 / (ch * 4)))
            param(f"dec{i}.up.b", (ch,), 0.0)
        param("dec_out.w", (1, ch, 1), np.sqrt(1.0 / ch))
        param("dec_out.b", (1,), 0.0)

        param("codebook", (config.vocab_size, config.code_dim), 0.1)
        self.usage_counts = np.zeros(config.vocab_size, dtype=np.int64)

    @property
    def codebook(self) -> Tensor:
        return self.params["codebook"]

    def _res_block(self, x: Tensor, prefix: str) -> Tensor:
        h = conv1d(x, self.params[f"{prefix}.w1"], self.params[f"{prefix}.b1"], stride=1, pad=1)
        h = conv1d(gelu(h), self.params[f"{prefix}.w2"], self.params[f"{prefix}.b2"], stride=1, pad=0)
        return x + h

    def pad_samples(self, samples: np.ndarray) -> np.ndarray:
        """Right-pad with zeros to a multiple of the compression factor."""
        samples = np.asarray(samples, dtype=self.dtype)
        if samples.size == 0:
            raise VqError("cannot encode an empty clip")
        c = self.config.compression
        rem = (-len(samples)) % c
        if rem:
            samples = np.concatenate([samples, np.zeros(rem, dtype=self.dtype)])
        return samples

    def encode(self, batch: np.ndarray) -> Tensor:
        """(B, N) samples, N a compression multiple -> (B, L, code_dim) latents."""
        batch = np.asarray(batch, dtype=self.dtype)
        if batch.ndim == 1:
            batch = batch[None, :]
        if batch.shape[1] % self.config.compression:
            raise VqError("encode input must be padded to a compression multiple")
        h = Tensor(batch[:, None, :], dtype=self.dtype)
        for i in range(self.config.n_stages):
            h = conv1d(h, self.params[f"enc{i}.down.w"], self.params[f"enc{i}.down.b"],
                       stride=2, pad=1)
            h = self._res_block(gelu(h), f"enc{i}.res")
        h = conv1d(h, self.params["enc_out.w"], self.params["enc_out.b"], stride=1, pad=0)
        return transpose(h, (0, 2, 1))

    def quantize(self, latents: Tensor) -> tuple[np.ndarray, Tensor, Tensor]:
        """Nearest-code assignment with the straight-through gradient.

        Returns (token ids, gathered code rows e, quantized latents q) where
        q = z + sg(e - z): recon gradients copy onto the encoder path and the
        codebook learns only through its own loss term.
        """
        ids = nearest_code(latents.data, self.codebook.data)
        e = embedding(self.codebook, ids)
        q = latents + (e - latents).detach()
        return ids, e, q

    def decode(self, q: Tensor) -> Tensor:
        """(B, L, code_dim) quantized latents -> (B, L * compression) samples."""
        h = transpose(q, (0, 2, 1))
        h = conv1d(h, self.params["dec_in.w"], self.params["dec_in.b"], stride=1, pad=0)
        for i in range(self.config.n_stages):
            h = self._res_block(h, f"dec{i}.res")
            h = gelu(conv1d_transpose(h, self.params[f"dec{i}.up.w"],
                                      self.params[f"dec{i}.up.b"], stride=2, pad=1))
        h = conv1d(h, self.params["dec_out.w"], self.params["dec_out.b"], stride=1, pad=0)
        return reshape(h, (h.shape[0], h.shape[2]))

    def loss(self, batch: np.ndarray,
             frozen: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None) -> dict:
        """Reconstruction + codebook + commitment losses on padded samples.

        ``frozen=(ids0, z0, e0)`` swaps the loss for its linearization at the
        capture point: assignments fix to ids0, the straight-through offset
        fixes to e0 - z0, and every stop-gradient argument fixes to its
        captured constant. The linearization has the same value and the same
        tape gradient as the real loss at that point but is smooth, which is
        what lets central finite differences verify the gradient.
        """
        padded = np.stack([self.pad_samples(row) for row in np.atleast_2d(batch)])
        z = self.encode(padded)
        if frozen is None:
            ids, e, q = self.quantize(z)
            z_const = z.detach()
            e_const = e.detach()
        else:
            ids, z0, e0 = frozen
            e = embedding(self.codebook, ids)
            q = z + Tensor(e0 - z0, dtype=self.dtype)
            z_const = Tensor(z0, dtype=self.dtype)
            e_const = Tensor(e0, dtype=self.dtype)
        recon_full = self.decode(q)
        target = Tensor(padded, dtype=self.dtype)
        diff = recon_full - target
        recon = tmean(diff * diff)
        cb_diff = z_const - e
        codebook_loss = tmean(cb_diff * cb_diff)
        commit_diff = z - e_const
        commit = self.config.commitment_beta * tmean(commit_diff * commit_diff)
        total = recon + codebook_loss + commit
        return {"total": total, "recon": recon, "codebook": codebook_loss,
                "commit": commit, "ids": ids, "z": z, "q": q}

    def tokenize(self, samples: np.ndarray, clip_id: str = "") -> TokenSequence:
        """Full clip -> token ids of length ceil(len / compression). Pure."""
        padded = self.pad_samples(samples)
        z = self.encode(padded[None, :])
        ids = nearest_code(z.data, self.codebook.data)[0]
        return TokenSequence(ids, clip_id, self.config.compression)

    def gather_codes(self, tokens: TokenSequence) -> CodebookSequence:
        """Token ids -> exact codebook rows (bit-equal gather)."""
        return CodebookSequence(self.codebook.data[tokens.tokens].copy(),
                                tokens.clip_id, tokens.compression)

    def reconstruct(self, samples: np.ndarray) -> np.ndarray:
        """encode -> quantize -> decode, trimmed to the input length."""
        padded = self.pad_samples(samples)
        z = self.encode(padded[None, :])
        _, _, q = self.quantize(z)
        out = self.decode(q)
        return out.data[0, :len(np.asarray(samples))]

    def reset_dead_codes(self, latents: np.ndarray, used_since_reset: np.ndarray,
                         rng: np.random.Generator) -> int:
        """Reassign codes unused since the last reset to random encoder outputs.

        Called after the optimizer step so the triggering batch's tokens are
        unaffected. Returns the number of codes reset.
        """
        dead = np.flatnonzero(~used_since_reset)
        if dead.size == 0:
            return 0
        flat = np.asarray(latents, dtype=self.dtype).reshape(-1, self.config.code_dim)
        pick = rng.integers(0, flat.shape[0], size=dead.size)
        jitter = rng.normal(0.0, 1e-4, size=(dead.size, self.config.code_dim))
        self.codebook.data[dead] = flat[pick] + jitter
        return int(dead.size)


def token_length(num_samples: int, compression: int) -> int:
    return -(-num_samples // compression)


def voronoi_margin(latents: np.ndarray, codebook: np.ndarray) -> float:
    """Smallest gap between nearest and second-nearest squared code distances.

    Straight-through gradient checks are only meaningful when assignments
    cannot flip under the finite-difference perturbation; callers assert a
    margin before checking.
    """
    flat = np.asarray(latents, dtype=np.float64).reshape(-1, codebook.shape[1])
    d = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    d.sort(axis=1)
    return float((d[:, 1] - d[:, 0]).min())


# ---------------------------------------------------------------------------
# caches: tokens as u16 ids, codebook as float32 rows, all little-endian
# ---------------------------------------------------------------------------

def save_tokens(seq: TokenSequence, path: str | Path, vocab_size: int) -> None:
    if seq.tokens.size and int(seq.tokens.max()) >= vocab_size:
        raise VqError("token id exceeds vocab size")
    with open(path, "wb") as fh:
        fh.write(TOKEN_CACHE_MAGIC)
        fh.write(struct.pack("<III", TOKEN_CACHE_VERSION, seq.compression, vocab_size))
        fh.write(struct.pack("<I", len(seq.tokens)))
        fh.write(seq.tokens.astype("<u2").tobytes())


def load_tokens(path: str | Path, clip_id: str = "") -> tuple[TokenSequence, int]:
    """Returns (sequence, vocab_size recorded in the header)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:8] != TOKEN_CACHE_MAGIC:
        raise VqError(f"{path}: not a token cache file")
    version, compression, vocab = struct.unpack("<III", blob[8:20])
    if version != TOKEN_CACHE_VERSION:
        raise VqError(f"{path}: token cache version {version}, expected {TOKEN_CACHE_VERSION}")
    (n,) = struct.unpack("<I", blob[20:24])
    need = 24 + 2 * n
    if len(blob) != need:
        raise VqError(f"{path}: truncated token cache ({len(blob)} bytes, expected {need})")
    ids = np.frombuffer(blob[24:], dtype="<u2").astype(np.int64)
    return TokenSequence(ids, clip_id, compression), vocab


def save_codebook(codebook: np.ndarray, path: str | Path) -> None:
    vocab, dim = codebook.shape
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<III", CODEBOOK_VERSION, vocab, dim))
        fh.write(np.ascontiguousarray(codebook, dtype="<f4").tobytes())


def load_codebook(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != CODEBOOK_MAGIC:
        raise VqError(f"{path}: not a codebook file")
    version, vocab, dim = struct.unpack("<III", blob[8:20])
    if version != CODEBOOK_VERSION:
        raise VqError(f"{path}: codebook version {version}, expected {CODEBOOK_VERSION}")
    need = 20 + 4 * vocab * dim
    if len(blob) != need:
        raise VqError(f"{path}: truncated codebook ({len(blob)} bytes, expected {need})")
    return np.frombuffer(blob[20:], dtype="<f4").reshape(vocab, dim).astype(np.float64)
