"""Patch tokenization of windows into prompt / past / future / context tokens.

Token tensors are laid out ``[..., time_tokens, channels, d]``; any leading
axes are batch axes and are carried through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .series import CONTEXT, TARGET

PROMPT, PAST, FUTURE = "prompt", "past", "future"


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    patch_size: int
    embed_dim: int
    prompt_count: int = 1
    future_len: int = 8
    anomaly_type_id: int = 0
    mask_context_future: bool = False

    def __post_init__(self):
        if self.patch_size < 1:
            raise TokenizerError(f"patch size k must be >= 1, got {self.patch_size}")
        if self.embed_dim < 1:
            raise TokenizerError(f"embed dim d must be >= 1, got {self.embed_dim}")
        if self.prompt_count < 1:
            raise TokenizerError(f"prompt count p must be >= 1, got {self.prompt_count}")
        if self.future_len < 1:
            raise TokenizerError(f"future length must be >= 1, got {self.future_len}")

    def check_window(self, K: int) -> None:
        k, lam = self.patch_size, self.future_len
        if lam > K or lam % k or (K - lam) % k:
            raise TokenizerError(
                f"patch size k={k} must divide both future length {lam} and past length {K - lam} (K={K})"
            )


@dataclass
class TokenTensor:
    """Token data plus per-axis bookkeeping.

    ``time_kinds[i]`` is one of prompt/past/future and ``time_ranges[i]`` the
    window-relative sample range a data token was built from (``None`` for
    prompts).  ``empty`` marks tokens whose source samples were all missing.
    """

    data: Tensor
    time_kinds: tuple[str, ...]
    time_ranges: tuple[tuple[int, int] | None, ...]
    channel_kinds: tuple[str, ...]
    empty: np.ndarray | None = None

    def __post_init__(self):
        shape = self.data.shape
        if len(shape) < 3:
            raise TokenizerError(f"token data must be [..., time, channel, d], got {shape}")
        if shape[-3] != len(self.time_kinds) or shape[-3] != len(self.time_ranges):
            raise TokenizerError(f"time axis {shape[-3]} vs metadata {len(self.time_kinds)}")
        if shape[-2] != len(self.channel_kinds):
            raise TokenizerError(f"channel axis {shape[-2]} vs metadata {len(self.channel_kinds)}")
        n_prompt = sum(1 for k in self.time_kinds if k == PROMPT)
        if any(k == PROMPT for k in self.time_kinds[n_prompt:]):
            raise TokenizerError("prompt tokens must form a contiguous prefix")
        if self.empty is None:
            self.empty = np.zeros(shape[:-1], dtype=bool)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _patchify(values: np.ndarray, k: int) -> np.ndarray:
    """[..., L, C] -> [..., L/k, C, k]."""
    *lead, L, C = values.shape
    x = values.reshape(*lead, L // k, k, C)
    return np.swapaxes(x, -1, -2)


def _embed(x: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(Tensor(x), w), b)


def embed_patches(
    values: np.ndarray,
    missing: np.ndarray,
    roles: Sequence[str],
    cfg: TokenizerConfig,
    weights: dict[str, Tensor],
) -> tuple[TokenTensor, TokenTensor, TokenTensor]:
    """Linear patch embedding of one window (or a batch of windows).

    ``values``/``missing`` are ``[..., K, C]``.  Missing samples are zeroed
    before embedding.  Target channels split into past and future tokens;
    context tokens cover the whole window.
    """
    values = np.asarray(values, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool)
    K = values.shape[-2]
    cfg.check_window(K)
    k, lam = cfg.patch_size, cfg.future_len
    t_idx = [i for i, r in enumerate(roles) if r == TARGET]
    c_idx = [i for i, r in enumerate(roles) if r == CONTEXT]
    clean = np.where(missing, 0.0, values)

    P = (K - lam) // k
    past_ranges = tuple((i * k, (i + 1) * k) for i in range(P))
    future_ranges = tuple(((P + i) * k, (P + i + 1) * k) for i in range(lam // k))

    tgt = _patchify(clean[..., t_idx], k)
    tgt_empty = _patchify(missing[..., t_idx], k).all(axis=-1)
    z_tgt = _embed(tgt, weights["embed.target.w"], weights["embed.target.b"])
    n = len(t_idx)
    z_past = TokenTensor(
        ad.slice_(z_tgt, (..., slice(0, P), slice(None), slice(None))),
        (PAST,) * P,
        past_ranges,
        (TARGET,) * n,
        tgt_empty[..., :P, :],
    )
    z_future = TokenTensor(
        ad.slice_(z_tgt, (..., slice(P, None), slice(None), slice(None))),
        (FUTURE,) * (lam // k),
        future_ranges,
        (TARGET,) * n,
        tgt_empty[..., P:, :],
    )
    ctx = _patchify(clean[..., c_idx], k)
    ctx_empty = _patchify(missing[..., c_idx], k).all(axis=-1)
    z_ctx = TokenTensor(
        _embed(ctx, weights["embed.context.w"], weights["embed.context.b"]),
        (PAST,) * P + (FUTURE,) * (lam // k),
        past_ranges + future_ranges,
        (CONTEXT,) * len(c_idx),
        ctx_empty,
    )
    return z_past, z_future, z_ctx


def _replace(tokens: TokenTensor, gen_token: Tensor, where: np.ndarray) -> TokenTensor:
    m = where[..., None].astype(np.float64)
    data = ad.add(ad.mul(tokens.data, Tensor(1.0 - m)), ad.mul(Tensor(m), gen_token))
    return TokenTensor(data, tokens.time_kinds, tokens.time_ranges, tokens.channel_kinds, tokens.empty)


def mask_future(tokens: TokenTensor, gen_token: Tensor) -> TokenTensor:
    """Swap future tokens, and any token built only from missing samples, for the GEN token."""
    if gen_token.shape != (tokens.shape[-1],):
        raise TokenizerError(f"gen token must have length {tokens.shape[-1]}, got {gen_token.shape}")
    future = np.array([k == FUTURE for k in tokens.time_kinds])[:, None]
    return _replace(tokens, gen_token, tokens.empty | future)


def mask_missing(tokens: TokenTensor, gen_token: Tensor, mask_future_rows: bool = False) -> TokenTensor:
    """GEN replacement for fully-missing tokens only (optionally all future rows too)."""
    where = tokens.empty
    if mask_future_rows:
        where = where | np.array([k == FUTURE for k in tokens.time_kinds])[:, None]
    return _replace(tokens, gen_token, where)


def assemble(
    z_past: TokenTensor,
    z_future: TokenTensor,
    z_ctx: TokenTensor,
    prompt_bank: Tensor,
    cfg: TokenizerConfig,
    channel_identity: Tensor | None = None,
) -> TokenTensor:
    """Concatenate into ``[..., p + K/k, n + m, d]`` with the prompt prefix.

    Data tokens get a sinusoidal time-position code and, when given, a
    learned per-channel identity vector.
    """
    if prompt_bank.data.ndim != 3:
        raise TokenizerError(f"prompt bank must be [types, p, d], got {prompt_bank.shape}")
    n_types, p, d = prompt_bank.shape
    if not 0 <= cfg.anomaly_type_id < n_types:
        raise TokenizerError(f"anomaly type {cfg.anomaly_type_id} not in prompt bank of {n_types} rows")
    if p != cfg.prompt_count:
        raise TokenizerError(f"prompt bank holds {p} slots, config asks for {cfg.prompt_count}")
    lead = z_past.shape[:-3]
    for name, z in (("future", z_future), ("context", z_ctx)):
        if z.shape[:-3] != lead:
            raise TokenizerError(f"batch axes of {name} tokens {z.shape[:-3]} differ from past {lead}")
        if z.shape[-1] != d:
            raise TokenizerError(f"embedding axis of {name} tokens is {z.shape[-1]}, prompt bank has {d}")
    if z_past.shape[-2] != z_future.shape[-2]:
        raise TokenizerError(f"channel axis: past has {z_past.shape[-2]}, future {z_future.shape[-2]}")
    n_time = z_past.shape[-3] + z_future.shape[-3]
    if z_ctx.shape[-3] != n_time:
        raise TokenizerError(f"time axis: context has {z_ctx.shape[-3]} tokens, targets {n_time}")

    targets = ad.concat([z_past.data, z_future.data], axis=-3)
    body = ad.concat([targets, z_ctx.data], axis=-2) if z_ctx.shape[-2] else targets
    n_chan = body.shape[-2]
    body = ad.add(body, Tensor(sinusoidal_positions(n_time, d)[:, None, :]))
    if channel_identity is not None:
        if channel_identity.shape != (n_chan, d):
            raise TokenizerError(f"channel identity must be {(n_chan, d)}, got {channel_identity.shape}")
        body = ad.add(body, channel_identity)

    prompt = ad.reshape(ad.slice_(prompt_bank, (cfg.anomaly_type_id,)), (p, 1, d))
    prompt = ad.add(Tensor(np.zeros((*lead, p, n_chan, d))), prompt)
    Z = ad.concat([prompt, body], axis=-3)

    empty = np.concatenate(
        [
            np.zeros((*lead, p, n_chan), dtype=bool),
            np.concatenate(
                [np.concatenate([z_past.empty, z_future.empty], axis=-2), z_ctx.empty], axis=-1
            ),
        ],
        axis=-2,
    )
    return TokenTensor(
        Z,
        (PROMPT,) * p + z_past.time_kinds + z_future.time_kinds,
        (None,) * p + z_past.time_ranges + z_future.time_ranges,
        z_past.channel_kinds + z_ctx.channel_kinds,
        empty,
    )


def tokenize(
    values: np.ndarray,
    missing: np.ndarray,
    roles: Sequence[str],
    cfg: TokenizerConfig,
    weights: dict[str, Tensor],
) -> TokenTensor:
    """embed -> GEN masking -> assemble, the full input path of the model."""
    z_past, z_future, z_ctx = embed_patches(values, missing, roles, cfg, weights)
    gen = weights["embed.gen"]
    z_past = mask_missing(z_past, gen)
    z_future = mask_future(z_future, gen)
    z_ctx = mask_missing(z_ctx, gen, mask_future_rows=cfg.mask_context_future)
    return assemble(z_past, z_future, z_ctx, weights["embed.prompts"], cfg, weights.get("embed.channel_id"))
