"""Dual-attention transformer that imputes masked future target values.

Each block applies, with pre-layer-norm residual branches scaled by a
learned sigmoid gate:

1. self-attention over time tokens (per channel),
2. self-attention over channels (per time token),
3. a two-layer GELU feed-forward net whose hidden activations are scaled
   along time by an interpolated weight vector (DyLinear).

The tower maps future target tokens back to samples:
``Proj(MLP(z + DyLinear(z)))``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .series import TARGET, SeriesFrame, WindowSpec
from .tokenizer import TokenizerConfig, tokenize

logger = logging.getLogger(__name__)

N_ANOMALY_TYPES = 4


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    heads: int = 2
    embed_dim: int = 16
    patch_size: int = 2
    window: int = 16
    future_len: int = 8
    prompt_count: int = 1
    n_types: int = N_ANOMALY_TYPES
    ffn_mult: int = 2
    dylinear_len: int = 8
    dropout: float = 0.0
    gate: str = "scalar"
    channel_identity: bool = True
    mask_context_future: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.gate not in ("scalar", "vector"):
            raise ValueError(f"gate must be 'scalar' or 'vector', got {self.gate!r}")
        self.tokenizer(0).check_window(self.window)

    def tokenizer(self, anomaly_type_id: int = 0) -> TokenizerConfig:
        return TokenizerConfig(
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            prompt_count=self.prompt_count,
            future_len=self.future_len,
            anomaly_type_id=anomaly_type_id,
            mask_context_future=self.mask_context_future,
        )

    @property
    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.window, 1, self.window - self.future_len, self.future_len)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"n_blocks": 3, "embed_dim": 128, "heads": 8, **overrides})

    @classmethod
    def stress_window(cls, **overrides) -> "ModelConfig":
        """Five-sample windows predicting the last sample."""
        return cls(**{"window": 5, "future_len": 1, "patch_size": 1, "dylinear_len": 4, **overrides})


def init_params(cfg: ModelConfig, n_targets: int, n_context: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    d, k = cfg.embed_dim, cfg.patch_size
    hidden = cfg.ffn_mult * d
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "embed.target.w": ((k, d), "xavier"),
        "embed.target.b": ((d,), "zeros"),
        "embed.context.w": ((k, d), "xavier"),
        "embed.context.b": ((d,), "zeros"),
        "embed.gen": ((d,), "small"),
        "embed.prompts": ((cfg.n_types, cfg.prompt_count, d), "small"),
    }
    if cfg.channel_identity:
        shapes["embed.channel_id"] = ((n_targets + n_context, d), "small")
    gate_shape = (1,) if cfg.gate == "scalar" else (d,)
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}."
        for attn in ("time", "var"):
            for proj in ("q", "k", "v", "o"):
                shapes[f"{pre}{attn}.w{proj}"] = ((d, d), "xavier")
                shapes[f"{pre}{attn}.b{proj}"] = ((d,), "zeros")
        for ln in ("ln_time", "ln_var", "ln_ffn"):
            shapes[f"{pre}{ln}.gamma"] = ((d,), "ones")
            shapes[f"{pre}{ln}.beta"] = ((d,), "zeros")
        for gate in ("time", "var", "ffn"):
            shapes[f"{pre}gate.{gate}"] = (gate_shape, "zeros")
        shapes[f"{pre}ffn.w1"] = ((d, hidden), "xavier")
        shapes[f"{pre}ffn.b1"] = ((hidden,), "zeros")
        shapes[f"{pre}ffn.dyl"] = ((cfg.dylinear_len,), "ones")
        shapes[f"{pre}ffn.w2"] = ((hidden, d), "xavier")
        shapes[f"{pre}ffn.b2"] = ((d,), "zeros")
    shapes["tower.dyl"] = ((cfg.dylinear_len,), "zeros")
    shapes["tower.mlp.w1"] = ((d, d), "xavier")
    shapes["tower.mlp.b1"] = ((d,), "zeros")
    shapes["tower.mlp.w2"] = ((d, d), "xavier")
    shapes["tower.mlp.b2"] = ((d,), "zeros")
    shapes["tower.proj.w"] = ((d, k), "xavier")
    shapes["tower.proj.b"] = ((k,), "zeros")

    params = {}
    for name, (shape, kind) in shapes.items():
        if kind == "xavier":
            limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif kind == "small":
            value = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _linear(x: Tensor, params: dict[str, Tensor], w: str, b: str) -> Tensor:
    return ad.add(ad.matmul(x, params[w]), params[b])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    x = ad.reshape(x, (*lead, L, heads, d // heads))
    nl = len(lead)
    return ad.transpose(x, (*range(nl), nl + 1, nl, nl + 2))


def mhsa(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int, probs_out: list | None = None) -> Tensor:
    """Multi-head self-attention along axis -2 of ``[..., L, d]``."""
    *lead, L, d = x.shape
    q = _split_heads(_linear(x, params, prefix + "wq", prefix + "bq"), heads)
    k = _split_heads(_linear(x, params, prefix + "wk", prefix + "bk"), heads)
    v = _split_heads(_linear(x, params, prefix + "wv", prefix + "bv"), heads)
    nl = len(lead)
    kt = ad.transpose(k, (*range(nl + 1), nl + 2, nl + 1))
    scores = ad.mul(ad.matmul(q, kt), 1.0 / math.sqrt(d // heads))
    attn = ad.softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(attn.data)
    out = ad.matmul(attn, v)  # [..., h, L, dh]
    out = ad.transpose(out, (*range(nl), nl + 1, nl, nl + 2))
    out = ad.reshape(out, (*lead, L, d))
    return _linear(out, params, prefix + "wo", prefix + "bo")


def dylinear(z: Tensor, w: Tensor, axis: int) -> Tensor:
    """Scale ``z`` along ``axis`` by ``w`` resampled to that axis' length."""
    n = z.shape[axis]
    scale = ad.linear_interp_resize(w, 0, n)
    trailing = z.data.ndim - (axis % z.data.ndim) - 1
    return ad.mul(z, ad.reshape(scale, (n,) + (1,) * trailing))


def _gated(x: Tensor, branch: Tensor, gate: Tensor) -> Tensor:
    return ad.add(x, ad.mul(branch, ad.sigmoid(gate)))


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


def block(x: Tensor, params: dict[str, Tensor], b: int, cfg: ModelConfig, probs_out=None, rng=None) -> Tensor:
    """One transformer block on ``[B, T, C, d]``."""
    pre = f"blocks.{b}."
    # time attention: attend over T independently for every channel
    h = ad.layer_norm(x, params[pre + "ln_time.gamma"], params[pre + "ln_time.beta"])
    h = ad.transpose(h, (0, 2, 1, 3))
    h = mhsa(h, params, pre + "time.", cfg.heads, probs_out)
    h = ad.transpose(h, (0, 2, 1, 3))
    x = _gated(x, _dropout(h, cfg.dropout, rng), params[pre + "gate.time"])
    # variable attention: attend over channels independently for every time token
    h = ad.layer_norm(x, params[pre + "ln_var.gamma"], params[pre + "ln_var.beta"])
    h = mhsa(h, params, pre + "var.", cfg.heads, probs_out)
    x = _gated(x, _dropout(h, cfg.dropout, rng), params[pre + "gate.var"])
    # dynamic FFN
    h = ad.layer_norm(x, params[pre + "ln_ffn.gamma"], params[pre + "ln_ffn.beta"])
    h = ad.gelu(_linear(h, params, pre + "ffn.w1", pre + "ffn.b1"))
    h = dylinear(h, params[pre + "ffn.dyl"], axis=1)
    h = _linear(h, params, pre + "ffn.w2", pre + "ffn.b2")
    return _gated(x, _dropout(h, cfg.dropout, rng), params[pre + "gate.ffn"])


def tower(z_future: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """``[B, F, n, d]`` future tokens -> ``[B, F*k, n]`` samples."""
    B, F, n, _ = z_future.shape
    y = ad.add(z_future, dylinear(z_future, params["tower.dyl"], axis=1))
    y = ad.gelu(_linear(y, params, "tower.mlp.w1", "tower.mlp.b1"))
    y = _linear(y, params, "tower.mlp.w2", "tower.mlp.b2")
    y = _linear(y, params, "tower.proj.w", "tower.proj.b")  # [B, F, n, k]
    y = ad.transpose(y, (0, 2, 1, 3))
    y = ad.reshape(y, (B, n, F * cfg.patch_size))
    return ad.transpose(y, (0, 2, 1))


def forward(
    values: np.ndarray,
    missing: np.ndarray,
    roles: Sequence[str],
    params: dict[str, Tensor],
    cfg: ModelConfig,
    anomaly_type_id: int = 0,
    probs_out: list | None = None,
    rng: np.random.Generator | None = None,
):
    """Run a batch of (standardized) windows ``[B, K, C]``.

    Returns ``(Z_out, X_hat_F)`` with ``X_hat_F`` shaped ``[B, future_len, n]``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values, missing = values[None], np.asarray(missing)[None]
    Z = tokenize(values, missing, roles, cfg.tokenizer(anomaly_type_id), params)
    x = Z.data
    for b in range(cfg.n_blocks):
        x = block(x, params, b, cfg, probs_out, rng)
    n = sum(1 for r in roles if r == TARGET)
    first_future = cfg.prompt_count + (cfg.window - cfg.future_len) // cfg.patch_size
    z_hat = ad.slice_(x, (slice(None), slice(first_future, None), slice(0, n), slice(None)))
    return x, tower(z_hat, params, cfg)


def reconstruction_loss(x_hat: Tensor, x_true: np.ndarray, future_missing: np.ndarray) -> Tensor:
    """MSE over future cells whose ground truth is observed."""
    observed = ~np.asarray(future_missing, dtype=bool)
    if not observed.any():
        raise ValueError("window has no observed future target values")
    return ad.mse_loss(x_hat, x_true, weights=observed)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: Sequence[SeriesFrame]) -> "Standardizer":
        vals = np.concatenate([f.values for f in frames])
        miss = np.concatenate([f.missing for f in frames])
        mean = np.zeros(vals.shape[1])
        std = np.ones(vals.shape[1])
        for c in range(vals.shape[1]):
            obs = vals[~miss[:, c], c]
            if obs.size:
                mean[c] = obs.mean()
                s = obs.std()
                std[c] = s if s > 1e-12 else 1.0
        return cls(mean, std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray, columns: Sequence[int] | None = None) -> np.ndarray:
        if columns is None:
            return values * self.std + self.mean
        return values * self.std[list(columns)] + self.mean[list(columns)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    params: dict[str, Tensor]
    cfg: ModelConfig
    roles: tuple[str, ...]
    channel_names: tuple[str, ...]
    scaler: Standardizer
    loss_trace: list[float] = field(default_factory=list)
    anomaly_type_id: int = 0
    trained: bool = True

    @property
    def target_idx(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == TARGET]

    def predict_standardized(self, values: np.ndarray, missing: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Batched forward on standardized windows ``[B, K, C]`` -> ``[B, future_len, n]``."""
        out = []
        for s in range(0, values.shape[0], batch_size):
            _, xh = forward(
                values[s : s + batch_size],
                missing[s : s + batch_size],
                self.roles,
                self.params,
                self.cfg,
                self.anomaly_type_id,
            )
            out.append(xh.data)
        if not out:
            return np.zeros((0, self.cfg.future_len, len(self.target_idx)))
        return np.concatenate(out)

    # --- persistence -----------------------------------------------------
    def save(self, checkpoint: str | Path, manifest: str | Path | None = None, extra: dict | None = None) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["norm.mean"] = self.scaler.mean
        arrays["norm.std"] = self.scaler.std
        ad.save_checkpoint(checkpoint, arrays)
        manifest = Path(manifest) if manifest else Path(str(checkpoint) + ".manifest")
        write_manifest(manifest, self, extra or {})

    @classmethod
    def load(cls, checkpoint: str | Path, manifest: str | Path | None = None) -> "TrainedModel":
        arrays = ad.load_checkpoint(checkpoint)
        manifest = Path(manifest) if manifest else Path(str(checkpoint) + ".manifest")
        meta = read_manifest(manifest)
        cfg = ModelConfig(**json.loads(meta["config"]))
        scaler = Standardizer(arrays.pop("norm.mean"), arrays.pop("norm.std"))
        params = {name: Tensor(a, requires_grad=False, name=name) for name, a in arrays.items()}
        return cls(
            params,
            cfg,
            tuple(json.loads(meta["roles"])),
            tuple(json.loads(meta["channels"])),
            scaler,
            json.loads(meta.get("loss_trace", "[]")),
            int(meta.get("anomaly_type_id", 0)),
        )


def write_manifest(path: Path, model: TrainedModel, extra: dict) -> None:
    lines = {
        "format": "vitalwatch-run-manifest/1",
        "config": json.dumps(asdict(model.cfg), sort_keys=True),
        "seed": str(model.cfg.seed),
        "roles": json.dumps(list(model.roles)),
        "channels": json.dumps(list(model.channel_names)),
        "anomaly_type_id": str(model.anomaly_type_id),
        "loss_trace": json.dumps([round(v, 10) for v in model.loss_trace]),
    }
    for key, value in extra.items():
        lines[key] = value if isinstance(value, str) else json.dumps(value, sort_keys=True)
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in lines.items()), encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def window_arrays(frame: SeriesFrame, scaler: Standardizer, cfg: ModelConfig, starts=None):
    """Stack standardized windows; returns (values, missing, starts)."""
    K = cfg.window
    if starts is None:
        starts = np.arange(0, frame.T - K + 1)
    starts = np.asarray(starts, dtype=int)
    if starts.size == 0:
        C = frame.values.shape[1]
        return np.zeros((0, K, C)), np.zeros((0, K, C), dtype=bool), starts
    std = np.where(frame.missing, 0.0, scaler.transform(frame.filled()))
    idx = starts[:, None] + np.arange(K)[None, :]
    return std[idx], frame.missing[idx], starts


def train(
    frames: SeriesFrame | Sequence[SeriesFrame],
    cfg: ModelConfig | None = None,
    epochs: int = 2,
    lr: float = 5e-4,
    lr_decay: float = 0.9,
    batch_size: int = 32,
    anomaly_type_id: int = 0,
    max_windows: int | None = None,
) -> TrainedModel:
    """Fit the imputation model on every window of the given segments.

    Windows never cross segment boundaries.  Per-channel standardization is
    fitted on the same segments.  Windows are visited in a seeded shuffled
    order, ``batch_size`` at a time, with ``lr`` decayed by ``lr_decay``
    after each epoch.
    """
    if isinstance(frames, SeriesFrame):
        frames = [frames]
    if not frames:
        raise TrainingError("no training frames")
    cfg = cfg or ModelConfig()
    roles = frames[0].roles
    names = frames[0].channel_names
    if any(f.roles != roles for f in frames):
        raise TrainingError("training frames disagree on channel roles")
    scaler = Standardizer.fit(frames)
    n = frames[0].n_targets
    params = init_params(cfg, n, frames[0].n_context)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1) if cfg.dropout > 0 else None

    tgt = [i for i, r in enumerate(roles) if r == TARGET]
    past = cfg.window - cfg.future_len
    vals, miss = [], []
    for f in frames:
        v, m, _ = window_arrays(f, scaler, cfg)
        if v.shape[0]:
            usable = ~m[:, past:, :][:, :, tgt].all(axis=(1, 2))
            vals.append(v[usable])
            miss.append(m[usable])
    if not vals or sum(v.shape[0] for v in vals) == 0:
        raise TrainingError(f"no usable training windows of length {cfg.window}")
    vals = np.concatenate(vals)
    miss = np.concatenate(miss)
    if max_windows is not None and vals.shape[0] > max_windows:
        keep = np.sort(rng.choice(vals.shape[0], size=max_windows, replace=False))
        vals, miss = vals[keep], miss[keep]

    state = ad.AdamState()
    trace: list[float] = []
    tape = ad.Tape()
    for epoch in range(epochs):
        epoch_lr = ad.exponential_lr(lr, lr_decay, epoch)
        order = rng.permutation(vals.shape[0])
        total, count = 0.0, 0
        for s in range(0, order.size, batch_size):
            idx = order[s : s + batch_size]
            xv, xm = vals[idx], miss[idx]
            with ad.recording(tape):
                _, x_hat = forward(xv, xm, roles, params, cfg, anomaly_type_id, rng=drop_rng)
                loss = reconstruction_loss(x_hat, xv[:, past:, :][:, :, tgt], xm[:, past:, :][:, :, tgt])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {s}: {loss.data}")
            for p in params.values():
                p.zero_grad()
            tape.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if not ad.adam_step(params, grads, state, lr=epoch_lr):
                logger.warning("skipped step with non-finite gradient (epoch %d)", epoch)
            total += float(loss.data) * idx.size
            count += idx.size
        trace.append(total / count)
        logger.info("epoch %d loss %.6f lr %.2e", epoch, trace[-1], epoch_lr)
    for p in params.values():
        p.zero_grad()
        p.requires_grad = False
    return TrainedModel(params, cfg, roles, names, scaler, trace, anomaly_type_id)


def impute(window_values: np.ndarray, window_missing: np.ndarray, model: TrainedModel) -> np.ndarray:
    """Predicted future targets ``[future_len, n]`` in original units for one raw window."""
    v = np.asarray(window_values, dtype=np.float64)
    m = np.asarray(window_missing, dtype=bool)
    std = np.where(m, 0.0, model.scaler.transform(np.where(m, 0.0, v)))
    pred = model.predict_standardized(std[None], m[None])[0]
    return model.scaler.inverse(pred, model.target_idx)


def with_anomaly_type(model: TrainedModel, anomaly_type_id: int) -> TrainedModel:
    return replace(model, anomaly_type_id=anomaly_type_id)
