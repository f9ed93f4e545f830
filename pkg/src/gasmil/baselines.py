"""Two comparison aggregators: AB-MIL attention pooling and Chowder-style Max-Min.

Both expose the same ``init_params`` / ``forward`` / ``backward`` surface as
:class:`gasmil.model.GasMil`, so :func:`gasmil.training.fit` trains them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .bagio import GroupLayout
from .errors import ConfigError, DimensionError, UsageError
from .model import (
    GFEB_KINDS,
    LOSS_KINDS,
    GasMil,
    GasMilConfig,
    _as_batch,
    _wgrad,
    head_forward,
    init_uniform,
)
from .numerics import dropout_mask, row_softmax, sigmoid_map

BASELINE_KINDS = ("abmil", "chowder")


@dataclass(frozen=True)
class BaselineConfig:
    kind: str
    layout: GroupLayout
    num_classes: int
    attn_hidden: int = 128
    s: int = 20
    mlp_hidden: int = 192
    head_hidden: int = 96
    head_dropout: float = 0.3
    loss_kind: str = "ce"

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"baseline kind must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        for name in ("attn_hidden", "s", "mlp_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"head_dropout must lie in [0, 1), got {self.head_dropout}")

    @property
    def num_outputs(self):
        return self.num_classes - 1 if self.loss_kind == "bce-ordinal" else self.num_classes

    def to_json(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["layout"] = self.layout.to_json()
        return out

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown baseline config keys {sorted(unknown)}")
        obj["layout"] = GroupLayout.from_json(obj["layout"])
        return cls(**obj)


class AbMil:
    """Ungated attention pooling followed by the affine-sigmoid-dropout-affine head."""

    arch = "abmil"

    def __init__(self, config):
        self.config = config

    def param_shapes(self):
        cfg = self.config
        m, h, hh, o = cfg.layout.total_width, cfg.attn_hidden, cfg.head_hidden, cfg.num_outputs
        return [
            ("attn.V.weight", (m, h), m),
            ("attn.V.bias", (h,), m),
            ("attn.w.weight", (h, 1), h),
            ("head.fc1.weight", (m, hh), m),
            ("head.fc1.bias", (hh,), m),
            ("head.fc2.weight", (hh, o), hh),
            ("head.fc2.bias", (o,), hh),
        ]

    def init_params(self, rng):
        return init_uniform(self.param_shapes(), rng)

    def forward(self, x, params, training=False, rng=None):
        cfg = self.config
        x, single = _as_batch(x, cfg.layout)
        w = params.values()
        u = np.tanh(x @ w["attn.V.weight"] + w["attn.V.bias"])
        logits = (u @ w["attn.w.weight"])[..., 0]
        alpha = row_softmax(logits)
        pooled = np.einsum("bn,bnm->bm", alpha, x)
        hidden = sigmoid_map(pooled @ w["head.fc1.weight"] + w["head.fc1.bias"])
        mask = dropout_mask(hidden.shape, cfg.head_dropout, rng) if training and cfg.head_dropout > 0 else None
        dropped = hidden if mask is None else hidden * mask
        scores = dropped @ w["head.fc2.weight"] + w["head.fc2.bias"]
        trace = {
            "params": params, "version": params.version, "single": single,
            "x": x, "u": u, "alpha": alpha, "pooled": pooled,
            "hidden": hidden, "mask": mask, "dropped": dropped,
        }
        return (scores[0] if single else scores), trace

    def attention_weights(self, x, params):
        return self.forward(x, params)[1]["alpha"]

    def backward(self, trace, dscores, need_input=False):
        params = trace["params"]
        if trace["version"] != params.version:
            raise UsageError("forward trace is stale: parameters changed after the forward pass")
        w = params.values()
        ds = np.asarray(dscores, dtype=np.float64)
        if trace["single"]:
            ds = ds[None]
        x, u, alpha, pooled = trace["x"], trace["u"], trace["alpha"], trace["pooled"]
        hidden, mask, dropped = trace["hidden"], trace["mask"], trace["dropped"]
        g = {"head.fc2.weight": dropped.T @ ds, "head.fc2.bias": ds.sum(axis=0)}
        dh = ds @ w["head.fc2.weight"].T
        if mask is not None:
            dh = dh * mask
        dz = dh * hidden * (1.0 - hidden)
        g["head.fc1.weight"] = pooled.T @ dz
        g["head.fc1.bias"] = dz.sum(axis=0)
        dpooled = dz @ w["head.fc1.weight"].T
        dalpha = np.einsum("bnm,bm->bn", x, dpooled)
        dlogits = alpha * (dalpha - np.sum(alpha * dalpha, axis=-1, keepdims=True))
        g["attn.w.weight"] = _wgrad(u, dlogits[..., None])
        du = dlogits[..., None] * w["attn.w.weight"][:, 0]
        dpre = du * (1.0 - u * u)
        g["attn.V.weight"] = _wgrad(x, dpre)
        g["attn.V.bias"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
        out = {name: g[name] for name in params.names()}
        if need_input:
            dx = alpha[..., None] * dpooled[:, None, :] + dpre @ w["attn.V.weight"].T
            out["input"] = dx[0] if trace["single"] else dx
        return out


def chowder_config(config):
    """GAS-MIL configuration equivalent to a Chowder baseline: one MLP group, no concat group."""
    single = GroupLayout(("all",), (config.layout.total_width,))
    return GasMilConfig(
        layout=single,
        num_classes=config.num_classes,
        s=config.s,
        gfeb_kind="mlp",
        mlp_hidden=config.mlp_hidden,
        head_hidden=config.head_hidden,
        head_dropout=config.head_dropout,
        concat_group=False,
        loss_kind=config.loss_kind,
    )


class Chowder:
    """Single-group Max-Min model, trained through the GAS-MIL machinery.

    All feature groups are treated as one block of width ``m``.
    """

    arch = "chowder"

    def __init__(self, config):
        self.config = config
        self.inner = GasMil(chowder_config(config))

    def param_shapes(self):
        return self.inner.param_shapes()

    def init_params(self, rng):
        return self.inner.init_params(rng)

    def forward(self, x, params, training=False, rng=None):
        x, single = _as_batch(x, self.config.layout)
        scores, trace = self.inner.forward(x, params, training, rng)
        if single:
            trace.single = True
            scores = scores[0]
        return scores, trace

    def backward(self, trace, dscores, need_input=False):
        return self.inner.backward(trace, dscores, need_input)


def chowder_forward(features, weights, s, dropout=0.0, training=False, rng=None):
    """Direct single-bag Chowder computation from a weight mapping.

    ``weights`` uses the GAS-MIL names ``gfeb0.*`` and ``head.*``.  Written
    column by column with full sorts so it can serve as an independent check
    of the batched GAS-MIL path.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2 * s:
        raise ConfigError(f"Chowder needs at least 2s = {2 * s} instances, bag has {n}")
    if x.shape[1] != weights["gfeb0.fc1.weight"].shape[0]:
        raise DimensionError(f"features {x.shape} do not match weight {weights['gfeb0.fc1.weight'].shape}")
    hidden = sigmoid_map(x @ weights["gfeb0.fc1.weight"] + weights["gfeb0.fc1.bias"])
    evidence = hidden @ weights["gfeb0.fc2.weight"] + weights["gfeb0.fc2.bias"]
    rows = []
    for j in range(evidence.shape[1]):
        col = evidence[:, j]
        desc = sorted(range(n), key=lambda i: (-col[i], i))[:s]
        asc = sorted(range(n), key=lambda i: (col[i], i))[:s]
        rows.append(np.concatenate([col[desc], col[asc]]))
    d = np.array(rows)
    head = {k[len("head."):]: v for k, v in weights.items() if k.startswith("head.")}
    return head_forward(d, head, dropout, training, rng)


def abmil_forward(features, params, config, training=False, rng=None):
    return AbMil(config).forward(features, params, training, rng)[0]


def build_model(arch, layout, num_classes, loss_kind="ce", gfeb_kind="mlp", **overrides):
    """Model object for ``arch`` in {gasmil, abmil, chowder} with optional field overrides."""
    if arch == "gasmil":
        if gfeb_kind not in GFEB_KINDS:
            raise ConfigError(f"gfeb kind must be one of {GFEB_KINDS}")
        cfg = GasMilConfig(layout, num_classes, gfeb_kind=gfeb_kind, loss_kind=loss_kind)
        known = {f.name for f in fields(GasMilConfig)}
        return GasMil(replace(cfg, **{k: v for k, v in overrides.items() if k in known}))
    if arch in BASELINE_KINDS:
        cfg = BaselineConfig(arch, layout, num_classes, loss_kind=loss_kind)
        known = {f.name for f in fields(BaselineConfig)}
        return (AbMil if arch == "abmil" else Chowder)(replace(cfg, **{k: v for k, v in overrides.items() if k in known}))
    raise ConfigError(f"unknown architecture {arch!r}")


def model_from_json(arch, obj):
    if arch == "gasmil":
        return GasMil(GasMilConfig.from_json(obj))
    cfg = BaselineConfig.from_json(obj)
    return AbMil(cfg) if cfg.kind == "abmil" else Chowder(cfg)
