"""GAS-MIL forward pass and its hand-written reverse pass.

Data flow for a batch of ``B`` bags with ``n`` instances each::

    x (B, n, m) --split by layout--> A_1..A_K, plus A = x for the concat group
    A_k --GFEB_k--> B_k (B, n, o)              o = outputs per instance
    B_k --Max-Min--> C_k (B, 2s, o)            top-s then bottom-s per column
    [C_1; ...; C_{K+1}]^T --> D (B, o, 2(K+1)s)
    D --shared head (affine, sigmoid, dropout, affine)--> scores (B, o)

``o`` is the number of classes for cross-entropy and ``classes - 1`` for the
cumulative ordinal encoding.  A single bag ``(n, m)`` is treated as a batch of
one and returned without the batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels
from .bagio import FeatureBag, GroupLayout
from .errors import ConfigError, DimensionError, UsageError
from .numerics import Parameter, dropout_mask, row_softmax, sigmoid_map

GFEB_KINDS = ("mlp", "attention")
LOSS_KINDS = ("ce", "bce-ordinal")


@dataclass(frozen=True)
class GasMilConfig:
    layout: GroupLayout
    num_classes: int
    s: int = 20
    gfeb_kind: str = "mlp"
    mlp_hidden: int = 192
    attn_feature_dim: int = 512
    attn_dim: int = 256
    head_hidden: int = 96
    head_dropout: float = 0.3
    concat_group: bool = True
    loss_kind: str = "ce"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.s < 1:
            raise ConfigError(f"selection count s must be >= 1, got {self.s}")
        if self.gfeb_kind not in GFEB_KINDS:
            raise ConfigError(f"gfeb_kind must be one of {GFEB_KINDS}, got {self.gfeb_kind!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        for name in ("mlp_hidden", "attn_feature_dim", "attn_dim", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"head_dropout must lie in [0, 1), got {self.head_dropout}")

    @property
    def num_outputs(self):
        return self.num_classes - 1 if self.loss_kind == "bce-ordinal" else self.num_classes

    @property
    def num_blocks(self):
        """Number of GFEBs: one per group plus the concatenation group if enabled."""
        return self.layout.num_groups + (1 if self.concat_group else 0)

    @property
    def d_width(self):
        return 2 * self.num_blocks * self.s

    def block_inputs(self):
        """Input width of every GFEB, in block order."""
        widths = list(self.layout.dims)
        if self.concat_group:
            widths.append(self.layout.total_width)
        return widths

    def to_json(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["layout"] = self.layout.to_json()
        return out

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        obj["layout"] = GroupLayout.from_json(obj["layout"])
        return cls(**obj)


class ParamSet:
    """Ordered collection of named :class:`Parameter` objects.

    ``version`` changes whenever values are updated, so traces recorded before
    an update can be detected as stale.
    """

    def __init__(self, params):
        self._params = {p.name: p for p in params}
        self.version = 0

    def __getitem__(self, name):
        return self._params[name].value

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def parameter(self, name):
        return self._params[name]

    def values(self):
        return {name: p.value for name, p in self._params.items()}

    def snapshot(self):
        return {name: p.value.copy() for name, p in self._params.items()}

    def load(self, values):
        for name, p in self._params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.size != p.value.size:
                raise DimensionError(f"parameter {name}: got {v.shape}, expected {p.value.shape}")
            p.value[...] = v.reshape(p.value.shape)
        self.bump()

    def bump(self):
        self.version += 1

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()


def init_uniform(shapes, rng):
    """PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    ``shapes`` is a list of ``(name, shape, fan_in)``; draws happen in list order.
    """
    params = []
    for name, shape, fan_in in shapes:
        bound = 1.0 / math.sqrt(fan_in)
        params.append(Parameter(rng.uniform(-bound, bound, size=shape), name=name))
    return ParamSet(params)


# GFEB: MLP variant


def gfeb_mlp(a, w, cache=None):
    """Two affine layers with a sigmoid in between, applied to each instance."""
    if a.shape[-1] != w["fc1.weight"].shape[0]:
        raise DimensionError(f"GFEB input {a.shape} does not match weight {w['fc1.weight'].shape}")
    hidden = sigmoid_map(a @ w["fc1.weight"] + w["fc1.bias"])
    out = hidden @ w["fc2.weight"] + w["fc2.bias"]
    if cache is not None:
        cache.update(a=a, hidden=hidden)
    return out


def gfeb_mlp_backward(cache, w, dout, need_input):
    a, hidden = cache["a"], cache["hidden"]
    h2 = hidden.reshape(-1, hidden.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {"fc2.weight": h2.T @ d2, "fc2.bias": d2.sum(axis=0)}
    dz = (dout @ w["fc2.weight"].T) * hidden * (1.0 - hidden)
    dz2 = dz.reshape(-1, dz.shape[-1])
    grads["fc1.weight"] = a.reshape(-1, a.shape[-1]).T @ dz2
    grads["fc1.bias"] = dz2.sum(axis=0)
    da = dz @ w["fc1.weight"].T if need_input else None
    return grads, da


def mlp_shapes(in_dim, hidden, out_dim):
    return [
        ("fc1.weight", (in_dim, hidden), in_dim),
        ("fc1.bias", (hidden,), in_dim),
        ("fc2.weight", (hidden, out_dim), hidden),
        ("fc2.bias", (out_dim,), hidden),
    ]


# GFEB: attention variant


def gfeb_attention(a, w, cache=None):
    """Single-head scaled dot-product self-attention across the bag's instances.

    Instances are projected to the feature width, attended over with queries
    and keys of width ``attn_dim``, and mapped to the output columns.
    """
    if a.shape[-1] != w["proj.weight"].shape[0]:
        raise DimensionError(f"GFEB input {a.shape} does not match weight {w['proj.weight'].shape}")
    x = a @ w["proj.weight"] + w["proj.bias"]
    q = x @ w["q.weight"] + w["q.bias"]
    k = x @ w["k.weight"] + w["k.bias"]
    v = x @ w["v.weight"] + w["v.bias"]
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = row_softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    o = attn @ v
    out = o @ w["out.weight"] + w["out.bias"]
    if cache is not None:
        cache.update(a=a, x=x, q=q, k=k, v=v, attn=attn, o=o, scale=scale)
    return out


def _wgrad(inp, dout):
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def gfeb_attention_backward(cache, w, dout, need_input):
    a, x, q, k, v, attn, o, scale = (cache[key] for key in ("a", "x", "q", "k", "v", "attn", "o", "scale"))
    grads = {"out.weight": _wgrad(o, dout), "out.bias": dout.reshape(-1, dout.shape[-1]).sum(axis=0)}
    do = dout @ w["out.weight"].T
    dattn = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ do
    dscore = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dq = (dscore @ k) * scale
    dk = (np.swapaxes(dscore, -1, -2) @ q) * scale
    for name, d in (("q", dq), ("k", dk), ("v", dv)):
        grads[f"{name}.weight"] = _wgrad(x, d)
        grads[f"{name}.bias"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
    dx = dq @ w["q.weight"].T + dk @ w["k.weight"].T + dv @ w["v.weight"].T
    grads["proj.weight"] = _wgrad(a, dx)
    grads["proj.bias"] = dx.reshape(-1, dx.shape[-1]).sum(axis=0)
    da = dx @ w["proj.weight"].T if need_input else None
    return grads, da


def attention_shapes(in_dim, feat, att, out_dim):
    return [
        ("proj.weight", (in_dim, feat), in_dim),
        ("proj.bias", (feat,), in_dim),
        ("q.weight", (feat, att), feat),
        ("q.bias", (att,), feat),
        ("k.weight", (feat, att), feat),
        ("k.bias", (att,), feat),
        ("v.weight", (feat, feat), feat),
        ("v.bias", (feat,), feat),
        ("out.weight", (feat, out_dim), feat),
        ("out.bias", (out_dim,), feat),
    ]


# Max-Min selection and assembly


def max_min_select(b, s):
    """Top-``s`` and bottom-``s`` entries of every column of ``b`` over its rows.

    ``b`` is ``(n, o)`` or ``(batch, n, o)``.  Returns ``(c, index)`` of shape
    ``(..., 2s, o)``: rows ``0..s-1`` hold the largest values in descending
    order, rows ``s..2s-1`` the smallest in ascending order, and ``index``
    gives each entry's source row.  Ties go to the lowest source row.
    """
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 2
    if single:
        b = b[None]
    n = b.shape[1]
    if n < 2 * s:
        raise ConfigError(f"Max-Min needs at least 2s = {2 * s} instances, bag has {n}")
    c, index = kernels.maxmin_select(b, s)
    if single:
        return c[0], index[0]
    return c, index


def assemble_d(blocks):
    """Stack the ``(…, 2s, o)`` Max-Min outputs row-wise and transpose to ``(…, o, 2Gs)``."""
    widths = {blk.shape[-1] for blk in blocks}
    if len(widths) != 1:
        raise DimensionError(f"Max-Min blocks disagree on the class width: {sorted(widths)}")
    stacked = np.concatenate(blocks, axis=-2)
    return np.swapaxes(stacked, -1, -2)


# classification head


def head_shapes(in_dim, hidden):
    return [
        ("fc1.weight", (in_dim, hidden), in_dim),
        ("fc1.bias", (hidden,), in_dim),
        ("fc2.weight", (hidden, 1), hidden),
        ("fc2.bias", (1,), hidden),
    ]


def head_forward(d, w, dropout=0.0, training=False, rng=None, cache=None):
    """Shared head over the class rows of ``d``: one score per row."""
    if d.shape[-1] != w["fc1.weight"].shape[0]:
        raise DimensionError(f"head input {d.shape} does not match weight {w['fc1.weight'].shape}")
    hidden = sigmoid_map(d @ w["fc1.weight"] + w["fc1.bias"])
    if training and dropout > 0.0:
        mask = dropout_mask(hidden.shape, dropout, rng)
    else:
        mask = None
    dropped = hidden if mask is None else hidden * mask
    scores = (dropped @ w["fc2.weight"] + w["fc2.bias"])[..., 0]
    if cache is not None:
        cache.update(d=d, hidden=hidden, mask=mask, dropped=dropped)
    return scores


def head_backward(cache, w, dscores):
    d, hidden, mask, dropped = cache["d"], cache["hidden"], cache["mask"], cache["dropped"]
    ds = dscores[..., None]
    grads = {"fc2.weight": _wgrad(dropped, ds), "fc2.bias": ds.reshape(-1, 1).sum(axis=0)}
    dh = ds * w["fc2.weight"][:, 0]
    if mask is not None:
        dh = dh * mask
    dz = dh * hidden * (1.0 - hidden)
    grads["fc1.weight"] = _wgrad(d, dz)
    grads["fc1.bias"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
    return grads, dz @ w["fc1.weight"].T


@dataclass
class ForwardTrace:
    params: ParamSet
    version: int
    n: int
    single: bool
    gfeb: list = field(default_factory=list)
    indices: list = field(default_factory=list)
    head: dict = field(default_factory=dict)


def _sub(values, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in values.items() if k.startswith(p)}


def _as_batch(x, layout):
    if isinstance(x, FeatureBag):
        if x.layout is not None and x.layout != layout:
            raise ConfigError(f"bag layout {x.layout.dims} does not match model layout {layout.dims}")
        x = x.features
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"expected (n, m) or (batch, n, m) features, got {x.shape}")
    if x.shape[-1] != layout.total_width:
        raise ConfigError(
            f"layout mismatch: features have {x.shape[-1]} columns, layout expects {layout.total_width}"
        )
    return x, single


class GasMil:
    """The GAS-MIL network: K+1 GFEBs, Max-Min selection and a shared head."""

    arch = "gasmil"

    def __init__(self, config):
        self.config = config

    def param_shapes(self):
        cfg = self.config
        out = []
        for k, width in enumerate(cfg.block_inputs()):
            if cfg.gfeb_kind == "mlp":
                block = mlp_shapes(width, cfg.mlp_hidden, cfg.num_outputs)
            else:
                block = attention_shapes(width, cfg.attn_feature_dim, cfg.attn_dim, cfg.num_outputs)
            out += [(f"gfeb{k}.{name}", shape, fan) for name, shape, fan in block]
        out += [(f"head.{name}", shape, fan) for name, shape, fan in head_shapes(cfg.d_width, cfg.head_hidden)]
        return out

    def init_params(self, rng):
        return init_uniform(self.param_shapes(), rng)

    def _block_inputs(self, x):
        cfg = self.config
        parts = [x[..., sl] for sl in cfg.layout.slices()]
        if cfg.concat_group:
            parts.append(x)
        return parts

    def forward(self, x, params, training=False, rng=None):
        """Scores ``(o,)`` for one bag or ``(batch, o)`` for a stack, plus the trace."""
        cfg = self.config
        x, single = _as_batch(x, cfg.layout)
        n = x.shape[1]
        if n < 2 * cfg.s:
            raise ConfigError(f"bag has {n} instances, Max-Min needs at least 2s = {2 * cfg.s}")
        values = params.values()
        gfeb = gfeb_mlp if cfg.gfeb_kind == "mlp" else gfeb_attention
        trace = ForwardTrace(params, params.version, n, single)
        blocks = []
        for k, a_k in enumerate(self._block_inputs(x)):
            cache = {}
            b_k = gfeb(a_k, _sub(values, f"gfeb{k}"), cache)
            c_k, idx = kernels.maxmin_select(b_k, cfg.s)
            trace.gfeb.append(cache)
            trace.indices.append(idx)
            blocks.append(c_k)
        d = assemble_d(blocks)
        scores = head_forward(d, _sub(values, "head"), cfg.head_dropout, training, rng, trace.head)
        return (scores[0] if single else scores), trace

    def predict_scores(self, x, params):
        return self.forward(x, params, training=False)[0]

    def backward(self, trace, dscores, need_input=False):
        """Gradients of ``sum(dscores * scores)`` for every parameter.

        With ``need_input`` the gradient with respect to the input features is
        returned under the key ``"input"``.
        """
        if trace.version != trace.params.version:
            raise UsageError("forward trace is stale: parameters changed after the forward pass")
        cfg = self.config
        dscores = np.asarray(dscores, dtype=np.float64)
        if trace.single:
            dscores = dscores[None]
        values = trace.params.values()
        grads = {}
        head_grads, dd = head_backward(trace.head, _sub(values, "head"), dscores)
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        dstack = np.swapaxes(dd, -1, -2)
        backward = gfeb_mlp_backward if cfg.gfeb_kind == "mlp" else gfeb_attention_backward
        dx = None
        two_s = 2 * cfg.s
        slices = cfg.layout.slices()
        for k, (cache, idx) in enumerate(zip(trace.gfeb, trace.indices)):
            dc = np.ascontiguousarray(dstack[:, k * two_s : (k + 1) * two_s, :])
            db = kernels.maxmin_scatter(dc, idx, trace.n)
            g, da = backward(cache, _sub(values, f"gfeb{k}"), db, need_input)
            grads.update({f"gfeb{k}.{name}": v for name, v in g.items()})
            if need_input:
                if dx is None:
                    dx = np.zeros(da.shape[:-1] + (cfg.layout.total_width,))
                if k < len(slices):
                    dx[..., slices[k]] += da
                else:
                    dx += da
        ordered = {name: grads[name] for name in trace.params.names()}
        if need_input:
            ordered["input"] = dx[0] if trace.single else dx
        return ordered


def model_forward(bag, params, config, training=False, rng=None):
    return GasMil(config).forward(bag, params, training, rng)


def model_gradients(trace, loss_grad, config, need_input=False):
    return GasMil(config).backward(trace, loss_grad, need_input)


def predict_label(scores, loss_kind="ce"):
    """Class index from raw scores: argmax for CE, cumulative count for ordinal."""
    scores = np.asarray(scores, dtype=np.float64)
    if loss_kind == "ce":
        return np.argmax(scores, axis=-1)
    if loss_kind == "bce-ordinal":
        return np.sum(sigmoid_map(scores) > 0.5, axis=-1)
    raise ConfigError(f"unknown loss kind {loss_kind!r}")
