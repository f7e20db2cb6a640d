"""The domain transformation network.

Embeds a sampled class feature (query) and a sampled domain prototype stack
(keys/values), runs multi-head attention over the L layer rows, and reads
out a pseudo-feature through a residual fully-connected layer:

    e_sem = r W_sem                 e_dom = R W_dom
    a     = concat_h[ softmax(q_h k_h^T / scale) v_h ]
    r_hat = sigma(r + a W_O)

Parameters are throwaway: they are freshly initialized for every task and
discarded after output alignment.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm

ACTIVATIONS = {"relu": dm.relu, "gelu": dm.gelu, "identity": lambda t: t}


@dataclass
class DoTConfig:
    m: int
    heads: int = 4
    m_proj: int = 0  # 0 -> same as m
    activation: str = "relu"
    scale: str = "per_head"  # "per_head" (sqrt(m/H)) or "full_dim" (sqrt(m))
    w_o_init: str = "zero"  # start as the identity map; "random" for N(0, 1/m)

    def __post_init__(self):
        if self.m % self.heads != 0:
            raise ValueError(f"m={self.m} not divisible by heads={self.heads}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.scale not in ("per_head", "full_dim"):
            raise ValueError(f"unknown scale convention {self.scale!r}")
        if self.w_o_init not in ("zero", "random"):
            raise ValueError(f"unknown readout init {self.w_o_init!r}")
        if self.m_proj <= 0:
            self.m_proj = self.m


@dataclass
class DoTParameters:
    config: DoTConfig
    w_sem: dm.Tensor
    w_dom: dm.Tensor
    w_q: dm.Tensor
    w_k: dm.Tensor
    w_v: dm.Tensor
    w_o: dm.Tensor
    p_cls: dm.Tensor
    p_dom: dm.Tensor

    def trainables(self):
        return [
            self.w_sem,
            self.w_dom,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.p_cls,
            self.p_dom,
        ]

    def checksum(self):
        return float(sum(np.abs(t.data).sum() for t in self.trainables()))


def init_parameters(config, rng):
    """Fresh N(0, 1/m) weights; called anew whenever a task is added.

    The readout matrix defaults to zeros so the untrained module is exactly
    the identity on nonnegative features and corrections grow from nothing.
    """
    m, mp = config.m, config.m_proj
    std = m**-0.5

    def w(shape, name):
        return dm.parameter(rng.standard_normal(shape) * std, name=name)

    w_o = w((m, m), "w_o")
    if config.w_o_init == "zero":
        w_o = dm.parameter(np.zeros((m, m)), name="w_o")
    return DoTParameters(
        config=config,
        w_sem=w((m, m), "w_sem"),
        w_dom=w((m, m), "w_dom"),
        w_q=w((m, m), "w_q"),
        w_k=w((m, m), "w_k"),
        w_v=w((m, m), "w_v"),
        w_o=w_o,
        p_cls=w((m, mp), "p_cls"),
        p_dom=w((m, mp), "p_dom"),
    )


def _row(x):
    if isinstance(x, dm.Tensor):
        if x.data.ndim != 2:
            raise dm.ShapeError(f"expected a (1, m) tensor, got shape {x.data.shape}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return dm.constant(arr)


def embed(params, r_cls, r_dom_stack):
    """Project the class feature and the domain stack into their own spaces."""
    r = _row(r_cls)
    stack = r_dom_stack if isinstance(r_dom_stack, dm.Tensor) else dm.constant(r_dom_stack)
    if r.data.shape[1] != params.config.m or stack.data.shape[1] != params.config.m:
        raise dm.ShapeError(
            f"embed expects width {params.config.m}, got {r.data.shape} and {stack.data.shape}"
        )
    return dm.matmul(r, params.w_sem), dm.matmul(stack, params.w_dom)


def attend(params, e_sem, e_dom):
    """Multi-head attention of the semantic query over the L domain rows."""
    cfg = params.config
    width = cfg.m // cfg.heads
    denom = np.sqrt(width) if cfg.scale == "per_head" else np.sqrt(cfg.m)
    q = dm.matmul(e_sem, params.w_q)
    k = dm.matmul(e_dom, params.w_k)
    v = dm.matmul(e_dom, params.w_v)
    outs = []
    for h in range(cfg.heads):
        lo, hi = h * width, (h + 1) * width
        q_h = dm.slice_cols(q, lo, hi)
        k_h = dm.slice_cols(k, lo, hi)
        v_h = dm.slice_cols(v, lo, hi)
        scores = dm.scale(dm.matmul(q_h, dm.transpose(k_h)), 1.0 / denom)
        weights = dm.softmax_rows(scores)
        outs.append(dm.matmul(weights, v_h))
    return dm.concat_cols(outs)


def readout(params, r_cls, attended):
    """Residual readout: sigma(r + a W_O)."""
    act = ACTIVATIONS[params.config.activation]
    return act(dm.add(_row(r_cls), dm.matmul(attended, params.w_o)))


def dot_forward(params, r_cls, r_dom_stack):
    """The full transformation: embed, attend, read out. Returns a (1, m) node."""
    e_sem, e_dom = embed(params, r_cls, r_dom_stack)
    return readout(params, r_cls, attend(params, e_sem, e_dom))


def dot_forward_value(params, r_cls, r_dom_stack):
    """Convenience: forward pass value only, as a flat float64 vector."""
    return dot_forward(params, r_cls, r_dom_stack).data[0]
