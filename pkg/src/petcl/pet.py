"""Parameter-efficient tuning modules: adapters, low-rank deltas, prefixes.

Three module kinds attach to a frozen transformer:

* adapters: a bottleneck MLP added to the block MLP output, either
  sequential (reads that output) or parallel (reads the MLP input, with
  a learnable scale);
* low-rank deltas on the attention query/value projections, mergeable
  into the frozen weight;
* prefixes: learnable key/value rows prepended per attention head.

A prefix is algebraically a gated adapter: with per-query gate
``lam = (prefix attention mass)`` the concatenated-softmax attention
equals ``(1 - lam) * vanilla + lam * softmax(q P_k^T / sqrt(dh)) P_v``.
That gate attenuates prefix gradients, so the calibrated variant drops
the gate from the learnable term (treating the gate value as a
constant) and adds learnable scales on the prefix logits and values.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, sqrt

import numpy as np

from . import tensor as T
from .model import (
    SITE_ATTN_PREFIX,
    SITE_ATTN_QV_LORA,
    SITE_MLP_PARALLEL,
    SITE_MLP_SEQUENTIAL,
    SITES,
    AttachmentPoint,
    BackboneConfig,
)
from .tensor import Tensor

KINDS = ("adapter", "lora", "prefix")

INIT_STD = 0.02
ADAPTER_SCALE_INIT = 0.1


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class AdapterParams:
    w_down: Tensor                 # (d, r)
    w_up: Tensor                   # (r, d)
    scale: Tensor | None           # learnable scalar, parallel mode only
    mode: str = "parallel"         # "sequential" | "parallel"
    activation: str = "gelu"       # "gelu" | "relu"

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(prefix + "w_down", self.w_down), (prefix + "w_up", self.w_up)]
        if self.scale is not None:
            out.append((prefix + "scale", self.scale))
        return out


@dataclass
class LowRankDelta:
    """One adapted projection: base weight plus ``scale * w_down @ w_up``."""
    w_down: Tensor                 # (d, r)
    w_up: Tensor                   # (r, d_out)
    scale: Tensor                  # learnable scalar

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(prefix + "w_down", self.w_down), (prefix + "w_up", self.w_up),
                (prefix + "scale", self.scale)]


@dataclass
class LoRAParams:
    query: LowRankDelta
    value: LowRankDelta

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return self.query.named(prefix + "q.") + self.value.named(prefix + "v.")


@dataclass
class PrefixParams:
    p_k: Tensor                    # (l, d)
    p_v: Tensor                    # (l, d)
    s_k: Tensor                    # logit scale (fixed at 1 when not learnable)
    s_v: Tensor                    # value scale (fixed at 1 when not learnable)
    compensate: bool = True        # drop the gate from the learnable term
    learnable_scales: bool = True
    lambda_requires_grad: bool = False  # let gradients flow through the gate

    @property
    def reparam(self) -> bool:
        """Whether the gated mixture form is used instead of concatenation."""
        return self.compensate or self.learnable_scales

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(prefix + "p_k", self.p_k), (prefix + "p_v", self.p_v)]
        if self.learnable_scales:
            out.append((prefix + "s_k", self.s_k))
            out.append((prefix + "s_v", self.s_v))
        return out


# ---------------------------------------------------------------------------
# forwards


def _adapter_act(name: str):
    if name == "gelu":
        return T.gelu
    if name == "relu":
        return T.relu
    raise ValueError(f"unknown adapter activation {name!r}")


def adapter_forward(p: AdapterParams, e, h) -> Tensor:
    """Bottleneck residual: ``h + [s *] act(e @ w_down) @ w_up``.

    Sequential mode passes the same value for ``e`` and ``h``; parallel
    mode reads ``e`` from the input of the wrapped sublayer.
    """
    mid = T.matmul(_adapter_act(p.activation)(T.matmul(e, p.w_down)), p.w_up)
    if p.scale is not None:
        mid = T.mul(mid, p.scale)
    return T.add(h, mid)


def low_rank_delta_forward(delta: LowRankDelta, e) -> Tensor:
    return T.mul(T.matmul(T.matmul(e, delta.w_down), delta.w_up), delta.scale)


def lora_forward(delta: LowRankDelta, e, h) -> Tensor:
    """Low-rank residual on a projection output: ``h + s * e @ (w_down w_up)``."""
    return T.add(h, low_rank_delta_forward(delta, e))


def lora_merge(delta: LowRankDelta, w) -> np.ndarray:
    """Fold the delta into a frozen weight: ``w + s * w_down @ w_up``."""
    base = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if base.shape != (delta.w_down.shape[0], delta.w_up.shape[1]):
        raise ValueError(f"weight shape {base.shape} does not match delta")
    return base + delta.scale.item() * (delta.w_down.data @ delta.w_up.data)


def _heads_of(x: Tensor, num_heads: int) -> Tensor:
    return T.split_heads(x, num_heads)


def _prefix_heads(p: PrefixParams, num_heads: int) -> tuple[Tensor, Tensor]:
    return T.split_heads(p.p_k, num_heads), T.split_heads(p.p_v, num_heads)


def prefix_concat_attention_qkv(p: PrefixParams, q: Tensor, k: Tensor, v: Tensor,
                                num_heads: int) -> Tensor:
    """Attention over keys/values with prefix rows prepended per head.

    Queries come from the content only; output keeps the content length.
    """
    d = q.shape[-1]
    lead = q.shape[:-2]
    pk = T.broadcast_to(p.p_k, (*lead, *p.p_k.shape)) if lead else p.p_k
    pv = T.broadcast_to(p.p_v, (*lead, *p.p_v.shape)) if lead else p.p_v
    k_full = T.concat([pk, k], axis=-2)
    v_full = T.concat([pv, v], axis=-2)
    if k_full.shape[-1] != d:
        raise ValueError("prefix width does not match model dim")
    return T.multi_head_attention(q, k_full, v_full, num_heads)


def _prefix_logits(p: PrefixParams, q: Tensor, k: Tensor, num_heads: int):
    """Per-head scaled logits against prefix rows and content keys."""
    d = q.shape[-1]
    head_dim = d // num_heads
    qh = _heads_of(q, num_heads)
    kh = _heads_of(k, num_heads)
    pk_h, pv_h = _prefix_heads(p, num_heads)
    inv = 1.0 / sqrt(head_dim)
    plogits = T.mul(T.matmul(qh, T.transpose(pk_h)), inv)   # (..., H, T, l)
    clogits = T.mul(T.matmul(qh, T.transpose(kh)), inv)     # (..., H, T, S)
    return qh, pv_h, plogits, clogits


def prefix_lambda_qkv(p: PrefixParams, q: Tensor, k: Tensor,
                      num_heads: int) -> Tensor:
    """Per-head, per-query attention mass landing on the prefix rows."""
    _, _, plogits, clogits = _prefix_logits(p, q, k, num_heads)
    lse_p = T.logsumexp(plogits, axis=-1)
    lse_c = T.logsumexp(clogits, axis=-1)
    return T.sigmoid(T.sub(lse_p, lse_c))                   # (..., H, T)


def prefix_reparam_attention_qkv(p: PrefixParams, q: Tensor, k: Tensor, v: Tensor,
                                 num_heads: int) -> Tensor:
    """Gated-mixture prefix attention with optional compensation/scales.

    The gate is the prefix attention mass; it is treated as a constant
    unless ``p.lambda_requires_grad``.  With compensation the learnable
    term enters ungated, so prefix gradients are no longer shrunk by the
    gate; without it the gate multiplies the term as in the plain
    concatenated form.
    """
    vh = _heads_of(v, num_heads)
    qh, pv_h, plogits, clogits = _prefix_logits(p, q, k, num_heads)
    lse_p = T.logsumexp(plogits, axis=-1, keepdims=True)
    lse_c = T.logsumexp(clogits, axis=-1, keepdims=True)
    lam = T.sigmoid(T.sub(lse_p, lse_c))                    # (..., H, T, 1)
    if not p.lambda_requires_grad:
        lam = lam.detach()

    vanilla = T.matmul(T.softmax(clogits, axis=-1), vh)
    if p.learnable_scales:
        plogits = T.mul(plogits, p.s_k)
        pv_h = T.mul(pv_h, p.s_v)
    term = T.matmul(T.softmax(plogits, axis=-1), pv_h)
    if not p.compensate:
        term = T.mul(lam, term)
    out = T.add(T.mul(T.sub(1.0, lam), vanilla), term)
    return T.merge_heads(out)


# spec-level wrappers taking raw tokens plus the projection weights


def _project(e, w, bias=None) -> Tensor:
    out = T.matmul(e, w)
    return T.add(out, bias) if bias is not None else out


def prefix_attention(p: PrefixParams, e, w_q, w_k, w_v, num_heads: int = 1,
                     biases=None) -> Tensor:
    """Concatenated-form prefix attention over content tokens ``e``."""
    bq, bk, bv = biases if biases is not None else (None, None, None)
    q = _project(e, w_q, bq)
    k = _project(e, w_k, bk)
    v = _project(e, w_v, bv)
    return prefix_concat_attention_qkv(p, q, k, v, num_heads)


def prefix_lambda(p: PrefixParams, e, w_q, w_k, num_heads: int = 1,
                  content=None) -> Tensor:
    """Gate values for queries from ``e`` against content keys.

    ``content`` defaults to ``e`` (self-attention); pass it explicitly
    when the key tokens differ from the query tokens.
    """
    src = e if content is None else content
    return prefix_lambda_qkv(p, _project(e, w_q), _project(src, w_k), num_heads)


def prefix_as_adapter_form(p: PrefixParams, e, w_q, w_k, w_v, num_heads: int = 1,
                           content=None) -> Tensor:
    """Equivalent mixture form of concatenated prefix attention.

    Computes vanilla attention and the prefix-only softmax separately,
    then blends them with the gate.  Used as the independent second
    route when checking the concatenated implementation.
    """
    src = e if content is None else content
    q = _project(e, w_q)
    k = _project(src, w_k)
    v = _project(src, w_v)
    vh = _heads_of(v, num_heads)
    qh, pv_h, plogits, clogits = _prefix_logits(p, q, k, num_heads)
    lam = T.sigmoid(T.sub(T.logsumexp(plogits, axis=-1, keepdims=True),
                          T.logsumexp(clogits, axis=-1, keepdims=True)))
    vanilla = T.matmul(T.softmax(clogits, axis=-1), vh)
    term = T.matmul(T.softmax(plogits, axis=-1), pv_h)
    mixed = T.add(T.mul(T.sub(1.0, lam), vanilla), T.mul(lam, term))
    return T.merge_heads(mixed)


def calibrated_prefix_attention(p: PrefixParams, e, w_q, w_k, w_v,
                                num_heads: int = 1, biases=None) -> Tensor:
    """Prefix attention with gate compensation and learnable scales."""
    bq, bk, bv = biases if biases is not None else (None, None, None)
    q = _project(e, w_q, bq)
    k = _project(e, w_k, bk)
    v = _project(e, w_v, bv)
    return prefix_reparam_attention_qkv(p, q, k, v, num_heads)


# ---------------------------------------------------------------------------
# module sets


class PETSet:
    """Homogeneous set of tuning modules keyed by attachment point."""

    def __init__(self, kind: str, size: int, entries, extra: dict | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown module kind {kind!r}")
        if size < 1:
            raise ValueError("module size must be at least 1")
        self.kind = kind
        self.size = size
        self.entries: list[tuple[AttachmentPoint, object]] = list(entries)
        self.extra = dict(extra or {})
        expected = {"adapter": AdapterParams, "lora": LoRAParams,
                    "prefix": PrefixParams}[kind]
        self._index: dict[tuple[int, str], object] = {}
        for point, params in self.entries:
            if point.site not in SITES:
                raise ValueError(f"unknown attachment site {point.site!r}")
            if not isinstance(params, expected):
                raise ValueError(
                    f"heterogeneous set: {type(params).__name__} under kind {kind!r}")
            key = (point.block, point.site)
            if key in self._index:
                raise ValueError(f"duplicate module at block {point.block}, "
                                 f"site {point.site}")
            self._index[key] = params

    def lookup(self, block: int, site: str):
        return self._index.get((block, site))

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for point, params in sorted(self.entries, key=lambda e: (e[0].block, e[0].site)):
            out.extend(params.named(f"b{point.block}.{point.site}."))
        return out

    def trainable_params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named_params():
            p.requires_grad = flag

    def layout(self) -> tuple:
        """Structural descriptor; equal layouts pair one-to-one."""
        return (self.kind, self.size,
                tuple(sorted(self.extra.items())),
                tuple((name, p.shape) for name, p in self.named_params()))

    def clone(self, trainable: bool = False) -> "PETSet":
        entries = []
        for point, params in self.entries:
            entries.append((point, _clone_params(params, trainable)))
        return PETSet(self.kind, self.size, entries, self.extra)

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())


def _clone_params(params, trainable: bool):
    def ct(t: Tensor, grad=trainable) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=grad)

    if isinstance(params, AdapterParams):
        return AdapterParams(ct(params.w_down), ct(params.w_up),
                             None if params.scale is None else ct(params.scale),
                             params.mode, params.activation)
    if isinstance(params, LoRAParams):
        return LoRAParams(
            LowRankDelta(ct(params.query.w_down), ct(params.query.w_up),
                         ct(params.query.scale)),
            LowRankDelta(ct(params.value.w_down), ct(params.value.w_up),
                         ct(params.value.scale)))
    if isinstance(params, PrefixParams):
        fixed = not params.learnable_scales
        return PrefixParams(ct(params.p_k), ct(params.p_v),
                            ct(params.s_k, grad=trainable and not fixed),
                            ct(params.s_v, grad=trainable and not fixed),
                            params.compensate, params.learnable_scales,
                            params.lambda_requires_grad)
    raise TypeError(f"unknown module params {type(params)!r}")


def default_blocks(cfg: BackboneConfig) -> list[int]:
    """Modules go into the first half of the blocks (rounded up)."""
    return list(range(ceil(cfg.depth / 2)))


def build_pet_set(kind: str, size: int, cfg: BackboneConfig,
                  gen: np.random.Generator, blocks=None,
                  adapter_mode: str = "parallel", activation: str = "gelu",
                  prefix_compensate: bool = True, prefix_scales: bool = True,
                  lambda_requires_grad: bool = False) -> PETSet:
    """Freshly initialised modules for the given blocks.

    Down-projections start small and up-projections start at zero, so
    adapters and low-rank deltas are exact identities at initialisation.
    """
    if blocks is None:
        blocks = default_blocks(cfg)
    blocks = sorted(set(int(b) for b in blocks))
    if not blocks or blocks[0] < 0 or blocks[-1] >= cfg.depth:
        raise ValueError(f"attachment blocks {blocks} outside depth {cfg.depth}")
    d = cfg.model_dim

    def tn(shape):
        return Tensor(gen.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    entries = []
    extra: dict = {}
    if kind == "adapter":
        if adapter_mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown adapter mode {adapter_mode!r}")
        site = SITE_MLP_PARALLEL if adapter_mode == "parallel" else SITE_MLP_SEQUENTIAL
        extra = {"mode": adapter_mode, "activation": activation}
        for b in blocks:
            scale = Tensor(np.asarray(ADAPTER_SCALE_INIT), requires_grad=True) \
                if adapter_mode == "parallel" else None
            entries.append((AttachmentPoint(b, site),
                            AdapterParams(tn((d, size)), zeros((size, d)), scale,
                                          adapter_mode, activation)))
    elif kind == "lora":
        if size > d:
            raise ValueError(f"rank {size} exceeds model dim {d}")
        for b in blocks:
            def delta():
                return LowRankDelta(tn((d, size)), zeros((size, d)),
                                    Tensor(np.asarray(ADAPTER_SCALE_INIT),
                                           requires_grad=True))
            entries.append((AttachmentPoint(b, SITE_ATTN_QV_LORA),
                            LoRAParams(delta(), delta())))
    elif kind == "prefix":
        extra = {"compensate": prefix_compensate, "scales": prefix_scales}
        for b in blocks:
            learnable = prefix_scales
            entries.append((AttachmentPoint(b, SITE_ATTN_PREFIX),
                            PrefixParams(tn((size, d)), tn((size, d)),
                                         Tensor(np.asarray(1.0), requires_grad=learnable),
                                         Tensor(np.asarray(1.0), requires_grad=learnable),
                                         prefix_compensate, prefix_scales,
                                         lambda_requires_grad)))
    else:
        raise ValueError(f"unknown module kind {kind!r}")
    return PETSet(kind, size, entries, extra)


# ---------------------------------------------------------------------------
# flatten / unflatten


def pet_flatten(pets: PETSet) -> tuple[np.ndarray, tuple]:
    """Deterministic flat view of every learnable value plus its layout."""
    named = pets.named_params()
    vec = np.concatenate([p.data.ravel() for _, p in named]) if named \
        else np.zeros(0)
    return vec, pets.layout()


def pet_unflatten(pets: PETSet, vec: np.ndarray, layout=None) -> None:
    """Write a flat vector produced by ``pet_flatten`` back into a set."""
    if layout is not None and layout != pets.layout():
        raise ValueError("layout descriptor does not match this module set")
    named = pets.named_params()
    total = sum(p.size for _, p in named)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (total,):
        raise ValueError(f"expected flat vector of length {total}, got {vec.shape}")
    pos = 0
    for _, p in named:
        n = p.size
        p.data = vec[pos:pos + n].reshape(p.shape).copy()
        pos += n
