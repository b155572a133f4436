"""Small pre-norm transformer backbone and a grow-only classifier head.

The backbone is trained once on a pretext split, then permanently
frozen; per-task adaptation happens only through attached
parameter-efficient modules and freshly grown head columns.  The head
keeps one weight block per task so columns belonging to finished tasks
stay bit-identical by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import Adam
from .tensor import Tensor

# Attachment sites inside a block.
SITE_MLP_SEQUENTIAL = "mlp-sequential"
SITE_MLP_PARALLEL = "mlp-parallel"
SITE_ATTN_QV_LORA = "attn-qv-lora"
SITE_ATTN_PREFIX = "attn-prefix"
SITES = (SITE_MLP_SEQUENTIAL, SITE_MLP_PARALLEL, SITE_ATTN_QV_LORA, SITE_ATTN_PREFIX)


@dataclass(frozen=True)
class AttachmentPoint:
    """Where a tuning module hooks into the backbone."""
    block: int
    site: str


@dataclass
class BackboneConfig:
    depth: int = 4
    model_dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    input_tokens: int = 16        # content tokens; a class token is prepended
    patch_dim: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1 or self.model_dim < 1 or self.input_tokens < 1:
            raise ValueError("depth, model_dim and input_tokens must be positive")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.patch_dim < 1 or self.mlp_ratio < 1:
            raise ValueError("patch_dim and mlp_ratio must be positive")


class Backbone:
    """Frozen feature extractor: patch projection, blocks, final norm."""

    def __init__(self, cfg: BackboneConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.frozen = False

    def named_params(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def freeze(self) -> None:
        self.set_requires_grad(False)
        self.frozen = True

    def copy(self, trainable: bool = False) -> "Backbone":
        clone = Backbone(self.cfg, {k: Tensor(v.data.copy(), requires_grad=trainable)
                                    for k, v in self.params.items()})
        clone.frozen = self.frozen and not trainable
        return clone


def build_backbone(cfg: BackboneConfig) -> Backbone:
    """Deterministically initialised backbone (not yet pretrained)."""
    cfg.validate()
    gen = T.seeded_generator(cfg.seed, "backbone")
    d = cfg.model_dim
    m = cfg.mlp_ratio * d

    def tn(shape):
        return Tensor(T.truncated_normal(gen, shape, std=0.02), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {}
    params["embed.w"] = tn((cfg.patch_dim, d))
    params["embed.b"] = zeros((d,))
    params["cls"] = tn((1, 1, d))
    params["pos"] = tn((cfg.input_tokens + 1, d))
    for i in range(cfg.depth):
        pre = f"block{i}."
        params[pre + "ln1.g"] = ones((d,))
        params[pre + "ln1.b"] = zeros((d,))
        for name in ("q", "k", "v", "o"):
            params[pre + f"attn.w{name}"] = tn((d, d))
            params[pre + f"attn.b{name}"] = zeros((d,))
        params[pre + "ln2.g"] = ones((d,))
        params[pre + "ln2.b"] = zeros((d,))
        params[pre + "mlp.w1"] = tn((d, m))
        params[pre + "mlp.b1"] = zeros((m,))
        params[pre + "mlp.w2"] = tn((m, d))
        params[pre + "mlp.b2"] = zeros((d,))
    params["final_ln.g"] = ones((d,))
    params["final_ln.b"] = zeros((d,))
    return Backbone(cfg, params)


def param_count(backbone: Backbone) -> int:
    return sum(p.size for p in backbone.params.values())


def params_checksum(named: list[tuple[str, Tensor]]) -> str:
    """SHA-256 over names and raw little-endian float64 bytes."""
    h = hashlib.sha256()
    for name, p in named:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def backbone_checksum(backbone: Backbone) -> str:
    return params_checksum(backbone.named_params())


def forward_features(backbone: Backbone, batch, pets=None) -> Tensor:
    """Class-token features for a batch of token grids.

    ``batch`` is (B, input_tokens, patch_dim).  ``pets`` is an optional
    module set consulted per block; the forward never mutates it or the
    backbone.
    """
    cfg = backbone.cfg
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 3 or x.shape[1] != cfg.input_tokens or x.shape[2] != cfg.patch_dim:
        raise ValueError(
            f"expected batch of shape (B, {cfg.input_tokens}, {cfg.patch_dim}), "
            f"got {x.shape}")
    p = backbone.params
    tok = T.add(T.matmul(x, p["embed.w"]), p["embed.b"])
    cls = T.broadcast_to(p["cls"], (x.shape[0], 1, cfg.model_dim))
    seq = T.add(T.concat([cls, tok], axis=1), p["pos"])
    for i in range(cfg.depth):
        seq = _block_forward(backbone, i, seq, pets)
    seq = T.layer_norm(seq, p["final_ln.g"], p["final_ln.b"])
    return T.token_at(seq, 0)


def _block_forward(backbone: Backbone, i: int, x: Tensor, pets) -> Tensor:
    from . import pet as pet_mod  # deferred: pet builds on model's site names

    p = backbone.params
    cfg = backbone.cfg
    pre = f"block{i}."

    xn = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    q = T.add(T.matmul(xn, p[pre + "attn.wq"]), p[pre + "attn.bq"])
    k = T.add(T.matmul(xn, p[pre + "attn.wk"]), p[pre + "attn.bk"])
    v = T.add(T.matmul(xn, p[pre + "attn.wv"]), p[pre + "attn.bv"])

    lora = pets.lookup(i, SITE_ATTN_QV_LORA) if pets is not None else None
    if lora is not None:
        q = T.add(q, pet_mod.low_rank_delta_forward(lora.query, xn))
        v = T.add(v, pet_mod.low_rank_delta_forward(lora.value, xn))

    prefix = pets.lookup(i, SITE_ATTN_PREFIX) if pets is not None else None
    if prefix is not None:
        if prefix.reparam:
            attn = pet_mod.prefix_reparam_attention_qkv(prefix, q, k, v, cfg.heads)
        else:
            attn = pet_mod.prefix_concat_attention_qkv(prefix, q, k, v, cfg.heads)
    else:
        attn = T.multi_head_attention(q, k, v, cfg.heads)

    h = T.add(x, T.add(T.matmul(attn, p[pre + "attn.wo"]), p[pre + "attn.bo"]))

    hn = T.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
    m = T.add(T.matmul(T.gelu(T.add(T.matmul(hn, p[pre + "mlp.w1"]), p[pre + "mlp.b1"])),
                       p[pre + "mlp.w2"]), p[pre + "mlp.b2"])

    if pets is not None:
        seq_ad = pets.lookup(i, SITE_MLP_SEQUENTIAL)
        if seq_ad is not None:
            m = pet_mod.adapter_forward(seq_ad, m, m)
        par_ad = pets.lookup(i, SITE_MLP_PARALLEL)
        if par_ad is not None:
            m = pet_mod.adapter_forward(par_ad, hn, m)

    return T.add(h, m)


# ---------------------------------------------------------------------------
# classifier head


HEAD_INIT_STD = 0.01


class ClassifierHead:
    """Linear classifier that grows one weight block per task."""

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim
        self.blocks: list[tuple[Tensor, Tensor]] = []
        self.ranges: list[tuple[int, int]] = []

    @property
    def num_classes(self) -> int:
        return self.ranges[-1][1] if self.ranges else 0

    @property
    def boundary(self) -> int:
        """First class index of the newest block (old/new split point)."""
        return self.ranges[-1][0] if self.ranges else 0

    def trainable_params(self) -> list[Tensor]:
        return [t for w, b in self.blocks for t in (w, b) if t.requires_grad]

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for idx, (w, b) in enumerate(self.blocks):
            out.append((f"head{idx}.w", w))
            out.append((f"head{idx}.b", b))
        return out

    def old_params(self) -> list[Tensor]:
        return [t for w, b in self.blocks[:-1] for t in (w, b)]


def grow_head(head: ClassifierHead, num_new: int, gen: np.random.Generator) -> None:
    """Append a block of ``num_new`` classes; earlier blocks freeze."""
    if num_new < 1:
        raise ValueError("head must grow by at least one class")
    for w, b in head.blocks:
        w.requires_grad = False
        w.grad = None
        b.requires_grad = False
        b.grad = None
    w = Tensor(gen.normal(0.0, HEAD_INIT_STD, size=(head.feature_dim, num_new)),
               requires_grad=True)
    b = Tensor(np.zeros(num_new), requires_grad=True)
    lo = head.num_classes
    head.blocks.append((w, b))
    head.ranges.append((lo, lo + num_new))


def head_forward(head: ClassifierHead, features: Tensor) -> Tensor:
    """Logits over every class learned so far."""
    if not head.blocks:
        raise ValueError("head has no classes yet")
    w = T.concat([w for w, _ in head.blocks], axis=1)
    b = T.concat([b for _, b in head.blocks], axis=0)
    return T.add(T.matmul(features, w), b)


# ---------------------------------------------------------------------------
# pretext pretraining


def pretrain_backbone(backbone: Backbone, train_x, train_y, num_classes: int,
                      epochs: int, lr: float, batch_size: int, seed: int,
                      test_x=None, test_y=None,
                      reserved_classes=None) -> float:
    """Train end-to-end on a pretext split, then permanently freeze.

    The temporary pretext head is discarded.  ``reserved_classes`` are
    the continual-learning class ids; overlap with the pretext ids is an
    error.  Returns held-out accuracy when a test split is given, else
    final train accuracy.
    """
    if backbone.frozen:
        raise RuntimeError("backbone is already frozen")
    labels = set(np.unique(np.asarray(train_y)).tolist())
    if reserved_classes is not None:
        overlap = labels & set(int(c) for c in reserved_classes)
        if overlap:
            raise ValueError(f"pretext classes overlap continual classes: {sorted(overlap)}")

    gen = T.seeded_generator(seed, "pretrain")
    head = ClassifierHead(backbone.cfg.model_dim)
    grow_head(head, num_classes, gen)
    params = [p for _, p in backbone.named_params()] + head.trainable_params()
    opt = Adam(params, lr=lr)
    n = len(train_x)
    for _ in range(epochs):
        order = gen.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            opt.zero_grad()
            feats = forward_features(backbone, np.asarray(train_x)[idx])
            loss = T.cross_entropy(head_forward(head, feats), np.asarray(train_y)[idx])
            loss.backward()
            opt.step()

    eval_x = train_x if test_x is None else test_x
    eval_y = train_y if test_y is None else test_y
    preds = []
    for lo in range(0, len(eval_x), 256):
        feats = forward_features(backbone, np.asarray(eval_x)[lo:lo + 256])
        preds.append(np.argmax(head_forward(head, feats).data, axis=1))
    acc = float((np.concatenate(preds) == np.asarray(eval_y)).mean())

    backbone.freeze()
    return acc
