"""A from-scratch tiny vision transformer in float64 numpy.

Forward, cross-entropy loss and full backprop are hand-written so that every
parameter group exposes exact gradients (checked against central finite
differences in the test suite). All weights live in a ParameterSet, grouped
so that embeddings, attention, mlp, norm and head parameters can be frozen,
restored and merged independently.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .params import ParameterSet
from .seeding import derive_rng

_LN_EPS = 1e-6


class TrainingDivergedError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    mlp_dim: int = 64
    num_classes: int = 4
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "num_layers",
                     "num_heads", "mlp_dim", "num_classes", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def arch_hash(self) -> str:
        """Hash of the architecture (seed excluded): two inits of the same
        architecture are arithmetic-compatible."""
        fields = {k: getattr(self, k) for k in
                  ("image_size", "patch_size", "embed_dim", "num_layers",
                   "num_heads", "mlp_dim", "num_classes", "channels")}
        blob = json.dumps(fields, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TrainSpec:
    iterations: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _layout(cfg: ModelConfig):
    """(group_name, tag, [(param_name, shape), ...]) for every group."""
    d, m, c = cfg.embed_dim, cfg.mlp_dim, cfg.num_classes
    groups = [
        ("patch_embed", "patch_embed", [("W", (cfg.patch_dim, d)), ("b", (d,))]),
        ("pos_embed", "pos_embed", [("pos", (cfg.num_tokens, d))]),
        ("class_embed", "class_embed", [("cls", (d,))]),
    ]
    for i in range(cfg.num_layers):
        groups.append((f"layer{i}.attention", "attention", [
            ("Wq", (d, d)), ("bq", (d,)), ("Wk", (d, d)), ("bk", (d,)),
            ("Wv", (d, d)), ("bv", (d,)), ("Wo", (d, d)), ("bo", (d,)),
        ]))
        groups.append((f"layer{i}.mlp", "mlp", [
            ("W1", (d, m)), ("b1", (m,)), ("W2", (m, d)), ("b2", (d,)),
        ]))
        groups.append((f"layer{i}.norm", "norm", [
            ("g1", (d,)), ("c1", (d,)), ("g2", (d,)), ("c2", (d,)),
        ]))
    groups.append(("final_norm", "norm", [("g", (d,)), ("c", (d,))]))
    groups.append(("head", "head", [("W", (d, c)), ("b", (c,))]))
    return groups


def group_count(cfg: ModelConfig) -> int:
    """3 embedding groups + 3 per layer + final norm + head."""
    return 3 + 3 * cfg.num_layers + 2


def init_model(cfg: ModelConfig) -> ParameterSet:
    """Deterministic initialization for the given config seed."""
    rng = derive_rng("tinyvit-init", cfg.seed)
    d, m = cfg.embed_dim, cfg.mlp_dim
    groups, tags = {}, {}
    for gname, tag, specs in _layout(cfg):
        parts = []
        for pname, shape in specs:
            n = int(np.prod(shape))
            if pname in ("b", "bq", "bk", "bv", "bo", "b1", "b2", "c", "c1", "c2"):
                arr = np.zeros(n)
            elif pname in ("g", "g1", "g2"):
                arr = np.ones(n)
            elif pname == "pos":
                arr = 0.02 * rng.standard_normal(n)
            elif pname == "cls":
                arr = 0.02 * rng.standard_normal(n)
            elif gname == "patch_embed":
                arr = rng.standard_normal(n) / math.sqrt(cfg.patch_dim)
            elif pname == "W1":
                arr = rng.standard_normal(n) / math.sqrt(d)
            elif pname == "W2":
                arr = rng.standard_normal(n) / math.sqrt(m)
            else:
                arr = rng.standard_normal(n) / math.sqrt(d)
            parts.append(arr)
        groups[gname] = np.concatenate(parts)
        tags[gname] = tag
    return ParameterSet(groups=groups, tags=tags, model_config_hash=cfg.arch_hash())


def _unpack(params: ParameterSet, cfg: ModelConfig):
    if params.model_config_hash != cfg.arch_hash():
        raise ValueError("ParameterSet does not belong to this ModelConfig")
    out = {}
    for gname, _tag, specs in _layout(cfg):
        flat = params.groups[gname]
        views, ofs = {}, 0
        for pname, shape in specs:
            n = int(np.prod(shape))
            views[pname] = flat[ofs:ofs + n].reshape(shape)
            ofs += n
        if ofs != flat.size:
            raise ValueError(f"group {gname!r} has wrong length {flat.size}, expected {ofs}")
        out[gname] = views
    return out


def _zero_like_layout(cfg: ModelConfig):
    return {gname: {pname: np.zeros(shape) for pname, shape in specs}
            for gname, _tag, specs in _layout(cfg)}


def _pack(tree, cfg: ModelConfig) -> ParameterSet:
    groups = {gname: np.concatenate([tree[gname][pname].ravel() for pname, _ in specs])
              for gname, _tag, specs in _layout(cfg)}
    tags = {gname: tag for gname, tag, _ in _layout(cfg)}
    return ParameterSet(groups=groups, tags=tags, model_config_hash=cfg.arch_hash())


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x):
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * phi


def _layernorm(x, g, c):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + c, (xhat, inv)


def _layernorm_bwd(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dc = dy.sum(axis=tuple(range(dy.ndim - 1)))
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, dc


def _patches(batch, cfg: ModelConfig):
    n = batch.shape[0]
    s, ps, ch = cfg.image_size, cfg.patch_size, cfg.channels
    x = batch.reshape(n, s // ps, ps, s // ps, ps, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, cfg.num_patches, cfg.patch_dim)


def _check_batch(batch, cfg: ModelConfig):
    batch = np.asarray(batch, dtype=np.float64)
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if batch.ndim != 4 or batch.shape[1:] != want:
        raise ValueError(f"batch must be shaped (n, {want[0]}, {want[1]}, {want[2]}), "
                         f"got {batch.shape}")
    return batch


def _check_finite(params: ParameterSet):
    for name, arr in params.groups.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite parameter detected in group {name!r}")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _forward(params, cfg, batch, want_cache=False):
    w = _unpack(params, cfg)
    n = batch.shape[0]
    d, nh = cfg.embed_dim, cfg.num_heads
    dh = d // nh
    scale = 1.0 / math.sqrt(dh)

    patches = _patches(batch, cfg)
    x0 = patches @ w["patch_embed"]["W"] + w["patch_embed"]["b"]
    cls = np.broadcast_to(w["class_embed"]["cls"], (n, 1, d))
    x = np.concatenate([cls, x0], axis=1) + w["pos_embed"]["pos"]

    layers = []
    for i in range(cfg.num_layers):
        wa = w[f"layer{i}.attention"]
        wm = w[f"layer{i}.mlp"]
        wn = w[f"layer{i}.norm"]

        a, ln1 = _layernorm(x, wn["g1"], wn["c1"])
        q = a @ wa["Wq"] + wa["bq"]
        k = a @ wa["Wk"] + wa["bk"]
        v = a @ wa["Wv"] + wa["bv"]
        qh = q.reshape(n, -1, nh, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(n, -1, nh, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(n, -1, nh, dh).transpose(0, 2, 1, 3)
        s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=-1, keepdims=True)
        oh = att @ vh
        o = oh.transpose(0, 2, 1, 3).reshape(n, -1, d)
        attn_out = o @ wa["Wo"] + wa["bo"]
        x_att = x + attn_out

        mln, ln2 = _layernorm(x_att, wn["g2"], wn["c2"])
        h1 = mln @ wm["W1"] + wm["b1"]
        hg = _gelu(h1)
        m2 = hg @ wm["W2"] + wm["b2"]
        x_new = x_att + m2

        if want_cache:
            layers.append(dict(x=x, a=a, ln1=ln1, qh=qh, kh=kh, vh=vh, att=att,
                               o=o, x_att=x_att, mln=mln, ln2=ln2, h1=h1, hg=hg))
        x = x_new

    xf, lnf = _layernorm(x, w["final_norm"]["g"], w["final_norm"]["c"])
    logits = xf[:, 0, :] @ w["head"]["W"] + w["head"]["b"]
    if not want_cache:
        return logits, None
    cache = dict(w=w, patches=patches, layers=layers, x_last=x, xf=xf, lnf=lnf,
                 scale=scale, n=n, d=d, nh=nh, dh=dh)
    return logits, cache


def forward(params: ParameterSet, cfg: ModelConfig, batch) -> np.ndarray:
    """Logits (n, num_classes) for a batch of images (n, S, S, C)."""
    batch = _check_batch(batch, cfg)
    _check_finite(params)
    logits, _ = _forward(params, cfg, batch)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return logits


def _backward(dlogits, cache, cfg):
    w = cache["w"]
    n, d, nh, dh = cache["n"], cache["d"], cache["nh"], cache["dh"]
    scale = cache["scale"]
    g = _zero_like_layout(cfg)

    xf = cache["xf"]
    g["head"]["W"][:] = xf[:, 0, :].T @ dlogits
    g["head"]["b"][:] = dlogits.sum(axis=0)
    dxf = np.zeros_like(xf)
    dxf[:, 0, :] = dlogits @ w["head"]["W"].T

    dx, dg, dc = _layernorm_bwd(dxf, w["final_norm"]["g"], cache["lnf"])
    g["final_norm"]["g"][:] = dg
    g["final_norm"]["c"][:] = dc

    for i in reversed(range(cfg.num_layers)):
        L = cache["layers"][i]
        wa = w[f"layer{i}.attention"]
        wm = w[f"layer{i}.mlp"]
        wn = w[f"layer{i}.norm"]

        # mlp block: x_new = x_att + m2
        dm2 = dx
        g[f"layer{i}.mlp"]["W2"][:] = L["hg"].reshape(-1, cfg.mlp_dim).T @ dm2.reshape(-1, d)
        g[f"layer{i}.mlp"]["b2"][:] = dm2.sum(axis=(0, 1))
        dhg = dm2 @ wm["W2"].T
        dh1 = dhg * _gelu_grad(L["h1"])
        g[f"layer{i}.mlp"]["W1"][:] = L["mln"].reshape(-1, d).T @ dh1.reshape(-1, cfg.mlp_dim)
        g[f"layer{i}.mlp"]["b1"][:] = dh1.sum(axis=(0, 1))
        dmln = dh1 @ wm["W1"].T
        dx_att, dg2, dc2 = _layernorm_bwd(dmln, wn["g2"], L["ln2"])
        g[f"layer{i}.norm"]["g2"][:] = dg2
        g[f"layer{i}.norm"]["c2"][:] = dc2
        dx_att = dx_att + dx  # residual

        # attention block: x_att = x + attn_out
        dattn = dx_att
        g[f"layer{i}.attention"]["Wo"][:] = L["o"].reshape(-1, d).T @ dattn.reshape(-1, d)
        g[f"layer{i}.attention"]["bo"][:] = dattn.sum(axis=(0, 1))
        do = dattn @ wa["Wo"].T
        doh = do.reshape(n, -1, nh, dh).transpose(0, 2, 1, 3)
        datt = doh @ L["vh"].transpose(0, 1, 3, 2)
        dvh = L["att"].transpose(0, 1, 3, 2) @ doh
        ds = L["att"] * (datt - (datt * L["att"]).sum(axis=-1, keepdims=True))
        dqh = (ds @ L["kh"]) * scale
        dkh = (ds.transpose(0, 1, 3, 2) @ L["qh"]) * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(n, -1, d)
        dk = dkh.transpose(0, 2, 1, 3).reshape(n, -1, d)
        dv = dvh.transpose(0, 2, 1, 3).reshape(n, -1, d)
        a2 = L["a"].reshape(-1, d)
        g[f"layer{i}.attention"]["Wq"][:] = a2.T @ dq.reshape(-1, d)
        g[f"layer{i}.attention"]["bq"][:] = dq.sum(axis=(0, 1))
        g[f"layer{i}.attention"]["Wk"][:] = a2.T @ dk.reshape(-1, d)
        g[f"layer{i}.attention"]["bk"][:] = dk.sum(axis=(0, 1))
        g[f"layer{i}.attention"]["Wv"][:] = a2.T @ dv.reshape(-1, d)
        g[f"layer{i}.attention"]["bv"][:] = dv.sum(axis=(0, 1))
        da = dq @ wa["Wq"].T + dk @ wa["Wk"].T + dv @ wa["Wv"].T
        dx_ln, dg1, dc1 = _layernorm_bwd(da, wn["g1"], L["ln1"])
        g[f"layer{i}.norm"]["g1"][:] = dg1
        g[f"layer{i}.norm"]["c1"][:] = dc1
        dx = dx_ln + dx_att  # residual

    g["pos_embed"]["pos"][:] = dx.sum(axis=0)
    g["class_embed"]["cls"][:] = dx[:, 0, :].sum(axis=0)
    dx0 = dx[:, 1:, :]
    g["patch_embed"]["W"][:] = cache["patches"].reshape(-1, cfg.patch_dim).T \
        @ dx0.reshape(-1, d)
    g["patch_embed"]["b"][:] = dx0.sum(axis=(0, 1))
    return g


def loss_and_grad(params: ParameterSet, cfg: ModelConfig, batch, labels,
                  freeze_tags=()) -> tuple[float, ParameterSet]:
    """Mean cross-entropy over the batch and its gradient ParameterSet.

    Groups whose tag is in freeze_tags get an exactly-zero gradient.
    """
    batch = _check_batch(batch, cfg)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != batch.shape[0]:
        raise ValueError("labels must be a flat array matching the batch size")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError(f"label out of range [0, {cfg.num_classes})")
    _check_finite(params)

    logits, cache = _forward(params, cfg, batch, want_cache=True)
    n = logits.shape[0]
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), labels]))

    probs = np.exp(logits - zmax)
    probs /= probs.sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    g = _backward(dlogits, cache, cfg)
    grad = _pack(g, cfg)
    if freeze_tags:
        frozen = set(freeze_tags)
        grad = ParameterSet(
            groups={k: (np.zeros_like(v) if grad.tags[k] in frozen else v)
                    for k, v in grad.groups.items()},
            tags=dict(grad.tags),
            model_config_hash=grad.model_config_hash,
        )
    return loss, grad


def logit_grad(params: ParameterSet, cfg: ModelConfig, image,
               class_idx: int) -> tuple[np.ndarray, ParameterSet]:
    """Logits for one image and the exact gradient of logits[class_idx]."""
    batch = _check_batch(np.asarray(image)[None, ...], cfg)
    _check_finite(params)
    logits, cache = _forward(params, cfg, batch, want_cache=True)
    if not 0 <= class_idx < cfg.num_classes:
        raise ValueError("class_idx out of range")
    dlogits = np.zeros_like(logits)
    dlogits[0, class_idx] = 1.0
    g = _backward(dlogits, cache, cfg)
    return logits[0], _pack(g, cfg)


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

def finetune(params: ParameterSet, cfg: ModelConfig, dataset, spec: TrainSpec,
             freeze_tags=()) -> ParameterSet:
    """Train with minibatch SGD/Adam; frozen groups stay bit-identical."""
    images, labels = dataset
    images = _check_batch(images, cfg)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    if spec.iterations == 0:
        return params

    frozen = set(freeze_tags)
    rng = derive_rng("tinyvit-train", spec.seed)
    cur = {k: v.copy() for k, v in params.groups.items()}
    tags = dict(params.tags)
    mstate = {k: np.zeros_like(v) for k, v in cur.items()}
    vstate = {k: np.zeros_like(v) for k, v in cur.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = images.shape[0]

    for it in range(spec.iterations):
        if spec.batch_size >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=spec.batch_size, replace=False)
        ps = ParameterSet(groups={k: v for k, v in cur.items()}, tags=tags,
                          model_config_hash=params.model_config_hash)
        loss, grad = loss_and_grad(ps, cfg, images[idx], labels[idx], freeze_tags=frozen)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}")
        for k in cur:
            if tags[k] in frozen:
                continue
            gk = grad.groups[k]
            if spec.optimizer == "sgd":
                cur[k] = cur[k] - spec.learning_rate * gk
            else:
                mstate[k] = b1 * mstate[k] + (1 - b1) * gk
                vstate[k] = b2 * vstate[k] + (1 - b2) * gk * gk
                mhat = mstate[k] / (1 - b1 ** (it + 1))
                vhat = vstate[k] / (1 - b2 ** (it + 1))
                cur[k] = cur[k] - spec.learning_rate * mhat / (np.sqrt(vhat) + eps)

    out_groups = {k: (params.groups[k] if tags[k] in frozen else cur[k]) for k in cur}
    return ParameterSet(groups=out_groups, tags=tags,
                        model_config_hash=params.model_config_hash)


def evaluate(params: ParameterSet, cfg: ModelConfig, dataset) -> float:
    """Fraction of argmax-correct predictions; ties resolve to the lowest
    class index (numpy argmax takes the first maximum)."""
    images, labels = dataset
    images = _check_batch(images, cfg)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    logits = forward(params, cfg, images)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == labels))
