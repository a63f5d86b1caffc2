"""Model family: patch tokenizer, encoder backbone, reconstruction decoder,
and per-task classification heads sharing one feature space.

The encoder always runs unmasked; masking happens afterwards by replacing the
features at masked token positions with a learned mask-token vector before
the decoder. Classification pools the full, unmasked feature sequence, so the
classification path never sees a mask plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    input_height: int = 16
    input_width: int = 16
    channels: int = 1
    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 2
    kind: str = "transformer"  # or "mlp"
    mlp_ratio: int = 4
    decoder_depth: int = 2

    def __post_init__(self):
        for name in ("input_height", "input_width", "channels", "patch_size",
                     "embed_dim", "depth", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decoder_depth < 0:
            raise ConfigError(f"decoder_depth must be >= 0, got {self.decoder_depth}")
        if self.input_height % self.patch_size or self.input_width % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide "
                f"{self.input_height}x{self.input_width}")
        if self.tokens < 2:
            raise ConfigError(f"need at least 2 tokens, got {self.tokens}")
        if self.kind not in ("transformer", "mlp"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "transformer" and self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def tokens(self) -> int:
        return (self.input_height // self.patch_size) * (self.input_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class MaskPlan:
    """Seeded choice of token positions hidden from the reconstruction path."""
    token_count: int
    masked_indices: np.ndarray  # sorted unique ints
    seed: int


def make_mask_plan(token_count: int, mask_ratio: float, seed: int) -> MaskPlan:
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    k = int(np.floor(mask_ratio * token_count + 0.5))
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.sort(rng.choice(token_count, size=k, replace=False)).astype(np.int64)
    return MaskPlan(token_count=token_count, masked_indices=idx, seed=seed)


def patchify(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """[N,C,H,W] or [C,H,W] -> [N,tokens,patch_dim] / [tokens,patch_dim].

    Patches are taken in grid row-major order; each patch flattens its
    (C, p, p) block row-major, so unpatchify(patchify(x)) == x.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    n, c, h, w = x.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = (x.reshape(n, c, gh, p, gw, p)
           .transpose(0, 2, 4, 1, 3, 5)
           .reshape(n, gh * gw, c * p * p))
    return out[0] if single else out


def unpatchify(tokens: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    single = tokens.ndim == 2
    t = tokens[None] if single else tokens
    n = t.shape[0]
    p = cfg.patch_size
    c = cfg.channels
    gh, gw = cfg.input_height // p, cfg.input_width // p
    out = (t.reshape(n, gh, gw, c, p, p)
           .transpose(0, 3, 1, 4, 2, 5)
           .reshape(n, c, gh * p, gw * p))
    return out[0] if single else out


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


class MixModel:
    """Shared backbone plus one reconstruction head and 1..T classifier heads.

    Parameters live in an insertion-ordered dict; creation order is fixed so
    enumeration, init-RNG consumption, and checkpoints are all stable. Names
    are prefixed ``backbone.`` / ``recon.`` / ``cls{task}.``; biases end in
    ``.b`` and norm gains in ``.g`` (the two groups weight decay skips).
    """

    def __init__(self, cfg: BackboneConfig, task_classes: Mapping[int, int],
                 mask_ratio: float = 0.75, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        if not 0.0 <= mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
        if not task_classes:
            raise ConfigError("at least one classification task is required")
        self.cfg = cfg
        self.mask_ratio = float(mask_ratio)
        self.task_classes = dict(sorted(task_classes.items()))
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = rng or np.random.default_rng(0)
        self._build(rng)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def _add_linear(self, prefix: str, din: int, dout: int, rng) -> None:
        self._add(f"{prefix}.w", _trunc_normal(rng, (din, dout), 0.02, self.dtype))
        self._add(f"{prefix}.b", np.zeros(dout))

    def _add_ln(self, prefix: str, d: int) -> None:
        self._add(f"{prefix}.g", np.ones(d))
        self._add(f"{prefix}.b", np.zeros(d))

    def _add_block(self, prefix: str, rng) -> None:
        c = self.cfg
        e = c.embed_dim
        if c.kind == "transformer":
            self._add_ln(f"{prefix}.ln1", e)
            for part in ("q", "k", "v", "o"):
                self._add_linear(f"{prefix}.attn.{part}", e, e, rng)
            self._add_ln(f"{prefix}.ln2", e)
        else:
            self._add_ln(f"{prefix}.ln", e)
        self._add_linear(f"{prefix}.mlp.fc1", e, e * c.mlp_ratio, rng)
        self._add_linear(f"{prefix}.mlp.fc2", e * c.mlp_ratio, e, rng)

    def _build(self, rng) -> None:
        c = self.cfg
        self._add_linear("backbone.embed", c.patch_dim, c.embed_dim, rng)
        self._add("backbone.pos", _trunc_normal(rng, (c.tokens, c.embed_dim), 0.02, self.dtype))
        for i in range(c.depth):
            self._add_block(f"backbone.block{i}", rng)
        self._add_ln("backbone.out_ln", c.embed_dim)

        self._add("recon.mask_token", _trunc_normal(rng, (c.embed_dim,), 0.02, self.dtype))
        self._add("recon.pos", _trunc_normal(rng, (c.tokens, c.embed_dim), 0.02, self.dtype))
        for i in range(c.decoder_depth):
            self._add_block(f"recon.block{i}", rng)
        self._add_ln("recon.out_ln", c.embed_dim)
        self._add_linear("recon.proj", c.embed_dim, c.patch_dim, rng)

        for task_id, n_cls in self.task_classes.items():
            self._add_linear(f"cls{task_id}.head", c.embed_dim, n_cls, rng)

    # -- parameter bookkeeping ----------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def no_decay(self) -> set[str]:
        return {n for n in self.params if n.endswith(".b") or n.endswith(".g")}

    def param_subset(self, prefixes) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items()
                if any(n.startswith(pre) for pre in prefixes)}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ConfigError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, arr in arrays.items():
            p = self.params[n]
            if arr.shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {n}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(self.dtype)

    # -- forward pieces -----------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        w = self.params[f"{prefix}.w"]
        bias = self.params[f"{prefix}.b"]
        shp = x.shape
        x2 = T.reshape(x, (-1, shp[-1]))
        y = T.matmul(x2, w)
        y = T.add(y, T.broadcast_to(T.reshape(bias, (1, w.shape[1])), y.shape))
        return T.reshape(y, shp[:-1] + (w.shape[1],))

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        b, t, e = x.shape
        nh = self.cfg.num_heads
        dh = e // nh

        def heads(name):
            h = self._linear(x, f"{prefix}.{name}")
            return T.transpose(T.reshape(h, (b, t, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, e))
        return self._linear(ctx, f"{prefix}.o")

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        P = self.params
        if self.cfg.kind == "transformer":
            h = T.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
            x = T.add(x, self._attention(h, f"{prefix}.attn"))
            h = T.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
        else:
            h = T.layer_norm(x, P[f"{prefix}.ln.g"], P[f"{prefix}.ln.b"])
        h = T.gelu(self._linear(h, f"{prefix}.mlp.fc1"))
        return T.add(x, self._linear(h, f"{prefix}.mlp.fc2"))

    def _pos(self, name: str, b: int) -> Tensor:
        pos = self.params[name]
        t, e = pos.shape
        return T.broadcast_to(T.reshape(pos, (1, t, e)), (b, t, e))

    def encode(self, tokens: Tensor) -> Tensor:
        """Full (unmasked) encoder pass: [b,t,patch_dim] -> [b,t,embed_dim]."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.patch_dim:
            raise T.DimensionError(
                f"encode: expected [b, t, {self.cfg.patch_dim}], got {tokens.shape}")
        b = tokens.shape[0]
        x = self._linear(tokens, "backbone.embed")
        x = T.add(x, self._pos("backbone.pos", b))
        for i in range(self.cfg.depth):
            x = self._block(x, f"backbone.block{i}")
        P = self.params
        return T.layer_norm(x, P["backbone.out_ln.g"], P["backbone.out_ln.b"])

    def _decode(self, features: Tensor, plan: MaskPlan) -> Tensor:
        """Mask-substituted decoder pass returning predicted patch pixels."""
        b, t, e = features.shape
        keep = np.ones((1, t, 1), dtype=self.dtype)
        keep[0, plan.masked_indices, 0] = 0.0
        keep_c = Tensor(np.broadcast_to(keep, (b, t, e)))
        mask_c = Tensor(np.broadcast_to(1.0 - keep, (b, t, e)))
        token = T.broadcast_to(T.reshape(self.params["recon.mask_token"], (1, 1, e)), (b, t, e))
        x = T.add(T.mul(features, keep_c), T.mul(token, mask_c))
        x = T.add(x, self._pos("recon.pos", b))
        for i in range(self.cfg.decoder_depth):
            x = self._block(x, f"recon.block{i}")
        P = self.params
        x = T.layer_norm(x, P["recon.out_ln.g"], P["recon.out_ln.b"])
        return self._linear(x, "recon.proj")

    def reconstruct(self, features: Tensor, plan: MaskPlan, target_patches: Tensor,
                    loss_target: str = "masked") -> Tensor:
        """Reconstruction loss over the positions named by ``loss_target``."""
        b, t, _ = features.shape
        if plan.token_count != t:
            raise T.DimensionError(
                f"mask plan covers {plan.token_count} tokens, features have {t}")
        pred = self._decode(features, plan)
        if loss_target == "all":
            sel = None
        elif loss_target in ("masked", "unmasked"):
            rows = np.zeros(t, dtype=bool)
            rows[plan.masked_indices] = True
            if loss_target == "unmasked":
                rows = ~rows
            if not rows.any():
                raise ConfigError(f"loss_target={loss_target!r} selects no tokens "
                                  f"(mask ratio {len(plan.masked_indices)}/{t})")
            sel = np.broadcast_to(rows[None, :, None], pred.shape)
        else:
            raise ConfigError(f"unknown loss_target {loss_target!r}")
        return T.mse(pred, target_patches, mask=sel)

    def classify(self, features: Tensor, task_id: int) -> Tensor:
        """Mean-pool the full feature sequence, then the task's linear head."""
        if task_id not in self.task_classes:
            raise KeyError(f"unknown task_id {task_id}; registered: {sorted(self.task_classes)}")
        pooled = T.mean(features, axis=1)
        return self._linear(pooled, f"cls{task_id}.head")
