"""Micro transformer segmentation network over a patch grid.

The encoder is a 4-stage pyramid: tokens at stage j+1 come from merging 2x2
neighborhoods of stage-j tokens, so each deeper block works on a grid with
half the side length. Every block exposes the post-softmax per-head attention
maps of its final attention layer; those maps are the distillation substrate.

The decoder is a per-pixel linear classifier over the concatenation of all
block feature maps, nearest-neighbor upsampled to full resolution. Upsampling
and key pooling are expressed as matmuls with constant 0/1 (or 1/r^2)
matrices, which keeps the whole network inside the fixed differentiable
op set.

All linear maps are bias-free; offsets come from the layer-norm biases.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalError
from .tensor import Tensor

ATTENTION_ROWSUM_TOL = 1e-5


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 2
    num_blocks: int = 4
    heads_per_block: int = 2
    embed_dims: tuple = (16, 24, 32, 40)
    layers_per_block: int = 1
    key_reduction: tuple = (1, 1, 1, 1)
    num_classes: int = 2  # including background
    precision: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        self.embed_dims = tuple(self.embed_dims)
        self.key_reduction = tuple(self.key_reduction)
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if len(self.embed_dims) != self.num_blocks:
            raise ConfigError("embed_dims must list one width per block")
        if len(self.key_reduction) != self.num_blocks:
            raise ConfigError("key_reduction must list one ratio per block")
        grid = self.image_size // self.patch_size
        if grid % (1 << (self.num_blocks - 1)) != 0:
            raise ConfigError(
                f"grid side {grid} not divisible by 2^{self.num_blocks - 1}"
            )
        # equal head count across blocks is required by the per-head
        # concatenation in the attention-transfer loss
        for j, d in enumerate(self.embed_dims):
            if d % self.heads_per_block != 0:
                raise ConfigError(f"embed dim {d} of block {j} not divisible by heads")
        for j, r in enumerate(self.key_reduction):
            if self.grid_sides()[j] % r != 0:
                raise ConfigError(
                    f"key_reduction {r} does not divide grid side of block {j}"
                )
        if self.num_classes < 2:
            raise ConfigError("need at least background + one class")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    def grid_sides(self) -> list:
        g = self.image_size // self.patch_size
        return [g >> j for j in range(self.num_blocks)]

    def key_counts(self) -> list:
        return [
            (g * g) // (r * r) for g, r in zip(self.grid_sides(), self.key_reduction)
        ]

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_json(self) -> dict:
        d = asdict(self)
        d["embed_dims"] = list(self.embed_dims)
        d["key_reduction"] = list(self.key_reduction)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SegOutput:
    """Forward product: logits plus the distillation substrate."""

    logits: Tensor  # (S, S, C)
    attention: list  # [block][head] -> Tensor (U, V, K)
    block_features: list  # [block] -> Tensor (U, V, d)


def attention_shapes(config: ModelConfig) -> list:
    """(U, V, K) of each block's attention maps."""
    return [
        (g, g, k) for g, k in zip(config.grid_sides(), config.key_counts())
    ]


def _upsample_matrix(full: int, coarse: int, dtype) -> np.ndarray:
    """0/1 matrix replicating each coarse cell across its pixel footprint."""
    f = full // coarse
    e = np.zeros((full, coarse), dtype=dtype)
    e[np.arange(full), np.arange(full) // f] = 1.0
    return e


def _keypool_matrix(grid: int, r: int, dtype) -> np.ndarray:
    """(K, N) averaging matrix pooling r x r token neighborhoods."""
    n = grid * grid
    kg = grid // r
    p = np.zeros((kg * kg, n), dtype=dtype)
    w = 1.0 / (r * r)
    for u in range(grid):
        for v in range(grid):
            p[(u // r) * kg + (v // r), u * grid + v] = w
    return p


class SegmentationModel:
    """Patch-grid transformer with exposed last-layer attention per block."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.validate_attention = False
        self._build()

    # -- parameters ---------------------------------------------------------

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True, dtype=self.config.dtype)
        self.params[name] = t
        return t

    def _build(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.init_seed)
        dt = cfg.dtype

        def gauss(shape, std):
            return rng.normal(0.0, std, size=shape).astype(dt)

        p = cfg.patch_size
        d0 = cfg.embed_dims[0]
        grid0 = cfg.grid_sides()[0]
        self._param("patch_embed.w", gauss((p * p * 3, d0), 1.0 / math.sqrt(p * p * 3)))
        self._param("pos_embed", gauss((grid0 * grid0, d0), 0.02))
        for j in range(cfg.num_blocks):
            d = cfg.embed_dims[j]
            dh = d // cfg.heads_per_block
            if j > 0:
                d_prev = cfg.embed_dims[j - 1]
                self._param(
                    f"merge.{j}.w", gauss((4 * d_prev, d), 1.0 / math.sqrt(4 * d_prev))
                )
            for l in range(cfg.layers_per_block):
                base = f"blocks.{j}.{l}"
                for ln in ("ln1", "ln2"):
                    self._param(f"{base}.{ln}.gain", np.ones(d, dtype=dt))
                    self._param(f"{base}.{ln}.bias", np.zeros(d, dtype=dt))
                for h in range(cfg.heads_per_block):
                    for proj in ("q", "k", "v"):
                        self._param(
                            f"{base}.attn.{proj}.{h}",
                            gauss((d, dh), 1.0 / math.sqrt(d)),
                        )
                self._param(f"{base}.attn.out", gauss((d, d), 1.0 / math.sqrt(d)))
                self._param(f"{base}.ffn.w1", gauss((d, 2 * d), 1.0 / math.sqrt(d)))
                self._param(f"{base}.ffn.w2", gauss((2 * d, d), 1.0 / math.sqrt(2 * d)))
        total_dim = sum(cfg.embed_dims)
        self._param(
            "head.w", gauss((total_dim, cfg.num_classes), 1.0 / math.sqrt(total_dim))
        )
        self._constants = {}

    def _constant(self, key, build) -> Tensor:
        t = self._constants.get(key)
        if t is None:
            t = Tensor(build(), requires_grad=False, dtype=self.config.dtype)
            self._constants[key] = t
        return t

    # -- forward ------------------------------------------------------------

    def forward(self, image: np.ndarray) -> SegOutput:
        cfg = self.config
        s = cfg.image_size
        if image.shape != (s, s, 3):
            raise ConfigError(f"image shape {image.shape}, expected {(s, s, 3)}")
        x = Tensor(image, requires_grad=False, dtype=cfg.dtype)
        p = cfg.patch_size
        grid0 = cfg.grid_sides()[0]

        # non-overlapping patches -> linear embedding + position embedding
        x = T.reshape(x, (grid0, p, grid0, p, 3))
        x = T.transpose(x, (0, 2, 1, 3, 4))
        x = T.reshape(x, (grid0 * grid0, p * p * 3))
        tokens = T.matmul(x, self.params["patch_embed.w"])
        tokens = T.add(tokens, self.params["pos_embed"])

        attention: list = []
        block_features: list = []
        for j in range(cfg.num_blocks):
            grid = cfg.grid_sides()[j]
            d = cfg.embed_dims[j]
            if j > 0:
                prev = cfg.grid_sides()[j - 1]
                d_prev = cfg.embed_dims[j - 1]
                t = T.reshape(tokens, (prev, prev, d_prev))
                t = T.reshape(t, (grid, 2, grid, 2, d_prev))
                t = T.transpose(t, (0, 2, 1, 3, 4))
                t = T.reshape(t, (grid * grid, 4 * d_prev))
                tokens = T.matmul(t, self.params[f"merge.{j}.w"])
            last_heads = None
            for l in range(cfg.layers_per_block):
                tokens, last_heads = self._attention_layer(tokens, j, l, grid)
            attention.append(
                [T.reshape(a, (grid, grid, a.shape[-1])) for a in last_heads]
            )
            block_features.append(T.reshape(tokens, (grid, grid, d)))

        if self.validate_attention:
            self._check_attention_rows(attention)

        # nearest-neighbor upsample every block's features, concat, classify
        upsampled = [
            self._upsample(feat, s) for feat in block_features
        ]
        fused = T.concat(upsampled)
        flat = T.reshape(fused, (s * s, sum(cfg.embed_dims)))
        logits = T.matmul(flat, self.params["head.w"])
        logits = T.reshape(logits, (s, s, cfg.num_classes))
        return SegOutput(logits=logits, attention=attention, block_features=block_features)

    def _attention_layer(self, tokens: Tensor, j: int, l: int, grid: int):
        cfg = self.config
        d = cfg.embed_dims[j]
        dh = d // cfg.heads_per_block
        r = cfg.key_reduction[j]
        base = f"blocks.{j}.{l}"
        h_in = T.layer_norm(
            tokens, self.params[f"{base}.ln1.gain"], self.params[f"{base}.ln1.bias"]
        )
        if r > 1:
            pool = self._constant(
                ("keypool", grid, r), lambda: _keypool_matrix(grid, r, cfg.dtype)
            )
            kv_src = T.matmul(pool, h_in)
        else:
            kv_src = h_in
        probs = []
        head_outs = []
        inv_sqrt = 1.0 / math.sqrt(dh)
        for h in range(cfg.heads_per_block):
            q = T.matmul(h_in, self.params[f"{base}.attn.q.{h}"])
            k = T.matmul(kv_src, self.params[f"{base}.attn.k.{h}"])
            v = T.matmul(kv_src, self.params[f"{base}.attn.v.{h}"])
            scores = T.scale(T.matmul(q, T.transpose(k, (1, 0))), inv_sqrt)
            a = T.softmax(scores)  # (N, K) post-softmax rows
            probs.append(a)
            head_outs.append(T.matmul(a, v))
        merged = T.matmul(T.concat(head_outs), self.params[f"{base}.attn.out"])
        tokens = T.add(tokens, merged)
        h2 = T.layer_norm(
            tokens, self.params[f"{base}.ln2.gain"], self.params[f"{base}.ln2.bias"]
        )
        f = T.matmul(T.gelu(T.matmul(h2, self.params[f"{base}.ffn.w1"])), self.params[f"{base}.ffn.w2"])
        tokens = T.add(tokens, f)
        return tokens, probs

    def _upsample(self, feat: Tensor, full: int) -> Tensor:
        u, v, d = feat.shape
        e = self._constant(
            ("upsample", full, u), lambda: _upsample_matrix(full, u, self.config.dtype)
        )
        t = T.reshape(feat, (u, v * d))
        t = T.matmul(e, t)  # (full, v*d)
        t = T.reshape(t, (full, v, d))
        t = T.transpose(t, (1, 0, 2))
        t = T.reshape(t, (v, full * d))
        t = T.matmul(e, t)  # (full, full*d) rows index the v-axis now
        t = T.reshape(t, (full, full, d))
        return T.transpose(t, (1, 0, 2))

    def _check_attention_rows(self, attention: list) -> None:
        for j, heads in enumerate(attention):
            for h, a in enumerate(heads):
                sums = a.data.sum(axis=-1)
                if not np.allclose(sums, 1.0, atol=ATTENTION_ROWSUM_TOL):
                    raise NumericalRowError(j, h, float(np.abs(sums - 1.0).max()))

    # -- class-incremental surface ------------------------------------------

    def expand_head(self, new_class_count: int, seed: int) -> None:
        """Grow the classifier with freshly seeded columns; old columns untouched."""
        cfg = self.config
        if new_class_count <= cfg.num_classes:
            raise ConfigError(
                f"head can only grow: {cfg.num_classes} -> {new_class_count}"
            )
        old = self.params["head.w"].data
        rng = np.random.default_rng(seed)
        extra = rng.normal(0.0, 0.01, size=(old.shape[0], new_class_count - cfg.num_classes))
        new_w = np.concatenate([old, extra.astype(cfg.dtype)], axis=1)
        self.params["head.w"] = Tensor(new_w, requires_grad=True, dtype=cfg.dtype)
        self.config = ModelConfig(**{**cfg.to_json(), "num_classes": new_class_count})

    def snapshot(self) -> "SegmentationModel":
        """Frozen deep copy; its forward never records on a tape."""
        clone = SegmentationModel.__new__(SegmentationModel)
        clone.config = ModelConfig(**self.config.to_json())
        clone.validate_attention = False
        clone.params = {
            name: Tensor(p.data.copy(), requires_grad=False, dtype=self.config.dtype)
            for name, p in self.params.items()
        }
        clone._constants = {}
        return clone

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        """Parameter snapshot plus a model-config JSON sidecar."""
        T.save_parameters(path, self.params)
        sidecar = str(path) + ".json"
        with open(sidecar, "w") as fh:
            json.dump(self.config.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SegmentationModel":
        with open(str(path) + ".json") as fh:
            config = ModelConfig.from_json(json.load(fh))
        model = cls(config)
        stored = T.load_parameters(path)
        if set(stored) != set(model.params):
            missing = set(model.params) ^ set(stored)
            raise ConfigError(f"snapshot/config parameter mismatch: {sorted(missing)}")
        for name, arr in stored.items():
            if model.params[name].shape != arr.shape:
                raise ConfigError(
                    f"{name}: stored shape {arr.shape} vs model {model.params[name].shape}"
                )
            model.params[name] = Tensor(
                arr, requires_grad=True, dtype=config.dtype
            )
        return model


class NumericalRowError(Exception):
    """Attention rows failed the sums-to-one invariant."""

    def __init__(self, block, head, deviation):
        super().__init__(
            f"attention rows of block {block} head {head} deviate from 1 by {deviation:.2e}"
        )
