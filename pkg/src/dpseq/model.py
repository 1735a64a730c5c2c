"""The DPSeq network: patch stem, Sequencer stages, pooled MLP head, classifier."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .archive import ArchiveError, load_archive, save_archive
from .bilstm2d import BiLstm2dParams, bilstm2d_forward
from .tensor import ShapeError, Tensor, dropout, gelu, layer_norm, linear, relu

TISSUE_CLASSES = ("ADI", "BACK", "DEB", "LYM", "MUC", "MUS", "NORM", "STR", "TUM")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class CheckpointShapeError(ArchiveError):
    def __init__(self, key: str, expected, found):
        super().__init__(f"tensor {key!r}: expected shape {tuple(expected)}, archive has {tuple(found)}")
        self.key = key


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 7
    in_chans: int = 3
    depths: tuple[int, ...] = (4, 3, 8, 4)
    dims: tuple[int, ...] = (192, 384, 384, 384)
    hidden: tuple[int, ...] = (48, 96, 96, 96)
    # one flag per stage boundary: 2x2 patch merge between stage i and i+1
    downsample: tuple[bool, ...] = (True, False, False)
    mlp_ratio: int = 3
    head_dims: tuple[int, ...] = (256, 32)
    dropout: float = 0.1
    n_classes: int = 9
    norm_mean: tuple[float, ...] = IMAGENET_MEAN
    norm_std: tuple[float, ...] = IMAGENET_STD
    ln_eps: float = 1e-6

    def __post_init__(self):
        n = len(self.depths)
        if not (len(self.dims) == len(self.hidden) == n and len(self.downsample) == n - 1):
            raise ValueError("depths, dims, hidden need one entry per stage and downsample one per boundary")
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        grid = self.image_size // self.patch_size
        for flag in self.downsample:
            if flag:
                if grid % 2:
                    raise ValueError(f"cannot 2x-downsample a {grid}x{grid} grid")
                grid //= 2
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if len(self.norm_mean) != self.in_chans or len(self.norm_std) != self.in_chans:
            raise ValueError("normalization constants need one entry per input channel")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """Reduced layout for tests and desk-scale experiments: 28x28 tiles, 4x4 grid."""
        base = dict(image_size=28, depths=(1, 1, 1, 1), dims=(8, 12, 12, 12), hidden=(2, 3, 3, 3),
                    downsample=(True, False, False), mlp_ratio=2, head_dims=(8, 4), n_classes=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class Linear:
    W: Tensor  # (out, in)
    b: Tensor

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator, dtype) -> "Linear":
        bound = 1.0 / np.sqrt(fan_in)
        W = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype), requires_grad=True)
        return cls(W, Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield prefix + "W", self.W
        yield prefix + "b", self.b


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, c: int, dtype) -> "Norm":
        return cls(Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(c, dtype=dtype), requires_grad=True))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta


@dataclass
class SequencerBlockParams:
    norm1: Norm
    mixer: BiLstm2dParams
    norm2: Norm
    mlp_in: Linear
    mlp_out: Linear

    @classmethod
    def init(cls, dim: int, hidden: int, mlp_ratio: int, rng, dtype) -> "SequencerBlockParams":
        return cls(Norm.init(dim, dtype), BiLstm2dParams.init(dim, hidden, rng, dtype), Norm.init(dim, dtype),
                   Linear.init(dim, dim * mlp_ratio, rng, dtype), Linear.init(dim * mlp_ratio, dim, rng, dtype))

    @classmethod
    def zeros(cls, dim: int, hidden: int, mlp_ratio: int, dtype=np.float32) -> "SequencerBlockParams":
        def z(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        e = dim * mlp_ratio
        return cls(Norm(z(dim), z(dim)), BiLstm2dParams.zeros(dim, hidden, dtype), Norm(z(dim), z(dim)),
                   Linear(z(e, dim), z(e)), Linear(z(dim, e), z(dim)))

    def named_parameters(self, prefix: str, mixer_prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.norm1.named_parameters(prefix + "norm1.")
        yield from self.mixer.named_parameters(mixer_prefix)
        yield from self.norm2.named_parameters(prefix + "norm2.")
        yield from self.mlp_in.named_parameters(prefix + "mlp.in.")
        yield from self.mlp_out.named_parameters(prefix + "mlp.out.")


def sequencer_block(x: Tensor, p: SequencerBlockParams, eps: float = 1e-6) -> Tensor:
    """Pre-norm residual block: BiLSTM2D token mixing, then a channel MLP."""
    if x.shape[-1] != p.mixer.channels:
        raise ShapeError(f"sequencer_block: input {x.shape} vs block width {p.mixer.channels}")
    x = x + bilstm2d_forward(layer_norm(x, p.norm1.gamma, p.norm1.beta, eps), p.mixer)
    return x + p.mlp_out(gelu(p.mlp_in(layer_norm(x, p.norm2.gamma, p.norm2.beta, eps))))


def patch_embed(tiles: Tensor, proj: Linear, patch: int) -> Tensor:
    """Project non-overlapping ``patch``x``patch`` patches: (B, H, W, C) -> (B, H/p, W/p, E)."""
    b, h, w, c = tiles.shape
    if h % patch or w % patch:
        raise ShapeError(f"tile {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    x = tiles.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return proj(x.reshape(b, gh, gw, patch * patch * c))


def patch_merge(x: Tensor, proj: Linear) -> Tensor:
    b, h, w, c = x.shape
    x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return proj(x.reshape(b, h // 2, w // 2, 4 * c))


class DpseqModel:
    """Full parameter set plus forward pass.

    Inputs are (B, H, W, C) or (H, W, C) arrays already normalized with
    :meth:`normalize`. Passing ``rng`` to :meth:`forward` enables dropout.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config
        self.stem = Linear.init(c.patch_size ** 2 * c.in_chans, c.dims[0], rng, self.dtype)
        self.stages: list[list[SequencerBlockParams]] = []
        self.transitions: dict[int, Linear] = {}
        for s, (depth, dim, hid) in enumerate(zip(c.depths, c.dims, c.hidden)):
            if s > 0:
                prev = c.dims[s - 1]
                if c.downsample[s - 1]:
                    self.transitions[s - 1] = Linear.init(4 * prev, dim, rng, self.dtype)
                elif prev != dim:
                    self.transitions[s - 1] = Linear.init(prev, dim, rng, self.dtype)
            self.stages.append([SequencerBlockParams.init(dim, hid, c.mlp_ratio, rng, self.dtype)
                                for _ in range(depth)])
        self.norm = Norm.init(c.feature_dim, self.dtype)
        widths = (c.feature_dim, *c.head_dims)
        self.head = [Linear.init(a, b, rng, self.dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.classifier = Linear.init(widths[-1], c.n_classes, rng, self.dtype)

    # -- parameters -----------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.stem.named_parameters("stem.")
        for s, blocks in enumerate(self.stages):
            for i, blk in enumerate(blocks):
                yield from blk.named_parameters(f"blocks.{s}.{i}.", f"bilstm2d.{s}.{i}.")
            if s in self.transitions:
                yield from self.transitions[s].named_parameters(f"downsample.{s}.")
        yield from self.norm.named_parameters("norm.")
        for j, layer in enumerate(self.head):
            yield from layer.named_parameters(f"head.{j}.")
        yield from self.classifier.named_parameters("classifier.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise ArchiveError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, arr in state.items():
            if k not in params:
                continue
            t = params[k]
            if tuple(arr.shape) != t.shape:
                raise CheckpointShapeError(k, t.shape, arr.shape)
            t.data = np.array(arr, dtype=self.dtype)

    def checksum(self, prefix_filter=None) -> str:
        h = hashlib.sha256()
        for k, t in self.named_parameters():
            if prefix_filter is not None and not prefix_filter(k):
                continue
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def backbone_checksum(self) -> str:
        """Checksum of everything below the classifier layer."""
        return self.checksum(lambda k: not k.startswith("classifier."))

    # -- forward --------------------------------------------------------
    def normalize(self, tiles: np.ndarray) -> np.ndarray:
        """8-bit RGB tiles -> standardized float array in the model dtype."""
        x = np.asarray(tiles, dtype=np.float64) / 255.0
        x = (x - np.asarray(self.config.norm_mean)) / np.asarray(self.config.norm_std)
        return x.astype(self.dtype)

    def features(self, x) -> Tensor:
        c = self.config
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1:] != (c.image_size, c.image_size, c.in_chans):
            raise ShapeError(
                f"expected tiles of shape (B, {c.image_size}, {c.image_size}, {c.in_chans}), got {x.shape}")
        x = patch_embed(x, self.stem, c.patch_size)
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = sequencer_block(x, blk, c.ln_eps)
            if s in self.transitions:
                t = self.transitions[s]
                x = patch_merge(x, t) if c.downsample[s] else t(x)
        x = layer_norm(x, self.norm.gamma, self.norm.beta, c.ln_eps)
        return x.mean(axis=(1, 2))

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        """Logits for a batch (B, n_classes) or a single tile (n_classes,)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        h = self.features(x)
        for layer in self.head:
            h = dropout(relu(layer(h)), self.config.dropout, rng)
        logits = self.classifier(h)
        return logits.reshape(logits.shape[1:]) if single else logits

    __call__ = forward

    def predict_proba(self, tiles_u8: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Softmax probabilities for 8-bit tiles, evaluated in batches without a tape."""
        from .tensor import softmax
        tiles_u8 = np.asarray(tiles_u8)
        out = []
        for i in range(0, len(tiles_u8), batch_size):
            out.append(softmax(self.forward(self.normalize(tiles_u8[i:i + batch_size]))).data)
        if not out:
            return np.zeros((0, self.config.n_classes))
        return np.concatenate(out).astype(np.float64)

    # -- head replacement ----------------------------------------------
    def replace_head(self, n_classes_new: int, seed: int = 0) -> "DpseqModel":
        """Copy of the model with a freshly initialized ``n_classes_new``-way classifier."""
        if n_classes_new < 2:
            raise ValueError("n_classes_new must be at least 2")
        new = copy.deepcopy(self)
        new.config = dataclasses.replace(self.config, n_classes=n_classes_new)
        rng = np.random.default_rng(seed)
        new.classifier = Linear.init(self.classifier.W.shape[1], n_classes_new, rng, self.dtype)
        return new


def _is_backbone(key: str) -> bool:
    return not (key.startswith("head.") or key.startswith("classifier."))


def save_checkpoint(model: DpseqModel, path) -> None:
    save_archive(path, model.state_dict(), meta={"config": model.config.to_dict()})


def load_checkpoint(path, dtype=np.float32) -> DpseqModel:
    tensors, meta = load_archive(path)
    if "config" not in meta:
        raise ArchiveError(f"{path}: archive carries no model config")
    model = DpseqModel(ModelConfig.from_dict(meta["config"]), dtype=dtype)
    model.load_state_dict(tensors)
    return model


def load_pretrained_backbone(model: DpseqModel, path) -> list[str]:
    """Copy every tensor before the pooling layer from an external archive.

    Returns the loaded keys. Head and classifier tensors in the archive are ignored.
    """
    tensors, _ = load_archive(path)
    params = dict(model.named_parameters())
    wanted = [k for k in params if _is_backbone(k)]
    missing = [k for k in wanted if k not in tensors]
    if missing:
        raise ArchiveError(f"{path}: backbone tensors missing, e.g. {missing[:3]}")
    model.load_state_dict({k: tensors[k] for k in wanted}, strict=False)
    return wanted


def write_config(config: ModelConfig, path) -> None:
    Path(path).write_text(config.to_json() + "\n")
