"""Full network assembly, losses with gradients, and checkpoints.

Pipeline: conv stem -> primary capsules -> CapsLayer 1 -> chain of
``n_blocks`` residual blocks (two capsule layers each) -> CapsLayer 2 (one
capsule per class) -> capsule lengths for classification, plus a masked
reconstruction decoder.

Three variants share one parameter set:

``mocapsnet``  momentum stepping through the chain (reversible or stored)
``rescapsnet`` classic residual blocks, both shortcuts from the block input
``capsnet``    the same layers without shortcuts
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from mocaps import autodiff as ad
from mocaps import capsnn
from mocaps.autodiff import Tape, value
from mocaps.reversible import (
    ChainState, MomentumConfig, NotInvertibleError, ReversibleChain, classic_residual_block,
)
from mocaps.tensor import RngState, normal_init, resolve_dtype

VARIANTS = ("mocapsnet", "rescapsnet", "capsnet")

DATASETS = {
    # name: (channels, size, classes)
    "mnist": (1, 28, 10),
    "cifar10": (3, 32, 10),
    "svhn": (3, 32, 10),
    "synthetic": (1, 28, 10),
}


@dataclass(frozen=True)
class NetworkConfig:
    dataset: str = "mnist"
    n_blocks: int = 1
    capsules: int = 32
    capsule_dim: int = 16
    routing_iterations: int = 3
    gamma: float = 0.9
    variant: str = "mocapsnet"
    dtype: str = "f32"
    classes: int | None = None
    image_channels: int | None = None
    image_size: int | None = None
    stem_channels: int = 256
    stem_kernel: int = 9
    primary_kernel: int = 9
    primary_stride: int = 2
    primary_groups: int = 32
    primary_dim: int = 8
    recon_hidden: tuple = (512, 1024)
    lambda_recon: float = 5e-4
    init_std: float = 0.01

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; choose from {sorted(DATASETS)}")
        ch, size, classes = DATASETS[self.dataset]
        if self.classes is None:
            object.__setattr__(self, "classes", classes)
        if self.image_channels is None:
            object.__setattr__(self, "image_channels", ch)
        if self.image_size is None:
            object.__setattr__(self, "image_size", size)
        object.__setattr__(self, "recon_hidden", tuple(self.recon_hidden))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.routing_iterations < 1:
            raise ValueError("routing_iterations must be >= 1")
        resolve_dtype(self.dtype)
        if self.primary_spatial < 1:
            raise ValueError("image too small for the stem and primary-capsule convolutions")

    @property
    def np_dtype(self):
        return resolve_dtype(self.dtype)

    @property
    def stem_spatial(self) -> int:
        return capsnn.conv_output_size(self.image_size, self.stem_kernel, 1)

    @property
    def primary_spatial(self) -> int:
        return capsnn.conv_output_size(self.stem_spatial, self.primary_kernel, self.primary_stride)

    @property
    def n_primary(self) -> int:
        return self.primary_groups * self.primary_spatial ** 2

    @property
    def pixels(self) -> int:
        return self.image_channels * self.image_size ** 2

    @property
    def momentum(self) -> MomentumConfig:
        return MomentumConfig(gamma=self.gamma, n_blocks=self.n_blocks,
                              routing_iterations=self.routing_iterations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recon_hidden"] = list(self.recon_hidden)
        return d


def param_shapes(cfg: NetworkConfig) -> dict:
    c, d = cfg.capsules, cfg.capsule_dim
    shapes = {
        "stem.w": (cfg.stem_channels, cfg.image_channels, cfg.stem_kernel, cfg.stem_kernel),
        "stem.b": (cfg.stem_channels,),
        "primary.w": (cfg.primary_groups * cfg.primary_dim, cfg.stem_channels,
                      cfg.primary_kernel, cfg.primary_kernel),
        "primary.b": (cfg.primary_groups * cfg.primary_dim,),
        "caps1.W": (cfg.n_primary, c, d, cfg.primary_dim),
    }
    for k in range(2 * cfg.n_blocks):
        shapes[f"chain.{k}.W"] = (c, c, d, d)
    h1, h2 = cfg.recon_hidden
    shapes.update({
        "caps2.W": (c, cfg.classes, d, d),
        "recon.w1": (cfg.classes * d, h1),
        "recon.b1": (h1,),
        "recon.w2": (h1, h2),
        "recon.b2": (h2,),
        "recon.w3": (h2, cfg.pixels),
        "recon.b3": (cfg.pixels,),
    })
    return shapes


def init_params(cfg: NetworkConfig, rng: RngState) -> dict:
    """Capsule transformation matrices ~ N(0, init_std); He-normal for the
    ReLU layers, LeCun-normal for the primary and sigmoid layers; zero biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if kind.startswith("b"):
            params[name] = np.zeros(shape, dtype=cfg.np_dtype)
            continue
        if kind == "W":
            std = cfg.init_std
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            gain = 2.0 if name in _RELU_FED else 1.0
            std = float(np.sqrt(gain / fan_in))
        params[name] = normal_init(shape, 0.0, std, rng.split(name), cfg.np_dtype)
    return params


_RELU_FED = ("stem.w", "recon.w1", "recon.w2")


def param_count(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


def chain_names(cfg: NetworkConfig) -> list:
    return [f"chain.{k}.W" for k in range(2 * cfg.n_blocks)]


@dataclass
class ForwardResult:
    class_norms: np.ndarray
    class_caps: object
    recon: object
    snapshot: ChainState | None = None
    chain_in: object = None
    chain_out: object = None


def _recon_params(p):
    return {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith("recon.")}


def _chain(x, cfg: NetworkConfig, p: dict, mode: str):
    names = chain_names(cfg)
    it = cfg.routing_iterations
    if mode == "reversible":
        if cfg.variant != "mocapsnet":
            raise ValueError(f"{cfg.variant} is not invertible; use mode='stored'")
        if cfg.gamma <= 0 and names:
            raise NotInvertibleError("reversible mode needs gamma > 0")
        chain = ReversibleChain([value(p[n]) for n in names], cfg.momentum)
        tape = ad.active_tape()
        if tape is not None and tape.recording:
            return chain.record(x, [p[n] for n in names]), None
        xN = chain.forward(value(x), mode="reversible")
        snap = chain.saved_terminal
        chain.discard()
        return xN, snap
    if mode != "stored":
        raise ValueError("mode must be 'reversible' or 'stored'")
    if cfg.variant == "mocapsnet":
        chain = ReversibleChain([p[n] for n in names], cfg.momentum)
        return chain.forward(x, mode="stored"), None
    if cfg.variant == "rescapsnet":
        for k in range(0, len(names), 2):
            x = classic_residual_block(x, p[names[k]], p[names[k + 1]], it)
        return x, None
    for n in names:
        x = capsnn.capsule_layer(x, p[n], it)
    return x, None


def _graph(images, cfg: NetworkConfig, p: dict, mode: str, labels=None) -> ForwardResult:
    images = np.asarray(images, dtype=cfg.np_dtype)
    expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"images must be [batch, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")
    for name, shape in param_shapes(cfg).items():
        if name not in p:
            raise KeyError(f"missing parameter {name!r}")
        if np.shape(value(p[name])) != shape:
            raise ValueError(f"parameter {name} has shape {np.shape(value(p[name]))}, config expects {shape}")
    feats = capsnn.conv_stem(images, p["stem.w"], p["stem.b"])
    prim = capsnn.primary_capsules(feats, p["primary.w"], p["primary.b"], cfg.primary_dim,
                                   stride=cfg.primary_stride)
    x0 = capsnn.capsule_layer(prim, p["caps1.W"], cfg.routing_iterations)
    xN, snap = _chain(x0, cfg, p, mode)
    class_caps = capsnn.capsule_layer(xN, p["caps2.W"], cfg.routing_iterations)
    norms = np.sqrt((value(class_caps) ** 2).sum(axis=-1))
    if labels is None:
        labels = norms.argmax(axis=1)
    mask = capsnn.label_mask(labels, cfg.classes, cfg.np_dtype)
    recon = capsnn.reconstruction_net(class_caps, mask, _recon_params(p))
    return ForwardResult(norms, class_caps, recon, snap, x0, xN)


def forward(images, cfg: NetworkConfig, params: dict, mode: str = "stored", labels=None) -> ForwardResult:
    """Untaped forward pass.

    Reconstruction is masked with ``labels`` when given, else with the
    predicted class.
    """
    with ad.no_tape():
        return _graph(images, cfg, params, mode, labels)


def predict(images, cfg: NetworkConfig, params: dict) -> np.ndarray:
    return forward(images, cfg, params).class_norms.argmax(axis=1)


def loss_and_grads(images, labels, cfg: NetworkConfig, params: dict, mode: str = "reversible",
                   target=None, ledger=None):
    """Total loss breakdown and parameter gradients for one batch.

    ``target`` is the reconstruction target (flattened or image-shaped,
    values in [0, 1]); it defaults to ``images`` itself.
    """
    images = np.asarray(images, dtype=cfg.np_dtype)
    target = images if target is None else np.asarray(target, dtype=cfg.np_dtype)
    target = target.reshape(images.shape[0], -1)
    tape = Tape(ledger=ledger)
    try:
        with tape:
            pv = {k: tape.leaf(v, name=k) for k, v in params.items()}
            out = _graph(images, cfg, pv, mode, labels=labels)
            margin = capsnn.margin_loss(out.class_caps, labels)
            recon = capsnn.reconstruction_loss(out.recon, target)
            total = capsnn.total_loss(margin, recon, cfg.lambda_recon)
        breakdown = capsnn.loss_breakdown(margin, recon, cfg.lambda_recon)
        _, grads = tape.backward(total, np.ones((), dtype=cfg.np_dtype))
    finally:
        tape.release()
    return breakdown, grads


# -- checkpoints -------------------------------------------------------------

MAGIC = b"MOCP"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def checkpoint_bytes(params: dict) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def checkpoint_save(params: dict, path) -> None:
    """Little-endian records: magic, version, then (name, rank, dims, float64 data)."""
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes) -> dict:
    if len(buf) < 8:
        raise CorruptCheckpointError(f"checkpoint truncated: {len(buf)} bytes, header needs 8")
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (this build reads version {VERSION})")
    pos, params = 8, {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptCheckpointError(
                f"checkpoint truncated while reading {what} at byte {pos} "
                f"(need {n}, have {len(buf) - pos})")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"tensor name at byte {pos - nlen} is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(8 * count, f"payload of {name}"), dtype="<f8")
        if name in params:
            raise CorruptCheckpointError(f"duplicate tensor {name!r}")
        params[name] = data.reshape(dims).astype(np.float64)
    return params


def checkpoint_load(path, cfg: NetworkConfig | None = None) -> dict:
    """Read a checkpoint; with ``cfg``, validate names/shapes and cast to its dtype."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    params = parse_checkpoint(buf)
    if cfg is None:
        return params
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"checkpoint does not match config: missing {missing}, unexpected {extra}")
    out = {}
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointShapeError(f"{name}: checkpoint shape {params[name].shape}, config expects {shape}")
        out[name] = params[name].astype(cfg.np_dtype)
    return out
