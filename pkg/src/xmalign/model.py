"""Visual and semantic VAEs sharing one latent space."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class VaeDims:
    visual_dim: int = 512
    semantic_dim: int = 1024
    visual_hidden: int = 512
    semantic_hidden: int = 256
    latent_dim: int = 64

    def validate(self) -> None:
        for name, n in asdict(self).items():
            if not isinstance(n, (int, np.integer)) or n < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {n!r}")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in storage order."""
        dv, ds, hv, hs, g = (
            self.visual_dim,
            self.semantic_dim,
            self.visual_hidden,
            self.semantic_hidden,
            self.latent_dim,
        )
        shapes = []
        for prefix, (din, hid, dout) in {
            "enc_v": (dv, hv, 2 * g),
            "dec_v": (g, hv, dv),
            "enc_s": (ds, hs, 2 * g),
            "dec_s": (g, hs, ds),
        }.items():
            shapes += [
                (f"{prefix}.w1", (din, hid)),
                (f"{prefix}.b1", (hid,)),
                (f"{prefix}.w2", (hid, dout)),
                (f"{prefix}.b2", (dout,)),
            ]
        return shapes


@dataclass
class LatentGaussian:
    """Diagonal posterior; ``std = exp(log_var / 2)``."""

    mu: object
    log_var: object

    @property
    def std(self):
        return nx.exp(nx.scale(self.log_var, 0.5))


class VaePair:
    """Both modality VAEs.

    All parameters live in one flat float64 buffer (``flat``); ``params``
    maps names to views into it, so optimizers can update everything with a
    handful of vector operations.  A pair returned by :meth:`bind` holds tape
    variables instead of views and is what the training loop differentiates.

    A *stacked* pair (``flat`` of shape R×P) holds R independent models that
    are evaluated together on the same inputs.
    """

    def __init__(self, dims: VaeDims, flat: np.ndarray | None = None, params=None):
        dims.validate()
        self.dims = dims
        self.layout = dims.layout()
        if params is not None:
            self.flat = None
            self.params = params
            return
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if flat is None:
            flat = np.zeros(size)
        elif flat.shape[-1:] != (size,) or flat.ndim > 2:
            raise ConfigurationError(f"flat buffer has {flat.shape}, expected (..., {size})")
        self.flat = flat
        lead = flat.shape[:-1]
        self.params = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self.params[name] = flat[..., offset : offset + n].reshape(lead + shape)
            offset += n

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    @property
    def runs(self) -> int | None:
        """Number of stacked models, or None for a single one."""
        return None if self.flat is None or self.flat.ndim == 1 else self.flat.shape[0]

    def stack(self, runs: int) -> "VaePair":
        """``runs`` copies of this single model as one stacked pair."""
        if self.runs is not None:
            raise ConfigurationError("pair is already stacked")
        return VaePair(self.dims, np.tile(self.flat, (runs, 1)))

    def unstack(self) -> list["VaePair"]:
        if self.runs is None:
            return [self]
        return [VaePair(self.dims, row.copy()) for row in self.flat]

    def bind(self, tape: nx.Tape) -> "VaePair":
        return VaePair(self.dims, params={k: tape.param(k, v) for k, v in self.params.items()})

    def flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Gradients in ``flat`` layout."""
        lead = () if self.runs is None else (self.runs,)
        return np.concatenate(
            [np.asarray(grads[name]).reshape(lead + (-1,)) for name, _ in self.layout], axis=-1
        )

    def copy(self) -> "VaePair":
        return VaePair(self.dims, self.flat.copy())

    # convenience forwards
    def encode_visual(self, v):
        return encode_visual(self, v)

    def encode_semantic(self, s):
        return encode_semantic(self, s)

    def decode_visual(self, z):
        return decode_visual(self, z)

    def decode_semantic(self, z):
        return decode_semantic(self, z)


def init_params(rng: np.random.Generator, dims: VaeDims) -> VaePair:
    """Glorot-uniform weights, zero biases."""
    pair = VaePair(dims)
    for name, shape in pair.layout:
        if name.endswith((".w1", ".w2")):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            pair.params[name][...] = rng.uniform(-bound, bound, size=shape)
    return pair


def _mlp(pair: VaePair, prefix: str, x):
    p = pair.params
    return nx.mlp(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _check_width(x, width: int, what: str) -> None:
    shape = np.shape(nx.value(x))
    if len(shape) < 2 or shape[-1] != width:
        raise nx.DimensionError(f"{what}: expected N×{width} input, got {shape}")


def _encode(pair: VaePair, prefix: str, x) -> LatentGaussian:
    out = _mlp(pair, prefix, x)
    mu, log_var = nx.split_cols(out, pair.dims.latent_dim)
    return LatentGaussian(mu, nx.clip(log_var, nx.LOG_VAR_MIN, nx.LOG_VAR_MAX))


def encode_visual(pair: VaePair, v) -> LatentGaussian:
    _check_width(v, pair.dims.visual_dim, "encode_visual")
    return _encode(pair, "enc_v", v)


def encode_semantic(pair: VaePair, s) -> LatentGaussian:
    _check_width(s, pair.dims.semantic_dim, "encode_semantic")
    return _encode(pair, "enc_s", s)


def decode_visual(pair: VaePair, z):
    _check_width(z, pair.dims.latent_dim, "decode_visual")
    return _mlp(pair, "dec_v", z)


def decode_semantic(pair: VaePair, z):
    _check_width(z, pair.dims.latent_dim, "decode_semantic")
    return _mlp(pair, "dec_s", z)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(pair: VaePair, path: str | Path, extra: dict | None = None) -> None:
    """Write a JSON checkpoint; floats are stored as hex strings (bit-exact)."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "dims": asdict(pair.dims),
        "params": {
            name: {"shape": list(shape), "data": [float(x).hex() for x in pair.params[name].reshape(-1)]}
            for name, shape in pair.layout
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> VaePair:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    pair = VaePair(VaeDims(**doc["dims"]))
    for name, shape in pair.layout:
        entry = doc["params"][name]
        if tuple(entry["shape"]) != shape:
            raise ConfigurationError(f"{name}: shape {entry['shape']} != {list(shape)}")
        pair.params[name][...] = np.array([float.fromhex(x) for x in entry["data"]]).reshape(shape)
    return pair
