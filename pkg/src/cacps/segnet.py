"""Miniature encoder-decoder used for every parallel network.

Layout (channels, spatial scale)::

    conv 1->16, conv 16->16, down,
    conv 16->32, conv 32->32, down,
    conv 32->64, up,
    conv 64->32, up,
    conv 32->16, conv 16->4 (1x1, no ReLU)

All 3x3 convolutions are zero-padded and followed by ReLU.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gridmath as gm
from .errors import CacpsError

NUM_CLASSES = 4

# ("conv", cin, cout, k) or ("down",) / ("up",)
ARCH: tuple[tuple, ...] = (
    ("conv", 1, 16, 3),
    ("conv", 16, 16, 3),
    ("down",),
    ("conv", 16, 32, 3),
    ("conv", 32, 32, 3),
    ("down",),
    ("conv", 32, 64, 3),
    ("up",),
    ("conv", 64, 32, 3),
    ("up",),
    ("conv", 32, 16, 3),
    ("conv", 16, NUM_CLASSES, 1),
)

CKPT_MAGIC = b"CKPT1"


@dataclass
class SegNetParams:
    """Kernel and bias tensors of every conv layer, in layer order."""

    tensors: list[gm.Tensor]
    init_seed: int

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors)

    def copy(self) -> "SegNetParams":
        return SegNetParams([gm.Tensor(t.data.copy(), requires_grad=True) for t in self.tensors], self.init_seed)


def param_shapes() -> list[tuple[int, ...]]:
    shapes = []
    for layer in ARCH:
        if layer[0] == "conv":
            _, cin, cout, k = layer
            shapes += [(cout, cin, k, k), (cout,)]
    return shapes


def init(seed: int) -> SegNetParams:
    """He-normal kernels (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = []
    for layer in ARCH:
        if layer[0] != "conv":
            continue
        _, cin, cout, k = layer
        std = np.sqrt(2.0 / (cin * k * k))
        tensors.append(gm.Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True))
        tensors.append(gm.Tensor(np.zeros(cout), requires_grad=True))
    return SegNetParams(tensors, int(seed))


def forward(params: SegNetParams, batch) -> gm.Tensor:
    """Raw logits ``(N, 4, H, W)`` for a ``(N, 1, H, W)`` batch."""
    x = batch if isinstance(batch, gm.Tensor) else gm.Tensor(batch)
    if x.ndim != 4 or x.shape[1] != 1:
        raise CacpsError("shape", f"expected (N,1,H,W) batch, got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise CacpsError("shape", f"spatial dims {x.shape[2:]} must be divisible by 4")
    it = iter(params.tensors)
    n_conv = sum(1 for layer in ARCH if layer[0] == "conv")
    seen = 0
    for layer in ARCH:
        if layer[0] == "conv":
            x = gm.conv2d(x, next(it), next(it))
            seen += 1
            if seen < n_conv:
                x = gm.relu(x)
        else:
            x = gm.resample(x, layer[0])
    return x


def predict_probs(params: SegNetParams, batch) -> gm.Tensor:
    return gm.softmax_channels(forward(params, batch))


def save_checkpoint(params: SegNetParams, path: str | Path) -> None:
    header = json.dumps({"seed": params.init_seed, "shapes": [list(s) for s in params.shapes]}).encode()
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.tensors)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + struct.pack("<I", len(header)) + header + body)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> SegNetParams:
    """Read a checkpoint; the stored layer shapes must match :data:`ARCH`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CacpsError("checkpoint", f"cannot read {path}: {exc}") from exc
    if not raw.startswith(CKPT_MAGIC) or len(raw) < len(CKPT_MAGIC) + 4:
        raise CacpsError("checkpoint", f"{path}: bad magic")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off : off + hlen])
        shapes = [tuple(s) for s in header["shapes"]]
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CacpsError("checkpoint", f"{path}: unreadable header") from exc
    off += hlen
    if shapes != param_shapes():
        raise CacpsError("checkpoint", f"{path}: layer shapes do not match this network")
    total = sum(int(np.prod(s)) for s in shapes)
    if len(raw) - off != 8 * total:
        raise CacpsError("checkpoint", f"{path}: expected {8 * total} data bytes, found {len(raw) - off}")
    flat = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    tensors, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        tensors.append(gm.Tensor(flat[pos : pos + size].reshape(s), requires_grad=True))
        pos += size
    return SegNetParams(tensors, seed)
