"""Per-axis 2D U-Net: construction, forward/backward, weight container.

The encoder halves resolution `depth` times (two 3x3 conv + ReLU, then 2x2
max pool per level); the decoder mirrors it with 2x2 transposed
convolutions and skip concatenation.  Normalized voxel coordinates are
concatenated before the last two convolutional layers (the final 3x3 conv
and the 1x1 head), giving each 2D model global spatial awareness.

Weights live in a "MAXW" container: magic, u32 version, u64 metadata
length, UTF-8 JSON metadata (config echo + ordered tensor manifest with
name / shape / byte offset), then contiguous little-endian float32
payloads.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CompatibilityError, ConfigError, FormatError, ShapeError
from . import nn

MAGIC = b"MAXW"
VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 6
    base_filters: int = 16
    filter_cap: int = 64
    in_channels: int = 1
    classes: int = 7
    coord_channels: int = 3
    seed: int = 20250101

    def validate(self):
        if not 1 <= self.depth <= 8:
            raise ConfigError(f"depth {self.depth} outside 1..8")
        if 256 % (2 ** self.depth):
            raise ConfigError(f"256 not divisible by 2^{self.depth}")
        if self.base_filters < 1 or self.filter_cap < self.base_filters:
            raise ConfigError(
                f"need 1 <= base_filters <= filter_cap, got "
                f"{self.base_filters}, {self.filter_cap}"
            )
        if self.classes < 2:
            raise ConfigError(f"classes {self.classes} < 2")
        if self.in_channels < 1 or self.coord_channels < 0:
            raise ConfigError("bad channel counts")
        return self

    def filters(self, level):
        return min(self.base_filters * 2 ** level, self.filter_cap)


def layer_manifest(config):
    """Ordered (name, shape) list of every trainable tensor."""
    config.validate()
    out = []
    c_in = config.in_channels
    for l in range(config.depth):
        f = config.filters(l)
        out.append((f"enc{l}.conv1.W", (f, c_in, 3, 3)))
        out.append((f"enc{l}.conv1.b", (f,)))
        out.append((f"enc{l}.conv2.W", (f, f, 3, 3)))
        out.append((f"enc{l}.conv2.b", (f,)))
        c_in = f
    c = config.filters(config.depth - 1)
    for l in range(config.depth - 1, -1, -1):
        f = config.filters(l)
        out.append((f"dec{l}.up.W", (f, c, 2, 2)))
        out.append((f"dec{l}.up.b", (f,)))
        out.append((f"dec{l}.conv1.W", (f, 2 * f, 3, 3)))
        out.append((f"dec{l}.conv1.b", (f,)))
        extra = config.coord_channels if l == 0 else 0
        out.append((f"dec{l}.conv2.W", (f, f + extra, 3, 3)))
        out.append((f"dec{l}.conv2.b", (f,)))
        c = f
    out.append(("head.W", (config.classes, c + config.coord_channels, 1, 1)))
    out.append(("head.b", (config.classes,)))
    return out


def count_parameters(config):
    """Total trainable scalar count for a configuration."""
    return int(sum(int(np.prod(shape)) for _, shape in layer_manifest(config)))


class UNet:
    """2D U-Net with explicit layer-by-layer backward."""

    def __init__(self, config):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        self.enc = []
        c_in = config.in_channels
        for l in range(config.depth):
            f = config.filters(l)
            self.enc.append(
                {
                    "conv1": nn.Conv2D(c_in, f, 3, rng),
                    "relu1": nn.ReLU(),
                    "conv2": nn.Conv2D(f, f, 3, rng),
                    "relu2": nn.ReLU(),
                    "pool": nn.MaxPool2(),
                }
            )
            c_in = f
        self.dec = []
        c = config.filters(config.depth - 1)
        for l in range(config.depth - 1, -1, -1):
            f = config.filters(l)
            extra = config.coord_channels if l == 0 else 0
            self.dec.append(
                {
                    "level": l,
                    "up": nn.ConvTranspose2D(c, f, rng),
                    "conv1": nn.Conv2D(2 * f, f, 3, rng),
                    "relu1": nn.ReLU(),
                    "conv2": nn.Conv2D(f + extra, f, 3, rng),
                    "relu2": nn.ReLU(),
                }
            )
            c = f
        self.head = nn.Conv2D(c + config.coord_channels, config.classes, 1, rng)
        self.softmax = nn.SoftmaxChannels()

    # -- execution ---------------------------------------------------------

    def forward(self, image, coords=None):
        """image (1,H,W) or (N,1,H,W); coords (3,H,W) or (N,3,H,W) to match."""
        x, squeeze = nn._as_batched(image)
        cc = self.config.coord_channels
        if cc:
            if coords is None:
                raise ShapeError("model expects coordinate channels")
            coords, _ = nn._as_batched(coords)
            if coords.shape[1] != cc or coords.shape[0] != x.shape[0]:
                raise ShapeError(f"coords {coords.shape} incompatible with input {x.shape}")
        H, W = x.shape[2:]
        if H % (2 ** self.config.depth) or W % (2 ** self.config.depth):
            raise ShapeError(f"{H}x{W} input not divisible by 2^{self.config.depth}")
        for blk in self.enc:
            x = blk["relu1"].forward(blk["conv1"].forward(x))
            x = blk["relu2"].forward(blk["conv2"].forward(x))
            blk["_skip_value"] = x
            x = blk["pool"].forward(x)
        for blk in self.dec:
            x = blk["up"].forward(x)
            skip_x = self.enc[blk["level"]]["_skip_value"]
            x = np.concatenate([x, skip_x], axis=1)
            x = blk["relu1"].forward(blk["conv1"].forward(x))
            if blk["level"] == 0 and cc:
                x = np.concatenate([x, coords], axis=1)
            x = blk["relu2"].forward(blk["conv2"].forward(x))
        if cc:
            x = np.concatenate([x, coords], axis=1)
        probs = self.softmax.forward(self.head.forward(x))
        return probs[0] if squeeze else probs

    def backward(self, dprobs):
        """Backpropagate to every parameter gradient; returns d(input image)."""
        cc = self.config.coord_channels
        g, _ = nn._as_batched(dprobs)
        g = self.softmax.backward(g)
        g = self.head.backward(g)
        if cc:
            g = g[:, : g.shape[1] - cc]
        skip_grads = {}
        for blk in reversed(self.dec):
            g = blk["conv2"].backward(blk["relu2"].backward(g))
            if blk["level"] == 0 and cc:
                g = g[:, : g.shape[1] - cc]
            g = blk["conv1"].backward(blk["relu1"].backward(g))
            up_ch = blk["up"].out_ch
            skip_grads[blk["level"]] = g[:, up_ch:]
            g = blk["up"].backward(np.ascontiguousarray(g[:, :up_ch]))
        for level in range(self.config.depth - 1, -1, -1):
            blk = self.enc[level]
            g = blk["pool"].backward(g)
            g = g + skip_grads[level]
            g = blk["conv2"].backward(blk["relu2"].backward(g))
            g = blk["conv1"].backward(blk["relu1"].backward(g))
        return g

    # -- parameter access ----------------------------------------------------

    def _layer_items(self):
        for l, blk in enumerate(self.enc):
            yield f"enc{l}.conv1", blk["conv1"]
            yield f"enc{l}.conv2", blk["conv2"]
        for blk in self.dec:
            l = blk["level"]
            yield f"dec{l}.up", blk["up"]
            yield f"dec{l}.conv1", blk["conv1"]
            yield f"dec{l}.conv2", blk["conv2"]
        yield "head", self.head

    def parameters(self):
        out = {}
        for prefix, layer in self._layer_items():
            for pname, arr in layer.params().items():
                out[f"{prefix}.{pname}"] = arr
        return out

    def gradients(self):
        out = {}
        for prefix, layer in self._layer_items():
            for pname, arr in layer.grads().items():
                out[f"{prefix}.{pname}"] = arr
        return out

    def load_parameters(self, tensors):
        own = self.parameters()
        for name, arr in tensors.items():
            if name not in own:
                raise CompatibilityError(f"unexpected tensor '{name}'")
            if own[name].shape != arr.shape:
                raise CompatibilityError(
                    f"tensor '{name}': container shape {arr.shape} vs model {own[name].shape}"
                )
            own[name][...] = arr
        missing = set(own) - set(tensors)
        if missing:
            raise CompatibilityError(f"container missing tensors: {sorted(missing)}")


def build_unet(config):
    """Instantiate a UNet whose manifest matches layer_manifest(config)."""
    model = UNet(config)
    expected = dict(layer_manifest(config))
    actual = {k: v.shape for k, v in model.parameters().items()}
    if actual != expected:
        raise ConfigError("internal manifest mismatch")  # pragma: no cover
    return model


# -- MAXW container ----------------------------------------------------------


def save_container(path, tensors, meta):
    """Write named float32 tensors plus a JSON metadata echo."""
    manifest = []
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    doc = dict(meta)
    doc["tensors"] = manifest
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_container(path):
    """Read a MAXW container; returns (metadata dict, ordered name->float32)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + meta_len:
        raise FormatError("truncated metadata block")
    try:
        meta = json.loads(raw[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}") from exc
    payload = raw[16 + meta_len :]
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise FormatError(
                f"tensor '{entry['name']}' needs bytes {start}..{end}, "
                f"payload holds {len(payload)}"
            )
        tensors[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=start
        ).reshape(shape).copy()
    return meta, tensors


def save_weights(model, path, role="axis"):
    """Serialize a UNet's weights with a config echo."""
    meta = {
        "kind": "unet",
        "role": role,
        "config": asdict(model.config),
        "format": "MAXW",
    }
    save_container(path, model.parameters(), meta)


def load_weights(path):
    """Load a UNet container; validates every tensor name and shape.

    Returns (UNetConfig, tensors dict, metadata).
    """
    meta, tensors = load_container(path)
    if meta.get("kind") != "unet":
        raise CompatibilityError(f"container kind {meta.get('kind')!r} is not 'unet'")
    config = UNetConfig(**meta["config"])
    for name, shape in layer_manifest(config):
        if name not in tensors:
            raise CompatibilityError(f"missing tensor '{name}'")
        if tensors[name].shape != shape:
            raise CompatibilityError(
                f"tensor '{name}': container shape {tensors[name].shape} vs "
                f"expected {shape}"
            )
    extra = set(tensors) - {name for name, _ in layer_manifest(config)}
    if extra:
        raise CompatibilityError(f"unexpected tensors: {sorted(extra)}")
    return config, tensors, meta


def load_model(path):
    """Build a UNet directly from a container file."""
    config, tensors, _ = load_weights(path)
    model = build_unet(config)
    model.load_parameters(tensors)
    return model
