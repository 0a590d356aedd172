"""Convolutional autoencoder: architecture, forward passes, checkpoints.

Encoder stage: conv 3x3 stride 1 (same padding) -> batch norm -> ReLU ->
2x2 max-pool stride 2.  A linear fully connected layer maps the flattened
features to the latent vector.  The decoder mirrors this with a fully
connected layer and stride-2 transposed convolutions, ending linear.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import FormatError, InvalidGeometry, ShapeError, TruncatedFile
from .optim import xavier_init

PRESETS = {
    "shallow": {"channels": (32, 64, 128), "latent_dim": 64},
    "deep": {"channels": (32, 64, 128, 256, 256), "latent_dim": 10},
}


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "shallow"
    input_shape: tuple = (1, 28, 28)
    latent_dim: int = None
    channels: tuple = None
    kernel_size: int = 3
    # batch norm on the latent and final reconstruction layers is off by default
    batch_norm_latent: bool = False

    def __post_init__(self):
        if self.variant not in PRESETS:
            raise ValueError(f"unknown network variant {self.variant!r}")
        preset = PRESETS[self.variant]
        if self.latent_dim is None:
            object.__setattr__(self, "latent_dim", preset["latent_dim"])
        if self.channels is None:
            object.__setattr__(self, "channels", preset["channels"])
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")
        if self.latent_dim < 1 or not self.channels:
            raise ValueError("latent_dim and channels must be positive")

    def spatial_sizes(self):
        """(H, W) at the input and after every pooling stage."""
        _, h, w = self.input_shape
        sizes = [(h, w)]
        for _ in self.channels:
            if h < 2 or w < 2:
                raise InvalidGeometry(
                    f"input {self.input_shape[1:]} too small for "
                    f"{len(self.channels)} pooling stages")
            h = T.pool_output_size(h, 2, 2)
            w = T.pool_output_size(w, 2, 2)
            sizes.append((h, w))
        return sizes

    def flat_features(self):
        h, w = self.spatial_sizes()[-1]
        return self.channels[-1] * h * w


@dataclass
class AutoencoderParams:
    spec: NetworkSpec
    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.encoder.values()) + list(self.decoder.values())

    def encoder_parameters(self):
        return list(self.encoder.values())

    def decoder_parameters(self):
        return list(self.decoder.values())

    @property
    def dtype(self):
        return next(iter(self.encoder.values())).dtype

    def state_dict(self):
        """Flat name -> array mapping including running statistics."""
        out = {name: p.data for name, p in {**self.encoder, **self.decoder}.items()}
        for name, stats in self.running.items():
            out[f"{name}.running_mean"] = stats.mean
            out[f"{name}.running_var"] = stats.var
        return out

    def load_state_dict(self, state):
        for name, p in {**self.encoder, **self.decoder}.items():
            if name not in state:
                raise KeyError(f"missing tensor {name!r} in state")
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ShapeError("load_state_dict", p.shape, arr.shape)
            p.data = arr.copy()
        for name, stats in self.running.items():
            stats.mean = np.asarray(state[f"{name}.running_mean"], dtype=stats.mean.dtype).copy()
            stats.var = np.asarray(state[f"{name}.running_var"], dtype=stats.var.dtype).copy()

    def copy(self):
        other = build(self.spec, seed=0, dtype=self.dtype)
        other.load_state_dict(self.state_dict())
        return other


def _bn_params(group, prefix, features, dtype, running):
    group[f"{prefix}.bn.scale"] = T.Tensor(np.ones(features, dtype), requires_grad=True,
                                           name=f"{prefix}.bn.scale")
    group[f"{prefix}.bn.shift"] = T.Tensor(np.zeros(features, dtype), requires_grad=True,
                                           name=f"{prefix}.bn.shift")
    running[f"{prefix}.bn"] = T.RunningStats(features, dtype=dtype)


def _bias(name, n, dtype):
    return T.Tensor(np.zeros(n, dtype), requires_grad=True, name=name)


def build(spec, seed=0, dtype=np.float32):
    """Create Xavier-initialized parameters for ``spec``.

    Convolutions followed by batch norm carry no bias (the norm's shift
    subsumes it).  Biases start at zero, batch-norm scales at one.
    """
    spec.spatial_sizes()  # validates geometry
    rng = np.random.default_rng(seed)
    k = spec.kernel_size
    in_ch = spec.input_shape[0]
    params = AutoencoderParams(spec=spec)
    enc, dec, running = params.encoder, params.decoder, params.running

    prev = in_ch
    for i, ch in enumerate(spec.channels):
        name = f"enc.conv{i}"
        enc[f"{name}.weight"] = xavier_init((ch, prev, k, k), rng, f"{name}.weight", dtype)
        _bn_params(enc, name, ch, dtype, running)
        prev = ch
    flat = spec.flat_features()
    enc["enc.fc.weight"] = xavier_init((flat, spec.latent_dim), rng, "enc.fc.weight", dtype)
    if spec.batch_norm_latent:
        _bn_params(enc, "enc.fc", spec.latent_dim, dtype, running)
    else:
        enc["enc.fc.bias"] = _bias("enc.fc.bias", spec.latent_dim, dtype)

    dec["dec.fc.weight"] = xavier_init((spec.latent_dim, flat), rng, "dec.fc.weight", dtype)
    _bn_params(dec, "dec.fc", flat, dtype, running)
    targets = list(reversed(spec.channels[:-1])) + [in_ch]
    prev = spec.channels[-1]
    for i, ch in enumerate(targets):
        name = f"dec.deconv{i}"
        dec[f"{name}.weight"] = xavier_init((prev, ch, k, k), rng, f"{name}.weight", dtype)
        last = i == len(targets) - 1
        if last and not spec.batch_norm_latent:
            dec[f"{name}.bias"] = _bias(f"{name}.bias", ch, dtype)
        else:
            _bn_params(dec, name, ch, dtype, running)
        prev = ch
    return params


def _as_input(x, dtype):
    if isinstance(x, T.Tensor):
        return x
    return T.Tensor(np.asarray(x, dtype=dtype))


def _norm(params, group, prefix, x, mode):
    return T.batch_norm(x, group[f"{prefix}.bn.scale"], group[f"{prefix}.bn.shift"],
                        mode=mode, stats=params.running[f"{prefix}.bn"])


def encode(params, x, mode="train"):
    """Map a batch of N x C x H x W images to N x latent_dim codes."""
    spec = params.spec
    x = _as_input(x, params.dtype)
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError("encode", x.shape, ("N",) + spec.input_shape)
    enc = params.encoder
    pad = spec.kernel_size // 2
    h = x
    for i in range(len(spec.channels)):
        name = f"enc.conv{i}"
        h = T.conv2d(h, enc[f"{name}.weight"], None, stride=1, padding=pad)
        h = T.relu(_norm(params, enc, name, h, mode))
        h = T.maxpool2d(h, 2, 2)
    h = T.reshape(h, (h.shape[0], -1))
    z = T.matmul(h, enc["enc.fc.weight"])
    if spec.batch_norm_latent:
        return _norm(params, enc, "enc.fc", z, mode)
    return T.add(z, enc["enc.fc.bias"])


def decode(params, z, mode="train"):
    """Map N x latent_dim codes back to N x C x H x W reconstructions."""
    spec = params.spec
    z = _as_input(z, params.dtype)
    if z.ndim != 2 or z.shape[1] != spec.latent_dim:
        raise ShapeError("decode", z.shape, ("N", spec.latent_dim))
    dec = params.decoder
    sizes = spec.spatial_sizes()
    h = T.matmul(z, dec["dec.fc.weight"])
    h = T.relu(_norm(params, dec, "dec.fc", h, mode))
    top_h, top_w = sizes[-1]
    h = T.reshape(h, (h.shape[0], spec.channels[-1], top_h, top_w))
    n_stages = len(spec.channels)
    for i in range(n_stages):
        name = f"dec.deconv{i}"
        src_h, _ = sizes[n_stages - i]
        dst_h, dst_w = sizes[n_stages - i - 1]
        out_pad = dst_h - (2 * src_h - 1)
        h = T.conv_transpose2d(h, dec[f"{name}.weight"], dec.get(f"{name}.bias"),
                               stride=2, padding=1, output_padding=out_pad)
        if h.shape[2:] != (dst_h, dst_w):
            raise ShapeError("decode", h.shape, (dst_h, dst_w))
        last = i == n_stages - 1
        if f"{name}.bn.scale" in dec:
            h = _norm(params, dec, name, h, mode)
        if not last:
            h = T.relu(h)
    return h


def reconstruction_loss(x, x_rec):
    """Mean over samples of the squared L2 reconstruction error."""
    x = _as_input(x, x_rec.dtype if isinstance(x_rec, T.Tensor) else None)
    x_rec = _as_input(x_rec, x.dtype)
    if x.shape != x_rec.shape:
        raise ShapeError("reconstruction_loss", x.shape, x_rec.shape)
    n = x.shape[0]
    return T.mul(T.sum_(T.square(T.sub(x_rec, x))), 1.0 / n)


def embed(params, images, batch_size=256):
    """Eval-mode latent codes for an N x C x H x W array, without recording."""
    out = []
    for start in range(0, len(images), batch_size):
        chunk = np.asarray(images[start:start + batch_size], dtype=params.dtype)
        out.append(encode(params, chunk, mode="eval").data)
    return np.concatenate(out, axis=0)


def encoder_fn(params, batch_size=256):
    """Callable images -> latent codes bound to ``params`` (eval mode)."""
    def fn(images):
        return embed(params, images, batch_size)
    return fn


# checkpoints ---------------------------------------------------------------

MAGIC = b"DCAE"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors):
    """Write a name -> array mapping in the DCAE little-endian format."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a DCAE checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFile(f"{path}: checkpoint truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    return tensors


