"""Model assembly, forward/backward passes and complexity accounting.

Two variants share one head:

* ``proposed``: causal conv (d=1) + SeLU, then ``L`` residual blocks of one
  dilated causal conv + SeLU added to the block input.
* ``original_tcn``: ``L`` residual blocks of two weight-normalized dilated
  convs, each followed by ReLU and spatial dropout, with
  ``ReLU(x + F(x))`` at the output.

The head is a 1x1 convolution from ``n`` channels to one output; its value
at the final time index is the prediction for the most recent second.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cnnqoe import numerics as nx
from cnnqoe.errors import ConfigError, ModelFileError, ShapeError

logger = logging.getLogger(__name__)

VARIANTS = ("proposed", "original_tcn")
SEARCHED_K = (2, 3)
SEARCHED_N = (16, 32, 64)
MAX_RECEPTIVE_FIELD = 20


@dataclass(frozen=True)
class ModelConfig:
    k: int = 2
    L: int = 3
    n: int = 32
    in_channels: int = 4
    variant: str = "proposed"
    dropout_p: float = 0.0
    override: bool = False  # downgrade soft violations to warnings


@dataclass
class Validation:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def dilation_schedule(L: int) -> list[int]:
    if L < 1:
        raise ConfigError(f"block count L must be >= 1, got {L}")
    return [2**l for l in range(L)]


def dilated_stack_receptive_field(k: int, L: int) -> int:
    """Receptive field of ``L`` plain dilated causal convs of width ``k``."""
    return 1 + sum((k - 1) * d for d in dilation_schedule(L))


def receptive_field(config: ModelConfig) -> int:
    """Receptive field of the literal layer stack built for ``config``."""
    per_block = 2 if config.variant == "original_tcn" else 1
    r = 1 + sum(per_block * (config.k - 1) * d for d in dilation_schedule(config.L))
    if config.variant == "proposed":
        r += config.k - 1
    return r


def validate_config(config: ModelConfig) -> Validation:
    """Check ``config``; structural problems are always violations.

    Departures from the searched hyperparameter ranges and a receptive field
    above 20 steps become warnings when ``config.override`` is set.
    """
    hard = []
    if config.variant not in VARIANTS:
        hard.append(f"unknown variant {config.variant!r}")
    for name in ("k", "L", "n", "in_channels"):
        value = getattr(config, name)
        if not isinstance(value, (int, np.integer)) or value < 1:
            hard.append(f"{name} must be a positive integer, got {value!r}")
    if not 0.0 <= config.dropout_p < 1.0:
        hard.append(f"dropout_p must lie in [0, 1), got {config.dropout_p}")
    if hard:
        return Validation(violations=hard)

    soft = []
    if config.k not in SEARCHED_K:
        soft.append(f"k={config.k} outside searched range {SEARCHED_K}")
    if config.n not in SEARCHED_N:
        soft.append(f"n={config.n} outside searched range {SEARCHED_N}")
    r = receptive_field(config)
    if r > MAX_RECEPTIVE_FIELD:
        soft.append(f"receptive field {r} exceeds the {MAX_RECEPTIVE_FIELD}-step recency bound")
    if config.override:
        for msg in soft:
            logger.warning("config override: %s", msg)
        return Validation(warnings=soft)
    return Validation(violations=soft)


@dataclass
class Conv:
    """One causal convolution; ``gain`` switches on weight normalization."""

    weight: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    gain: np.ndarray | None = None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def width(self) -> int:
        return self.weight.shape[2]

    def effective_weight(self) -> np.ndarray:
        if self.gain is None:
            return self.weight
        return nx.weight_norm_apply(self.weight, self.gain)

    def params(self) -> list[tuple[str, np.ndarray]]:
        out = [("weight", self.weight), ("bias", self.bias)]
        if self.gain is not None:
            out.append(("gain", self.gain))
        return out

    def forward(self, x):
        w = self.effective_weight()
        return nx.conv1d_dilated_causal(x, w, self.bias, self.dilation), w

    def backward(self, x, w, dy):
        dx, dw, db = nx.conv1d_backward(x, w, self.dilation, dy)
        if self.gain is None:
            return dx, {"weight": dw, "bias": db}
        dv, dg = nx.weight_norm_backward(self.weight, self.gain, dw)
        return dx, {"weight": dv, "bias": db, "gain": dg}


@dataclass
class ResidualBlock:
    convs: list[Conv]
    projection: Conv | None = None

    def named_convs(self):
        for i, conv in enumerate(self.convs):
            yield f"conv{i}", conv
        if self.projection is not None:
            yield "proj", self.projection


class Model:
    """Assembled layer stack. Build with :func:`build_model`."""

    def __init__(self, config: ModelConfig, stem: Conv | None, blocks: list[ResidualBlock], head: Conv):
        self.config = config
        self.stem = stem
        self.blocks = blocks
        self.head = head

    def named_layers(self) -> list[tuple[str, Conv]]:
        layers = []
        if self.stem is not None:
            layers.append(("stem", self.stem))
        for b, block in enumerate(self.blocks):
            for name, conv in block.named_convs():
                layers.append((f"blocks.{b}.{name}", conv))
        layers.append(("head", self.head))
        return layers

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Parameter arrays in file order; the arrays are live references."""
        return [
            (f"{lname}.{pname}", arr)
            for lname, conv in self.named_layers()
            for pname, arr in conv.params()
        ]

    def copy(self) -> Model:
        def dup(conv):
            if conv is None:
                return None
            return Conv(
                conv.weight.copy(),
                conv.bias.copy(),
                conv.dilation,
                None if conv.gain is None else conv.gain.copy(),
            )

        blocks = [ResidualBlock([dup(c) for c in b.convs], dup(b.projection)) for b in self.blocks]
        return Model(self.config, dup(self.stem), blocks, dup(self.head))

    def load_state(self, flat: np.ndarray) -> None:
        """Overwrite all parameters in place from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for _, arr in self.parameters():
            arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size
        if pos != flat.size:
            raise ShapeError(f"state vector has {flat.size} values, model needs {pos}")

    def state(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.parameters()])

    # -- passes -----------------------------------------------------------

    def forward_sequence(self, x, training: bool = False, rng: np.random.Generator | None = None, keep_cache: bool = False):
        """Run the stack over a whole sequence.

        Returns the head output per time step, shaped ``x.shape[:-2] + (T,)``,
        and the activation cache when ``keep_cache`` is set.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-2] != self.config.in_channels:
            raise ShapeError(
                f"expected input with {self.config.in_channels} channels, got shape {x.shape}"
            )
        cfg = self.config
        dropping = training and cfg.variant == "original_tcn" and cfg.dropout_p > 0
        cache = []
        h = x
        if self.stem is not None:
            z, w = self.stem.forward(h)
            cache.append(("stem", h, w, z))
            h = nx.selu(z)
        for block in self.blocks:
            inp = h
            if cfg.variant == "proposed":
                conv = block.convs[0]
                z, w = conv.forward(inp)
                f = nx.selu(z)
                steps = [(inp, w, z, None)]
            else:
                steps = []
                f = inp
                for conv in block.convs:
                    z, w = conv.forward(f)
                    a = nx.relu(z)
                    mask = nx.channel_dropout_mask(a.shape, cfg.dropout_p, rng) if dropping else None
                    steps.append((f, w, z, mask))
                    f = a if mask is None else a * mask
            if block.projection is not None:
                skip, pw = block.projection.forward(inp)
            else:
                skip, pw = inp, None
            s = skip + f
            h = s if cfg.variant == "proposed" else nx.relu(s)
            cache.append(("block", inp, steps, pw, s))
        y, hw = self.head.forward(h)
        cache.append(("head", h, hw))
        out = y[..., 0, :]
        return (out, cache) if keep_cache else out

    def backward(self, cache, dout) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(dout * forward_sequence(x))``."""
        grads: dict[str, np.ndarray] = {}
        proposed = self.config.variant == "proposed"
        _, h, hw = cache[-1]
        dy = np.asarray(dout, dtype=np.float64)[..., None, :]
        dh, g = self.head.backward(h, hw, dy)
        _store(grads, "head", g)
        block_entries = cache[1:-1] if self.stem is not None else cache[:-1]
        for b in range(len(self.blocks) - 1, -1, -1):
            block = self.blocks[b]
            _, inp, steps, pw, s = block_entries[b]
            ds = dh if proposed else nx.relu_backward(s, dh)
            if block.projection is not None:
                dinp, g = block.projection.backward(inp, pw, ds)
                _store(grads, f"blocks.{b}.proj", g)
            else:
                dinp = ds
            df = ds
            for i in range(len(steps) - 1, -1, -1):
                f_in, w, z, mask = steps[i]
                if proposed:
                    dz = nx.selu_backward(z, df)
                else:
                    da = df if mask is None else df * mask
                    dz = nx.relu_backward(z, da)
                df, g = block.convs[i].backward(f_in, w, dz)
                _store(grads, f"blocks.{b}.conv{i}", g)
            dh = dinp + df
        if self.stem is not None:
            _, x, w, z = cache[0]
            dz = nx.selu_backward(z, dh)
            _, g = self.stem.backward(x, w, dz)
            _store(grads, "stem", g)
        return grads


def _store(grads, prefix, g):
    for name, value in g.items():
        grads[f"{prefix}.{name}"] = value


def _init_conv(rng, c_out, c_in, k, dilation, weight_norm=False) -> Conv:
    fan_in = c_in * k
    w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(c_out, c_in, k))
    gain = nx._channel_norms(w) if weight_norm else None
    return Conv(w, np.zeros(c_out), dilation, gain)


def build_model(config: ModelConfig, rng: np.random.Generator | int | None = None) -> Model:
    check = validate_config(config)
    if not check.ok:
        raise ConfigError(check.violations)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    k, n = config.k, config.n
    stem = None
    c = config.in_channels
    blocks = []
    if config.variant == "proposed":
        stem = _init_conv(rng, n, c, k, 1)
        c = n
        for d in dilation_schedule(config.L):
            blocks.append(ResidualBlock([_init_conv(rng, n, n, k, d)]))
    else:
        for d in dilation_schedule(config.L):
            convs = [_init_conv(rng, n, c, k, d, True), _init_conv(rng, n, n, k, d, True)]
            proj = _init_conv(rng, n, c, 1, 1) if c != n else None
            blocks.append(ResidualBlock(convs, proj))
            c = n
    head = _init_conv(rng, 1, c, 1, 1)
    return Model(config, stem, blocks, head)


def forward(model: Model, window):
    """Prediction for the most recent step of ``window`` (inference mode).

    ``window`` is ``(C, W)`` for a scalar result or ``(B, C, W)`` for a vector.
    """
    return model.forward_sequence(window)[..., -1]


def residual_block_forward(model: Model, index: int, x) -> np.ndarray:
    """Output of residual block ``index`` for input ``x`` (inference mode)."""
    block = model.blocks[index]
    x = np.asarray(x, dtype=np.float64)
    expected = block.convs[0].in_channels
    if x.ndim not in (2, 3) or x.shape[-2] != expected:
        raise ShapeError(f"block {index} expects {expected} channels, got shape {x.shape}")
    if model.config.variant == "proposed":
        f = nx.selu(block.convs[0].forward(x)[0])
    else:
        f = x
        for conv in block.convs:
            f = nx.relu(conv.forward(f)[0])
    skip = x if block.projection is None else block.projection.forward(x)[0]
    s = skip + f
    return s if model.config.variant == "proposed" else nx.relu(s)


# -- complexity ------------------------------------------------------------


@dataclass(frozen=True)
class ComplexityReport:
    param_count: int
    flops_per_step: int
    receptive_field: int
    model_size_bytes: int


def count_params(model: Model) -> int:
    return int(sum(arr.size for _, arr in model.parameters()))


def param_count_formula(config: ModelConfig) -> int:
    """Closed-form parameter count for the stack :func:`build_model` assembles."""
    k, n, c = config.k, config.n, config.in_channels
    total = 0
    if config.variant == "proposed":
        total += c * k * n + n
        total += config.L * (n * k * n + n)
    else:
        for layer in range(config.L):
            cin = c if layer == 0 else n
            total += (cin * k * n + 2 * n) + (n * k * n + 2 * n)
            if cin != n:
                total += cin * n + n
    return total + n + 1


def count_flops(model: Model) -> int:
    """Two FLOPs per multiply-accumulate, convolutions only, per new time step."""
    return int(sum(2 * conv.weight.size for _, conv in model.named_layers()))


def model_size_bytes(model: Model) -> int:
    return HEADER.size + 8 * count_params(model) + CHECKSUM.size


def complexity_report(model: Model) -> ComplexityReport:
    return ComplexityReport(
        param_count=count_params(model),
        flops_per_step=count_flops(model),
        receptive_field=receptive_field(model.config),
        model_size_bytes=model_size_bytes(model),
    )


# -- model file ------------------------------------------------------------

MAGIC = b"CQOE"
FORMAT_VERSION = 1
# magic, version, k, L, n, in_channels, variant code, dropout_p
HEADER = struct.Struct("<4sHHHHHBd")
CHECKSUM = struct.Struct("<I")


def save_model(model: Model, path) -> None:
    cfg = model.config
    header = HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        cfg.k,
        cfg.L,
        cfg.n,
        cfg.in_channels,
        VARIANTS.index(cfg.variant),
        float(cfg.dropout_p),
    )
    body = header + model.state().astype("<f8").tobytes()
    Path(path).write_bytes(body + CHECKSUM.pack(zlib.crc32(body)))


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size + CHECKSUM.size:
        raise ModelFileError(f"{path}: truncated model file ({len(data)} bytes)")
    magic, version, k, L, n, c, variant, dropout_p = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {version}")
    if variant >= len(VARIANTS):
        raise ModelFileError(f"{path}: unknown variant code {variant}")
    body, (stored,) = data[: -CHECKSUM.size], CHECKSUM.unpack(data[-CHECKSUM.size :])
    if zlib.crc32(body) != stored:
        raise ModelFileError(f"{path}: checksum mismatch")

    config = ModelConfig(k=k, L=L, n=n, in_channels=c, variant=VARIANTS[variant], dropout_p=dropout_p)
    if not validate_config(config).ok:
        config = replace(config, override=True)
    try:
        model = build_model(config, rng=0)
    except ConfigError as exc:
        raise ModelFileError(f"{path}: invalid configuration: {exc}") from exc
    payload = body[HEADER.size :]
    if len(payload) != 8 * count_params(model):
        raise ModelFileError(f"{path}: parameter block has {len(payload)} bytes, expected {8 * count_params(model)}")
    model.load_state(np.frombuffer(payload, dtype="<f8"))
    return model
