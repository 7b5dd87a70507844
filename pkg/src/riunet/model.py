"""U-Net over two-channel range images, plus the binary checkpoint format."""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import tensor as T
from .optim import Parameter
from .tensor import BatchNormState, Tensor


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    num_classes: int = 4
    depth_levels: int = 4
    base_features: int = 64
    input_height: int = 64
    input_width: int = 512

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.in_channels < 1 or self.base_features < 1 or self.depth_levels < 0:
            raise ValueError("in_channels and base_features must be positive, depth_levels non-negative")
        step = 2**self.depth_levels
        for name in ("input_height", "input_width"):
            extent = getattr(self, name)
            if extent < 1 or extent % step:
                raise ValueError(f"{name}={extent} is not divisible by 2**depth_levels={step}")

    def features(self, level: int) -> int:
        return self.base_features * 2**level


class ConvBlock:
    """Two 3x3 conv -> batchnorm -> ReLU stages."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator, dtype):
        self.name = name
        self.conv1_w, self.conv1_b = _conv_params(f"{name}.conv1", cout, cin, 3, rng, dtype)
        self.bn1 = BatchNormState(cout, dtype=dtype, name=f"{name}.bn1")
        self.conv2_w, self.conv2_b = _conv_params(f"{name}.conv2", cout, cout, 3, rng, dtype)
        self.bn2 = BatchNormState(cout, dtype=dtype, name=f"{name}.bn2")

    def __call__(self, x: Tensor) -> Tensor:
        x = T.relu(T.batchnorm2d(T.conv2d(x, self.conv1_w, self.conv1_b, padding=1), self.bn1))
        return T.relu(T.batchnorm2d(T.conv2d(x, self.conv2_w, self.conv2_b, padding=1), self.bn2))

    def parameters(self) -> List[Parameter]:
        return [self.conv1_w, self.conv1_b, self.bn1.gamma, self.bn1.beta,
                self.conv2_w, self.conv2_b, self.bn2.gamma, self.bn2.beta]

    def norms(self) -> List[BatchNormState]:
        return [self.bn1, self.bn2]


def _conv_params(name, cout, cin, k, rng, dtype):
    # He-style uniform init scaled by fan-in; biases start at zero
    bound = np.sqrt(6.0 / (cin * k * k))
    w = Parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype), f"{name}.weight")
    b = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")
    return w, b


class UNetModel:
    """Encoder/decoder with skip concatenation and a 1x1 classification head.

    Feature counts double at every pooling stage (``base, 2*base, ...``) and
    halve again on the way up; the output has the input's spatial extents.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.encoders = []
        cin = cfg.in_channels
        for level in range(cfg.depth_levels):
            self.encoders.append(ConvBlock(f"enc{level}", cin, cfg.features(level), rng, dtype))
            cin = cfg.features(level)
        self.bottom = ConvBlock("bottom", cin, cfg.features(cfg.depth_levels), rng, dtype)
        self.decoders = []
        for level in reversed(range(cfg.depth_levels)):
            wide, narrow = cfg.features(level + 1), cfg.features(level)
            bound = np.sqrt(6.0 / wide)
            up_w = Parameter(rng.uniform(-bound, bound, size=(wide, narrow, 2, 2)).astype(dtype), f"dec{level}.up.weight")
            up_b = Parameter(np.zeros(narrow, dtype=dtype), f"dec{level}.up.bias")
            block = ConvBlock(f"dec{level}", 2 * narrow, narrow, rng, dtype)
            self.decoders.append((up_w, up_b, block))
        self.head_w, self.head_b = _conv_params("head", cfg.num_classes, cfg.features(0), 1, rng, dtype)
        self.training = True

    def parameters(self) -> List[Parameter]:
        params = []
        for block in self.encoders:
            params += block.parameters()
        params += self.bottom.parameters()
        for up_w, up_b, block in self.decoders:
            params += [up_w, up_b] + block.parameters()
        params += [self.head_w, self.head_b]
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def norms(self) -> List[BatchNormState]:
        out = []
        for block in self.encoders:
            out += block.norms()
        out += self.bottom.norms()
        for _, _, block in self.decoders:
            out += block.norms()
        return out

    def set_mode(self, mode: str) -> "UNetModel":
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.training = mode == "train"
        for bn in self.norms():
            bn.training = self.training
        return self

    def train(self) -> "UNetModel":
        return self.set_mode("train")

    def eval(self) -> "UNetModel":
        return self.set_mode("eval")

    def set_bn_momentum(self, momentum: float) -> None:
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        for bn in self.norms():
            bn.momentum = momentum

    def forward(self, x, mode: Optional[str] = None) -> Tensor:
        if mode is not None:
            self.set_mode(mode)
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.input_height, cfg.input_width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise T.ShapeError(f"model expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        skips = []
        for block in self.encoders:
            x = block(x)
            skips.append(x)
            x = T.maxpool2d(x)
        x = self.bottom(x)
        for (up_w, up_b, block), skip in zip(self.decoders, reversed(skips)):
            x = T.conv_transpose2d(x, up_w, up_b)
            if x.shape[2:] != skip.shape[2:]:
                raise T.ShapeError(f"{block.name}: upsampled {x.shape[2:]} vs skip {skip.shape[2:]}")
            x = block(T.concat_channels(skip, x))
        return T.conv2d(x, self.head_w, self.head_b, padding=0)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Eval-mode argmax labels, shape (N, H, W)."""
        previous = self.training
        self.eval()
        with T.no_grad():
            logits = self.forward(x)
        self.set_mode("train" if previous else "eval")
        return logits.data.argmax(axis=1)


def build(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> UNetModel:
    return UNetModel(cfg, seed, dtype)


def forward(model: UNetModel, x, mode: str = "train") -> Tensor:
    return model.forward(x, mode)


def parameter_count(model: UNetModel) -> int:
    return int(sum(p.data.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# checkpoint file

MAGIC = b"RIUW"
VERSION = 1
CONFIG_PREFIX = "__config__."
TRAIN_PREFIX = "__train__."
RUNNING_MEAN = "#running_mean"
RUNNING_VAR = "#running_var"
ADAM_M = "#adam_m"
ADAM_V = "#adam_v"
ADAM_STEP = "#adam_step"


class CheckpointError(ValueError):
    pass


def _pack_entries(entries: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def _unpack_entries(blob: bytes) -> Dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint truncated at byte {pos} (need {n} more)")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after the last entry")
    return entries


def _split_u32(value: int) -> np.ndarray:
    # float32 holds 16-bit halves exactly
    value = int(value)
    return np.array([value & 0xFFFF, (value >> 16) & 0xFFFF], dtype=np.float32)


def _join_u32(arr: np.ndarray) -> int:
    return int(arr[0]) | (int(arr[1]) << 16)


def checkpoint_entries(model: UNetModel, optimizer: bool = True, train_state: Optional[dict] = None) -> Dict[str, np.ndarray]:
    entries = {}
    for key, value in asdict(model.cfg).items():
        entries[CONFIG_PREFIX + key] = np.array(value, dtype=np.float32)
    entries[CONFIG_PREFIX + "seed"] = _split_u32(model.seed)
    for p in model.parameters():
        entries[p.name] = p.data
    for bn in model.norms():
        entries[bn.name + RUNNING_MEAN] = bn.running_mean
        entries[bn.name + RUNNING_VAR] = bn.running_var
    if optimizer:
        for p in model.parameters():
            entries[p.name + ADAM_M] = p.adam_m
            entries[p.name + ADAM_V] = p.adam_v
            entries[p.name + ADAM_STEP] = _split_u32(p.step_count)
    for key, value in (train_state or {}).items():
        entries[TRAIN_PREFIX + key] = _split_u32(value)
    return entries


def save_weights(model: UNetModel, path, optimizer: bool = True, train_state: Optional[dict] = None) -> None:
    """Write model weights, batchnorm statistics and (optionally) Adam state.

    ``train_state`` holds extra non-negative integer counters (epoch, step, ...).
    Data is stored as float32.
    """
    blob = _pack_entries(checkpoint_entries(model, optimizer, train_state))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    return _unpack_entries(Path(path).read_bytes())


def config_from_entries(entries: Dict[str, np.ndarray]) -> ModelConfig:
    kwargs = {}
    for key in ModelConfig.__dataclass_fields__:
        name = CONFIG_PREFIX + key
        if name not in entries:
            raise CheckpointError(f"checkpoint lacks model config field {key!r}")
        kwargs[key] = int(entries[name])
    return ModelConfig(**kwargs)


def load_weights(path, model: Optional[UNetModel] = None, dtype=np.float32):
    """Load a checkpoint into ``model`` (or a freshly built one).

    Returns ``(model, train_state)``. Any name or shape disagreement raises
    :class:`CheckpointError` naming the first offending parameter.
    """
    entries = read_checkpoint(path)
    if model is None:
        seed = _join_u32(entries.get(CONFIG_PREFIX + "seed", np.zeros(2)))
        model = UNetModel(config_from_entries(entries), seed=seed, dtype=dtype)
    for p in model.parameters():
        if p.name not in entries:
            raise CheckpointError(f"checkpoint has no entry for parameter {p.name!r}")
        stored = entries[p.name]
        if stored.shape != p.shape:
            raise CheckpointError(f"parameter {p.name!r}: checkpoint shape {stored.shape} vs model shape {p.shape}")
    known = {p.name for p in model.parameters()} | {bn.name for bn in model.norms()}
    for name in entries:
        base = name.split("#", 1)[0]
        if not name.startswith((CONFIG_PREFIX, TRAIN_PREFIX)) and base not in known:
            raise CheckpointError(f"checkpoint entry {name!r} has no counterpart in the model")
    for p in model.parameters():
        p.data = entries[p.name].astype(model.dtype)
        p.grad = None
        if p.name + ADAM_M in entries:
            p.adam_m = entries[p.name + ADAM_M].astype(model.dtype)
            p.adam_v = entries[p.name + ADAM_V].astype(model.dtype)
            p.step_count = _join_u32(entries[p.name + ADAM_STEP])
    for bn in model.norms():
        for suffix, attr in ((RUNNING_MEAN, "running_mean"), (RUNNING_VAR, "running_var")):
            arr = entries.get(bn.name + suffix)
            if arr is None or arr.shape != getattr(bn, attr).shape:
                raise CheckpointError(f"checkpoint entry {bn.name + suffix!r} missing or mis-shaped")
            setattr(bn, attr, arr.astype(model.dtype))
    train_state = {
        name[len(TRAIN_PREFIX):]: _join_u32(arr) for name, arr in entries.items() if name.startswith(TRAIN_PREFIX)
    }
    return model, train_state
