"""Feature extractor, label classifier and domain discriminator as small MLPs.

Parameters live in :class:`ModelParams`, an ordered mapping from names such as
``"f.0.weight"`` to :class:`~bptriplet.tensor.Tensor`. Parameter tensors are
never mutated; the optimizer returns a fresh :class:`ModelParams`.

Checkpoint layout (all integers little-endian)::

    magic    8 bytes   b"BPTRCKPT"
    version  uint32    currently 1
    count    uint32    number of tensors
    per tensor, in insertion order:
      name_len  uint16, name  utf-8 bytes
      ndim      uint32, dims  ndim x uint32
      payload   prod(dims) x float64, row-major
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"BPTRCKPT"
CHECKPOINT_VERSION = 1

PARTS = ("f", "y", "d")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; ReLU between layers, none at the end."""

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


class ModelParams:
    """theta_f, theta_y and theta_d keyed as ``"<part>.<layer>.weight|bias"``."""

    def __init__(self, specs: dict[str, MlpSpec], tensors: dict[str, Tensor]):
        self.specs = dict(specs)
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, part: str | None = None) -> list[str]:
        if part is None:
            return list(self.tensors)
        return [n for n in self.tensors if n.split(".", 1)[0] == part]

    def replace(self, new_tensors: dict[str, Tensor]) -> "ModelParams":
        merged = dict(self.tensors)
        merged.update(new_tensors)
        return ModelParams(self.specs, merged)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.tensors.values()]))

    def to_bytes(self) -> bytes:
        return dumps(self)

    def equal(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k].data, other.tensors[k].data) for k in self.tensors
        )


def _check_compat(spec_f: MlpSpec, spec_y: MlpSpec, spec_d: MlpSpec) -> None:
    if spec_y.n_in != spec_f.n_out:
        raise ShapeError(f"classifier input {spec_y.n_in} != feature width {spec_f.n_out}")
    if spec_d.n_in != spec_f.n_out:
        raise ShapeError(f"discriminator input {spec_d.n_in} != feature width {spec_f.n_out}")
    if spec_d.n_out != 2:
        raise ShapeError(f"discriminator must output 2 domain logits, got {spec_d.n_out}")
    if spec_y.n_out < 2:
        raise ShapeError("classifier needs at least two categories")


def init_mlp(spec: MlpSpec, prefix: str, rng: np.random.Generator) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases."""
    out = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        out[f"{prefix}.{i}.weight"] = Tensor(w, requires_grad=True, name=f"{prefix}.{i}.weight")
        out[f"{prefix}.{i}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.{i}.bias")
    return out


def init_params(spec_f: MlpSpec, spec_y: MlpSpec, spec_d: MlpSpec, seed: int) -> ModelParams:
    _check_compat(spec_f, spec_y, spec_d)
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for part, spec in zip(PARTS, (spec_f, spec_y, spec_d)):
        tensors.update(init_mlp(spec, part, rng))
    return ModelParams({"f": spec_f, "y": spec_y, "d": spec_d}, tensors)


def mlp_forward(params: ModelParams, part: str, x) -> Tensor:
    spec = params.specs[part]
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ShapeError(f"{part}: expected b x {spec.n_in} input, got {x.shape}")
    h = x
    for i in range(spec.n_layers):
        h = T.add_bias(h @ params[f"{part}.{i}.weight"], params[f"{part}.{i}.bias"])
        if i < spec.n_layers - 1:
            h = T.relu(h)
    return h


def forward_features(params: ModelParams, x) -> Tensor:
    return mlp_forward(params, "f", x)


def class_logprobs(params: ModelParams, features: Tensor) -> Tensor:
    return T.log_softmax(mlp_forward(params, "y", features))


def classify(params: ModelParams, features: Tensor) -> np.ndarray:
    """Per-category probabilities for each row (no tape involvement)."""
    return np.exp(class_logprobs(params, T.stop_gradient(features)).data)


def domain_logprobs(params: ModelParams, features: Tensor, grl_coeff: float, reverse: bool = True) -> Tensor:
    """Discriminator log-probabilities; features pass through gradient reversal first.

    ``reverse=False`` skips the reversal layer, which is only useful for
    checking that the reversal flips the sign of the feature gradient.
    """
    h = T.gradient_reverse(features, grl_coeff) if reverse else features
    return T.log_softmax(mlp_forward(params, "d", h))


def discriminate(params: ModelParams, features: Tensor, grl_coeff: float = 1.0) -> np.ndarray:
    return np.exp(domain_logprobs(params, T.stop_gradient(features), grl_coeff).data)


def predict(params: ModelParams, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Argmax category per row; ties resolve to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    preds = []
    for start in range(0, len(x), chunk):
        lp = class_logprobs(params, forward_features(params, x[start : start + chunk]))
        preds.append(np.argmax(lp.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def extract_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward_features(params, np.asarray(x, dtype=np.float64)).numpy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def dumps(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(dumps(params))


def load_checkpoint(path: str | Path, spec_f: MlpSpec, spec_y: MlpSpec, spec_d: MlpSpec) -> ModelParams:
    arrays = loads(Path(path).read_bytes())
    template = init_params(spec_f, spec_y, spec_d, seed=0)
    if list(arrays) != list(template.tensors):
        raise CheckpointError("checkpoint tensor names do not match the model specs")
    tensors = {}
    for name, arr in arrays.items():
        if arr.shape != template[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {template[name].shape}")
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(template.specs, tensors)
