"""FINN1 checkpoint files: model + optimizer state, bit-exact round trip.

Layout (all little-endian, headers are single ASCII lines):

    FINN1\n
    config <nbytes>\n      <canonical key=value text>
    perms <count>\n        then per entry:  perm <len>\n  <len * int64>
    tensors <count>\n      then per entry:  tensor <name> <ndim> <dims...>\n
                           <prod(dims) * float64>
    sha256 <hex>\n         digest of every preceding byte

The config block freezes ModelConfig, TrainConfig, LossWeights and
LatentSpec as one key=value line per field (fixed order, repr-formatted
floats, so parsing reproduces each value bitwise).  Channel permutations
are stored explicitly rather than re-derived from the seed, so a saved
model survives changes to the permutation sampling.  Tensor bytes cover
the parameters first, then the Adam moments (m, then v) in the same
parameter order.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import format_value, parse_scalar, field_kind
from .errors import CheckpointError
from .flow import FlowModel, LatentSpec, ModelConfig
from .losses import LossWeights
from .training import AdamState, TrainConfig

MAGIC = b"FINN1\n"
_CHECKSUM_LINE_LEN = len("sha256 \n") + 64  # fixed-width trailer


# ---------------------------------------------------------------------------
# canonical key=value config text
# ---------------------------------------------------------------------------

def parse_value(kind: str, text: str, key: str):
    try:
        return parse_scalar(kind, text)
    except ValueError as err:
        raise CheckpointError(f"config key {key}: {err}") from None


# TrainConfig's compound fields get their own sections.
_SKIP_FIELDS = {"loss_weights", "latent"}


def _section_lines(prefix, cfg):
    for f in dataclasses.fields(cfg):
        if f.name in _SKIP_FIELDS:
            continue
        yield f"{prefix}.{f.name}={format_value(getattr(cfg, f.name))}"


def _parse_section(cls, prefix, kv):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in _SKIP_FIELDS:
            continue
        key = f"{prefix}.{f.name}"
        if key not in kv:
            raise CheckpointError(f"config block is missing key {key!r}")
        kwargs[f.name] = parse_value(field_kind(f), kv.pop(key), key)
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# checkpoint value object
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    permutations: tuple          # one int array per block gap
    tensors: dict                # name -> float64 array; params then moments
    step_count: int = 0
    lr: float = 0.0              # current (post-plateau) learning rate


def checkpoint_of(model: FlowModel, train_config: TrainConfig,
                  opt: AdamState = None) -> Checkpoint:
    """Snapshot a model (and optionally its optimizer) into a Checkpoint."""
    tensors = {}
    for name, p in model.parameters():
        tensors[f"param:{name}"] = p.copy()
    if opt is None:
        opt = AdamState(model, train_config)
    for moment in ("m", "v"):
        source = getattr(opt, moment)
        for name, _ in model.parameters():
            tensors[f"adam.{moment}:{name}"] = source[name].copy()
    return Checkpoint(
        model_config=model.config,
        train_config=train_config,
        permutations=tuple(p.copy() for p in model.perms),
        tensors=tensors,
        step_count=opt.step_count,
        lr=opt.lr,
    )


def config_text(ckpt: Checkpoint) -> str:
    lines = []
    lines.extend(_section_lines("model", ckpt.model_config))
    lines.extend(_section_lines("train", ckpt.train_config))
    lines.extend(_section_lines("loss", ckpt.train_config.loss_weights))
    lines.extend(_section_lines("latent", ckpt.train_config.latent))
    lines.append(f"opt.step_count={format_value(ckpt.step_count)}")
    lines.append(f"opt.lr={format_value(ckpt.lr)}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str):
    kv = {}
    for raw in text.splitlines():
        if "=" not in raw:
            raise CheckpointError(f"config block line without '=': {raw!r}")
        key, _, value = raw.partition("=")
        if key in kv:
            raise CheckpointError(f"config block repeats key {key!r}")
        kv[key] = value
    model = _parse_section(ModelConfig, "model", kv)
    train_fields = _parse_section(TrainConfig, "train", kv)
    weights = _parse_section(LossWeights, "loss", kv)
    latent = _parse_section(LatentSpec, "latent", kv)
    step_count = parse_value("int", kv.pop("opt.step_count", "0"), "opt.step_count")
    lr = parse_value("float", kv.pop("opt.lr", "0.0"), "opt.lr")
    if kv:
        raise CheckpointError(f"config block has unknown key {sorted(kv)[0]!r}")
    train = dataclasses.replace(train_fields, loss_weights=weights, latent=latent)
    return model, train, step_count, lr


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blob = bytearray(MAGIC)
    text = config_text(ckpt).encode()
    blob += b"config %d\n" % len(text)
    blob += text
    blob += b"perms %d\n" % len(ckpt.permutations)
    for p in ckpt.permutations:
        arr = np.ascontiguousarray(np.asarray(p, dtype="<i8"))
        blob += b"perm %d\n" % arr.size
        blob += arr.tobytes()
    blob += b"tensors %d\n" % len(ckpt.tensors)
    for name, t in ckpt.tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.ascontiguousarray(np.asarray(t, dtype="<f8"))
        dims = "".join(f" {d}" for d in arr.shape)
        blob += f"tensor {name} {arr.ndim}{dims}\n".encode()
        blob += arr.tobytes()
    blob += b"sha256 %s\n" % hashlib.sha256(bytes(blob)).hexdigest().encode()
    return bytes(blob)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def line(self) -> str:
        nl = self.data.find(b"\n", self.pos)
        if nl < 0:
            raise CheckpointError("truncated checkpoint: unterminated header line")
        raw = self.data[self.pos:nl]
        self.pos = nl + 1
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt checkpoint: non-ASCII header line") from None

    def expect_count(self, keyword: str) -> int:
        parts = self.line().split()
        if len(parts) != 2 or parts[0] != keyword or not parts[1].isdigit():
            raise CheckpointError(f"corrupt checkpoint: expected '{keyword} <n>' header")
        return int(parts[1])

    def raw(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise CheckpointError("truncated checkpoint: payload shorter than header claims")
        out = self.data[self.pos:end]
        self.pos = end
        return out


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a FINN1 checkpoint")
    # Fixed-width trailer first, so corruption anywhere is caught before
    # any of the payload is trusted.
    if len(data) < len(MAGIC) + _CHECKSUM_LINE_LEN:
        raise CheckpointError(f"{path}: truncated checkpoint: missing checksum")
    trailer = data[-_CHECKSUM_LINE_LEN:]
    if not trailer.startswith(b"sha256 ") or not trailer.endswith(b"\n"):
        raise CheckpointError(f"{path}: truncated checkpoint: missing checksum")
    payload = data[:-_CHECKSUM_LINE_LEN]
    digest = hashlib.sha256(payload).hexdigest().encode()
    if trailer[7:-1] != digest:
        raise CheckpointError(f"{path}: checksum mismatch; file is corrupt")

    r = _Reader(payload)
    r.raw(len(MAGIC))
    text = r.raw(r.expect_count("config")).decode()
    model_config, train_config, step_count, lr = _parse_config_text(text)

    perms = []
    for _ in range(r.expect_count("perms")):
        n = r.expect_count("perm")
        perms.append(np.frombuffer(r.raw(8 * n), dtype="<i8").copy())

    tensors = {}
    for _ in range(r.expect_count("tensors")):
        parts = r.line().split()
        if len(parts) < 3 or parts[0] != "tensor":
            raise CheckpointError("corrupt checkpoint: bad tensor header")
        name, ndim = parts[1], int(parts[2])
        if len(parts) != 3 + ndim:
            raise CheckpointError(f"corrupt checkpoint: tensor {name!r} header "
                                  f"promises {ndim} dims, lists {len(parts) - 3}")
        shape = tuple(int(d) for d in parts[3:])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.raw(8 * count), dtype="<f8").reshape(shape).copy()
        if name in tensors:
            raise CheckpointError(f"corrupt checkpoint: duplicate tensor {name!r}")
        tensors[name] = arr
    if r.pos != len(payload):
        raise CheckpointError("corrupt checkpoint: trailing bytes after tensors")

    return Checkpoint(model_config=model_config, train_config=train_config,
                      permutations=tuple(perms), tensors=tensors,
                      step_count=step_count, lr=lr)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def restore_model(ckpt: Checkpoint) -> FlowModel:
    """Rebuild the FlowModel: stored permutations and parameters win over
    anything the config seed would re-derive."""
    model = FlowModel(ckpt.model_config)
    if len(ckpt.permutations) != len(model.perms):
        raise CheckpointError(
            f"checkpoint has {len(ckpt.permutations)} permutations, "
            f"k={ckpt.model_config.k} needs {len(model.perms)}")
    for i, stored in enumerate(ckpt.permutations):
        n = model.perms[i].size
        if stored.size != n or not np.array_equal(np.sort(stored), np.arange(n)):
            raise CheckpointError(f"permutation {i} is not a permutation of 0..{n - 1}")
        model.perms[i] = stored.astype(np.intp)

    expected = {f"param:{name}" for name, _ in model.parameters()}
    stored_params = {k for k in ckpt.tensors if k.startswith("param:")}
    if expected != stored_params:
        missing = sorted(expected - stored_params) + sorted(stored_params - expected)
        raise CheckpointError(f"checkpoint parameters do not match model: {missing[:3]}")
    model.set_parameters(
        (name, ckpt.tensors[f"param:{name}"]) for name, _ in model.parameters())
    return model


def restore_optimizer(ckpt: Checkpoint, model: FlowModel) -> AdamState:
    opt = AdamState(model, ckpt.train_config)
    opt.step_count = ckpt.step_count
    opt.lr = ckpt.lr
    for moment in ("m", "v"):
        target = getattr(opt, moment)
        for name in target:
            key = f"adam.{moment}:{name}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint is missing moment tensor {key!r}")
            if ckpt.tensors[key].shape != target[name].shape:
                raise CheckpointError(f"moment tensor {key!r} has shape "
                                      f"{ckpt.tensors[key].shape}, expected {target[name].shape}")
            target[name] = ckpt.tensors[key].copy()
    return opt
