"""
Binary checkpoint format.

All integers little-endian. Layout:

    magic          b"RPE2D1\\n"
    config         u4 byte length, UTF-8 canonical INI text
    global_step    i8
    seed           i8
    parameters     u4 count, then per parameter:
                   u4 name length, UTF-8 name, u4 rank, rank x u4 dims, <f4 data
    optimizer      i8 step_count, 5 x <f8 (lr, beta1, beta2, eps, weight_decay),
                   per parameter: u1 flag, and when set two <f4 moment arrays
                   shaped like the parameter
    numpy rng      u4 length, UTF-8 JSON of the PCG64 bit generator state
    torch rng      u4 length, raw torch.Generator state bytes
    trailer        32 byte SHA-256 of everything above
"""

import glob
import hashlib
import io
import json
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from sources.errors import CheckpointError
from sources.logger import Logger
from sources.numerics import OptimizerState

MAGIC = b"RPE2D1\n"
DIGEST_SIZE = 32
CHECKPOINT_PATTERN = "ckpt_*.bin"

logger = Logger("checkpoint.log")


@dataclass
class Checkpoint:
    config_text: str
    global_step: int
    seed: int
    parameters: List[Tuple[str, np.ndarray]]
    optimizer: OptimizerState
    numpy_rng_state: Dict = field(default_factory=dict)
    torch_rng_state: bytes = b""

    def parameter_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.parameters)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.offset + n > len(self.payload):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype, count=count)

    def u1(self) -> int:
        return int(self.array("<u1", 1)[0])

    def u4(self) -> int:
        return int(self.array("<u4", 1)[0])

    def i8(self) -> int:
        return int(self.array("<i8", 1)[0])

    def blob(self) -> bytes:
        return self.take(self.u4())


def _write_blob(buf: io.BytesIO, payload: bytes) -> None:
    buf.write(np.array([len(payload)], dtype="<u4").tobytes())
    buf.write(payload)


def _write_array(buf: io.BytesIO, values: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_blob(buf, ckpt.config_text.encode("utf-8"))
    buf.write(np.array([ckpt.global_step, ckpt.seed], dtype="<i8").tobytes())
    buf.write(np.array([len(ckpt.parameters)], dtype="<u4").tobytes())
    for name, values in ckpt.parameters:
        _write_blob(buf, name.encode("utf-8"))
        buf.write(np.array([values.ndim] + list(values.shape), dtype="<u4").tobytes())
        _write_array(buf, values)
    opt = ckpt.optimizer
    if len(opt.first_moment) != len(ckpt.parameters):
        raise CheckpointError(f"optimizer holds {len(opt.first_moment)} moments for {len(ckpt.parameters)} parameters")
    buf.write(np.array([opt.step_count], dtype="<i8").tobytes())
    buf.write(np.array([opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay], dtype="<f8").tobytes())
    for m1, m2 in zip(opt.first_moment, opt.second_moment):
        buf.write(np.array([0 if m1 is None else 1], dtype="<u1").tobytes())
        if m1 is not None:
            _write_array(buf, _as_numpy(m1))
            _write_array(buf, _as_numpy(m2))
    _write_blob(buf, json.dumps(ckpt.numpy_rng_state, sort_keys=True).encode("utf-8"))
    _write_blob(buf, bytes(ckpt.torch_rng_state))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode(payload: bytes) -> Checkpoint:
    if len(payload) < len(MAGIC) + DIGEST_SIZE:
        raise CheckpointError(f"checkpoint truncated: only {len(payload)} bytes")
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    body, digest = payload[:-DIGEST_SIZE], payload[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupted or truncated file)")
    reader = _Reader(body)
    reader.take(len(MAGIC))
    try:
        config_text = reader.blob().decode("utf-8")
        global_step, seed = reader.i8(), reader.i8()
        parameters = []
        for _ in range(reader.u4()):
            name = reader.blob().decode("utf-8")
            rank = reader.u4()
            shape = tuple(int(d) for d in reader.array("<u4", rank))
            parameters.append((name, reader.array("<f4", int(np.prod(shape, dtype=np.int64))).reshape(shape).copy()))
        step_count = reader.i8()
        lr, beta1, beta2, eps, weight_decay = (float(v) for v in reader.array("<f8", 5))
        first, second = [], []
        for _, values in parameters:
            if reader.u1():
                first.append(torch.from_numpy(reader.array("<f4", values.size).reshape(values.shape).copy()))
                second.append(torch.from_numpy(reader.array("<f4", values.size).reshape(values.shape).copy()))
            else:
                first.append(None)
                second.append(None)
        numpy_state = json.loads(reader.blob().decode("utf-8"))
        torch_state = reader.blob()
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if reader.offset != len(body):
        raise CheckpointError(f"{len(body) - reader.offset} trailing bytes after checkpoint body")
    optimizer = OptimizerState(step_count=step_count, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                               weight_decay=weight_decay, first_moment=first, second_moment=second)
    return Checkpoint(config_text=config_text, global_step=global_step, seed=seed, parameters=parameters,
                      optimizer=optimizer, numpy_rng_state=numpy_state, torch_rng_state=torch_state)


def _as_numpy(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy().astype(np.float32)
    return np.asarray(values, dtype=np.float32)


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    """Write atomically: temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    payload = encode(ckpt)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)
    logger.info(f"saved checkpoint {path} step={ckpt.global_step} bytes={len(payload)}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint '{path}' not found")
    with open(path, "rb") as f:
        payload = f.read()
    try:
        ckpt = decode(payload)
    except CheckpointError as exc:
        logger.error(f"rejected checkpoint {path}: {exc}")
        raise
    logger.info(f"loaded checkpoint {path} step={ckpt.global_step}")
    return ckpt


def checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"ckpt_{step:08d}.bin")


def latest_checkpoint(out_dir: str) -> Optional[str]:
    paths = sorted(glob.glob(os.path.join(out_dir, CHECKPOINT_PATTERN)))
    paths = [p for p in paths if re.search(r"ckpt_\d{8}\.bin$", p)]
    return paths[-1] if paths else None


def capture(model: torch.nn.Module, optimizer_state: OptimizerState, config_text: str, global_step: int,
            seed: int, np_rng: np.random.Generator, torch_gen: torch.Generator) -> Checkpoint:
    params = [(name, _as_numpy(p)) for name, p in model.named_parameters()]
    return Checkpoint(config_text=config_text, global_step=global_step, seed=seed, parameters=params,
                      optimizer=optimizer_state, numpy_rng_state=np_rng.bit_generator.state,
                      torch_rng_state=torch_gen.get_state().numpy().tobytes())


def restore_parameters(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    stored = ckpt.parameter_dict()
    own = dict(model.named_parameters())
    if set(stored) != set(own):
        missing = sorted(set(own) - set(stored))
        extra = sorted(set(stored) - set(own))
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, param in own.items():
            if tuple(param.shape) != stored[name].shape:
                raise CheckpointError(f"parameter '{name}' has shape {stored[name].shape}, "
                                      f"model expects {tuple(param.shape)}")
            param.copy_(torch.from_numpy(stored[name]).to(param.dtype))


def restore_rngs(ckpt: Checkpoint, np_rng: np.random.Generator, torch_gen: torch.Generator) -> None:
    if ckpt.numpy_rng_state:
        np_rng.bit_generator.state = ckpt.numpy_rng_state
    if ckpt.torch_rng_state:
        torch_gen.set_state(torch.frombuffer(bytearray(ckpt.torch_rng_state), dtype=torch.uint8))
