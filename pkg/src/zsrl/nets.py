"""Networks, parameter stores, optimiser steps and the checkpoint container.

Autodiff is delegated to torch.  Network forward passes are written as plain
functions over a name -> tensor mapping so they can be evaluated on an
arbitrary :class:`ParamStore` (for finite-difference checks, functional
gradients) as well as through the ``nn.Module`` wrappers used in training.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import MAGIC, VERSION, DatasetFormatError

Tensor = torch.Tensor

# ---------------------------------------------------------------------------
# parameter stores


@dataclass
class ParamStore:
    tensors: Dict[str, Tensor]
    step: int = 0

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not torch.is_tensor(t):
                raise TypeError(f"{name} is not a tensor")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def clone(self) -> "ParamStore":
        return ParamStore({k: v.detach().clone() for k, v in self.tensors.items()}, self.step)

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.tensors.values())

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls({k: v.detach().clone() for k, v in module.named_parameters()})

    def load_into(self, module: nn.Module) -> None:
        with torch.no_grad():
            for k, v in module.named_parameters():
                v.copy_(self.tensors[k])


def gradient(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore) -> ParamStore:
    """Reverse-mode gradient of a scalar loss with respect to every tensor in ``params``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(ParamStore(leaves, params.step))
    if loss.numel() != 1:
        raise ValueError("loss must be scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    return ParamStore(
        {k: torch.zeros_like(leaves[k]) if g is None else g.detach() for k, g in zip(names, grads)},
        params.step,
    )


@dataclass
class AdamState:
    first: Dict[str, Tensor] = field(default_factory=dict)
    second: Dict[str, Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamStore,
    grads: ParamStore,
    state: AdamState,
    lr: float = 1e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    state.t += 1
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.first.get(k, torch.zeros_like(p)) * b1 + (1 - b1) * g
        v = state.second.get(k, torch.zeros_like(p)) * b2 + (1 - b2) * g * g
        state.first[k], state.second[k] = m, v
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        out[k] = p - lr * m_hat / (v_hat.sqrt() + eps)
    return ParamStore(out, params.step + 1)


def polyak_update(target, online, nu: float = 0.01):
    """``target <- nu * online + (1 - nu) * target`` for modules (in place) or ParamStores."""
    if not 0.0 <= nu <= 1.0:
        raise ValueError("nu must lie in [0, 1]")
    if isinstance(target, nn.Module):
        with torch.no_grad():
            t_params = list(target.parameters())
            o_params = list(online.parameters())
            if len(t_params) != len(o_params):
                raise ValueError("target and online modules differ in structure")
            for t, o in zip(t_params, o_params):
                if t.shape != o.shape:
                    raise ValueError("target and online shapes differ")
                t.mul_(1.0 - nu).add_(o, alpha=nu)
        return target
    out = {}
    for k, t in target.items():
        o = online[k]
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch for {k}")
        out[k] = nu * o + (1.0 - nu) * t
    return ParamStore(out, target.step)


# ---------------------------------------------------------------------------
# feedforward networks


@dataclass(frozen=True)
class MLPSpec:
    """``in_dim -> hidden... -> out_dim``; the first hidden layer is LayerNorm + tanh."""

    in_dim: int
    hidden: Tuple[int, ...]
    out_dim: int
    activation: str = "relu"
    output_activation: Optional[str] = None

    def __post_init__(self):
        if min((self.in_dim, self.out_dim) + tuple(self.hidden)) <= 0:
            raise ValueError("layer widths must be positive")

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.in_dim,) + tuple(self.hidden) + (self.out_dim,)


_ACTIVATIONS = {
    None: lambda x: x,
    "relu": torch.relu,
    "tanh": torch.tanh,
    "elu": torch.nn.functional.elu,
}


def init_mlp_params(spec: MLPSpec, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> Dict[str, Tensor]:
    """Fan-in scaled uniform weights and biases; LayerNorm starts at unit gain."""
    params = {}
    widths = spec.widths
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"w{i}"] = (torch.rand(fan_out, fan_in, generator=generator, dtype=dtype) * 2 - 1) * bound
        params[f"b{i}"] = (torch.rand(fan_out, generator=generator, dtype=dtype) * 2 - 1) * bound
    if spec.hidden:
        params["ln_gain"] = torch.ones(spec.hidden[0], dtype=dtype)
        params["ln_bias"] = torch.zeros(spec.hidden[0], dtype=dtype)
    return params


def mlp_forward(spec: MLPSpec, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"expected input width {spec.in_dim}, got {x.shape[-1]}")
    n_layers = len(spec.widths) - 1
    act = _ACTIVATIONS[spec.activation]
    for i in range(n_layers):
        x = torch.nn.functional.linear(x, params[f"w{i}"], params[f"b{i}"])
        if i == n_layers - 1:
            break
        if i == 0:
            x = torch.nn.functional.layer_norm(x, (x.shape[-1],), params["ln_gain"], params["ln_bias"])
            x = torch.tanh(x)
        else:
            x = act(x)
    return _ACTIVATIONS[spec.output_activation](x)


class MLP(nn.Module):
    def __init__(self, spec: MLPSpec, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.spec = spec
        self.params = nn.ParameterDict(
            {k: nn.Parameter(v) for k, v in init_mlp_params(spec, generator).items()}
        )

    def forward(self, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, self.params, x)


# ---------------------------------------------------------------------------
# gated recurrent cell


def init_gru_params(in_dim: int, hidden: int, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> Dict[str, Tensor]:
    """Stacked (reset, update, candidate) weights, uniform in ``+-1/sqrt(hidden)``."""
    bound = 1.0 / math.sqrt(hidden)

    def u(*shape):
        return (torch.rand(*shape, generator=generator, dtype=dtype) * 2 - 1) * bound

    return {
        "w_ih": u(3 * hidden, in_dim),
        "w_hh": u(3 * hidden, hidden),
        "b_ih": u(3 * hidden),
        "b_hh": u(3 * hidden),
    }


def gru_step(params: Mapping[str, Tensor], x: Tensor, h_prev: Tensor) -> Tensor:
    """``h = u * candidate + (1 - u) * h_prev`` with reset gate applied inside the candidate."""
    gi = torch.nn.functional.linear(x, params["w_ih"], params["b_ih"])
    gh = torch.nn.functional.linear(h_prev, params["w_hh"], params["b_hh"])
    i_r, i_u, i_n = gi.chunk(3, -1)
    h_r, h_u, h_n = gh.chunk(3, -1)
    reset = torch.sigmoid(i_r + h_r)
    update = torch.sigmoid(i_u + h_u)
    candidate = torch.tanh(i_n + reset * h_n)
    return update * candidate + (1.0 - update) * h_prev


# ---------------------------------------------------------------------------
# checkpoint container (same magic/version prefix as datasets)

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _pack_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype][1]).tobytes()
        out.append(_pack_str(name) + _pack_str(dtype) + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DatasetFormatError(f"{self.path}: truncated container")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _unpack_arrays(reader: _Reader) -> Dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        name, dtype = reader.string(), reader.string()
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        if dtype not in _DTYPES:
            raise DatasetFormatError(f"{reader.path}: unknown dtype {dtype}")
        arrays[name] = np.frombuffer(reader.take(nbytes), dtype=_DTYPES[dtype][1]).reshape(shape).astype(dtype)
    return arrays


def save_container(path, sections: Mapping[str, Mapping[str, np.ndarray]], meta: Optional[dict] = None) -> None:
    """Write named array groups; each group becomes a ``PARAMS/<group>`` section."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    if meta is not None:
        payload = json.dumps(meta, sort_keys=True).encode("utf-8")
        chunks += [_pack_str("META"), struct.pack("<Q", len(payload)), payload]
    for group, arrays in sections.items():
        payload = _pack_arrays(arrays)
        chunks += [_pack_str(f"PARAMS/{group}"), struct.pack("<Q", len(payload)), payload]
    Path(path).write_bytes(b"".join(chunks))


def load_container(path) -> Tuple[Dict[str, Dict[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    reader = _Reader(raw, path)
    reader.pos = 4
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    sections, meta = {}, {}
    while reader.pos < len(raw):
        name = reader.string()
        (length,) = reader.unpack("<Q")
        body = _Reader(reader.take(length), path)
        if name == "META":
            meta = json.loads(body.raw.decode("utf-8"))
        elif name.startswith("PARAMS/"):
            sections[name[len("PARAMS/") :]] = _unpack_arrays(body)
        else:
            raise DatasetFormatError(f"{path}: unknown section {name!r}")
    return sections, meta


def module_arrays(module: nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


def seed_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
