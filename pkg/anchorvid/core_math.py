"""
Dense tensor arithmetic with a gradient contract.
Forward values and the reverse pass come from torch autograd; an independent
central-difference oracle verifies every analytic gradient.
"""
import json
import logging
import struct
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContainerFormatError, GradientError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "concat",
    "slice",
    "reshape",
    "transpose",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "mse",
)

CHECKPOINT_MAGIC = b"AVCK"
CHECKPOINT_VERSION = 1


def ensure_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise NonFiniteError when t holds a NaN or Inf."""
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"Non-finite values in {what}")
    return t


def _require_tensor(b: Optional[Tensor], kind: str) -> Tensor:
    if b is None:
        raise ShapeError(f"{kind} needs a second operand")
    return b


def _matmul(a: Tensor, b: Optional[Tensor], **_: Any) -> Tensor:
    b = _require_tensor(b, "matmul")
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        return torch.matmul(a, b)
    except RuntimeError as e:
        raise ShapeError(f"matmul batch dims incompatible: {e}") from e


def _broadcasting(fn: Callable[[Tensor, Tensor], Tensor], name: str):
    def op(a: Tensor, b: Optional[Tensor], **_: Any) -> Tensor:
        b = _require_tensor(b, name)
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError as e:
            raise ShapeError(f"{name} shapes incompatible: {tuple(a.shape)} vs {tuple(b.shape)}") from e
        return fn(a, b)

    return op


def _concat(a: Tensor, b: Optional[Tensor], dim: int = 0, **_: Any) -> Tensor:
    b = _require_tensor(b, "concat")
    if a.dim() != b.dim():
        raise ShapeError(f"concat rank mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = dim % a.dim()
    for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
        if axis != d and x != y:
            raise ShapeError(f"concat shapes differ off axis {d}: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.cat([a, b], dim=d)


def _slice(a: Tensor, b: Optional[Tensor] = None, dim: int = 0, start: int = 0, stop: Optional[int] = None, **_: Any) -> Tensor:
    extent = a.shape[dim]
    stop = extent if stop is None else stop
    if not 0 <= start <= stop <= extent:
        raise ShapeError(f"slice [{start}:{stop}) outside extent {extent} on axis {dim}")
    return a.narrow(dim, start, stop - start)


def _reshape(a: Tensor, b: Optional[Tensor] = None, shape: Sequence[int] = (), **_: Any) -> Tensor:
    if int(np.prod(shape)) != a.numel():
        raise ShapeError(f"cannot reshape {tuple(a.shape)} into {tuple(shape)}")
    return a.reshape(tuple(shape))


def _transpose(a: Tensor, b: Optional[Tensor] = None, dims: Tuple[int, int] = (-2, -1), **_: Any) -> Tensor:
    if a.dim() < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {tuple(a.shape)}")
    return a.transpose(*dims)


def _softmax_lastdim(a: Tensor, b: Optional[Tensor] = None, **_: Any) -> Tensor:
    return torch.softmax(a, dim=-1)


def _layer_norm(a: Tensor, b: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-6, **_: Any) -> Tensor:
    width = a.shape[-1]
    if b is not None and b.shape != (width,):
        raise ShapeError(f"layer_norm weight shape {tuple(b.shape)} does not match width {width}")
    return F.layer_norm(a, (width,), weight=b, bias=bias, eps=eps)


def _gelu(a: Tensor, b: Optional[Tensor] = None, **_: Any) -> Tensor:
    return F.gelu(a)


def _mse(a: Tensor, b: Optional[Tensor], **_: Any) -> Tensor:
    b = _require_tensor(b, "mse")
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


_OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": _matmul,
    "add": _broadcasting(torch.add, "add"),
    "mul": _broadcasting(torch.mul, "mul"),
    "concat": _concat,
    "slice": _slice,
    "reshape": _reshape,
    "transpose": _transpose,
    "softmax_lastdim": _softmax_lastdim,
    "layer_norm": _layer_norm,
    "gelu": _gelu,
    "mse": _mse,
}


def op_set(a: Tensor, b: Optional[Tensor], kind: str, **options: Any) -> Tensor:
    """Evaluate one primitive; the result stays on the autograd tape."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ShapeError(f"Unknown op kind '{kind}'") from None
    return ensure_finite(fn(a, b, **options), f"{kind} output")


class ParamStore:
    """Named parameters, each with a gradient accumulator of identical shape."""

    def __init__(self, params: Mapping[str, Tensor]):
        self._params: Dict[str, Tensor] = dict(params)
        self.grads: Dict[str, Tensor] = {name: torch.zeros_like(p) for name, p in self._params.items()}

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for name, p in self._params.items():
            self.grads[name] = torch.zeros_like(p)

    def grad_norm(self) -> float:
        total = sum(float((g.double() ** 2).sum()) for g in self.grads.values())
        return float(np.sqrt(total))

    def push_grads(self) -> None:
        """Copy accumulators into .grad so a torch optimizer can consume them."""
        for name, p in self._params.items():
            p.grad = self.grads[name].detach().clone()


def grad(loss: Tensor, params: ParamStore) -> Dict[str, Tensor]:
    """Fill the accumulators of params with d(loss)/d(param)."""
    if loss.numel() != 1:
        raise GradientError(f"Loss must be a scalar, got shape {tuple(loss.shape)}")
    names = params.names()
    detached = [name for name in names if not params[name].requires_grad]
    if detached:
        raise GradientError(f"Detached parameters: {', '.join(detached)}")
    ensure_finite(loss, "loss")

    if loss.requires_grad:
        grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    else:
        # loss is constant in every parameter
        grads = [None] * len(names)

    for name, g in zip(names, grads):
        if g is None:
            params.grads[name] = torch.zeros_like(params[name])
        else:
            params.grads[name] = ensure_finite(g.detach(), f"gradient of {name}")
    return params.grads


def finite_diff_grad(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    coords: Optional[Mapping[str, Sequence[int]]] = None,
) -> Dict[str, Tensor]:
    """
    Central-difference estimate (f(p+eps) - f(p-eps)) / 2eps per coordinate.

    With coords the estimate is taken only at those flat indices and each entry
    of the result is a 1-D tensor aligned with coords[name]; otherwise entries
    have the parameter's shape.
    """
    if eps <= 0:
        raise GradientError(f"Finite-difference step must be positive, got {eps}")

    estimates: Dict[str, Tensor] = {}
    with torch.no_grad():
        for name in params.names():
            p = params[name]
            flat = p.view(-1)
            indices = range(flat.numel()) if coords is None else list(coords.get(name, ()))
            out = torch.zeros(len(indices), dtype=torch.float64)
            for k, i in enumerate(indices):
                original = flat[i].item()
                flat[i] = original + eps
                f_plus = float(loss_fn(params))
                flat[i] = original - eps
                f_minus = float(loss_fn(params))
                flat[i] = original
                out[k] = (f_plus - f_minus) / (2.0 * eps)
            estimates[name] = out.view(p.shape) if coords is None else out
    return estimates


def sample_coordinates(params: ParamStore, per_param: int, seed: int = 0) -> Dict[str, List[int]]:
    """Pick up to per_param flat indices of each parameter, seeded."""
    rng = np.random.default_rng(seed)
    picked = {}
    for name, p in params.items():
        n = p.numel()
        k = min(per_param, n)
        picked[name] = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    return picked


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-12) -> float:
    """Norm-wise relative error |a - b| / max(|a|, |b|)."""
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    scale = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / scale


def build_optimizer(
    params: Iterable[Tensor],
    lr: float = 1e-5,
    betas: Tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.1,
) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(params), lr=lr, betas=tuple(betas), weight_decay=weight_decay)


def write_container(
    path: str,
    tensors: Mapping[str, Tensor],
    meta: Optional[Mapping[str, Any]] = None,
    magic: bytes = CHECKPOINT_MAGIC,
) -> None:
    """
    Write named tensors to a single binary file.

    Layout (all integers little-endian uint32):
        magic (4 bytes, "AVCK" for checkpoints) | version | meta_len | meta JSON (utf-8)
        count | count x (name_len | name utf-8 | ndim | dims...)
        payload: each tensor in table order as little-endian float32, row-major
    """
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    header = [magic, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes]
    header.append(struct.pack("<I", len(tensors)))
    payload = []
    for name, t in tensors.items():
        name_bytes = name.encode("utf-8")
        dims = tuple(t.shape)
        header.append(struct.pack("<I", len(name_bytes)) + name_bytes)
        header.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        payload.append(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(header))
        f.write(b"".join(payload))
    logger.debug(f"Wrote container with {len(tensors)} tensors to {path}")


def read_container(path: str, magic: bytes = CHECKPOINT_MAGIC) -> Tuple[Dict[str, Tensor], Dict[str, Any]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != magic:
        raise ContainerFormatError(f"{path} does not start with {magic!r}")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise ContainerFormatError(f"Unsupported container version {version}")
        offset = 12
        meta = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
        offset += meta_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            table.append((name, dims))
        tensors = {}
        for name, dims in table:
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            tensors[name] = torch.from_numpy(data.astype(np.float32).reshape(dims))
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ContainerFormatError(f"Corrupt container {path}: {e}") from e
    return tensors, meta


def training_state(model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None) -> Dict[str, Tensor]:
    """Flatten parameters and AdamW moments into checkpoint entries."""
    state = {f"param/{name}": p.detach() for name, p in model.named_parameters()}
    if optimizer is not None:
        for name, p in model.named_parameters():
            slot = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in slot:
                    state[f"optim/{key}/{name}"] = slot[key].detach()
    return state


def restore_training_state(
    model: torch.nn.Module,
    tensors: Mapping[str, Tensor],
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in tensors:
                raise ContainerFormatError(f"Checkpoint is missing parameter {name}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise ContainerFormatError(f"Checkpoint shape mismatch for {name}")
            p.copy_(tensors[key].to(p.dtype))
    if optimizer is None:
        return
    for name, p in model.named_parameters():
        avg = tensors.get(f"optim/exp_avg/{name}")
        avg_sq = tensors.get(f"optim/exp_avg_sq/{name}")
        if avg is None or avg_sq is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": avg.to(p.dtype).clone(),
            "exp_avg_sq": avg_sq.to(p.dtype).clone(),
        }


def save_checkpoint(path: str, tensors: Mapping[str, Tensor], meta: Optional[Mapping[str, Any]] = None) -> None:
    write_container(path, tensors, meta, magic=CHECKPOINT_MAGIC)


def load_checkpoint(path: str) -> Tuple[Dict[str, Tensor], Dict[str, Any]]:
    return read_container(path, magic=CHECKPOINT_MAGIC)
