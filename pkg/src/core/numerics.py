"""
Numerics Module for CLIPin Desk
Float64 tensor helpers on top of torch autograd, seeded counter-based random
streams, and the central-difference gradient oracle every gradient test uses.
"""

import logging
import zlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from core.errors import NonFiniteValue, NotScalar, ShapeMismatch, ZeroNormRow

logger = logging.getLogger(__name__)

DTYPE = torch.float64
NORM_EPS = 1e-12
DEFAULT_FD_STEP = 1e-5

Tensor = torch.Tensor


def tensor(values, shape: Optional[Sequence[int]] = None, requires_grad: bool = False) -> Tensor:
    """
    Build a float64 tensor, optionally reshaped, and check it is finite.

    Args:
        values: Nested sequence, numpy array or tensor of numbers
        shape (sequence): Optional target shape; product must match the value count
        requires_grad (bool): Whether gradients are tracked

    Returns:
        torch.Tensor: float64 tensor

    Raises:
        ShapeMismatch: If ``shape`` does not match the number of values
        NonFiniteValue: If any value is NaN or infinite
    """
    out = torch.as_tensor(np.asarray(values, dtype=np.float64)).clone()
    if shape is not None:
        if int(np.prod(shape)) != out.numel():
            raise ShapeMismatch(f"cannot view {out.numel()} values as shape {tuple(shape)}")
        out = out.reshape(tuple(shape))
    check_finite(out)
    return out.requires_grad_(requires_grad)


def check_finite(x: Tensor, name: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return x


def _require_2d(x: Tensor, op: str) -> None:
    if x.dim() != 2:
        raise ShapeMismatch(f"{op} expects a [rows, d] tensor, got shape {tuple(x.shape)}")


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """
    Row-wise l2 normalization.

    Args:
        x (Tensor): [rows, d] (a 1-D tensor is treated as a single row)
        eps (float): Rows with norm <= eps are rejected

    Returns:
        Tensor: Same shape, unit-norm rows, differentiable

    Raises:
        ZeroNormRow: If any row norm is <= eps
    """
    squeeze = x.dim() == 1
    rows = x.unsqueeze(0) if squeeze else x
    _require_2d(rows, "l2_normalize")
    norms = torch.linalg.vector_norm(rows, dim=1, keepdim=True)
    if bool((norms <= eps).any()):
        bad = torch.nonzero(norms.squeeze(1) <= eps).flatten().tolist()
        raise ZeroNormRow(f"rows {bad} have norm <= {eps}")
    out = rows / norms
    return out.squeeze(0) if squeeze else out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape != b.shape and not (b.dim() == 1 and a.dim() == 2 and b.shape[0] == a.shape[1]):
        raise ShapeMismatch(f"add of {tuple(a.shape)} and {tuple(b.shape)}")
    return a + b


def scale(x: Tensor, c: Union[float, Tensor]) -> Tensor:
    if isinstance(c, Tensor) and c.numel() != 1:
        raise ShapeMismatch("scale factor must be a scalar")
    return x * c


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and tuple(p.shape) != (d,):
            raise ShapeMismatch(f"layer_norm {name} shape {tuple(p.shape)} != ({d},)")
    return F.layer_norm(x, (d,), weight, bias, eps)


def softmax_rows(x: Tensor) -> Tensor:
    if x.dim() not in (1, 2):
        raise ShapeMismatch(f"softmax_rows expects 1-D or 2-D input, got {tuple(x.shape)}")
    return torch.softmax(x, dim=-1)


def stop_grad(x: Tensor) -> Tensor:
    """Copy of ``x`` with the backward path cut."""
    return x.detach().clone()


def backward(loss: Tensor) -> None:
    """
    Run reverse-mode accumulation from a scalar loss.

    Raises:
        NotScalar: If ``loss`` holds more than one value
        NonFiniteValue: If the loss is NaN or infinite
    """
    if loss.numel() != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.reshape(()).backward()


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_FD_STEP) -> Tensor:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar-valued function of one tensor
        x (Tensor): Point of evaluation (not modified)
        h (float): Step size, must be > 0

    Returns:
        Tensor: (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i
    """
    if h <= 0:
        raise ValueError(f"finite difference step must be > 0, got {h}")
    base = x.detach().to(DTYPE).clone()
    flat = base.reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + h
            f_plus = float(f(base))
            flat[i] = original - h
            f_minus = float(f(base))
            flat[i] = original
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)


def finite_diff_param_grad(f: Callable[[], Tensor], param: Tensor, h: float = DEFAULT_FD_STEP,
                           indices: Optional[Iterable[int]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Central differences of a closure w.r.t. a parameter perturbed in place.

    Args:
        f: Zero-argument closure returning the scalar loss
        param (Tensor): Parameter tensor (restored on return)
        h (float): Step size
        indices: Flat coordinates to probe; all coordinates when None

    Returns:
        tuple: (flat indices probed, numerical derivatives at those indices)
    """
    flat = param.data.reshape(-1)
    idx = torch.arange(flat.numel()) if indices is None else torch.as_tensor(list(indices), dtype=torch.long)
    out = torch.zeros(idx.numel(), dtype=DTYPE)
    with torch.no_grad():
        for n, i in enumerate(idx.tolist()):
            original = flat[i].item()
            flat[i] = original + h
            f_plus = float(f())
            flat[i] = original - h
            f_minus = float(f())
            flat[i] = original
            out[n] = (f_plus - f_minus) / (2.0 * h)
    return idx, out


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-10) -> float:
    """max |a - n| / max(max|a|, max|n|, floor)."""
    a = analytic.detach().reshape(-1).to(DTYPE)
    n = numeric.detach().reshape(-1).to(DTYPE)
    if a.numel() == 0:
        return 0.0
    denom = max(float(a.abs().max()), float(n.abs().max()), floor)
    return float((a - n).abs().max()) / denom


def _label_key(label: Union[str, int]) -> int:
    if isinstance(label, int):
        return label
    return zlib.crc32(label.encode("utf-8"))


class Rng:
    """
    Counter-based (Philox) random stream with labelled sub-streams.

    ``Rng(seed).child("data")`` and ``Rng(seed).child("augment")`` are
    independent: drawing from one never shifts the other.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, label: Union[str, int]) -> "Rng":
        return Rng(self.seed, self.path + (_label_key(label),))

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self.generator.random(size) < p

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
