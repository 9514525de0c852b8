"""Dense-tensor substrate shared by every learned module.

Forward ops are thin, shape-checked wrappers over torch; gradients come from
torch's reverse-mode engine. ``ParamStore`` owns named parameters together
with adaptive-moment optimizer state, and ``finite_diff_check`` verifies
analytic gradients against central differences in 64-bit precision.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import torch

from .errors import DimensionError, LabelError, NumericError, TrainingError

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64

PROB_EPS = 1e-7
# Additive mask value for hidden keys; exp() of it underflows to exactly 0.
MASK_VALUE = -1e9


def as_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.get_default_dtype())


@contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch torch's default floating dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def matmul(a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError(f"matmul needs at least 1-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise DimensionError(
            f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def softmax(x, dim: int = -1) -> torch.Tensor:
    # torch's fused kernel subtracts the row max internally
    return torch.softmax(as_tensor(x), dim=dim)


def sigmoid(x) -> torch.Tensor:
    return torch.sigmoid(as_tensor(x))


def _clamp_prob(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def binary_cross_entropy(target, prob, eps: float = PROB_EPS) -> torch.Tensor:
    """Elementwise ``-(y ln p + (1-y) ln(1-p))`` with ``p`` clamped to [eps, 1-eps]."""
    prob = as_tensor(prob)
    target = as_tensor(target, prob.dtype)
    if target.shape != prob.shape:
        raise DimensionError(f"target shape {tuple(target.shape)} != prediction shape {tuple(prob.shape)}")
    if bool(((target < 0) | (target > 1)).any()):
        raise LabelError("binary targets must lie in [0, 1]")
    p = _clamp_prob(prob, eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def categorical_cross_entropy(target, prob, eps: float = PROB_EPS) -> torch.Tensor:
    """``-sum_i t_i ln p_i`` over the last axis; one value per leading index."""
    prob = as_tensor(prob)
    target = as_tensor(target, prob.dtype)
    if target.shape != prob.shape:
        raise DimensionError(f"target shape {tuple(target.shape)} != prediction shape {tuple(prob.shape)}")
    sums = target.sum(dim=-1)
    if bool((torch.abs(sums - 1.0) > 1e-6).any()):
        raise LabelError("target distribution does not sum to 1")
    return -(target * torch.log(_clamp_prob(prob, eps))).sum(dim=-1)


def cross_entropy(target, predicted, eps: float = PROB_EPS) -> torch.Tensor:
    """Scalar cross-entropy.

    A scalar prediction (or a 0-d tensor) is treated as a Bernoulli
    probability; anything else as a categorical distribution over the last
    axis. Results are summed to a single scalar.
    """
    predicted = as_tensor(predicted)
    if predicted.dim() == 0:
        return binary_cross_entropy(target, predicted, eps)
    return categorical_cross_entropy(target, predicted, eps).sum()


def attention(queries, keys, values, additive_mask=None) -> torch.Tensor:
    """Scaled dot-product attention.

    queries: (..., Lq, d), keys: (..., Lk, d), values: (..., Lk, dv);
    additive_mask broadcasts against (..., Lq, Lk).
    """
    q, k, v = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {tuple(q.shape)} does not match key width {tuple(k.shape)}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key count {tuple(k.shape)} does not match value count {tuple(v.shape)}")
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if additive_mask is not None:
        mask = as_tensor(additive_mask, scores.dtype)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(
                f"mask shape {tuple(mask.shape)} does not match scores {tuple(scores.shape)}"
            )
        scores = scores + mask
    return torch.matmul(softmax(scores, dim=-1), v)


class ParamStore:
    """Named parameters, their gradients, and Adam moment estimates."""

    def __init__(self, named: Iterable[tuple[str, torch.Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params: dict[str, torch.Tensor] = {}
        for name, p in named:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = p
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self._v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @classmethod
    def from_modules(cls, modules: dict[str, torch.nn.Module], **kw) -> "ParamStore":
        named = [(f"{prefix}.{n}", p) for prefix, m in modules.items() for n, p in m.named_parameters()]
        return cls(named, **kw)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def grad(self, name: str) -> torch.Tensor:
        p = self.params[name]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_elements(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def clip_grad_norm(self, max_norm: float) -> float:
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        if not grads:
            return 0.0
        total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
        if total > max_norm:
            scale = max_norm / (total + 1e-12)
            for g in grads:
                g.mul_(scale)
        return total

    @torch.no_grad()
    def step(self, lr: float | None = None) -> None:
        """One Adam update; gradients are cleared afterwards.

        All gradients are screened before anything is modified, so a NaN
        leaves every parameter and moment untouched.
        """
        for name, p in self.params.items():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self._m[name], self._v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
        self.zero_grad()

    def state(self) -> dict:
        return {"step": self.step_count, "m": self._m, "v": self._v}


@dataclass
class FDReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _fd_loop(loss_fn, values: dict[str, torch.Tensor], name: str, h: float) -> torch.Tensor:
    base = values[name]
    flat = base.reshape(-1)
    fd = torch.empty(flat.numel(), dtype=torch.float64)
    for i in range(flat.numel()):
        out = []
        for sign in (1.0, -1.0):
            p = flat.clone()
            p[i] += sign * h
            out.append(float(loss_fn({**values, name: p.view_as(base)})))
        fd[i] = (out[0] - out[1]) / (2.0 * h)
    return fd


def _fd_vmap(loss_fn, values: dict[str, torch.Tensor], name: str, h: float, chunk: int) -> torch.Tensor:
    base = values[name]
    n = base.numel()
    fd = torch.empty(n, dtype=torch.float64)
    one = lambda p: loss_fn({**values, name: p})
    batched = torch.func.vmap(one)
    for start in range(0, n, chunk):
        idx = torch.arange(start, min(start + chunk, n))
        c = len(idx)
        stack = base.reshape(1, -1).repeat(2 * c, 1)
        rows = torch.arange(c)
        stack[rows, idx] += h
        stack[rows + c, idx] -= h
        losses = batched(stack.view(2 * c, *base.shape)).double()
        fd[idx] = (losses[:c] - losses[c:]) / (2.0 * h)
    return fd


def finite_diff_check(loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor], params: ParamStore,
                      h: float = 1e-5, tol: float = 1e-4,
                      analytic: dict[str, torch.Tensor] | None = None,
                      chunk: int = 256, vectorize: bool = True) -> FDReport:
    """Compare backprop gradients of ``loss_fn`` with central differences.

    ``loss_fn`` maps a dict of parameter values (same names as ``params``) to
    a scalar loss and must not close over the live parameters. Perturbed
    evaluations are batched with ``torch.func.vmap`` when the function allows
    it. ``analytic`` overrides the backprop gradients (negative controls).
    Per parameter the reported figure is the largest elementwise
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)``.
    """
    values = {n: p.detach() for n, p in params}
    if analytic is None:
        leaves = {n: v.clone().requires_grad_(True) for n, v in values.items()}
        loss = loss_fn(leaves)
        if not torch.isfinite(loss):
            raise NumericError("loss is not finite at the base point")
        grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
        analytic = {n: (torch.zeros_like(v) if g is None else g) for (n, v), g in zip(leaves.items(), grads)}

    report = FDReport(tol=tol)
    with torch.no_grad():
        for name, base in values.items():
            if base.numel() == 0:
                report.errors[name] = 0.0
                continue
            fd = None
            if vectorize:
                try:
                    fd = _fd_vmap(loss_fn, values, name, h, chunk)
                except (RuntimeError, NotImplementedError):
                    vectorize = False
            if fd is None:
                fd = _fd_loop(loss_fn, values, name, h)
            if not bool(torch.isfinite(fd).all()):
                raise NumericError(f"non-finite loss while perturbing {name!r}")
            ga = analytic[name].reshape(-1).double()
            floor = torch.tensor(1e-8, dtype=torch.float64)
            denom = torch.maximum(torch.maximum(ga.abs(), fd.abs()), floor)
            report.errors[name] = float(((ga - fd).abs() / denom).max())
    return report
