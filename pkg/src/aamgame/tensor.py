"""Small numerical kernel used by the policy.

Forward ops are thin, shape-checked wrappers over torch so that reverse-mode
gradients come from autograd.  ``grad_check`` is an independent central
finite-difference check against those gradients.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import torch

LEAKY_SLOPE = 0.2
CHECKPOINT_VERSION = 1


def _check_2d(name: str, x: torch.Tensor) -> None:
    if x.dim() != 2:
        raise ValueError(f"{name}: expected a matrix, got shape {tuple(x.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not align")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return a + b


def concat_rows(blocks: Iterable[torch.Tensor]) -> torch.Tensor:
    blocks = list(blocks)
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ValueError(f"concat_rows: column counts differ {sorted(widths)}")
    return torch.cat(blocks, dim=0)


def mean_rows(x: torch.Tensor) -> torch.Tensor:
    _check_2d("mean_rows", x)
    if x.shape[0] == 0:
        return x.new_zeros(x.shape[1])
    return x.mean(dim=0)


def dot(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if u.shape != v.shape or u.dim() != 1:
        raise ValueError(f"dot: need equal-length vectors, got {tuple(u.shape)} and {tuple(v.shape)}")
    return (u * v).sum()


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    # x >= 0 branch so the subgradient at 0 is 1
    return torch.where(x >= 0, x, slope * x)


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Stable softmax; ``-inf`` entries map to exactly 0."""
    if not bool((logits > -math.inf).any(dim=dim).all()):
        raise ValueError("softmax: every logit is -inf")
    return torch.softmax(logits, dim=dim)


def segment_max(x: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    shape = (n,) + tuple(x.shape[1:])
    out = x.new_full(shape, -math.inf)
    idx = index.view(-1, *([1] * (x.dim() - 1))).expand_as(x)
    return out.scatter_reduce(0, idx, x, reduce="amax", include_self=True)


def segment_sum(x: torch.Tensor, index: torch.Tensor, n: int, canonical: bool = False) -> torch.Tensor:
    """Row sums per group.

    With ``canonical`` set, rows are added in lexicographic order of their
    values rather than by position, so relabeling the inputs reproduces the
    sums bit for bit (at some cost in speed).
    """
    out = x.new_zeros((n,) + tuple(x.shape[1:]))
    if canonical and x.shape[0] > 1:
        rows = x.detach().reshape(x.shape[0], -1)
        rank = torch.unique(rows, dim=0, return_inverse=True)[1]
        order = torch.sort(rank, stable=True).indices
        order = order[torch.sort(index[order], stable=True).indices]
        x, index = x[order], index[order]
    return out.index_add(0, index, x)


def segment_softmax(x: torch.Tensor, index: torch.Tensor, n: int, canonical: bool = False) -> torch.Tensor:
    """Softmax of ``x`` rows grouped by ``index`` (one group per target node)."""
    peak = segment_max(x, index, n).detach()
    z = torch.exp(x - peak[index])
    return z / segment_sum(z, index, n, canonical)[index]


def segment_mean(x: torch.Tensor, index: torch.Tensor, n: int, canonical: bool = False) -> torch.Tensor:
    """Row mean per group; empty groups give zero rows."""
    total = segment_sum(x, index, n, canonical)
    count = torch.bincount(index, minlength=n).clamp(min=1).to(x.dtype)
    return total / count.view(-1, *([1] * (x.dim() - 1)))


def glorot_(t: torch.Tensor, fan_in: int, fan_out: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    eps: float = 1e-5,
    samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` must return a scalar built from ``params`` (which require grad).
    The error per entry is ``|g_a - g_fd| / max(1, |g_a| + |g_fd|)``.
    With ``samples`` set, only that many randomly chosen entries per
    parameter are perturbed, which keeps large models tractable.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar function")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for k, (p, g) in enumerate(zip(params, grads)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            g_flat = g.reshape(-1)
            entries = range(flat.numel())
            if samples is not None and flat.numel() > samples:
                gen = torch.Generator().manual_seed(seed + k)
                entries = torch.randperm(flat.numel(), generator=gen)[:samples].tolist()
            for i in entries:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                ga = g_flat[i].item()
                err = abs(ga - fd) / max(1.0, abs(ga) + abs(fd))
                worst = max(worst, err)
    return worst


# ops with reverse-mode gradients that the policy relies on
OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "concat_rows": concat_rows,
    "mean_rows": mean_rows,
    "dot": dot,
    "leaky_relu": leaky_relu,
    "softmax": softmax,
    "segment_max": segment_max,
    "segment_sum": segment_sum,
    "segment_softmax": segment_softmax,
    "segment_mean": segment_mean,
}


def make_adam(params: Iterable[torch.Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Optimizer, lr: Optional[float] = None) -> None:
    """One Adam update at ``lr`` (if given), then clear the gradients."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


def save_checkpoint(path, state: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """JSON map name -> {shape, values}; values are row-major and round-trip exactly."""
    tensors = {}
    for name, t in state.items():
        t = t.detach().cpu()
        tensors[name] = {
            "shape": list(t.shape),
            "dtype": str(t.dtype).replace("torch.", ""),
            "values": [float(x) for x in t.reshape(-1).tolist()],
        }
    doc = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": tensors}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    state = {}
    for name, entry in doc["tensors"].items():
        dtype = getattr(torch, entry.get("dtype", "float64"))
        state[name] = torch.tensor(entry["values"], dtype=dtype).reshape(entry["shape"])
    return state, doc.get("meta", {})
