"""Central finite-difference gradient checking shared by the unit and
acceptance suites.

All checks run in float64: with step h the FD error is O(h^2) truncation plus
O(eps/h) roundoff, so h=1e-5 in double gives ~1e-10 accuracy while float32
would drown the signal.  A coordinate passes when analytic and FD agree to
RTOL relative; coordinates where both are below ATOL count as agreeing (the
relative test is meaningless on an exactly-zero gradient, e.g. the radial
direction of an L2-normalized output).
"""

import random
from typing import Callable, List, Sequence, Tuple

import torch

H = 1e-5
RTOL = 1e-4
ATOL = 1e-7


def rel_gap(analytic: float, fd: float) -> float:
    scale = max(abs(analytic), abs(fd))
    if scale < ATOL:
        return 0.0
    return abs(analytic - fd) / scale


def check_coords(make_scalar: Callable[[], torch.Tensor],
                 leaves: Sequence[torch.Tensor], n_per_leaf: int,
                 rng: random.Random, h: float = H) -> List[Tuple[float, float]]:
    """Sample coordinates of each leaf and return (analytic, central-FD)
    pairs.  make_scalar must recompute the scalar from the current leaf
    values on every call and contain no randomness."""
    for leaf in leaves:
        if leaf.dtype != torch.float64:
            raise ValueError("gradient checks require float64 leaves")
    scalar = make_scalar()
    grads = torch.autograd.grad(scalar, leaves, allow_unused=True)
    out: List[Tuple[float, float]] = []
    for leaf, grad in zip(leaves, grads):
        flat = leaf.data.reshape(-1)
        gflat = None if grad is None else grad.reshape(-1)
        idxs = rng.sample(range(flat.numel()), min(n_per_leaf, flat.numel()))
        for i in idxs:
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(make_scalar().detach())
            flat[i] = orig - h
            f_minus = float(make_scalar().detach())
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            an = 0.0 if gflat is None else float(gflat[i])
            out.append((an, fd))
    return out


def pass_fraction(pairs: Sequence[Tuple[float, float]], rtol: float = RTOL) -> float:
    ok = sum(1 for a, f in pairs if rel_gap(a, f) <= rtol)
    return ok / max(len(pairs), 1)


def leaf(shape, rng: random.Random, lo: float = -1.0, hi: float = 1.0) -> torch.Tensor:
    g = torch.Generator().manual_seed(rng.randrange(2**31))
    t = torch.empty(shape, dtype=torch.float64).uniform_(lo, hi, generator=g)
    return t.requires_grad_(True)


def param_leaves(module: torch.nn.Module) -> List[torch.Tensor]:
    return [p for p in module.parameters() if p.requires_grad]
