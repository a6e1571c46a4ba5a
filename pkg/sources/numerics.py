"""
Dense tensor arithmetic for the whole toolkit.

Tensors are float32 torch tensors and the gradient tape is torch autograd.
This module adds the contracts the rest of the code relies on: shape checked
products, max-stabilised softmax, affine-free layer norm, finite-gradient
guarded AdamW updates, determinism switches and a central finite difference
audit used by the test suites.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from sources.errors import DimensionError, NonFiniteError

DTYPE = torch.float32

ADAMW_DEFAULTS = {
    "lr": 1e-4,
    "betas": (0.9, 0.999),
    "eps": 1e-8,
    "weight_decay": 0.0,
}


def configure_determinism(threads: int = 1) -> None:
    """Pin thread count and force deterministic kernels so reruns are bit-identical."""
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(..., m, k) x (..., k, n) -> (..., m, n)"""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    exp = shifted.exp()
    return exp / exp.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Normalise the last dimension, no learned affine (adaLN supplies it)."""
    return F.layer_norm(x, (x.shape[-1],), eps=eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def mse_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if prediction.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    return ((prediction - target) ** 2).mean()


@dataclass
class OptimizerState:
    """
    Snapshot of AdamW state in parameter order, the form persisted by checkpoints.
    first_moment / second_moment hold None for parameters never stepped.
    """
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    first_moment: List[Optional[torch.Tensor]]
    second_moment: List[Optional[torch.Tensor]]


def build_adamw(parameters: Iterable[torch.nn.Parameter], lr: float = ADAMW_DEFAULTS["lr"],
                betas: Tuple[float, float] = ADAMW_DEFAULTS["betas"], eps: float = ADAMW_DEFAULTS["eps"],
                weight_decay: float = ADAMW_DEFAULTS["weight_decay"]) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(parameters), lr=lr, betas=betas, eps=eps,
                             weight_decay=weight_decay, foreach=False)


def check_finite_gradients(named_parameters: Iterable[Tuple[str, torch.nn.Parameter]]) -> None:
    for name, param in named_parameters:
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter '{name}'")


def adamw_step(optimizer: torch.optim.AdamW,
               named_parameters: Iterable[Tuple[str, torch.nn.Parameter]]) -> None:
    """Decoupled weight decay update; aborts before touching weights if any gradient is not finite."""
    check_finite_gradients(named_parameters)
    optimizer.step()


def export_optimizer_state(optimizer: torch.optim.AdamW) -> OptimizerState:
    group = optimizer.param_groups[0]
    first, second, step_count = [], [], 0
    for param in group["params"]:
        state = optimizer.state.get(param, {})
        if "exp_avg" in state:
            first.append(state["exp_avg"].detach().clone())
            second.append(state["exp_avg_sq"].detach().clone())
            step_count = max(step_count, int(state["step"]))
        else:
            first.append(None)
            second.append(None)
    return OptimizerState(step_count=step_count, lr=float(group["lr"]),
                          beta1=float(group["betas"][0]), beta2=float(group["betas"][1]),
                          eps=float(group["eps"]), weight_decay=float(group["weight_decay"]),
                          first_moment=first, second_moment=second)


def import_optimizer_state(optimizer: torch.optim.AdamW, snapshot: OptimizerState) -> None:
    group = optimizer.param_groups[0]
    params = group["params"]
    if len(params) != len(snapshot.first_moment):
        raise DimensionError(f"optimizer state holds {len(snapshot.first_moment)} moments for {len(params)} parameters")
    group["lr"] = snapshot.lr
    group["betas"] = (snapshot.beta1, snapshot.beta2)
    group["eps"] = snapshot.eps
    group["weight_decay"] = snapshot.weight_decay
    for param, m1, m2 in zip(params, snapshot.first_moment, snapshot.second_moment):
        if m1 is None:
            continue
        if m1.shape != param.shape or m2.shape != param.shape:
            raise DimensionError(f"moment shape {tuple(m1.shape)} does not match parameter {tuple(param.shape)}")
        optimizer.state[param] = {
            "step": torch.tensor(float(snapshot.step_count)),
            "exp_avg": m1.clone(),
            "exp_avg_sq": m2.clone(),
        }


def audit_gradients(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                    n_coords: int = 100, h: float = 1e-3, seed: int = 0,
                    abs_floor: float = 1e-2) -> Dict[str, float]:
    """
    Compare autograd against central finite differences at random coordinates.

    fn must rebuild its scalar output from `tensors` (float64 leaves with
    requires_grad) on every call. Returns the worst relative error and the
    number of coordinates checked. The relative error denominator is
    max(|numeric|, |exact|, abs_floor), so vanishing gradients are judged on
    an absolute scale.
    """
    for tensor in tensors:
        tensor.grad = None
    out = fn()
    out.backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    rng = np.random.default_rng(seed)
    sizes = np.array([t.numel() for t in tensors])
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            which = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
            flat = tensors[which].view(-1)
            idx = int(rng.integers(flat.numel()))
            original = flat[idx].item()
            flat[idx] = original + h
            plus = fn().item()
            flat[idx] = original - h
            minus = fn().item()
            flat[idx] = original
            numeric = (plus - minus) / (2 * h)
            exact = analytic[which].view(-1)[idx].item()
            denom = max(abs(numeric), abs(exact), abs_floor)
            worst = max(worst, abs(numeric - exact) / denom)
    return {"max_rel_error": worst, "coords": n_coords}
