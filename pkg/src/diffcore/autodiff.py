# Rétropropagation et oracle de gradient par différences finies centrées
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import torch

from ..core.errors import ContractError

logger = logging.getLogger(__name__)

# Pas relatifs successifs : le second n'est utilisé que si le premier franchit un coude de ReLU
DEFAULT_STEPS = (1e-5, 1e-7)


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """Gradients ∂loss/∂p pour chaque paramètre ; une branche détachée contribue zéro"""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ContractError(f"La perte doit être un scalaire, reçu forme {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]


def finite_diff_gradient(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    indices: Optional[Sequence[Sequence[int]]] = None,
) -> List[torch.Tensor]:
    """Différences centrées (f(w+δ) − f(w−δ)) / 2δ avec δ = h·max(1, |w|).

    `indices` restreint le calcul à certains éléments aplatis de chaque paramètre
    (les autres restent à zéro). Les paramètres sont restaurés bit à bit.
    """
    grads = []
    with torch.no_grad():
        for position, param in enumerate(params):
            flat = param.view(-1)
            grad = torch.zeros_like(flat)
            selected = range(flat.numel()) if indices is None else indices[position]
            for i in selected:
                w = float(flat[i])
                delta = h * max(1.0, abs(w))
                flat[i] = w + delta
                upper = float(loss_fn())
                flat[i] = w - delta
                lower = float(loss_fn())
                flat[i] = w
                grad[i] = (upper - lower) / (2.0 * delta)
            grads.append(grad.view_as(param))
    return grads


@dataclass
class GradientCheckResult:
    """Comparaison gradient analytique / différences finies"""
    passed: bool
    max_relative_error: float
    checked: int
    refined: int = 0
    failures: List[str] = field(default_factory=list)


def _within(a: float, f: float, rtol: float, atol: float) -> bool:
    return abs(a - f) <= rtol * max(abs(a), abs(f)) + atol


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    rtol: float = 1e-4,
    atol: float = 1e-10,
    steps: Sequence[float] = DEFAULT_STEPS,
    max_per_param: Optional[int] = None,
) -> GradientCheckResult:
    """Vérifie backward contre les différences finies, élément par élément.

    Un élément est conforme si |a − f| ≤ rtol·max(|a|,|f|) + atol. Un élément non
    conforme au premier pas est recalculé au pas suivant.
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
    analytic = backward(loss_fn(), params)

    indices = []
    for p in params:
        count = p.numel()
        if max_per_param is None or count <= max_per_param:
            indices.append(list(range(count)))
        else:
            stride = count / max_per_param
            indices.append(sorted({int(k * stride) for k in range(max_per_param)}))

    numeric = finite_diff_gradient(loss_fn, params, h=steps[0], indices=indices)

    checked = refined = 0
    worst = 0.0
    failures: List[str] = []
    for position, (a_grad, f_grad) in enumerate(zip(analytic, numeric)):
        a_flat, f_flat = a_grad.reshape(-1), f_grad.reshape(-1)
        for i in indices[position]:
            a, f = float(a_flat[i]), float(f_flat[i])
            step_index = 0
            while not _within(a, f, rtol, atol) and step_index + 1 < len(steps):
                step_index += 1
                refined += 1
                only = [[i] if k == position else [] for k in range(len(params))]
                f = float(finite_diff_gradient(loss_fn, params, h=steps[step_index], indices=only)[position].reshape(-1)[i])
            checked += 1
            scale = max(abs(a), abs(f))
            if scale > 0:
                worst = max(worst, abs(a - f) / scale)
            if not _within(a, f, rtol, atol):
                failures.append(f"param[{position}][{i}]: analytique={a:.6e}, numérique={f:.6e}")

    if failures:
        logger.warning(f"⚠️ {len(failures)} gradient(s) non conformes sur {checked}")
    return GradientCheckResult(
        passed=not failures,
        max_relative_error=worst,
        checked=checked,
        refined=refined,
        failures=failures[:20],
    )
