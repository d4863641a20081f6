# Optimiseur Adam (correction de biais standard) avec état sérialisable
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from ..core.errors import NonFiniteGradientError, ParameterError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Instantané de l'état Adam ; les moments ont la forme de leurs paramètres"""
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moments: List[torch.Tensor] = field(default_factory=list)
    second_moments: List[torch.Tensor] = field(default_factory=list)


class AdamOptimizer:
    """Adam sur une liste de paramètres, piloté par des gradients explicites"""

    def __init__(
        self,
        params: Sequence[torch.Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        names: Optional[Sequence[str]] = None,
    ):
        self.params = list(params)
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        # Implémentation mono-tenseur : ordre des opérations fixe, trajectoires reproductibles
        self._optimizer = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps, foreach=False)
        self._step = 0

    @property
    def lr(self) -> float:
        return float(self._optimizer.param_groups[0]["lr"])

    def set_lr(self, lr: float) -> None:
        for group in self._optimizer.param_groups:
            group["lr"] = lr

    def step(self, grads: Sequence[torch.Tensor]) -> None:
        if len(grads) != len(self.params):
            raise ParameterError(f"{len(grads)} gradients pour {len(self.params)} paramètres")
        bad = [name for name, g in zip(self.names, grads) if not bool(torch.isfinite(g).all())]
        if bad:
            raise NonFiniteGradientError(
                f"Gradient non fini au pas {self._step + 1} pour: {', '.join(bad)}", bad
            )
        for p, g in zip(self.params, grads):
            p.grad = g.detach().clone()
        self._optimizer.step()
        for p in self.params:
            p.grad = None
        self._step += 1

    def state(self) -> AdamState:
        group = self._optimizer.param_groups[0]
        first, second = [], []
        for p in self.params:
            slot = self._optimizer.state.get(p, {})
            first.append(slot["exp_avg"].clone() if "exp_avg" in slot else torch.zeros_like(p))
            second.append(slot["exp_avg_sq"].clone() if "exp_avg_sq" in slot else torch.zeros_like(p))
        beta1, beta2 = group["betas"]
        return AdamState(
            step=self._step, lr=float(group["lr"]), beta1=beta1, beta2=beta2, eps=group["eps"],
            first_moments=first, second_moments=second,
        )

    def load_state(self, state: AdamState) -> None:
        if state.step < 0:
            raise ParameterError(f"Compteur de pas négatif: {state.step}")
        for group in self._optimizer.param_groups:
            group.update(lr=state.lr, betas=(state.beta1, state.beta2), eps=state.eps)
        self._optimizer.state.clear()
        if state.step > 0:
            if len(state.first_moments) != len(self.params) or len(state.second_moments) != len(self.params):
                raise ParameterError("Nombre de moments incompatible avec les paramètres")
            for p, m, v in zip(self.params, state.first_moments, state.second_moments):
                if m.shape != p.shape or v.shape != p.shape:
                    raise ParameterError(f"Moment de forme {tuple(m.shape)} pour un paramètre {tuple(p.shape)}")
                self._optimizer.state[p] = {
                    "step": torch.tensor(float(state.step)),
                    "exp_avg": m.clone(),
                    "exp_avg_sq": v.clone(),
                }
        self._step = state.step


def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> AdamState:
    """Une mise à jour Adam en place sur `params` ; renvoie le nouvel état"""
    optimizer = AdamOptimizer(params, lr=state.lr, betas=(state.beta1, state.beta2), eps=state.eps)
    optimizer.load_state(state)
    optimizer.step(grads)
    return optimizer.state()
