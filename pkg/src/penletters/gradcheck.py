"""End-to-end gradient verification on a narrow copy of the network."""

from __future__ import annotations

from collections import defaultdict
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, backward, corrupt_backward, no_grad, precision
from .functional import cross_entropy
from .model import CNNLSTMNet, ModelSpec

__all__ = ["GradcheckReport", "run_gradcheck", "layer_of", "DEFAULT_EPS", "DEFAULT_THRESHOLD"]

DEFAULT_THRESHOLD = 1e-3
# small enough that ReLU/max-pool kinks are rarely straddled, large enough for float64 round-off
DEFAULT_EPS = 1e-6


# share of probed elements per layer allowed to sit on a kink before the check fails
MAX_KINK_FRACTION = 0.05


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    threshold: float
    kinks: dict[str, int]
    sizes: dict[str, int]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def layer_passed(self, name: str) -> bool:
        err = self.errors[name]
        too_kinky = self.kinks[name] > MAX_KINK_FRACTION * self.sizes[name]
        return bool(np.isfinite(err) and err < self.threshold and not too_kinky)

    @property
    def passed(self) -> bool:
        return all(self.layer_passed(name) for name in self.errors)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            status = "ok" if self.layer_passed(name) else "FAIL"
            out.append(f"{name:<12s} {err:.3e}  kinks {self.kinks[name]:>3d}/{self.sizes[name]:<4d} {status}")
        return out


def layer_of(param_name: str) -> str:
    """``conv2.bn.gamma`` -> ``conv2.bn``; ``lstm1.weight_hh`` -> ``lstm1``."""
    return param_name.rsplit(".", 1)[0]


def run_gradcheck(
    seed: int = 0,
    length: int = 32,
    batch: int = 2,
    spec: Optional[ModelSpec] = None,
    eps: float = DEFAULT_EPS,
    threshold: float = DEFAULT_THRESHOLD,
    corrupt: Optional[str] = None,
) -> GradcheckReport:
    """Compare tape gradients of the cross-entropy loss with central
    differences for every parameter and for the input, in float64.

    The model runs in training mode so batch normalisation uses batch
    statistics.  Elements whose forward and backward one-sided differences
    disagree by more than ``threshold`` straddle a ReLU or max-pool kink
    within ``eps``; they are left out of the error and counted instead, and a
    layer with more than 5% such elements fails.  ``corrupt`` names an op
    whose backward rule is deliberately scaled (negative control).
    """
    spec = spec or ModelSpec.reduced()
    with precision("f64"):
        rng = np.random.default_rng(seed)
        model = CNNLSTMNet(spec, seed=seed).train()
        x = Tensor(rng.normal(size=(batch, spec.input_channels, length)), requires_grad=True)
        targets = rng.integers(0, spec.class_count, size=batch)

        def loss_value() -> float:
            with no_grad():
                return cross_entropy(model(x), targets).item()

        with corrupt_backward(corrupt) if corrupt else nullcontext():
            backward(cross_entropy(model(x), targets))

        base = loss_value()
        errors: dict[str, float] = defaultdict(float)
        kinks: dict[str, int] = defaultdict(int)
        sizes: dict[str, int] = defaultdict(int)
        targets_to_check = [("input", x)] + [(layer_of(n), p) for n, p in model.named_parameters()]
        for layer, t in targets_to_check:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            one_sided = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_value()
                flat[i] = orig - eps
                down = loss_value()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
                one_sided[i] = (up - base) / eps - (base - down) / eps
            a = analytic.reshape(-1)
            err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
            kink = ~(np.abs(one_sided) <= threshold * np.maximum(1.0, np.abs(numeric)))
            kinks[layer] += int(kink.sum())
            sizes[layer] += flat.size
            smooth = err[~kink]
            errors[layer] = max(errors[layer], float(smooth.max()) if smooth.size else 0.0)
    return GradcheckReport(dict(errors), threshold, dict(kinks), dict(sizes))
