"""
Finite-difference gradient oracle.
"""
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from pilot_tts import tensor as T
from pilot_tts.exceptions import ContractError
from pilot_tts.tensor import Tensor

DEFAULT_STEP = 1e-4
DENOMINATOR_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_entry: str
    probes: int

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float, floor: float = DENOMINATOR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], Tensor], params: Dict[str, Tensor],
                    step: float = DEFAULT_STEP, probes: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> GradCheckResult:
    """
    Compare backward() against central differences.

    Args:
        fn: Rebuilds the scalar loss from the current parameter values
        params: name -> 64-bit leaf tensor
        step: Finite-difference step
        probes: Entries to probe across all parameters (None = every entry)
        rng: Chooses the probed entries when ``probes`` is set

    Returns:
        GradCheckResult with the largest relative error seen
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractError(f'gradient checks need 64-bit tensors ({name} is {p.data.dtype})')

    analytic = T.backward(T.Graph(params), fn())

    entries = [(name, idx) for name in params for idx in range(params[name].data.size)]
    if probes is not None and probes < len(entries):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(entries), size=probes, replace=False)
        entries = [entries[i] for i in sorted(chosen)]

    worst, worst_entry = 0.0, ''
    with T.no_grad():
        for name, idx in entries:
            flat = params[name].data.reshape(-1)
            original = flat[idx]
            flat[idx] = original + step
            up = fn().item()
            flat[idx] = original - step
            down = fn().item()
            flat[idx] = original
            numeric = (up - down) / (2.0 * step)
            err = relative_error(float(analytic[name].reshape(-1)[idx]), numeric)
            if err > worst:
                worst, worst_entry = err, f'{name}[{idx}]'
    return GradCheckResult(max_rel_error=worst, worst_entry=worst_entry, probes=len(entries))
