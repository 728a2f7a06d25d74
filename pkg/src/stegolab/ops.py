"""Functional wrappers over the primitive set, plus small parameter containers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, apply_primitive


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply_primitive("conv2d", inputs, {"dilation": dilation})


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return apply_primitive("leaky_relu", [x], {"slope": slope})


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def abs_(x: Tensor) -> Tensor:
    return apply_primitive("abs", [x])


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    return apply_primitive("slice", [x], {"axis": axis, "start": start, "stop": stop})


def upsample2x(x: Tensor) -> Tensor:
    return apply_primitive("upsample2x", [x])


def avgpool2(x: Tensor) -> Tensor:
    return apply_primitive("avgpool2", [x])


def clamp01_ste(x: Tensor) -> Tensor:
    return apply_primitive("clamp01_ste", [x])


def straight_through(x: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    return apply_primitive("ste", [x], {"fn": fn})


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    if not isinstance(targets, Tensor):
        targets = Tensor(np.broadcast_to(np.asarray(targets, dtype=np.float64), logits.shape).copy())
    return apply_primitive("bce_with_logits", [logits, targets])


def mse(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=np.float64))
    return apply_primitive("mse", [a, b])


def gaussian_sample(shape, seed, std: float = 1.0) -> Tensor:
    return apply_primitive("gaussian_sample", [], {"shape": tuple(shape), "seed": seed, "std": std})


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Holds named parameter Tensors; subclasses register them in ``self.params``."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.value.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.value = arr.copy()

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def unfreeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = True


def he_conv(rng: np.random.Generator, k: int, cin: int, cout: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal((k, k, cin, cout)) * np.sqrt(gain / (k * k * cin))


def he_dense(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
