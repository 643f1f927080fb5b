"""Runtime-composable value transformation pipelines.

A chain like ``mul(2,3,4) | add(1) | length`` is parsed once against a functor
registry, dimension-checked, then applied to every sampled value before
classification.  Evaluators are vectorized: they transform ``(n, dim)`` arrays
so the renderer can push whole ray batches through a chain at once.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .fields import MAX_FEATURE_DIM, FieldVector


class ChainError(Exception):
    """Parse or registration failure for functor chains."""


# Evaluator: (values (n, dim), constant (dim,) or None) -> (n, out_dim).
Evaluator = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class FunctorDescriptor:
    """Name, whether the functor takes a constant argument, and its
    input-dim -> output-dim map (total over dims 1..4)."""

    name: str
    takes_argument: bool
    domain_map: Callable[[int], int]


@dataclass(frozen=True)
class RegisteredFunctor:
    descriptor: FunctorDescriptor
    evaluators: Mapping[int, Evaluator]


@dataclass
class ChainLimits:
    """Chain-length cap c and live functor count f.

    ``4 * f**c`` counts every (input dim, chain) combination a precompiling
    implementation would have to materialize; reported as a diagnostic only,
    nothing here precompiles.
    """

    max_length: int = 5
    functor_count: int = 0

    def combination_count(self) -> int:
        return 4 * self.functor_count ** self.max_length


@dataclass(frozen=True)
class ChainStep:
    functor: RegisteredFunctor
    argument: Optional[tuple[float, ...]]  # already broadcast to the input dim
    input_dim: int
    output_dim: int


@dataclass(frozen=True)
class FunctorChain:
    steps: tuple[ChainStep, ...]
    input_dim: int
    output_dim: int
    text: str = ""


class FunctorRegistry:
    def __init__(self, limits: Optional[ChainLimits] = None):
        self.limits = limits if limits is not None else ChainLimits()
        self._functors: dict[str, RegisteredFunctor] = {}

    def register_functor(
        self, descriptor: FunctorDescriptor, evaluators: Mapping[int, Evaluator]
    ) -> None:
        if descriptor.name in self._functors:
            raise ChainError(f"functor {descriptor.name!r} already registered")
        missing = [d for d in range(1, MAX_FEATURE_DIM + 1) if d not in evaluators]
        if missing:
            raise ChainError(f"functor {descriptor.name!r} missing evaluators for dims {missing}")
        self._functors[descriptor.name] = RegisteredFunctor(descriptor, dict(evaluators))
        self.limits.functor_count += 1

    def get(self, name: str) -> RegisteredFunctor:
        try:
            return self._functors[name]
        except KeyError:
            raise ChainError(f"unknown functor {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._functors)


def _componentwise(op: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Evaluator:
    def run(values: np.ndarray, const: Optional[np.ndarray]) -> np.ndarray:
        return op(values, const[None, :])

    return run


def _length(values: np.ndarray, const: Optional[np.ndarray]) -> np.ndarray:
    return np.sqrt(np.sum(values * values, axis=1, keepdims=True))


def _sum(values: np.ndarray, const: Optional[np.ndarray]) -> np.ndarray:
    return np.sum(values, axis=1, keepdims=True)


def _pow(values: np.ndarray, const: Optional[np.ndarray]) -> np.ndarray:
    # Negative base with fractional exponent yields NaN, which classifies as
    # fully transparent downstream.
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        return np.power(values, const[None, :])


def default_registry(limits: Optional[ChainLimits] = None) -> FunctorRegistry:
    """Registry with the five built-ins: add, mul, length, sum, pow."""
    reg = FunctorRegistry(limits)
    same = lambda d: d  # noqa: E731
    to_scalar = lambda d: 1  # noqa: E731
    all_dims = range(1, MAX_FEATURE_DIM + 1)
    reg.register_functor(
        FunctorDescriptor("add", True, same),
        {d: _componentwise(np.add) for d in all_dims},
    )
    reg.register_functor(
        FunctorDescriptor("mul", True, same),
        {d: _componentwise(np.multiply) for d in all_dims},
    )
    reg.register_functor(
        FunctorDescriptor("length", False, to_scalar), {d: _length for d in all_dims}
    )
    reg.register_functor(
        FunctorDescriptor("sum", False, to_scalar), {d: _sum for d in all_dims}
    )
    reg.register_functor(
        FunctorDescriptor("pow", True, same), {d: _pow for d in all_dims}
    )
    return reg


_STEP_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z_0-9]*)\s*(?:\(([^()]*)\))?\s*$")


def parse_chain(
    text: str,
    registry: FunctorRegistry,
    limits: Optional[ChainLimits] = None,
    input_dim: int = 1,
) -> FunctorChain:
    """Parse ``name(args) | name | ...`` into a dimension-checked chain.

    Empty text is the identity chain.  A single constant broadcasts to the
    current dimension; otherwise the argument count must equal it.
    """
    limits = limits if limits is not None else registry.limits
    if not 1 <= input_dim <= MAX_FEATURE_DIM:
        raise ChainError(f"input dim must be 1..4, got {input_dim}")
    stripped = text.strip()
    if not stripped:
        return FunctorChain((), input_dim, input_dim, text)
    parts = stripped.split("|")
    if len(parts) > limits.max_length:
        raise ChainError(
            f"chain has {len(parts)} steps, limit is {limits.max_length}"
        )
    steps: list[ChainStep] = []
    dim = input_dim
    for part in parts:
        m = _STEP_RE.match(part)
        if m is None:
            raise ChainError(f"cannot parse chain step {part.strip()!r}")
        name, argtext = m.group(1), m.group(2)
        functor = registry.get(name)
        argument: Optional[tuple[float, ...]] = None
        if functor.descriptor.takes_argument:
            if argtext is None or not argtext.strip():
                raise ChainError(f"functor {name!r} requires a constant argument")
            try:
                values = tuple(float(tok) for tok in argtext.split(","))
            except ValueError:
                raise ChainError(f"bad constant in {part.strip()!r}") from None
            if len(values) == 1:
                argument = values * dim
            elif len(values) == dim:
                argument = values
            else:
                raise ChainError(
                    f"functor {name!r} got {len(values)} constants; "
                    f"expected 1 or {dim}"
                )
        elif argtext is not None:
            raise ChainError(f"functor {name!r} takes no arguments")
        out_dim = functor.descriptor.domain_map(dim)
        steps.append(ChainStep(functor, argument, dim, out_dim))
        dim = out_dim
    return FunctorChain(tuple(steps), input_dim, dim, text)


def identity_chain(input_dim: int) -> FunctorChain:
    return FunctorChain((), input_dim, input_dim, "")


def eval_chain_array(chain: FunctorChain, values: np.ndarray) -> np.ndarray:
    """Apply the chain to a batch: (n, input_dim) -> (n, output_dim)."""
    if values.ndim != 2 or values.shape[1] != chain.input_dim:
        raise ChainError(
            f"expected (n, {chain.input_dim}) values, got {values.shape}"
        )
    out = values
    for step in chain.steps:
        const = None if step.argument is None else np.asarray(step.argument, dtype=np.float64)
        out = step.functor.evaluators[step.input_dim](out, const)
    return out


def eval_chain(chain: FunctorChain, value: FieldVector) -> FieldVector:
    """Scalar-path wrapper over :func:`eval_chain_array`."""
    if value.dim != chain.input_dim:
        raise ChainError(f"value dim {value.dim} != chain input dim {chain.input_dim}")
    arr = np.asarray([value.components], dtype=np.float64)
    out = eval_chain_array(chain, arr)
    return FieldVector(tuple(float(c) for c in out[0]))


def reduce_to_scalar(value: FieldVector) -> float:
    """Default scalar reduction: the first component."""
    return float(value.components[0])


def reduce_to_scalar_array(values: np.ndarray) -> np.ndarray:
    return values[:, 0]
