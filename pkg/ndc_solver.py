"""
Nonnegative deconvolution: minimize ‖X − S∗V‖²_F over S ≥ 0 with the
multiplicative update

    S ← S ⊙ (X∗V⁻ + ε) / ((S∗V)∗V⁻ + ε)

together with the majorizing surrogate used to show that every step is
non-increasing in the reconstruction error.
"""
import csv
from dataclasses import dataclass, field

import torch

from errors import ConfigError, NegativeInputError, ShapeMismatchError
from tensor import (FilterTensor, adjoint_filter, check_nonnegative, cross_correlate,
                    inner_product, safe_ratio)

SOLVER_EPSILON = 0.0
MONOTONE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class NdcProblem:
    observation: torch.Tensor      # X, (C, *spatial)
    filter: FilterTensor           # V, (C, E, *kernel)
    initial_source: torch.Tensor   # S⁽⁰⁾, (E, *spatial)

    def __post_init__(self):
        rank = self.filter.rank
        if self.observation.dim() != rank + 1 or self.initial_source.dim() != rank + 1:
            raise ShapeMismatchError(self.observation.shape, self.initial_source.shape,
                                     "observation vs source rank")
        if self.observation.shape[1:] != self.initial_source.shape[1:]:
            raise ShapeMismatchError(self.observation.shape[1:], self.initial_source.shape[1:],
                                     "observation vs source spatial shape")
        if self.observation.shape[0] != self.filter.out_channels:
            raise ShapeMismatchError((self.observation.shape[0],), (self.filter.out_channels,),
                                     "observation channels vs filter outputs")
        if self.initial_source.shape[0] != self.filter.in_channels:
            raise ShapeMismatchError((self.initial_source.shape[0],), (self.filter.in_channels,),
                                     "source channels vs filter inputs")
        check_nonnegative(self.observation, "observation X")
        check_nonnegative(self.filter.data, "filter V")
        check_nonnegative(self.initial_source, "initial source S0")

    @property
    def adjoint(self):
        return adjoint_filter(self.filter)

    @classmethod
    def random(cls, generator, channels, sources, spatial, kernel, exact=False, dtype=torch.float64):
        """Seeded random instance; with exact=True, X = S*∗V for a hidden S* ≥ 0."""
        def rand(*shape):
            return torch.rand(*shape, generator=generator, dtype=dtype)

        v = FilterTensor(rand(channels, sources, *kernel))
        s0 = rand(sources, *spatial) + 0.1
        if exact:
            x = cross_correlate(rand(sources, *spatial), v)
        else:
            x = rand(channels, *spatial)
        return cls(x, v, s0)


@dataclass
class SolveTrace:
    errors: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    iterations: int = 0

    @property
    def final(self):
        return self.sources[-1]

    def is_monotone(self, tolerance=MONOTONE_TOLERANCE):
        return all(b <= a + tolerance for a, b in zip(self.errors, self.errors[1:]))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "error"])
            for i, e in enumerate(self.errors):
                writer.writerow([i, repr(e)])


def _check_source(s, problem):
    if tuple(s.shape) != tuple(problem.initial_source.shape):
        raise ShapeMismatchError(s.shape, problem.initial_source.shape, "source")


def reconstruction_error(s, problem):
    """ℰ(S) = ‖X − S∗V‖²_F."""
    _check_source(s, problem)
    residual = problem.observation - cross_correlate(s, problem.filter)
    return float(inner_product(residual, residual))


def _update(s_t, problem, numerator, adjoint, epsilon):
    denominator = cross_correlate(cross_correlate(s_t, problem.filter), adjoint)
    if epsilon > 0:
        return s_t * (numerator + epsilon) / (denominator + epsilon)
    return s_t * safe_ratio(numerator, denominator)


def multiplicative_step(s_t, problem, epsilon=SOLVER_EPSILON):
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    _check_source(s_t, problem)
    check_nonnegative(s_t, "source iterate")
    adjoint = problem.adjoint
    numerator = cross_correlate(problem.observation, adjoint)
    return _update(s_t, problem, numerator, adjoint, epsilon)


def solve(problem, iterations, epsilon=SOLVER_EPSILON, record_trace=False):
    """Run a fixed number of multiplicative steps from problem.initial_source.

    The trace always holds e⁽⁰⁾..e⁽ᵀ⁾; sources holds S⁽⁰⁾ and the final
    iterate unless record_trace keeps every one.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    adjoint = problem.adjoint
    numerator = cross_correlate(problem.observation, adjoint)
    s = problem.initial_source
    trace = SolveTrace(errors=[reconstruction_error(s, problem)], sources=[s])
    for _ in range(iterations):
        s = _update(s, problem, numerator, adjoint, epsilon)
        trace.errors.append(reconstruction_error(s, problem))
        if record_trace:
            trace.sources.append(s)
        trace.iterations += 1
    if not record_trace:
        trace.sources.append(s)
    return trace


# --- MAJORIZATION ---

def _check_positive(s_t):
    if bool((s_t <= 0).any()):
        index = tuple(int(i) for i in torch.nonzero(s_t <= 0)[0])
        raise NegativeInputError("surrogate anchor S(t) (must be > 0)", index, float(s_t[index]))


def surrogate_value(s, s_t, problem):
    """Q(S|S⁽ᵗ⁾) = ‖X‖² − 2⟨X, S∗V⟩ + ⟨(S²/S⁽ᵗ⁾)∗V, S⁽ᵗ⁾∗V⟩."""
    _check_source(s, problem)
    _check_source(s_t, problem)
    _check_positive(s_t)
    x, v = problem.observation, problem.filter
    quadratic = inner_product(cross_correlate(s * s / s_t, v), cross_correlate(s_t, v))
    return float(inner_product(x, x) - 2 * inner_product(x, cross_correlate(s, v)) + quadratic)


def quadratic_bound_gap(s, s_t, v):
    """((S²/S⁽ᵗ⁾)∗V) ⊙ (S⁽ᵗ⁾∗V) − (S∗V)², elementwise; nonnegative by Cauchy–Schwarz."""
    _check_positive(s_t)
    s_v = cross_correlate(s, v)
    return cross_correlate(s * s / s_t, v) * cross_correlate(s_t, v) - s_v * s_v


def surrogate_gradient(s, s_t, problem):
    """∇_S Q = −2·X∗V⁻ + (2S/S⁽ᵗ⁾) ⊙ ((S⁽ᵗ⁾∗V)∗V⁻)."""
    _check_positive(s_t)
    adjoint = problem.adjoint
    linear = cross_correlate(problem.observation, adjoint)
    quadratic = cross_correlate(cross_correlate(s_t, problem.filter), adjoint)
    return -2 * linear + (2 * s / s_t) * quadratic
