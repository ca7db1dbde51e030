"""One client's local work for one round: reshuffled epochs of single-sample steps.

Each epoch visits every local sample exactly once in a fresh uniformly random
permutation.  Permutations are derived from (master_seed, round, client,
epoch), so client execution order and parallelism cannot change results.
The per-step size is eta_l / c_i, where the normalizer c_i is the knob that
balances progress across clients with different amounts of local work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import PURPOSE_PERMUTATION, stream_for
from .problems import Problem

__all__ = [
    "PermutationPlan",
    "LocalWorkSpec",
    "MomentumState",
    "LocalResult",
    "make_permutations",
    "run_local",
    "run_local_mvr",
]


@dataclass(frozen=True)
class PermutationPlan:
    """Per-epoch sample orders for one (round, client) pair."""

    master_seed: int
    round_index: int
    client: int
    permutations: tuple[tuple[int, ...], ...]

    @property
    def epochs(self) -> int:
        return len(self.permutations)


def make_permutations(master_seed: int, round_index: int, client: int, epochs: int, size: int) -> PermutationPlan:
    """Epoch permutations from a counter-based stream; uniform and reproducible."""
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    perms = []
    for epoch in range(epochs):
        stream = stream_for(master_seed, PURPOSE_PERMUTATION, round_index, client, epoch)
        perms.append(tuple(stream.permutation(size)))
    return PermutationPlan(master_seed, round_index, client, tuple(perms))


@dataclass(frozen=True)
class MomentumState:
    """Server momentum buffer m and its mixing parameter a in [0, 1]."""

    m: np.ndarray
    a: float

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"momentum parameter a must lie in [0, 1], got {self.a}")


@dataclass(frozen=True)
class LocalWorkSpec:
    """Shape of one client's local work.

    truncation drops that many trailing steps of the final epoch, modeling a
    client that cannot finish its local round.
    """

    epochs: int
    c: float
    eta_l: float
    mode: str = "plain"
    truncation: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.c <= 0:
            raise ValueError("step normalizer c must be positive")
        if self.eta_l < 0:
            raise ValueError("local step size cannot be negative")
        if self.truncation < 0:
            raise ValueError("truncation cannot be negative")
        if self.mode not in ("plain", "mvr"):
            raise ValueError(f"unknown local mode {self.mode!r}")


@dataclass(frozen=True)
class LocalResult:
    y: np.ndarray
    delta: np.ndarray
    steps_taken: int


def run_local(
    problem: Problem,
    i: int,
    x_start: np.ndarray,
    spec: LocalWorkSpec,
    plan: PermutationPlan,
    momentum: MomentumState | None = None,
    anchor: np.ndarray | None = None,
) -> LocalResult:
    """Run client i's local epochs from x_start; returns final point and delta.

    Plain mode steps along the sampled gradient; mvr mode along the corrected
    direction  a g(y) + (1-a) (m + g(y) - g(x_anchor))  evaluated on the same
    sample.  steps_taken = epochs * |D_i| - truncation.
    """
    problem.check_index(i)
    size = int(problem.sizes[i])
    if plan.epochs < spec.epochs:
        raise ValueError(f"plan covers {plan.epochs} epochs, spec needs {spec.epochs}")
    total = spec.epochs * size
    if spec.truncation >= total:
        raise ValueError(f"truncation {spec.truncation} must be < total steps {total}")

    mvr = spec.mode == "mvr"
    if mvr:
        if momentum is None or anchor is None:
            raise ValueError("mvr mode requires a momentum state and the round anchor point")
        a = momentum.a
        m = momentum.m
    x_start = np.asarray(x_start, dtype=np.float64)
    y = x_start.copy()
    step = spec.eta_l / spec.c
    steps = total - spec.truncation
    done = 0
    for epoch in range(spec.epochs):
        if done >= steps:
            break
        for j in plan.permutations[epoch]:
            if done >= steps:
                break
            g = problem.gradient(i, j, y)
            if mvr and a != 1.0:
                # a == 1 disables the correction, so the anchor gradient is skipped
                # above and the update reduces exactly to the plain step.
                g = a * g + (1.0 - a) * (m + (g - problem.gradient(i, j, anchor)))
            y = y - step * g
            done += 1
    return LocalResult(y=y, delta=y - x_start, steps_taken=done)


def run_local_mvr(
    problem: Problem,
    i: int,
    x_start: np.ndarray,
    spec: LocalWorkSpec,
    plan: PermutationPlan,
    momentum: MomentumState,
    anchor: np.ndarray,
) -> LocalResult:
    """Momentum-corrected local work; spec.mode must be 'mvr'."""
    if spec.mode != "mvr":
        raise ValueError("run_local_mvr requires a spec with mode='mvr'")
    return run_local(problem, i, x_start, spec, plan, momentum=momentum, anchor=anchor)
