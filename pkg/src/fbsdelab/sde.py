"""Forward path simulation on uniform grids with reproducible noise.

Noise comes from counter-based Philox streams keyed by (seed, path block),
with a fixed block size, so the increments of path i depend only on the seed,
i and the step count: never on how many paths are simulated alongside it or
on any execution schedule.  Ensembles are therefore reproducible bit for bit.

The tamed scheme divides the drift by (1 + dt |drift|) per step, the standard
guard for superlinear (e.g. cubic) drifts under which plain explicit stepping
can explode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, SimulationError
from .problem import ControlProblemSpec, ForwardSpec

# Paths per RNG block; fixed so path content is independent of n_paths.
_BLOCK = 4096

SCHEMES = ("euler", "tamed_euler")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t_start, t_end] with n_steps intervals."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        if not self.t_end > self.t_start:
            raise DomainError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.n_steps * factor)


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated forward paths with their Brownian increments.

    states: (n_paths, n_steps + 1), states[:, 0] = x0
    dW:     (n_paths, n_steps)
    Arrays are frozen (writeable=False); share freely across threads.
    """

    grid: TimeGrid
    states: np.ndarray
    dW: np.ndarray
    seed: int
    scheme: str = "tamed_euler"

    def __post_init__(self):
        for name in ("states", "dW"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.states.shape != (self.dW.shape[0], self.dW.shape[1] + 1):
            raise DomainError("states and dW shapes are inconsistent")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    def noise_sanity(self) -> dict:
        """Column-wise mean / variance diagnostics for the increments.

        The increments should have mean ~ O(sqrt(dt / n_paths)) and variance
        within a few standard errors of dt; reported, never asserted here.
        """
        dt = self.grid.dt
        n = self.n_paths
        means = self.dW.mean(axis=0)
        variances = self.dW.var(axis=0, ddof=1)
        mean_se = np.sqrt(dt / n)
        var_se = dt * np.sqrt(2.0 / (n - 1))
        return {
            "max_abs_mean_over_se": float(np.max(np.abs(means)) / mean_se),
            "max_abs_var_dev_over_se": float(np.max(np.abs(variances - dt)) / var_se),
        }

    def to_csv(self, path) -> None:
        """One row per (path, step): path_id, t, X, dW (dW empty at the last node)."""
        times = self.grid.times()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path_id", "t", "X", "dW"])
            for i in range(self.n_paths):
                for k in range(self.n_steps + 1):
                    dw = repr(float(self.dW[i, k])) if k < self.n_steps else ""
                    writer.writerow([i, repr(float(times[k])), repr(float(self.states[i, k])), dw])


def brownian_increments(seed: int, n_paths: int, n_steps: int, dt: float) -> np.ndarray:
    """Increments for paths 0..n_paths-1 from per-block Philox substreams."""
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    key0 = seed % (2 ** 64)
    out = np.empty((n_paths, n_steps))
    for block in range(0, n_paths, _BLOCK):
        rows = min(_BLOCK, n_paths - block)
        gen = np.random.Generator(np.random.Philox(key=[key0, block // _BLOCK]))
        out[block:block + rows] = gen.standard_normal((rows, n_steps))
    return out * np.sqrt(dt)


def _march(
    drift: Callable,
    diffusion: Callable,
    x0: float,
    grid: TimeGrid,
    dW: np.ndarray,
    scheme: str,
) -> np.ndarray:
    if scheme not in SCHEMES:
        raise DomainError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    n_paths, n_steps = dW.shape
    dt = grid.dt
    times = grid.times()
    states = np.empty((n_paths, n_steps + 1))
    states[:, 0] = x0
    x = states[:, 0].copy()
    for k in range(n_steps):
        t = times[k]
        mu = np.asarray(drift(t, x), dtype=float) + np.zeros_like(x)
        if scheme == "tamed_euler":
            mu = mu / (1.0 + dt * np.abs(mu))
        x = x + mu * dt + np.asarray(diffusion(t, x), dtype=float) * dW[:, k]
        bad = ~np.isfinite(x)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise SimulationError(
                i, k + 1,
                f"non-finite state at path {i}, step {k + 1} (t={times[k + 1]:.6g}); "
                f"the drift may be superlinear; try scheme='tamed_euler'",
            )
        states[:, k + 1] = x
    return states


def simulate(
    fwd: ForwardSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    scheme: str = "tamed_euler",
) -> PathEnsemble:
    """Simulate the forward diffusion; reproducible bit for bit per (seed, grid, n_paths, scheme)."""
    dW = brownian_increments(seed, n_paths, grid.n_steps, grid.dt)
    states = _march(fwd.mu, fwd.sigma, fwd.x0, grid, dW, scheme)
    return PathEnsemble(grid=grid, states=states, dW=dW, seed=seed, scheme=scheme)


def controlled_simulate(
    cps: ControlProblemSpec,
    policy,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    scheme: str = "tamed_euler",
) -> PathEnsemble:
    """Simulate dX = (A x - delta x^3 + B u) dt + sigma dW under a feedback policy.

    Uses the same noise layout as ``simulate``: with the policy forced to
    zero the ensemble matches the uncontrolled one bit for bit on the same
    seed.  Taming (when selected) applies to the whole controlled drift.
    """

    def drift(t, x):
        return cps.drift(t, x) + cps.B(t) * policy(t, x)

    def diffusion(t, x):
        return cps.sigma(t) + 0.0 * x

    dW = brownian_increments(seed, n_paths, grid.n_steps, grid.dt)
    states = _march(drift, diffusion, cps.x0, grid, dW, scheme)
    return PathEnsemble(grid=grid, states=states, dW=dW, seed=seed, scheme=scheme)
