"""Ring lattice state and the event-driven dynamics.

A configuration lives on Z/LZ with occupancies eta_j >= 0. Site j fires at
rate n^2 g_n(eta_j) and moves one particle to j+1 (mod L). The engine is an
exact Gillespie scheme: a binary prefix-sum tree over the per-site rates
gives O(log L) event selection and rate updates, holding times are
exponential in the current total rate, and the final holding interval is
truncated at the requested horizon.

The module also carries the exclusion-picture image of a configuration. With
gaps read as gap_j = x_j - x_{j-1} - 1 on a ring of M = L + N exclusion
sites, a zero-range jump j -> j+1 is exclusion particle j stepping one site
against the drift direction; the anchored map x_j = j + sum_{i<=j} eta_i
makes the round trip an exact identity. ``CoupledQTasep`` drives both
pictures from one randomness source and audits the bijection per event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DecoupledError,
    EmptySiteJumpError,
    FrozenStateError,
    InconsistentRingError,
    InvalidConfigError,
)
from .rates import RateFunction

__all__ = [
    "RateTree",
    "Configuration",
    "ExclusionState",
    "zr_to_exclusion",
    "exclusion_to_zr",
    "CoupledQTasep",
    "write_snapshot",
]


class RateTree:
    """Binary prefix-sum tree over nonnegative per-site rates.

    Leaves sit at indices [size, size + n_leaves); parents store the sum of
    their children, so the root is the total rate. Stored as a plain list:
    the descent and update paths are scalar index chases, where list access
    beats array scalars.
    """

    __slots__ = ("n_leaves", "size", "_tree")

    def __init__(self, rates: np.ndarray) -> None:
        rates = np.asarray(rates, dtype=float)
        assert rates.ndim == 1 and len(rates) >= 1
        assert (rates >= 0.0).all()
        self.n_leaves = len(rates)
        self.size = 1 << max(0, self.n_leaves - 1).bit_length()
        tree = np.zeros(2 * self.size)
        tree[self.size : self.size + self.n_leaves] = rates
        width = self.size
        while width > 1:
            level = tree[width : 2 * width]
            tree[width // 2 : width] = level[0::2] + level[1::2]
            width //= 2
        self._tree = tree.tolist()

    @property
    def total(self) -> float:
        return self._tree[1]

    def leaf(self, j: int) -> float:
        return self._tree[self.size + j]

    def update(self, j: int, rate: float) -> None:
        tree = self._tree
        i = self.size + j
        tree[i] = rate
        i >>= 1
        while i:
            k = 2 * i
            tree[i] = tree[k] + tree[k + 1]
            i >>= 1

    def pick(self, target: float) -> int:
        """Leaf index whose prefix interval contains ``target``.

        target must lie in [0, total). Float roundoff at the right edge is
        clamped back onto the last positive-rate leaf.
        """
        tree = self._tree
        i = 1
        size = self.size
        while i < size:
            i *= 2
            left = tree[i]
            if target >= left:
                target -= left
                i += 1
        j = i - size
        if j >= self.n_leaves or tree[i] <= 0.0:
            j = min(j, self.n_leaves - 1)
            while j > 0 and tree[size + j] <= 0.0:
                j -= 1
        return j

    def leaves(self) -> np.ndarray:
        return np.asarray(self._tree[self.size : self.size + self.n_leaves])


class Configuration:
    """Occupancy state plus the live rate index and clock.

    Mutable by design: ``apply_jump`` edits two sites and their tree leaves,
    ``run_until`` advances the clock. The per-occupancy rate table
    n^2 g_n(k) is grown on demand, so occupancies are unbounded.
    """

    def __init__(self, occupancy, rate: RateFunction, n: int, clock: float = 0.0) -> None:
        occ = np.array(occupancy, dtype=np.int64)
        if occ.ndim != 1 or len(occ) < 2:
            raise InvalidConfigError("need a one-dimensional ring of at least 2 sites")
        if (occ < 0).any():
            raise InvalidConfigError("occupancies must be nonnegative")
        self.occupancy = occ
        self.sites = len(occ)
        self.total_particles = int(occ.sum())
        self.rate = rate
        self.n = int(n)
        self.clock = float(clock)
        self._rate_of = np.empty(0)
        self._grow_rate_table(int(occ.max(initial=0)))
        self.tree = RateTree(self._rate_of[occ])
        self.events = 0

    def _grow_rate_table(self, kmax: int) -> None:
        if kmax < len(self._rate_of):
            return
        top = max(kmax + 1, 2 * len(self._rate_of), 16)
        table = self.n**2 * np.asarray(self.rate.gn(np.arange(top), self.n), dtype=float)
        table[0] = 0.0  # g(0) = 0 exactly; keep empty sites silent
        self._rate_of = table

    def site_rate(self, k: int) -> float:
        self._grow_rate_table(k)
        return float(self._rate_of[k])

    @property
    def total_rate(self) -> float:
        return self.tree.total

    def apply_jump(self, j: int) -> None:
        """Move one particle j -> j+1 (mod L) and refresh both tree leaves."""
        occ = self.occupancy
        k = occ[j]
        if k == 0:
            raise EmptySiteJumpError(f"site {j} is empty")
        j1 = j + 1
        if j1 == self.sites:
            j1 = 0
        occ[j] = k - 1
        k1 = occ[j1] + 1
        occ[j1] = k1
        self._grow_rate_table(int(k1))
        self.tree.update(j, self._rate_of[k - 1])
        self.tree.update(j1, self._rate_of[k1])

    def next_event(self, rng: np.random.Generator) -> tuple[float, int]:
        """Draw (holding time, firing site) without mutating the state."""
        total = self.tree.total
        if total <= 0.0:
            raise FrozenStateError("total rate is zero; no event can fire")
        dt = rng.exponential() / total
        j = self.tree.pick(rng.random() * total)
        return dt, j

    def run_until(self, horizon: float, rng: np.random.Generator, bank=None) -> int:
        """Advance the clock to ``horizon``, streaming intervals to ``bank``.

        The bank (see fields.ObserverBank) is told about every holding
        interval before the state changes; the last interval is truncated at
        the horizon and its pending jump is discarded, which is exact by
        memorylessness. Returns the number of executed jumps.
        """
        t = self.clock
        assert horizon >= t
        executed = 0
        if bank is not None:
            bank.begin(self.occupancy, t)
        while True:
            if self.total_rate <= 0.0:
                # Frozen states stay frozen; the remaining interval is quiet.
                if bank is not None:
                    bank.advance(self.occupancy, horizon)
                break
            dt, j = self.next_event(rng)
            t_next = t + dt
            if t_next >= horizon:
                if bank is not None:
                    bank.advance(self.occupancy, horizon)
                break
            if bank is not None:
                bank.advance(self.occupancy, t_next)
                bank.before_jump(self.occupancy, t_next, j)
            self.apply_jump(j)
            executed += 1
            t = t_next
        self.clock = horizon
        self.events += executed
        return executed

    def audit_rates(self) -> float:
        """Max relative gap between tree leaves and freshly computed rates."""
        fresh = self._rate_of[self.occupancy]
        leaves = self.tree.leaves()
        scale = np.maximum(fresh, 1e-300)
        return float(np.max(np.abs(leaves - fresh) / scale))


@dataclass(frozen=True)
class ExclusionState:
    """Strictly increasing particle positions on a ring of ``ring`` sites."""

    positions: np.ndarray
    ring: int

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.int64)
        if pos.ndim != 1 or len(pos) == 0:
            raise InconsistentRingError("need at least one particle")
        if (np.diff(pos) <= 0).any():
            raise InconsistentRingError("positions must be strictly increasing")
        if pos[-1] - pos[0] >= self.ring:
            raise InconsistentRingError("positions span more than one ring period")
        if len(pos) > self.ring:
            raise InconsistentRingError("more particles than ring sites")
        object.__setattr__(self, "positions", pos)


def zr_to_exclusion(occupancy) -> ExclusionState:
    """Anchored exclusion image x_j = j + sum_{i<=j} eta_i on M = L + N sites."""
    occ = np.asarray(occupancy, dtype=np.int64)
    L = len(occ)
    positions = np.arange(L, dtype=np.int64) + np.cumsum(occ)
    return ExclusionState(positions=positions, ring=L + int(occ.sum()))


def exclusion_to_zr(state: ExclusionState) -> np.ndarray:
    """Gap vector eta_j = x_j - x_{j-1} - 1, with the wrap gap closing the ring."""
    pos = state.positions
    occ = np.empty(len(pos), dtype=np.int64)
    occ[1:] = np.diff(pos) - 1
    occ[0] = state.ring - int(pos[-1] - pos[0]) - 1
    if occ[0] < 0 or occ.sum() + len(pos) != state.ring:
        raise InconsistentRingError("ring size inconsistent with positions")
    return occ


class CoupledQTasep:
    """One randomness source driving a configuration and its exclusion image.

    Valid only for the qtasep rate, where sqrt(n) (1 - q_n^k) with
    q_n = exp(-1/sqrt(n)) is algebraically the scaled rate g_n(k); exclusion
    time runs n^{5/2} times faster than the macroscopic clock. With
    ``audit`` on, every step checks the gap bijection and raises
    ``DecoupledError`` on the first mismatch.
    """

    def __init__(self, cfg: Configuration, audit: bool = True) -> None:
        if cfg.rate.name != "qtasep":
            raise InvalidConfigError("the exclusion coupling needs the qtasep rate")
        self.cfg = cfg
        self.audit = audit
        self.q = math.exp(-1.0 / math.sqrt(cfg.n))
        self.ring = cfg.sites + cfg.total_particles
        # Unwrapped positions: drifting left is fine, gaps only use differences.
        self.positions = zr_to_exclusion(cfg.occupancy).positions.copy()
        self.exclusion_clock = cfg.n**2.5 * cfg.clock

    def gaps(self) -> np.ndarray:
        pos = self.positions
        occ = np.empty(len(pos), dtype=np.int64)
        occ[1:] = np.diff(pos) - 1
        occ[0] = self.ring - int(pos[-1] - pos[0]) - 1
        return occ

    def rate_identity_gap(self, kmax: int) -> float:
        """Max relative gap of n^2 g_n(k) vs n^{5/2} (1 - q^k), k = 1 .. kmax."""
        n = self.cfg.n
        ks = np.arange(1, kmax + 1)
        zr = n**2 * np.asarray(self.cfg.rate.gn(ks, n))
        ex = n**2.5 * (-np.expm1(ks * math.log(self.q)))
        return float(np.max(np.abs(zr - ex) / zr))

    def step(self, rng: np.random.Generator) -> tuple[float, int]:
        """Advance both pictures by one shared event."""
        dt, j = self.cfg.next_event(rng)
        self.cfg.apply_jump(j)
        self.cfg.clock += dt
        self.cfg.events += 1
        # Gap behind particle j shrinks, gap behind j+1 grows: particle j
        # steps one exclusion site backwards.
        self.positions[j] -= 1
        self.exclusion_clock += self.cfg.n**2.5 * dt
        if self.audit:
            if j > 0 and self.positions[j] <= self.positions[j - 1]:
                raise DecoupledError("exclusion move violated the ordering")
            if not np.array_equal(self.gaps(), self.cfg.occupancy):
                raise DecoupledError("gap vector diverged from the occupancies")
        return dt, j


def write_snapshot(cfg: Configuration, path: str | Path, seed: int | None = None) -> None:
    """Plain-text state dump: header comment, then one ``site occupancy`` line each."""
    lines = [
        f"# sites={cfg.sites} particles={cfg.total_particles} n={cfg.n} "
        f"rate={cfg.rate.name} clock={cfg.clock!r} seed={seed}",
    ]
    lines.extend(f"{j} {int(k)}" for j, k in enumerate(cfg.occupancy))
    Path(path).write_text("\n".join(lines) + "\n")
