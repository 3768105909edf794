"""Convergence-bound evaluation and empirical checks of its supporting lemmas."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from fedsl.compression import SparsitySchedule, target_sparsity
from fedsl.errors import InputError


@dataclass
class BoundParams:
    """Constants of the average-gradient-norm bound.

    Per-layer arrays have one entry per layer ``1..L``. ``J_sq`` entries past
    ``L_c`` are only read when the split moves deeper.
    """

    beta: float
    eta: float
    K: int
    I: int
    T: int
    L: int
    L_c: int
    rho_f: float
    theta: float
    sigma_sq: list
    G_sq: list
    W_sq: list
    J_sq: list

    def __post_init__(self):
        for name in ("sigma_sq", "G_sq", "W_sq", "J_sq"):
            arr = [float(v) for v in getattr(self, name)]
            if len(arr) != self.L:
                raise InputError(f"{name} needs {self.L} per-layer entries, got {len(arr)}")
            if any(not v >= 0 for v in arr):
                raise InputError(f"{name} entries must be non-negative")
            setattr(self, name, arr)
        if not self.beta > 0:
            raise InputError(f"beta must be positive, got {self.beta}")
        if not 0 < self.eta <= 1.0 / (2.0 * self.beta):
            raise InputError(
                f"step-size hypothesis 0 < eta <= 1/(2*beta) violated: eta={self.eta}, "
                f"1/(2*beta)={1.0 / (2.0 * self.beta)}"
            )
        if self.K < 1 or self.I < 1 or self.T < 1:
            raise InputError("K, I and T must be positive integers")
        if not 1 <= self.L_c < self.L:
            raise InputError(f"need 1 <= L_c < L, got L_c={self.L_c}, L={self.L}")
        if not 0 <= self.rho_f < 1:
            raise InputError(f"rho_f must lie in [0, 1), got {self.rho_f}")
        if not self.theta >= 0:
            raise InputError(f"theta must be non-negative, got {self.theta}")

    def replace(self, **changes) -> "BoundParams":
        values = asdict(self)
        values.update(changes)
        return BoundParams(**values)

    def to_dict(self) -> dict:
        return asdict(self)


def theorem1_terms(p: BoundParams) -> dict:
    """The bound split into its named contributions (their sum is the bound)."""
    b, eta, K = p.beta, p.eta, p.K
    all_l = range(p.L)
    client_l = range(p.L_c)
    agg_factor = (4 * b**2 + 1) * (8 * eta**2 * (p.I + 1) ** 2 + 1) / eta
    prune_factor = p.rho_f * (4 * K * b**2 + K + b) / (K * eta)
    return {
        "optimality_gap": 2 * p.theta / (eta * p.T),
        "variance": math.fsum(b * eta / K * p.sigma_sq[l] for l in all_l)
        + math.fsum(b * eta / K * p.sigma_sq[l] for l in client_l),
        "gradient": math.fsum(p.G_sq[l] / eta for l in all_l),
        "weight": math.fsum(4 * (4 * b**2 + 1) / eta * p.W_sq[l] for l in all_l),
        "aggregation": math.fsum(agg_factor * p.G_sq[l] for l in client_l),
        "pruning": math.fsum(prune_factor * p.W_sq[l] for l in client_l),
        "quantization": math.fsum(4 / eta * p.J_sq[l] for l in client_l),
    }


def theorem1_rhs(p: BoundParams) -> float:
    """Upper bound on ``(1/T) sum_t E||grad F(w_t)||^2``."""
    return math.fsum(theorem1_terms(p).values())


def quantizer_J(q: int, g_min: float, g_max: float, M: int) -> float:
    """Variance bound ``(Delta_g / (2^q - 1))^2`` with ``Delta_g = sqrt(M/4) (g_max - g_min)``."""
    if q < 1:
        raise InputError(f"q must be >= 1, got {q}")
    if g_max < g_min:
        raise InputError("g_max must be >= g_min")
    if M < 1:
        raise InputError("M must be >= 1")
    delta = math.sqrt(M / 4.0) * (g_max - g_min)
    return (delta / (2**q - 1)) ** 2


def quantizer_J_layers(q: int, ranges, dims) -> list:
    """Per-layer ``J_l^2`` from measured ``(g_min, g_max)`` ranges and tensor sizes."""
    return [quantizer_J(q, lo, hi, m) for (lo, hi), m in zip(ranges, dims)]


def schedule_sum(rho_f: float, T: int) -> float:
    t = np.arange(1, T + 1, dtype=np.float64)
    return math.fsum(rho_f + (t / T - 1.0) ** 3 * rho_f)


def lemma1_check(rho_f: float, T: int) -> bool:
    """Whether ``sum_{t=1..T} rho_t < T rho_f`` holds (it cannot at ``T = 1``)."""
    if not 0 < rho_f < 1:
        raise InputError(f"rho_f must lie in (0, 1), got {rho_f}")
    if T < 1:
        raise InputError(f"T must be >= 1, got {T}")
    return schedule_sum(rho_f, T) < T * rho_f


def monotonicity_table(p: BoundParams, q: int | None = None, ranges=None, dims=None) -> dict:
    """Forward differences of the bound in ``I``, ``rho_f``, ``L_c`` and (optionally) ``q``.

    ``q`` differences need measured gradient ranges and tensor sizes, since the
    quantization term enters only through ``J_l^2``.
    """
    base = theorem1_rhs(p)
    out = {"rhs": base, "d_I": theorem1_rhs(p.replace(I=p.I + 1)) - base}
    rho_next = min(p.rho_f + 0.05, 0.99)
    out["d_rho_f"] = theorem1_rhs(p.replace(rho_f=rho_next)) - base if rho_next > p.rho_f else 0.0
    out["d_L_c"] = theorem1_rhs(p.replace(L_c=p.L_c + 1)) - base if p.L_c + 1 < p.L else None
    if q is not None and ranges is not None and dims is not None:
        j_now = quantizer_J_layers(q, ranges, dims)
        j_next = quantizer_J_layers(q + 1, ranges, dims)
        out["d_q"] = theorem1_rhs(p.replace(J_sq=j_next)) - theorem1_rhs(p.replace(J_sq=j_now))
    else:
        out["d_q"] = None
    return out


@dataclass
class Lemma2Constants:
    G_sq: list  # client layers 1..L_c
    W_sq: list  # all layers 1..L

    def scaled(self, factor: float) -> "Lemma2Constants":
        return Lemma2Constants([g * factor for g in self.G_sq], [w * factor for w in self.W_sq])


def _sq_norm(pair) -> float:
    w, b = pair
    return float(np.sum(w * w) + np.sum(b * b))


def estimate_constants(trace) -> Lemma2Constants:
    """Largest observed per-layer squared norms of gradients and weights over a run."""
    if not trace.rounds:
        raise InputError("trace has no recorded rounds")
    n_client = len(trace.rounds[0].client_weights[0])
    n_server = len(trace.rounds[0].server_weights)
    G = [0.0] * n_client
    W = [0.0] * (n_client + n_server)
    for rt in trace.rounds:
        for grads, weights in zip(rt.client_grads, rt.client_weights):
            for l in range(n_client):
                G[l] = max(G[l], _sq_norm(grads[l]))
                W[l] = max(W[l], _sq_norm(weights[l]))
        for l, pair in enumerate(rt.server_weights):
            W[n_client + l] = max(W[n_client + l], _sq_norm(pair))
    return Lemma2Constants(G, W)


@dataclass
class Lemma2Report:
    max_ratio: float
    n_checks: int
    n_violations: int
    scale: float
    constants: dict
    worst: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def lemma2_empirical(trace, constants: Lemma2Constants | None = None, scale: float = 1.0, keep_worst: int = 5) -> Lemma2Report:
    """Single-sample check of the client-drift bound for every recorded ``(k, t)``.

    The reference ``w_{c,t}`` is the mean of the clients' weights at the start of
    round ``t`` (a virtual aggregate on rounds without aggregation). The
    inequality checked is::

        ||w_{c,t} - w~_{c,k,t}||^2 <= 8 eta^2 (I+1)^2 sum_{l<=L_c} G_l^2
                                       + 4 sum_{l<=L} W_l^2 + 2 rho_t sum_{l<=L_c} W_l^2

    ``scale`` multiplies every estimated constant (``scale < 1`` is the
    negative control).
    """
    if trace is None or not trace.rounds:
        raise InputError("lemma-2 check needs a recorded trace")
    if constants is None:
        constants = estimate_constants(trace)
    constants = constants.scaled(scale)
    schedule = SparsitySchedule(trace.rho_f, trace.T)
    n_client = len(constants.G_sq)
    g_sum = math.fsum(constants.G_sq)
    w_all = math.fsum(constants.W_sq)
    w_client = math.fsum(constants.W_sq[:n_client])
    drift = 8 * trace.eta**2 * (trace.I + 1) ** 2 * g_sum

    checks = []
    for rt in trace.rounds:
        rho_t = target_sparsity(schedule, rt.round)
        rhs = drift + 4 * w_all + 2 * rho_t * w_client
        K = len(rt.client_weights)
        ref = [
            (
                np.mean([rt.client_weights[k][l][0] for k in range(K)], axis=0),
                np.mean([rt.client_weights[k][l][1] for k in range(K)], axis=0),
            )
            for l in range(n_client)
        ]
        for k, pruned in enumerate(rt.client_pruned):
            lhs = math.fsum(
                _sq_norm((ref[l][0] - pruned[l][0], ref[l][1] - pruned[l][1])) for l in range(n_client)
            )
            ratio = lhs / rhs if rhs > 0 else (math.inf if lhs > 0 else 0.0)
            checks.append((ratio, rt.round, k, lhs, rhs))

    checks.sort(key=lambda c: -c[0])
    worst = [
        {"round": t, "client": k, "lhs": lhs, "rhs": rhs, "ratio": ratio}
        for ratio, t, k, lhs, rhs in checks[:keep_worst]
    ]
    return Lemma2Report(
        max_ratio=checks[0][0] if checks else 0.0,
        n_checks=len(checks),
        n_violations=sum(1 for c in checks if c[0] > 1.0),
        scale=scale,
        constants={"G_sq": constants.G_sq, "W_sq": constants.W_sq},
        worst=worst,
    )
