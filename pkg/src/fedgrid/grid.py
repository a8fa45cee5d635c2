"""Quasi-static model of coupled microgrids under droop-controlled grid-forming inverters.

Bus voltages relax toward targets given by a convex-combination sensitivity
map of the inverters' effective voltage references.  Each inverter's
reference comes from its voltage droop law, driven by reactive power computed
from the previous step's voltages, so no implicit solve is required.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Any

import numpy as np

from .errors import ConvergenceError, DomainError

V_SET_BOUNDS = (0.8, 1.2)
P_SET_BOUNDS = (0.0, 1.2)
DEFAULT_DT = 0.25


class InverterKind(str, enum.Enum):
    GFM = "GFM"
    GFL = "GFL"


@dataclass(frozen=True)
class InverterSpec:
    """Static description of one inverter (all quantities per-unit on its own rating)."""

    id: int
    mg_id: int
    bus: int
    kind: InverterKind
    rating_kw: float
    m_p: float = 0.01
    m_q: float = 0.05
    omega_nom: float = 1.0
    p_set_nom: float = 0.5
    v_set_nom: float = 1.0
    q_nom: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", InverterKind(self.kind))
        if not self.rating_kw > 0:
            raise DomainError(f"inverter {self.id}: rating_kw must be positive, got {self.rating_kw}")
        if self.m_p < 0 or self.m_q < 0:
            raise DomainError(f"inverter {self.id}: droop gains must be non-negative")

    @property
    def is_gfm(self) -> bool:
        return self.kind is InverterKind.GFM


@dataclass
class NetworkModel:
    """Electrical description of the networked microgrids.

    ``sensitivity`` (M x N) maps effective inverter voltage references to bus
    voltage targets; each row is a set of convex weights.  ``coupling`` (M x M)
    is the symmetric reactive-flow matrix used for the inverters' Q.
    """

    inverters: list[InverterSpec]
    sensitivity: np.ndarray
    coupling: np.ndarray
    load_offset: np.ndarray
    mg_of_bus: np.ndarray
    tau: float = 1.0
    n_phases: int = 3
    phase_spread: float = 0.002

    def __post_init__(self):
        self.sensitivity = np.asarray(self.sensitivity, dtype=float)
        self.coupling = np.asarray(self.coupling, dtype=float)
        self.load_offset = np.asarray(self.load_offset, dtype=float)
        self.mg_of_bus = np.asarray(self.mg_of_bus, dtype=int)
        self.validate()

    @property
    def n_buses(self) -> int:
        return self.sensitivity.shape[0]

    @property
    def n_inverters(self) -> int:
        return len(self.inverters)

    @cached_property
    def microgrids(self) -> list[int]:
        return sorted(set(int(m) for m in self.mg_of_bus))

    @cached_property
    def gfm_ids(self) -> list[int]:
        return [inv.id for inv in self.inverters if inv.is_gfm]

    def buses_of(self, mg: int) -> np.ndarray:
        return np.flatnonzero(self.mg_of_bus == mg)

    def gfms_of(self, mg: int) -> list[int]:
        return [inv.id for inv in self.inverters if inv.is_gfm and inv.mg_id == mg]

    @cached_property
    def inverter_bus(self) -> np.ndarray:
        return np.array([inv.bus for inv in self.inverters], dtype=int)

    @cached_property
    def phase_factors(self) -> np.ndarray:
        """Relative per-phase load multipliers, e.g. (-0.002, 0, +0.002) for three phases."""
        if self.n_phases == 1:
            return np.zeros(1)
        return np.linspace(-self.phase_spread, self.phase_spread, self.n_phases)

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(inv, name) for inv in self.inverters], dtype=float)

    @cached_property
    def m_q(self) -> np.ndarray:
        return self._column("m_q")

    @cached_property
    def q_nom(self) -> np.ndarray:
        return self._column("q_nom")

    def validate(self) -> None:
        M, N = self.sensitivity.shape if self.sensitivity.ndim == 2 else (None, None)
        if M is None:
            raise DomainError("sensitivity must be a 2-D matrix")
        if N != len(self.inverters):
            raise DomainError(f"sensitivity has {N} columns but {len(self.inverters)} inverters are defined")
        if [inv.id for inv in self.inverters] != list(range(N)):
            raise DomainError("inverter ids must be 0..N-1 in order")
        if self.coupling.shape != (M, M):
            raise DomainError(f"coupling must be {M}x{M}, got {self.coupling.shape}")
        if self.load_offset.shape != (M,) or self.mg_of_bus.shape != (M,):
            raise DomainError("load_offset and mg_of_bus must have one entry per bus")
        if np.any(self.sensitivity < 0) or not np.allclose(self.sensitivity.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise DomainError("sensitivity rows must be non-negative and sum to 1")
        if not np.array_equal(self.coupling, self.coupling.T):
            raise DomainError("coupling matrix must be symmetric")
        off = self.coupling[~np.eye(M, dtype=bool)]
        if np.any(off < 0):
            raise DomainError("coupling matrix must be non-negative off the diagonal")
        if not self.tau > 0 or self.n_phases < 1:
            raise DomainError("tau must be positive and n_phases >= 1")
        for inv in self.inverters:
            if not 0 <= inv.bus < M:
                raise DomainError(f"inverter {inv.id} sits on unknown bus {inv.bus}")
            if self.mg_of_bus[inv.bus] != inv.mg_id:
                raise DomainError(f"inverter {inv.id} belongs to microgrid {inv.mg_id} but its bus does not")
        mgs = self.microgrids
        for a in mgs:
            rows = self.sensitivity[self.mg_of_bus == a]
            for b in mgs:
                if a == b:
                    continue
                cols = [inv.id for inv in self.inverters if inv.mg_id == b]
                if not np.any(rows[:, cols] > 0):
                    raise DomainError(f"microgrid {a} has no electrical coupling to microgrid {b}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "inverters": [
                {
                    "id": inv.id, "mg_id": inv.mg_id, "bus": inv.bus, "kind": inv.kind.value,
                    "rating_kw": inv.rating_kw, "m_p": inv.m_p, "m_q": inv.m_q,
                    "omega_nom": inv.omega_nom, "p_set_nom": inv.p_set_nom,
                    "v_set_nom": inv.v_set_nom, "q_nom": inv.q_nom,
                }
                for inv in self.inverters
            ],
            "sensitivity": self.sensitivity.tolist(),
            "coupling": self.coupling.tolist(),
            "load_offset": self.load_offset.tolist(),
            "mg_of_bus": self.mg_of_bus.tolist(),
            "tau": self.tau,
            "n_phases": self.n_phases,
            "phase_spread": self.phase_spread,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkModel":
        invs = [InverterSpec(**inv) for inv in d["inverters"]]
        extra = {k: d[k] for k in ("tau", "n_phases", "phase_spread") if k in d}
        return cls(invs, d["sensitivity"], d["coupling"], d["load_offset"], d["mg_of_bus"], **extra)


@dataclass
class GridState:
    V: np.ndarray  # (M, n_phases) bus voltage magnitudes, pu
    Q: np.ndarray  # (N,) inverter reactive powers, pu
    P: np.ndarray  # (N,) inverter active powers, pu
    omega: float = 1.0
    t: int = 0

    def copy(self) -> "GridState":
        return GridState(self.V.copy(), self.Q.copy(), self.P.copy(), self.omega, self.t)


@dataclass
class SetpointVector:
    P: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if self.P.shape != self.V.shape or self.P.ndim != 1:
            raise DomainError("set-point P and V must be equal-length vectors")

    def __len__(self) -> int:
        return len(self.P)

    @classmethod
    def zeros(cls, n: int) -> "SetpointVector":
        return cls(np.zeros(n), np.zeros(n))

    def clamped(self) -> "SetpointVector":
        return SetpointVector(np.clip(self.P, *P_SET_BOUNDS), np.clip(self.V, *V_SET_BOUNDS))


def nominal_setpoints(net: NetworkModel) -> SetpointVector:
    return SetpointVector(net._column("p_set_nom"), net._column("v_set_nom"))


def droop_frequency_ref(spec: InverterSpec, P, P_set_eff):
    return spec.omega_nom - spec.m_p * (P - P_set_eff)


def droop_voltage_ref(spec: InverterSpec, Q, V_set_eff):
    return V_set_eff - spec.m_q * (Q - spec.q_nom)


def compose_setpoints(
    nominal: SetpointVector, res: SetpointVector, attack: SetpointVector
) -> SetpointVector:
    """Nominal + resilient residual + attack, passed through the set-point limiter."""
    n = len(nominal)
    if len(res) != n or len(attack) != n:
        raise DomainError(f"set-point vectors differ in length: {n}, {len(res)}, {len(attack)}")
    # residual and attack are summed first so the result is exactly symmetric in them
    P = nominal.P + (res.P + attack.P)
    V = nominal.V + (res.V + attack.V)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(V))):
        raise DomainError("non-finite set-point component")
    return SetpointVector(P, V).clamped()


def solve_targets(net: NetworkModel, v_eff, load_scale: float = 1.0) -> np.ndarray:
    """Bus voltage targets ``G @ v_eff - load_scale * d`` (one value per bus)."""
    v_eff = np.asarray(v_eff, dtype=float)
    if v_eff.shape != (net.n_inverters,):
        raise DomainError(f"v_eff must have shape ({net.n_inverters},), got {v_eff.shape}")
    if not np.all(np.isfinite(v_eff)):
        raise DomainError("v_eff must be finite")
    return net.sensitivity @ v_eff - load_scale * net.load_offset


def phase_targets(net: NetworkModel, v_eff, load_scale: float = 1.0) -> np.ndarray:
    tgt = solve_targets(net, v_eff, load_scale)
    return tgt[:, None] - load_scale * net.load_offset[:, None] * net.phase_factors[None, :]


def reactive_powers(net: NetworkModel, V: np.ndarray) -> np.ndarray:
    """Q_i = sum_j B[bus_i, j] * (V_bus_i - V_j), on phase-averaged magnitudes."""
    vbar = V.mean(axis=1)
    rows = net.coupling[net.inverter_bus]
    return vbar[net.inverter_bus] * rows.sum(axis=1) - rows @ vbar


def system_frequency(net: NetworkModel, P: np.ndarray, P_set: np.ndarray) -> float:
    num = den = 0.0
    for inv in net.inverters:
        if inv.is_gfm:
            num += inv.rating_kw * droop_frequency_ref(inv, P[inv.id], P_set[inv.id])
            den += inv.rating_kw
    return num / den if den else 1.0


def initial_state(net: NetworkModel) -> GridState:
    V = np.ones((net.n_buses, net.n_phases))
    return GridState(V, reactive_powers(net, V), net._column("p_set_nom"), 1.0, 0)


def step_dynamics(
    state: GridState,
    setpoints: SetpointVector,
    net: NetworkModel,
    dt: float = DEFAULT_DT,
    load_scale: float = 1.0,
) -> GridState:
    if not dt > 0 or dt / net.tau > 1:
        raise DomainError(f"need 0 < dt/tau <= 1, got dt={dt}, tau={net.tau}")
    sp = setpoints.clamped()
    Q = reactive_powers(net, state.V)
    v_eff = sp.V - net.m_q * (Q - net.q_nom)
    V = state.V + (dt / net.tau) * (phase_targets(net, v_eff, load_scale) - state.V)
    # active power holds its dispatch; only the frequency reference sees P_set changes
    P = state.P.copy()
    omega = system_frequency(net, P, sp.P)
    return GridState(V, Q, P, omega, state.t + 1)


def steady_state(
    net: NetworkModel,
    nominal: SetpointVector,
    *,
    dt: float = DEFAULT_DT,
    load_scale: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    start: GridState | None = None,
) -> GridState:
    """Iterate the dynamics with nominal set-points until voltages stop moving."""
    state = initial_state(net) if start is None else start.copy()
    for _ in range(max_iter):
        nxt = step_dynamics(state, nominal, net, dt, load_scale)
        delta = np.max(np.abs(nxt.V - state.V))
        state = nxt
        if delta < tol:
            state.t = 0
            return state
    raise ConvergenceError(f"steady state not reached within {max_iter} iterations (last |dV| = {delta:.3e})")


def compute_steady_state(net: NetworkModel, nominal: SetpointVector | None = None, **kw) -> np.ndarray:
    """Pre-attack steady-state bus voltages, shape (M, n_phases)."""
    if nominal is None:
        nominal = nominal_setpoints(net)
    return steady_state(net, nominal, **kw).V


def default_network(
    *,
    gfm_weight: float = 0.6,
    gfl_weight: float = 0.15,
    foreign_gfm_weight: float = 0.05,
    intra_coupling: float = 2.0,
    tie_coupling: float = 1.0,
) -> NetworkModel:
    """Nine buses in three microgrids; GFMs at buses 1, 4, 7 and GFLs on the rest.

    Inverter ``i`` sits on bus ``i`` (0-based), so the GFMs are inverters 0, 3, 6.
    """
    n_mg, per_mg = 3, 3
    M = n_mg * per_mg
    mg_of_bus = np.repeat(np.arange(n_mg), per_mg)
    invs = []
    for b in range(M):
        gfm = b % per_mg == 0
        invs.append(
            InverterSpec(
                id=b, mg_id=int(mg_of_bus[b]), bus=b,
                kind=InverterKind.GFM if gfm else InverterKind.GFL,
                rating_kw=600.0 if gfm else 350.0,
                p_set_nom=0.9 if gfm else 0.85,
            )
        )
    G = np.zeros((M, M))
    for b in range(M):
        for inv in invs:
            same = inv.mg_id == mg_of_bus[b]
            if inv.is_gfm:
                G[b, inv.id] = gfm_weight if same else foreign_gfm_weight
            elif same:
                G[b, inv.id] = gfl_weight
    G /= G.sum(axis=1, keepdims=True)

    B = np.zeros((M, M))
    for a in range(n_mg):
        idx = range(a * per_mg, (a + 1) * per_mg)
        for i in idx:
            for j in idx:
                if i != j:
                    B[i, j] = intra_coupling
    # tie lines 3-4 and 6-7 (1-based), a radial chain MG1 - MG2 - MG3
    for i, j in ((2, 3), (5, 6)):
        B[i, j] = B[j, i] = tie_coupling

    load = np.array([0.010, 0.025, 0.030, 0.012, 0.020, 0.035, 0.008, 0.022, 0.028])
    return NetworkModel(invs, G, B, load, mg_of_bus)
