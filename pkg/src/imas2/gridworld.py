"""Grid-world benchmark: a robot of hidden type observed by directed sensors.

The environment state is (row, col, b). A benign robot (b=0) drifts towards
the normal goal, an adversarial one (b=1) towards the adversary goal. Each
candidate sensor turns towards one of four diagonal quadrants per step and
detects the robot with a fixed probability when it is inside the quadrant.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import AgentBlock, ConfigError, EnvironmentChain, FactoredDecPomdp, ModelError, SecretMap

MOVES = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1), "stay": (0, 0)}
ORTHOGONAL = {"N": ("E", "W"), "S": ("E", "W"), "E": ("N", "S"), "W": ("N", "S")}
ORIENTATIONS = ("NW", "NE", "SW", "SE")
UNINITIALISED = "uninit"
OBSERVATIONS = ("n", "detect")
DEFAULT_RADII = {"small": 2, "large": 4}

Cell = tuple[int, int]


@dataclass(frozen=True)
class RangeProfile:
    """Relative (row, col) offsets covered by each sensing orientation."""

    offsets: dict[str, frozenset[Cell]]

    def __post_init__(self):
        if set(self.offsets) != set(ORIENTATIONS):
            raise ModelError(f"range profile needs exactly the orientations {ORIENTATIONS}")

    def covers(self, sensor: Cell, orientation: str, cell: Cell) -> bool:
        return (cell[0] - sensor[0], cell[1] - sensor[1]) in self.offsets[orientation]


def quadrant_profile(radius: int) -> RangeProfile:
    """Quadrant cells within Chebyshev distance ``radius``, axes and own cell included."""
    if radius < 0:
        raise ModelError("range radius must be non-negative")
    signs = {"NW": (-1, -1), "NE": (-1, 1), "SW": (1, -1), "SE": (1, 1)}
    offs = {}
    for name, (sr, sc) in signs.items():
        offs[name] = frozenset((sr * i, sc * j) for i in range(radius + 1) for j in range(radius + 1))
    return RangeProfile(offs)


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    normal_goal: Cell
    adversary_goal: Cell
    sensors: tuple[tuple[Cell, str], ...]
    horizon: int
    obstacles: frozenset[Cell] = frozenset()
    initial_column: int = 0
    slip_probability: float = 0.0
    type_prior: float = 0.5
    kappa: float = 2.0
    detect_probability: float = 0.5
    profiles: dict[str, RangeProfile] = field(
        default_factory=lambda: {k: quadrant_profile(r) for k, r in DEFAULT_RADII.items()})

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.obstacles

    def cells(self) -> list[Cell]:
        return [(r, c) for r in range(self.height) for c in range(self.width) if (r, c) not in self.obstacles]

    def problems(self) -> list[str]:
        out = []
        if self.width <= 0 or self.height <= 0:
            return ["grid dimensions must be positive"]
        if self.horizon < 0:
            out.append("horizon must be non-negative")
        for o in self.obstacles:
            if not self.in_bounds(o):
                out.append(f"obstacle {o} is outside the grid")
        for name, g in (("normal goal", self.normal_goal), ("adversary goal", self.adversary_goal)):
            if not self.free(g):
                out.append(f"{name} {g} is not a free cell")
        if not 0 <= self.initial_column < self.width:
            out.append(f"initial column {self.initial_column} is outside the grid")
        elif not any(self.free((r, self.initial_column)) for r in range(self.height)):
            out.append("initial column has no free cell")
        if not 0.0 <= self.slip_probability <= 0.5:
            out.append(f"slip probability {self.slip_probability} outside [0, 0.5]")
        if not 0.0 <= self.type_prior <= 1.0:
            out.append(f"type prior {self.type_prior} outside [0, 1]")
        if not 0.0 <= self.detect_probability <= 1.0:
            out.append(f"detection probability {self.detect_probability} outside [0, 1]")
        if not self.kappa >= 0:
            out.append("kappa must be non-negative")
        for k, (cell, prof) in enumerate(self.sensors):
            if not self.free(cell):
                out.append(f"sensor {k} at {cell} is not on a free cell")
            if prof not in self.profiles:
                out.append(f"sensor {k} uses unknown range profile {prof!r}")
        return out

    def validate(self) -> None:
        probs = self.problems()
        if probs:
            raise ModelError("invalid grid spec: " + "; ".join(probs))


def parse_ascii(rows: str | list[str]) -> dict:
    """Read an ASCII layout into GridSpec keyword arguments.

    ``.`` free, ``#`` obstacle, ``G`` normal goal, ``A`` adversary goal,
    digits mark sensor locations (index = digit). Goals are single cells.
    """
    lines = [ln.strip() for ln in (rows.splitlines() if isinstance(rows, str) else rows)]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ConfigError("empty grid map")
    width = len(lines[0])
    if any(len(ln) != width for ln in lines):
        raise ConfigError("grid map rows have unequal length")
    obstacles, sensors, goals = set(), {}, {}
    for r, ln in enumerate(lines):
        for c, ch in enumerate(ln):
            if ch == "#":
                obstacles.add((r, c))
            elif ch in "GA":
                if ch in goals:
                    raise ConfigError(f"goal {ch!r} appears more than once")
                goals[ch] = (r, c)
            elif ch.isdigit():
                if int(ch) in sensors:
                    raise ConfigError(f"sensor {ch} appears more than once")
                sensors[int(ch)] = (r, c)
            elif ch != ".":
                raise ConfigError(f"unknown map character {ch!r}")
    if "G" not in goals or "A" not in goals:
        raise ConfigError("map needs both a G and an A goal")
    if sensors and sorted(sensors) != list(range(len(sensors))):
        raise ConfigError("sensor digits must be 0..n-1 without gaps")
    return dict(width=width, height=len(lines), obstacles=frozenset(obstacles),
                normal_goal=goals["G"], adversary_goal=goals["A"],
                sensor_cells=[sensors[k] for k in sorted(sensors)])


def bfs_distances(spec: GridSpec, goal: Cell) -> dict[Cell, int]:
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        r, c = queue.popleft()
        for dr, dc in list(MOVES.values())[:4]:
            nxt = (r + dr, c + dc)
            if spec.free(nxt) and nxt not in dist:
                dist[nxt] = dist[(r, c)] + 1
                queue.append(nxt)
    return dist


def _target(spec: GridSpec, cell: Cell, move: str) -> Cell:
    dr, dc = MOVES[move]
    nxt = (cell[0] + dr, cell[1] + dc)
    return nxt if spec.free(nxt) else cell


def robot_policy(spec: GridSpec, dist: dict[Cell, int], cell: Cell) -> dict[str, float]:
    """Move distribution proportional to exp(-kappa * distance of the target cell).

    ``kappa = inf`` keeps only the distance-minimising moves (uniformly).
    """
    names = list(MOVES)
    d = np.array([dist[_target(spec, cell, m)] for m in names], dtype=float)
    if math.isinf(spec.kappa):
        w = (d == d.min()).astype(float)
    else:
        w = np.exp(-spec.kappa * (d - d.min()))
    w /= w.sum()
    return dict(zip(names, w))


def move_outcomes(spec: GridSpec, cell: Cell, move: str) -> dict[Cell, float]:
    """Cell distribution after attempting ``move`` with orthogonal slip."""
    out: dict[Cell, float] = {}
    p = spec.slip_probability
    if move == "stay":
        branches = [("stay", 1.0)]
    else:
        a, b = ORTHOGONAL[move]
        branches = [(move, 1.0 - 2 * p), (a, p), (b, p)]
    for m, q in branches:
        if q > 0:
            t = _target(spec, cell, m)
            out[t] = out.get(t, 0.0) + q
    return out


def state_index(spec: GridSpec) -> dict[tuple[int, int, int], int]:
    idx = {}
    for cell in spec.cells():
        for b in (0, 1):
            idx[(cell[0], cell[1], b)] = len(idx)
    return idx


def build_env_chain(spec: GridSpec) -> tuple[EnvironmentChain, SecretMap]:
    spec.validate()
    idx = state_index(spec)
    n = len(idx)
    dists = []
    for goal in (spec.normal_goal, spec.adversary_goal):
        d = bfs_distances(spec, goal)
        missing = [c for c in spec.cells() if c not in d]
        if missing:
            raise ModelError(f"goal {goal} is unreachable from {missing[0]}")
        dists.append(d)
    P = np.zeros((n, n))
    for (r, c, b), s in idx.items():
        cell = (r, c)
        goal = spec.normal_goal if b == 0 else spec.adversary_goal
        if cell == goal:
            P[s, s] = 1.0
            continue
        for move, pm in robot_policy(spec, dists[b], cell).items():
            if pm == 0:
                continue
            for nxt, q in move_outcomes(spec, cell, move).items():
                P[s, idx[(nxt[0], nxt[1], b)]] += pm * q
    P /= P.sum(axis=1, keepdims=True)
    mu = np.zeros(n)
    starts = [(r, spec.initial_column) for r in range(spec.height) if spec.free((r, spec.initial_column))]
    for cell in starts:
        mu[idx[(cell[0], cell[1], 0)]] += (1 - spec.type_prior) / len(starts)
        mu[idx[(cell[0], cell[1], 1)]] += spec.type_prior / len(starts)
    labels = tuple(f"{r},{c},{b}" for (r, c, b) in idx)
    secret = SecretMap(("benign", "adversarial"), of_initial=np.array([b for (_, _, b) in idx]))
    return EnvironmentChain(labels, P, mu), secret


def build_sensor_agent(spec: GridSpec, k: int) -> AgentBlock:
    spec.validate()
    cell, prof_name = spec.sensors[k]
    profile = spec.profiles[prof_name]
    idx = state_index(spec)
    states = ORIENTATIONS + (UNINITIALISED,)
    S, A = len(states), len(ORIENTATIONS)
    P = np.zeros((S, A, S))
    for s in range(S):
        P[s, np.arange(A), np.arange(A)] = 1.0
    mu = np.zeros(S)
    mu[-1] = 1.0
    E = np.zeros((len(idx), S, len(OBSERVATIONS)))
    E[:, :, 0] = 1.0
    pd = spec.detect_probability
    for (r, c, _), se in idx.items():
        for o, name in enumerate(ORIENTATIONS):
            if profile.covers(cell, name, (r, c)):
                E[se, o] = (1.0 - pd, pd)
    return AgentBlock(f"sensor{k}", states, ORIENTATIONS, OBSERVATIONS, P, mu, E)


def build_experiment(spec: GridSpec) -> tuple[FactoredDecPomdp, SecretMap]:
    env, secret = build_env_chain(spec)
    agents = tuple(build_sensor_agent(spec, k) for k in range(len(spec.sensors)))
    model = FactoredDecPomdp(spec.horizon, env, agents)
    model.validate().raise_if_invalid()
    return model, secret


GRID_KEYS = {"kind", "map", "horizon", "slip_probability", "type_prior", "kappa", "detect_probability",
             "initial_column", "range", "sensor_ranges", "radii", "offsets"}


def grid_spec_from_dict(doc: dict) -> GridSpec:
    """Build a GridSpec from a parsed config document (see README for the schema)."""
    unknown = set(doc) - GRID_KEYS
    if unknown:
        raise ConfigError(f"unknown grid config keys: {sorted(unknown)}")
    if "map" not in doc or "horizon" not in doc:
        raise ConfigError("grid config needs 'map' and 'horizon'")
    layout = parse_ascii(doc["map"])
    cells = layout.pop("sensor_cells")
    default = doc.get("range", "small")
    per = doc.get("sensor_ranges", [default] * len(cells))
    if len(per) != len(cells):
        raise ConfigError("sensor_ranges length does not match the number of sensors on the map")
    radii = {**DEFAULT_RADII, **doc.get("radii", {})}
    profiles = {k: quadrant_profile(int(r)) for k, r in radii.items()}
    for name, table in doc.get("offsets", {}).items():
        profiles[name] = RangeProfile({o: frozenset(tuple(x) for x in table[o]) for o in ORIENTATIONS})
    kappa = doc.get("kappa", 2.0)
    kappa = math.inf if kappa in ("inf", math.inf) else float(kappa)
    return GridSpec(
        sensors=tuple(zip(cells, per)),
        horizon=int(doc["horizon"]),
        initial_column=int(doc.get("initial_column", 0)),
        slip_probability=float(doc.get("slip_probability", 0.0)),
        type_prior=float(doc.get("type_prior", 0.5)),
        kappa=kappa,
        detect_probability=float(doc.get("detect_probability", 0.5)),
        profiles=profiles,
        **layout,
    )
