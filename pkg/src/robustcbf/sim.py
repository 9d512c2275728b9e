"""Randomised multi-agent navigation scenarios and a Monte-Carlo harness.

A goal-seeking robot shares a square arena with 3 to 12 agents. Roughly half
of the agents drive blindly to their own goals, the rest additionally run a
certainty-equivalent barrier filter of their own. The robot learns one
disturbance model per agent online and filters its desired control through
either the robust program, its nominal (zero-uncertainty) counterpart, or
nothing at all.

Randomness is split into independent streams per trial (spawn, agent noise,
robot noise) so that different filter modes run on identical worlds.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import mvg
from .bounds import (
    ZERO_ZETA,
    build_ellipsoid,
    mahalanobis_sq,
    point_polytope,
    sigma_level_quantile,
    to_polytope,
    zeta_from_polytope,
)
from .cbf import (
    AssumptionViolated,
    BarrierParams,
    CoincidentAgents,
    InfeasibleGeometry,
    a_max_compute,
    braking_control,
    cbc_coefficients,
    h_pair,
)
from .core import POS, VEL, AgentModel, RobotDynamics, constant_velocity, drag_double_integrator
from .robustqp import assemble, polygon_halfplanes, solve

logger = logging.getLogger(__name__)

RECORD_VERSION = 1
SUMMARY_VERSION = 1
MODES = ("robust", "nominal", "none")
BLIND, AVOIDER = "blind", "avoider"


class SpawnError(RuntimeError):
    """Rejection sampling could not place everyone in the arena."""


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: Optional[int] = None  # None: uniform in n_agents_range per trial
    n_agents_range: Tuple[int, int] = (3, 12)
    arena: float = 10.0
    blind_fraction: float = 0.5
    dt: float = 0.1
    horizon: int = 400
    delta: float = 0.05
    barrier: BarrierParams = BarrierParams()
    seed: int = 0
    filter_mode: str = "robust"
    u_max: float = 15.0
    ball_facets: int = 16
    goal_radius: float = 0.5
    activation: float = 6.0  # in units of d_s
    window: int = 50
    # robot
    robot_speed: float = 1.5
    robot_gain: float = 4.0
    robot_drag_nominal: float = 0.1
    robot_drag_true: float = 0.15
    robot_noise: float = 0.005
    robot_pos_noise: float = 0.002
    # agents
    agent_kp: float = 1.0
    agent_kd: float = 1.4
    agent_err_sat: float = 1.5
    agent_accel: float = 2.0
    agent_lag: float = 1.0  # fraction of the commanded change applied per step
    agent_regoal: bool = False  # draw a new goal on arrival instead of parking
    agent_noise: float = 0.2
    agent_pos_noise: float = 0.005
    avoider_eta: Tuple[float, float] = (0.2, 0.8)
    avoider_ds: Tuple[float, float] = (0.8, 1.2)
    keep_trace: bool = False
    keep_samples: bool = True
    calibrate_all: bool = True  # score every agent's model each step, not only active ones

    def __post_init__(self):
        if self.n_agents is not None and not 3 <= self.n_agents <= 12:
            raise ValueError(f"n_agents must lie in [3, 12], got {self.n_agents}")
        lo, hi = self.n_agents_range
        if not 3 <= lo <= hi <= 12:
            raise ValueError(f"n_agents_range must lie in [3, 12], got {self.n_agents_range}")
        if not 0.0 <= self.blind_fraction <= 1.0:
            raise ValueError("blind_fraction must lie in [0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.filter_mode not in MODES:
            raise ValueError(f"filter_mode must be one of {MODES}, got {self.filter_mode!r}")
        if self.horizon < 1 or self.dt <= 0 or self.arena <= 0:
            raise ValueError("horizon, dt and arena must be positive")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["barrier"] = asdict(self.barrier)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        if isinstance(doc.get("barrier"), dict):
            doc["barrier"] = BarrierParams(**doc["barrier"])
        for key in ("n_agents_range", "avoider_eta", "avoider_ds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class Agent:
    x: np.ndarray
    goal: np.ndarray
    kind: str
    eta: float
    d_s: float
    acc: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class World:
    robot_x: np.ndarray
    robot_goal: np.ndarray
    agents: List[Agent]
    n_blind: int


@dataclass
class TrialRecord:
    seed: int
    mode: str
    n_agents: int
    collided: bool
    min_separation: float
    distance_to_collision: float
    steps: int
    fallback_events: int
    reached_goal: bool
    # one row per (step, agent): [inside 2 sigma, inside 3 sigma, agent was active]
    calibration_hits: List[List[bool]] = field(default_factory=list)
    calibration_m2: List[float] = field(default_factory=list)
    whitened: List[List[float]] = field(default_factory=list)
    certified_checks: int = 0
    outside_polytope: int = 0
    certified_violations: int = 0
    flagged_steps: List[dict] = field(default_factory=list)
    fallback_reasons: Dict[str, int] = field(default_factory=dict)
    block_steps: int = 0
    qp_solves: int = 0
    trace: List[List[float]] = field(default_factory=list)
    version: int = RECORD_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


@dataclass(frozen=True)
class TrainedModels:
    """Hyperparameters per behaviour class; windows start empty in every trial."""

    robot: mvg.MvgModel
    agent: mvg.MvgModel

    def dumps(self) -> str:
        return json.dumps({"format_version": 1, "kind": "trained_models",
                           "robot": mvg.to_dict(self.robot), "agent": mvg.to_dict(self.agent)},
                          indent=1)

    @classmethod
    def loads(cls, text: str) -> "TrainedModels":
        doc = json.loads(text)
        if doc.get("kind") != "trained_models":
            raise ValueError("not a trained-models document")
        return cls(mvg.from_dict(doc["robot"]), mvg.from_dict(doc["agent"]))


# --------------------------------------------------------------------------
# dynamics


def robot_nominal(cfg: ScenarioConfig) -> RobotDynamics:
    return drag_double_integrator(cfg.dt, cfg.robot_drag_nominal, cfg.u_max)


def robot_true(cfg: ScenarioConfig) -> RobotDynamics:
    return drag_double_integrator(cfg.dt, cfg.robot_drag_true, cfg.u_max)


def agent_actuation(cfg: ScenarioConfig, d_s: float) -> RobotDynamics:
    """Double integrator ``v' = v + dt a`` used by avoider agents for their own filter."""

    def f(x):
        out = np.asarray(x, float).copy()
        out[POS] = out[POS] + cfg.dt * out[VEL]
        return out

    def g(x):
        out = np.zeros((np.asarray(x).size, 2))
        out[VEL] = cfg.dt * np.eye(2)
        return out

    return RobotDynamics(f=f, g=g, u_max=cfg.agent_accel, dt=cfg.dt)


def _sat(e: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(e))
    return e if n <= limit else e * (limit / n)


def desired_control(cfg: ScenarioConfig, dyn: RobotDynamics, x, goal) -> np.ndarray:
    """Goal-seeking velocity tracker, clipped to the inscribed control polygon."""
    x = np.asarray(x, float)
    v_ref = cfg.robot_speed * _sat(goal - x[POS], 1.0)
    u = cfg.robot_gain * (v_ref - x[VEL])
    return _sat(u, cfg.u_max * math.cos(math.pi / cfg.ball_facets))


def agent_desired_accel(cfg: ScenarioConfig, agent: Agent) -> np.ndarray:
    a = cfg.agent_kp * _sat(agent.goal - agent.x[POS], cfg.agent_err_sat) - cfg.agent_kd * agent.x[VEL]
    return _sat(a, cfg.agent_accel * math.cos(math.pi / cfg.ball_facets))


def avoider_accel(cfg: ScenarioConfig, agent: Agent, others: Sequence[np.ndarray],
                  cv: AgentModel) -> np.ndarray:
    """Certainty-equivalent barrier filter run by an avoider agent."""
    a_des = agent_desired_accel(cfg, agent)
    dyn = agent_actuation(cfg, agent.d_s)
    params = BarrierParams(d_s=agent.d_s, eta=agent.eta)
    rows, rhs = [], []
    for xo in others:
        if np.linalg.norm(xo[POS] - agent.x[POS]) > cfg.activation * agent.d_s:
            continue
        try:
            a_max = a_max_compute(dyn, cv, agent.x, xo, 0.0, 0.0,
                                  cfg.agent_accel * math.cos(math.pi / cfg.ball_facets))
            coef = cbc_coefficients(dyn, cv, agent.x, xo, ZERO_ZETA, ZERO_ZETA, a_max, params)
        except (InfeasibleGeometry, AssumptionViolated, CoincidentAgents):
            continue
        rows.append(coef.h3)
        rhs.append(coef.k_c)
    if not rows:
        return a_des
    if all(r @ a_des <= k for r, k in zip(rows, rhs)):
        return a_des
    a_poly, b_poly = polygon_halfplanes(cfg.ball_facets, cfg.agent_accel)
    C = np.vstack([np.array(rows), a_poly])
    h = np.concatenate([rhs, b_poly])
    a = project_planar(a_des, C, h)
    if a is None:
        # nothing certifiable: coast rather than push anywhere
        return np.zeros(2)
    return _sat(a, cfg.agent_accel)


def project_planar(p: np.ndarray, C: np.ndarray, h: np.ndarray, tol: float = 1e-9):
    """Closest point to ``p`` in ``{x in R^2 : C x <= h}``, or ``None`` if empty.

    In the plane the minimiser has at most two active constraints, so the
    candidates are ``p`` itself, its projections onto every line and the
    pairwise line intersections.
    """
    norms = np.einsum("ij,ij->i", C, C)
    keep = norms > 0
    if np.any(h[~keep] < -tol):
        return None
    C, h, norms = C[keep], h[keep], norms[keep]
    cands = [p[None, :], p - ((C @ p - h) / norms)[:, None] * C]
    i, j = np.triu_indices(len(h), 1)
    det = C[i, 0] * C[j, 1] - C[i, 1] * C[j, 0]
    ok = np.abs(det) > 1e-12
    i, j, det = i[ok], j[ok], det[ok]
    x = (h[i] * C[j, 1] - h[j] * C[i, 1]) / det
    y = (C[i, 0] * h[j] - C[j, 0] * h[i]) / det
    cands.append(np.column_stack([x, y]))
    pts = np.vstack(cands)
    feas = np.all(pts @ C.T <= h + tol * (1.0 + np.abs(h)), axis=1)
    if not np.any(feas):
        return None
    pts = pts[feas]
    return pts[np.argmin(np.sum((pts - p) ** 2, axis=1))]


# --------------------------------------------------------------------------
# scenario generation


def trial_streams(seed: int):
    """Independent generators for spawning, agent noise and robot noise."""
    ss = np.random.SeedSequence(int(seed))
    spawn, agents, robot = ss.spawn(3)
    return (np.random.default_rng(spawn), np.random.default_rng(agents),
            np.random.default_rng(robot))


def n_blind_for(n_agents: int, fraction: float) -> int:
    """Blind agent count, rounding half up."""
    return int(math.floor(n_agents * fraction + 0.5))


def _uniform_point(rng, half: float) -> np.ndarray:
    return rng.uniform(-half, half, size=2)


def spawn_scenario(cfg: ScenarioConfig, rng: Optional[np.random.Generator] = None) -> World:
    """Random start and goal for the robot and every agent.

    Starts are rejection-sampled so that every pair is at least ``2 d_s``
    apart. The robot starts at rest, agents at the cruise speed of their
    goal controller. Raises :class:`SpawnError` after 1000 failed attempts for one
    placement.
    """
    if rng is None:
        rng = trial_streams(cfg.seed)[0]
    n = cfg.n_agents if cfg.n_agents is not None else int(
        rng.integers(cfg.n_agents_range[0], cfg.n_agents_range[1] + 1))
    d_s = cfg.barrier.d_s
    half = cfg.arena
    starts: List[np.ndarray] = []
    for _ in range(n + 1):
        for _attempt in range(1000):
            p = _uniform_point(rng, half)
            if all(np.linalg.norm(p - q) >= 2.0 * d_s for q in starts):
                starts.append(p)
                break
        else:
            raise SpawnError(f"could not place {n + 1} bodies {2 * d_s} m apart in the arena")
    robot_goal = _uniform_point(rng, half)
    n_blind = n_blind_for(n, cfg.blind_fraction)
    kinds = [BLIND] * n_blind + [AVOIDER] * (n - n_blind)
    kinds = [kinds[i] for i in rng.permutation(n)]
    agents = []
    for p, kind in zip(starts[1:], kinds):
        goal = _uniform_point(rng, half)
        eta = float(rng.uniform(*cfg.avoider_eta))
        ds = float(rng.uniform(*cfg.avoider_ds)) * d_s
        # agents are already under way: cruise velocity of their PD law
        v0 = cfg.agent_kp * _sat(goal - p, cfg.agent_err_sat) / cfg.agent_kd
        agents.append(Agent(np.concatenate([p, v0]), goal, kind, eta, ds))
    return World(np.concatenate([starts[0], np.zeros(2)]), robot_goal, agents, n_blind)


# --------------------------------------------------------------------------
# a single trial


def _agents_step(cfg, world: World, rng, cv: AgentModel):
    """Advance every agent with its true behaviour; noise draws have a fixed layout."""
    noise_v = rng.normal(0.0, cfg.agent_noise * cfg.dt, size=(len(world.agents), 2))
    noise_p = rng.normal(0.0, cfg.agent_pos_noise, size=(len(world.agents), 2))
    new_goal = rng.uniform(-cfg.arena, cfg.arena, size=(len(world.agents), 2))
    states = [world.robot_x] + [a.x for a in world.agents]
    out = []
    for i, ag in enumerate(world.agents):
        if ag.kind == AVOIDER:
            others = [s for j, s in enumerate(states) if j != i + 1]
            cmd = avoider_accel(cfg, ag, others, cv)
        else:
            cmd = agent_desired_accel(cfg, ag)
        ag.acc = ag.acc + cfg.agent_lag * (cmd - ag.acc)
        acc = ag.acc
        x = ag.x
        xn = np.empty(4)
        xn[POS] = x[POS] + cfg.dt * x[VEL] + noise_p[i]
        xn[VEL] = x[VEL] + cfg.dt * acc + noise_v[i]
        out.append(xn)
    for i, ag in enumerate(world.agents):
        ag.x = out[i]
        if cfg.agent_regoal and np.linalg.norm(ag.goal - ag.x[POS]) < cfg.goal_radius:
            ag.goal = new_goal[i]


@dataclass
class _Block:
    agent: int
    coef: object
    poly: object
    a_max: float
    h_now: float


def run_trial(cfg: ScenarioConfig, models: Optional[TrainedModels] = None,
              seed: Optional[int] = None) -> TrialRecord:
    """Simulate one episode and return its record.

    Each step the robot (1) feeds the latest transitions of itself and of
    every agent to their disturbance models, (2) builds one robust block
    per agent inside the activation radius, (3) computes its desired
    control, (4) filters it according to ``cfg.filter_mode`` and
    (5) everything moves. Any failure to build or solve the program makes
    the robot brake and is counted as a fallback event.
    """
    seed = cfg.seed if seed is None else int(seed)
    mode = cfg.filter_mode
    if mode == "robust" and models is None:
        raise ValueError("robust mode needs trained disturbance models")
    rng_spawn, rng_agents, rng_robot = trial_streams(seed)
    world = spawn_scenario(cfg, rng_spawn)
    n = len(world.agents)
    dyn = robot_nominal(cfg)
    true_dyn = robot_true(cfg)
    cv = constant_velocity(cfg.dt)
    params = cfg.barrier
    d_s = params.d_s
    radius = cfg.activation * d_s
    u_poly = cfg.u_max * math.cos(math.pi / cfg.ball_facets)  # radius of the inscribed polygon
    k2 = sigma_level_quantile(2.0, 4)
    k3 = sigma_level_quantile(3.0, 4)

    if models is not None:
        m_robot = replace(models.robot, window=(), count=0, capacity=cfg.window)
        m_agents = [replace(models.agent, window=(), count=0, capacity=cfg.window)] * n
    prev_robot = None  # (x, u)
    prev_agents: Optional[List[np.ndarray]] = None

    rec = TrialRecord(seed=seed, mode=mode, n_agents=n, collided=False,
                      min_separation=math.inf, distance_to_collision=math.inf,
                      steps=0, fallback_events=0, reached_goal=False)

    def separations():
        return [float(np.linalg.norm(world.robot_x[POS] - a.x[POS])) for a in world.agents]

    rec.min_separation = min(separations())
    for t in range(cfg.horizon):
        x = world.robot_x
        if np.linalg.norm(world.robot_goal - x[POS]) < cfg.goal_radius:
            rec.reached_goal = True
            break
        if cfg.keep_trace:
            rec.trace.append([t, -1, *map(float, x[POS])])
            rec.trace.extend([t, j, *map(float, a.x[POS])] for j, a in enumerate(world.agents))

        # (1) learn from the last transition
        if models is not None and prev_robot is not None:
            xp, up = prev_robot
            d_r = x - dyn.f(xp) - dyn.g(xp) @ up
            m_robot = mvg.observe(m_robot, xp, d_r)
            m_agents = [mvg.observe(m, xa, a.x - cv.f(xa))
                        for m, xa, a in zip(m_agents, prev_agents, world.agents)]

        # (2) robust blocks
        active = [j for j, a in enumerate(world.agents)
                  if np.linalg.norm(a.x[POS] - x[POS]) <= radius]
        blocks: List[_Block] = []
        fallback = False
        post_r = None
        if mode == "robust" and active:
            post_r = mvg.posterior(m_robot, x)
        posts = {}
        if mode != "none":
            for j in active:
                xa = world.agents[j].x
                try:
                    if mode == "robust":
                        post_a = mvg.posterior(m_agents[j], xa)
                        posts[j] = post_a
                        poly = to_polytope(build_ellipsoid(post_r, post_a, cfg.delta))
                        z_r, z_a = zeta_from_polytope(poly)
                    else:
                        poly = point_polytope(np.zeros(8))
                        z_r, z_a = ZERO_ZETA, ZERO_ZETA
                    a_max = max(a_max_compute(dyn, cv, x, xa, z_r.zeta_v, z_a.zeta_v, u_poly),
                                params.a_max_floor)
                    coef = cbc_coefficients(dyn, cv, x, xa, z_r, z_a, a_max, params)
                    h_now = h_pair(x, xa, a_max, params)
                except (InfeasibleGeometry, AssumptionViolated, CoincidentAgents) as exc:
                    logger.debug("seed %d step %d agent %d: %s", seed, t, j, exc)
                    fallback = True
                    reason = type(exc).__name__
                    rec.fallback_reasons[reason] = rec.fallback_reasons.get(reason, 0) + 1
                    break
                blocks.append(_Block(j, coef, poly, float(a_max), float(h_now)))
        if mode == "robust" and cfg.calibrate_all:
            for j, a in enumerate(world.agents):
                if j not in posts:
                    posts[j] = mvg.posterior(m_agents[j], a.x)

        # (3) + (4) control
        u_des = desired_control(cfg, dyn, x, world.robot_goal)
        optimal = False
        if mode == "none" or (not fallback and not blocks):
            u = u_des
        elif fallback:
            u = braking_control(x, cfg.u_max)
        else:
            prog = assemble(u_des, [(b.coef, b.poly) for b in blocks], cfg.u_max, cfg.ball_facets)
            sol = solve(prog)
            rec.qp_solves += sol.iterations > 0
            if sol.optimal:
                u, optimal = sol.u, True
            else:
                fallback = True
                rec.fallback_reasons[sol.status] = rec.fallback_reasons.get(sol.status, 0) + 1
                u = braking_control(x, cfg.u_max)
        rec.fallback_events += int(fallback)

        # (5) move everyone
        noise = rng_robot.normal(0.0, 1.0, size=4)
        d_true = true_dyn.f(x) - dyn.f(x) + (true_dyn.g(x) - dyn.g(x)) @ u
        d_true[POS] += cfg.robot_pos_noise * noise[:2]
        d_true[VEL] += cfg.robot_noise * noise[2:]
        prev_agents = [a.x.copy() for a in world.agents]
        prev_robot = (x.copy(), np.asarray(u, float).copy())
        world.robot_x = dyn.f(x) + dyn.g(x) @ u + d_true
        _agents_step(cfg, world, rng_agents, cv)
        rec.steps = t + 1

        # bookkeeping on the realised step
        active_set = set(active)
        for j, post_a in sorted(posts.items()):
            d_a = world.agents[j].x - cv.f(prev_agents[j])
            cov = post_a.cov
            m2 = float(mahalanobis_sq(d_a, post_a.mean, cov))
            rec.calibration_hits.append([bool(m2 <= k2), bool(m2 <= k3), j in active_set])
            if cfg.keep_samples:
                rec.calibration_m2.append(m2)
                rec.whitened.append(_whiten(d_a - post_a.mean, cov).tolist())
        for b in blocks:
            j = b.agent
            xa_prev, xa = prev_agents[j], world.agents[j].x
            d_a = xa - cv.f(xa_prev)
            d = np.concatenate([d_true, d_a])
            rec.block_steps += 1
            inside = b.poly.contains(d)
            if not inside:
                rec.outside_polytope += 1
            if not optimal:
                continue
            try:
                h_next = h_pair(world.robot_x, xa, b.a_max, params)
            except CoincidentAgents:
                h_next = -math.inf
            ok = h_next >= (1.0 - params.eta) * b.h_now - 1e-6
            if inside:
                rec.certified_checks += 1
                if not ok:
                    rec.certified_violations += 1
            if not ok:
                rec.flagged_steps.append({"step": t, "agent": j, "inside": bool(inside),
                                          "h_now": float(b.h_now), "h_next": float(h_next)})

        seps = separations()
        rec.min_separation = min(rec.min_separation, min(seps))
        if min(seps) < d_s:
            rec.collided = True
            break

    rec.min_separation = float(rec.min_separation)
    rec.distance_to_collision = rec.min_separation
    return rec


def _whiten(r: np.ndarray, cov: np.ndarray, floor: float = 1e-300) -> np.ndarray:
    lam, vec = np.linalg.eigh(0.5 * (cov + cov.T))
    return (vec.T @ r) / np.sqrt(np.maximum(lam, floor))


# --------------------------------------------------------------------------
# campaigns


def trial_seeds(base_seed: int, n_trials: int) -> List[int]:
    """Seeds shared by every mode of a campaign."""
    ss = np.random.SeedSequence(int(base_seed))
    return [int(s.generate_state(1, np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(n_trials)]


def _run_one(args):
    cfg, models, seed = args
    return run_trial(cfg, models, seed)


def run_campaign(cfg: ScenarioConfig, n_trials: int, modes: Sequence[str] = ("robust", "nominal"),
                 models: Optional[TrainedModels] = None, jobs: int = 1,
                 keep_trace_first: bool = False) -> Dict[str, List[TrialRecord]]:
    """Run ``n_trials`` paired trials for every mode.

    All modes use the same seed list, so each trial index sees the same
    world and noise. With ``jobs > 1`` trials run in worker processes;
    results are returned in seed order either way.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    seeds = trial_seeds(cfg.seed, n_trials)
    out: Dict[str, List[TrialRecord]] = {}
    for mode in modes:
        mcfg = replace(cfg, filter_mode=mode)
        tasks = []
        for i, s in enumerate(seeds):
            c = replace(mcfg, keep_trace=bool(keep_trace_first and i == 0)) if keep_trace_first else mcfg
            tasks.append((c, models if mode == "robust" else None, s))
        if jobs > 1 and n_trials > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                out[mode] = list(ex.map(_run_one, tasks, chunksize=max(1, n_trials // (4 * jobs))))
        else:
            out[mode] = [_run_one(t) for t in tasks]
    return out


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> Tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


def summarize(records: Sequence[TrialRecord]) -> dict:
    """Aggregate statistics of one mode; only sums and counts, so order does not matter."""
    n = len(records)
    collided = sum(r.collided for r in records)
    safe = [r.distance_to_collision for r in records if not r.collided]
    hits = [h for r in records for h in r.calibration_hits]
    act = [h for h in hits if len(h) < 3 or h[2]]
    steps = sum(r.steps for r in records)
    block_steps = sum(r.block_steps for r in records)
    outside = sum(r.outside_polytope for r in records)
    doc = {
        "version": SUMMARY_VERSION,
        "mode": records[0].mode if records else None,
        "n_trials": n,
        "seeds": [r.seed for r in records],
        "collisions": collided,
        "collision_rate": collided / n if n else 0.0,
        "collision_rate_wilson95": list(wilson_interval(collided, n)),
        "distance_to_collision_mean": float(np.mean(safe)) if safe else None,
        "distance_to_collision_std": float(np.std(safe)) if safe else None,
        "reached_goal_rate": sum(r.reached_goal for r in records) / n if n else 0.0,
        "steps": steps,
        "fallback_events": sum(r.fallback_events for r in records),
        "fallback_rate": sum(r.fallback_events for r in records) / steps if steps else 0.0,
        "calibration_samples": len(hits),
        "calibration_2sigma": sum(h[0] for h in hits) / len(hits) if hits else None,
        "calibration_3sigma": sum(h[1] for h in hits) / len(hits) if hits else None,
        "calibration_samples_active": len(act),
        "calibration_2sigma_active": sum(h[0] for h in act) / len(act) if act else None,
        "calibration_3sigma_active": sum(h[1] for h in act) / len(act) if act else None,
        "block_steps": block_steps,
        "outside_polytope": outside,
        "outside_polytope_rate": outside / block_steps if block_steps else 0.0,
        "certified_checks": sum(r.certified_checks for r in records),
        "certified_violations": sum(r.certified_violations for r in records),
        "qp_solves": sum(r.qp_solves for r in records),
    }
    return doc


# --------------------------------------------------------------------------
# training data


def collect_training_data(cfg: ScenarioConfig, n_episodes: int, steps: Optional[int] = None,
                          batch: Optional[int] = None) -> Dict[str, List[Tuple[np.ndarray, np.ndarray]]]:
    """Transitions of robot and agents with no safety filter, cut into batches.

    Returns ``{"robot": [...], "agent": [...]}``; each entry is an
    ``(X, Y)`` pair of states and residuals against the nominal models.
    Blind and avoider agents are pooled since the robot cannot tell them
    apart. Every recorded transition lands in exactly one batch.
    """
    steps = cfg.horizon if steps is None else steps
    batch = cfg.window if batch is None else batch
    dyn = robot_nominal(cfg)
    true_dyn = robot_true(cfg)
    cv = constant_velocity(cfg.dt)
    seeds = trial_seeds(cfg.seed + 7_919, n_episodes)
    robot_seq: List[Tuple[List, List]] = []
    agent_seq: List[Tuple[List, List]] = []
    for seed in seeds:
        rng_spawn, rng_agents, rng_robot = trial_streams(seed)
        world = spawn_scenario(cfg, rng_spawn)
        rx, ry = [], []
        ax = [[] for _ in world.agents]
        ay = [[] for _ in world.agents]
        for _ in range(steps):
            x = world.robot_x
            if np.linalg.norm(world.robot_goal - x[POS]) < cfg.goal_radius:
                world.robot_goal = rng_spawn.uniform(-cfg.arena, cfg.arena, size=2)
            u = desired_control(cfg, dyn, x, world.robot_goal)
            noise = rng_robot.normal(0.0, 1.0, size=4)
            d_true = true_dyn.f(x) - dyn.f(x) + (true_dyn.g(x) - dyn.g(x)) @ u
            d_true[POS] += cfg.robot_pos_noise * noise[:2]
            d_true[VEL] += cfg.robot_noise * noise[2:]
            prev = [a.x.copy() for a in world.agents]
            world.robot_x = dyn.f(x) + dyn.g(x) @ u + d_true
            _agents_step(cfg, world, rng_agents, cv)
            rx.append(x)
            ry.append(world.robot_x - dyn.f(x) - dyn.g(x) @ u)
            for j, a in enumerate(world.agents):
                ax[j].append(prev[j])
                ay[j].append(a.x - cv.f(prev[j]))
        robot_seq.append((rx, ry))
        agent_seq.extend(zip(ax, ay))

    def chop(seqs):
        out = []
        for xs, ys in seqs:
            for s in range(0, len(xs), batch):
                out.append((np.array(xs[s : s + batch]), np.array(ys[s : s + batch])))
        return out

    return {"robot": chop(robot_seq), "agent": chop(agent_seq)}


DEFAULT_TRAIN = mvg.TrainConfig(noise_range=(0.03, 1.0))


def train_models(dataset: Dict[str, List], train_cfg: Optional[mvg.TrainConfig] = None,
                 window: int = 50, reports: Optional[Dict[str, mvg.TrainReport]] = None) -> TrainedModels:
    """Fit one disturbance model per behaviour class (noise level learned by default)."""
    train_cfg = DEFAULT_TRAIN if train_cfg is None else train_cfg
    out = {}
    for cls in ("robot", "agent"):
        report = mvg.TrainReport()
        out[cls] = mvg.train(mvg.default_model(4, capacity=window), dataset[cls], train_cfg, report)
        if reports is not None:
            reports[cls] = report
    return TrainedModels(out["robot"], out["agent"])
