"""Synthetic vectorized driving scenes with known confounding structure.

The generator embeds three spurious-correlation traps at configurable
strength:

* object and map class labels co-occur with a binary companion flag,
  and the flag leaks a style component into the feature vectors;
* object and map features share a per-scene context-style coefficient
  (a common-cause channel shadowing the true geometry signal);
* the ego history is a noisy copy of the expert's first waypoint
  direction, so a shortcut learner can fit the plan from its own past
  kinematics instead of the environment.

The expert trajectory is a deterministic rule on (context, agents, map
geometry): follow the lane curvature for the latent context, decelerate
when an agent's extrapolated path cuts into the ego corridor. Scenes are
rendered from an explicit exogenous-noise block, so interventions on the
latent context can re-render everything downstream of the context while
reusing the same noise (the exchangeability contract used by the
counterfactual editor).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

CONTEXTS = ("straight", "left", "right")
FEATURE_DIM = 16
N_WAYPOINTS = 6
DT = 0.5               # seconds between waypoints; horizon = 3 s
HISTORY_STEPS = 2

# expert rule constants
CURVATURES = (0.0, 0.25, -0.25)   # rad per step, per context
BASE_SPEED = 2.0                  # toy units / s
DECEL_FACTOR = 0.45
V_MAX = 4.0
CORRIDOR_RADIUS = 1.2
COLLISION_RADIUS = 1.0
HISTORY_NOISE = 0.5

# feature mixing magnitudes. No input block carries a clean per-scene
# context readout: lane context is only visible through noisy channels
# (map/object style coefficients, traffic flow headings, ego history),
# which is what makes the shortcut trap and the prototype denoiser bite.
OBJ_CLASS_GAIN = 1.0
MAP_CLASS_GAIN = 1.0
COOCCUR_GAIN = 1.6
CTX_STYLE_GAIN = 1.8      # map-block context style magnitude
OBJ_STYLE_GAIN = 0.4      # object-block context style magnitude
OBJ_NOISE = 0.25
MAP_NOISE = 0.25
STYLE_COEF_STD = 1.1      # shared per-scene noise on the style coefficient
FLOW_GAIN = 3.0           # traffic heading multiple of lane curvature
CUTIN_PROB = (0.22, 0.45, 0.45)   # per context: turns see more cut-ins

N_CLASSES = 3


def _world_basis() -> dict:
    """Fixed orthonormal directions the feature mixer writes onto."""
    rng = np.random.default_rng(1898187418)
    q, _ = np.linalg.qr(rng.normal(size=(FEATURE_DIM, FEATURE_DIM)))
    return {
        "obj_class": q[0:3],
        "map_class": q[3:6],
        "ctx_style": q[6:9],
        "curv": q[9],
        "cooccur": q[10],
        "style": q[12],   # curvature-mimicking confounded map channel
    }


WORLD = _world_basis()


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs of the generating process."""

    context_prior: tuple = (0.75, 0.125, 0.125)
    shortcut_strength: float = 0.9
    cooccurrence_strength: float = 0.8
    n_objects: int = 4
    n_map_elems: int = 4
    n_agents: int = 2
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.context_prior) - 1.0) > 1e-9 or min(self.context_prior) < 0:
            raise ValueError(f"context_prior must be a distribution: {self.context_prior}")
        for name in ("shortcut_strength", "cooccurrence_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if min(self.n_objects, self.n_map_elems, self.n_agents) < 1:
            raise ValueError("scene element counts must be positive")

    def to_json(self) -> dict:
        return {"context_prior": list(self.context_prior),
                "shortcut_strength": self.shortcut_strength,
                "cooccurrence_strength": self.cooccurrence_strength,
                "n_objects": self.n_objects, "n_map_elems": self.n_map_elems,
                "n_agents": self.n_agents, "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        obj = dict(obj)
        obj["context_prior"] = tuple(obj["context_prior"])
        return cls(**obj)


@dataclass
class Scene:
    """One rendered sample plus the latents and noise needed to edit it."""

    scene_id: int
    context: int
    cooccur_flag: int
    obj_feats: np.ndarray      # n_objects x FEATURE_DIM
    obj_labels: np.ndarray     # n_objects
    map_feats: np.ndarray      # n_map_elems x FEATURE_DIM
    map_labels: np.ndarray     # n_map_elems
    agent_kin: np.ndarray      # n_agents x 4: px, py, vx, vy
    ego_history: np.ndarray    # HISTORY_STEPS x 3: vx, vy, yaw
    expert_traj: np.ndarray    # N_WAYPOINTS x 2
    cfg: ScenarioConfig = field(repr=False)
    seed_key: tuple = field(repr=False, default=())

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "context": CONTEXTS[self.context],
            "cooccur_flag": int(self.cooccur_flag),
            "obj_feats": self.obj_feats.tolist(),
            "obj_labels": self.obj_labels.tolist(),
            "map_feats": self.map_feats.tolist(),
            "map_labels": self.map_labels.tolist(),
            "agent_kin": self.agent_kin.tolist(),
            "ego_history": self.ego_history.tolist(),
            "expert_traj": self.expert_traj.tolist(),
            "seed_key": list(self.seed_key),
        }

    @classmethod
    def from_json(cls, obj: dict, cfg: ScenarioConfig) -> "Scene":
        return cls(
            scene_id=int(obj["scene_id"]),
            context=CONTEXTS.index(obj["context"]),
            cooccur_flag=int(obj["cooccur_flag"]),
            obj_feats=np.array(obj["obj_feats"], dtype=np.float64),
            obj_labels=np.array(obj["obj_labels"], dtype=np.int64),
            map_feats=np.array(obj["map_feats"], dtype=np.float64),
            map_labels=np.array(obj["map_labels"], dtype=np.int64),
            agent_kin=np.array(obj["agent_kin"], dtype=np.float64),
            ego_history=np.array(obj["ego_history"], dtype=np.float64),
            expert_traj=np.array(obj["expert_traj"], dtype=np.float64),
            cfg=cfg,
            seed_key=tuple(obj["seed_key"]),
        )


@dataclass
class Dataset:
    scenes: list
    config: ScenarioConfig
    split: str = "train"

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)


# ---------------------------------------------------------------------------
# exogenous noise and rendering
# ---------------------------------------------------------------------------

def _draw_exogenous(rng: np.random.Generator, cfg: ScenarioConfig) -> dict:
    """All stochastic inputs of one scene, drawn independently of context."""
    return {
        "u_ctx": rng.uniform(),
        "u_flag": rng.uniform(),
        "u_obj_cls": rng.uniform(size=cfg.n_objects),
        "u_map_cls": rng.uniform(size=cfg.n_map_elems),
        "obj_noise": rng.normal(size=(cfg.n_objects, FEATURE_DIM)),
        "map_noise": rng.normal(size=(cfg.n_map_elems, FEATURE_DIM)),
        "style_coef": rng.normal(),
        "cooccur_wobble": rng.normal(size=cfg.n_objects),
        "curv_wobble": rng.normal(size=cfg.n_map_elems),
        "u_cutin": rng.uniform(),
        "cutin_agent_u": rng.uniform(),
        "agent_pos": rng.uniform(size=(cfg.n_agents, 2)),
        "agent_speed": rng.uniform(size=cfg.n_agents),
        "agent_dir_noise": rng.normal(size=cfg.n_agents),
        "cutin_lat": rng.uniform(),
        "ego_noise": rng.normal(size=(HISTORY_STEPS, 2)),
    }


def _pick_context(u: float, prior) -> int:
    cum = 0.0
    for i, p in enumerate(prior):
        cum += p
        if u < cum:
            return i
    return len(prior) - 1


def _coupled_label(u: float, aligned: int, strength: float) -> int:
    """With probability ``strength`` return the flag-aligned class, else uniform."""
    if u < strength:
        return aligned
    r = (u - strength) / max(1.0 - strength, 1e-12)
    return min(int(r * N_CLASSES), N_CLASSES - 1)


def agent_positions_at(agent_kin: np.ndarray, t: float) -> np.ndarray:
    """Linear extrapolation of agent positions to time t."""
    return agent_kin[:, 0:2] + agent_kin[:, 2:4] * t


def expert_policy(context: int, agent_kin: np.ndarray) -> np.ndarray:
    """Deterministic expert: follow lane curvature, brake for cut-ins.

    The ego starts at the origin heading +x. An agent whose extrapolated
    position enters the undecelerated ego corridor triggers a fixed
    deceleration for the whole horizon.
    """
    kappa = CURVATURES[context]
    # nominal path at base speed, used for hazard detection
    nominal = _roll_waypoints(BASE_SPEED, kappa)
    hazard = False
    for step in range(1, N_WAYPOINTS + 1):
        t = step * DT
        dists = np.linalg.norm(agent_positions_at(agent_kin, t) - nominal[step - 1], axis=1)
        if (dists < CORRIDOR_RADIUS).any():
            hazard = True
            break
    speed = BASE_SPEED * (DECEL_FACTOR if hazard else 1.0)
    return _roll_waypoints(speed, kappa)


def _roll_waypoints(speed: float, kappa: float) -> np.ndarray:
    pts = np.zeros((N_WAYPOINTS, 2))
    pos = np.zeros(2)
    theta = 0.0
    for i in range(N_WAYPOINTS):
        theta += kappa
        pos = pos + speed * DT * np.array([np.cos(theta), np.sin(theta)])
        pts[i] = pos
    return pts


def _render(cfg: ScenarioConfig, scene_id: int, seed_key: tuple, omega: dict,
            context_override: int | None = None) -> Scene:
    ctx = _pick_context(omega["u_ctx"], cfg.context_prior) \
        if context_override is None else int(context_override)

    # companion flag: more likely in turning contexts
    p_flag = 0.25 + 0.5 * (ctx != 0)
    flag = int(omega["u_flag"] < p_flag)

    aligned_cls = 1 if flag else 0
    obj_labels = np.array([
        _coupled_label(u, aligned_cls, cfg.cooccurrence_strength)
        for u in omega["u_obj_cls"]], dtype=np.int64)
    map_labels = np.array([
        _coupled_label(u, aligned_cls, cfg.cooccurrence_strength)
        for u in omega["u_map_cls"]], dtype=np.int64)

    # context enters features only through a per-context style direction
    # whose coefficient is shared scene noise (a common-cause channel):
    # marginally predictive of the lane context, unreliable per scene
    style_coef = 1.0 + STYLE_COEF_STD * omega["style_coef"]
    ctx_dir = WORLD["ctx_style"][ctx]

    obj_feats = (OBJ_CLASS_GAIN * WORLD["obj_class"][obj_labels]
                 + flag * COOCCUR_GAIN
                 * np.outer(1.0 + 0.2 * omega["cooccur_wobble"], WORLD["cooccur"])
                 + OBJ_STYLE_GAIN * style_coef * ctx_dir[None, :]
                 + OBJ_NOISE * omega["obj_noise"])
    map_feats = (MAP_CLASS_GAIN * WORLD["map_class"][map_labels]
                 + CTX_STYLE_GAIN * style_coef
                 * np.outer(1.0 + 0.1 * omega["curv_wobble"], ctx_dir)
                 + MAP_NOISE * omega["map_noise"])

    agent_kin = _render_agents(cfg, ctx, omega)
    expert = expert_policy(ctx, agent_kin)

    # shortcut channel: history velocity = faithful copy of the expert's
    # first-step velocity blended with exogenous noise
    # shortcut channel: history velocity is a noisy copy of the expert's
    # first waypoint direction (at nominal speed, so the hazard response
    # stays invisible to the shortcut and must be read from the scene)
    rho = cfg.shortcut_strength
    first = expert[0]
    direction = first / max(np.linalg.norm(first), 1e-12)
    hist = np.zeros((HISTORY_STEPS, 3))
    for h in range(HISTORY_STEPS):
        vel = BASE_SPEED * (rho * direction
                            + np.sqrt(max(1.0 - rho ** 2, 0.0))
                            * HISTORY_NOISE * omega["ego_noise"][h])
        hist[h, 0:2] = vel
        # yaw is the ego heading in its own frame: zero up to jitter
        hist[h, 2] = 0.02 * omega["ego_noise"][h, 0]

    return Scene(scene_id=scene_id, context=ctx, cooccur_flag=flag,
                 obj_feats=obj_feats, obj_labels=obj_labels,
                 map_feats=map_feats, map_labels=map_labels,
                 agent_kin=agent_kin, ego_history=hist, expert_traj=expert,
                 cfg=cfg, seed_key=seed_key)


def _render_agents(cfg: ScenarioConfig, ctx: int, omega: dict) -> np.ndarray:
    """Traffic flows with the lane; one agent may cut into the corridor.

    A cutting agent is aimed at a point of the ego's nominal path so the
    hazard fires regardless of lane curvature.
    """
    n = cfg.n_agents
    kin = np.zeros((n, 4))
    kappa = CURVATURES[ctx]
    cutin = omega["u_cutin"] < CUTIN_PROB[ctx]
    cut_idx = int(omega["cutin_agent_u"] * n) % n if cutin else -1
    nominal = _roll_waypoints(BASE_SPEED, kappa)
    for i in range(n):
        px = 2.0 + 3.0 * omega["agent_pos"][i, 0]
        side = 1.0 if omega["agent_pos"][i, 1] >= 0.5 else -1.0
        py = side * (2.4 + 1.2 * abs(omega["agent_pos"][i, 1] - 0.5) * 2.0)
        speed = 1.0 + 1.5 * omega["agent_speed"][i]
        # traffic follows the lane flow; in turning contexts its lateral
        # velocity overlaps a straight-context cut-in signature, so the
        # hazard is only separable relative to the context flow
        heading = kappa * FLOW_GAIN + 0.6 * omega["agent_dir_noise"][i]
        vx, vy = speed * np.cos(heading), speed * np.sin(heading)
        if i == cut_idx:
            step = 2 + int(omega["cutin_lat"] * 3)          # intercept at 1.0-2.0 s
            t_hit = step * DT
            target = nominal[step - 1]
            start = target + np.array([0.3, side * (1.4 + 0.8 * omega["agent_speed"][i])])
            vel = (target - start) / t_hit
            px, py = start
            vx, vy = vel
        kin[i] = (px, py, vx, vy)
    return kin


def generate_scene(cfg: ScenarioConfig, index: int, split: str = "train") -> Scene:
    """Render scene ``index`` of the given split's seed stream."""
    stream = {"train": 0, "val": 1}[split]
    seed_key = (cfg.seed, stream, index)
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    omega = _draw_exogenous(rng, cfg)
    return _render(cfg, index, seed_key, omega)


def generate_dataset(cfg: ScenarioConfig, n: int, split: str = "train") -> Dataset:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    return Dataset([generate_scene(cfg, i, split) for i in range(n)], cfg, split)


# ---------------------------------------------------------------------------
# scene editors (all copy-on-write)
# ---------------------------------------------------------------------------

def perturb_ego_velocity(scene: Scene, mode: str, value: float = 1.0) -> Scene:
    """Rescale or replace the ego-history velocity; everything else untouched.

    ``mode`` is 'scale' (multiply velocity by ``value``) or 'absolute'
    (set the speed to ``value``, preserving direction; a zero-velocity
    step is pointed along +x).
    """
    hist = scene.ego_history.copy()
    if mode == "scale":
        if value < 0:
            raise ValueError("scale factor must be >= 0")
        hist[:, 0:2] *= value
    elif mode == "absolute":
        if not np.isfinite(value):
            raise ValueError("absolute speed must be finite")
        for h in range(hist.shape[0]):
            v = hist[h, 0:2]
            norm = np.linalg.norm(v)
            direction = v / norm if norm > 0 else np.array([1.0, 0.0])
            hist[h, 0:2] = direction * value
    else:
        raise ValueError(f"unknown ego perturbation mode {mode!r}")
    return replace(scene, ego_history=hist)


def perturb_context_features(scene: Scene, target: str, magnitude: float,
                             seed: int = 0) -> Scene:
    """Add uniform noise in [-m, m] * block RMS to one feature block."""
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if target not in ("agent", "map"):
        raise ValueError(f"target must be 'agent' or 'map', got {target!r}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, scene.scene_id)))
    if target == "map":
        block = scene.map_feats
    else:
        block = scene.agent_kin
    scale = float(np.sqrt(np.mean(block ** 2))) or 1.0
    noise = rng.uniform(-1.0, 1.0, size=block.shape) * magnitude * scale
    edited = block + noise
    if target == "map":
        return replace(scene, map_feats=edited)
    return replace(scene, agent_kin=edited)


def counterfactual_context(scene: Scene, new_context: int) -> Scene:
    """Re-render the scene under ``new_context`` with the same exogenous noise.

    Map, object, and agent blocks plus the expert trajectory are recomputed;
    the recorded ego history is deliberately NOT updated, since it is the
    shortcut channel whose stale value the counterfactual probes.
    """
    if not 0 <= new_context < len(CONTEXTS):
        raise ValueError(f"invalid context {new_context}")
    rng = np.random.default_rng(np.random.SeedSequence(scene.seed_key))
    omega = _draw_exogenous(rng, scene.cfg)
    redone = _render(scene.cfg, scene.scene_id, scene.seed_key, omega,
                     context_override=new_context)
    return replace(redone, ego_history=scene.ego_history.copy())


def scene_collides(waypoints: np.ndarray, agent_kin: np.ndarray) -> bool:
    """Disc-overlap collision proxy against linearly extrapolated agents."""
    for step in range(1, N_WAYPOINTS + 1):
        t = step * DT
        d = np.linalg.norm(agent_positions_at(agent_kin, t) - waypoints[step - 1], axis=1)
        if (d < COLLISION_RADIUS).any():
            return True
    return False


def agent_future(agent_kin: np.ndarray) -> np.ndarray:
    """Ground-truth agent displacement targets: n_agents x N_WAYPOINTS x 2."""
    ts = DT * np.arange(1, N_WAYPOINTS + 1)
    return agent_kin[:, None, 0:2] + agent_kin[:, None, 2:4] * ts[None, :, None]


# ---------------------------------------------------------------------------
# dataset files: JSON lines, one scene per line after a manifest header
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"config": ds.config.to_json(), "split": ds.split,
                             "n": len(ds.scenes)}) + "\n")
        for s in ds.scenes:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_dataset(path: str) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        cfg = ScenarioConfig.from_json(header["config"])
        scenes = [Scene.from_json(json.loads(line), cfg) for line in fh if line.strip()]
    return Dataset(scenes, cfg, header["split"])
