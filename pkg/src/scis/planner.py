"""Toy sequential query-based planner with optional de-confounding wiring.

Perception encoders lift object/map features and agent kinematics into
query embeddings; classification heads read object/map classes; a motion
block lets agent queries attend to object and map queries; a planning
block lets a single ego query (built from ego history) attend to agent
and map queries and emit six waypoints.

The causal variant installs six intervention instances around the same
backbone: logit adjustments on both classification heads and gated
feature subtraction on the four interaction inputs (object and map
before motion, agent and map before planning), each against the matching
frozen dictionary domain. All interventions are exact identities at
initialization, so a causal model starts bit-for-bit at baseline
behavior.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .dictionary import PrototypeDictionary
from .interventions import (
    IDM_WIRING,
    PDM_WIRING,
    IdmParams,
    PdmParams,
    idm_forward,
    pdm_forward,
)
from .scenes import (
    FEATURE_DIM,
    HISTORY_STEPS,
    N_CLASSES,
    N_WAYPOINTS,
    Scene,
    agent_future,
)

MODEL_DIM = 16
IDM_HEADS = 2
ATTN_SCALE = math.sqrt(MODEL_DIM)
EGO_INPUT_SCALE = 0.1    # slows the shortcut channel's early training phase


class TrainingError(RuntimeError):
    """Training diverged or violated its contract."""


class ConfigurationError(ValueError):
    """Model, dictionary, or flags do not fit together."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.15
    seed: int = 0
    w_classification: float = 1.0
    w_motion: float = 1.0
    w_planning: float = 1.0
    use_pdm: bool = False
    use_idm: bool = False
    feature_dropout: float = 0.0   # heuristic control, off by default
    warm_start_from: str = ""      # optional checkpoint path, exploration only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ValueError("feature_dropout must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


class PlannerModel:
    """Parameter store plus forward passes for baseline and causal variants."""

    def __init__(self, cfg: TrainConfig, dictionary: PrototypeDictionary | None = None):
        if (cfg.use_pdm or cfg.use_idm) and dictionary is None:
            raise ConfigurationError("intervention flags set but no dictionary given")
        if dictionary is not None and dictionary.dim != MODEL_DIM:
            raise ConfigurationError(
                f"dictionary dim {dictionary.dim} does not match model dim {MODEL_DIM}")
        self.cfg = cfg
        self.dictionary = dictionary
        self.trained = False
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        self._init_backbone(rng)
        self.pdm: dict[str, PdmParams] = {}
        self.idm: dict[str, IdmParams] = {}
        if dictionary is not None:
            stagewise_wire(self, dictionary)
        self._dict_tensors = {}
        if dictionary is not None:
            self._dict_tensors = {
                dom: Tensor(dictionary.matrix(dom)) for dom in ("object", "map", "agent")
            }

    # -- construction ------------------------------------------------------

    def _init_backbone(self, rng):
        def mat(name, rows, cols):
            self.params[name] = Tensor(rng.normal(size=(rows, cols)) / math.sqrt(rows),
                                       requires_grad=True)

        def bias(name, n):
            self.params[name] = Tensor(np.zeros(n), requires_grad=True)

        for enc, d_in in (("enc_obj", FEATURE_DIM), ("enc_map", FEATURE_DIM),
                          ("enc_agent", 4), ("enc_ego", HISTORY_STEPS * 3)):
            mat(f"{enc}.w1", d_in, MODEL_DIM); bias(f"{enc}.b1", MODEL_DIM)
            mat(f"{enc}.w2", MODEL_DIM, MODEL_DIM); bias(f"{enc}.b2", MODEL_DIM)
        for head in ("cls_obj", "cls_map"):
            mat(f"{head}.w", MODEL_DIM, N_CLASSES); bias(f"{head}.b", N_CLASSES)
        for attn in ("motion_attn", "plan_attn"):
            for w in ("wq", "wk", "wv", "wo"):
                mat(f"{attn}.{w}", MODEL_DIM, MODEL_DIM)
        mat("motion_head.w1", MODEL_DIM, MODEL_DIM); bias("motion_head.b1", MODEL_DIM)
        mat("motion_head.w2", MODEL_DIM, 2 * N_WAYPOINTS); bias("motion_head.b2", 2 * N_WAYPOINTS)
        mat("plan_head.w1", 2 * MODEL_DIM, MODEL_DIM); bias("plan_head.b1", MODEL_DIM)
        mat("plan_head.w2", MODEL_DIM, 2 * N_WAYPOINTS); bias("plan_head.b2", 2 * N_WAYPOINTS)
        # dedicated stream so intervention parameters do not shift backbone init
        self._scis_rng = np.random.default_rng(rng.integers(2 ** 63))

    def all_parameters(self) -> dict:
        out = dict(self.params)
        for name, p in self.pdm.items():
            for key, t in p.tensors().items():
                out[f"{name}.{key}"] = t
        for name, p in self.idm.items():
            for key, t in p.tensors().items():
                out[f"{name}.{key}"] = t
        return out

    def parameter_census(self) -> dict:
        return {"backbone": len(self.params),
                "pdm_instances": len(self.pdm),
                "idm_instances": len(self.idm),
                "total_tensors": len(self.all_parameters())}

    # -- forward -----------------------------------------------------------

    def _mlp(self, prefix, x):
        return ad.mlp_forward(
            [(self.params[f"{prefix}.w1"], self.params[f"{prefix}.b1"]),
             (self.params[f"{prefix}.w2"], self.params[f"{prefix}.b2"])], x)

    def _attn(self, prefix, q, kv):
        wq, wk, wv, wo = (self.params[f"{prefix}.{w}"] for w in ("wq", "wk", "wv", "wo"))
        scores = ad.softmax_rows(
            ad.matmul(ad.matmul(q, wq), ad.transpose_last2(ad.matmul(kv, wk))),
            scale=ATTN_SCALE)
        return ad.matmul(ad.matmul(scores, ad.matmul(kv, wv)), wo)

    def forward_batch(self, batch: dict) -> dict:
        """Full pipeline on a prepared batch; returns outputs and queries."""
        obj = Tensor(batch["obj_feats"])
        mp = Tensor(batch["map_feats"])
        agents = Tensor(batch["agent_kin"])
        hist = Tensor(batch["ego_history"])

        q_obj = self._mlp("enc_obj", obj)
        q_map = self._mlp("enc_map", mp)
        q_agent0 = self._mlp("enc_agent", agents)

        logits_o = ad.add(ad.matmul(q_obj, self.params["cls_obj.w"]),
                          self.params["cls_obj.b"])
        logits_m = ad.add(ad.matmul(q_map, self.params["cls_map.w"]),
                          self.params["cls_map.b"])
        if self.pdm:
            logits_o = pdm_forward(q_obj, logits_o,
                                   self._dict_tensors["object"], self.pdm["pdm_object"])
            logits_m = pdm_forward(q_map, logits_m,
                                   self._dict_tensors["map"], self.pdm["pdm_map"])

        o_in, m_in = q_obj, q_map
        if self.idm:
            o_in = idm_forward(q_obj, self._dict_tensors["map"],
                               self.idm["idm_object_vs_map"])
            m_in = idm_forward(q_map, self._dict_tensors["object"],
                               self.idm["idm_map_vs_object"])
        q_agent = ad.add(q_agent0,
                         self._attn("motion_attn", q_agent0, ad.concat_tokens(o_in, m_in)))
        motion = self._mlp("motion_head", q_agent)

        a_in, m2_in = q_agent, q_map
        if self.idm:
            a_in = idm_forward(q_agent, self._dict_tensors["map"],
                               self.idm["idm_agent_vs_map"])
            m2_in = idm_forward(q_map, self._dict_tensors["agent"],
                                self.idm["idm_map_vs_agent"])
        q_ego = self._mlp("enc_ego", hist)
        ctx = self._attn("plan_attn", q_ego, ad.concat_tokens(a_in, m2_in))
        waypoints = self._mlp("plan_head", ad.concat_last(q_ego, ctx))

        return {"logits_o": logits_o, "logits_m": logits_m, "motion": motion,
                "waypoints": waypoints, "q_obj": q_obj, "q_map": q_map,
                "q_agent": q_agent, "q_ego": q_ego}

    def loss_on_batch(self, batch: dict) -> Tensor:
        out = self.forward_batch(batch)
        cfg = self.cfg
        ce_o = ad.cross_entropy_logits(out["logits_o"], batch["obj_labels"])
        ce_m = ad.cross_entropy_logits(out["logits_m"], batch["map_labels"])
        d_mot = ad.sub(out["motion"], Tensor(batch["agent_future"]))
        d_way = ad.sub(out["waypoints"], Tensor(batch["expert"]))
        loss = ad.add(
            ad.add(ad.mul_elementwise(Tensor(cfg.w_classification), ad.add(ce_o, ce_m)),
                   ad.mul_elementwise(Tensor(cfg.w_motion),
                                      ad.mean_all(ad.mul_elementwise(d_mot, d_mot)))),
            ad.mul_elementwise(Tensor(cfg.w_planning),
                               ad.mean_all(ad.mul_elementwise(d_way, d_way))))
        return loss

    def predict(self, scene: Scene):
        """Pure single-scene inference: (obj logits, map logits, motion, waypoints)."""
        with no_grad():
            out = self.forward_batch(build_batch([scene]))
        return (out["logits_o"].data[0], out["logits_m"].data[0],
                out["motion"].data[0],
                out["waypoints"].data[0, 0].reshape(N_WAYPOINTS, 2))

    def predict_waypoints(self, scenes) -> np.ndarray:
        """Batched waypoint inference: n_scenes x N_WAYPOINTS x 2."""
        with no_grad():
            out = self.forward_batch(build_batch(scenes))
        return out["waypoints"].data[:, 0, :].reshape(len(scenes), N_WAYPOINTS, 2)

    def query_embeddings(self, scene: Scene) -> dict:
        """Final-layer query embeddings consumed by downstream stages."""
        with no_grad():
            out = self.forward_batch(build_batch([scene]))
        return {"object": out["q_obj"].data[0],
                "map": out["q_map"].data[0],
                "agent": out["q_agent"].data[0],
                "ego": out["q_ego"].data[0]}

    # -- bookkeeping ---------------------------------------------------------

    def identity_hash(self) -> str:
        payload = json.dumps(
            {name: t.data.reshape(-1).tolist()
             for name, t in sorted(self.all_parameters().items())})
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_json(self) -> dict:
        return {
            "train_config": self.cfg.to_json(),
            "trained": self.trained,
            "dict_hash": self.dictionary.content_hash if self.dictionary else None,
            "dictionary": self.dictionary.to_json() if self.dictionary else None,
            "params": {name: t.to_json()
                       for name, t in sorted(self.all_parameters().items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlannerModel":
        cfg = TrainConfig.from_json(obj["train_config"])
        dictionary = None
        if obj["dictionary"] is not None:
            dictionary = PrototypeDictionary.from_json(obj["dictionary"])
            if dictionary.content_hash != obj["dict_hash"]:
                raise ConfigurationError(
                    "checkpoint dictionary hash mismatch: refusing to load")
        model = cls(cfg, dictionary)
        for name, t in model.all_parameters().items():
            stored = obj["params"].get(name)
            if stored is None or tuple(stored["shape"]) != t.shape:
                raise ConfigurationError(f"checkpoint missing or misshapen {name!r}")
            t.data = np.array(stored["data"], dtype=np.float64).reshape(stored["shape"])
        model.trained = bool(obj["trained"])
        return model


def stagewise_wire(model: PlannerModel, dictionary: PrototypeDictionary) -> PlannerModel:
    """Install the intervention instances requested by the model's flags.

    Two logit interventions (object and map heads against their own
    domain) and four feature interventions (object vs map, map vs object
    before motion; agent vs map, map vs agent before planning), each with
    independent parameters.
    """
    cfg = model.cfg
    rng = model._scis_rng
    if cfg.use_pdm:
        for name, point, domain in PDM_WIRING:
            if point not in ("object_logits", "map_logits"):
                raise ConfigurationError(f"missing insertion point {point!r}")
            k = dictionary.matrix(domain).shape[0]
            model.pdm[name] = PdmParams.init(k, N_CLASSES, MODEL_DIM, rng)
    if cfg.use_idm:
        for name, point, domain in IDM_WIRING:
            anchor = float(np.linalg.norm(dictionary.matrix(domain), axis=1).mean())
            model.idm[name] = IdmParams.init(MODEL_DIM, IDM_HEADS, rng,
                                             anchor_scale=anchor)
    return model


# ---------------------------------------------------------------------------
# batches and training
# ---------------------------------------------------------------------------

def build_batch(scenes) -> dict:
    """Stack scenes into dense arrays; ego history becomes one 1-token query."""
    return {
        "obj_feats": np.stack([s.obj_feats for s in scenes]),
        "obj_labels": np.stack([s.obj_labels for s in scenes]),
        "map_feats": np.stack([s.map_feats for s in scenes]),
        "map_labels": np.stack([s.map_labels for s in scenes]),
        "agent_kin": np.stack([s.agent_kin for s in scenes]),
        "agent_future": np.stack([
            agent_future(s.agent_kin).reshape(-1, 2 * N_WAYPOINTS) for s in scenes]),
        "ego_history": np.stack([
            EGO_INPUT_SCALE * s.ego_history.reshape(1, -1) for s in scenes]),
        "expert": np.stack([s.expert_traj.reshape(1, -1) for s in scenes]),
    }


def _apply_feature_dropout(batch: dict, rate: float, rng) -> dict:
    out = dict(batch)
    for key in ("obj_feats", "map_feats", "agent_kin", "ego_history"):
        mask = (rng.uniform(size=batch[key].shape) >= rate).astype(np.float64)
        out[key] = batch[key] * mask
    return out


def _sgd_step(model: PlannerModel, lr: float):
    for _, t in sorted(model.all_parameters().items()):
        if t.grad is not None:
            t.data -= lr * t.grad
        t.zero_grad()


def _train(model: PlannerModel, data, cfg: TrainConfig) -> PlannerModel:
    scenes = list(data.scenes)
    rng = np.random.default_rng(cfg.seed + 1)
    step = 0
    first_epoch_loss = None
    epoch_loss = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        losses = []
        for lo in range(0, len(scenes), cfg.batch_size):
            chunk = [scenes[i] for i in order[lo:lo + cfg.batch_size]]
            batch = build_batch(chunk)
            if cfg.feature_dropout > 0:
                batch = _apply_feature_dropout(batch, cfg.feature_dropout, rng)
            loss = model.loss_on_batch(batch)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged (non-finite) at step {step}")
            ad.backward(loss)
            if model.dictionary is not None:
                for dom, t in model._dict_tensors.items():
                    assert t.grad is None, f"gradient leaked into {dom} dictionary"
                model.dictionary.verify()
            _sgd_step(model, cfg.lr)
            losses.append(value)
            step += 1
        epoch_loss = float(np.mean(losses))
        if first_epoch_loss is None:
            first_epoch_loss = epoch_loss
    if cfg.lr > 0 and cfg.epochs > 1 and epoch_loss >= first_epoch_loss:
        raise TrainingError(
            f"training loss did not decrease ({first_epoch_loss:.4f} -> {epoch_loss:.4f})")
    model.trained = True
    return model


def pretrain_baseline(data, cfg: TrainConfig) -> PlannerModel:
    """Stage-1 training of the plain backbone (no interventions)."""
    if cfg.use_pdm or cfg.use_idm:
        raise ConfigurationError("pretrain_baseline requires intervention flags off")
    return _train(PlannerModel(cfg), data, cfg)


def train_causal(data, dictionary: PrototypeDictionary, cfg: TrainConfig) -> PlannerModel:
    """Stage-2 training from scratch with the frozen dictionary installed."""
    if not (cfg.use_pdm or cfg.use_idm):
        raise ConfigurationError(
            "no intervention flags set: use pretrain_baseline for a plain model")
    dictionary.verify()
    model = PlannerModel(cfg, dictionary)
    if cfg.warm_start_from:
        donor = load_checkpoint(cfg.warm_start_from)
        for name, t in donor.params.items():
            model.params[name].data = t.data.copy()
    model = _train(model, data, cfg)
    dictionary.verify()
    return model


def predict(model: PlannerModel, scene: Scene):
    return model.predict(scene)


def save_checkpoint(model: PlannerModel, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)
        fh.write("\n")


def load_checkpoint(path: str) -> PlannerModel:
    with open(path) as fh:
        return PlannerModel.from_json(json.load(fh))
