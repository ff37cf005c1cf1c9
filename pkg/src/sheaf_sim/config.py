"""Experiment configuration: JSON file + dotted ``key=value`` overrides.

Unknown keys are rejected. A few keys have aliases in a second section
(``sheaf.lambda``/``train.lambda``, ``sheaf.eta``/``train.eta_p``,
``data.seed``/``train.seeds.data``, ``model.init_seed``/``train.seeds.model``);
setting both to different values is an error.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Any

from .errors import ConfigError
from .graph import ClientGraph, build_graph, drone_topology, mixing_matrices, reference_topology

ALGORITHMS = ("sheaf_dmfl", "sheaf_dmfl_att", "local", "dsgd")

DEFAULTS: dict[str, Any] = {
    "graph": {"preset": "reference", "n_clients": None, "edges": None, "modalities": None},
    "data": {
        "latent_dim": 6,
        "n_classes": 4,
        "m_k": [4, 4],
        "noise_std": 0.3,
        "n_per_client": 60,
        "heterogeneity": 0.0,
        "split_frac": 0.8,
        "seed": None,
        "occlusion": None,
    },
    "model": {"hidden": 12, "embed_dim": 6, "n_classes": None, "fusion": "auto", "init_seed": None},
    "sheaf": {"gamma": 0.25, "lambda": None, "eta": None, "init": "identity", "sigma2": 1.0, "seed": 0},
    "train": {
        "algorithm": "sheaf_dmfl_att",
        "rounds": 200,
        "alpha": None,
        "eta_phi": None,
        "eta_beta": None,
        "eta_p": None,
        "lambda": None,
        "batch_size": 0,
        "full_batch": True,
        "seeds": {"data": None, "model": None, "shuffle": 0},
        "dsgd_head_gossip": True,
        "checkpoint_every": 0,
    },
    "output": {"dir": "out", "progress_every": 0},
}

# Desk-scale scenario used by the acceptance checks: nine clients in three
# modality groups, 100 training samples each, mild view heterogeneity.
REFERENCE: dict[str, Any] = {
    "graph": {"preset": "reference"},
    "data": {"n_per_client": 400, "split_frac": 0.25, "noise_std": 0.5, "heterogeneity": 0.3},
    "sheaf": {"lambda": 1.0, "gamma": 0.25, "init": "identity"},
    "train": {"algorithm": "sheaf_dmfl_att", "rounds": 200, "full_batch": True},
}

_FREE_FORM = {("data", "occlusion"), ("graph", "edges"), ("graph", "modalities"),
              ("data", "m_k"), ("model", "embed_dim")}
DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class DataConfig:
    latent_dim: int
    n_classes: int
    m_k: tuple[int, ...]
    noise_std: float
    n_per_client: int
    heterogeneity: float
    split_frac: float
    seed: int
    occlusion: dict | None


@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    embed_dim: int | tuple[int, ...]
    n_classes: int
    fusion: str
    init_seed: int


@dataclass(frozen=True)
class SheafConfig:
    gamma: float
    init: str
    sigma2: float
    seed: int


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str
    rounds: int
    alpha: float | None
    eta_phi: float | None
    eta_beta: float | None
    eta_p: float | None
    lam: float
    batch_size: int
    full_batch: bool
    data_seed: int
    model_seed: int
    shuffle_seed: int
    dsgd_head_gossip: bool
    checkpoint_every: int


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    data: DataConfig
    model: ModelConfig
    sheaf: SheafConfig
    train: TrainConfig
    output_dir: str
    progress_every: int

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def graph(self) -> ClientGraph:
        return graph_from_config(self.raw["graph"])

    @property
    def fusion(self) -> str:
        return self.model.fusion


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        if isinstance(base[key], dict) and path + (key,) not in _FREE_FORM:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {'.'.join(path + (key,))!r} must be a mapping")
            out[key] = _merge(base[key], val, path + (key,))
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, val = text.split("=", 1)
    try:
        parsed = json.loads(val)
    except json.JSONDecodeError:
        parsed = val
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides or ():
        path, val = parse_override(text)
        node = {}
        cur = node
        for p in path[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[path[-1]] = val
        out = _merge(DEFAULTS, _deep_update(out, node))
    return out


def _deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and v:
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def _alias(a, b, name_a: str, name_b: str, default):
    if a is not None and b is not None and a != b:
        raise ConfigError(f"{name_a}={a!r} conflicts with {name_b}={b!r}")
    if a is not None:
        return a
    return b if b is not None else default


def _num(v, name, lo=None, hi=None, integer=False, allow_none=False, lo_open=False, hi_open=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{name}={v!r} below allowed range")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{name}={v!r} above allowed range")
    return int(v) if integer else float(v)


def resolve(raw: dict) -> ExperimentConfig:
    """Validate a merged raw config and build typed sections."""
    raw = _merge(DEFAULTS, raw)
    d, m, s, t = raw["data"], raw["model"], raw["sheaf"], raw["train"]
    if t["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"train.algorithm must be one of {ALGORITHMS}, got {t['algorithm']!r}")
    data_seed = _alias(t["seeds"]["data"], d["seed"], "train.seeds.data", "data.seed", 0)
    model_seed = _alias(t["seeds"]["model"], m["init_seed"], "train.seeds.model", "model.init_seed", 0)
    lam = _alias(t["lambda"], s["lambda"], "train.lambda", "sheaf.lambda", DEFAULT_LAMBDA)
    eta_p = _alias(t["eta_p"], s["eta"], "train.eta_p", "sheaf.eta", None)

    n_classes = _alias(m["n_classes"], d["n_classes"], "model.n_classes", "data.n_classes", None)
    m_k = d["m_k"]
    if not isinstance(m_k, list) or not m_k:
        raise ConfigError("data.m_k must be a nonempty list of input dims")
    occ = d["occlusion"]
    if occ is not None and (not isinstance(occ, dict) or set(occ) != {"modality", "frac"}):
        raise ConfigError("data.occlusion must be null or {modality, frac}")
    data = DataConfig(
        _num(d["latent_dim"], "data.latent_dim", 1, integer=True),
        _num(n_classes, "data.n_classes", 2, integer=True),
        tuple(_num(v, "data.m_k[]", 1, integer=True) for v in m_k),
        _num(d["noise_std"], "data.noise_std", 0.0),
        _num(d["n_per_client"], "data.n_per_client", 2, integer=True),
        _num(d["heterogeneity"], "data.heterogeneity", 0.0, 1.0),
        _num(d["split_frac"], "data.split_frac", 0.0, 1.0, lo_open=True, hi_open=True),
        _num(data_seed, "data.seed", integer=True),
        occ,
    )
    fusion = m["fusion"]
    alg = t["algorithm"]
    forced = {"sheaf_dmfl": "concat", "sheaf_dmfl_att": "attention"}.get(alg)
    if fusion == "auto":
        fusion = forced or "attention"
    elif fusion not in ("concat", "attention"):
        raise ConfigError(f"model.fusion must be auto, concat or attention, got {fusion!r}")
    elif forced and fusion != forced:
        raise ConfigError(f"algorithm {alg} requires fusion {forced!r}, got {fusion!r}")
    emb = m["embed_dim"]
    if isinstance(emb, list):
        if len(emb) != len(data.m_k):
            raise ConfigError("model.embed_dim list needs one entry per modality")
        emb = tuple(_num(v, "model.embed_dim[]", 1, integer=True) for v in emb)
        if fusion == "attention" and len(set(emb)) != 1:
            raise ConfigError("attention fusion needs a single shared embed_dim")
    else:
        emb = _num(emb, "model.embed_dim", 1, integer=True)
    model = ModelConfig(_num(m["hidden"], "model.hidden", 1, integer=True), emb,
                        data.n_classes, fusion, model_seed)
    if s["init"] not in ("identity", "random"):
        raise ConfigError(f"sheaf.init must be identity or random, got {s['init']!r}")
    sheaf = SheafConfig(_num(s["gamma"], "sheaf.gamma", 0.0, 1.0, lo_open=True), s["init"],
                        _num(s["sigma2"], "sheaf.sigma2", 0.0, lo_open=True),
                        _num(s["seed"], "sheaf.seed", integer=True))
    train = TrainConfig(
        alg,
        _num(t["rounds"], "train.rounds", 1, integer=True),
        _num(t["alpha"], "train.alpha", 0.0, lo_open=True, allow_none=True),
        _num(t["eta_phi"], "train.eta_phi", 0.0, allow_none=True),
        _num(t["eta_beta"], "train.eta_beta", 0.0, allow_none=True),
        _num(eta_p, "train.eta_p", 0.0, allow_none=True),
        _num(lam, "train.lambda", 0.0),
        _num(t["batch_size"], "train.batch_size", 0, integer=True),
        bool(t["full_batch"]),
        data_seed,
        model_seed,
        _num(t["seeds"]["shuffle"], "train.seeds.shuffle", integer=True),
        bool(t["dsgd_head_gossip"]),
        _num(t["checkpoint_every"], "train.checkpoint_every", 0, integer=True),
    )
    graph = graph_from_config(raw["graph"])
    mixing_matrices(graph)  # every modality subgraph must be connected
    if len(data.m_k) < graph.n_modalities:
        raise ConfigError(f"data.m_k lists {len(data.m_k)} modalities, graph uses {graph.n_modalities}")
    return ExperimentConfig(raw, data, model, sheaf, train, str(raw["output"]["dir"]),
                            _num(raw["output"]["progress_every"], "output.progress_every", 0,
                                 integer=True))


def graph_from_config(g: dict) -> ClientGraph:
    preset = g.get("preset")
    if g.get("n_clients") is not None:
        if g.get("edges") is None or g.get("modalities") is None:
            raise ConfigError("explicit graphs need n_clients, edges and modalities")
        return build_graph(int(g["n_clients"]), g["edges"], g["modalities"])
    if preset == "reference":
        return reference_topology()
    if preset == "drone20":
        return drone_topology()
    raise ConfigError(f"unknown graph preset {preset!r}")


def load(path: str, overrides=()) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve(apply_overrides(_merge(DEFAULTS, raw), overrides))


def from_dict(raw: dict | None = None, overrides=()) -> ExperimentConfig:
    return resolve(apply_overrides(_merge(DEFAULTS, raw or {}), overrides))


def reference(overrides=()) -> ExperimentConfig:
    return from_dict(REFERENCE, overrides)


def config_hash(raw: dict) -> str:
    """SHA-256 prefix of the canonical JSON, ignoring the ``output`` section."""
    body = {k: v for k, v in _merge(DEFAULTS, raw).items() if k != "output"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]
