"""Synchronous-round federation: sheaf variants plus Local and DSGD baselines.

One round of the sheaf variants is::

    one backward pass per client at theta^r
    local step on encoders (and attention)     -> phi^{r+1/2}, beta^{r+1}
    per-modality gossip with W_k               -> phi^{r+1}
    head step with the sheaf term at omega^r   -> omega^{r+1}
    restriction-map step at omega^{r+1}        -> P^{r+1}

``local`` trains the same per-client model without communication.
``dsgd`` keeps one unimodal model per (client, modality), gossips encoders
within each modality subgraph and, optionally, heads within groups of
clients that hold the same modality set.

Every model is addressed as ``models[client][slot]``; sheaf and local
runs have one slot per client, DSGD one slot per local modality.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as met
from . import model as mdl
from . import sheaf as shf
from .config import ExperimentConfig
from .data import ClientDataset, generate, make_task_spec, occlude
from .errors import ConfigError, NonFinite, SheafSimError
from .graph import (
    ClientGraph,
    MixingMatrix,
    induced_subgraph,
    metropolis_weights,
    mixing_matrices,
    spectral_gap,
)

log = logging.getLogger(__name__)

SHEAF_ALGORITHMS = ("sheaf_dmfl", "sheaf_dmfl_att")


@dataclass
class StepSizes:
    alpha: float
    eta_beta: float
    eta_phi: dict[int, float]
    eta: float
    L_hat: float
    d_omega: float

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "eta_beta": self.eta_beta,
                "eta_phi": {int(k): v for k, v in self.eta_phi.items()},
                "eta": self.eta, "L_hat": self.L_hat, "d_omega": self.d_omega}

    @classmethod
    def from_dict(cls, d: dict) -> "StepSizes":
        return cls(d["alpha"], d["eta_beta"], {int(k): v for k, v in d["eta_phi"].items()},
                   d["eta"], d["L_hat"], d["d_omega"])


@dataclass
class FederationState:
    graph: ClientGraph
    algorithm: str
    models: list[list[mdl.ClientModel]]
    mixing: dict[int, MixingMatrix]
    sheaf: shf.SheafState | None = None
    head_mixing: dict[tuple[int, ...], MixingMatrix] = field(default_factory=dict)
    round: int = 0

    @property
    def units(self) -> list[mdl.ClientModel]:
        return [m for slots in self.models for m in slots]

    def unit_clients(self) -> list[int]:
        return [i for i, slots in enumerate(self.models) for _ in slots]

    def slot_of(self, i: int, k: int) -> int:
        for s, m in enumerate(self.models[i]):
            if k in m.spec.modalities:
                return s
        raise KeyError((i, k))


# ---------------------------------------------------------------- setup

def build_datasets(cfg: ExperimentConfig, graph: ClientGraph) -> list[ClientDataset]:
    d = cfg.data
    if len(d.m_k) < graph.n_modalities:
        raise ConfigError(f"data.m_k lists {len(d.m_k)} modalities, graph uses {graph.n_modalities}")
    spec = make_task_spec(d.latent_dim, d.n_classes, d.m_k, d.noise_std, d.seed)
    datasets = generate(spec, graph, d.n_per_client, d.heterogeneity, d.split_frac)
    if d.occlusion is not None:
        k, frac = int(d.occlusion["modality"]), float(d.occlusion["frac"])
        datasets = [occlude(ds, k, frac) if k in ds.x else ds for ds in datasets]
    return datasets


def _embed_dims(cfg: ExperimentConfig, n_modalities: int) -> dict[int, int]:
    e = cfg.model.embed_dim
    if isinstance(e, tuple):
        return {k: e[k] for k in range(n_modalities)}
    return {k: e for k in range(n_modalities)}


def _make_model(cfg: ExperimentConfig, client: int, modalities: tuple[int, ...], fusion: str):
    spec = mdl.ModelSpec(modalities, {k: cfg.data.m_k[k] for k in modalities},
                         {k: v for k, v in _embed_dims(cfg, max(modalities) + 1).items() if k in modalities},
                         cfg.model.hidden, cfg.model.n_classes, fusion)
    seed = cfg.train.model_seed
    # identical encoder init for every client sharing a modality
    enc_rngs = {k: np.random.default_rng(np.random.SeedSequence([seed, 0xE4C, k])) for k in modalities}
    head_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD, client, *modalities]))
    return mdl.init_client_model(spec, enc_rngs, head_rng)


def init_state(cfg: ExperimentConfig, graph: ClientGraph) -> FederationState:
    alg = cfg.train.algorithm
    mixing = mixing_matrices(graph)
    if alg == "dsgd":
        models = [[_make_model(cfg, i, (k,), "concat") for k in graph.modality_sets[i]]
                  for i in range(graph.n_clients)]
        head_mixing = {}
        if cfg.train.dsgd_head_gossip:
            for ms, members in graph.groups().items():
                head_mixing[ms] = metropolis_weights(induced_subgraph(graph, members))
        return FederationState(graph, alg, models, mixing, None, head_mixing)
    models = [[_make_model(cfg, i, graph.modality_sets[i], cfg.fusion)] for i in range(graph.n_clients)]
    sheaf = None
    if alg in SHEAF_ALGORITHMS:
        dims = [slots[0].spec.head_dim for slots in models]
        sheaf = shf.init_restriction_maps(graph, dims, cfg.sheaf.gamma, cfg.sheaf.init,
                                          cfg.sheaf.sigma2, cfg.sheaf.seed, lam=cfg.train.lam)
    return FederationState(graph, alg, models, mixing, sheaf)


def resolve_steps(cfg: ExperimentConfig, state: FederationState, unit_data) -> StepSizes:
    """Fill unset step sizes from the theory defaults.

    ``alpha = eta_beta = 1/L``, ``eta_phi_k = |V_k|/L``, ``eta = 1/(lam D^2)``
    with ``L`` the Gauss-Newton smoothness estimate (x2) at the start and
    ``D`` ten times the largest initial head norm.
    """
    units = state.units
    tilde = met.tilde_of(units, state.sheaf)
    L = met.estimate_smoothness(tilde, units, unit_data, state.sheaf)
    t = cfg.train
    d_omega = 10.0 * max(float(np.linalg.norm(m.head_vector)) for m in units)
    sizes = {k: len(w.members) for k, w in state.mixing.items()}
    eta_phi = {k: (t.eta_phi if t.eta_phi is not None else v / L) for k, v in sizes.items()}
    if t.eta_p is not None:
        eta = t.eta_p
    else:
        eta = 1.0 / (t.lam * d_omega ** 2) if t.lam > 0 and state.sheaf is not None else 0.0
    return StepSizes(t.alpha if t.alpha is not None else 1.0 / L,
                     t.eta_beta if t.eta_beta is not None else 1.0 / L,
                     eta_phi, eta, L, d_omega)


def communication_per_round(state: FederationState) -> int:
    """Scalars sent per round, in closed form from graph and model sizes."""
    if state.algorithm == "local":
        return 0
    total = 0
    g = state.graph
    for k, w in state.mixing.items():
        i0 = w.members[0]
        enc = state.models[i0][state.slot_of(i0, k)].encoders[k]
        size = sum(a.size for a in enc.values())
        n_edges = sum(1 for i, j in g.edges if i in w.members and j in w.members)
        total += 2 * n_edges * size
    for ms, w in state.head_mixing.items():
        n_edges = sum(1 for i, j in g.edges if i in w.members and j in w.members)
        for m in state.models[w.members[0]]:
            total += 2 * n_edges * m.spec.head_dim
    if state.sheaf is not None:
        total += shf.message_scalars(state.sheaf)
    return total


# ---------------------------------------------------------------- round ops

def batch_for(ds: ClientDataset, cfg: ExperimentConfig, r: int):
    x, y = ds.train
    b = cfg.train.batch_size
    if cfg.train.full_batch or b == 0 or b >= y.size:
        return x, y
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.shuffle_seed, 0x5EED, r, ds.client]))
    idx = np.sort(rng.permutation(y.size)[:b])
    return {k: v[idx] for k, v in x.items()}, y[idx]


def local_step(state: FederationState, grads, steps: StepSizes) -> list[list[mdl.ClientModel]]:
    """Gradient step on encoders and attention; heads are copied unchanged."""
    out = []
    for slots, gslots in zip(state.models, grads):
        new_slots = []
        for m, g in zip(slots, gslots):
            nm = m.copy()
            for k in m.encoders:
                for n in mdl.ENC_KEYS:
                    nm.encoders[k][n] = m.encoders[k][n] - steps.eta_phi[k] * g.encoders[k][n]
            if m.attention is not None:
                for k in m.attention:
                    nm.attention[k] = m.attention[k] - steps.eta_beta * g.attention[k]
            new_slots.append(nm)
        out.append(new_slots)
    return out


def mix(values: dict[int, np.ndarray], w: MixingMatrix) -> dict[int, np.ndarray]:
    """``out_i = sum_j w_ij v_j`` over the nonzero weights, ascending ``j``."""
    out = {}
    for a, i in enumerate(w.members):
        acc = None
        for b, j in enumerate(w.members):
            wij = w.weights[a, b]
            if wij == 0.0:
                continue
            term = wij * values[j]
            acc = term if acc is None else acc + term
        out[i] = acc
    return out


def gossip_encoders(state: FederationState, models) -> None:
    """Replace every encoder with its mixing-weighted neighbourhood average (in place on ``models``)."""
    for k, w in state.mixing.items():
        slots = {i: state.slot_of(i, k) for i in w.members}
        for n in mdl.ENC_KEYS:
            mixed = mix({i: models[i][slots[i]].encoders[k][n] for i in w.members}, w)
            for i in w.members:
                models[i][slots[i]].encoders[k][n] = mixed[i]


def update_heads(state: FederationState, models, grads, steps: StepSizes) -> list[np.ndarray]:
    """Head step (with the sheaf term for sheaf variants) on all units; returns new heads."""
    old = [m.head_vector for slots in state.models for m in slots]
    g = [gg.head_vector for gslots in grads for gg in gslots]
    with np.errstate(over="ignore", invalid="ignore"):
        if state.sheaf is not None:
            sg = shf.sheaf_gradients(old, state.sheaf)
            new = [w - steps.alpha * (gi + si) for w, gi, si in zip(old, g, sg)]
        else:
            new = [w - steps.alpha * gi for w, gi in zip(old, g)]
    u = 0
    for slots in models:
        for m in slots:
            if not np.all(np.isfinite(new[u])):
                raise NonFinite(f"head update produced non-finite values (unit {u})")
            m.set_head_vector(new[u])
            u += 1
    return new


def gossip_heads(state: FederationState, models) -> None:
    for ms, w in state.head_mixing.items():
        for s in range(len(ms)):
            for attr in ("head_W", "head_b"):
                mixed = mix({i: getattr(models[i][s], attr) for i in w.members}, w)
                for i in w.members:
                    setattr(models[i][s], attr, mixed[i])


def exchange_and_update_maps(state: FederationState, omega_new) -> tuple[shf.SheafState | None, int]:
    if state.sheaf is None:
        return None, 0
    return shf.update_restriction_maps(state.sheaf, omega_new), shf.message_scalars(state.sheaf)


def _executor():
    n = int(os.environ.get("SHEAF_SIM_THREADS", "1") or 1)
    return ThreadPoolExecutor(max_workers=n) if n > 1 else None


def _map(executor, fn, items):
    return list(executor.map(fn, items)) if executor is not None else [fn(a) for a in items]


def round_step(state: FederationState, cfg: ExperimentConfig, datasets, steps: StepSizes,
               executor=None, return_grads: bool = False):
    """Advance one synchronous round; returns ``(new_state, comm)`` and, on
    request, the per-unit gradients taken at the start of the round."""
    r = state.round
    batches = [batch_for(ds, cfg, r) for ds in datasets]
    jobs = [(m, batches[i]) for i, slots in enumerate(state.models) for m in slots]
    flat = _map(executor, lambda job: mdl.loss_and_grads(job[0], *job[1])[1], jobs)
    grads, u = [], 0
    for slots in state.models:
        grads.append(flat[u:u + len(slots)])
        u += len(slots)

    models = local_step(state, grads, steps)
    if state.algorithm != "local":
        gossip_encoders(state, models)
    for slots in models:
        for m in slots:
            for enc in m.encoders.values():
                if not all(np.all(np.isfinite(a)) for a in enc.values()):
                    raise NonFinite(f"encoder update produced non-finite values at round {r}")
    omega_new = update_heads(state, models, grads, steps)
    if state.head_mixing:
        gossip_heads(state, models)
    sheaf, _ = exchange_and_update_maps(state, omega_new)
    comm = communication_per_round(state)
    new = FederationState(state.graph, state.algorithm, models, state.mixing, sheaf,
                          state.head_mixing, r + 1)
    if return_grads:
        return new, comm, grads
    return new, comm



# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str, state: FederationState, steps: StepSizes, runlog: met.RunLog,
                    config_hash: str) -> None:
    arrays = {}
    for i, slots in enumerate(state.models):
        for s, m in enumerate(slots):
            arrays[f"unit_{i}_{s}"] = mdl.flatten(m)
    if state.sheaf is not None:
        for (i, j), p in state.sheaf.maps.items():
            arrays[f"map_{i}_{j}"] = p
    meta = {"version": 1, "round": state.round, "algorithm": state.algorithm,
            "config_hash": config_hash, "steps": steps.as_dict(), "rows": runlog.rows}
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str, state: FederationState, config_hash: str):
    """Restore parameters into a freshly initialised ``state``."""
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta["config_hash"] != config_hash:
            raise ConfigError(f"checkpoint {path} was written by config {meta['config_hash']}, "
                              f"not {config_hash}")
        models = [[mdl.unflatten(m, z[f"unit_{i}_{s}"]) for s, m in enumerate(slots)]
                  for i, slots in enumerate(state.models)]
        sheaf = state.sheaf
        if sheaf is not None:
            sheaf = sheaf.with_params(maps={key: z[f"map_{key[0]}_{key[1]}"].copy() for key in sheaf.maps})
    restored = FederationState(state.graph, state.algorithm, models, state.mixing, sheaf,
                               state.head_mixing, meta["round"])
    return restored, StepSizes.from_dict(meta["steps"]), meta["rows"]


# ---------------------------------------------------------------- driver

def run(cfg: ExperimentConfig, graph: ClientGraph | None = None, datasets=None, *,
        checkpoint_dir: str | None = None, resume: str | None = None,
        on_round=None) -> met.RunLog:
    """Execute ``cfg.train.rounds`` synchronous rounds and return the run log.

    ``on_round(r, before, after, grads, steps)`` is called after every round.
    On a numeric failure the partially filled log is attached to the raised
    exception as ``exc.partial_log``.
    """
    t0 = time.perf_counter()
    graph = graph if graph is not None else cfg.graph()
    datasets = datasets if datasets is not None else build_datasets(cfg, graph)
    state = init_state(cfg, graph)
    unit_data = [datasets[i].train for i in state.unit_clients()]
    groups = [met.group_name(ms) for ms in graph.groups()]
    runlog = met.RunLog(met.runlog_columns(sorted(state.mixing), groups))
    chash = cfg.hash

    if resume is not None:
        state, steps, rows = load_checkpoint(resume, state, chash)
        runlog.rows = rows
    else:
        steps = resolve_steps(cfg, state, unit_data)
    if state.sheaf is not None:
        state.sheaf = state.sheaf.with_params(eta=steps.eta)

    sizes = {k: len(w.members) for k, w in state.mixing.items()}
    step_dict = {"eta_beta": steps.eta_beta if cfg.fusion == "attention" else 0.0,
                 "eta_phi": steps.eta_phi}
    executor = _executor()
    info = met.grad_info(met.tilde_of(state.units, state.sheaf), state.units, unit_data,
                         state.sheaf, executor)
    try:
        for r in range(state.round, cfg.train.rounds):
            omega_prev = [m.head_vector for m in state.units]
            new_state, comm, grads = round_step(state, cfg, datasets, steps, executor, True)
            info_next = met.grad_info(met.tilde_of(new_state.units, new_state.sheaf),
                                      new_state.units, unit_data, new_state.sheaf, executor)
            delta = [m.head_vector - w for m, w in zip(new_state.units, omega_prev)]
            resid = met.descent_residual(info.f, info_next.f, info, step_dict, steps.L_hat,
                                        delta, sizes)
            resid_avg = met.descent_residual(info.f, info_next.f, info, step_dict, steps.L_hat,
                                            delta, sizes, encoder_coeff="averaged")
            train_acc, _ = met.evaluate(new_state, datasets, "train")
            test_acc, _ = met.evaluate(new_state, datasets, "test")
            row = {"round": r, "psi": info.psi, "psi_next": info_next.psi, "loss": info.f,
                   "sheaf_quad": info.quad, "gn2_omega": info.gn2_omega, "gn2_beta": info.gn2_beta,
                   "gn2_P": info.gn2_P, "gn2_total": info.gn2_total, "descent_residual": resid,
                   "descent_residual_averaged": resid_avg,
                   "max_head_norm": max(float(np.linalg.norm(m.head_vector)) for m in new_state.units),
                   "comm_scalars": comm, "config_hash": chash}
            for k in sorted(state.mixing):
                row[f"gn2_phi_m{k}"] = info.gn2_phi(k)
            for g in groups:
                row[f"train_acc_{g}"] = train_acc[g]
                row[f"test_acc_{g}"] = test_acc[g]
            if not np.isfinite(info_next.psi):
                raise NonFinite(f"objective is not finite after round {r}")
            runlog.rows.append(row)
            if on_round is not None:
                on_round(r, state, new_state, grads, steps)
            state, info = new_state, info_next
            if cfg.progress_every and (r + 1) % cfg.progress_every == 0:
                log.info("round %d psi=%.6g test=%s", r + 1, info.psi, test_acc)
            if checkpoint_dir and cfg.train.checkpoint_every and (r + 1) % cfg.train.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"checkpoint_r{r + 1:05d}.npz"),
                                state, steps, runlog, chash)
    except SheafSimError as exc:
        exc.partial_log = runlog
        raise
    finally:
        if executor is not None:
            executor.shutdown()

    runlog.summary = summarize(cfg, state, steps, runlog, datasets, time.perf_counter() - t0)
    runlog.state = state
    return runlog


def summarize(cfg: ExperimentConfig, state: FederationState, steps: StepSizes, runlog: met.RunLog,
              datasets, wall: float) -> dict:
    rows = runlog.rows
    sizes = {k: len(w.members) for k, w in state.mixing.items()}
    test_acc, per_client = met.evaluate(state, datasets, "test")
    train_acc, _ = met.evaluate(state, datasets, "train")
    out = {
        "config_hash": cfg.hash,
        "algorithm": cfg.train.algorithm,
        "rounds": len(rows),
        "final_test_acc": test_acc,
        "final_train_acc": train_acc,
        "final_client_test_acc": per_client,
        "steps": steps.as_dict(),
        "comm_scalars_per_round": communication_per_round(state),
        "graph_connected": state.graph.is_connected(),
        "spectral_gaps": {str(k): spectral_gap(w) for k, w in state.mixing.items()},
        "psi_star": 0.0,
        "wall_clock_s": wall,
    }
    if rows:
        out["psi_max_increase"] = max(r["psi_next"] - r["psi"] for r in rows)
        out["descent_min_residual"] = min(r["descent_residual"] for r in rows)
        out["descent_min_residual_averaged"] = min(r["descent_residual_averaged"] for r in rows)
        out["head_norm_bounded"] = all(r["max_head_norm"] <= steps.d_omega for r in rows)
        rhos = met.rho_constants(
            {"alpha": steps.alpha, "eta_beta": steps.eta_beta, "eta_phi": steps.eta_phi,
             "eta": steps.eta if state.sheaf is not None else 0.0},
            steps.L_hat, cfg.train.lam if state.sheaf is not None else 0.0, steps.d_omega,
            sizes, state.graph.n_clients, cfg.fusion == "attention")
        out["gradient_bound"] = {}
        for name, rho in rhos.items():
            chk = met.stationarity_bound([r["gn2_total"] for r in rows], rows[0]["psi"], rho)
            # undefined bound (rho <= 0) is written as null, not NaN
            out["gradient_bound"][name] = {"rho": rho, "holds": chk.holds, "lhs": chk.lhs,
                                     "rhs": None if np.isnan(chk.rhs) else chk.rhs,
                                     "margin": None if np.isnan(chk.margin) else chk.margin}
    return out
