"""Global objective, gradient blocks, descent/stationarity checks and run logs.

Theory quantities are evaluated at the *averaged* point: every encoder of
modality ``k`` is replaced by the mean over all models holding it, while
attention vectors, heads and restriction maps stay per client. Accuracy is
always measured on the deployed per-client parameters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as mdl
from . import sheaf as shf


# ------------------------------------------------------------ averaged point

@dataclass
class Tilde:
    """Parameters of the averaged point; ``beta[u]`` is None in concat mode."""

    phi: dict[int, dict[str, np.ndarray]]
    beta: list[dict[int, np.ndarray] | None]
    omega: list[np.ndarray]
    maps: dict[tuple[int, int], np.ndarray] | None = None


def average_encoders(units: Sequence[mdl.ClientModel]) -> dict[int, dict[str, np.ndarray]]:
    """Per-modality mean encoder, summed in ascending unit order."""
    acc: dict[int, dict[str, np.ndarray]] = {}
    count: dict[int, int] = {}
    for m in units:
        for k, enc in m.encoders.items():
            if k not in acc:
                acc[k] = {n: enc[n].copy() for n in mdl.ENC_KEYS}
                count[k] = 1
            else:
                for n in mdl.ENC_KEYS:
                    acc[k][n] = acc[k][n] + enc[n]
                count[k] += 1
    return {k: {n: a / count[k] for n, a in acc[k].items()} for k in sorted(acc)}


def tilde_of(units: Sequence[mdl.ClientModel], sheaf: shf.SheafState | None = None) -> Tilde:
    return Tilde(
        average_encoders(units),
        [None if m.attention is None else dict(m.attention) for m in units],
        [m.head_vector for m in units],
        None if sheaf is None else dict(sheaf.maps),
    )


def materialize(t: Tilde, templates: Sequence[mdl.ClientModel]) -> list[mdl.ClientModel]:
    out = []
    for u, m in enumerate(templates):
        mm = mdl.ClientModel(m.spec, {k: t.phi[k] for k in m.spec.modalities},
                             t.beta[u], m.head_W, m.head_b)
        mm.set_head_vector(t.omega[u])
        out.append(mm)
    return out


def _sheaf_at(t: Tilde, sheaf: shf.SheafState) -> shf.SheafState:
    return sheaf if t.maps is None else sheaf.with_params(maps=t.maps)


def global_objective(t: Tilde, templates, data, sheaf: shf.SheafState | None = None) -> float:
    """``sum_u f_u(averaged point) + lam/2 * sheaf quadratic``."""
    total = 0.0
    for m, (x, y) in zip(materialize(t, templates), data):
        total += mdl.loss(m, x, y)
    if sheaf is not None and sheaf.lam != 0.0:
        total += 0.5 * sheaf.lam * shf.sheaf_quadratic(t.omega, _sheaf_at(t, sheaf))
    return total


@dataclass
class GradInfo:
    f: float
    quad: float
    psi: float
    g_phi: dict[int, dict[str, np.ndarray]]
    g_beta: list[dict[int, np.ndarray] | None]
    g_omega_f: list[np.ndarray]
    g_omega: list[np.ndarray]
    g_maps: dict[tuple[int, int], np.ndarray]

    @property
    def gn2_beta(self) -> float:
        return float(sum(float(v @ v) for b in self.g_beta if b is not None for v in b.values()))

    def gn2_phi(self, k: int) -> float:
        return float(sum(float(np.sum(a * a)) for a in self.g_phi[k].values()))

    @property
    def gn2_omega(self) -> float:
        return float(sum(float(v @ v) for v in self.g_omega))

    @property
    def gn2_P(self) -> float:
        return float(sum(float(np.sum(a * a)) for a in self.g_maps.values()))

    @property
    def gn2_total(self) -> float:
        return self.gn2_beta + sum(self.gn2_phi(k) for k in self.g_phi) + self.gn2_omega + self.gn2_P


def grad_info(t: Tilde, templates, data, sheaf: shf.SheafState | None = None,
              executor=None) -> GradInfo:
    """Objective and every gradient block of it at the averaged point."""
    models = materialize(t, templates)
    jobs = list(zip(models, data))
    run = (lambda fn, it: list(executor.map(fn, it))) if executor else (lambda fn, it: list(map(fn, it)))
    results = run(lambda md: mdl.loss_and_grads(md[0], *md[1]), jobs)
    f = 0.0
    g_phi: dict[int, dict[str, np.ndarray]] = {}
    g_beta, g_omega_f = [], []
    for val, g in results:
        f += val
        for k in sorted(g.encoders):
            if k not in g_phi:
                g_phi[k] = {n: g.encoders[k][n].copy() for n in mdl.ENC_KEYS}
            else:
                for n in mdl.ENC_KEYS:
                    g_phi[k][n] = g_phi[k][n] + g.encoders[k][n]
        g_beta.append(g.attention)
        g_omega_f.append(g.head_vector)
    g_phi = {k: g_phi[k] for k in sorted(g_phi)}
    quad, g_maps = 0.0, {}
    g_omega = list(g_omega_f)
    if sheaf is not None:
        s = _sheaf_at(t, sheaf)
        quad = shf.sheaf_quadratic(t.omega, s)
        sg = shf.sheaf_gradients(t.omega, s)
        g_omega = [a + b for a, b in zip(g_omega_f, sg)]
        g_maps = shf.map_gradients(t.omega, s)
    lam = 0.0 if sheaf is None else sheaf.lam
    return GradInfo(f, quad, f + 0.5 * lam * quad, g_phi, g_beta, g_omega_f, g_omega, g_maps)


def flatten_tilde(t: Tilde) -> np.ndarray:
    parts = [t.phi[k][n].ravel() for k in sorted(t.phi) for n in mdl.ENC_KEYS]
    for b in t.beta:
        if b is not None:
            parts += [b[k] for k in sorted(b)]
    parts += list(t.omega)
    if t.maps is not None:
        parts += [t.maps[key].ravel() for key in sorted(t.maps)]
    return np.concatenate(parts)


def unflatten_tilde(template: Tilde, vec: np.ndarray) -> Tilde:
    pos = 0

    def take(shape):
        nonlocal pos
        size = math.prod(shape)
        out = vec[pos:pos + size].reshape(shape).copy()
        pos += size
        return out

    phi = {k: {n: take(template.phi[k][n].shape) for n in mdl.ENC_KEYS} for k in sorted(template.phi)}
    beta = [None if b is None else {k: take(b[k].shape) for k in sorted(b)} for b in template.beta]
    omega = [take(w.shape) for w in template.omega]
    maps = None
    if template.maps is not None:
        maps = {key: take(template.maps[key].shape) for key in sorted(template.maps)}
    return Tilde(phi, beta, omega, maps)


def grad_as_tilde(gi: GradInfo, like: Tilde) -> Tilde:
    """Pack the analytic gradient of the objective in the layout of ``like``."""
    maps = None if like.maps is None else {key: gi.g_maps[key] for key in like.maps}
    return Tilde(gi.g_phi, gi.g_beta, gi.g_omega, maps)


# ------------------------------------------------------------ smoothness

def estimate_smoothness(t: Tilde, templates, data, sheaf: shf.SheafState | None = None,
                        iters: int = 50, safety: float = 2.0, seed: int = 0) -> float:
    """``safety`` x largest eigenvalue of the Gauss-Newton matrix of the objective.

    The operator acts on the averaged-point variables (shared encoders,
    per-client attention and heads); the sheaf term enters exactly as
    ``lam * L_F`` on the heads. Power iteration from a seeded start.
    """
    models = materialize(t, templates)
    shape = Tilde(t.phi, t.beta, t.omega, None)
    v = np.random.default_rng(seed).standard_normal(flatten_tilde(shape).size)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        tv = unflatten_tilde(shape, v)
        out_phi: dict[int, dict[str, np.ndarray]] = {k: {n: np.zeros_like(a) for n, a in enc.items()}
                                                     for k, enc in t.phi.items()}
        out_beta, out_omega = [], []
        for u, (m, (x, y)) in enumerate(zip(models, data)):
            tangent = mdl.ClientModel(m.spec, {k: tv.phi[k] for k in m.spec.modalities},
                                      tv.beta[u], m.head_W, m.head_b)
            tangent.set_head_vector(tv.omega[u])
            gv = mdl.gauss_newton_matvec(m, x, y, tangent)
            for k in gv.encoders:
                for n in mdl.ENC_KEYS:
                    out_phi[k][n] = out_phi[k][n] + gv.encoders[k][n]
            out_beta.append(gv.attention)
            out_omega.append(gv.head_vector)
        if sheaf is not None and sheaf.lam != 0.0:
            sg = shf.sheaf_gradients(tv.omega, sheaf)
            out_omega = [a + b for a, b in zip(out_omega, sg)]
        w = flatten_tilde(Tilde(out_phi, out_beta, out_omega, None))
        est = float(v @ w)
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            break
        v = w / nrm
    return safety * max(est, 1e-12)


# ------------------------------------------------------------ theory checks

def descent_residual(f_prev: float, f_next: float, info_prev: GradInfo, steps: dict,
                    L: float, omega_delta: Sequence[np.ndarray], group_sizes: dict[int, int],
                    encoder_coeff: str = "stated") -> float:
    """RHS minus LHS of the one-step descent inequality (>= 0 means it holds).

    ``steps`` holds ``eta_beta`` and ``eta_phi`` (per modality). With
    ``encoder_coeff="stated"`` the encoder term uses
    ``eta_phi |V_k|^2 (1 - L eta_phi / (2|V_k|))``. ``"averaged"`` uses
    ``eta_phi / |V_k|`` in place of ``eta_phi |V_k|^2``, which is what a
    smoothness expansion of the averaged-encoder step gives when the
    gradient block is the sum over clients.
    """
    if encoder_coeff not in ("stated", "averaged"):
        raise ValueError(f"unknown encoder_coeff {encoder_coeff!r}")
    eb = steps.get("eta_beta", 0.0)
    rhs = f_prev - eb * (1.0 - L * eb / 2.0) * info_prev.gn2_beta
    for k in info_prev.g_phi:
        ep, v = steps["eta_phi"][k], group_sizes[k]
        scale = v * v if encoder_coeff == "stated" else 1.0 / v
        rhs -= ep * scale * (1.0 - L * ep / (2.0 * v)) * info_prev.gn2_phi(k)
    lin = sum(float(g @ d) for g, d in zip(info_prev.g_omega_f, omega_delta))
    quad = sum(float(d @ d) for d in omega_delta)
    rhs += lin + 0.5 * L * quad
    return rhs - f_next


def rho_constants(steps: dict, L: float, lam: float, d_omega: float, group_sizes: dict[int, int],
                  n_clients: int, attention: bool) -> dict[str, float]:
    """``rho`` under the two readings of the restriction-map term.

    ``unscaled``: ``eta (1 - eta lam D^2 / 2)``; ``n_scaled``: with ``N D^2``.
    """
    a = steps["alpha"]
    terms = [a * (1.0 - L * a / 2.0)]
    if attention:
        eb = steps["eta_beta"]
        terms.append(eb * (1.0 - L * eb / 2.0))
    terms.append(min(steps["eta_phi"][k] * v * v * (1.0 - L * steps["eta_phi"][k] / (2.0 * v))
                     for k, v in group_sizes.items()))
    eta = steps.get("eta", 0.0)
    out = {}
    for name, scale in (("unscaled", 1.0), ("n_scaled", float(n_clients))):
        t = list(terms)
        if lam > 0.0 and eta > 0.0:
            t.append(eta * (1.0 - eta * lam * scale * d_omega ** 2 / 2.0))
        out[name] = min(t)
    return out


@dataclass
class BoundCheck:
    holds: bool
    lhs: float
    rhs: float
    margin: float


def stationarity_bound(gn2_total: Sequence[float], psi0: float, rho: float, psi_star: float = 0.0) -> BoundCheck:
    """Average squared gradient norm against ``(psi0 - psi_star) / (rho R)``."""
    R = len(gn2_total)
    lhs = float(np.mean(gn2_total))
    if rho <= 0.0:
        return BoundCheck(False, lhs, math.nan, math.nan)
    rhs = (psi0 - psi_star) / (rho * R)
    return BoundCheck(lhs <= rhs, lhs, rhs, rhs - lhs)


# ------------------------------------------------------------ accuracy

def group_name(ms: Sequence[int]) -> str:
    return "+".join(f"m{k}" for k in ms)


def evaluate(state, datasets, which: str = "test") -> tuple[dict[str, float], list[float]]:
    """Per-group and per-client accuracy on the deployed models.

    Clients with several unimodal models (DSGD) are scored per modality;
    a group reports its best modality's group mean.
    """
    graph = state.graph
    per_unit = []
    for i, units in enumerate(state.models):
        x, y = datasets[i].split(which)
        per_unit.append([mdl.accuracy(m, x, y) for m in units])
    groups, per_client = {}, [0.0] * graph.n_clients
    for ms, members in graph.groups().items():
        n_slots = len(state.models[members[0]])
        means = [float(np.mean([per_unit[i][s] for i in members])) for s in range(n_slots)]
        best = int(np.argmax(means))
        groups[group_name(ms)] = means[best]
        for i in members:
            per_client[i] = per_unit[i][best]
    return groups, per_client


# ------------------------------------------------------------ run log

@dataclass
class RunLog:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    state: object = None  # final federation state, not serialised

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def runlog_columns(modalities: Sequence[int], group_names: Sequence[str]) -> list[str]:
    cols = ["round", "psi", "psi_next", "loss", "sheaf_quad",
            "gn2_omega", "gn2_beta"]
    cols += [f"gn2_phi_m{k}" for k in modalities]
    cols += ["gn2_P", "gn2_total", "descent_residual", "descent_residual_averaged", "max_head_norm", "comm_scalars"]
    cols += [f"train_acc_{g}" for g in group_names]
    cols += [f"test_acc_{g}" for g in group_names]
    cols += ["config_hash"]
    return cols
