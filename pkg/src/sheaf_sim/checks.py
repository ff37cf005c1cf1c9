"""Numerical acceptance checks shared by ``sheaf-sim verify`` and the test suite.

Each check returns a :class:`CheckResult`; none of them raise on a failed
property, so a caller can report every line before deciding the exit code.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from . import graph as gr
from . import metrics as met
from . import model as mdl
from . import sheaf as shf
from . import trainer


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- random instances

def random_connected_graph(rng: np.random.Generator, n: int, p_extra: float = 0.3):
    """Random spanning tree plus independent extra edges."""
    order = rng.permutation(n)
    edges = set()
    for a in range(1, n):
        b = int(rng.integers(0, a))
        i, j = int(order[a]), int(order[b])
        edges.add((min(i, j), max(i, j)))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_extra:
                edges.add((i, j))
    return sorted(edges)


def random_instance(seed: int, fusion: str, n_clients: int = 4):
    """Small multimodal federation with random parameters at the averaged point.

    Returns ``(tilde, templates, data, sheaf)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC4EC]))
    m_k, hidden, emb, n_cls = (3, 2), 4, 3, 3
    choices = [(0,), (1,), (0, 1)]
    sets = choices + [choices[int(rng.integers(3))] for _ in range(n_clients - 3)]
    g = gr.build_graph(n_clients, random_connected_graph(rng, n_clients), sets)
    templates = []
    for i in range(n_clients):
        spec = mdl.ModelSpec(sets[i], {k: m_k[k] for k in sets[i]}, {k: emb for k in sets[i]},
                             hidden, n_cls, fusion)
        m = mdl.init_client_model(spec, {k: rng for k in sets[i]}, rng)
        m.head_b = rng.standard_normal(m.head_b.shape)
        if m.attention is not None:
            m.attention = {k: rng.standard_normal(emb) for k in sets[i]}
        templates.append(m)
    phi = {k: mdl.init_encoder(m_k[k], hidden, emb, rng) for k in (0, 1)}
    for enc in phi.values():
        for n in ("b1", "b2"):
            enc[n] = 0.1 * rng.standard_normal(enc[n].shape)
    data = []
    for m in templates:
        n = int(rng.integers(3, 7))
        data.append(({k: rng.standard_normal((n, m_k[k])) for k in m.spec.modalities},
                     rng.integers(0, n_cls, size=n)))
    dims = [m.spec.head_dim for m in templates]
    sheaf = shf.init_restriction_maps(g, dims, float(rng.uniform(0.2, 1.0)), "random",
                                      1.0, int(rng.integers(1 << 30)), lam=float(rng.uniform(0.1, 1.0)))
    t = met.Tilde(phi, [None if m.attention is None else dict(m.attention) for m in templates],
                  [m.head_vector for m in templates], dict(sheaf.maps))
    return t, templates, data, sheaf


def _block_slices(t: met.Tilde) -> dict[str, slice]:
    sizes = [("phi", sum(a.size for enc in t.phi.values() for a in enc.values())),
             ("beta", sum(v.size for b in t.beta if b is not None for v in b.values())),
             ("omega", sum(w.size for w in t.omega)),
             ("P", sum(p.size for p in (t.maps or {}).values()))]
    out, pos = {}, 0
    for name, n in sizes:
        out[name] = slice(pos, pos + n)
        pos += n
    return out


def gradient_errors(seed: int, fusion: str, eps: float = 1e-5) -> dict[str, float]:
    """Per-block relative error between the analytic and central-difference gradient.

    Each coordinate is differenced on only the terms that depend on it (the
    losses of units that use it and, for heads and maps, the sheaf term).
    """
    t, templates, data, sheaf = random_instance(seed, fusion)
    analytic = met.flatten_tilde(met.grad_as_tilde(met.grad_info(t, templates, data, sheaf), t))
    x0 = met.flatten_tilde(t)
    blocks = _block_slices(t)
    owners = _coordinate_owners(t, templates)

    def partial(x, a):
        tt = met.unflatten_tilde(t, x)
        models = met.materialize(tt, templates)
        total = sum(mdl.loss(models[u], *data[u]) for u in owners[a])
        if a >= blocks["omega"].start:
            total += 0.5 * sheaf.lam * shf.sheaf_quadratic(tt.omega, sheaf.with_params(maps=tt.maps))
        return total

    fd = np.zeros_like(x0)
    for a in range(x0.size):
        x = x0.copy()
        x[a] += eps
        up = partial(x, a)
        x[a] -= 2 * eps
        fd[a] = (up - partial(x, a)) / (2 * eps)
    errs = {}
    for name, sl in blocks.items():
        g, f = analytic[sl], fd[sl]
        if g.size == 0:
            continue
        scale = max(np.linalg.norm(g), np.linalg.norm(f), 1e-12)
        errs[name] = float(np.linalg.norm(g - f) / scale)
    return errs


def _coordinate_owners(t: met.Tilde, templates) -> list[list[int]]:
    """Units whose loss depends on each flattened coordinate (layout of ``flatten_tilde``)."""
    owners = []
    for k in sorted(t.phi):
        users = [u for u, m in enumerate(templates) if k in m.spec.modalities]
        owners += [users] * sum(a.size for a in t.phi[k].values())
    for u, b in enumerate(t.beta):
        if b is not None:
            owners += [[u]] * sum(v.size for v in b.values())
    for u, w in enumerate(t.omega):
        owners += [[u]] * w.size
    owners += [[]] * sum(p.size for p in (t.maps or {}).values())
    return owners


# ---------------------------------------------------------------- gradients, sheaf algebra, mixing

@_timed
def check_gradients(n_seeds: int = 50, tol: float = 1e-4, eps: float = 1e-5) -> CheckResult:
    worst, where = 0.0, None
    for fusion in ("concat", "attention"):
        for seed in range(n_seeds):
            for block, e in gradient_errors(seed, fusion, eps).items():
                if e > worst:
                    worst, where = e, (fusion, seed, block)
    return CheckResult("gradient vs finite differences", worst <= tol,
                       f"{2 * n_seeds} instances, worst relative error {worst:.2e} at {where}",
                       data={"worst": worst})


@_timed
def check_sheaf_algebra(n: int = 100, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(0x5EAF)
    worst_q, worst_sym, min_eig = 0.0, 0.0, np.inf
    for _ in range(n):
        nc = int(rng.integers(2, 6))
        g = gr.build_graph(nc, random_connected_graph(rng, nc), [(0,)] * nc)
        dims = [int(d) for d in rng.integers(1, 9, size=nc)]
        s = shf.init_restriction_maps(g, dims, float(rng.uniform(0.05, 1.0)), "random",
                                      float(rng.uniform(0.1, 2.0)), int(rng.integers(1 << 30)))
        omega = [rng.standard_normal(d) for d in dims]
        p = shf.assemble_block_matrix(s, g)
        w = np.concatenate(omega)
        pw = p @ w
        q_ref = float(pw @ pw)
        q = shf.sheaf_quadratic(omega, s)
        worst_q = max(worst_q, abs(q - q_ref) / max(1.0, abs(q_ref)))
        lf = shf.sheaf_laplacian(s, g)
        worst_sym = max(worst_sym, float(np.max(np.abs(lf - lf.T))))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(lf).min()))
    ok = worst_q <= tol and worst_sym <= tol and min_eig >= -tol
    return CheckResult("sheaf quadratic and Laplacian", ok,
                       f"{n} instances, quadratic mismatch {worst_q:.1e}, asymmetry {worst_sym:.1e}, "
                       f"min eigenvalue {min_eig:.1e}")


@_timed
def check_mixing(n: int = 50, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(0x313)
    worst, min_gap = 0.0, np.inf
    for _ in range(n):
        nc = int(rng.integers(2, 13))
        g = gr.build_graph(nc, random_connected_graph(rng, nc, float(rng.uniform(0.0, 0.5))), [(0,)] * nc)
        w = gr.metropolis_weights(gr.modality_subgraph(g, 0)).weights
        worst = max(worst, float(np.max(np.abs(w - w.T))),
                    float(np.max(np.abs(w.sum(axis=0) - 1.0))),
                    float(np.max(np.abs(w.sum(axis=1) - 1.0))),
                    float(max(0.0, -w.min())))
        min_gap = min(min_gap, gr.spectral_gap(w))
    return CheckResult("mixing matrices", worst <= tol and min_gap > 0.0,
                       f"{n} graphs, worst symmetry/stochasticity defect {worst:.1e}, "
                       f"smallest spectral gap {min_gap:.3g}")


# ---------------------------------------------------------------- reference run

@dataclass
class ReferenceRun:
    log: met.RunLog
    encoder_average_error: float


def reference_run(cfg: cfgmod.ExperimentConfig | None = None) -> ReferenceRun:
    """Run the reference scenario and track the averaged-encoder identity each round."""
    cfg = cfg or cfgmod.reference()
    worst = [0.0]

    def on_round(r, before, after, grads, steps):
        for k, w in before.mixing.items():
            slots = [(i, before.slot_of(i, k)) for i in w.members]
            for n in mdl.ENC_KEYS:
                old = np.mean([before.models[i][s].encoders[k][n] for i, s in slots], axis=0)
                new = np.mean([after.models[i][s].encoders[k][n] for i, s in slots], axis=0)
                g = np.mean([grads[i][s].encoders[k][n] for i, s in slots], axis=0)
                err = np.max(np.abs((new - old) + steps.eta_phi[k] * g))
                worst[0] = max(worst[0], float(err))

    log = trainer.run(cfg, on_round=on_round)
    return ReferenceRun(log, worst[0])


def check_encoder_average(ref: ReferenceRun, tol: float = 1e-10) -> CheckResult:
    return CheckResult("averaged encoder update identity", ref.encoder_average_error <= tol,
                       f"max deviation {ref.encoder_average_error:.2e} over {len(ref.log.rows)} rounds")


def check_monotone(ref: ReferenceRun, tol: float = 1e-8) -> CheckResult:
    inc = ref.log.summary["psi_max_increase"]
    return CheckResult("objective non-increasing", inc <= tol,
                       f"largest per-round increase {inc:.3e}")


def check_descent_inequality(ref: ReferenceRun, tol: float = 1e-8) -> CheckResult:
    rows = ref.log.rows
    worst = min(r["descent_residual"] for r in rows)
    n_bad = sum(r["descent_residual"] < -tol for r in rows)
    alt = min(r["descent_residual_averaged"] for r in rows)
    return CheckResult("one-step descent inequality", worst >= -tol,
                       f"min residual {worst:.3e}, {n_bad}/{len(rows)} rounds below -{tol:g} "
                       f"(averaged-step coefficient: min {alt:.3e})",
                       data={"min": worst, "n_bad": n_bad, "min_averaged": alt})


def check_gradient_bound(ref: ReferenceRun) -> CheckResult:
    th = ref.log.summary["gradient_bound"]
    a, b = th["unscaled"], th["n_scaled"]
    rhs = "undefined" if a["rhs"] is None else f"{a['rhs']:.4g}"
    return CheckResult("average gradient-norm bound", bool(a["holds"]) and a["margin"] > 0,
                       f"lhs {a['lhs']:.4g} <= rhs {rhs} (rho {a['rho']:.3g}); "
                       f"N-scaled rho {b['rho']:.3g} holds={b['holds']}")


# ---------------------------------------------------------------- degenerate configurations

def unimodal_reference_graph() -> gr.ClientGraph:
    ref = gr.reference_topology()
    return gr.build_graph(ref.n_clients, ref.edges, [(0,)] * 3 + [(1,)] * 3 + [(0,)] * 3)


@_timed
def check_degeneracies(rounds: int = 30) -> CheckResult:
    g = unimodal_reference_graph()
    base = {"graph": {"n_clients": g.n_clients, "edges": [list(e) for e in g.edges],
                      "modalities": [list(s) for s in g.modality_sets]},
            "data": cfgmod.REFERENCE["data"],
            "train": {"rounds": rounds, "lambda": 0.0, "dsgd_head_gossip": False}}
    sheaf_cfg = cfgmod.from_dict(base, ["train.algorithm=\"sheaf_dmfl\""])
    dsgd_cfg = cfgmod.from_dict(base, ["train.algorithm=\"dsgd\""])
    a, b = trainer.run(sheaf_cfg), trainer.run(dsgd_cfg)
    same = all(np.array_equal(mdl.flatten(x), mdl.flatten(y))
               for x, y in zip(a.state.units, b.state.units))
    same = same and a.column("loss") == b.column("loss")

    rng = np.random.default_rng(7)
    ref = gr.reference_topology()
    dims = [12] * ref.n_clients
    s = shf.init_restriction_maps(ref, dims, 1.0, "identity")
    omega = [rng.standard_normal(12) for _ in dims]
    consensus = 0.0
    for i, j in ref.edges:
        d = omega[i] - omega[j]
        consensus += float(d @ d)
    exact = shf.sheaf_quadratic(omega, s) == consensus

    local = trainer.run(cfgmod.reference([f"train.rounds={rounds}", "train.algorithm=\"local\""]))
    silent = all(c == 0 for c in local.column("comm_scalars")) and local.summary["comm_scalars_per_round"] == 0
    return CheckResult("degenerate configurations", same and exact and silent,
                       f"zero-coupling sheaf == unimodal DSGD bitwise: {same}; identity maps give "
                       f"consensus penalty exactly: {exact}; local sends nothing: {silent}")


# ---------------------------------------------------------------- accuracy experiments

def final_accuracies(cfg: cfgmod.ExperimentConfig) -> dict[str, float]:
    return trainer.run(cfg).summary["final_test_acc"]


def _seeded(seed: int, extra=()) -> list[str]:
    return [f"train.seeds.data={seed}", f"train.seeds.model={seed}", f"train.seeds.shuffle={seed}",
            *extra]


@_timed
def check_baselines(seeds=range(5)) -> CheckResult:
    acc = {}
    for het in (None, 0.8):
        for alg in ("sheaf_dmfl_att", "local", "dsgd"):
            extra = [f"train.algorithm=\"{alg}\""] + ([f"data.heterogeneity={het}"] if het is not None else [])
            acc[(het, alg)] = [final_accuracies(cfgmod.reference(_seeded(s, extra))) for s in seeds]
    groups = list(acc[(None, "local")][0])
    n = len(list(seeds))

    def mean(key, g):
        return float(np.mean([a[g] for a in acc[key]]))

    wins = {g: sum(a[g] > b[g] for a, b in zip(acc[(None, "sheaf_dmfl_att")], acc[(None, "local")]))
            for g in groups}
    att_mean = float(np.mean([mean((None, "sheaf_dmfl_att"), g) for g in groups]))
    dsgd_mean = float(np.mean([mean((None, "dsgd"), g) for g in groups]))
    het_ok = {g: mean((0.8, "sheaf_dmfl_att"), g) >= mean((0.8, "dsgd"), g) for g in groups}
    ok = all(w >= n - 1 for w in wins.values()) and att_mean >= dsgd_mean and all(het_ok.values())
    table = {f"{alg}{'' if het is None else '@h0.8'}": {g: round(mean((het, alg), g), 4) for g in groups}
             for het, alg in acc}
    return CheckResult("accuracy ordering against baselines", ok,
                       f"wins over local per group {wins}; mean over groups att {att_mean:.4f} vs "
                       f"dsgd {dsgd_mean:.4f}; heterogeneous att>=dsgd {het_ok}",
                       data={"means": table, "wins": wins})


@_timed
def check_gamma(seeds=range(5)) -> CheckResult:
    means = {}
    for gamma in (0.25, 0.1):
        runs = [final_accuracies(cfgmod.reference(_seeded(s, [f"sheaf.gamma={gamma}"]))) for s in seeds]
        means[gamma] = float(np.mean([np.mean(list(a.values())) for a in runs]))
    return CheckResult("edge-stalk compression ablation", means[0.25] >= means[0.1],
                       f"mean accuracy gamma=0.25 {means[0.25]:.4f} vs gamma=0.1 {means[0.1]:.4f}",
                       data=means)


# ---------------------------------------------------------------- determinism

@_timed
def check_determinism(rounds: int | None = None, threads=(1, 2)) -> CheckResult:
    extra = [] if rounds is None else [f"train.rounds={rounds}"]
    cfg = cfgmod.reference(extra)
    old = os.environ.get("SHEAF_SIM_THREADS")
    outs = []
    try:
        for n in (*threads, threads[0]):
            os.environ["SHEAF_SIM_THREADS"] = str(n)
            outs.append(trainer.run(cfg).to_csv().encode())
    finally:
        if old is None:
            os.environ.pop("SHEAF_SIM_THREADS", None)
        else:
            os.environ["SHEAF_SIM_THREADS"] = old
    ok = all(o == outs[0] for o in outs)
    return CheckResult("byte-identical run log", ok,
                       f"{len(outs)} runs with thread counts {(*threads, threads[0])}, identical={ok}")


# ---------------------------------------------------------------- suites

def run_suite(level: str = "fast", report=print) -> list[CheckResult]:
    """``fast`` shrinks instance counts and round budgets and skips the descent
    inequality, the gradient-norm bound and the accuracy experiments; ``full``
    runs every check at its stated size."""
    full = level == "full"
    results = [
        check_gradients(50 if full else 5),
        check_sheaf_algebra(100 if full else 20),
        check_mixing(50 if full else 10),
    ]
    for r in results:
        report(r.line())
    cfg = cfgmod.reference([] if full else ["train.rounds=20"])
    t0 = time.perf_counter()
    ref = reference_run(cfg)
    theory = (check_encoder_average, check_monotone) + ((check_descent_inequality, check_gradient_bound) if full else ())
    for chk in theory:
        r = chk(ref)
        r.seconds = time.perf_counter() - t0
        results.append(r)
        report(r.line())
    more = [lambda: check_degeneracies(30 if full else 5),
            lambda: check_determinism(None if full else 10)]
    if full:
        more += [check_baselines, check_gamma]
    for fn in more:
        r = fn()
        results.append(r)
        report(r.line())
    return results
