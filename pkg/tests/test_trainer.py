import math

import numpy as np
import pytest

from sheaf_sim import config as cfgmod
from sheaf_sim import graph as gr
from sheaf_sim import model as mdl
from sheaf_sim import sheaf as shf
from sheaf_sim import trainer
from sheaf_sim.checks import check_degeneracies, reference_run
from sheaf_sim.errors import ConfigError, NonFinite


def setup(algorithm="sheaf_dmfl_att", extra=()):
    cfg = cfgmod.reference([f"train.algorithm=\"{algorithm}\"", "train.rounds=3", *extra])
    g = cfg.graph()
    state = trainer.init_state(cfg, g)
    datasets = trainer.build_datasets(cfg, g)
    return cfg, state, datasets


def grads_of(state, datasets):
    return [[mdl.loss_and_grads(m, *datasets[i].train)[1] for m in slots]
            for i, slots in enumerate(state.models)]


def steps(alpha=0.1, eta_beta=0.1, eta_phi=0.1, eta=0.0):
    return trainer.StepSizes(alpha, eta_beta, {0: eta_phi, 1: eta_phi}, eta, 1.0, 10.0)


def perturbed(state, seed=0):
    rng = np.random.default_rng(seed)
    models = [[m.copy() for m in slots] for slots in state.models]
    for slots in models:
        for m in slots:
            for enc in m.encoders.values():
                for n in enc:
                    enc[n] = enc[n] + rng.standard_normal(enc[n].shape)
    return models


def test_zero_steps_leave_parameters_unchanged():
    cfg, state, datasets = setup()
    out = trainer.local_step(state, grads_of(state, datasets), steps(0.0, 0.0, 0.0))
    for a, b in zip(out, state.models):
        assert np.array_equal(mdl.flatten(a[0]), mdl.flatten(b[0]))


def test_local_step_on_injected_quadratic_is_exact_gd():
    # for f = ||theta||^2 / 2 the gradient is theta itself
    cfg, state, _ = setup()
    theta0 = [mdl.flatten(s[0]) for s in state.models]
    eta = 0.3
    for _ in range(4):
        grads = [[m.copy() for m in slots] for slots in state.models]
        state.models = trainer.local_step(state, grads, steps(0.0, eta, eta))
    for t0, slots in zip(theta0, state.models):
        m = slots[0]
        enc = np.concatenate([m.encoders[k][n].ravel() for k in sorted(m.encoders) for n in mdl.ENC_KEYS])
        att = np.concatenate([m.attention[k] for k in sorted(m.attention)])
        flat = mdl.flatten(m)
        np.testing.assert_allclose(np.concatenate([enc, att]),
                                   t0[:enc.size + att.size] * (1 - eta) ** 4, rtol=1e-14)
        np.testing.assert_array_equal(flat[enc.size + att.size:], t0[enc.size + att.size:])


def test_small_local_step_decreases_loss():
    cfg, state, datasets = setup()
    grads = grads_of(state, datasets)
    out = trainer.local_step(state, grads, steps(0.0, 1e-3, 1e-3))
    for i, (a, b) in enumerate(zip(state.models, out)):
        assert mdl.loss(b[0], *datasets[i].train) < mdl.loss(a[0], *datasets[i].train)


def test_gossip_fixed_point_at_consensus():
    cfg, state, _ = setup()
    models = [[m.copy() for m in slots] for slots in state.models]
    trainer.gossip_encoders(state, models)
    for a, b in zip(models, state.models):
        for k in a[0].encoders:
            for n in mdl.ENC_KEYS:
                np.testing.assert_allclose(a[0].encoders[k][n], b[0].encoders[k][n], rtol=1e-15, atol=1e-15)


def test_gossip_two_members_average():
    w = gr.MixingMatrix(0, (0, 1), np.full((2, 2), 0.5))
    a, b = np.array([1.0, 3.0]), np.array([5.0, -1.0])
    out = trainer.mix({0: a, 1: b}, w)
    np.testing.assert_array_equal(out[0], (a + b) / 2)
    np.testing.assert_array_equal(out[1], (a + b) / 2)


def test_gossip_preserves_modality_mean():
    cfg, state, _ = setup()
    models = perturbed(state)
    before = {k: {n: np.mean([models[i][0].encoders[k][n] for i in w.members], axis=0)
                  for n in mdl.ENC_KEYS} for k, w in state.mixing.items()}
    trainer.gossip_encoders(state, models)
    for k, w in state.mixing.items():
        for n in mdl.ENC_KEYS:
            after = np.mean([models[i][0].encoders[k][n] for i in w.members], axis=0)
            assert np.max(np.abs(after - before[k][n])) <= 1e-12


def test_repeated_gossip_reaches_consensus():
    cfg, state, _ = setup()
    models = perturbed(state, 3)
    gap = min(gr.spectral_gap(w) for w in state.mixing.values())
    eps = 1e-8

    def spread():
        out = 0.0
        for k, w in state.mixing.items():
            flat = [np.concatenate([models[i][0].encoders[k][n].ravel() for n in mdl.ENC_KEYS])
                    for i in w.members]
            out = max(out, max(np.max(np.abs(a - b)) for a in flat for b in flat))
        return out

    start = spread()
    for _ in range(math.ceil(math.log(start / eps) / gap)):
        trainer.gossip_encoders(state, models)
    assert spread() < eps


def test_head_update_without_coupling_is_plain_gradient_step():
    cfg, state, datasets = setup(extra=["sheaf.lambda=0"])
    grads = grads_of(state, datasets)
    models = [[m.copy() for m in slots] for slots in state.models]
    new = trainer.update_heads(state, models, grads, steps(alpha=0.2))
    for slots, g, w in zip(state.models, grads, new):
        np.testing.assert_array_equal(w, slots[0].head_vector - 0.2 * g[0].head_vector)


def one_dim_state(eta=0.1):
    g = gr.build_graph(2, [(0, 1)], [[0], [0]])
    spec = mdl.ModelSpec((0,), {0: 1}, {0: 1}, 1, 1, "concat")
    models = []
    for w in (1.0, 0.0):
        m = mdl.init_client_model(spec, {0: np.random.default_rng(0)}, np.random.default_rng(0))
        m.head_W = np.array([[w]])
        m.head_b = np.zeros(1)
        models.append([m])
    # head vectors are [W, b]; the single-coordinate map looks only at W
    s = shf.init_restriction_maps(g, [2, 2], 0.5, lam=1.0, eta=eta)
    return trainer.FederationState(g, "sheaf_dmfl", models, gr.mixing_matrices(g), s)


def test_head_update_worked_example():
    state = one_dim_state()
    zero = [[m.zeros_like() for m in slots] for slots in state.models]
    models = [[m.copy() for m in slots] for slots in state.models]
    new = trainer.update_heads(state, models, zero, steps(alpha=0.1))
    assert new[0][0] == pytest.approx(0.9, abs=1e-15)
    assert new[1][0] == pytest.approx(0.1, abs=1e-15)


def test_head_update_fixed_point_at_consensus():
    state = one_dim_state()
    for slots in state.models:
        slots[0].head_W = np.array([[0.7]])
    zero = [[m.zeros_like() for m in slots] for slots in state.models]
    new = trainer.update_heads(state, [[m.copy() for m in s] for s in state.models], zero, steps())
    assert all(w[0] == 0.7 for w in new)


def test_head_update_flags_non_finite():
    state = one_dim_state()
    state.models[0][0].head_W = np.array([[np.inf]])
    zero = [[m.zeros_like() for m in slots] for slots in state.models]
    with pytest.raises(NonFinite):
        trainer.update_heads(state, [[m.copy() for m in s] for s in state.models], zero, steps())


def test_map_exchange_worked_example():
    state = one_dim_state(eta=0.1)
    sheaf, sent = trainer.exchange_and_update_maps(state, [np.array([2.0, 0.0]), np.array([1.0, 0.0])])
    assert sheaf.maps[(0, 1)][0, 0] == pytest.approx(0.8, abs=1e-15)
    assert sent == 4


def test_map_exchange_without_coupling_still_counts_messages():
    state = one_dim_state(eta=0.1)
    state.sheaf = state.sheaf.with_params(lam=0.0)
    sheaf, sent = trainer.exchange_and_update_maps(state, [np.array([2.0, 0.0]), np.array([1.0, 0.0])])
    for key in sheaf.maps:
        np.testing.assert_array_equal(sheaf.maps[key], state.sheaf.maps[key])
    assert sent == 4


def test_communication_closed_form():
    cfg, state, _ = setup()
    g = state.graph
    enc = 12 * 4 + 12 + 6 * 12 + 6
    per_mod = {k: sum(1 for i, j in g.edges if k in g.modality_sets[i] and k in g.modality_sets[j])
               for k in (0, 1)}
    sheaf = sum(4 * state.sheaf.edge_dims[e] for e in g.edges)
    assert trainer.communication_per_round(state) == 2 * enc * (per_mod[0] + per_mod[1]) + sheaf
    _, local, _ = setup("local")
    assert trainer.communication_per_round(local) == 0


def test_dsgd_head_gossip_preserves_group_mean():
    cfg, state, _ = setup("dsgd")
    rng = np.random.default_rng(1)
    models = [[m.copy() for m in slots] for slots in state.models]
    for slots in models:
        for m in slots:
            m.head_W = rng.standard_normal(m.head_W.shape)
    groups = state.graph.groups()
    before = {ms: [np.mean([models[i][s].head_W for i in c], axis=0) for s in range(len(ms))]
              for ms, c in groups.items()}
    trainer.gossip_heads(state, models)
    for ms, c in groups.items():
        for s in range(len(ms)):
            after = np.mean([models[i][s].head_W for i in c], axis=0)
            assert np.max(np.abs(after - before[ms][s])) <= 1e-12


def test_dsgd_keeps_one_unimodal_model_per_modality():
    _, state, _ = setup("dsgd")
    for i, slots in enumerate(state.models):
        assert [m.spec.modalities for m in slots] == [(k,) for k in state.graph.modality_sets[i]]
        assert all(m.spec.fusion == "concat" for m in slots)


def test_default_step_sizes():
    cfg, state, datasets = setup()
    unit_data = [datasets[i].train for i in state.unit_clients()]
    st = trainer.resolve_steps(cfg, state, unit_data)
    assert st.alpha == st.eta_beta == 1.0 / st.L_hat
    assert st.eta_phi == {0: 6 / st.L_hat, 1: 6 / st.L_hat}
    d0 = max(np.linalg.norm(m.head_vector) for m in state.units)
    assert st.d_omega == 10 * d0
    assert st.eta == pytest.approx(1.0 / (1.0 * st.d_omega ** 2))


def test_explicit_step_sizes_override_defaults():
    cfg, state, datasets = setup(extra=["train.alpha=0.05", "train.eta_phi=0.2", "train.eta_p=0.01"])
    st = trainer.resolve_steps(cfg, state, [datasets[i].train for i in state.unit_clients()])
    assert (st.alpha, st.eta_phi[0], st.eta) == (0.05, 0.2, 0.01)


def test_run_emits_one_row_per_round():
    log = trainer.run(cfgmod.reference(["train.rounds=4"]))
    assert [r["round"] for r in log.rows] == [0, 1, 2, 3]
    assert all(math.isfinite(r["psi"]) for r in log.rows)
    assert log.summary["rounds"] == 4 and log.summary["graph_connected"]
    assert set(log.summary["gradient_bound"]) == {"unscaled", "n_scaled"}


def test_local_run_sends_nothing():
    log = trainer.run(cfgmod.reference(["train.rounds=2", "train.algorithm=\"local\""]))
    assert log.column("comm_scalars") == [0, 0]


def test_zero_coupling_unimodal_matches_dsgd_bitwise():
    assert check_degeneracies(rounds=5).passed


def test_averaged_encoder_identity_on_short_run():
    ref = reference_run(cfgmod.reference(["train.rounds=10"]))
    assert ref.encoder_average_error <= 1e-10


def test_minibatches_are_seeded_per_round():
    cfg = cfgmod.reference(["train.full_batch=false", "train.batch_size=16"])
    ds = trainer.build_datasets(cfg, cfg.graph())[0]
    a, b = trainer.batch_for(ds, cfg, 3), trainer.batch_for(ds, cfg, 3)
    assert np.array_equal(a[1], b[1]) and a[1].size == 16
    assert not np.array_equal(trainer.batch_for(ds, cfg, 4)[0][0], a[0][0])


def test_thread_count_does_not_change_the_log(monkeypatch):
    cfg = cfgmod.reference(["train.rounds=3"])
    monkeypatch.setenv("SHEAF_SIM_THREADS", "1")
    one = trainer.run(cfg).to_csv()
    monkeypatch.setenv("SHEAF_SIM_THREADS", "3")
    assert trainer.run(cfg).to_csv() == one


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = cfgmod.reference(["train.rounds=6", "train.checkpoint_every=3"])
    full = trainer.run(cfg, checkpoint_dir=str(tmp_path))
    ckpt = tmp_path / "checkpoint_r00003.npz"
    assert ckpt.exists() and (tmp_path / "checkpoint_r00006.npz").exists()
    resumed = trainer.run(cfg, resume=str(ckpt))
    assert resumed.to_csv() == full.to_csv()
    for a, b in zip(resumed.state.units, full.state.units):
        assert np.array_equal(mdl.flatten(a), mdl.flatten(b))


def test_resume_rejects_other_config(tmp_path):
    cfg = cfgmod.reference(["train.rounds=2", "train.checkpoint_every=1"])
    trainer.run(cfg, checkpoint_dir=str(tmp_path))
    other = cfgmod.reference(["train.rounds=2", "sheaf.gamma=0.5"])
    with pytest.raises(ConfigError):
        trainer.run(other, resume=str(tmp_path / "checkpoint_r00001.npz"))


def test_divergence_keeps_partial_log():
    cfg = cfgmod.reference(["train.rounds=50", "train.alpha=1e6", "train.eta_phi=1e6"])
    with pytest.raises(NonFinite) as exc:
        trainer.run(cfg)
    assert len(exc.value.partial_log.rows) < 50
